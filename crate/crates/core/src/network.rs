//! Plain and highway feedforward networks with tied, bias-free gates.
//!
//! Layer 1 maps the input to `H` units with a sigmoid. Every later layer of a
//! highway network computes
//!
//! ```text
//! h_l = σ(W_l h_{l-1} + b_l) ∘ T(h_{l-1}) + h_{l-1} ∘ C(h_{l-1})
//! T(v) = σ(W_T v)        C(v) = σ(W_c v)
//! ```
//!
//! with one `(W_T, W_c)` pair shared by all layers. A disabled transform gate
//! is the constant 1, a disabled carry gate the constant 0, and constrained
//! gates use `C = 1 - T` without allocating `W_c`.
//!
//! Minibatches are row-major (`B × dim`); weights are stored output-major
//! (`out × in`) so pre-activations are `X · Wᵀ`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::softmax_temperature;
use crate::scalar::Scalar;

/// Which gate functions a highway network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub transform_enabled: bool,
    pub carry_enabled: bool,
    /// `C = 1 - T`; implies both gates are active but only `W_T` exists.
    pub constrained: bool,
}

impl GateConfig {
    pub const BOTH: GateConfig = GateConfig {
        transform_enabled: true,
        carry_enabled: true,
        constrained: false,
    };
    pub const TRANSFORM_ONLY: GateConfig = GateConfig {
        transform_enabled: true,
        carry_enabled: false,
        constrained: false,
    };
    pub const CARRY_ONLY: GateConfig = GateConfig {
        transform_enabled: false,
        carry_enabled: true,
        constrained: false,
    };
    pub const CONSTRAINED: GateConfig = GateConfig {
        transform_enabled: true,
        carry_enabled: true,
        constrained: true,
    };

    pub fn new(transform_enabled: bool, carry_enabled: bool, constrained: bool) -> Result<Self> {
        let g = GateConfig {
            transform_enabled,
            carry_enabled: carry_enabled || constrained,
            constrained,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.constrained && !self.transform_enabled {
            return Err(Error::Config("constrained gates require the transform gate".into()));
        }
        if !self.transform_enabled && !self.carry_enabled {
            return Err(Error::Config("a highway network needs at least one gate".into()));
        }
        Ok(())
    }

    /// Whether `W_T` is a stored parameter.
    pub fn has_transform_weights(&self) -> bool {
        self.transform_enabled
    }

    /// Whether `W_c` is a stored parameter.
    pub fn has_carry_weights(&self) -> bool {
        self.carry_enabled && !self.constrained
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    PlainDnn,
    Highway(GateConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub output_dim: usize,
    pub architecture: Architecture,
}

impl ModelConfig {
    pub fn plain(input_dim: usize, hidden_dim: usize, num_layers: usize, output_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim,
            num_layers,
            output_dim,
            architecture: Architecture::PlainDnn,
        }
    }

    pub fn highway(
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        output_dim: usize,
        gates: GateConfig,
    ) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim,
            num_layers,
            output_dim,
            architecture: Architecture::Highway(gates),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Architecture::Highway(g) = self.architecture {
            g.validate()?;
        }
        Ok(())
    }

    pub fn gates(&self) -> Option<GateConfig> {
        match self.architecture {
            Architecture::PlainDnn => None,
            Architecture::Highway(g) => Some(g),
        }
    }

    pub fn is_highway(&self) -> bool {
        self.gates().is_some()
    }
}

/// The three independently trainable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// θ_h: hidden-layer weights and biases.
    Hidden,
    /// θ_g: the tied gate matrices.
    Gate,
    /// θ_c: the output (softmax) layer.
    Output,
}

/// Selects which parameter groups an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask {
    pub update_theta_h: bool,
    pub update_theta_g: bool,
    pub update_theta_c: bool,
}

impl ParamMask {
    pub const ALL: ParamMask = ParamMask {
        update_theta_h: true,
        update_theta_g: true,
        update_theta_c: true,
    };
    pub const GATES_ONLY: ParamMask = ParamMask {
        update_theta_h: false,
        update_theta_g: true,
        update_theta_c: false,
    };

    pub fn new(update_theta_h: bool, update_theta_g: bool, update_theta_c: bool) -> Result<Self> {
        let m = ParamMask {
            update_theta_h,
            update_theta_g,
            update_theta_c,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.update_theta_h || self.update_theta_g || self.update_theta_c) {
            return Err(Error::Config("parameter mask excludes every group".into()));
        }
        Ok(())
    }

    pub fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Hidden => self.update_theta_h,
            ParamGroup::Gate => self.update_theta_g,
            ParamGroup::Output => self.update_theta_c,
        }
    }

    /// True when only θ_g may change.
    pub fn is_gates_only(&self) -> bool {
        self.update_theta_g && !self.update_theta_h && !self.update_theta_c
    }
}

/// Affine layer: `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

/// Tied gate weights, absent entries for disabled (or constrained) gates.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights<T: Scalar> {
    pub transform: Option<Matrix<T>>,
    pub carry: Option<Matrix<T>>,
}

/// Model parameters, also used to hold gradients and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T: Scalar> {
    /// θ_h, one entry per hidden layer.
    pub hidden: Vec<Layer<T>>,
    /// θ_g, shared by layers 2…L.
    pub gates: GateWeights<T>,
    /// θ_c.
    pub output: Layer<T>,
}

impl<T: Scalar> Parameters<T> {
    /// Zero-filled parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_dim;
        let hidden = (0..config.num_layers)
            .map(|l| Layer {
                weight: Matrix::zeros(h, if l == 0 { config.input_dim } else { h }),
                bias: vec![T::zero(); h],
            })
            .collect();
        let gates = match config.gates() {
            None => GateWeights {
                transform: None,
                carry: None,
            },
            Some(g) => GateWeights {
                transform: g.has_transform_weights().then(|| Matrix::zeros(h, h)),
                carry: g.has_carry_weights().then(|| Matrix::zeros(h, h)),
            },
        };
        Parameters {
            hidden,
            gates,
            output: Layer {
                weight: Matrix::zeros(config.output_dim, h),
                bias: vec![T::zero(); config.output_dim],
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let zero_layer = |l: &Layer<T>| Layer {
            weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
            bias: vec![T::zero(); l.bias.len()],
        };
        Parameters {
            hidden: self.hidden.iter().map(zero_layer).collect(),
            gates: GateWeights {
                transform: self.gates.transform.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
                carry: self.gates.carry.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            },
            output: zero_layer(&self.output),
        }
    }

    /// Every parameter array in declaration order: θ_h (W₁, b₁, …), θ_g
    /// (W_T, W_c), θ_c (W_out, b_out).
    pub fn arrays(&self) -> Vec<(ParamGroup, &[T])> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 4);
        for l in &self.hidden {
            out.push((ParamGroup::Hidden, l.weight.as_slice()));
            out.push((ParamGroup::Hidden, l.bias.as_slice()));
        }
        if let Some(w) = &self.gates.transform {
            out.push((ParamGroup::Gate, w.as_slice()));
        }
        if let Some(w) = &self.gates.carry {
            out.push((ParamGroup::Gate, w.as_slice()));
        }
        out.push((ParamGroup::Output, self.output.weight.as_slice()));
        out.push((ParamGroup::Output, self.output.bias.as_slice()));
        out
    }

    /// Mutable counterpart of [`Parameters::arrays`], same order.
    pub fn arrays_mut(&mut self) -> Vec<(ParamGroup, &mut [T])> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 4);
        for l in &mut self.hidden {
            out.push((ParamGroup::Hidden, l.weight.as_mut_slice()));
            out.push((ParamGroup::Hidden, l.bias.as_mut_slice()));
        }
        if let Some(w) = &mut self.gates.transform {
            out.push((ParamGroup::Gate, w.as_mut_slice()));
        }
        if let Some(w) = &mut self.gates.carry {
            out.push((ParamGroup::Gate, w.as_mut_slice()));
        }
        out.push((ParamGroup::Output, self.output.weight.as_mut_slice()));
        out.push((ParamGroup::Output, self.output.bias.as_mut_slice()));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.arrays()
            .iter()
            .filter(|(g, _)| *g == group)
            .map(|(_, a)| a.len())
            .sum()
    }

    /// Array lengths in declaration order; two parameter sets are
    /// structurally compatible iff these agree.
    pub fn layout(&self) -> Vec<(ParamGroup, usize)> {
        self.arrays().iter().map(|(g, a)| (*g, a.len())).collect()
    }

    /// Checks that `self` has exactly the shapes `config` prescribes.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let expected = Parameters::<T>::zeros(config);
        let ok = self.hidden.len() == expected.hidden.len()
            && self
                .hidden
                .iter()
                .zip(&expected.hidden)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
            && self.gates.transform.as_ref().map(Matrix::shape) == expected.gates.transform.as_ref().map(Matrix::shape)
            && self.gates.carry.as_ref().map(Matrix::shape) == expected.gates.carry.as_ref().map(Matrix::shape)
            && self.output.weight.shape() == expected.output.weight.shape()
            && self.output.bias.len() == expected.output.bias.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Consistency(
                "parameter shapes do not match the model configuration".into(),
            ))
        }
    }

    /// Bitwise equality of one parameter group.
    pub fn group_bits_equal(&self, other: &Self, group: ParamGroup) -> bool {
        let a = self.arrays();
        let b = other.arrays();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .filter(|((g, _), _)| *g == group)
                .all(|((_, x), (_, y))| {
                    x.len() == y.len()
                        && x.iter()
                            .zip(y.iter())
                            .all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
                })
    }

    pub fn bits_equal(&self, other: &Self) -> bool {
        [ParamGroup::Hidden, ParamGroup::Gate, ParamGroup::Output]
            .iter()
            .all(|&g| self.group_bits_equal(other, g))
    }

    /// Converts element type.
    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let layer = |l: &Layer<T>| Layer {
            weight: l.weight.cast(),
            bias: l.bias.iter().map(|&b| U::lit(b.as_f64())).collect(),
        };
        Parameters {
            hidden: self.hidden.iter().map(layer).collect(),
            gates: GateWeights {
                transform: self.gates.transform.as_ref().map(Matrix::cast),
                carry: self.gates.carry.as_ref().map(Matrix::cast),
            },
            output: layer(&self.output),
        }
    }
}

/// Draws every weight i.i.d. uniform on [-0.5, 0.5] in declaration order
/// from a ChaCha8 stream seeded with `seed`; biases are zero.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Parameters<T>> {
    config.validate()?;
    let mut params = Parameters::<T>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-0.5f64, 0.5).expect("valid range");
    let fill = |m: &mut Matrix<T>, rng: &mut ChaCha8Rng| {
        for w in m.as_mut_slice() {
            *w = T::lit(dist.sample(rng));
        }
    };
    for l in &mut params.hidden {
        fill(&mut l.weight, &mut rng);
    }
    if let Some(w) = &mut params.gates.transform {
        fill(w, &mut rng);
    }
    if let Some(w) = &mut params.gates.carry {
        fill(w, &mut rng);
    }
    fill(&mut params.output.weight, &mut rng);
    Ok(params)
}

/// Exact scalar parameter count for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    let (d, h, l, j) = (
        config.input_dim,
        config.hidden_dim,
        config.num_layers,
        config.output_dim,
    );
    let gates = match config.gates() {
        None => 0,
        Some(g) => (g.has_transform_weights() as usize + g.has_carry_weights() as usize) * h * h,
    };
    d * h + h + l.saturating_sub(1) * (h * h + h) + gates + h * j + j
}

/// Per-layer cached values.
#[derive(Clone, Debug)]
pub struct LayerTrace<T: Scalar> {
    /// `W_l h_{l-1} + b_l`.
    pub pre_activation: Matrix<T>,
    /// `σ(pre_activation)`.
    pub activation: Matrix<T>,
    /// Transform gate values; `None` means the constant 1.
    pub transform: Option<Matrix<T>>,
    /// Carry gate values; `None` means the constant 0.
    pub carry: Option<Matrix<T>>,
    /// Layer output `h_l`.
    pub output: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar> {
    pub input: Matrix<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub logits: Matrix<T>,
    pub posteriors: Matrix<T>,
    pub temperature: T,
    fixed_gates: bool,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn hidden_output(&self) -> &Matrix<T> {
        &self.layers.last().expect("at least one layer").output
    }
}

#[derive(Clone, Copy)]
enum Route<T> {
    Separate,
    Packed,
    Fixed { transform: T, carry: T },
}

/// Runs the network on a `B × input_dim` batch, producing posteriors at the
/// given softmax temperature.
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    batch: &Matrix<T>,
    temperature: T,
) -> Result<ForwardTrace<T>> {
    forward_route(params, config, batch, temperature, Route::Separate)
}

/// Same as [`forward`] but computes each highway layer's three
/// pre-activations with one product against the packed `[W_l; W_T; W_c]`.
/// Requires both gates, unconstrained.
pub fn forward_packed<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    batch: &Matrix<T>,
    temperature: T,
) -> Result<ForwardTrace<T>> {
    forward_route(params, config, batch, temperature, Route::Packed)
}

/// Forward pass with both gates replaced by constants. Only for checking
/// structural reductions; the resulting trace cannot be backpropagated.
#[doc(hidden)]
pub fn forward_with_fixed_gates<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    batch: &Matrix<T>,
    temperature: T,
    transform: T,
    carry: T,
) -> Result<ForwardTrace<T>> {
    forward_route(params, config, batch, temperature, Route::Fixed { transform, carry })
}

fn forward_route<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    batch: &Matrix<T>,
    temperature: T,
    route: Route<T>,
) -> Result<ForwardTrace<T>> {
    config.validate()?;
    params.check_config(config)?;
    if !(temperature > T::zero()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if batch.cols() != config.input_dim {
        return Err(Error::Shape {
            op: "forward",
            left: batch.shape(),
            right: (batch.rows(), config.input_dim),
        });
    }
    if matches!(route, Route::Fixed { .. }) && !config.is_highway() {
        return Err(Error::Config("fixed gates need a highway network".into()));
    }

    let h = config.hidden_dim;
    let mut layers: Vec<LayerTrace<T>> = Vec::with_capacity(config.num_layers);
    for (idx, layer) in params.hidden.iter().enumerate() {
        let prev = if idx == 0 { batch } else { &layers[idx - 1].output };
        let gates = config.gates().filter(|_| idx > 0);
        let trace = match gates {
            None => {
                let pre = prev.matmul_nt(&layer.weight)?.add_row_vector(&layer.bias)?;
                let act = pre.sigmoid();
                LayerTrace {
                    output: act.clone(),
                    pre_activation: pre,
                    activation: act,
                    transform: None,
                    carry: None,
                }
            }
            Some(g) => {
                let (pre, gate_t, gate_c) = match route {
                    Route::Packed => {
                        let packed = pack_weights(params, config, idx + 1)?;
                        let mut parts = prev.matmul_nt(&packed)?.split_cols(&[h, h, h])?;
                        let gate_c = parts.pop();
                        let gate_t = parts.pop();
                        let pre = parts.pop().expect("three blocks").add_row_vector(&layer.bias)?;
                        (pre, gate_t, gate_c)
                    }
                    _ => {
                        let pre = prev.matmul_nt(&layer.weight)?.add_row_vector(&layer.bias)?;
                        let gate_t = params.gates.transform.as_ref().map(|w| prev.matmul_nt(w)).transpose()?;
                        let gate_c = params.gates.carry.as_ref().map(|w| prev.matmul_nt(w)).transpose()?;
                        (pre, gate_t, gate_c)
                    }
                };
                let act = pre.sigmoid();
                let (transform, carry) = match route {
                    Route::Fixed { transform, carry } => (
                        Some(Matrix::filled(prev.rows(), h, transform)),
                        Some(Matrix::filled(prev.rows(), h, carry)),
                    ),
                    _ => {
                        let t = if g.transform_enabled {
                            gate_t.map(|m| m.sigmoid())
                        } else {
                            None
                        };
                        let c = if g.constrained {
                            t.as_ref().map(|t| t.map(|v| T::one() - v))
                        } else if g.carry_enabled {
                            gate_c.map(|m| m.sigmoid())
                        } else {
                            None
                        };
                        (t, c)
                    }
                };
                let mut out = match &transform {
                    Some(t) => act.hadamard(t)?,
                    None => act.clone(),
                };
                if let Some(c) = &carry {
                    out.add_assign(&prev.hadamard(c)?)?;
                }
                LayerTrace {
                    pre_activation: pre,
                    activation: act,
                    transform,
                    carry,
                    output: out,
                }
            }
        };
        if !trace.output.all_finite() {
            return Err(Error::Numeric { layer: idx + 1 });
        }
        layers.push(trace);
    }

    let last = &layers.last().expect("num_layers >= 1").output;
    let logits = last
        .matmul_nt(&params.output.weight)?
        .add_row_vector(&params.output.bias)?;
    if !logits.all_finite() {
        return Err(Error::Numeric {
            layer: config.num_layers + 1,
        });
    }
    let posteriors = softmax_temperature(&logits, temperature)?;
    Ok(ForwardTrace {
        input: batch.clone(),
        layers,
        logits,
        posteriors,
        temperature,
        fixed_gates: matches!(route, Route::Fixed { .. }),
    })
}

/// Stacks `[W_l; W_T; W_c]` for a highway layer (1-based index in 2…L).
pub fn pack_weights<T: Scalar>(params: &Parameters<T>, config: &ModelConfig, layer: usize) -> Result<Matrix<T>> {
    match config.gates() {
        Some(g) if g.has_transform_weights() && g.has_carry_weights() => {}
        Some(_) => return Err(Error::Config("packing needs both gates with separate weights".into())),
        None => return Err(Error::Config("packing needs a highway network".into())),
    }
    if layer < 2 || layer > config.num_layers {
        return Err(Error::Config(format!(
            "layer {layer} has no gates (valid: 2..={})",
            config.num_layers
        )));
    }
    let (Some(wt), Some(wc)) = (&params.gates.transform, &params.gates.carry) else {
        return Err(Error::Consistency("gate weights missing".into()));
    };
    Matrix::vstack(&[&params.hidden[layer - 1].weight, wt, wc])
}

/// Exact gradients of a scalar loss with respect to every parameter, given
/// the loss gradient with respect to the logits (`B × J`). Contributions are
/// summed over the batch; batch averaging belongs to the loss.
pub fn backward<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    trace: &ForwardTrace<T>,
    d_logits: &Matrix<T>,
) -> Result<Parameters<T>> {
    params.check_config(config)?;
    if trace.fixed_gates {
        return Err(Error::Consistency("trace was produced with fixed gates".into()));
    }
    if trace.layers.len() != config.num_layers
        || trace.input.cols() != config.input_dim
        || trace.logits.cols() != config.output_dim
        || trace
            .layers
            .iter()
            .any(|l| l.output.shape() != (trace.batch_size(), config.hidden_dim))
    {
        return Err(Error::Consistency(
            "forward trace does not belong to this configuration".into(),
        ));
    }
    if d_logits.shape() != trace.logits.shape() {
        return Err(Error::Shape {
            op: "backward",
            left: d_logits.shape(),
            right: trace.logits.shape(),
        });
    }

    let mut grads = params.zeros_like();
    let gates = config.gates();

    grads.output.weight = d_logits.matmul_tn(trace.hidden_output())?;
    grads.output.bias = d_logits.column_sums();
    let mut dh = d_logits.matmul(&params.output.weight)?;

    for idx in (0..config.num_layers).rev() {
        let lt = &trace.layers[idx];
        let prev = if idx == 0 {
            &trace.input
        } else {
            &trace.layers[idx - 1].output
        };
        let gate = gates.filter(|_| idx > 0);

        let ds = match (&gate, &lt.transform) {
            (Some(_), Some(t)) => dh.hadamard(t)?,
            _ => dh.clone(),
        };
        let da = ds.zip_map(&lt.activation, |g, s| g * s * (T::one() - s))?;
        grads.hidden[idx].weight = da.matmul_tn(prev)?;
        grads.hidden[idx].bias = da.column_sums();
        if idx == 0 {
            break;
        }

        let mut dprev = da.matmul(&params.hidden[idx].weight)?;
        if let Some(g) = gate {
            if let (Some(t), Some(wt)) = (&lt.transform, &params.gates.transform) {
                let mut dt = dh.hadamard(&lt.activation)?;
                if g.constrained {
                    // C = 1 - T feeds back into the transform gate.
                    dt = dt.sub(&dh.hadamard(prev)?)?;
                }
                let dgt = dt.zip_map(t, |d, v| d * v * (T::one() - v))?;
                grads
                    .gates
                    .transform
                    .as_mut()
                    .expect("shaped like params")
                    .add_assign(&dgt.matmul_tn(prev)?)?;
                dprev.add_assign(&dgt.matmul(wt)?)?;
            }
            if let Some(c) = &lt.carry {
                dprev.add_assign(&dh.hadamard(c)?)?;
                if let Some(wc) = &params.gates.carry {
                    let dgc = dh.hadamard(prev)?.zip_map(c, |d, v| d * v * (T::one() - v))?;
                    grads
                        .gates
                        .carry
                        .as_mut()
                        .expect("shaped like params")
                        .add_assign(&dgc.matmul_tn(prev)?)?;
                    dprev.add_assign(&dgc.matmul(wc)?)?;
                }
            }
        }
        dh = dprev;
    }
    Ok(grads)
}
