//! Minibatch SGD with classical momentum, parameter-group masking, and the
//! training, adaptation and evaluation drivers.
//!
//! Learning rates are per sample: every loss averages its gradient over the
//! minibatch, so the step is `lr · mean gradient`. Momentum follows the
//! two-phase schedule (0 in the first epoch, 0.9 afterwards) unless
//! overridden. Sequence objectives take one utterance per step and
//! normalise the sequence risk by the utterance length, so the smoothing
//! weight `p` compares per-frame quantities.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    regularized_sequence_loss, smbr_forward_backward, Lattice, ReferencePath, SmbrResult, SmoothingMode,
};
use crate::linalg::Matrix;
use crate::losses::{ce_loss, hybrid_loss, kl_loss, LossResult};
use crate::network::{backward, forward, ModelConfig, ParamMask, Parameters};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy on hard labels.
    Ce,
    /// Teacher–student KL.
    Kd,
    /// KL + q · CE.
    Hybrid,
    /// sMBR + p · CE.
    SmbrCe,
    /// sMBR + p · KL.
    SmbrKl,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Ce,
        Objective::Kd,
        Objective::Hybrid,
        Objective::SmbrCe,
        Objective::SmbrKl,
    ];

    pub fn needs_teacher(self) -> bool {
        matches!(self, Objective::Kd | Objective::Hybrid | Objective::SmbrKl)
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, Objective::SmbrCe | Objective::SmbrKl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Kd => "kd",
            Objective::Hybrid => "hybrid",
            Objective::SmbrCe => "smbr_ce",
            Objective::SmbrKl => "smbr_kl",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

/// Momentum used in epoch 1 and in every later epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub first_epoch: f64,
    pub later: f64,
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        MomentumSchedule {
            first_epoch: 0.0,
            later: 0.9,
        }
    }
}

impl MomentumSchedule {
    /// Momentum for a 1-based epoch number.
    pub fn for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= 1 {
            self.first_epoch
        } else {
            self.later
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Per-sample learning rate.
    pub learning_rate: f64,
    pub momentum: MomentumSchedule,
    pub epochs: usize,
    /// Frames per minibatch for frame objectives; sequence objectives step
    /// once per utterance.
    pub batch_size: usize,
    /// Hybrid interpolation weight.
    pub q: f64,
    /// Sequence smoothing weight.
    pub p: f64,
    pub temperature: f64,
    /// Acoustic scale.
    pub k: f64,
    pub mask: ParamMask,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Ce,
            learning_rate: 0.1,
            momentum: MomentumSchedule::default(),
            epochs: 10,
            batch_size: 32,
            q: 0.0,
            p: 0.2,
            temperature: 1.0,
            k: 1.0,
            mask: ParamMask::ALL,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("k", self.k),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("q", self.q), ("p", self.p)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("momentum.first_epoch", self.momentum.first_epoch),
            ("momentum.later", self.momentum.later),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.mask.validate()
    }
}

/// Velocity buffers, one per parameter array.
#[derive(Clone, Debug)]
pub struct MomentumState<T: Scalar> {
    pub velocity: Parameters<T>,
}

impl<T: Scalar> MomentumState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        MomentumState {
            velocity: params.zeros_like(),
        }
    }
}

/// `v ← momentum · v − lr · g; θ ← θ + v` for every group the mask allows.
/// Masked groups (parameters and velocities) are left untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut MomentumState<T>,
    lr: T,
    momentum: T,
    mask: ParamMask,
) -> Result<()> {
    if params.layout() != grads.layout() || params.layout() != state.velocity.layout() {
        return Err(Error::Consistency(
            "parameters, gradients and momentum state differ in shape".into(),
        ));
    }
    let grad_arrays = grads.arrays();
    for (((group, theta), (_, v)), (_, g)) in params
        .arrays_mut()
        .into_iter()
        .zip(state.velocity.arrays_mut())
        .zip(grad_arrays)
    {
        if !mask.allows(group) {
            continue;
        }
        for ((t, v), &g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v - lr * g;
            *t += *v;
        }
    }
    Ok(())
}

/// Feature rows with one class label each.
#[derive(Clone, Debug)]
pub struct LabeledFrames<T: Scalar> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledFrames<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(LabeledFrames { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        LabeledFrames {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// One utterance for sequence training: frames, denominator lattice and the
/// reference state sequence (also its frame labels).
#[derive(Clone, Debug)]
pub struct Utterance<T: Scalar> {
    pub features: Matrix<T>,
    pub lattice: Lattice<T>,
    pub reference: ReferencePath,
}

impl<T: Scalar> Utterance<T> {
    pub fn new(features: Matrix<T>, lattice: Lattice<T>, reference: ReferencePath) -> Result<Self> {
        if features.rows() != lattice.num_frames() || reference.states.len() != lattice.num_frames() {
            return Err(Error::Consistency(format!(
                "utterance has {} feature rows, {} reference states, {} lattice frames",
                features.rows(),
                reference.states.len(),
                lattice.num_frames()
            )));
        }
        Ok(Utterance {
            features,
            lattice,
            reference,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a, T: Scalar> {
    Frames(&'a LabeledFrames<T>),
    Sequences(&'a [Utterance<T>]),
}

/// A fixed model whose posteriors serve as soft targets.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a, T: Scalar> {
    pub params: &'a Parameters<T>,
    pub config: &'a ModelConfig,
}

impl<T: Scalar> Teacher<'_, T> {
    pub fn posteriors(&self, features: &Matrix<T>, temperature: T) -> Result<Matrix<T>> {
        Ok(forward(self.params, self.config, features, temperature)?.posteriors)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 for the state before any update.
    pub epoch: usize,
    pub objective: Objective,
    pub loss: f64,
    pub fer: f64,
    /// Expected state accuracy per frame, sequence objectives only.
    pub expected_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub params: Parameters<T>,
    pub metrics: Vec<EpochMetrics>,
}

/// Writes `epoch,objective,loss,fer,expected_accuracy` rows, leaving the last
/// field empty when it does not apply.
pub fn write_metrics_csv<W: Write>(out: W, metrics: &[EpochMetrics], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if header {
        w.write_record(["epoch", "objective", "loss", "fer", "expected_accuracy"])
            .map_err(csv_err)?;
    }
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.objective.to_string(),
            m.loss.to_string(),
            m.fer.to_string(),
            m.expected_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn frame_error_count(posteriors: &Matrix<impl Scalar>, labels: &[usize]) -> usize {
    posteriors
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a != b)
        .count()
}

/// Per-frame sequence objective on one utterance: the sMBR risk divided by
/// the utterance length, plus `p` times the mean frame loss.
struct SequenceStep<T: Scalar> {
    value: T,
    d_logits: Matrix<T>,
    expected_accuracy: T,
    errors: usize,
}

fn sequence_step<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    utt: &Utterance<T>,
    teacher_post: Option<&Matrix<T>>,
    tcfg: &TrainConfig,
) -> Result<(SequenceStep<T>, crate::network::ForwardTrace<T>)> {
    let temp = T::lit(tcfg.temperature);
    let trace = forward(params, config, &utt.features, temp)?;
    let log_post = trace.posteriors.ln()?;
    let smbr = smbr_forward_backward(&utt.lattice, &utt.reference, &log_post, T::lit(tcfg.k))?;
    let frames = T::from_count(utt.lattice.num_frames());
    let normalised = SmbrResult {
        expected_accuracy: smbr.expected_accuracy,
        loss: smbr.loss / frames,
        d_log_posteriors: smbr.d_log_posteriors.scale(T::one() / frames),
        log_partition: smbr.log_partition,
    };
    let (frame, mode): (LossResult<T>, _) = match (tcfg.objective, teacher_post) {
        (Objective::SmbrKl, Some(soft)) => (kl_loss(&trace.posteriors, soft, temp)?, SmoothingMode::KlSmoothed),
        (Objective::SmbrCe, _) => (
            ce_loss(&trace.posteriors, &utt.reference.states, temp)?,
            SmoothingMode::CeSmoothed,
        ),
        _ => return Err(Error::Config("sequence objective without its frame targets".into())),
    };
    let seq = regularized_sequence_loss(&normalised, &frame, &trace.posteriors, temp, T::lit(tcfg.p), mode)?;
    let errors = frame_error_count(&trace.posteriors, &utt.reference.states);
    Ok((
        SequenceStep {
            value: seq.value,
            d_logits: seq.d_logits,
            expected_accuracy: smbr.expected_accuracy,
            errors,
        },
        trace,
    ))
}

fn frame_objective<T: Scalar>(
    objective: Objective,
    posteriors: &Matrix<T>,
    labels: &[usize],
    soft: Option<&Matrix<T>>,
    tcfg: &TrainConfig,
) -> Result<LossResult<T>> {
    let temp = T::lit(tcfg.temperature);
    match (objective, soft) {
        (Objective::Ce, _) => ce_loss(posteriors, labels, temp),
        (Objective::Kd, Some(s)) => kl_loss(posteriors, s, temp),
        (Objective::Hybrid, Some(s)) => hybrid_loss(posteriors, s, labels, T::lit(tcfg.q), temp),
        _ => Err(Error::Config(format!(
            "{objective} is not a frame objective with these targets"
        ))),
    }
}

/// One minibatch as seen by an objective.
#[derive(Clone, Copy, Debug)]
pub enum Batch<'a, T: Scalar> {
    Frames {
        features: &'a Matrix<T>,
        labels: &'a [usize],
        soft: Option<&'a Matrix<T>>,
    },
    Utterance {
        utterance: &'a Utterance<T>,
        soft: Option<&'a Matrix<T>>,
    },
}

/// Value of the configured objective on one batch and its exact gradient
/// with respect to every parameter, as used by [`train`].
pub fn objective_and_gradient<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    batch: Batch<'_, T>,
    tcfg: &TrainConfig,
) -> Result<(T, Parameters<T>)> {
    match batch {
        Batch::Frames { features, labels, soft } => {
            let trace = forward(params, config, features, T::lit(tcfg.temperature))?;
            let loss = frame_objective(tcfg.objective, &trace.posteriors, labels, soft, tcfg)?;
            let grads = backward(params, config, &trace, &loss.d_logits)?;
            Ok((loss.value, grads))
        }
        Batch::Utterance { utterance, soft } => {
            let (step, trace) = sequence_step(params, config, utterance, soft, tcfg)?;
            let grads = backward(params, config, &trace, &step.d_logits)?;
            Ok((step.value, grads))
        }
    }
}

/// Objective value only; the forward-only counterpart of
/// [`objective_and_gradient`].
pub fn objective_value<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    batch: Batch<'_, T>,
    tcfg: &TrainConfig,
) -> Result<T> {
    match batch {
        Batch::Frames { features, labels, soft } => {
            let trace = forward(params, config, features, T::lit(tcfg.temperature))?;
            Ok(frame_objective(tcfg.objective, &trace.posteriors, labels, soft, tcfg)?.value)
        }
        Batch::Utterance { utterance, soft } => Ok(sequence_step(params, config, utterance, soft, tcfg)?.0.value),
    }
}

fn evaluate_epoch<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    data: TrainData<'_, T>,
    teacher_post: &[Matrix<T>],
    tcfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    match data {
        TrainData::Frames(frames) => {
            let trace = forward(params, config, &frames.features, T::lit(tcfg.temperature))?;
            let loss = frame_objective(
                tcfg.objective,
                &trace.posteriors,
                &frames.labels,
                teacher_post.first(),
                tcfg,
            )?;
            Ok(EpochMetrics {
                epoch,
                objective: tcfg.objective,
                loss: loss.value.as_f64(),
                fer: frame_error_count(&trace.posteriors, &frames.labels) as f64 / frames.len() as f64,
                expected_accuracy: None,
            })
        }
        TrainData::Sequences(utts) => {
            let (mut loss, mut acc, mut errors, mut frames) = (0.0, 0.0, 0, 0);
            for (i, utt) in utts.iter().enumerate() {
                let (step, _) = sequence_step(params, config, utt, teacher_post.get(i), tcfg)?;
                loss += step.value.as_f64();
                acc += step.expected_accuracy.as_f64();
                errors += step.errors;
                frames += utt.lattice.num_frames();
            }
            Ok(EpochMetrics {
                epoch,
                objective: tcfg.objective,
                loss: loss / utts.len() as f64,
                fer: errors as f64 / frames as f64,
                expected_accuracy: Some(acc / frames as f64),
            })
        }
    }
}

/// Runs `tcfg.epochs` epochs of minibatch SGD on the selected objective.
/// Metrics hold one entry for the starting point (epoch 0) and one per
/// epoch, each measured on the full training data after the epoch.
pub fn train<T: Scalar>(
    params: Parameters<T>,
    config: &ModelConfig,
    data: TrainData<'_, T>,
    tcfg: &TrainConfig,
    teacher: Option<Teacher<'_, T>>,
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    config.validate()?;
    params.check_config(config)?;
    let objective = tcfg.objective;
    match (objective.needs_teacher(), teacher.is_some()) {
        (true, false) => return Err(Error::Config(format!("{objective} needs a teacher model"))),
        (false, true) => return Err(Error::Config(format!("{objective} does not use a teacher model"))),
        _ => {}
    }
    match (objective.is_sequence(), &data) {
        (true, TrainData::Frames(_)) => {
            return Err(Error::Config(format!("{objective} needs utterances with lattices")))
        }
        (false, TrainData::Sequences(_)) => {
            return Err(Error::Config(format!("{objective} trains on labelled frames")))
        }
        _ => {}
    }
    match &data {
        TrainData::Frames(f) if f.is_empty() => return Err(Error::Parameter("no training frames".into())),
        TrainData::Sequences([]) => return Err(Error::Parameter("no training utterances".into())),
        _ => {}
    }
    if let Some(t) = &teacher {
        if t.config.input_dim != config.input_dim || t.config.output_dim != config.output_dim {
            return Err(Error::Config(
                "teacher and student disagree on input/output sizes".into(),
            ));
        }
    }

    let temp = T::lit(tcfg.temperature);
    let teacher_post: Vec<Matrix<T>> = match (&teacher, &data) {
        (Some(t), TrainData::Frames(f)) => vec![t.posteriors(&f.features, temp)?],
        (Some(t), TrainData::Sequences(u)) => u
            .iter()
            .map(|utt| t.posteriors(&utt.features, temp))
            .collect::<Result<_>>()?,
        (None, _) => Vec::new(),
    };

    let mut params = params;
    let mut state = MomentumState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let lr = T::lit(tcfg.learning_rate);
    let mut metrics = vec![evaluate_epoch(&params, config, data, &teacher_post, tcfg, 0)?];

    for epoch in 1..=tcfg.epochs {
        let momentum = T::lit(tcfg.momentum.for_epoch(epoch));
        match data {
            TrainData::Frames(frames) => {
                let mut order: Vec<usize> = (0..frames.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(tcfg.batch_size) {
                    let x = frames.features.select_rows(chunk);
                    let labels: Vec<usize> = chunk.iter().map(|&i| frames.labels[i]).collect();
                    let soft = teacher_post.first().map(|s| s.select_rows(chunk));
                    let batch = Batch::Frames {
                        features: &x,
                        labels: &labels,
                        soft: soft.as_ref(),
                    };
                    let (_, grads) = objective_and_gradient(&params, config, batch, tcfg)?;
                    sgd_step(&mut params, &grads, &mut state, lr, momentum, tcfg.mask)?;
                }
            }
            TrainData::Sequences(utts) => {
                let mut order: Vec<usize> = (0..utts.len()).collect();
                order.shuffle(&mut rng);
                for i in order {
                    let batch = Batch::Utterance {
                        utterance: &utts[i],
                        soft: teacher_post.get(i),
                    };
                    let (_, grads) = objective_and_gradient(&params, config, batch, tcfg)?;
                    sgd_step(&mut params, &grads, &mut state, lr, momentum, tcfg.mask)?;
                }
            }
        }
        metrics.push(evaluate_epoch(&params, config, data, &teacher_post, tcfg, epoch)?);
    }
    Ok(TrainOutcome { params, metrics })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Decisions of the unadapted model: [`AdaptData::pseudo_labels`] from a
    /// first-pass decode when supplied, frame argmax otherwise.
    HardPseudo,
    /// Posteriors of a teacher model (KL updates).
    SoftTeacher,
    /// Ground-truth labels supplied with the data.
    OracleHard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Per-sample learning rate.
    pub learning_rate: f64,
    pub epochs: usize,
    pub label_source: LabelSource,
    pub mask: ParamMask,
    pub batch_size: usize,
    pub momentum: MomentumSchedule,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            learning_rate: 2e-4,
            epochs: 5,
            label_source: LabelSource::HardPseudo,
            mask: ParamMask::GATES_ONLY,
            batch_size: 1,
            momentum: MomentumSchedule::default(),
            seed: 0,
        }
    }
}

/// Adaptation frames plus whatever labels the chosen source needs.
#[derive(Clone, Debug)]
pub struct AdaptData<T: Scalar> {
    pub features: Matrix<T>,
    pub pseudo_labels: Option<Vec<usize>>,
    pub oracle_labels: Option<Vec<usize>>,
    pub teacher_posteriors: Option<Matrix<T>>,
}

impl<T: Scalar> AdaptData<T> {
    pub fn unlabeled(features: Matrix<T>) -> Self {
        AdaptData {
            features,
            pseudo_labels: None,
            oracle_labels: None,
            teacher_posteriors: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome<T: Scalar> {
    pub params: Parameters<T>,
    /// Loss on the adaptation data against the adaptation labels, before
    /// adapting and after each epoch.
    pub loss_trajectory: Vec<f64>,
    /// Hard labels used (pseudo or oracle); `None` for teacher targets.
    pub labels: Option<Vec<usize>>,
}

/// Fine-tunes the groups allowed by `acfg.mask` on adaptation data. With
/// [`LabelSource::HardPseudo`] the first pass decodes the data with the
/// unadapted model and the second pass trains on those decisions.
pub fn adapt<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    data: &AdaptData<T>,
    acfg: &AdaptConfig,
) -> Result<AdaptOutcome<T>> {
    acfg.mask.validate()?;
    if acfg.mask.is_gates_only() && !config.is_highway() {
        return Err(Error::Config("gate-only adaptation needs a highway network".into()));
    }
    if !(acfg.learning_rate > 0.0) || acfg.epochs == 0 || acfg.batch_size == 0 {
        return Err(Error::Config(
            "learning rate, epochs and batch size must be positive".into(),
        ));
    }
    if data.features.rows() == 0 {
        return Err(Error::Parameter("no adaptation frames".into()));
    }
    let one = T::one();
    let (labels, soft) = match acfg.label_source {
        LabelSource::HardPseudo => match &data.pseudo_labels {
            Some(l) => (Some(l.clone()), None),
            None => {
                let post = forward(params, config, &data.features, one)?.posteriors;
                (Some(post.argmax_rows()), None)
            }
        },
        LabelSource::OracleHard => (
            Some(
                data.oracle_labels
                    .clone()
                    .ok_or_else(|| Error::Config("oracle adaptation needs labels".into()))?,
            ),
            None,
        ),
        LabelSource::SoftTeacher => (
            None,
            Some(
                data.teacher_posteriors
                    .clone()
                    .ok_or_else(|| Error::Config("teacher adaptation needs teacher posteriors".into()))?,
            ),
        ),
    };
    let n = data.features.rows();
    if labels.as_ref().is_some_and(|l| l.len() != n) || soft.as_ref().is_some_and(|s| s.rows() != n) {
        return Err(Error::Consistency("adaptation labels do not cover every frame".into()));
    }
    let loss_on = |p: &Parameters<T>, rows: Option<&[usize]>| -> Result<LossResult<T>> {
        let (x, lab, sf) = match rows {
            Some(r) => (
                data.features.select_rows(r),
                labels.as_ref().map(|l| r.iter().map(|&i| l[i]).collect::<Vec<_>>()),
                soft.as_ref().map(|s| s.select_rows(r)),
            ),
            None => (data.features.clone(), labels.clone(), soft.clone()),
        };
        let trace = forward(p, config, &x, one)?;
        match (lab, sf) {
            (Some(l), _) => ce_loss(&trace.posteriors, &l, one),
            (None, Some(s)) => kl_loss(&trace.posteriors, &s, one),
            (None, None) => unreachable!("one label source is always set"),
        }
    };

    let mut current = params.clone();
    let mut state = MomentumState::new(&current);
    let mut rng = ChaCha8Rng::seed_from_u64(acfg.seed);
    let lr = T::lit(acfg.learning_rate);
    let mut trajectory = vec![loss_on(&current, None)?.value.as_f64()];
    for epoch in 1..=acfg.epochs {
        let momentum = T::lit(acfg.momentum.for_epoch(epoch));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(acfg.batch_size) {
            let x = data.features.select_rows(chunk);
            let trace = forward(&current, config, &x, one)?;
            let loss = match (&labels, &soft) {
                (Some(l), _) => {
                    let l: Vec<usize> = chunk.iter().map(|&i| l[i]).collect();
                    ce_loss(&trace.posteriors, &l, one)?
                }
                (None, Some(s)) => kl_loss(&trace.posteriors, &s.select_rows(chunk), one)?,
                (None, None) => unreachable!("one label source is always set"),
            };
            let grads = backward(&current, config, &trace, &loss.d_logits)?;
            sgd_step(&mut current, &grads, &mut state, lr, momentum, acfg.mask)?;
        }
        trajectory.push(loss_on(&current, None)?.value.as_f64());
    }
    Ok(AdaptOutcome {
        params: current,
        loss_trajectory: trajectory,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Fraction of frames whose argmax posterior differs from the label.
    pub fer: f64,
    /// Mean cross-entropy at unit temperature.
    pub mean_ce: f64,
}

pub fn evaluate<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    data: &LabeledFrames<T>,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Parameter("cannot evaluate on empty data".into()));
    }
    let trace = forward(params, config, &data.features, T::one())?;
    let ce = ce_loss(&trace.posteriors, &data.labels, T::one())?;
    Ok(Evaluation {
        fer: frame_error_count(&trace.posteriors, &data.labels) as f64 / data.len() as f64,
        mean_ce: ce.value.as_f64(),
    })
}

/// Frame error rate of fixed posteriors against labels.
pub fn frame_error_rate<T: Scalar>(posteriors: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || posteriors.rows() != labels.len() {
        return Err(Error::Parameter(
            "posteriors and labels must be non-empty and aligned".into(),
        ));
    }
    Ok(frame_error_count(posteriors, labels) as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, GateConfig, ParamGroup};
    use rand::Rng;

    fn toy_frames(n_per_class: usize, seed: u64) -> LabeledFrames<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2 {
            let centre = if class == 0 { -1.5 } else { 1.5 };
            for _ in 0..n_per_class {
                rows.push(vec![centre + rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0)]);
                labels.push(class);
            }
        }
        LabeledFrames::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn vanilla_sgd_without_momentum() {
        let cfg = ModelConfig::plain(2, 3, 1, 2);
        let mut p = init_params::<f64>(&cfg, 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, a) in g.arrays_mut() {
            for (i, x) in a.iter_mut().enumerate() {
                *x = 0.1 * i as f64 - 0.2;
            }
        }
        let mut st = MomentumState::new(&p);
        sgd_step(&mut p, &g, &mut st, 0.5, 0.0, ParamMask::ALL).unwrap();
        for ((_, a), ((_, b), (_, gr))) in p.arrays().iter().zip(before.arrays().iter().zip(g.arrays())) {
            for i in 0..a.len() {
                assert_eq!(a[i], b[i] + -(0.5 * gr[i]));
            }
        }
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let cfg = ModelConfig::plain(1, 1, 1, 1);
        let mut p = Parameters::<f64>::zeros(&cfg);
        let mut g = p.zeros_like();
        for (_, a) in g.arrays_mut() {
            a.fill(1.0);
        }
        let mut st = MomentumState::new(&p);
        let lr = 0.01;
        sgd_step(&mut p, &g, &mut st, lr, 0.9, ParamMask::ALL).unwrap();
        sgd_step(&mut p, &g, &mut st, lr, 0.9, ParamMask::ALL).unwrap();
        for (_, v) in st.velocity.arrays() {
            assert!((v[0] + 1.9 * lr).abs() < 1e-15);
        }
        for (_, t) in p.arrays() {
            assert!((t[0] + 2.9 * lr).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_groups_are_untouched() {
        let cfg = ModelConfig::highway(2, 3, 3, 2, GateConfig::BOTH);
        let mut p = init_params::<f64>(&cfg, 1).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, a) in g.arrays_mut() {
            a.fill(0.3);
        }
        let mut st = MomentumState::new(&p);
        for _ in 0..3 {
            sgd_step(&mut p, &g, &mut st, 0.1, 0.9, ParamMask::GATES_ONLY).unwrap();
        }
        assert!(p.group_bits_equal(&before, ParamGroup::Hidden));
        assert!(p.group_bits_equal(&before, ParamGroup::Output));
        assert!(!p.group_bits_equal(&before, ParamGroup::Gate));
        assert!(st
            .velocity
            .arrays()
            .iter()
            .filter(|(g, _)| *g != ParamGroup::Gate)
            .all(|(_, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let a = Parameters::<f64>::zeros(&ModelConfig::plain(2, 3, 1, 2));
        let b = Parameters::<f64>::zeros(&ModelConfig::plain(2, 4, 1, 2));
        let mut p = a.clone();
        let mut st = MomentumState::new(&a);
        assert!(matches!(
            sgd_step(&mut p, &b, &mut st, 0.1, 0.0, ParamMask::ALL),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn separable_toy_reaches_zero_fer() {
        let data = toy_frames(20, 3);
        let cfg = ModelConfig::plain(2, 4, 1, 2);
        let p = init_params(&cfg, 3).unwrap();
        let tcfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            learning_rate: 0.5,
            ..Default::default()
        };
        let out = train(p, &cfg, TrainData::Frames(&data), &tcfg, None).unwrap();
        assert_eq!(out.metrics.len(), 51);
        assert_eq!(out.metrics.last().unwrap().fer, 0.0);
    }

    #[test]
    fn kd_against_itself_starts_at_entropy() {
        let data = toy_frames(5, 1);
        let cfg = ModelConfig::highway(2, 3, 2, 2, GateConfig::BOTH);
        let p = init_params::<f64>(&cfg, 9).unwrap();
        let tcfg = TrainConfig {
            objective: Objective::Kd,
            epochs: 1,
            ..Default::default()
        };
        let out = train(
            p.clone(),
            &cfg,
            TrainData::Frames(&data),
            &tcfg,
            Some(Teacher {
                params: &p,
                config: &cfg,
            }),
        )
        .unwrap();
        let y = forward(&p, &cfg, &data.features, 1.0).unwrap().posteriors;
        let entropy: f64 = crate::losses::row_entropy(&y).iter().sum::<f64>() / data.len() as f64;
        assert!((out.metrics[0].loss - entropy).abs() < 1e-12);
        let grad = kl_loss(&y, &y, 1.0).unwrap().d_logits;
        assert!(grad.max_abs() < 1e-15);
    }

    #[test]
    fn train_checks_teacher_and_data() {
        let data = toy_frames(3, 0);
        let cfg = ModelConfig::plain(2, 3, 1, 2);
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let kd = TrainConfig {
            objective: Objective::Kd,
            ..Default::default()
        };
        assert!(matches!(
            train(p.clone(), &cfg, TrainData::Frames(&data), &kd, None),
            Err(Error::Config(_))
        ));
        let smbr = TrainConfig {
            objective: Objective::SmbrCe,
            ..Default::default()
        };
        assert!(matches!(
            train(p.clone(), &cfg, TrainData::Frames(&data), &smbr, None),
            Err(Error::Config(_))
        ));
        let ce = TrainConfig::default();
        let teacher = Teacher {
            params: &p,
            config: &cfg,
        };
        assert!(train(p.clone(), &cfg, TrainData::Frames(&data), &ce, Some(teacher)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_frames(10, 4);
        let cfg = ModelConfig::highway(2, 3, 3, 2, GateConfig::BOTH);
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            seed: 17,
            ..Default::default()
        };
        let a = train(
            init_params::<f64>(&cfg, 2).unwrap(),
            &cfg,
            TrainData::Frames(&data),
            &tcfg,
            None,
        )
        .unwrap();
        let b = train(
            init_params::<f64>(&cfg, 2).unwrap(),
            &cfg,
            TrainData::Frames(&data),
            &tcfg,
            None,
        )
        .unwrap();
        assert!(a.params.bits_equal(&b.params));
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn evaluate_counts_errors() {
        let cfg = ModelConfig::plain(1, 1, 1, 2);
        let mut p = Parameters::<f64>::zeros(&cfg);
        // Output favours class 1 for every input.
        p.output.bias = vec![0.0, 1.0];
        let frames = LabeledFrames::new(Matrix::zeros(5, 1), vec![1, 0, 1, 1, 0]).unwrap();
        let ev = evaluate(&p, &cfg, &frames).unwrap();
        assert!((ev.fer - 0.4).abs() < 1e-15);
        let empty = LabeledFrames::new(Matrix::zeros(0, 1), vec![]).unwrap();
        assert!(matches!(evaluate(&p, &cfg, &empty), Err(Error::Parameter(_))));
    }

    #[test]
    fn gates_only_adaptation_on_plain_net_fails() {
        let cfg = ModelConfig::plain(2, 3, 2, 2);
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let data = AdaptData::unlabeled(Matrix::zeros(4, 2));
        assert!(matches!(
            adapt(&p, &cfg, &data, &AdaptConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gates_only_adaptation_leaves_other_groups() {
        let data = toy_frames(10, 5);
        let cfg = ModelConfig::highway(2, 4, 3, 2, GateConfig::BOTH);
        let p = init_params::<f64>(&cfg, 6).unwrap();
        let acfg = AdaptConfig {
            learning_rate: 0.05,
            epochs: 3,
            ..Default::default()
        };
        let out = adapt(&p, &cfg, &AdaptData::unlabeled(data.features.clone()), &acfg).unwrap();
        assert!(out.params.group_bits_equal(&p, ParamGroup::Hidden));
        assert!(out.params.group_bits_equal(&p, ParamGroup::Output));
        assert!(!out.params.group_bits_equal(&p, ParamGroup::Gate));
        assert_eq!(out.loss_trajectory.len(), 4);
        let pseudo = forward(&p, &cfg, &data.features, 1.0).unwrap().posteriors.argmax_rows();
        assert_eq!(out.labels.unwrap(), pseudo);
    }

    #[test]
    fn metrics_csv_layout() {
        let m = vec![
            EpochMetrics {
                epoch: 0,
                objective: Objective::Ce,
                loss: 0.5,
                fer: 0.25,
                expected_accuracy: None,
            },
            EpochMetrics {
                epoch: 1,
                objective: Objective::SmbrCe,
                loss: 0.125,
                fer: 0.0,
                expected_accuracy: Some(0.75),
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &m, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,objective,loss,fer,expected_accuracy\n0,ce,0.5,0.25,\n1,smbr_ce,0.125,0,0.75\n"
        );
    }

    #[test]
    fn momentum_schedule_switches_after_first_epoch() {
        let s = MomentumSchedule::default();
        assert_eq!(s.for_epoch(1), 0.0);
        assert_eq!(s.for_epoch(2), 0.9);
        assert_eq!(s.for_epoch(7), 0.9);
    }

    #[test]
    fn adapt_config_defaults() {
        let a = AdaptConfig::default();
        assert_eq!(a.learning_rate, 2e-4);
        assert_eq!(a.epochs, 5);
        assert!(a.mask.is_gates_only());
    }
}
