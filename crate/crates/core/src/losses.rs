//! Frame-level objectives over temperature softmax outputs.
//!
//! Every loss reports its batch mean and the gradient with respect to the
//! pre-temperature logits `z`, i.e. the `1/T` factor of `y = softmax(z/T)` is
//! included and the gradient carries the `1/B` of the mean.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Smallest value passed to `ln` when a posterior underflows.
pub const LOG_FLOOR: f64 = 1e-300;

fn log_floor<T: Scalar>() -> T {
    T::lit(LOG_FLOOR).max(T::min_positive_value())
}

/// Labels for one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetBatch<T: Scalar> {
    /// One class index per frame.
    Hard(Vec<usize>),
    /// One posterior row per frame (teacher output).
    Soft(Matrix<T>),
}

impl<T: Scalar> TargetBatch<T> {
    pub fn len(&self) -> usize {
        match self {
            TargetBatch::Hard(v) => v.len(),
            TargetBatch::Soft(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks index ranges or row normalisation against `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self {
            TargetBatch::Hard(labels) => {
                if let Some(&bad) = labels.iter().find(|&&i| i >= num_classes) {
                    return Err(Error::Parameter(format!(
                        "label {bad} out of range for {num_classes} classes"
                    )));
                }
            }
            TargetBatch::Soft(m) => {
                if m.cols() != num_classes {
                    return Err(Error::Shape {
                        op: "soft targets",
                        left: m.shape(),
                        right: (m.rows(), num_classes),
                    });
                }
                for (r, row) in m.row_iter().enumerate() {
                    let sum: T = row.iter().copied().sum();
                    if row.iter().any(|&p| p < T::zero() || !p.is_finite()) || (sum - T::one()).abs() > T::lit(1e-9) {
                        return Err(Error::Parameter(format!(
                            "soft target row {r} is not a distribution (sum {sum})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which frame objective produced a [`LossResult`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Kl,
    Hybrid,
}

#[derive(Clone, Debug)]
pub struct LossResult<T: Scalar> {
    pub kind: LossKind,
    /// Mean over the batch.
    pub value: T,
    /// Gradient with respect to the logits, `B × J`.
    pub d_logits: Matrix<T>,
    /// Number of posteriors that were clamped to [`LOG_FLOOR`] before `ln`.
    pub floor_hits: usize,
}

/// Row-wise `softmax(z / temperature)` with max subtraction.
pub fn softmax_temperature<T: Scalar>(logits: &Matrix<T>, temperature: T) -> Result<Matrix<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Shannon entropy (nats) of each posterior row.
pub fn row_entropy<T: Scalar>(y: &Matrix<T>) -> Vec<T> {
    y.row_iter()
        .map(|r| -r.iter().filter(|&&p| p > T::zero()).map(|&p| p * p.ln()).sum::<T>())
        .collect()
}

fn check_batch<T: Scalar>(y: &Matrix<T>, n: usize, temperature: T) -> Result<()> {
    if y.rows() != n {
        return Err(Error::Shape {
            op: "loss targets",
            left: y.shape(),
            right: (n, y.cols()),
        });
    }
    if y.rows() == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    if !(temperature > T::zero()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Cross-entropy against hard labels: mean of `-ln y_{label}`.
pub fn ce_loss<T: Scalar>(y: &Matrix<T>, labels: &[usize], temperature: T) -> Result<LossResult<T>> {
    check_batch(y, labels.len(), temperature)?;
    TargetBatch::<T>::Hard(labels.to_vec()).validate(y.cols())?;
    let b = T::from_count(y.rows());
    let scale = T::one() / (b * temperature);
    let floor = log_floor::<T>();
    let mut floor_hits = 0;
    let mut total = T::zero();
    let mut d = y.scale(scale);
    for (r, &label) in labels.iter().enumerate() {
        let p = y[(r, label)];
        if p < floor {
            floor_hits += 1;
        }
        total -= p.max(floor).ln();
        d[(r, label)] -= scale;
    }
    Ok(LossResult {
        kind: LossKind::CrossEntropy,
        value: total / b,
        d_logits: d,
        floor_hits,
    })
}

/// Teacher–student loss `-Σ_j ỹ_j ln y_j`, averaged over the batch. The
/// teacher posteriors must come from the same temperature as `y`.
pub fn kl_loss<T: Scalar>(y: &Matrix<T>, soft: &Matrix<T>, temperature: T) -> Result<LossResult<T>> {
    check_batch(y, soft.rows(), temperature)?;
    TargetBatch::Soft(soft.clone()).validate(y.cols())?;
    let b = T::from_count(y.rows());
    let scale = T::one() / (b * temperature);
    let floor = log_floor::<T>();
    let mut floor_hits = 0;
    let mut total = T::zero();
    for (yr, tr) in y.row_iter().zip(soft.row_iter()) {
        for (&p, &q) in yr.iter().zip(tr) {
            if q > T::zero() {
                if p < floor {
                    floor_hits += 1;
                }
                total -= q * p.max(floor).ln();
            }
        }
    }
    let d = y.sub(soft)?.scale(scale);
    Ok(LossResult {
        kind: LossKind::Kl,
        value: total / b,
        d_logits: d,
        floor_hits,
    })
}

/// `KL + q · CE`.
pub fn hybrid_loss<T: Scalar>(
    y: &Matrix<T>,
    soft: &Matrix<T>,
    labels: &[usize],
    q: T,
    temperature: T,
) -> Result<LossResult<T>> {
    if !(q >= T::zero()) {
        return Err(Error::Parameter(format!("q must be non-negative, got {q}")));
    }
    let kl = kl_loss(y, soft, temperature)?;
    let ce = ce_loss(y, labels, temperature)?;
    let mut d = kl.d_logits;
    d.axpy(q, &ce.d_logits)?;
    Ok(LossResult {
        kind: LossKind::Hybrid,
        value: kl.value + q * ce.value,
        d_logits: d,
        floor_hits: kl.floor_hits + ce.floor_hits,
    })
}

/// Dispatches to [`ce_loss`] or [`kl_loss`] by target kind.
pub fn frame_loss<T: Scalar>(y: &Matrix<T>, targets: &TargetBatch<T>, temperature: T) -> Result<LossResult<T>> {
    match targets {
        TargetBatch::Hard(labels) => ce_loss(y, labels, temperature),
        TargetBatch::Soft(soft) => kl_loss(y, soft, temperature),
    }
}
