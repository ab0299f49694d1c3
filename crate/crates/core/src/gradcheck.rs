//! Central finite-difference checks of the analytic gradients.
//!
//! Each case builds a small random network, evaluates one objective through
//! [`objective_value`] only, and compares the numeric derivative of every
//! parameter entry with the backpropagated gradient from
//! [`objective_and_gradient`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::lattice::{random_lattice, ReferencePath};
use crate::linalg::Matrix;
use crate::losses::softmax_temperature;
use crate::network::{init_params, GateConfig, ModelConfig, Parameters};
use crate::training::{objective_and_gradient, objective_value, Batch, Objective, TrainConfig, Utterance};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Tolerance for frame objectives.
pub const FRAME_TOLERANCE: f64 = 1e-6;
/// Tolerance for sequence objectives, checked end to end through the network.
pub const SEQUENCE_TOLERANCE: f64 = 1e-5;
/// Denominator floor in [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` over every
/// parameter entry; returns the largest relative error and the entry count.
pub fn compare_with_finite_differences(
    params: &Parameters<f64>,
    analytic: &Parameters<f64>,
    step: f64,
    loss: impl Fn(&Parameters<f64>) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut probe = params.clone();
    let grads: Vec<Vec<f64>> = analytic.arrays().iter().map(|(_, a)| a.to_vec()).collect();
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (ai, g) in grads.iter().enumerate() {
        for (i, &an) in g.iter().enumerate() {
            let orig = probe.arrays()[ai].1[i];
            probe.arrays_mut()[ai].1[i] = orig + step;
            let up = loss(&probe)?;
            probe.arrays_mut()[ai].1[i] = orig - step;
            let down = loss(&probe)?;
            probe.arrays_mut()[ai].1[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(an, numeric));
            entries += 1;
        }
    }
    Ok((worst, entries))
}

/// Random network dimensions within H ≤ 16, L ≤ 5, J ≤ 6.
fn random_config(rng: &mut ChaCha8Rng, gates: Option<GateConfig>) -> ModelConfig {
    let input = rng.random_range(2..=6);
    let hidden = rng.random_range(3..=8);
    let layers = rng.random_range(2..=5);
    let output = rng.random_range(3..=6);
    match gates {
        Some(g) => ModelConfig::highway(input, hidden, layers, output, g),
        None => ModelConfig::plain(input, hidden, layers, output),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn check_case(
    name: String,
    params: &Parameters<f64>,
    config: &ModelConfig,
    batch: Batch<'_, f64>,
    tcfg: &TrainConfig,
    tolerance: f64,
) -> Result<CaseReport> {
    let (_, analytic) = objective_and_gradient(params, config, batch, tcfg)?;
    let (worst, entries) =
        compare_with_finite_differences(params, &analytic, STEP, |p| objective_value(p, config, batch, tcfg))?;
    Ok(CaseReport {
        name,
        entries,
        max_relative_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

fn frame_case(rng: &mut ChaCha8Rng, name: String, gates: Option<GateConfig>, tcfg: TrainConfig) -> Result<CaseReport> {
    let config = random_config(rng, gates);
    let params = init_params(&config, rng.random())?;
    let b = rng.random_range(1..=4);
    let x = random_matrix(rng, b, config.input_dim, 1.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..config.output_dim)).collect();
    let soft = softmax_temperature(&random_matrix(rng, b, config.output_dim, 2.0), tcfg.temperature)?;
    let batch = Batch::Frames {
        features: &x,
        labels: &labels,
        soft: tcfg.objective.needs_teacher().then_some(&soft),
    };
    check_case(name, &params, &config, batch, &tcfg, FRAME_TOLERANCE)
}

fn sequence_case(rng: &mut ChaCha8Rng, name: String, tcfg: TrainConfig) -> Result<CaseReport> {
    let config = random_config(rng, Some(GateConfig::BOTH));
    let params = init_params(&config, rng.random())?;
    let frames = rng.random_range(2..=4);
    let lattice = random_lattice(rng, frames, config.output_dim, 3);
    let reference = ReferencePath::new((0..frames).map(|_| rng.random_range(0..config.output_dim)).collect());
    let x = random_matrix(rng, frames, config.input_dim, 1.0);
    let utt = Utterance::new(x, lattice, reference)?;
    let soft = softmax_temperature(&random_matrix(rng, frames, config.output_dim, 2.0), tcfg.temperature)?;
    let batch = Batch::Utterance {
        utterance: &utt,
        soft: (tcfg.objective == Objective::SmbrKl).then_some(&soft),
    };
    check_case(name, &params, &config, batch, &tcfg, SEQUENCE_TOLERANCE)
}

/// Every objective and smoothing setting on fresh random highway networks,
/// plus cross-entropy on each gate variant and a plain network.
pub fn run_suite(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let base = TrainConfig::default();

    for (label, gates) in [
        ("both", Some(GateConfig::BOTH)),
        ("transform_only", Some(GateConfig::TRANSFORM_ONLY)),
        ("carry_only", Some(GateConfig::CARRY_ONLY)),
        ("constrained", Some(GateConfig::CONSTRAINED)),
        ("plain", None),
    ] {
        let tcfg = TrainConfig {
            objective: Objective::Ce,
            ..base.clone()
        };
        reports.push(frame_case(&mut rng, format!("ce/{label}"), gates, tcfg)?);
    }
    for t in [1.0, 2.0, 3.0] {
        let tcfg = TrainConfig {
            objective: Objective::Kd,
            temperature: t,
            ..base.clone()
        };
        reports.push(frame_case(&mut rng, format!("kl/T={t}"), Some(GateConfig::BOTH), tcfg)?);
    }
    for q in [0.0, 0.2, 1.0] {
        let tcfg = TrainConfig {
            objective: Objective::Hybrid,
            q,
            ..base.clone()
        };
        reports.push(frame_case(
            &mut rng,
            format!("hybrid/q={q}"),
            Some(GateConfig::BOTH),
            tcfg,
        )?);
    }
    for objective in [Objective::SmbrCe, Objective::SmbrKl] {
        for p in [0.0, 0.2, 0.5] {
            let tcfg = TrainConfig {
                objective,
                p,
                k: rng.random_range(0.5..1.5),
                ..base.clone()
            };
            reports.push(sequence_case(&mut rng, format!("{objective}/p={p}"), tcfg)?);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_for_a_fixed_seed() {
        let reports = run_suite(7).unwrap();
        assert_eq!(reports.len(), 17);
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
    }
}
