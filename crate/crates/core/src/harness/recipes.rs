//! Toy-scale experiments mirroring the ablations of the highway network
//! study: gate variants, parameter-group masks, deep-network convergence,
//! teacher-student training, gate-only sequence training and gate-only
//! adaptation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::{generate_state_sequences, generate_synthetic, generate_utterances, stay_probability, DatasetSpec};
use super::decode::viterbi_sticky;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::network::{forward, init_params, GateConfig, ModelConfig, ParamMask, Parameters};
use crate::training::{
    adapt, evaluate, train, AdaptConfig, AdaptData, EpochMetrics, LabelSource, LabeledFrames, Objective, Teacher,
    TrainConfig, TrainData,
};

/// The gate ablations: both gates, transform only, carry only, constrained.
pub fn gate_variants() -> [(&'static str, GateConfig); 4] {
    [
        ("both", GateConfig::BOTH),
        ("transform_only", GateConfig::TRANSFORM_ONLY),
        ("carry_only", GateConfig::CARRY_ONLY),
        ("constrained", GateConfig::CONSTRAINED),
    ]
}

/// Every non-empty combination of θ_h, θ_g and θ_c.
pub fn mask_variants() -> Vec<ParamMask> {
    (1u8..8)
        .map(|bits| ParamMask {
            update_theta_h: bits & 1 != 0,
            update_theta_g: bits & 2 != 0,
            update_theta_c: bits & 4 != 0,
        })
        .collect()
}

/// Short label such as `hgc` or `g` for a mask.
pub fn mask_label(mask: ParamMask) -> String {
    [
        (mask.update_theta_h, 'h'),
        (mask.update_theta_g, 'g'),
        (mask.update_theta_c, 'c'),
    ]
    .iter()
    .filter(|(on, _)| *on)
    .map(|(_, c)| *c)
    .collect()
}

fn task(seed: u64, num_classes: usize, feature_dim: usize, frames_per_class: usize, separation: f64) -> DatasetSpec {
    DatasetSpec {
        num_classes,
        feature_dim,
        frames_per_class,
        separation,
        noise_std: 1.0,
        shift: None,
        split: 0,
        seed,
    }
}

fn final_metrics(m: &[EpochMetrics]) -> &EpochMetrics {
    m.last().expect("training records at least the starting point")
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceSettings {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub frames_per_class: usize,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        ConvergenceSettings {
            hidden: 16,
            layers: 20,
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 32,
            frames_per_class: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub seed: u64,
    pub highway_ce: Vec<f64>,
    pub plain_ce: Vec<f64>,
}

impl ConvergenceReport {
    pub fn highway_final(&self) -> f64 {
        *self.highway_ce.last().expect("non-empty curve")
    }

    pub fn plain_final(&self) -> f64 {
        *self.plain_ce.last().expect("non-empty curve")
    }
}

/// Trains a thin, deep highway network and a plain network of the same
/// shape with the same initial seed and hyperparameters; reports the
/// training cross-entropy after every epoch.
pub fn convergence_comparison(seed: u64, s: &ConvergenceSettings) -> Result<ConvergenceReport> {
    let data = generate_synthetic(&task(seed, 4, 8, s.frames_per_class, 3.0))?;
    let tcfg = TrainConfig {
        objective: Objective::Ce,
        learning_rate: s.learning_rate,
        epochs: s.epochs,
        batch_size: s.batch_size,
        seed,
        ..TrainConfig::default()
    };
    let mut curves = Vec::new();
    for config in [
        ModelConfig::highway(8, s.hidden, s.layers, 4, GateConfig::BOTH),
        ModelConfig::plain(8, s.hidden, s.layers, 4),
    ] {
        let params = init_params(&config, seed)?;
        let out = train(params, &config, TrainData::Frames(&data), &tcfg, None)?;
        curves.push(out.metrics.iter().map(|m| m.loss).collect::<Vec<_>>());
    }
    let plain_ce = curves.pop().expect("two curves");
    let highway_ce = curves.pop().expect("two curves");
    Ok(ConvergenceReport {
        seed,
        highway_ce,
        plain_ce,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillationSettings {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub separation: f64,
    /// Frames per class the teacher is trained on.
    pub teacher_frames_per_class: usize,
    /// Frames per class of the smaller transfer set both students see.
    pub student_frames_per_class: usize,
    pub test_frames_per_class: usize,
    pub teacher_hidden: usize,
    pub teacher_layers: usize,
    pub teacher_epochs: usize,
    pub student_hidden: usize,
    pub student_layers: usize,
    pub student_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for DistillationSettings {
    fn default() -> Self {
        DistillationSettings {
            num_classes: 6,
            feature_dim: 10,
            separation: 3.0,
            teacher_frames_per_class: 300,
            student_frames_per_class: 30,
            test_frames_per_class: 200,
            teacher_hidden: 64,
            teacher_layers: 3,
            teacher_epochs: 40,
            student_hidden: 8,
            student_layers: 6,
            student_epochs: 30,
            learning_rate: 0.1,
            batch_size: 16,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillationReport {
    pub seed: u64,
    pub teacher_test_fer: f64,
    pub hard_test_fer: f64,
    pub kd_test_fer: f64,
    /// `(q, final training loss, test FER)` per hybrid run.
    pub hybrid: Vec<(f64, f64, f64)>,
    /// Loss curve of each hybrid run, epoch 0 first.
    pub hybrid_curves: Vec<Vec<f64>>,
}

/// Trains a wide teacher on hard labels, then the same highway student
/// three ways on a smaller transfer set drawn from the teacher's data: hard
/// labels, teacher posteriors (KL), and the hybrid loss for each `q` in `qs`.
pub fn distillation_comparison(seed: u64, s: &DistillationSettings, qs: &[f64]) -> Result<DistillationReport> {
    let spec = task(
        seed,
        s.num_classes,
        s.feature_dim,
        s.teacher_frames_per_class,
        s.separation,
    );
    let teacher_set = generate_synthetic(&spec)?;
    // Labels cycle through the classes, so a prefix stays balanced.
    let transfer: Vec<usize> = (0..s.student_frames_per_class * s.num_classes).collect();
    let train_set = teacher_set.subset(&transfer);
    let test_set = generate_synthetic(&DatasetSpec {
        frames_per_class: s.test_frames_per_class,
        ..spec.with_split(1)
    })?;
    let (d, j) = (s.feature_dim, s.num_classes);
    let base = TrainConfig {
        learning_rate: s.learning_rate,
        batch_size: s.batch_size,
        temperature: s.temperature,
        seed,
        ..TrainConfig::default()
    };

    let teacher_cfg = ModelConfig::plain(d, s.teacher_hidden, s.teacher_layers, j);
    let teacher = train(
        init_params(&teacher_cfg, seed ^ 0x7eac)?,
        &teacher_cfg,
        TrainData::Frames(&teacher_set),
        &TrainConfig {
            objective: Objective::Ce,
            epochs: s.teacher_epochs,
            temperature: 1.0,
            ..base.clone()
        },
        None,
    )?
    .params;
    let teacher_ref = Teacher {
        params: &teacher,
        config: &teacher_cfg,
    };

    let student_cfg = ModelConfig::highway(d, s.student_hidden, s.student_layers, j, GateConfig::BOTH);
    let student_init: Parameters<f64> = init_params(&student_cfg, seed)?;
    let run = |objective: Objective, q: f64| -> Result<(Vec<EpochMetrics>, f64)> {
        let tcfg = TrainConfig {
            objective,
            q,
            epochs: s.student_epochs,
            ..base.clone()
        };
        let t = objective.needs_teacher().then_some(teacher_ref);
        let out = train(
            student_init.clone(),
            &student_cfg,
            TrainData::Frames(&train_set),
            &tcfg,
            t,
        )?;
        let fer = evaluate(&out.params, &student_cfg, &test_set)?.fer;
        Ok((out.metrics, fer))
    };

    let (_, hard_test_fer) = run(Objective::Ce, 0.0)?;
    let (_, kd_test_fer) = run(Objective::Kd, 0.0)?;
    let mut hybrid = Vec::new();
    let mut hybrid_curves = Vec::new();
    for &q in qs {
        let (m, fer) = run(Objective::Hybrid, q)?;
        hybrid.push((q, final_metrics(&m).loss, fer));
        hybrid_curves.push(m.iter().map(|e| e.loss).collect());
    }
    Ok(DistillationReport {
        seed,
        teacher_test_fer: evaluate(&teacher, &teacher_cfg, &test_set)?.fer,
        hard_test_fer,
        kd_test_fer,
        hybrid,
        hybrid_curves,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptationSettings {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub separation: f64,
    pub train_frames_per_class: usize,
    /// Unlabelled adaptation data: `adapt_sequences` state sequences of
    /// `adapt_sequence_len` frames each.
    pub adapt_sequences: usize,
    pub adapt_sequence_len: usize,
    pub test_frames_per_class: usize,
    /// Length of the random shift vector, in noise standard deviations.
    pub shift_norm: f64,
    pub hidden: usize,
    pub layers: usize,
    pub train_epochs: usize,
    pub learning_rate: f64,
    pub adapt_learning_rate: f64,
    pub adapt_epochs: usize,
    pub extended_epochs: usize,
}

impl Default for AdaptationSettings {
    fn default() -> Self {
        AdaptationSettings {
            num_classes: 4,
            feature_dim: 8,
            separation: 3.0,
            train_frames_per_class: 150,
            adapt_sequences: 20,
            adapt_sequence_len: 50,
            test_frames_per_class: 300,
            shift_norm: 1.5,
            hidden: 16,
            layers: 4,
            train_epochs: 20,
            learning_rate: 0.1,
            adapt_learning_rate: 2e-4,
            adapt_epochs: 5,
            extended_epochs: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptationReport {
    pub seed: u64,
    pub source_test_fer: f64,
    pub unadapted_fer: f64,
    /// Error rate of the decoded pseudo-labels on the adaptation data.
    pub pseudo_label_error: f64,
    pub adapted_fer: f64,
    pub extended_fer: f64,
    pub loss_trajectory: Vec<f64>,
}

/// Trains a highway model on unshifted data, then adapts only the gates
/// on unlabelled shifted sequences. Hard pseudo-labels come from a
/// first-pass Viterbi decode of the unadapted model's posteriors under the
/// state-persistence prior. FER is measured on a separate shifted test split.
pub fn adaptation_trial(seed: u64, s: &AdaptationSettings) -> Result<AdaptationReport> {
    let spec = task(
        seed,
        s.num_classes,
        s.feature_dim,
        s.train_frames_per_class,
        s.separation,
    );
    let train_set = generate_synthetic(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f1f7);
    let dir: Vec<f64> = (0..s.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let shift: Vec<f64> = dir.iter().map(|x| x * s.shift_norm / norm).collect();
    let shifted = spec.with_shift(shift);
    let adapt_seqs = generate_state_sequences(&shifted.with_split(1), s.adapt_sequences, s.adapt_sequence_len)?;
    let test_set = generate_synthetic(&DatasetSpec {
        frames_per_class: s.test_frames_per_class,
        ..shifted.with_split(2)
    })?;
    let source_test = generate_synthetic(&DatasetSpec {
        frames_per_class: s.test_frames_per_class,
        ..spec.with_split(2)
    })?;

    let config = ModelConfig::highway(s.feature_dim, s.hidden, s.layers, s.num_classes, GateConfig::BOTH);
    let trained = train(
        init_params(&config, seed)?,
        &config,
        TrainData::Frames(&train_set),
        &TrainConfig {
            objective: Objective::Ce,
            learning_rate: s.learning_rate,
            epochs: s.train_epochs,
            seed,
            ..TrainConfig::default()
        },
        None,
    )?
    .params;

    let acfg = |epochs| AdaptConfig {
        learning_rate: s.adapt_learning_rate,
        epochs,
        label_source: LabelSource::HardPseudo,
        mask: ParamMask::GATES_ONLY,
        seed,
        ..AdaptConfig::default()
    };
    let stay = stay_probability(s.num_classes);
    let mut pseudo = Vec::new();
    let mut truth = Vec::new();
    for seq in &adapt_seqs {
        let post = forward(&trained, &config, &seq.features, 1.0)?.posteriors;
        pseudo.extend(viterbi_sticky(&post, stay)?);
        truth.extend_from_slice(&seq.labels);
    }
    let pseudo_label_error = pseudo.iter().zip(&truth).filter(|(a, b)| a != b).count() as f64 / truth.len() as f64;
    let features = Matrix::vstack(&adapt_seqs.iter().map(|q| &q.features).collect::<Vec<_>>())?;
    let data = AdaptData {
        pseudo_labels: Some(pseudo),
        ..AdaptData::unlabeled(features)
    };
    let adapted = adapt(&trained, &config, &data, &acfg(s.adapt_epochs))?;
    let extended = adapt(&trained, &config, &data, &acfg(s.extended_epochs))?;
    Ok(AdaptationReport {
        seed,
        source_test_fer: evaluate(&trained, &config, &source_test)?.fer,
        unadapted_fer: evaluate(&trained, &config, &test_set)?.fer,
        pseudo_label_error,
        adapted_fer: evaluate(&adapted.params, &config, &test_set)?.fer,
        extended_fer: evaluate(&extended.params, &config, &test_set)?.fer,
        loss_trajectory: adapted.loss_trajectory,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SequenceSettings {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub separation: f64,
    pub utterances: usize,
    pub frames_per_utterance: usize,
    pub confusion: usize,
    pub hidden: usize,
    pub layers: usize,
    pub ce_epochs: usize,
    pub smbr_epochs: usize,
    pub smbr_learning_rate: f64,
    pub k: f64,
    pub p: f64,
    pub mask: ParamMask,
}

impl Default for SequenceSettings {
    fn default() -> Self {
        SequenceSettings {
            num_classes: 4,
            feature_dim: 8,
            separation: 2.0,
            utterances: 20,
            frames_per_utterance: 12,
            confusion: 3,
            hidden: 12,
            layers: 3,
            ce_epochs: 20,
            smbr_epochs: 3,
            smbr_learning_rate: 0.01,
            k: 1.0,
            p: 0.0,
            mask: ParamMask::GATES_ONLY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SequenceReport {
    pub seed: u64,
    /// Expected frame accuracy per epoch, the CE-trained start first.
    pub expected_accuracy: Vec<f64>,
    pub start: Parameters<f64>,
    pub trained: Parameters<f64>,
}

/// CE-trains a highway model on the reference frames of toy utterances,
/// then runs sMBR sequence training restricted to `s.mask`.
pub fn sequence_training(seed: u64, s: &SequenceSettings) -> Result<SequenceReport> {
    let spec = task(seed, s.num_classes, s.feature_dim, 1, s.separation);
    let utts = generate_utterances(&spec, s.utterances, s.frames_per_utterance, s.confusion)?;
    let frames = LabeledFrames::new(
        Matrix::vstack(&utts.iter().map(|u| &u.features).collect::<Vec<_>>())?,
        utts.iter().flat_map(|u| u.reference.states.iter().copied()).collect(),
    )?;
    let config = ModelConfig::highway(s.feature_dim, s.hidden, s.layers, s.num_classes, GateConfig::BOTH);
    let start = train(
        init_params(&config, seed)?,
        &config,
        TrainData::Frames(&frames),
        &TrainConfig {
            objective: Objective::Ce,
            epochs: s.ce_epochs,
            seed,
            ..TrainConfig::default()
        },
        None,
    )?
    .params;
    let out = train(
        start.clone(),
        &config,
        TrainData::Sequences(&utts),
        &TrainConfig {
            objective: Objective::SmbrCe,
            learning_rate: s.smbr_learning_rate,
            epochs: s.smbr_epochs,
            p: s.p,
            k: s.k,
            mask: s.mask,
            seed,
            ..TrainConfig::default()
        },
        None,
    )?;
    Ok(SequenceReport {
        seed,
        expected_accuracy: out
            .metrics
            .iter()
            .map(|m| m.expected_accuracy.unwrap_or(f64::NAN))
            .collect(),
        start,
        trained: out.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_and_labels() {
        let masks = mask_variants();
        assert_eq!(masks.len(), 7);
        assert!(masks.contains(&ParamMask::ALL));
        assert!(masks.contains(&ParamMask::GATES_ONLY));
        assert_eq!(mask_label(ParamMask::ALL), "hgc");
        assert_eq!(mask_label(ParamMask::GATES_ONLY), "g");
    }

    #[test]
    fn gate_variants_are_valid() {
        for (_, g) in gate_variants() {
            g.validate().unwrap();
        }
    }
}
