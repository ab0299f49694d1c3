//! Synthetic class-conditional Gaussian frames, toy utterances with
//! confusable lattices, and their on-disk CSV / lattice-text forms.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{parse_lattice, Lattice, LatticeArc, ReferencePath};
use crate::linalg::Matrix;
use crate::training::{LabeledFrames, Utterance};

/// Class means depend only on `seed`; samples depend on `seed` and `split`,
/// so splits of one task share their classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub frames_per_class: usize,
    /// Distance between class means in units of `noise_std` (exact when
    /// `num_classes <= feature_dim`).
    pub separation: f64,
    pub noise_std: f64,
    /// Offset added to every generated frame (domain shift).
    pub shift: Option<Vec<f64>>,
    pub split: u64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 4,
            feature_dim: 8,
            frames_per_class: 100,
            separation: 3.0,
            noise_std: 1.0,
            shift: None,
            split: 0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::Config("num_classes and feature_dim must be positive".into()));
        }
        if !(self.noise_std > 0.0) || !(self.separation >= 0.0) {
            return Err(Error::Config(
                "noise_std must be positive and separation non-negative".into(),
            ));
        }
        if let Some(s) = &self.shift {
            if s.len() != self.feature_dim {
                return Err(Error::Config(format!(
                    "shift has {} entries for {} features",
                    s.len(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    pub fn with_split(&self, split: u64) -> Self {
        DatasetSpec { split, ..self.clone() }
    }

    pub fn with_shift(&self, shift: Vec<f64>) -> Self {
        DatasetSpec {
            shift: Some(shift),
            ..self.clone()
        }
    }
}

/// One mean per row. With `J <= D` the means are `r · u_j` for orthonormal
/// `u_j`, `r = separation · σ / √2`, so every pair is `separation · σ` apart.
pub fn class_means(spec: &DatasetSpec) -> Result<Matrix<f64>> {
    spec.validate()?;
    let (j, d) = (spec.num_classes, spec.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(j);
    while basis.len() < j {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        if basis.len() < d {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let radius = spec.separation * spec.noise_std / 2f64.sqrt();
    Ok(Matrix::from_fn(j, d, |r, c| radius * basis[r][c]))
}

/// `J · frames_per_class` frames with labels cycling through the classes.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<LabeledFrames<f64>> {
    let means = class_means(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.split + 1);
    let noise = Normal::new(0.0, spec.noise_std).expect("positive std");
    let n = spec.num_classes * spec.frames_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    let zero_shift = vec![0.0; spec.feature_dim];
    let shift = spec.shift.as_deref().unwrap_or(&zero_shift);
    let features = Matrix::from_fn(n, spec.feature_dim, |r, c| {
        means[(labels[r], c)] + shift[c] + noise.sample(&mut rng)
    });
    LabeledFrames::new(features, labels)
}

/// Confusion-network lattice around `reference`: each frame offers the
/// reference state plus up to `confusion - 1` random competitors, every node
/// at time t connects to every choice at frame t, and arcs carry small
/// random LM scores.
pub fn confusable_lattice<R: Rng + ?Sized>(
    rng: &mut R,
    reference: &ReferencePath,
    num_states: usize,
    confusion: usize,
) -> Result<Lattice<f64>> {
    let frames = reference.states.len();
    if frames == 0 || confusion == 0 || num_states == 0 {
        return Err(Error::Config("lattice needs frames, states and a confusion set".into()));
    }
    if let Some(&bad) = reference.states.iter().find(|&&s| s >= num_states) {
        return Err(Error::Config(format!("reference state {bad} out of range")));
    }
    let lm = Normal::new(0.0, 0.5).expect("positive std");
    let choices: Vec<Vec<usize>> = reference
        .states
        .iter()
        .map(|&r| {
            let extra = (confusion - 1).min(num_states - 1);
            let mut set = vec![r];
            for idx in sample(rng, num_states - 1, extra) {
                set.push(if idx >= r { idx + 1 } else { idx });
            }
            set
        })
        .collect();
    // Node ids: start 0, then one node per choice of frames 0..T-2, then end.
    let mut first = Vec::with_capacity(frames + 1);
    first.push(0);
    let mut next = 1;
    for c in choices.iter().take(frames - 1) {
        first.push(next);
        next += c.len();
    }
    let end = next;
    let mut arcs = Vec::new();
    for t in 0..frames {
        let from_nodes: Vec<usize> = if t == 0 {
            vec![0]
        } else {
            (0..choices[t - 1].len()).map(|i| first[t] + i).collect()
        };
        for &from in &from_nodes {
            for (i, &state) in choices[t].iter().enumerate() {
                let to = if t + 1 == frames { end } else { first[t + 1] + i };
                arcs.push(LatticeArc {
                    from,
                    to,
                    state,
                    lm_score: lm.sample(rng),
                });
            }
        }
    }
    Lattice::new(frames, end + 1, arcs)
}

/// Per-frame probability that a state sequence redraws its state uniformly
/// (possibly drawing the same state again).
pub const SWITCH_PROB: f64 = 0.15;

/// Probability that consecutive frames share a state under [`SWITCH_PROB`].
pub fn stay_probability(num_states: usize) -> f64 {
    1.0 - SWITCH_PROB * (num_states - 1) as f64 / num_states as f64
}

fn sticky_walk<R: Rng + ?Sized>(rng: &mut R, num_states: usize, len: usize) -> Vec<usize> {
    let mut states = Vec::with_capacity(len);
    let mut s = rng.random_range(0..num_states);
    for _ in 0..len {
        if rng.random_bool(SWITCH_PROB) {
            s = rng.random_range(0..num_states);
        }
        states.push(s);
    }
    states
}

/// Labelled frame sequences whose states follow a sticky random walk, one
/// [`LabeledFrames`] per sequence.
pub fn generate_state_sequences(
    spec: &DatasetSpec,
    count: usize,
    frames_per_sequence: usize,
) -> Result<Vec<LabeledFrames<f64>>> {
    let means = class_means(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2_000 + spec.split);
    let noise = Normal::new(0.0, spec.noise_std).expect("positive std");
    let zero_shift = vec![0.0; spec.feature_dim];
    let shift = spec.shift.clone().unwrap_or(zero_shift);
    (0..count)
        .map(|_| {
            let labels = sticky_walk(&mut rng, spec.num_classes, frames_per_sequence);
            let features = Matrix::from_fn(frames_per_sequence, spec.feature_dim, |r, c| {
                means[(labels[r], c)] + shift[c] + noise.sample(&mut rng)
            });
            LabeledFrames::new(features, labels)
        })
        .collect()
}

/// Utterances whose reference states follow a sticky random walk over the
/// task's classes and whose frames are drawn like [`generate_synthetic`].
pub fn generate_utterances(
    spec: &DatasetSpec,
    count: usize,
    frames_per_utterance: usize,
    confusion: usize,
) -> Result<Vec<Utterance<f64>>> {
    let means = class_means(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1_000 + spec.split);
    let noise = Normal::new(0.0, spec.noise_std).expect("positive std");
    let zero_shift = vec![0.0; spec.feature_dim];
    let shift = spec.shift.clone().unwrap_or(zero_shift);
    let j = spec.num_classes;
    (0..count)
        .map(|_| {
            let reference = ReferencePath::new(sticky_walk(&mut rng, j, frames_per_utterance));
            let features = Matrix::from_fn(frames_per_utterance, spec.feature_dim, |r, c| {
                means[(reference.states[r], c)] + shift[c] + noise.sample(&mut rng)
            });
            let lattice = confusable_lattice(&mut rng, &reference, j, confusion)?;
            Utterance::new(features, lattice, reference)
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

/// `label,x0,…` rows with a header line.
pub fn write_frames_csv(path: &Path, frames: &LabeledFrames<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..frames.features.cols()).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (row, &label) in frames.features.row_iter().zip(&frames.labels) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames_csv(path: &Path) -> Result<LabeledFrames<f64>> {
    let (labels, features) = read_csv_rows(path, true)?;
    LabeledFrames::new(features, labels)
}

/// Reads a headed CSV; with `labelled` the first column is a class index.
fn read_csv_rows(path: &Path, labelled: bool) -> Result<(Vec<usize>, Matrix<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let bad = |what: &str| Error::Parse {
            line,
            reason: format!("{}: bad {what}", path.display()),
        };
        let mut fields = rec.iter();
        if labelled {
            labels.push(
                fields
                    .next()
                    .ok_or_else(|| bad("label"))?
                    .trim()
                    .parse()
                    .map_err(|_| bad("label"))?,
            );
        }
        rows.push(
            fields
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad("feature")))
                .collect::<Result<_>>()?,
        );
    }
    if rows.is_empty() {
        return Err(Error::Parameter(format!("{} holds no frames", path.display())));
    }
    Ok((labels, Matrix::from_rows(&rows)?))
}

/// Writes `utt_NNNN.lat` and `utt_NNNN.csv` (features) for each utterance.
pub fn write_utterances(dir: &Path, utterances: &[Utterance<f64>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, u) in utterances.iter().enumerate() {
        fs::write(dir.join(format!("utt_{i:04}.lat")), u.lattice.to_text(&u.reference))?;
        let path = dir.join(format!("utt_{i:04}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let header: Vec<String> = (0..u.features.cols()).map(|c| format!("x{c}")).collect();
        w.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for row in u.features.row_iter() {
            w.write_record(row.iter().map(|x| x.to_string()))
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Loads every `*.lat` file in `dir` (sorted by name) with its `.csv` features.
pub fn read_utterances(dir: &Path) -> Result<Vec<Utterance<f64>>> {
    let mut lats: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lat"))
        .collect();
    lats.sort();
    if lats.is_empty() {
        return Err(Error::Parameter(format!("no .lat files in {}", dir.display())));
    }
    lats.iter()
        .map(|lat_path| {
            let lf = parse_lattice::<f64>(&fs::read_to_string(lat_path)?)?;
            let (_, features) = read_csv_rows(&lat_path.with_extension("csv"), false)?;
            Utterance::new(features, lf.lattice, lf.reference)
        })
        .collect()
}
