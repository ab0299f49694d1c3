//! Frame-synchronous hypothesis lattices and the state-level MBR objective.
//!
//! Every arc consumes exactly one frame and carries a state id and a
//! language-model log score. A path's score is
//! `Σ_arcs k · ln y[t, state] + lm`, and path posteriors are the softmax of
//! path scores over all complete paths. The expected state accuracy against a
//! reference and its gradient with respect to `ln y` come from one
//! log-domain forward–backward sweep that also propagates partial
//! accuracies; [`brute_force_smbr`] enumerates paths instead and is kept as
//! the reference implementation.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{LossKind, LossResult};
use crate::scalar::{log_add, log_sum_exp, Scalar};

/// Largest path count [`brute_force_smbr`] will enumerate.
pub const MAX_ENUMERATED_PATHS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeArc<T: Scalar> {
    pub from: usize,
    pub to: usize,
    pub state: usize,
    pub lm_score: T,
}

/// Acyclic, time-ordered lattice. Node 0 is the start (t = 0) and the last
/// node is the end (t = `num_frames`).
#[derive(Clone, Debug)]
pub struct Lattice<T: Scalar> {
    num_frames: usize,
    num_nodes: usize,
    arcs: Vec<LatticeArc<T>>,
    node_time: Vec<usize>,
    by_frame: Vec<Vec<usize>>,
    out_arcs: Vec<Vec<usize>>,
}

impl<T: Scalar> Lattice<T> {
    /// Validates the structure: node times are consistent with one frame per
    /// arc, the end node sits at `num_frames`, and every node lies on some
    /// start-to-end path.
    pub fn new(num_frames: usize, num_nodes: usize, arcs: Vec<LatticeArc<T>>) -> Result<Self> {
        if num_frames == 0 {
            return Err(Error::Structural("lattice needs at least one frame".into()));
        }
        if num_nodes < 2 {
            return Err(Error::Structural("lattice needs a start and an end node".into()));
        }
        let end = num_nodes - 1;
        let mut out_arcs = vec![Vec::new(); num_nodes];
        for (i, a) in arcs.iter().enumerate() {
            if a.from >= num_nodes || a.to >= num_nodes {
                return Err(Error::Structural(format!(
                    "arc {i} references node outside 0..{num_nodes}"
                )));
            }
            if !a.lm_score.is_finite() {
                return Err(Error::Structural(format!("arc {i} has non-finite lm score")));
            }
            out_arcs[a.from].push(i);
        }

        let mut node_time: Vec<Option<usize>> = vec![None; num_nodes];
        node_time[0] = Some(0);
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(n) = queue.pop_front() {
            let t = node_time[n].expect("queued nodes are timed");
            for &ai in &out_arcs[n] {
                let to = arcs[ai].to;
                match node_time[to] {
                    None => {
                        if t + 1 > num_frames {
                            return Err(Error::Structural(format!("node {to} lies beyond frame {num_frames}")));
                        }
                        node_time[to] = Some(t + 1);
                        queue.push_back(to);
                    }
                    Some(existing) if existing != t + 1 => {
                        return Err(Error::Structural(format!(
                            "node {to} reached at times {existing} and {}",
                            t + 1
                        )));
                    }
                    Some(_) => {}
                }
            }
        }
        if let Some(n) = node_time.iter().position(Option::is_none) {
            return Err(Error::Structural(format!("node {n} is unreachable from the start")));
        }
        let node_time: Vec<usize> = node_time.into_iter().map(|t| t.unwrap()).collect();
        if node_time[end] != num_frames {
            return Err(Error::Structural(format!(
                "end node is at time {} instead of {num_frames}",
                node_time[end]
            )));
        }

        let mut reaches_end = vec![false; num_nodes];
        reaches_end[end] = true;
        let mut order: Vec<usize> = (0..num_nodes).collect();
        order.sort_by_key(|&n| std::cmp::Reverse(node_time[n]));
        for n in order {
            if out_arcs[n].iter().any(|&ai| reaches_end[arcs[ai].to]) {
                reaches_end[n] = true;
            }
        }
        if let Some(n) = reaches_end.iter().position(|&r| !r) {
            return Err(Error::Structural(format!("node {n} cannot reach the end node")));
        }

        let mut by_frame = vec![Vec::new(); num_frames];
        for (i, a) in arcs.iter().enumerate() {
            by_frame[node_time[a.from]].push(i);
        }
        Ok(Lattice {
            num_frames,
            num_nodes,
            arcs,
            node_time,
            by_frame,
            out_arcs,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn arcs(&self) -> &[LatticeArc<T>] {
        &self.arcs
    }

    pub fn start(&self) -> usize {
        0
    }

    pub fn end(&self) -> usize {
        self.num_nodes - 1
    }

    pub fn node_time(&self, node: usize) -> usize {
        self.node_time[node]
    }

    /// Frame consumed by an arc.
    pub fn arc_frame(&self, arc: usize) -> usize {
        self.node_time[self.arcs[arc].from]
    }

    /// Arc indices grouped by frame.
    pub fn arcs_at(&self, frame: usize) -> &[usize] {
        &self.by_frame[frame]
    }

    pub fn max_state(&self) -> usize {
        self.arcs.iter().map(|a| a.state).max().unwrap_or(0)
    }

    /// Number of complete paths, saturating at `usize::MAX`.
    pub fn count_paths(&self) -> usize {
        let mut count = vec![0usize; self.num_nodes];
        count[0] = 1;
        for frame in &self.by_frame {
            for &ai in frame {
                let a = &self.arcs[ai];
                count[a.to] = count[a.to].saturating_add(count[a.from]);
            }
        }
        count[self.end()]
    }

    /// All complete paths as arc-index sequences, or a capacity error when
    /// there are more than `limit`.
    pub fn enumerate_paths(&self, limit: usize) -> Result<Vec<Vec<usize>>> {
        let n = self.count_paths();
        if n > limit {
            return Err(Error::Capacity(format!(
                "lattice has {n} paths, enumeration limit is {limit}"
            )));
        }
        let mut paths = Vec::with_capacity(n);
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            if node == self.end() {
                paths.push(prefix);
                continue;
            }
            for &ai in self.out_arcs[node].iter().rev() {
                let mut next = prefix.clone();
                next.push(ai);
                stack.push((self.arcs[ai].to, next));
            }
        }
        Ok(paths)
    }

    fn check_posteriors(&self, log_posteriors: &Matrix<T>) -> Result<()> {
        if log_posteriors.rows() != self.num_frames {
            return Err(Error::Consistency(format!(
                "lattice has {} frames but posteriors have {} rows",
                self.num_frames,
                log_posteriors.rows()
            )));
        }
        if self.max_state() >= log_posteriors.cols() {
            return Err(Error::Structural(format!(
                "arc state {} outside {} posterior columns",
                self.max_state(),
                log_posteriors.cols()
            )));
        }
        Ok(())
    }

    fn arc_score(&self, ai: usize, log_posteriors: &Matrix<T>, k: T) -> T {
        let a = &self.arcs[ai];
        k * log_posteriors[(self.arc_frame(ai), a.state)] + a.lm_score
    }

    /// Serialises to the line format read by [`parse_lattice`].
    pub fn to_text(&self, reference: &ReferencePath) -> String {
        let mut s = format!("LAT {} {}\n", self.num_frames, self.num_nodes);
        for a in &self.arcs {
            let _ = writeln!(s, "ARC {} {} {} {}", a.from, a.to, a.state, a.lm_score.as_f64());
        }
        s.push_str("REF");
        for st in &reference.states {
            let _ = write!(s, " {st}");
        }
        s.push('\n');
        s
    }
}

/// Reference state sequence, one state per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferencePath {
    pub states: Vec<usize>,
}

impl ReferencePath {
    pub fn new(states: Vec<usize>) -> Self {
        ReferencePath { states }
    }

    fn check<T: Scalar>(&self, lattice: &Lattice<T>) -> Result<()> {
        if self.states.len() != lattice.num_frames() {
            return Err(Error::Structural(format!(
                "reference has {} states for {} frames",
                self.states.len(),
                lattice.num_frames()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SmbrResult<T: Scalar> {
    /// Posterior-weighted count of frames matching the reference.
    pub expected_accuracy: T,
    /// `num_frames - expected_accuracy`.
    pub loss: T,
    /// Gradient of `loss` with respect to `ln y`, `T × J`.
    pub d_log_posteriors: Matrix<T>,
    /// Log of the summed path weights.
    pub log_partition: T,
}

/// Checks that `path` is a start-to-end arc sequence.
pub fn validate_path<T: Scalar>(lattice: &Lattice<T>, path: &[usize]) -> Result<()> {
    if path.len() != lattice.num_frames() {
        return Err(Error::Structural(format!(
            "path has {} arcs for {} frames",
            path.len(),
            lattice.num_frames()
        )));
    }
    let mut node = lattice.start();
    for &ai in path {
        let a = lattice
            .arcs()
            .get(ai)
            .ok_or_else(|| Error::Structural(format!("arc {ai} does not exist")))?;
        if a.from != node {
            return Err(Error::Structural(format!(
                "arc {ai} leaves node {} but path is at node {node}",
                a.from
            )));
        }
        node = a.to;
    }
    if node != lattice.end() {
        return Err(Error::Structural("path does not finish at the end node".into()));
    }
    Ok(())
}

/// `Σ_arcs k · ln y[t, state] + lm` along a complete path.
pub fn path_score<T: Scalar>(lattice: &Lattice<T>, path: &[usize], log_posteriors: &Matrix<T>, k: T) -> Result<T> {
    lattice.check_posteriors(log_posteriors)?;
    validate_path(lattice, path)?;
    Ok(path
        .iter()
        .map(|&ai| lattice.arc_score(ai, log_posteriors, k))
        .fold(T::zero(), |acc, s| acc + s))
}

/// Number of frames on which the path's states match the reference.
pub fn path_accuracy<T: Scalar>(lattice: &Lattice<T>, path: &[usize], reference: &ReferencePath) -> usize {
    path.iter()
        .filter(|&&ai| lattice.arcs()[ai].state == reference.states[lattice.arc_frame(ai)])
        .count()
}

fn check_inputs<T: Scalar>(
    lattice: &Lattice<T>,
    reference: &ReferencePath,
    log_posteriors: &Matrix<T>,
    k: T,
) -> Result<()> {
    reference.check(lattice)?;
    lattice.check_posteriors(log_posteriors)?;
    if !(k >= T::zero()) || !k.is_finite() {
        return Err(Error::Parameter(format!(
            "acoustic scale must be non-negative, got {k}"
        )));
    }
    if !log_posteriors.all_finite() {
        return Err(Error::Domain("log posteriors must be finite".into()));
    }
    Ok(())
}

/// Expected state accuracy and its gradient by forward–backward.
pub fn smbr_forward_backward<T: Scalar>(
    lattice: &Lattice<T>,
    reference: &ReferencePath,
    log_posteriors: &Matrix<T>,
    k: T,
) -> Result<SmbrResult<T>> {
    check_inputs(lattice, reference, log_posteriors, k)?;
    let n = lattice.num_nodes();
    let arcs = lattice.arcs();
    let score: Vec<T> = (0..arcs.len())
        .map(|ai| lattice.arc_score(ai, log_posteriors, k))
        .collect();
    let acc: Vec<T> = (0..arcs.len())
        .map(|ai| {
            if arcs[ai].state == reference.states[lattice.arc_frame(ai)] {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();

    // alpha: log mass of partial paths start→node; alpha_acc: their expected accuracy.
    let mut alpha = vec![T::neg_infinity(); n];
    let mut alpha_acc = vec![T::zero(); n];
    alpha[lattice.start()] = T::zero();
    for t in 0..lattice.num_frames() {
        let frame = lattice.arcs_at(t);
        for &ai in frame {
            let a = &arcs[ai];
            alpha[a.to] = log_add(alpha[a.to], alpha[a.from] + score[ai]);
        }
        for &ai in frame {
            let a = &arcs[ai];
            let w = (alpha[a.from] + score[ai] - alpha[a.to]).exp();
            let inc = w * (alpha_acc[a.from] + acc[ai]);
            alpha_acc[a.to] += inc;
        }
    }

    // beta: log mass of partial paths node→end; beta_acc: their expected accuracy.
    let mut beta = vec![T::neg_infinity(); n];
    let mut beta_acc = vec![T::zero(); n];
    beta[lattice.end()] = T::zero();
    for t in (0..lattice.num_frames()).rev() {
        let frame = lattice.arcs_at(t);
        for &ai in frame {
            let a = &arcs[ai];
            beta[a.from] = log_add(beta[a.from], score[ai] + beta[a.to]);
        }
        for &ai in frame {
            let a = &arcs[ai];
            let w = (score[ai] + beta[a.to] - beta[a.from]).exp();
            let inc = w * (acc[ai] + beta_acc[a.to]);
            beta_acc[a.from] += inc;
        }
    }

    let log_z = alpha[lattice.end()];
    if !log_z.is_finite() {
        return Err(Error::Structural("lattice carries no path mass".into()));
    }
    let expected = alpha_acc[lattice.end()];
    let mut grad = Matrix::zeros(log_posteriors.rows(), log_posteriors.cols());
    for (ai, a) in arcs.iter().enumerate() {
        let gamma = (alpha[a.from] + score[ai] + beta[a.to] - log_z).exp();
        let through = alpha_acc[a.from] + acc[ai] + beta_acc[a.to];
        grad[(lattice.arc_frame(ai), a.state)] -= k * gamma * (through - expected);
    }
    Ok(SmbrResult {
        expected_accuracy: expected,
        loss: T::from_count(lattice.num_frames()) - expected,
        d_log_posteriors: grad,
        log_partition: log_z,
    })
}

/// Path posteriors `P(path)` for every enumerated path.
pub fn path_posteriors<T: Scalar>(
    lattice: &Lattice<T>,
    paths: &[Vec<usize>],
    log_posteriors: &Matrix<T>,
    k: T,
) -> Result<Vec<T>> {
    let scores = paths
        .iter()
        .map(|p| path_score(lattice, p, log_posteriors, k))
        .collect::<Result<Vec<T>>>()?;
    let log_z = log_sum_exp(&scores);
    if !log_z.is_finite() {
        return Err(Error::Structural("lattice carries no path mass".into()));
    }
    Ok(scores.iter().map(|&s| (s - log_z).exp()).collect())
}

fn enumerated_expected_accuracy<T: Scalar>(
    lattice: &Lattice<T>,
    paths: &[Vec<usize>],
    accuracies: &[usize],
    log_posteriors: &Matrix<T>,
    k: T,
) -> Result<(T, T)> {
    let scores = paths
        .iter()
        .map(|p| path_score(lattice, p, log_posteriors, k))
        .collect::<Result<Vec<T>>>()?;
    let log_z = log_sum_exp(&scores);
    let expected = scores
        .iter()
        .zip(accuracies)
        .map(|(&s, &a)| (s - log_z).exp() * T::from_count(a))
        .fold(T::zero(), |x, y| x + y);
    Ok((expected, log_z))
}

/// Enumeration oracle: explicit path posteriors for the value and central
/// differences (step 1e-6) on `ln y` for the gradient.
pub fn brute_force_smbr<T: Scalar>(
    lattice: &Lattice<T>,
    reference: &ReferencePath,
    log_posteriors: &Matrix<T>,
    k: T,
) -> Result<SmbrResult<T>> {
    check_inputs(lattice, reference, log_posteriors, k)?;
    let paths = lattice.enumerate_paths(MAX_ENUMERATED_PATHS)?;
    if paths.is_empty() {
        return Err(Error::Structural("lattice has no complete path".into()));
    }
    let accuracies: Vec<usize> = paths.iter().map(|p| path_accuracy(lattice, p, reference)).collect();
    let (expected, log_z) = enumerated_expected_accuracy(lattice, &paths, &accuracies, log_posteriors, k)?;

    let step = T::lit(1e-6);
    let mut grad = Matrix::zeros(log_posteriors.rows(), log_posteriors.cols());
    let mut probe = log_posteriors.clone();
    for t in 0..log_posteriors.rows() {
        for s in 0..log_posteriors.cols() {
            let orig = probe[(t, s)];
            probe[(t, s)] = orig + step;
            let (up, _) = enumerated_expected_accuracy(lattice, &paths, &accuracies, &probe, k)?;
            probe[(t, s)] = orig - step;
            let (down, _) = enumerated_expected_accuracy(lattice, &paths, &accuracies, &probe, k)?;
            probe[(t, s)] = orig;
            // loss = T - E, so the sign flips.
            grad[(t, s)] = -(up - down) / (step + step);
        }
    }
    Ok(SmbrResult {
        expected_accuracy: expected,
        loss: T::from_count(lattice.num_frames()) - expected,
        d_log_posteriors: grad,
        log_partition: log_z,
    })
}

/// Frame loss used to smooth the sequence objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmoothingMode {
    /// sMBR + p · CE.
    CeSmoothed,
    /// sMBR + p · KL (after teacher–student training).
    KlSmoothed,
}

#[derive(Clone, Debug)]
pub struct SequenceLoss<T: Scalar> {
    pub value: T,
    pub d_logits: Matrix<T>,
}

/// Pulls a gradient with respect to `ln y` back to the logits `z`, where
/// `y = softmax(z / temperature)`.
pub fn log_softmax_backward<T: Scalar>(
    d_log_posteriors: &Matrix<T>,
    posteriors: &Matrix<T>,
    temperature: T,
) -> Result<Matrix<T>> {
    if d_log_posteriors.shape() != posteriors.shape() {
        return Err(Error::Shape {
            op: "log_softmax_backward",
            left: d_log_posteriors.shape(),
            right: posteriors.shape(),
        });
    }
    let mut out = d_log_posteriors.clone();
    for r in 0..out.rows() {
        let total: T = d_log_posteriors.row(r).iter().copied().sum();
        let y = posteriors.row(r);
        for (g, &p) in out.row_mut(r).iter_mut().zip(y) {
            *g = (*g - p * total) / temperature;
        }
    }
    Ok(out)
}

/// `smbr.loss + p · frame_loss.value` with the matching logit gradient.
pub fn regularized_sequence_loss<T: Scalar>(
    smbr: &SmbrResult<T>,
    frame_loss: &LossResult<T>,
    posteriors: &Matrix<T>,
    temperature: T,
    p: T,
    mode: SmoothingMode,
) -> Result<SequenceLoss<T>> {
    if !(p >= T::zero()) {
        return Err(Error::Parameter(format!("p must be non-negative, got {p}")));
    }
    let expected_kind = match mode {
        SmoothingMode::CeSmoothed => LossKind::CrossEntropy,
        SmoothingMode::KlSmoothed => LossKind::Kl,
    };
    if frame_loss.kind != expected_kind {
        return Err(Error::Consistency(format!(
            "{mode:?} needs a {expected_kind:?} frame loss, got {:?}",
            frame_loss.kind
        )));
    }
    if smbr.d_log_posteriors.shape() != frame_loss.d_logits.shape() {
        return Err(Error::Consistency(format!(
            "sequence covers {} frames but frame loss covers {}",
            smbr.d_log_posteriors.rows(),
            frame_loss.d_logits.rows()
        )));
    }
    let mut d = log_softmax_backward(&smbr.d_log_posteriors, posteriors, temperature)?;
    d.axpy(p, &frame_loss.d_logits)?;
    Ok(SequenceLoss {
        value: smbr.loss + p * frame_loss.value,
        d_logits: d,
    })
}

/// A lattice together with its reference, as stored on disk.
#[derive(Clone, Debug)]
pub struct LatticeFile<T: Scalar> {
    pub lattice: Lattice<T>,
    pub reference: ReferencePath,
}

fn parse_field<V: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<V> {
    let tok = tok.ok_or_else(|| Error::Parse {
        line,
        reason: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| Error::Parse {
        line,
        reason: format!("bad {what} {tok:?}"),
    })
}

/// Parses `LAT <frames> <nodes>`, `ARC <from> <to> <state> <lm>` and
/// `REF <s_0> … <s_{T-1}>` lines. Blank lines and `#` comments are skipped.
pub fn parse_lattice<T: Scalar>(text: &str) -> Result<LatticeFile<T>> {
    let mut header: Option<(usize, usize)> = None;
    let mut arcs = Vec::new();
    let mut reference: Option<Vec<usize>> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks = content.split_whitespace();
        match toks.next() {
            Some("LAT") => {
                if header.is_some() {
                    return Err(Error::Parse {
                        line,
                        reason: "duplicate LAT header".into(),
                    });
                }
                let frames = parse_field(toks.next(), line, "frame count")?;
                let nodes = parse_field(toks.next(), line, "node count")?;
                header = Some((frames, nodes));
            }
            Some("ARC") => {
                if header.is_none() {
                    return Err(Error::Parse {
                        line,
                        reason: "ARC before LAT header".into(),
                    });
                }
                let from = parse_field(toks.next(), line, "from node")?;
                let to = parse_field(toks.next(), line, "to node")?;
                let state = parse_field(toks.next(), line, "state id")?;
                let lm: f64 = parse_field(toks.next(), line, "lm score")?;
                arcs.push(LatticeArc {
                    from,
                    to,
                    state,
                    lm_score: T::lit(lm),
                });
            }
            Some("REF") => {
                if reference.is_some() {
                    return Err(Error::Parse {
                        line,
                        reason: "duplicate REF line".into(),
                    });
                }
                reference = Some(
                    toks.by_ref()
                        .map(|t| parse_field(Some(t), line, "reference state"))
                        .collect::<Result<Vec<usize>>>()?,
                );
            }
            Some(other) => {
                return Err(Error::Parse {
                    line,
                    reason: format!("unknown record {other:?}"),
                });
            }
            None => unreachable!("empty lines are skipped"),
        }
        if let Some(extra) = toks.next() {
            return Err(Error::Parse {
                line,
                reason: format!("trailing token {extra:?}"),
            });
        }
    }
    let (frames, nodes) = header.ok_or(Error::Parse {
        line: 0,
        reason: "missing LAT header".into(),
    })?;
    let reference = ReferencePath::new(reference.ok_or(Error::Parse {
        line: 0,
        reason: "missing REF line".into(),
    })?);
    let lattice = Lattice::new(frames, nodes, arcs)?;
    reference.check(&lattice)?;
    Ok(LatticeFile { lattice, reference })
}

/// Random lattice with 1–2 nodes per interior time step and between
/// `max(nodes_t, nodes_{t+1})` and `max_arcs_per_frame` arcs per frame.
pub fn random_lattice<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    num_frames: usize,
    num_states: usize,
    max_arcs_per_frame: usize,
) -> Lattice<T> {
    assert!(num_frames > 0 && num_states > 0 && max_arcs_per_frame > 0);
    let width = max_arcs_per_frame.min(2);
    let widths: Vec<usize> = (0..=num_frames)
        .map(|t| {
            if t == 0 || t == num_frames {
                1
            } else {
                rng.random_range(1..=width)
            }
        })
        .collect();
    let mut first = vec![0usize; num_frames + 1];
    let mut next = 0;
    for t in 0..=num_frames {
        first[t] = next;
        next += widths[t];
    }
    let num_nodes = next;
    let mut arcs = Vec::new();
    for t in 0..num_frames {
        let (n0, n1) = (widths[t], widths[t + 1]);
        let base = n0.max(n1);
        let total = rng.random_range(base..=max_arcs_per_frame.max(base));
        for i in 0..total {
            let (from, to) = if i < base {
                (first[t] + i % n0, first[t + 1] + i % n1)
            } else {
                (
                    first[t] + rng.random_range(0..n0),
                    first[t + 1] + rng.random_range(0..n1),
                )
            };
            arcs.push(LatticeArc {
                from,
                to,
                state: rng.random_range(0..num_states),
                lm_score: T::lit(rng.random_range(-2.0..2.0)),
            });
        }
    }
    Lattice::new(num_frames, num_nodes, arcs).expect("generator builds connected lattices")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arc(from: usize, to: usize, state: usize, lm: f64) -> LatticeArc<f64> {
        LatticeArc {
            from,
            to,
            state,
            lm_score: lm,
        }
    }

    /// Frames 0..3, two disjoint paths: states (0,1,0) and (1,1,1).
    fn two_path_lattice() -> Lattice<f64> {
        Lattice::new(
            3,
            6,
            vec![
                arc(0, 1, 0, 0.5),
                arc(1, 2, 1, 0.0),
                arc(2, 5, 0, -0.25),
                arc(0, 3, 1, 0.0),
                arc(3, 4, 1, 1.0),
                arc(4, 5, 1, 0.0),
            ],
        )
        .unwrap()
    }

    fn random_log_posteriors(frames: usize, states: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let z = Matrix::from_fn(frames, states, |_, _| rng.random_range(-2.0..2.0));
        crate::losses::softmax_temperature(&z, 1.0).unwrap().ln().unwrap()
    }

    #[test]
    fn single_arc_score() {
        let lat = Lattice::new(1, 2, vec![arc(0, 1, 2, 0.75)]).unwrap();
        let lp = Matrix::from_rows(&[[-1.0, -2.0, -0.5]]).unwrap();
        assert_eq!(path_score(&lat, &[0], &lp, 1.0).unwrap(), -0.5 + 0.75);
        assert_eq!(path_score(&lat, &[0], &lp, 0.0).unwrap(), 0.75);
    }

    #[test]
    fn hand_scored_paths() {
        let lat = two_path_lattice();
        let lp = Matrix::from_rows(&[[-0.1, -2.0], [-1.5, -0.3], [-0.7, -0.9]]).unwrap();
        let a = path_score(&lat, &[0, 1, 2], &lp, 2.0).unwrap();
        assert!((a - (2.0 * (-0.1 - 0.3 - 0.7) + 0.5 - 0.25)).abs() < 1e-15);
        let b = path_score(&lat, &[3, 4, 5], &lp, 2.0).unwrap();
        assert!((b - (2.0 * (-2.0 - 0.3 - 0.9) + 1.0)).abs() < 1e-15);
        assert!(path_score(&lat, &[0, 4, 5], &lp, 1.0).is_err());
        assert!(path_score(&lat, &[0, 1], &lp, 1.0).is_err());
    }

    #[test]
    fn structural_validation() {
        // Inconsistent times.
        assert!(Lattice::new(2, 3, vec![arc(0, 1, 0, 0.0), arc(1, 2, 0, 0.0), arc(0, 2, 0, 0.0)]).is_err());
        // Dead-end node.
        assert!(Lattice::new(2, 4, vec![arc(0, 1, 0, 0.0), arc(1, 3, 0, 0.0), arc(0, 2, 0, 0.0)]).is_err());
        // End node at wrong time.
        assert!(Lattice::<f64>::new(3, 2, vec![arc(0, 1, 0, 0.0)]).is_err());
        // No arcs at all.
        assert!(Lattice::<f64>::new(1, 2, vec![]).is_err());
    }

    #[test]
    fn single_path_has_zero_gradient() {
        let lat = Lattice::new(2, 3, vec![arc(0, 1, 0, 0.3), arc(1, 2, 1, -0.2)]).unwrap();
        let r = ReferencePath::new(vec![0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lp = random_log_posteriors(2, 2, &mut rng);
        let res = smbr_forward_backward(&lat, &r, &lp, 1.0).unwrap();
        assert!((res.expected_accuracy - 1.0).abs() < 1e-15);
        assert_eq!(res.d_log_posteriors.max_abs(), 0.0);
        assert!((res.loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_scores_average_accuracies() {
        let lat = Lattice::new(
            2,
            4,
            vec![
                arc(0, 1, 0, 0.0),
                arc(1, 3, 0, 0.0),
                arc(0, 2, 1, 0.0),
                arc(2, 3, 1, 0.0),
            ],
        )
        .unwrap();
        let lp = Matrix::filled(2, 2, 2f64.ln() * -1.0);
        let r = ReferencePath::new(vec![0, 0]);
        let res = smbr_forward_backward(&lat, &r, &lp, 1.0).unwrap();
        assert!((res.expected_accuracy - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_backward_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let frames = rng.random_range(1..=6);
            let states = rng.random_range(1..=4);
            let lat: Lattice<f64> = random_lattice(&mut rng, frames, states, 3);
            let r = ReferencePath::new((0..frames).map(|_| rng.random_range(0..states)).collect());
            let lp = random_log_posteriors(frames, states, &mut rng);
            let k = rng.random_range(0.3..2.0);
            let fb = smbr_forward_backward(&lat, &r, &lp, k).unwrap();
            let bf = brute_force_smbr(&lat, &r, &lp, k).unwrap();
            assert!((fb.expected_accuracy - bf.expected_accuracy).abs() < 1e-10);
            assert!((fb.log_partition - bf.log_partition).abs() < 1e-10);
            for (a, b) in fb
                .d_log_posteriors
                .as_slice()
                .iter()
                .zip(bf.d_log_posteriors.as_slice())
            {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn path_mass_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lat: Lattice<f64> = random_lattice(&mut rng, 5, 3, 3);
        let lp = random_log_posteriors(5, 3, &mut rng);
        let paths = lat.enumerate_paths(MAX_ENUMERATED_PATHS).unwrap();
        assert_eq!(paths.len(), lat.count_paths());
        let total: f64 = path_posteriors(&lat, &paths, &lp, 1.0).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_guard() {
        // 14 frames with 2 parallel arcs each: 16384 paths.
        let arcs = (0..14)
            .flat_map(|t| [arc(t, t + 1, 0, 0.0), arc(t, t + 1, 1, 0.0)])
            .collect();
        let lat = Lattice::new(14, 15, arcs).unwrap();
        let r = ReferencePath::new(vec![0; 14]);
        let lp = Matrix::filled(14, 2, -(2f64.ln()));
        assert!(matches!(brute_force_smbr(&lat, &r, &lp, 1.0), Err(Error::Capacity(_))));
        assert!(smbr_forward_backward(&lat, &r, &lp, 1.0).is_ok());
    }

    #[test]
    fn acoustic_scale_irrelevant_when_acoustics_tie() {
        let lat = two_path_lattice();
        let lp = Matrix::filled(3, 2, -0.4);
        let r = ReferencePath::new(vec![0, 1, 0]);
        let a = brute_force_smbr(&lat, &r, &lp, 1.0).unwrap();
        let b = brute_force_smbr(&lat, &r, &lp, 2.0).unwrap();
        assert!((a.expected_accuracy - b.expected_accuracy).abs() < 1e-12);
    }

    #[test]
    fn dominant_reference_path_approaches_full_accuracy() {
        let lat = two_path_lattice();
        // Path A states (0,1,0); make it 50 nats better than path B.
        let lp = Matrix::from_rows(&[[0.0, -50.0], [0.0, 0.0], [0.0, 0.0]]).unwrap();
        let r = ReferencePath::new(vec![0, 1, 0]);
        let res = brute_force_smbr(&lat, &r, &lp, 1.0).unwrap();
        assert!((res.expected_accuracy - 3.0).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let lat: Lattice<f64> = random_lattice(&mut rng, 6, 4, 3);
        let r = ReferencePath::new(vec![0, 1, 2, 3, 0, 1]);
        let lp = random_log_posteriors(6, 4, &mut rng);
        let base = smbr_forward_backward(&lat, &r, &lp, 1.3).unwrap();
        let mut shifted = lp.clone();
        for v in shifted.row_mut(2) {
            *v += 3.7;
        }
        let moved = smbr_forward_backward(&lat, &r, &shifted, 1.3).unwrap();
        assert!((base.expected_accuracy - moved.expected_accuracy).abs() < 1e-10);
    }

    #[test]
    fn regularizer_checks_mode_and_frames() {
        let lat = two_path_lattice();
        let r = ReferencePath::new(vec![0, 1, 0]);
        let z = Matrix::from_rows(&[[0.1, 0.2], [0.3, -0.1], [0.0, 0.5]]).unwrap();
        let y = crate::losses::softmax_temperature(&z, 1.0).unwrap();
        let smbr = smbr_forward_backward(&lat, &r, &y.ln().unwrap(), 1.0).unwrap();
        let ce = crate::losses::ce_loss(&y, &r.states, 1.0).unwrap();
        let ok = regularized_sequence_loss(&smbr, &ce, &y, 1.0, 0.2, SmoothingMode::CeSmoothed).unwrap();
        assert!((ok.value - (smbr.loss + 0.2 * ce.value)).abs() < 1e-15);
        assert!(regularized_sequence_loss(&smbr, &ce, &y, 1.0, 0.2, SmoothingMode::KlSmoothed).is_err());
        let short = crate::losses::ce_loss(&y.select_rows(&[0, 1]), &[0, 1], 1.0).unwrap();
        assert!(matches!(
            regularized_sequence_loss(&smbr, &short, &y, 1.0, 0.2, SmoothingMode::CeSmoothed),
            Err(Error::Consistency(_))
        ));
        let pure = regularized_sequence_loss(&smbr, &ce, &y, 1.0, 0.0, SmoothingMode::CeSmoothed).unwrap();
        let chained = log_softmax_backward(&smbr.d_log_posteriors, &y, 1.0).unwrap();
        assert_eq!(pure.d_logits, chained);
    }

    #[test]
    fn text_round_trip() {
        let lat = two_path_lattice();
        let r = ReferencePath::new(vec![0, 1, 1]);
        let text = lat.to_text(&r);
        let back: LatticeFile<f64> = parse_lattice(&text).unwrap();
        assert_eq!(back.reference, r);
        assert_eq!(back.lattice.arcs(), lat.arcs());
        assert_eq!(back.lattice.num_nodes(), 6);
    }

    #[test]
    fn text_parse_errors() {
        assert!(matches!(
            parse_lattice::<f64>("ARC 0 1 0 0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_lattice::<f64>("LAT 1 2\nARC 0 1 0 0.0\n").is_err());
        assert!(parse_lattice::<f64>("LAT 1 2\nARC 0 1 0 abc\nREF 0\n").is_err());
        assert!(parse_lattice::<f64>("LAT 1 2\nARC 0 1 0 0.0\nREF 0 1\n").is_err());
        assert!(parse_lattice::<f64>("LAT 1 2\nFOO\n").is_err());
        let ok = parse_lattice::<f64>("# comment\nLAT 1 2\n\nARC 0 1 3 -1.5 # tail\nREF 3\n").unwrap();
        assert_eq!(ok.lattice.arcs()[0].state, 3);
    }
}
