//! First-pass decoding of frame posteriors under a state-persistence prior,
//! used to produce adaptation pseudo-labels.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Most likely state sequence for one utterance given per-frame posteriors
/// (`frames × states`) and a transition model that keeps the current state
/// with probability `stay` and otherwise moves uniformly to another state.
/// Ties go to the lowest state index.
pub fn viterbi_sticky(posteriors: &Matrix<f64>, stay: f64) -> Result<Vec<usize>> {
    let (frames, states) = posteriors.shape();
    if frames == 0 || states == 0 {
        return Err(Error::Parameter("nothing to decode".into()));
    }
    if !(stay > 0.0 && stay < 1.0) || states == 1 {
        return Err(Error::Parameter(format!(
            "stay probability {stay} must lie in (0, 1) with at least two states"
        )));
    }
    let log_stay = stay.ln();
    let log_move = ((1.0 - stay) / (states - 1) as f64).ln();
    let emit = |t: usize, s: usize| posteriors[(t, s)].max(1e-300).ln();
    let mut score: Vec<f64> = (0..states).map(|s| emit(0, s)).collect();
    let mut back = vec![vec![0usize; states]; frames];
    for t in 1..frames {
        let mut next = vec![0.0; states];
        for s in 0..states {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for (p, &prev) in score.iter().enumerate() {
                let v = prev + if p == s { log_stay } else { log_move };
                if v > best {
                    best = v;
                    arg = p;
                }
            }
            next[s] = best + emit(t, s);
            back[t][s] = arg;
        }
        score = next;
    }
    let mut state = 0;
    for s in 1..states {
        if score[s] > score[state] {
            state = s;
        }
    }
    let mut path = vec![state; frames];
    for t in (1..frames).rev() {
        state = back[t][state];
        path[t - 1] = state;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sticky_prior_smooths_isolated_flips() {
        let p = Matrix::from_rows(&[[0.9, 0.1], [0.9, 0.1], [0.45, 0.55], [0.9, 0.1]]).unwrap();
        assert_eq!(viterbi_sticky(&p, 0.8).unwrap(), vec![0, 0, 0, 0]);
        // A weak prior keeps the frame decision.
        assert_eq!(viterbi_sticky(&p, 0.5).unwrap(), vec![0, 0, 1, 0]);
    }

    #[test]
    fn confident_changes_survive() {
        let p = Matrix::from_rows(&[[0.99, 0.01], [0.99, 0.01], [0.01, 0.99], [0.01, 0.99]]).unwrap();
        assert_eq!(viterbi_sticky(&p, 0.8).unwrap(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(viterbi_sticky(&Matrix::zeros(0, 2), 0.5).is_err());
        assert!(viterbi_sticky(&Matrix::filled(2, 2, 0.5), 1.0).is_err());
    }
}
