//! Autoregressive selection over one heatmap row.

use serde::{Deserialize, Serialize};

use crate::nn::DenseMatrix;
use crate::rng::{self, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Sample,
    /// Argmax with the lowest index winning ties.
    Greedy,
}

/// A heatmap together with `exp(H − max H)`, computed once per problem so
/// that each sampling step only needs additions.
pub(crate) struct ExpHeatmap<'a> {
    pub scores: &'a DenseMatrix,
    exps: DenseMatrix,
}

impl<'a> ExpHeatmap<'a> {
    pub fn new(scores: &'a DenseMatrix) -> Self {
        let max = scores.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps =
            DenseMatrix::from_vec(scores.rows, scores.cols, scores.data.iter().map(|&s| (s - max).exp()).collect());
        ExpHeatmap { scores, exps }
    }

    /// Picks a column of row `row` among `feasible` entries (`count` of them)
    /// and returns it with its log-probability under the masked softmax.
    /// A forced choice has log-probability exactly 0.
    pub fn pick(
        &self,
        row: usize,
        feasible: &[bool],
        count: usize,
        mode: DecodeMode,
        r: &mut SeededRng,
    ) -> (usize, f64) {
        debug_assert!(count >= 1);
        let scores = self.scores.row(row);
        let exps = self.exps.row(row);
        if count == 1 {
            return (feasible.iter().position(|&f| f).expect("one feasible entry"), 0.0);
        }
        let total: f64 = exps.iter().zip(feasible).filter(|(_, &f)| f).map(|(e, _)| e).sum();
        let greedy = || {
            let mut best = usize::MAX;
            for (j, &f) in feasible.iter().enumerate() {
                if f && (best == usize::MAX || scores[j] > scores[best]) {
                    best = j;
                }
            }
            best
        };
        let choice = match mode {
            DecodeMode::Greedy => greedy(),
            // With an extreme score range every weight may underflow.
            DecodeMode::Sample if !(total > 0.0) => greedy(),
            DecodeMode::Sample => {
                let u = rng::unit(r) * total;
                let mut acc = 0.0;
                let mut last = usize::MAX;
                let mut chosen = None;
                for (j, &f) in feasible.iter().enumerate() {
                    if !f {
                        continue;
                    }
                    last = j;
                    acc += exps[j];
                    if u < acc {
                        chosen = Some(j);
                        break;
                    }
                }
                chosen.unwrap_or(last)
            }
        };
        let logp = if total > 0.0 && exps[choice] > 0.0 {
            exps[choice].ln() - total.ln()
        } else {
            // Fall back to the exact masked log-softmax.
            let max =
                scores.iter().zip(feasible).filter(|(_, &f)| f).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
            let lse = scores.iter().zip(feasible).filter(|(_, &f)| f).map(|(s, _)| (s - max).exp()).sum::<f64>().ln();
            scores[choice] - max - lse
        };
        (choice, logp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::masked_softmax;

    #[test]
    fn forced_choice_has_zero_log_prob() {
        let h = DenseMatrix::from_rows(&[vec![0.3, -2.0, 1.0]]);
        let e = ExpHeatmap::new(&h);
        let mut r = rng::rng(0);
        assert_eq!(e.pick(0, &[false, true, false], 1, DecodeMode::Sample, &mut r), (1, 0.0));
    }

    #[test]
    fn greedy_ties_break_low() {
        let h = DenseMatrix::from_rows(&[vec![1.0, 2.0, 2.0, 0.0]]);
        let e = ExpHeatmap::new(&h);
        let mut r = rng::rng(0);
        let (j, lp) = e.pick(0, &[true; 4], 4, DecodeMode::Greedy, &mut r);
        assert_eq!(j, 1);
        let p = masked_softmax(h.row(0), &[true; 4]).unwrap();
        assert!((lp - p[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn sampling_frequencies_follow_softmax() {
        let h = DenseMatrix::from_rows(&[vec![0.0, 1.0, -1.0, 5.0]]);
        let mask = [true, true, true, false];
        let e = ExpHeatmap::new(&h);
        let p = masked_softmax(h.row(0), &mask).unwrap();
        let mut r = rng::rng(11);
        let mut counts = [0usize; 4];
        let trials = 40_000;
        for _ in 0..trials {
            let (j, lp) = e.pick(0, &mask, 3, DecodeMode::Sample, &mut r);
            assert!((lp - p[j].ln()).abs() < 1e-12);
            counts[j] += 1;
        }
        assert_eq!(counts[3], 0);
        for j in 0..3 {
            assert!((counts[j] as f64 / trials as f64 - p[j]).abs() < 0.01);
        }
    }
}
