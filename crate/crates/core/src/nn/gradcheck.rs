use super::ParamSet;
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Blocks with more scalars than this are checked on a seeded sample of
    /// this many coordinates.
    pub max_per_block: usize,
    /// Denominator floor of the relative error, guarding near-zero gradients
    /// where rounding in the difference quotient dominates.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-6, max_per_block: 200, floor: 1e-4, seed: 0 }
    }
}

/// Worst relative disagreement between the analytic gradients stored in
/// `params` and central differences of `forward`.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(forward: F, params: &ParamSet, opts: &GradCheckOptions) -> f64
where
    F: Fn(&ParamSet) -> f64,
{
    let mut probe = params.clone();
    let mut r = rng::rng(opts.seed);
    let mut worst = 0.0f64;
    for b in 0..params.len() {
        let size = params.blocks()[b].value.data.len();
        let coords: Vec<usize> = if size <= opts.max_per_block {
            (0..size).collect()
        } else {
            (0..opts.max_per_block).map(|_| rng::index(&mut r, size)).collect()
        };
        for i in coords {
            let orig = params.blocks()[b].value.data[i];
            probe.blocks_mut()[b].value.data[i] = orig + opts.eps;
            let plus = forward(&probe);
            probe.blocks_mut()[b].value.data[i] = orig - opts.eps;
            let minus = forward(&probe);
            probe.blocks_mut()[b].value.data[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = params.blocks()[b].grad.data[i];
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let err = (analytic - numeric).abs() / denom;
            if !err.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(err);
        }
    }
    worst
}
