//! Subsequence reconstruction: reorder the interior of a tour window with
//! pinned endpoints using the heatmap policy ψ.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Checkpoint, ModelKind};
use crate::decode::{DecodeMode, ExpHeatmap};
use crate::error::{Error, Result};
use crate::instance::{closed_length_unchecked, NormalizedFrame, Point, Tour, TspInstance};
use crate::nn::{
    add_log_prob_grad, apply_gradients, clipped_heatmap, masked_softmax, reinforce_loss, Adam, AdamState,
    AttentionConfig, AttentionLayer, AttentionStack, DenseMatrix, Linear, Mlp, ParamGrads, ParamSet, RolloutBatch,
    Sense, Tape, TrainStats, Var,
};
use crate::rng;

/// A window of consecutive tour nodes whose two ends stay fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct SubseqProblem {
    /// Global node ids in current tour order.
    pub nodes: Vec<usize>,
    /// Original coordinates, used for rewards.
    pub coords: Vec<Point>,
    /// Coordinates mapped by `frame`, used as model input.
    pub normalized: Vec<Point>,
    pub frame: NormalizedFrame,
}

impl SubseqProblem {
    pub fn new(instance: &TspInstance, nodes: Vec<usize>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::BadDecomposition { m: nodes.len(), n: instance.len() });
        }
        let mut seen = vec![false; instance.len()];
        for (index, &node) in nodes.iter().enumerate() {
            if std::mem::replace(&mut seen[node], true) {
                return Err(Error::PathInvalid { index, node });
            }
        }
        let coords: Vec<Point> = nodes.iter().map(|&v| instance.point(v)).collect();
        let frame = NormalizedFrame::fit(&coords)?;
        let normalized = coords.iter().map(|&p| frame.apply(p)).collect();
        Ok(SubseqProblem { nodes, coords, normalized, frame })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Open-path length of a local order, in original coordinates.
    pub fn path_length(&self, local: &[usize]) -> f64 {
        local.windows(2).fold(0.0, |acc, w| acc + self.coords[w[0]].dist(self.coords[w[1]]))
    }

    pub fn original_length(&self) -> f64 {
        self.coords.windows(2).fold(0.0, |acc, w| acc + w[0].dist(w[1]))
    }
}

/// One window of a decomposition: tour positions and the nodes found there.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub positions: Vec<usize>,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub offset: usize,
    pub windows: Vec<Window>,
    /// Nodes not covered by any window this round.
    pub leftovers: Vec<usize>,
}

/// Cuts `⌊n/m⌋` disjoint windows of length `m` from the tour rotated by a
/// seeded random offset.
pub fn decompose(tour: &Tour, m: usize, seed: u64) -> Result<Decomposition> {
    let n = tour.len();
    if m < 2 || m > n {
        return Err(Error::BadDecomposition { m, n });
    }
    let offset = rng::index(&mut rng::rng(seed), n);
    let count = n / m;
    let windows = (0..count)
        .map(|w| {
            let positions: Vec<usize> = (0..m).map(|i| (offset + w * m + i) % n).collect();
            let nodes = positions.iter().map(|&p| tour.order[p]).collect();
            Window { positions, nodes }
        })
        .collect();
    let leftovers = (count * m..n).map(|i| tour.order[(offset + i) % n]).collect();
    Ok(Decomposition { offset, windows, leftovers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrHyper {
    pub attn: AttentionConfig,
    /// Attention layers after the endpoint MLPs (`l_s`).
    pub layers: usize,
    /// Heatmap clip `C`.
    pub clip: f64,
}

impl Default for SrHyper {
    fn default() -> Self {
        SrHyper { attn: AttentionConfig::default(), layers: 6, clip: 10.0 }
    }
}

/// The subsequence policy ψ.
#[derive(Debug, Clone)]
pub struct SrPolicy {
    pub hyper: SrHyper,
    pub params: ParamSet,
    embed: Linear,
    first_layer: AttentionLayer,
    first_mlp: Mlp,
    last_mlp: Mlp,
    stack: AttentionStack,
    mlp_a: Mlp,
    mlp_b: Mlp,
}

impl SrPolicy {
    pub fn new(hyper: SrHyper, seed: u64) -> Result<Self> {
        hyper.attn.validate()?;
        let d = hyper.attn.dim;
        let mut r = rng::rng(seed);
        let mut params = ParamSet::new();
        let embed = Linear::new(&mut params, "embed", 2, d, &mut r);
        let first_layer = AttentionLayer::new(&mut params, "attn0", hyper.attn, &mut r);
        let first_mlp = Mlp::new(&mut params, "mlp_first", d, d, d, &mut r);
        let last_mlp = Mlp::new(&mut params, "mlp_last", d, d, d, &mut r);
        let stack = AttentionStack::new(&mut params, "attn", hyper.layers, hyper.attn, &mut r);
        let mlp_a = Mlp::new(&mut params, "mlp_a", d, d, d, &mut r);
        let mlp_b = Mlp::new(&mut params, "mlp_b", d, d, d, &mut r);
        Ok(SrPolicy { hyper, params, embed, first_layer, first_mlp, last_mlp, stack, mlp_a, mlp_b })
    }

    /// Records the encoder on `tape` and returns the `m × m` heatmap.
    pub fn forward(&self, tape: &mut Tape, normalized: &[Point]) -> Var {
        let m = normalized.len();
        let f = DenseMatrix::from_vec(m, 2, normalized.iter().flat_map(|p| [p.x, p.y]).collect());
        let x = tape.input(f);
        let h0 = self.embed.forward(tape, x);
        let h1 = self.first_layer.forward(tape, h0);
        let first = tape.gather(h1, &[0]);
        let first = self.first_mlp.forward(tape, first);
        let last = tape.gather(h1, &[m - 1]);
        let last = self.last_mlp.forward(tape, last);
        let z = if m > 2 {
            let inner: Vec<usize> = (1..m - 1).collect();
            let inner = tape.gather(h1, &inner);
            tape.concat_rows(&[first, inner, last])
        } else {
            tape.concat_rows(&[first, last])
        };
        let h = self.stack.forward(tape, z);
        let a = self.mlp_a.forward(tape, h);
        let b = self.mlp_b.forward(tape, h);
        clipped_heatmap(tape, a, b, self.hyper.attn.dim, self.hyper.clip)
    }

    pub fn encode(&self, problem: &SubseqProblem) -> DenseMatrix {
        let mut tape = Tape::new(&self.params);
        let h = self.forward(&mut tape, &problem.normalized);
        tape.value(h).clone()
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Checkpoint::new(ModelKind::Subseq, &self.hyper, &self.params, step)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != ModelKind::Subseq {
            return Err(Error::ModelIdMismatch {
                expected: ModelKind::Subseq.as_str().into(),
                found: ck.model.as_str().into(),
            });
        }
        let mut p = SrPolicy::new(ck.hyper()?, 0)?;
        ck.restore_into(&mut p.params)?;
        Ok(p)
    }
}

/// A reconstructed window in local indices (`0` is the start, `m − 1` the end).
#[derive(Debug, Clone, PartialEq)]
pub struct SrTrajectory {
    pub order: Vec<usize>,
    pub length: f64,
    pub log_prob: f64,
}

/// Feasibility at one decoding step: unvisited, and the end node only once
/// nothing else is left.
fn sr_mask(visited: &[bool], feasible: &mut [bool]) -> usize {
    let m = visited.len();
    let mut count = 0;
    for j in 0..m - 1 {
        feasible[j] = !visited[j];
        count += feasible[j] as usize;
    }
    feasible[m - 1] = count == 0 && !visited[m - 1];
    count + feasible[m - 1] as usize
}

/// Decodes `n_traj` trajectories from the heatmap (one in greedy mode).
pub fn sr_rollout(
    problem: &SubseqProblem,
    heatmap: &DenseMatrix,
    n_traj: usize,
    mode: DecodeMode,
    seed: u64,
) -> Vec<SrTrajectory> {
    let m = problem.len();
    let count = if mode == DecodeMode::Greedy { n_traj.min(1) } else { n_traj };
    let exp = ExpHeatmap::new(heatmap);
    let mut r = rng::rng(seed);
    let mut visited = vec![false; m];
    let mut feasible = vec![false; m];
    (0..count)
        .map(|_| {
            visited.iter_mut().for_each(|v| *v = false);
            visited[0] = true;
            let mut order = Vec::with_capacity(m);
            order.push(0);
            let mut log_prob = 0.0;
            while order.len() < m {
                let cur = *order.last().unwrap();
                let k = sr_mask(&visited, &mut feasible);
                let (j, lp) = exp.pick(cur, &feasible, k, mode, &mut r);
                log_prob += lp;
                visited[j] = true;
                order.push(j);
            }
            let length = problem.path_length(&order);
            SrTrajectory { order, length, log_prob }
        })
        .collect()
}

/// Adds `weight · ∂ log p(trajectory) / ∂H` into `grad`.
fn add_trajectory_grad(heatmap: &DenseMatrix, order: &[usize], weight: f64, grad: &mut DenseMatrix) -> Result<()> {
    let m = heatmap.rows;
    let mut visited = vec![false; m];
    let mut feasible = vec![false; m];
    visited[order[0]] = true;
    for w in order.windows(2) {
        let (cur, next) = (w[0], w[1]);
        if sr_mask(&visited, &mut feasible) > 1 {
            let probs = masked_softmax(heatmap.row(cur), &feasible)?;
            add_log_prob_grad(&probs, next, weight, grad.row_mut(cur));
        }
        visited[next] = true;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    /// Window length `m`; clamped to the instance size.
    pub m: usize,
    /// Trajectories per window `N`.
    pub trajectories: usize,
    pub mode: DecodeMode,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig { m: 100, trajectories: 128, mode: DecodeMode::Sample }
    }
}

/// Best trajectory for one window, or `None` if the window is degenerate.
fn best_for_window(policy: &SrPolicy, problem: &SubseqProblem, cfg: &SrConfig, seed: u64) -> Option<SrTrajectory> {
    let heatmap = policy.encode(problem);
    if !heatmap.is_finite() {
        log::warn!("non-finite subsequence heatmap, window skipped");
        return None;
    }
    sr_rollout(problem, &heatmap, cfg.trajectories.max(1), cfg.mode, seed).into_iter().reduce(|best, t| {
        if t.length < best.length {
            t
        } else {
            best
        }
    })
}

/// One round of subsequence reconstruction over a fresh decomposition.
/// A window is replaced when its new open length does not exceed the old.
pub fn sr_improve(instance: &TspInstance, tour: &Tour, policy: &SrPolicy, cfg: &SrConfig, seed: u64) -> Result<Tour> {
    let n = tour.len();
    let m = cfg.m.min(n);
    if m < 4 {
        // At most one interior node: nothing to reorder.
        return Ok(tour.clone());
    }
    let dec = decompose(tour, m, rng::split(seed, 0))?;
    let results: Vec<Option<(usize, Vec<usize>)>> = dec
        .windows
        .par_iter()
        .enumerate()
        .map(|(w, win)| {
            let problem = match SubseqProblem::new(instance, win.nodes.clone()) {
                Ok(p) => p,
                Err(Error::DegenerateGeometry) => return None,
                Err(e) => {
                    log::warn!("window {w} skipped: {e}");
                    return None;
                }
            };
            let best = best_for_window(policy, &problem, cfg, rng::split(seed, 1 + w as u64))?;
            (best.length <= problem.original_length()).then_some((w, best.order))
        })
        .collect();
    let mut order = tour.order.clone();
    for (w, local) in results.into_iter().flatten() {
        let win = &dec.windows[w];
        for (&pos, &l) in win.positions.iter().zip(&local) {
            order[pos] = win.nodes[l];
        }
    }
    if closed_length_unchecked(instance, &order) > closed_length_unchecked(instance, &tour.order) {
        return Ok(tour.clone());
    }
    Ok(Tour::new(order))
}

/// Per-problem REINFORCE gradient for ψ.
fn sr_problem_grad(
    policy: &SrPolicy,
    problem: &SubseqProblem,
    n_traj: usize,
    seed: u64,
) -> Result<(ParamGrads, f64, f64)> {
    let mut tape = Tape::new(&policy.params);
    let hv = policy.forward(&mut tape, &problem.normalized);
    let heatmap = tape.value(hv).clone();
    if !heatmap.is_finite() {
        return Err(Error::Numeric("non-finite subsequence heatmap".into()));
    }
    let trajs = sr_rollout(problem, &heatmap, n_traj, DecodeMode::Sample, seed);
    let mut batch = RolloutBatch::default();
    for t in &trajs {
        batch.push(t.log_prob, t.length);
    }
    let loss = reinforce_loss(&batch, Sense::Minimize)?;
    if loss.weights.iter().all(|&w| w == 0.0) {
        return Ok((ParamGrads::zeros_like(&policy.params), batch.mean(), 0.0));
    }
    let mut grad = DenseMatrix::zeros(heatmap.rows, heatmap.cols);
    for (t, &w) in trajs.iter().zip(&loss.weights) {
        add_trajectory_grad(&heatmap, &t.order, w, &mut grad)?;
    }
    let g = tape.backward(&[(hv, &grad)]);
    Ok((g.params, batch.mean(), loss.value))
}

/// One REINFORCE step of ψ over a batch of problems, `n_traj` sampled
/// trajectories each, with lengths as costs.
pub fn sr_train_step(
    policy: &mut SrPolicy,
    problems: &[SubseqProblem],
    n_traj: usize,
    adam: &Adam,
    state: &mut AdamState,
    seed: u64,
) -> Result<TrainStats> {
    if problems.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let pol: &SrPolicy = policy;
    let parts = problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| sr_problem_grad(pol, p, n_traj, rng::split(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let count = parts.len() as f64;
    let mean_reward = parts.iter().map(|p| p.1).sum::<f64>() / count;
    let loss = parts.iter().map(|p| p.2).sum::<f64>() / count;
    let grads = parts.into_iter().map(|p| p.0).collect();
    let grad_norm = apply_gradients(&mut policy.params, grads, 1.0 / count, adam, state)?;
    Ok(TrainStats { mean_reward, loss, grad_norm })
}

/// Mean greedy path length over `problems`.
pub fn sr_greedy_length(policy: &SrPolicy, problems: &[SubseqProblem]) -> f64 {
    let per: Vec<f64> =
        problems.par_iter().map(|p| sr_rollout(p, &policy.encode(p), 1, DecodeMode::Greedy, 0)[0].length).collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Cuts training problems from every tour with a fresh random offset.
/// Degenerate windows are dropped.
pub fn sr_training_problems(instances: &[TspInstance], tours: &[Tour], m: usize, seed: u64) -> Vec<SubseqProblem> {
    let mut out = Vec::new();
    for (i, (inst, tour)) in instances.iter().zip(tours).enumerate() {
        let m = m.min(inst.len());
        let Ok(dec) = decompose(tour, m, rng::split(seed, i as u64)) else { continue };
        out.extend(dec.windows.into_iter().filter_map(|w| SubseqProblem::new(inst, w.nodes).ok()));
    }
    out
}
