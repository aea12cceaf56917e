//! Regional reconstruction: drop the tour edges leaving the `k` nodes
//! nearest a sampled center, then reassemble the resulting path fragments
//! in a new order and orientation chosen by the policy φ.
//!
//! Oriented candidate `j` is fragment `j / 2`, reversed when `j` is odd;
//! its partner is `j ^ 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Checkpoint, ModelKind};
use crate::decode::{DecodeMode, ExpHeatmap};
use crate::error::{Error, Result};
use crate::instance::{closed_length_unchecked, open_length_unchecked, NormalizedFrame, Point, Tour, TspInstance};
use crate::nn::{
    add_log_prob_grad, apply_gradients, clipped_heatmap, masked_softmax, reinforce_loss, Adam, AdamState,
    AttentionConfig, AttentionStack, DenseMatrix, Linear, Mlp, ParamGrads, ParamSet, RolloutBatch, Sense, Tape,
    TrainStats, Var,
};
use crate::rng;

/// Largest `k` accepted by [`rr_brute_force`].
pub const ORACLE_MAX_K: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub nodes: Vec<usize>,
    /// Open-path length of `nodes`; identical in either direction.
    pub internal: f64,
}

impl Fragment {
    pub fn first(&self) -> usize {
        self.nodes[0]
    }

    pub fn last(&self) -> usize {
        *self.nodes.last().unwrap()
    }

    /// Endpoints of the oriented copy.
    pub fn ends(&self, reversed: bool) -> (usize, usize) {
        if reversed {
            (self.last(), self.first())
        } else {
            (self.first(), self.last())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionProblem {
    pub fragments: Vec<Fragment>,
    pub center: Point,
    /// Tour edges removed, as `(predecessor, successor)`.
    pub removed: Vec<(usize, usize)>,
    /// `2k × 4` normalized endpoint features, one row per oriented candidate.
    pub features: DenseMatrix,
    pub frame: NormalizedFrame,
    /// `conn[a][b]`: cost from the end of candidate `a` to the start of `b`.
    conn: DenseMatrix,
}

impl RegionProblem {
    pub fn k(&self) -> usize {
        self.fragments.len()
    }

    pub fn candidates(&self) -> usize {
        2 * self.fragments.len()
    }

    pub fn internal_total(&self) -> f64 {
        self.fragments.iter().map(|f| f.internal).sum()
    }

    /// Connection cost from candidate `a`'s end to candidate `b`'s start.
    #[inline]
    pub fn connection(&self, a: usize, b: usize) -> f64 {
        self.conn.get(a, b)
    }

    /// Negated sum of the `k` connection costs, closing edge included.
    /// The costs are summed in ascending order so that every rotation and
    /// reflection of one cyclic arrangement scores bit-identically.
    pub fn reward(&self, ordering: &[usize]) -> f64 {
        let k = ordering.len();
        let mut costs: Vec<f64> = (0..k).map(|i| self.connection(ordering[i], ordering[(i + 1) % k])).collect();
        costs.sort_by(f64::total_cmp);
        -costs.iter().sum::<f64>()
    }

    pub fn validate_ordering(&self, ordering: &[usize]) -> Result<()> {
        let k = self.k();
        if ordering.len() != k {
            return Err(Error::OrderingInvalid(format!("expected {k} entries, found {}", ordering.len())));
        }
        let mut used = vec![false; k];
        for (i, &c) in ordering.iter().enumerate() {
            if c >= 2 * k {
                return Err(Error::OrderingInvalid(format!("candidate {c} out of range at index {i}")));
            }
            if std::mem::replace(&mut used[c / 2], true) {
                return Err(Error::OrderingInvalid(format!("fragment {} used twice (index {i})", c / 2)));
            }
        }
        Ok(())
    }
}

/// The `k` nodes nearest `center`, ties broken by lower index.
fn nearest_to(instance: &TspInstance, center: Point, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = instance.coords().iter().enumerate().map(|(i, p)| (p.dist(center), i)).collect();
    let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k, key);
        all.truncate(k);
    }
    all.into_iter().map(|(_, i)| i).collect()
}

/// Builds the regional problem for `center`. Fragments are listed in tour
/// order starting after the first removed edge.
pub fn extract_region(instance: &TspInstance, tour: &Tour, center: Point, k: usize) -> Result<RegionProblem> {
    let n = tour.len();
    if k > n {
        return Err(Error::RegionTooLarge { k, n });
    }
    if k == 0 {
        return Err(Error::Config("region size k must be at least 1".into()));
    }
    let mut chosen = vec![false; instance.len()];
    for v in nearest_to(instance, center, k) {
        chosen[v] = true;
    }
    let cuts: Vec<usize> = (0..n).filter(|&i| chosen[tour.order[i]]).collect();
    let removed = cuts.iter().map(|&i| (tour.order[i], tour.order[(i + 1) % n])).collect();

    let mut fragments = Vec::with_capacity(k);
    for (c, &cut) in cuts.iter().enumerate() {
        let end = cuts[(c + 1) % k];
        let mut nodes = Vec::new();
        let mut pos = (cut + 1) % n;
        loop {
            nodes.push(tour.order[pos]);
            if pos == end {
                break;
            }
            pos = (pos + 1) % n;
        }
        let internal = open_length_unchecked(instance, &nodes);
        fragments.push(Fragment { nodes, internal });
    }

    let ends: Vec<Point> =
        fragments.iter().flat_map(|f| [instance.point(f.first()), instance.point(f.last())]).collect();
    let frame = NormalizedFrame::fit(&ends)?;
    let mut features = DenseMatrix::zeros(2 * k, 4);
    let mut conn = DenseMatrix::zeros(2 * k, 2 * k);
    for j in 0..2 * k {
        let (a, b) = fragments[j / 2].ends(j % 2 == 1);
        let (pa, pb) = (frame.apply(instance.point(a)), frame.apply(instance.point(b)));
        features.row_mut(j).copy_from_slice(&[pa.x, pa.y, pb.x, pb.y]);
        for i in 0..2 * k {
            let start = fragments[i / 2].ends(i % 2 == 1).0;
            conn.set(j, i, instance.cost(b, start));
        }
    }
    Ok(RegionProblem { fragments, center, removed, features, frame, conn })
}

/// A complete fragment order with its reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    pub oriented: Vec<usize>,
    pub reward: f64,
    pub log_prob: f64,
}

/// Concatenates the oriented fragments into a tour.
pub fn rr_reconstruct(problem: &RegionProblem, ordering: &[usize]) -> Result<Tour> {
    problem.validate_ordering(ordering)?;
    let mut order = Vec::with_capacity(problem.fragments.iter().map(|f| f.nodes.len()).sum());
    for &c in ordering {
        let f = &problem.fragments[c / 2];
        if c % 2 == 1 {
            order.extend(f.nodes.iter().rev());
        } else {
            order.extend_from_slice(&f.nodes);
        }
    }
    Ok(Tour::new(order))
}

/// Exhaustive search with fragment 0 fixed first and forward, which loses
/// nothing by cyclic and reflection symmetry. Orderings are visited in
/// lexicographic order and only strict improvements replace the incumbent,
/// so ties resolve to the lexicographically smallest ordering.
pub fn rr_brute_force(problem: &RegionProblem) -> Result<Ordering> {
    let k = problem.k();
    if k > ORACLE_MAX_K {
        return Err(Error::OracleTooLarge { k, max: ORACLE_MAX_K });
    }
    let mut used = vec![false; k];
    used[0] = true;
    let mut current = vec![0usize];
    let mut best: Option<(f64, Vec<usize>)> = None;
    fn search(p: &RegionProblem, used: &mut [bool], cur: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
        let k = used.len();
        if cur.len() == k {
            let r = p.reward(cur);
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                *best = Some((r, cur.clone()));
            }
            return;
        }
        for c in 0..2 * k {
            if used[c / 2] {
                continue;
            }
            used[c / 2] = true;
            cur.push(c);
            search(p, used, cur, best);
            cur.pop();
            used[c / 2] = false;
        }
    }
    search(problem, &mut used, &mut current, &mut best);
    let (reward, oriented) = best.expect("at least one ordering");
    Ok(Ordering { oriented, reward, log_prob: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrHyper {
    pub attn: AttentionConfig,
    /// Attention layers `l_r`.
    pub layers: usize,
    pub clip: f64,
}

impl Default for RrHyper {
    fn default() -> Self {
        RrHyper { attn: AttentionConfig::default(), layers: 6, clip: 10.0 }
    }
}

/// The regional policy φ.
#[derive(Debug, Clone)]
pub struct RrPolicy {
    pub hyper: RrHyper,
    pub params: ParamSet,
    embed: Linear,
    stack: AttentionStack,
    mlp_a: Mlp,
    mlp_b: Mlp,
}

impl RrPolicy {
    pub fn new(hyper: RrHyper, seed: u64) -> Result<Self> {
        hyper.attn.validate()?;
        let d = hyper.attn.dim;
        let mut r = rng::rng(seed);
        let mut params = ParamSet::new();
        let embed = Linear::new(&mut params, "embed", 4, d, &mut r);
        let stack = AttentionStack::new(&mut params, "attn", hyper.layers, hyper.attn, &mut r);
        let mlp_a = Mlp::new(&mut params, "mlp_a", d, d, d, &mut r);
        let mlp_b = Mlp::new(&mut params, "mlp_b", d, d, d, &mut r);
        Ok(RrPolicy { hyper, params, embed, stack, mlp_a, mlp_b })
    }

    /// Records the encoder and returns the `2k × 2k` heatmap.
    pub fn forward(&self, tape: &mut Tape, features: &DenseMatrix) -> Var {
        let x = tape.input(features.clone());
        let h = self.embed.forward(tape, x);
        let h = self.stack.forward(tape, h);
        let a = self.mlp_a.forward(tape, h);
        let b = self.mlp_b.forward(tape, h);
        clipped_heatmap(tape, a, b, self.hyper.attn.dim, self.hyper.clip)
    }

    pub fn encode(&self, problem: &RegionProblem) -> DenseMatrix {
        let mut tape = Tape::new(&self.params);
        let h = self.forward(&mut tape, &problem.features);
        tape.value(h).clone()
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Checkpoint::new(ModelKind::Regional, &self.hyper, &self.params, step)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != ModelKind::Regional {
            return Err(Error::ModelIdMismatch {
                expected: ModelKind::Regional.as_str().into(),
                found: ck.model.as_str().into(),
            });
        }
        let mut p = RrPolicy::new(ck.hyper()?, 0)?;
        ck.restore_into(&mut p.params)?;
        Ok(p)
    }
}

/// Marks feasible candidates (fragment unused) and returns their count.
fn rr_mask(used: &[bool], feasible: &mut [bool]) -> usize {
    let mut count = 0;
    for (j, f) in feasible.iter_mut().enumerate() {
        *f = !used[j / 2];
        count += *f as usize;
    }
    count
}

/// Multi-start decoding: trajectory `t` starts at candidate `t mod 2k` with
/// log-probability 0. Greedy mode yields `min(n_traj, 2k)` distinct starts.
pub fn rr_rollout(
    problem: &RegionProblem,
    heatmap: &DenseMatrix,
    n_traj: usize,
    mode: DecodeMode,
    seed: u64,
) -> Vec<Ordering> {
    let k = problem.k();
    let c = 2 * k;
    let count = if mode == DecodeMode::Greedy { n_traj.min(c) } else { n_traj };
    let exp = ExpHeatmap::new(heatmap);
    let mut r = rng::rng(seed);
    let mut used = vec![false; k];
    let mut feasible = vec![false; c];
    (0..count)
        .map(|t| {
            used.iter_mut().for_each(|u| *u = false);
            let start = t % c;
            used[start / 2] = true;
            let mut oriented = Vec::with_capacity(k);
            oriented.push(start);
            let mut log_prob = 0.0;
            while oriented.len() < k {
                let cur = *oriented.last().unwrap();
                let cnt = rr_mask(&used, &mut feasible);
                let (j, lp) = exp.pick(cur, &feasible, cnt, mode, &mut r);
                log_prob += lp;
                used[j / 2] = true;
                oriented.push(j);
            }
            let reward = problem.reward(&oriented);
            Ordering { oriented, reward, log_prob }
        })
        .collect()
}

fn add_ordering_grad(heatmap: &DenseMatrix, oriented: &[usize], weight: f64, grad: &mut DenseMatrix) -> Result<()> {
    let c = heatmap.rows;
    let mut used = vec![false; c / 2];
    let mut feasible = vec![false; c];
    used[oriented[0] / 2] = true;
    for w in oriented.windows(2) {
        let (cur, next) = (w[0], w[1]);
        if rr_mask(&used, &mut feasible) > 1 {
            let probs = masked_softmax(heatmap.row(cur), &feasible)?;
            add_log_prob_grad(&probs, next, weight, grad.row_mut(cur));
        }
        used[next / 2] = true;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionSolver {
    Policy,
    /// Exhaustive search; only valid for `k <= ORACLE_MAX_K`.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrConfig {
    /// Region size; clamped to the instance size.
    pub k: usize,
    pub trajectories: usize,
    pub mode: DecodeMode,
    pub solver: RegionSolver,
}

impl Default for RrConfig {
    fn default() -> Self {
        RrConfig { k: 60, trajectories: 128, mode: DecodeMode::Greedy, solver: RegionSolver::Policy }
    }
}

/// Uniform point in the instance's bounding box.
pub fn sample_center(instance: &TspInstance, seed: u64) -> Point {
    let (lo, hi) = instance.bounds();
    let mut r = rng::rng(seed);
    let x = lo.x + (hi.x - lo.x) * rng::unit(&mut r);
    let y = lo.y + (hi.y - lo.y) * rng::unit(&mut r);
    Point::new(x, y)
}

/// Highest reward, earliest on ties.
fn best_ordering(orderings: Vec<Ordering>) -> Option<Ordering> {
    orderings.into_iter().reduce(|best, o| if o.reward > best.reward { o } else { best })
}

/// One regional reconstruction around a random center. The result replaces
/// the input only when strictly shorter.
pub fn rr_improve(instance: &TspInstance, tour: &Tour, policy: &RrPolicy, cfg: &RrConfig, seed: u64) -> Result<Tour> {
    let n = tour.len();
    let k = cfg.k.min(n);
    if n < 4 || k < 2 {
        return Ok(tour.clone());
    }
    let center = sample_center(instance, rng::split(seed, 0));
    let problem = match extract_region(instance, tour, center, k) {
        Ok(p) => p,
        Err(Error::DegenerateGeometry) => return Ok(tour.clone()),
        Err(e) => return Err(e),
    };
    let best = match cfg.solver {
        RegionSolver::Oracle => rr_brute_force(&problem)?,
        RegionSolver::Policy => {
            let heatmap = policy.encode(&problem);
            if !heatmap.is_finite() {
                log::warn!("non-finite regional heatmap, reconstruction skipped");
                return Ok(tour.clone());
            }
            let n_traj = match cfg.mode {
                DecodeMode::Greedy => cfg.trajectories.min(problem.candidates()),
                DecodeMode::Sample => cfg.trajectories,
            };
            match best_ordering(rr_rollout(&problem, &heatmap, n_traj.max(1), cfg.mode, rng::split(seed, 1))) {
                Some(o) => o,
                None => return Ok(tour.clone()),
            }
        }
    };
    let candidate = rr_reconstruct(&problem, &best.oriented)?;
    if closed_length_unchecked(instance, &candidate.order) < closed_length_unchecked(instance, &tour.order) {
        Ok(candidate)
    } else {
        Ok(tour.clone())
    }
}

fn rr_problem_grad(
    policy: &RrPolicy,
    problem: &RegionProblem,
    n_traj: usize,
    seed: u64,
) -> Result<(ParamGrads, f64, f64)> {
    let mut tape = Tape::new(&policy.params);
    let hv = policy.forward(&mut tape, &problem.features);
    let heatmap = tape.value(hv).clone();
    if !heatmap.is_finite() {
        return Err(Error::Numeric("non-finite regional heatmap".into()));
    }
    let orderings = rr_rollout(problem, &heatmap, n_traj, DecodeMode::Sample, seed);
    let mut batch = RolloutBatch::default();
    for o in &orderings {
        batch.push(o.log_prob, o.reward);
    }
    let loss = reinforce_loss(&batch, Sense::Maximize)?;
    if loss.weights.iter().all(|&w| w == 0.0) {
        return Ok((ParamGrads::zeros_like(&policy.params), batch.mean(), 0.0));
    }
    let mut grad = DenseMatrix::zeros(heatmap.rows, heatmap.cols);
    for (o, &w) in orderings.iter().zip(&loss.weights) {
        add_ordering_grad(&heatmap, &o.oriented, w, &mut grad)?;
    }
    let g = tape.backward(&[(hv, &grad)]);
    Ok((g.params, batch.mean(), loss.value))
}

/// One REINFORCE step of φ with multi-start sampled trajectories and the
/// shared normalized baseline, maximizing the reward.
pub fn rr_train_step(
    policy: &mut RrPolicy,
    problems: &[RegionProblem],
    n_traj: usize,
    adam: &Adam,
    state: &mut AdamState,
    seed: u64,
) -> Result<TrainStats> {
    if problems.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let pol: &RrPolicy = policy;
    let parts = problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| rr_problem_grad(pol, p, n_traj, rng::split(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let count = parts.len() as f64;
    let mean_reward = parts.iter().map(|p| p.1).sum::<f64>() / count;
    let loss = parts.iter().map(|p| p.2).sum::<f64>() / count;
    let grads = parts.into_iter().map(|p| p.0).collect();
    let grad_norm = apply_gradients(&mut policy.params, grads, 1.0 / count, adam, state)?;
    Ok(TrainStats { mean_reward, loss, grad_norm })
}

/// Mean reward over all multi-start greedy trajectories of every problem.
pub fn rr_greedy_reward(policy: &RrPolicy, problems: &[RegionProblem]) -> f64 {
    let per: Vec<f64> = problems
        .par_iter()
        .map(|p| {
            let h = policy.encode(p);
            let os = rr_rollout(p, &h, p.candidates(), DecodeMode::Greedy, 0);
            os.iter().map(|o| o.reward).sum::<f64>() / os.len() as f64
        })
        .collect();
    per.iter().sum::<f64>() / per.len().max(1) as f64
}

/// One region problem per instance around a fresh random center.
/// Problems that cannot be built (degenerate geometry, `k < 2`) are skipped.
pub fn rr_training_problems(instances: &[TspInstance], tours: &[Tour], k: usize, seed: u64) -> Vec<RegionProblem> {
    instances
        .iter()
        .zip(tours)
        .enumerate()
        .filter_map(|(i, (inst, tour))| {
            let k = k.min(inst.len());
            if k < 2 {
                return None;
            }
            let center = sample_center(inst, rng::split(seed, i as u64));
            extract_region(inst, tour, center, k).ok()
        })
        .collect()
}
