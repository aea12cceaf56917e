//! The constructive policy θ: a pointwise MLP encoder, a decoder that
//! attends over the first node, the current node and the `k_d` nearest
//! unvisited candidates, and supervised training on label windows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::instance::{closed_length_unchecked, NormalizedFrame, Tour, TspInstance};
use crate::nn::{
    apply_gradients, cross_entropy, cross_entropy_grad, masked_softmax, Adam, AdamState, AttentionConfig,
    AttentionStack, DenseMatrix, Linear, Mlp, ParamGrads, ParamSet, Tape, Var,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstructiveHyper {
    pub attn: AttentionConfig,
    /// Decoder attention layers `l_c`.
    pub layers: usize,
    /// Candidate set size `k_d`.
    pub k_d: usize,
    /// During training, windows with more open candidates than this are
    /// pruned to `k_d` as at inference.
    pub full_candidate_limit: usize,
}

impl Default for ConstructiveHyper {
    fn default() -> Self {
        ConstructiveHyper { attn: AttentionConfig::default(), layers: 6, k_d: 200, full_candidate_limit: 1000 }
    }
}

/// Normalized coordinates as an `n × 2` matrix; all zeros when every point
/// coincides.
pub fn model_input(instance: &TspInstance) -> DenseMatrix {
    let n = instance.len();
    match NormalizedFrame::fit(instance.coords()) {
        Ok(frame) => {
            let data = instance.coords().iter().flat_map(|&p| {
                let q = frame.apply(p);
                [q.x, q.y]
            });
            DenseMatrix::from_vec(n, 2, data.collect())
        }
        Err(_) => DenseMatrix::zeros(n, 2),
    }
}

#[derive(Debug, Clone)]
pub struct ConstructivePolicy {
    pub hyper: ConstructiveHyper,
    pub params: ParamSet,
    encoder: Mlp,
    first_mlp: Mlp,
    last_mlp: Mlp,
    stack: AttentionStack,
    score: Linear,
}

impl ConstructivePolicy {
    pub fn new(hyper: ConstructiveHyper, seed: u64) -> Result<Self> {
        hyper.attn.validate()?;
        if hyper.k_d == 0 {
            return Err(Error::Config("candidate size k_d must be at least 1".into()));
        }
        let d = hyper.attn.dim;
        let mut r = rng::rng(seed);
        let mut params = ParamSet::new();
        let encoder = Mlp::new(&mut params, "encoder", 2, d, d, &mut r);
        let first_mlp = Mlp::new(&mut params, "mlp_first", d, d, d, &mut r);
        let last_mlp = Mlp::new(&mut params, "mlp_last", d, d, d, &mut r);
        let stack = AttentionStack::new(&mut params, "attn", hyper.layers, hyper.attn, &mut r);
        let score = Linear::new(&mut params, "score", d, 1, &mut r);
        Ok(ConstructivePolicy { hyper, params, encoder, first_mlp, last_mlp, stack, score })
    }

    /// `h⁽⁰⁾` for every node.
    pub fn encode_nodes(&self, input: &DenseMatrix) -> DenseMatrix {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(input.clone());
        let h = self.encoder.forward(&mut tape, x);
        tape.value(h).clone()
    }

    /// Decoder over embeddings stacked as `[first; candidates…; last]`;
    /// returns one score per row.
    fn decoder(&self, tape: &mut Tape, h: Var, rows: usize) -> Var {
        let first = tape.gather(h, &[0]);
        let first = self.first_mlp.forward(tape, first);
        let last = tape.gather(h, &[rows - 1]);
        let last = self.last_mlp.forward(tape, last);
        let z = if rows > 2 {
            let cands: Vec<usize> = (1..rows - 1).collect();
            let cands = tape.gather(h, &cands);
            tape.concat_rows(&[first, cands, last])
        } else {
            tape.concat_rows(&[first, last])
        };
        let z = self.stack.forward(tape, z);
        self.score.forward(tape, z)
    }

    /// Raw scores of the candidates given precomputed embeddings.
    pub fn candidate_scores(
        &self,
        embeddings: &DenseMatrix,
        first: usize,
        last: usize,
        candidates: &[usize],
    ) -> Vec<f64> {
        let rows: Vec<usize> = std::iter::once(first).chain(candidates.iter().copied()).chain([last]).collect();
        let d = embeddings.cols;
        let mut h = DenseMatrix::zeros(rows.len(), d);
        for (i, &v) in rows.iter().enumerate() {
            h.row_mut(i).copy_from_slice(embeddings.row(v));
        }
        let mut tape = Tape::new(&self.params);
        let hv = tape.input(h);
        let s = self.decoder(&mut tape, hv, rows.len());
        tape.value(s).data[1..=candidates.len()].to_vec()
    }

    /// Probability of each candidate, in candidate order.
    pub fn decode_step(
        &self,
        embeddings: &DenseMatrix,
        first: usize,
        last: usize,
        candidates: &[usize],
    ) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::NoFeasibleAction);
        }
        let scores = self.candidate_scores(embeddings, first, last, candidates);
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite decoder score".into()));
        }
        masked_softmax(&scores, &vec![true; scores.len()])
    }

    /// Scores on a tape from raw inputs, so gradients reach the encoder.
    pub(crate) fn forward_sample(
        &self,
        tape: &mut Tape,
        input: &DenseMatrix,
        first: usize,
        last: usize,
        candidates: &[usize],
    ) -> Var {
        let rows: Vec<usize> = std::iter::once(first).chain(candidates.iter().copied()).chain([last]).collect();
        let mut x = DenseMatrix::zeros(rows.len(), 2);
        for (i, &v) in rows.iter().enumerate() {
            x.row_mut(i).copy_from_slice(input.row(v));
        }
        let xv = tape.input(x);
        let h = self.encoder.forward(tape, xv);
        self.decoder(tape, h, rows.len())
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Checkpoint::new(ModelKind::Constructive, &self.hyper, &self.params, step)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != ModelKind::Constructive {
            return Err(Error::ModelIdMismatch {
                expected: ModelKind::Constructive.as_str().into(),
                found: ck.model.as_str().into(),
            });
        }
        let mut p = ConstructivePolicy::new(ck.hyper()?, 0)?;
        ck.restore_into(&mut p.params)?;
        Ok(p)
    }
}

/// A partial tour under construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionState {
    pub visited: Vec<bool>,
    pub partial: Vec<usize>,
}

impl ConstructionState {
    pub fn new(n: usize, start: usize) -> Self {
        let mut visited = vec![false; n];
        visited[start] = true;
        ConstructionState { visited, partial: vec![start] }
    }

    pub fn first(&self) -> usize {
        self.partial[0]
    }

    pub fn last(&self) -> usize {
        *self.partial.last().unwrap()
    }

    pub fn is_complete(&self) -> bool {
        self.partial.len() == self.visited.len()
    }

    pub fn visit(&mut self, v: usize) {
        debug_assert!(!self.visited[v], "node {v} visited twice");
        self.visited[v] = true;
        self.partial.push(v);
    }
}

/// Up to `k` nodes of `pool` nearest `from`, ascending by distance, ties by
/// lower index.
fn nearest_of(instance: &TspInstance, from: usize, pool: impl Iterator<Item = usize>, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = pool.map(|v| (instance.cost(from, v), v)).collect();
    let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k, key);
        all.truncate(k);
    }
    all.sort_unstable_by(key);
    all.into_iter().map(|(_, v)| v).collect()
}

/// The `min(k_d, #unvisited)` unvisited nodes nearest the last node.
pub fn candidate_set(instance: &TspInstance, state: &ConstructionState, k_d: usize) -> Result<Vec<usize>> {
    if state.is_complete() {
        return Err(Error::ConstructionComplete);
    }
    let pool = (0..state.visited.len()).filter(|&v| !state.visited[v]);
    Ok(nearest_of(instance, state.last(), pool, k_d))
}

/// Argmax decoding from `start`; the first of equal scores (the nearer
/// candidate) wins.
pub fn greedy_construct(instance: &TspInstance, policy: &ConstructivePolicy, start: usize) -> Tour {
    let n = instance.len();
    let emb = policy.encode_nodes(&model_input(instance));
    let mut state = ConstructionState::new(n, start);
    while !state.is_complete() {
        let cands = candidate_set(instance, &state, policy.hyper.k_d).expect("unvisited node remains");
        let next = if cands.len() == 1 {
            cands[0]
        } else {
            let scores = policy.candidate_scores(&emb, state.first(), state.last(), &cands);
            let mut best = 0;
            for (j, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = j;
                }
            }
            cands[best]
        };
        state.visit(next);
    }
    Tour::new(state.partial)
}

/// Greedy tours for many instances, in input order.
pub fn greedy_construct_all(instances: &[TspInstance], policy: &ConstructivePolicy) -> Vec<Tour> {
    instances.par_iter().map(|inst| greedy_construct(inst, policy, 0)).collect()
}

/// Window lengths drawn uniformly from `[min_len, upper]`, where the upper
/// bound grows by `growth` per epoch up to `cap` and the instance size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub min_len: usize,
    pub start_upper: usize,
    pub growth: usize,
    pub cap: usize,
}

impl Default for Curriculum {
    fn default() -> Self {
        Curriculum { min_len: 50, start_upper: 100, growth: 5, cap: 1000 }
    }
}

impl Curriculum {
    pub fn upper(&self, epoch: usize, n: usize) -> usize {
        (self.start_upper + self.growth * epoch).min(self.cap).min(n)
    }

    pub fn draw(&self, epoch: usize, n: usize, r: &mut rng::SeededRng) -> usize {
        let hi = self.upper(epoch, n);
        let lo = self.min_len.min(hi);
        lo + rng::index(r, hi - lo + 1)
    }
}

/// One teacher-forced decision inside a label window.
#[derive(Debug, Clone, PartialEq)]
pub struct SlSample {
    /// Step index inside the window (`1..L−1`).
    pub step: usize,
    /// The window's far endpoint, playing the first node.
    pub first: usize,
    /// The node visited just before.
    pub last: usize,
    pub target: usize,
    pub candidates: Vec<usize>,
}

impl SlSample {
    pub fn target_index(&self) -> usize {
        self.candidates.iter().position(|&c| c == self.target).expect("target among candidates")
    }
}

/// Decisions of one window `w`: at step `t` the current node is `w[t−1]`,
/// the destination `w[L−1]` and the open nodes `w[t..L−1]`. Steps whose
/// target falls outside a pruned candidate set are dropped.
pub fn sl_samples(instance: &TspInstance, window: &[usize], hyper: &ConstructiveHyper) -> Vec<SlSample> {
    let len = window.len();
    if len < 3 {
        return Vec::new();
    }
    let first = window[len - 1];
    (1..len - 1)
        .filter_map(|t| {
            let open = &window[t..len - 1];
            let last = window[t - 1];
            let candidates = if open.len() > hyper.full_candidate_limit {
                nearest_of(instance, last, open.iter().copied(), hyper.k_d)
            } else {
                open.to_vec()
            };
            candidates.contains(&window[t]).then(|| SlSample { step: t, first, last, target: window[t], candidates })
        })
        .collect()
}

/// Cuts a window of `len` consecutive label nodes at a random offset,
/// reversed with probability one half.
pub fn sample_window(label: &Tour, len: usize, r: &mut rng::SeededRng) -> Vec<usize> {
    let n = label.len();
    let len = len.min(n);
    let start = rng::index(r, n);
    let reverse = rng::unit(r) < 0.5;
    (0..len).map(|i| if reverse { label.order[(start + n - i) % n] } else { label.order[(start + i) % n] }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlUpdate {
    /// One optimizer step per batch over every decision.
    #[default]
    PerBatch,
    /// One optimizer step per decoding step, over the batch's decisions at
    /// that step.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlConfig {
    pub batch_size: usize,
    pub curriculum: Curriculum,
    pub update: SlUpdate,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig { batch_size: 64, curriculum: Curriculum::default(), update: SlUpdate::PerBatch }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlStats {
    /// Mean cross-entropy per decision.
    pub loss: f64,
    pub decisions: usize,
    pub updates: usize,
    /// Decisions whose target probability fell below the log floor.
    pub clamped: usize,
}

impl SlStats {
    fn merge(&mut self, other: &SlStats) {
        let total = self.decisions + other.decisions;
        if total > 0 {
            self.loss = (self.loss * self.decisions as f64 + other.loss * other.decisions as f64) / total as f64;
        }
        self.decisions = total;
        self.updates += other.updates;
        self.clamped += other.clamped;
    }
}

/// Cross-entropy and its parameter gradient for one decision. Forced
/// decisions cost nothing and are not differentiated.
pub(crate) fn sample_grad(
    policy: &ConstructivePolicy,
    input: &DenseMatrix,
    s: &SlSample,
) -> Result<(Option<ParamGrads>, f64, bool)> {
    if s.candidates.len() == 1 {
        return Ok((None, 0.0, false));
    }
    let mut tape = Tape::new(&policy.params);
    let sv = policy.forward_sample(&mut tape, input, s.first, s.last, &s.candidates);
    let scores = &tape.value(sv).data;
    let c = s.candidates.len();
    let cand_scores = &scores[1..=c];
    if cand_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite decoder score".into()));
    }
    let probs = masked_softmax(cand_scores, &vec![true; c])?;
    let target = s.target_index();
    let ce = cross_entropy(&probs, target);
    let mut seed = DenseMatrix::zeros(c + 2, 1);
    seed.data[1..=c].copy_from_slice(&cross_entropy_grad(&probs, target));
    let g = tape.backward(&[(sv, &seed)]);
    Ok((Some(g.params), ce.loss, ce.clamped))
}

type Decision = (Option<ParamGrads>, f64, bool);

fn apply_decisions(
    policy: &mut ConstructivePolicy,
    parts: Vec<Decision>,
    adam: &Adam,
    state: &mut AdamState,
) -> Result<SlStats> {
    let decisions = parts.len();
    let loss = parts.iter().map(|p| p.1).sum::<f64>() / decisions as f64;
    let clamped = parts.iter().filter(|p| p.2).count();
    let grads: Vec<ParamGrads> = parts.into_iter().filter_map(|p| p.0).collect();
    let updates = if grads.is_empty() {
        0
    } else {
        apply_gradients(&mut policy.params, grads, 1.0 / decisions as f64, adam, state)?;
        1
    };
    Ok(SlStats { loss, decisions, updates, clamped })
}

/// One supervised batch: a shared window length, one random window per
/// label, cross-entropy on every interior decision.
pub fn sl_train_step(
    policy: &mut ConstructivePolicy,
    instances: &[&TspInstance],
    labels: &[&Tour],
    cfg: &SlConfig,
    adam: &Adam,
    state: &mut AdamState,
    epoch: usize,
    seed: u64,
) -> Result<SlStats> {
    if instances.is_empty() || instances.len() != labels.len() {
        return Err(Error::Config("batch needs matching, nonempty instances and labels".into()));
    }
    let mut r = rng::rng(seed);
    let n_min = instances.iter().map(|i| i.len()).min().unwrap();
    let len = cfg.curriculum.draw(epoch, n_min, &mut r);
    let hyper = policy.hyper;
    let batch: Vec<(DenseMatrix, Vec<SlSample>)> = instances
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (inst, label))| {
            let mut ri = rng::rng(rng::split(seed, 1 + i as u64));
            let window = sample_window(label, len, &mut ri);
            (model_input(inst), sl_samples(inst, &window, &hyper))
        })
        .collect();

    let mut stats = SlStats::default();
    match cfg.update {
        SlUpdate::PerBatch => {
            let pol: &ConstructivePolicy = policy;
            let parts = batch
                .par_iter()
                .flat_map_iter(|(input, samples)| samples.iter().map(move |s| sample_grad(pol, input, s)))
                .collect::<Result<Vec<_>>>()?;
            if !parts.is_empty() {
                stats = apply_decisions(policy, parts, adam, state)?;
            }
        }
        SlUpdate::PerStep => {
            for t in 1..len.saturating_sub(1) {
                let pol: &ConstructivePolicy = policy;
                let parts = batch
                    .par_iter()
                    .filter_map(|(input, samples)| samples.iter().find(|s| s.step == t).map(|s| (input, s)))
                    .map(|(input, s)| sample_grad(pol, input, s))
                    .collect::<Result<Vec<_>>>()?;
                if !parts.is_empty() {
                    let step = apply_decisions(policy, parts, adam, state)?;
                    stats.merge(&step);
                }
            }
        }
    }
    Ok(stats)
}

/// One pass over the dataset in shuffled batches, then the learning-rate
/// decay.
pub fn sl_train_epoch(
    policy: &mut ConstructivePolicy,
    instances: &[TspInstance],
    labels: &[Tour],
    cfg: &SlConfig,
    adam: &mut Adam,
    state: &mut AdamState,
    epoch: usize,
    seed: u64,
) -> Result<SlStats> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut r = rng::rng(seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    let mut stats = SlStats::default();
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let insts: Vec<&TspInstance> = chunk.iter().map(|&i| &instances[i]).collect();
        let labs: Vec<&Tour> = chunk.iter().map(|&i| &labels[i]).collect();
        let s = sl_train_step(policy, &insts, &labs, cfg, adam, state, epoch, rng::split(seed, 1 + b as u64))?;
        stats.merge(&s);
    }
    adam.end_epoch();
    Ok(stats)
}

/// Mean greedy tour length divided by mean reference length.
pub fn greedy_length_ratio(policy: &ConstructivePolicy, instances: &[TspInstance], references: &[Tour]) -> f64 {
    let tours = greedy_construct_all(instances, policy);
    let greedy: f64 = instances.iter().zip(&tours).map(|(i, t)| closed_length_unchecked(i, &t.order)).sum();
    let reference: f64 = instances.iter().zip(references).map(|(i, t)| closed_length_unchecked(i, &t.order)).sum();
    greedy / reference
}
