//! Inference (construct, then iterate SR → 2-opt → RR) and the
//! weakly-supervised training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constructive::{greedy_construct, sl_train_epoch, ConstructiveHyper, ConstructivePolicy, SlConfig, SlStats};
use crate::data::{
    check_snapshot_progress, load_checkpoint, load_dataset, read_file, save_checkpoint, save_dataset, write_atomic,
    DatasetFormat, LabeledDataset, ModelKind,
};
use crate::error::{Error, Result};
use crate::instance::{closed_length_unchecked, random_insertion, validate_tour, Tour, TspInstance};
use crate::nn::{Adam, AdamState, AttentionConfig, TrainStats};
use crate::regional::{rr_improve, rr_train_step, rr_training_problems, RrConfig, RrHyper, RrPolicy};
use crate::rng;
use crate::subseq::{sr_improve, sr_train_step, sr_training_problems, SrConfig, SrHyper, SrPolicy};
use crate::two_opt::{two_opt, TwoOptBudget};

/// Which improvement stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub sr: bool,
    pub two_opt: bool,
    pub rr: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages { sr: true, two_opt: true, rr: true }
    }
}

impl Stages {
    pub fn sr_only() -> Self {
        Stages { sr: true, two_opt: false, rr: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Improvement iterations `T`.
    pub iterations: usize,
    /// Improver epochs per iteration `I_train`.
    pub improver_epochs: usize,
    /// Total constructive epochs `C_train`.
    pub constructive_epochs: usize,
    /// Constructive epochs run after each iteration.
    pub constructive_epochs_per_iteration: usize,
    /// Problems per improver batch.
    pub improver_batch: usize,
    /// Sampled trajectories per problem while training the improver.
    pub improver_trajectories: usize,
    pub improver_lr: f64,
    pub improver_decay: f64,
    pub constructive_lr: f64,
    pub constructive_decay: f64,
    pub sl: SlConfig,
    /// Checkpoints are written every this many iterations and at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1200,
            improver_epochs: 20,
            constructive_epochs: 300,
            constructive_epochs_per_iteration: 1,
            improver_batch: 128,
            improver_trajectories: 128,
            improver_lr: 1e-4,
            improver_decay: 1.0,
            constructive_lr: 1e-4,
            constructive_decay: 0.98,
            sl: SlConfig::default(),
            checkpoint_every: 1,
        }
    }
}

/// Everything a run needs besides its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Improvement iterations at inference.
    pub iterations: usize,
    pub stages: Stages,
    pub sr: SrConfig,
    pub rr: RrConfig,
    pub two_opt: TwoOptBudget,
    pub constructive: ConstructiveHyper,
    pub subseq: SrHyper,
    pub regional: RrHyper,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            iterations: 100,
            stages: Stages::default(),
            sr: SrConfig::default(),
            rr: RrConfig::default(),
            two_opt: TwoOptBudget::default(),
            constructive: ConstructiveHyper::default(),
            subseq: SrHyper::default(),
            regional: RrHyper::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small models and budgets that train on one CPU core in minutes.
    pub fn desk() -> Self {
        let attn = AttentionConfig::new(32, 4, 64);
        RunConfig {
            iterations: 50,
            sr: SrConfig { m: 50, trajectories: 32, ..SrConfig::default() },
            rr: RrConfig { k: 20, ..RrConfig::default() },
            constructive: ConstructiveHyper { attn, layers: 2, k_d: 50, ..ConstructiveHyper::default() },
            subseq: SrHyper { attn, layers: 2, ..SrHyper::default() },
            regional: RrHyper { attn, layers: 2, ..RrHyper::default() },
            train: TrainConfig {
                iterations: 30,
                improver_epochs: 5,
                constructive_epochs: 200,
                improver_batch: 32,
                improver_trajectories: 32,
                improver_lr: 1e-3,
                sl: SlConfig { update: crate::constructive::SlUpdate::PerStep, ..SlConfig::default() },
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.constructive.attn.validate()?;
        self.subseq.attn.validate()?;
        self.regional.attn.validate()?;
        let checks = [
            (self.sr.m >= 2, "sr.m must be at least 2"),
            (self.rr.k >= 1, "rr.k must be at least 1"),
            (self.constructive.k_d >= 1, "constructive.k_d must be at least 1"),
            (self.sr.trajectories >= 1, "sr.trajectories must be at least 1"),
            (self.rr.trajectories >= 1, "rr.trajectories must be at least 1"),
            (self.train.improver_batch >= 1, "train.improver_batch must be at least 1"),
            (self.train.improver_trajectories >= 2, "train.improver_trajectories must be at least 2"),
            (self.train.sl.batch_size >= 1, "train.sl.batch_size must be at least 1"),
            (self.train.checkpoint_every >= 1, "train.checkpoint_every must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// The three policies θ, ψ and φ.
#[derive(Debug, Clone)]
pub struct Models {
    pub constructive: ConstructivePolicy,
    pub subseq: SrPolicy,
    pub regional: RrPolicy,
}

pub const CONSTRUCTIVE_FILE: &str = "constructive.json";
pub const SUBSEQ_FILE: &str = "subseq.json";
pub const REGIONAL_FILE: &str = "regional.json";

impl Models {
    /// Freshly initialized policies.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        Ok(Models {
            constructive: ConstructivePolicy::new(cfg.constructive, rng::split(cfg.seed, 101))?,
            subseq: SrPolicy::new(cfg.subseq, rng::split(cfg.seed, 102))?,
            regional: RrPolicy::new(cfg.regional, rng::split(cfg.seed, 103))?,
        })
    }

    /// Loads the three checkpoint files from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Models {
            constructive: ConstructivePolicy::from_checkpoint(&load_checkpoint(
                &dir.join(CONSTRUCTIVE_FILE),
                ModelKind::Constructive,
            )?)?,
            subseq: SrPolicy::from_checkpoint(&load_checkpoint(&dir.join(SUBSEQ_FILE), ModelKind::Subseq)?)?,
            regional: RrPolicy::from_checkpoint(&load_checkpoint(&dir.join(REGIONAL_FILE), ModelKind::Regional)?)?,
        })
    }

    /// Loads from `dir` when given, otherwise initializes from the config.
    pub fn load_or_init(dir: Option<&Path>, cfg: &RunConfig) -> Result<Self> {
        match dir {
            Some(d) => Models::load(d),
            None => Models::init(cfg),
        }
    }
}

/// Lengths after each stage of one improvement iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub input: f64,
    pub after_sr: f64,
    pub after_two_opt: f64,
    pub after_rr: f64,
    pub sr_seconds: f64,
    pub two_opt_seconds: f64,
    pub rr_seconds: f64,
}

impl IterationTrace {
    pub fn is_monotone(&self) -> bool {
        self.after_sr <= self.input && self.after_two_opt <= self.after_sr && self.after_rr <= self.after_two_opt
    }
}

/// Writes traces as CSV. Timings are included only on request, since
/// they differ between otherwise identical runs.
pub fn write_traces<W: std::io::Write>(out: W, traces: &[(String, IterationTrace)], timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["instance", "iteration", "input", "after_sr", "after_two_opt", "after_rr"];
    if timings {
        header.extend(["sr_seconds", "two_opt_seconds", "rr_seconds"]);
    }
    let csv_err = |e: csv::Error| Error::format(None, format!("trace csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for (name, t) in traces {
        let mut rec = vec![
            name.clone(),
            t.iteration.to_string(),
            t.input.to_string(),
            t.after_sr.to_string(),
            t.after_two_opt.to_string(),
            t.after_rr.to_string(),
        ];
        if timings {
            rec.extend([t.sr_seconds.to_string(), t.two_opt_seconds.to_string(), t.rr_seconds.to_string()]);
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("trace output", e))
}

fn length(instance: &TspInstance, tour: &Tour) -> f64 {
    closed_length_unchecked(instance, &tour.order)
}

/// Replaces `current` with a stage's output when that output is valid and
/// no longer; failures keep the incumbent and are logged.
fn accept(instance: &TspInstance, current: &mut Tour, cur_len: &mut f64, stage: &str, out: Result<Tour>) {
    match out {
        Ok(t) => {
            if let Err(v) = validate_tour(instance, &t) {
                log::warn!("{stage} produced an invalid tour ({v}); kept the incumbent");
                return;
            }
            let l = length(instance, &t);
            if l <= *cur_len {
                *current = t;
                *cur_len = l;
            }
        }
        Err(e) => log::warn!("{stage} stage skipped: {e}"),
    }
}

/// `iterations` rounds of SR → 2-opt → RR, each stage accept-if-better.
pub fn improve(
    instance: &TspInstance,
    tour: &Tour,
    subseq: &SrPolicy,
    regional: &RrPolicy,
    cfg: &RunConfig,
    iterations: usize,
    seed: u64,
) -> Result<(Tour, Vec<IterationTrace>)> {
    validate_tour(instance, tour).map_err(Error::TourInvalid)?;
    let mut current = tour.clone();
    let mut cur_len = length(instance, &current);
    let mut traces = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let s = rng::split(seed, it as u64);
        let mut trace = IterationTrace { iteration: it + 1, input: cur_len, ..IterationTrace::default() };

        let t0 = Instant::now();
        if cfg.stages.sr {
            let out = sr_improve(instance, &current, subseq, &cfg.sr, rng::split(s, 1));
            accept(instance, &mut current, &mut cur_len, "subsequence", out);
        }
        trace.after_sr = cur_len;
        trace.sr_seconds = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        if cfg.stages.two_opt {
            let out = two_opt(instance, &current, cfg.two_opt);
            accept(instance, &mut current, &mut cur_len, "2-opt", Ok(out));
        }
        trace.after_two_opt = cur_len;
        trace.two_opt_seconds = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        if cfg.stages.rr {
            let out = rr_improve(instance, &current, regional, &cfg.rr, rng::split(s, 2));
            accept(instance, &mut current, &mut cur_len, "regional", out);
        }
        trace.after_rr = cur_len;
        trace.rr_seconds = t0.elapsed().as_secs_f64();
        traces.push(trace);
    }
    Ok((current, traces))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMode {
    Greedy,
    /// Greedy construction followed by this many improvement iterations.
    Rec(usize),
}

impl std::str::FromStr for SolveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(SolveMode::Greedy);
        }
        s.strip_prefix("rec:")
            .and_then(|t| t.parse().ok())
            .map(SolveMode::Rec)
            .ok_or_else(|| Error::Config(format!("mode `{s}`: expected `greedy` or `rec:<iterations>`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    pub tour: Tour,
    pub length: f64,
    pub greedy_length: f64,
    pub traces: Vec<IterationTrace>,
    pub construct_seconds: f64,
    pub improve_seconds: f64,
}

pub fn solve(
    instance: &TspInstance,
    models: &Models,
    mode: SolveMode,
    cfg: &RunConfig,
    seed: u64,
) -> Result<SolveOutput> {
    let t0 = Instant::now();
    let greedy = greedy_construct(instance, &models.constructive, 0);
    let construct_seconds = t0.elapsed().as_secs_f64();
    let greedy_length = length(instance, &greedy);
    let t0 = Instant::now();
    let (tour, traces) = match mode {
        SolveMode::Greedy => (greedy, Vec::new()),
        SolveMode::Rec(t) => improve(instance, &greedy, &models.subseq, &models.regional, cfg, t, seed)?,
    };
    let length = length(instance, &tour);
    Ok(SolveOutput {
        tour,
        length,
        greedy_length,
        traces,
        construct_seconds,
        improve_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Random-insertion labels, one seed per instance.
pub fn initial_labels(instances: &[TspInstance], seed: u64) -> Vec<Tour> {
    instances.par_iter().enumerate().map(|(i, inst)| random_insertion(inst, rng::split(seed, i as u64))).collect()
}

/// Progress of a training run, persisted next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed improvement iteration.
    pub iteration: usize,
    pub constructive_epochs: usize,
    pub snapshot: String,
}

pub const STATE_FILE: &str = "train_state.json";

/// Diagnostics of one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_label_length: f64,
    pub sr: Vec<TrainStats>,
    pub rr: Vec<TrainStats>,
    pub sl: Vec<SlStats>,
}

pub fn snapshot_name(iteration: usize) -> String {
    format!("snapshot-{iteration:05}.ds")
}

struct Trainer {
    models: Models,
    sr_opt: (Adam, AdamState),
    rr_opt: (Adam, AdamState),
    sl_opt: (Adam, AdamState),
}

impl Trainer {
    fn fresh(cfg: &RunConfig) -> Result<Self> {
        let t = &cfg.train;
        Ok(Trainer {
            models: Models::init(cfg)?,
            sr_opt: (Adam::new(t.improver_lr).with_decay(t.improver_decay), AdamState::default()),
            rr_opt: (Adam::new(t.improver_lr).with_decay(t.improver_decay), AdamState::default()),
            sl_opt: (Adam::new(t.constructive_lr).with_decay(t.constructive_decay), AdamState::default()),
        })
    }

    fn resume(dir: &Path) -> Result<Self> {
        let opt = |kind: ModelKind, file: &str| -> Result<(Adam, AdamState)> {
            let ck = load_checkpoint(&dir.join(file), kind)?;
            let rec = ck.optimizer.ok_or_else(|| Error::format(None, format!("{file}: no optimizer state")))?;
            Ok((rec.adam, rec.state))
        };
        Ok(Trainer {
            models: Models::load(dir)?,
            sr_opt: opt(ModelKind::Subseq, SUBSEQ_FILE)?,
            rr_opt: opt(ModelKind::Regional, REGIONAL_FILE)?,
            sl_opt: opt(ModelKind::Constructive, CONSTRUCTIVE_FILE)?,
        })
    }

    fn save(&self, dir: &Path, step: u64) -> Result<()> {
        let m = &self.models;
        let c = m.constructive.to_checkpoint(step)?.with_optimizer(self.sl_opt.0, self.sl_opt.1.clone());
        save_checkpoint(&c, &dir.join(CONSTRUCTIVE_FILE))?;
        let s = m.subseq.to_checkpoint(step)?.with_optimizer(self.sr_opt.0, self.sr_opt.1.clone());
        save_checkpoint(&s, &dir.join(SUBSEQ_FILE))?;
        let r = m.regional.to_checkpoint(step)?.with_optimizer(self.rr_opt.0, self.rr_opt.1.clone());
        save_checkpoint(&r, &dir.join(REGIONAL_FILE))
    }
}

/// Runs `f` on a copy of `(model, optimizer)` and keeps the result only on
/// success; numeric failures roll back and are reported as `None`.
fn guarded<M: Clone, T>(
    what: &str,
    model: &mut M,
    opt: &mut (Adam, AdamState),
    f: impl FnOnce(&mut M, &mut (Adam, AdamState)) -> Result<T>,
) -> Result<Option<T>> {
    let mut m = model.clone();
    let mut o = opt.clone();
    match f(&mut m, &mut o) {
        Ok(v) => {
            *model = m;
            *opt = o;
            Ok(Some(v))
        }
        Err(e) if e.is_numeric() => {
            log::warn!("{what} rolled back: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn shuffled<T>(mut items: Vec<T>, seed: u64) -> Vec<T> {
    items.shuffle(&mut rng::rng(seed));
    items
}

fn sr_epoch(
    models: &mut Models,
    opt: &mut (Adam, AdamState),
    ds: &LabeledDataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<TrainStats>> {
    let t = &cfg.train;
    let problems =
        shuffled(sr_training_problems(&ds.instances, &ds.labels, cfg.sr.m, rng::split(seed, 0)), rng::split(seed, 1));
    let mut stats = Vec::new();
    for (b, batch) in problems.chunks(t.improver_batch).enumerate() {
        let step = guarded("subsequence batch", &mut models.subseq, opt, |p, (adam, state)| {
            sr_train_step(p, batch, t.improver_trajectories, adam, state, rng::split(seed, 2 + b as u64))
        })?;
        stats.extend(step);
    }
    opt.0.end_epoch();
    Ok(stats)
}

fn rr_epoch(
    models: &mut Models,
    opt: &mut (Adam, AdamState),
    ds: &LabeledDataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<TrainStats>> {
    let t = &cfg.train;
    let problems =
        shuffled(rr_training_problems(&ds.instances, &ds.labels, cfg.rr.k, rng::split(seed, 0)), rng::split(seed, 1));
    let mut stats = Vec::new();
    for (b, batch) in problems.chunks(t.improver_batch).enumerate() {
        let step = guarded("regional batch", &mut models.regional, opt, |p, (adam, state)| {
            rr_train_step(p, batch, t.improver_trajectories, adam, state, rng::split(seed, 2 + b as u64))
        })?;
        stats.extend(step);
    }
    opt.0.end_epoch();
    Ok(stats)
}

/// Task 1: one improvement iteration over every label, never lengthening.
pub fn improve_labels(ds: &LabeledDataset, models: &Models, cfg: &RunConfig, seed: u64) -> Result<Vec<Tour>> {
    ds.instances
        .par_iter()
        .zip(ds.labels.par_iter())
        .enumerate()
        .map(|(i, (inst, label))| {
            let (t, _) = improve(inst, label, &models.subseq, &models.regional, cfg, 1, rng::split(seed, i as u64))?;
            Ok(if length(inst, &t) <= length(inst, label) { t } else { label.clone() })
        })
        .collect()
}

/// The alternating training loop. Snapshots, checkpoints and
/// [`STATE_FILE`] go to `out`; an existing state there is resumed.
pub fn train(
    initial: LabeledDataset,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(LabeledDataset, Models, Vec<IterationLog>)> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let state_path = out.join(STATE_FILE);
    let (mut trainer, mut ds, mut state) = if state_path.exists() {
        let bytes = read_file(&state_path)?;
        let state: TrainState =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(None, format!("{STATE_FILE}: {e}")))?;
        let ds = load_dataset(&out.join(&state.snapshot))?;
        log::info!("resuming after iteration {}", state.iteration);
        (Trainer::resume(out)?, ds, state)
    } else {
        let mut ds = initial;
        ds.iteration = 0;
        ds.validate()?;
        let snapshot = snapshot_name(0);
        save_dataset(&ds, &out.join(&snapshot), DatasetFormat::Text)?;
        let trainer = Trainer::fresh(cfg)?;
        let state = TrainState { iteration: 0, constructive_epochs: 0, snapshot };
        trainer.save(out, 0)?;
        write_state(&state_path, &state)?;
        (trainer, ds, state)
    };

    let t = &cfg.train;
    let mut logs = Vec::new();
    for it in state.iteration + 1..=t.iterations {
        let seed = rng::split(cfg.seed, 1000 + it as u64);
        let labels = improve_labels(&ds, &trainer.models, cfg, rng::split(seed, 0))?;
        let next = LabeledDataset::new(ds.instances.clone(), labels, it as u64)?;
        check_snapshot_progress(&ds, &next)?;
        ds = next;
        let snapshot = snapshot_name(it);
        save_dataset(&ds, &out.join(&snapshot), DatasetFormat::Text)?;

        let mut log = IterationLog {
            iteration: it,
            mean_label_length: ds.mean_label_length(),
            sr: vec![],
            rr: vec![],
            sl: vec![],
        };
        for e in 0..t.improver_epochs {
            let es = rng::split(seed, 10 + e as u64);
            log.sr.extend(sr_epoch(&mut trainer.models, &mut trainer.sr_opt, &ds, cfg, rng::split(es, 0))?);
            log.rr.extend(rr_epoch(&mut trainer.models, &mut trainer.rr_opt, &ds, cfg, rng::split(es, 1))?);
        }
        for _ in 0..t.constructive_epochs_per_iteration {
            if state.constructive_epochs >= t.constructive_epochs {
                break;
            }
            let epoch = state.constructive_epochs;
            let es = rng::split(seed, 5000 + epoch as u64);
            let stats = guarded(
                "constructive epoch",
                &mut trainer.models.constructive,
                &mut trainer.sl_opt,
                |p, (adam, st)| sl_train_epoch(p, &ds.instances, &ds.labels, &t.sl, adam, st, epoch, es),
            )?;
            log.sl.extend(stats);
            state.constructive_epochs += 1;
        }
        log::info!("iteration {it}: mean label length {:.6}", log.mean_label_length);
        logs.push(log);

        state.iteration = it;
        state.snapshot = snapshot;
        if it % t.checkpoint_every == 0 || it == t.iterations {
            trainer.save(out, it as u64)?;
            write_state(&state_path, &state)?;
        }
    }
    Ok((ds, trainer.models, logs))
}

fn write_state(path: &Path, state: &TrainState) -> Result<()> {
    let mut text = serde_json::to_string_pretty(state).map_err(|e| Error::format(None, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Paths of every snapshot in `dir`, oldest first.
pub fn list_snapshots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("snapshot-") && n.ends_with(".ds"))
        })
        .collect();
    out.sort();
    Ok(out)
}
