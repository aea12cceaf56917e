//! Acceptance suite. Prints one line per criterion and exits nonzero if
//! any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 3 4`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use localescape::constructive::{
    greedy_length_ratio, sl_train_epoch, ConstructiveHyper, ConstructivePolicy, Curriculum, SlConfig, SlUpdate,
};
use localescape::data::{parse_tsplib, tsplib_rounded_length, LabeledDataset};
use localescape::gradcheck::{check_gradients, GradTarget};
use localescape::instance::{generate_uniform, random_insertion, tour_length, validate_tour, Tour, TspInstance};
use localescape::nn::{Adam, AdamState, AttentionConfig};
use localescape::pipeline::{improve, initial_labels, solve, train, Models, RunConfig, SolveMode, Stages};
use localescape::regional::{
    extract_region, rr_brute_force, rr_greedy_reward, rr_reconstruct, rr_rollout, rr_train_step, sample_center,
    RrHyper, RrPolicy,
};
use localescape::subseq::{sr_greedy_length, sr_train_step, SrHyper, SrPolicy, SubseqProblem};
use localescape::two_opt::{two_opt, TwoOptBudget};
use localescape::DecodeMode;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn len(inst: &TspInstance, t: &Tour) -> f64 {
    tour_length(inst, t).expect("valid tour")
}

/// Exact optimum by enumerating every tour with node 0 first.
fn oracle_optimum(inst: &TspInstance) -> f64 {
    fn search(inst: &TspInstance, path: &mut Vec<usize>, used: &mut [bool], acc: f64, best: &mut f64) {
        let n = used.len();
        if acc >= *best {
            return;
        }
        if path.len() == n {
            let total = acc + inst.cost(*path.last().unwrap(), path[0]);
            if total < *best {
                *best = total;
            }
            return;
        }
        let last = *path.last().unwrap();
        for v in 1..n {
            if !used[v] {
                used[v] = true;
                path.push(v);
                search(inst, path, used, acc + inst.cost(last, v), best);
                path.pop();
                used[v] = false;
            }
        }
    }
    let n = inst.len();
    let mut used = vec![false; n];
    used[0] = true;
    let mut best = f64::INFINITY;
    search(inst, &mut vec![0], &mut used, 0.0, &mut best);
    best
}

fn small_attn() -> AttentionConfig {
    AttentionConfig::new(16, 2, 32)
}

fn c1_oracle_floor() -> Outcome {
    let cfg = RunConfig::desk();
    let model_sets: Vec<Models> =
        (0..2).map(|s| Models::init(&RunConfig { seed: s, ..cfg.clone() }).unwrap()).collect();
    let mut below = 0;
    let mut optimal = 0;
    let count = 50;
    for i in 0..count {
        let n = 5 + i % 5;
        let inst = generate_uniform(n, 10_000 + i as u64).unwrap();
        let opt = oracle_optimum(&inst);
        let mut outputs = Vec::new();
        for m in &model_sets {
            outputs.push(solve(&inst, m, SolveMode::Greedy, &cfg, i as u64).unwrap().tour);
            outputs.push(solve(&inst, m, SolveMode::Rec(5), &cfg, i as u64).unwrap().tour);
        }
        let start = random_insertion(&inst, i as u64);
        let (best, _) =
            improve(&inst, &start, &model_sets[0].subseq, &model_sets[0].regional, &cfg, 50, i as u64).unwrap();
        outputs.push(best.clone());
        for t in &outputs {
            if validate_tour(&inst, t).is_err() || len(&inst, t) < opt - 1e-9 {
                below += 1;
            }
        }
        if len(&inst, &best) <= opt + 1e-9 {
            optimal += 1;
        }
    }
    let rate = optimal as f64 / count as f64;
    outcome(
        below == 0 && rate >= 0.6,
        format!("{below} outputs below the optimum or invalid; improve(T=50) optimal on {optimal}/{count} ({:.0}%, need >= 60%)", rate * 100.0),
    )
}

fn c2_monotonicity() -> Outcome {
    let cfg = RunConfig::desk();
    let models = Models::init(&cfg).unwrap();
    let mut increases = 0;
    let mut boundaries = 0;
    let mut start_lens = Vec::new();
    let mut final_lens = Vec::new();
    for s in 0..20u64 {
        let inst = generate_uniform(200, 20_000 + s).unwrap();
        let start = random_insertion(&inst, s);
        let (best, traces) = improve(&inst, &start, &models.subseq, &models.regional, &cfg, 100, s).unwrap();
        assert_eq!(traces.len(), 100);
        for t in &traces {
            boundaries += 3;
            increases += (t.after_sr > t.input) as usize;
            increases += (t.after_two_opt > t.after_sr) as usize;
            increases += (t.after_rr > t.after_two_opt) as usize;
        }
        start_lens.push(len(&inst, &start));
        final_lens.push(len(&inst, &best));
    }
    let (a, b) = (mean(&start_lens), mean(&final_lens));
    outcome(
        increases == 0 && b < a,
        format!("{increases} increases over {boundaries} stage boundaries; mean length {a:.4} -> {b:.4}"),
    )
}

fn c3_regional_oracle() -> Outcome {
    let policy = RrPolicy::new(RrHyper { attn: small_attn(), layers: 2, clip: 10.0 }, 7).unwrap();
    let mut violations = 0;
    let mut identity_worst = 0.0f64;
    let mut checked = 0;
    for i in 0..200u64 {
        let n = 20 + (i % 40) as usize;
        let inst = generate_uniform(n, 30_000 + i).unwrap();
        let tour = random_insertion(&inst, i);
        let problem = extract_region(&inst, &tour, sample_center(&inst, i), 6).unwrap();
        let oracle = rr_brute_force(&problem).unwrap();
        let heat = policy.encode(&problem);
        let mut orderings = rr_rollout(&problem, &heat, 32, DecodeMode::Sample, i);
        orderings.extend(rr_rollout(&problem, &heat, 12, DecodeMode::Greedy, i));
        orderings.push(oracle.clone());
        for o in &orderings {
            checked += 1;
            if o.reward > oracle.reward {
                violations += 1;
            }
            let t = rr_reconstruct(&problem, &o.oriented).unwrap();
            let err = (len(&inst, &t) - (problem.internal_total() - o.reward)).abs();
            identity_worst = identity_worst.max(err);
        }
    }
    outcome(
        violations == 0 && identity_worst <= 1e-9,
        format!(
            "{violations} oracle violations over {checked} orderings; worst length-identity error {identity_worst:.2e}"
        ),
    )
}

fn c4_gradients() -> Outcome {
    let mut worst = Vec::new();
    for t in [GradTarget::Subseq, GradTarget::Regional, GradTarget::Constructive] {
        worst.push((t, check_gradients(t, 0).unwrap()));
    }
    let pass = worst.iter().all(|(_, e)| *e < 1e-5);
    let detail = worst.iter().map(|(t, e)| format!("{t:?} {e:.2e}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("max relative errors: {detail}"))
}

const RL_STEPS: usize = 300;
const RL_WINDOW: usize = 20;

fn c5_rl_signal() -> Outcome {
    // φ on a fixed pool of k = 6 regions.
    let mut rr = RrPolicy::new(RrHyper { attn: small_attn(), layers: 2, clip: 10.0 }, 1).unwrap();
    let pool: Vec<_> = (0..32u64)
        .map(|i| {
            let inst = generate_uniform(40, 40_000 + i).unwrap();
            let tour = random_insertion(&inst, i);
            extract_region(&inst, &tour, sample_center(&inst, i), 6).unwrap()
        })
        .collect();
    let adam = Adam::new(1e-3);
    let mut state = AdamState::default();
    let mut rewards = Vec::new();
    for step in 0..RL_STEPS {
        rr_train_step(&mut rr, &pool, 16, &adam, &mut state, step as u64).unwrap();
        rewards.push(rr_greedy_reward(&rr, &pool));
    }
    let (rr_first, rr_last) = (mean(&rewards[..RL_WINDOW]), mean(&rewards[RL_STEPS - RL_WINDOW..]));

    // ψ on a fixed pool of m = 6 windows.
    let mut sr = SrPolicy::new(SrHyper { attn: small_attn(), layers: 2, clip: 10.0 }, 1).unwrap();
    let pool: Vec<SubseqProblem> = (0..32u64)
        .map(|i| {
            let inst = generate_uniform(40, 50_000 + i).unwrap();
            let tour = random_insertion(&inst, i);
            SubseqProblem::new(&inst, tour.order[..6].to_vec()).unwrap()
        })
        .collect();
    let mut state = AdamState::default();
    let mut lengths = Vec::new();
    for step in 0..RL_STEPS {
        sr_train_step(&mut sr, &pool, 16, &adam, &mut state, step as u64).unwrap();
        lengths.push(sr_greedy_length(&sr, &pool));
    }
    let (sr_first, sr_last) = (mean(&lengths[..RL_WINDOW]), mean(&lengths[RL_STEPS - RL_WINDOW..]));
    outcome(
        rr_last > rr_first && sr_last < sr_first,
        format!(
            "regional greedy reward {rr_first:.5} -> {rr_last:.5}; subsequence greedy length {sr_first:.5} -> {sr_last:.5}"
        ),
    )
}

const SL_EPOCHS: usize = 200;
const SL_CHECK_EVERY: usize = 50;

fn sl_labels(seeds: std::ops::Range<u64>) -> (Vec<TspInstance>, Vec<Tour>) {
    seeds
        .map(|s| {
            let inst = generate_uniform(100, s).unwrap();
            let t = two_opt(&inst, &random_insertion(&inst, s), TwoOptBudget::converge());
            (inst, t)
        })
        .unzip()
}

fn c6_sl_signal() -> Outcome {
    let (train_i, train_l) = sl_labels(60_000..60_064);
    let (held_i, held_l) = sl_labels(70_000..70_128);
    let hyper = ConstructiveHyper { attn: AttentionConfig::new(32, 4, 64), layers: 2, ..ConstructiveHyper::default() };
    let mut policy = ConstructivePolicy::new(hyper, 1).unwrap();
    let cfg = SlConfig { batch_size: 64, curriculum: Curriculum::default(), update: SlUpdate::PerStep };
    let mut adam = Adam::new(1e-3).with_decay(0.98);
    let mut state = AdamState::default();
    let mut ratios = vec![greedy_length_ratio(&policy, &held_i, &held_l)];
    for epoch in 0..SL_EPOCHS {
        sl_train_epoch(&mut policy, &train_i, &train_l, &cfg, &mut adam, &mut state, epoch, epoch as u64).unwrap();
        if (epoch + 1) % SL_CHECK_EVERY == 0 {
            ratios.push(greedy_length_ratio(&policy, &held_i, &held_l));
        }
    }
    let last = *ratios.last().unwrap();
    let monotone = ratios.windows(2).all(|w| w[1] <= w[0]);
    let shown = ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(" -> ");
    outcome(
        last <= 1.10 && monotone,
        format!("held-out greedy/label ratio at epochs 0,50,..,200: {shown} (need final <= 1.10, non-increasing)"),
    )
}

fn c7_ablation() -> Outcome {
    let cfg = RunConfig::desk();
    let dir = tempfile::tempdir().unwrap();
    let insts: Vec<TspInstance> = (0..32u64).map(|s| generate_uniform(100, 80_000 + s).unwrap()).collect();
    let labels = initial_labels(&insts, 1);
    let mut tcfg = cfg.clone();
    tcfg.train.iterations = 3;
    tcfg.train.improver_epochs = 3;
    tcfg.train.constructive_epochs = 0;
    let (_, models, _) = train(LabeledDataset::new(insts, labels, 0).unwrap(), &tcfg, dir.path()).unwrap();

    let sr_only = RunConfig { stages: Stages::sr_only(), ..cfg.clone() };
    let mut full_lens = Vec::new();
    let mut sr_lens = Vec::new();
    for s in 0..20u64 {
        let inst = generate_uniform(500, 90_000 + s).unwrap();
        let start = random_insertion(&inst, s);
        let (a, _) = improve(&inst, &start, &models.subseq, &models.regional, &sr_only, 200, s).unwrap();
        let (b, _) = improve(&inst, &start, &models.subseq, &models.regional, &cfg, 200, s).unwrap();
        sr_lens.push(len(&inst, &a));
        full_lens.push(len(&inst, &b));
    }
    let (a, b) = (mean(&sr_lens), mean(&full_lens));
    outcome(a > b, format!("mean final length SR-only {a:.4} vs SR+2opt+RR {b:.4} (need strictly greater)"))
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data")
}

fn c8_tsplib() -> Outcome {
    let cfg = RunConfig::desk();
    let models = Models::init(&cfg).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, opt) in [("eil51", 426.0), ("berlin52", 7542.0)] {
        let text = std::fs::read_to_string(data_dir().join(format!("{name}.tsp"))).unwrap();
        let inst = parse_tsplib(&text).unwrap();
        let start = random_insertion(&inst, 0);
        let (best, _) = improve(&inst, &start, &models.subseq, &models.regional, &cfg, 200, 0).unwrap();
        let rounded = tsplib_rounded_length(&inst, &best).unwrap() as f64;
        let gap = (rounded - opt) / opt * 100.0;
        pass &= gap <= 10.0;
        parts.push(format!("{name} {rounded} (gap {gap:.2}%)"));
    }
    outcome(pass, format!("{} (need gap <= 10%)", parts.join(", ")))
}

fn cli(dir: &Path, args: &[&str], threads: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_localescape"))
        .current_dir(dir)
        .env("LOCALESCAPE_THREADS", threads)
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn c9_determinism() -> Outcome {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let eil = data_dir().join("eil51.tsp");
    let eil = eil.to_str().unwrap();
    let desk = ["--preset", "desk"];
    let mut ok = true;
    for (i, r) in runs.iter().enumerate() {
        let d = r.path();
        let threads = if i == 0 { "1" } else { "2" };
        let steps: Vec<Vec<&str>> = vec![
            vec!["generate", "--n", "50", "--count", "4", "--seed", "1", "--out", "data.ds"],
            vec!["solve", "--instance", "data.ds", "--mode", "rec:5", "--seed", "3", "--out", "tours"],
            vec!["solve", "--instance", eil, "--mode", "greedy", "--out", "eil.tour"],
            vec![
                "improve",
                "--instance",
                eil,
                "--tour",
                "eil.tour",
                "--iterations",
                "10",
                "--seed",
                "4",
                "--out",
                "eil.best",
                "--trace",
                "trace.csv",
            ],
            vec![
                "train",
                "--data",
                "data.ds",
                "--out",
                "run",
                "--seed",
                "5",
                "--set",
                "train.iterations=2",
                "--set",
                "train.improver_epochs=1",
                "--set",
                "train.constructive_epochs=2",
                "--set",
                "train.sl.batch_size=4",
            ],
        ];
        for s in steps {
            let args: Vec<&str> = desk.iter().copied().chain(s).collect();
            ok &= cli(d, &args, threads);
        }
    }
    let files = [
        "data.ds",
        "tours/00000.tour",
        "tours/00003.tour",
        "eil.tour",
        "eil.best",
        "trace.csv",
        "run/constructive.json",
        "run/subseq.json",
        "run/regional.json",
        "run/train_state.json",
        "run/snapshot-00002.ds",
    ];
    let mut differing = Vec::new();
    for f in files {
        let a = std::fs::read(runs[0].path().join(f));
        let b = std::fs::read(runs[1].path().join(f));
        match (a, b) {
            (Ok(a), Ok(b)) if a == b => {}
            _ => differing.push(f),
        }
    }
    outcome(
        ok && differing.is_empty(),
        format!(
            "commands succeeded: {ok}; {} of {} artifacts byte-identical across runs (1 vs 2 threads){}",
            files.len() - differing.len(),
            files.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {differing:?}") }
        ),
    )
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(usize, &str, f64, Check); 9] = [
        (1, "oracle optimality floor", 120.0, c1_oracle_floor),
        (2, "monotonicity suite", 600.0, c2_monotonicity),
        (3, "regional oracle equivalence", 60.0, c3_regional_oracle),
        (4, "gradient fidelity", 60.0, c4_gradients),
        (5, "RL learning signal", 600.0, c5_rl_signal),
        (6, "SL learning signal", 1800.0, c6_sl_signal),
        (7, "ablation direction", 1200.0, c7_ablation),
        (8, "TSPLIB end-to-end", 120.0, c8_tsplib),
        (9, "determinism", f64::INFINITY, c9_determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, limit, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let out = check();
        let secs = t0.elapsed().as_secs_f64();
        let in_time = secs < limit;
        let pass = out.pass && in_time;
        failures += (!pass) as usize;
        let budget = if limit.is_finite() { format!(", limit {limit:.0}s") } else { String::new() };
        println!(
            "criterion {id} {}: {name}: {} [{secs:.1}s{budget}{}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            if in_time { "" } else { ", over time" }
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
