use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use localescape::data::{
    format_tour_file, gap_pct, is_dataset, load_dataset, parse_tour_file, parse_tsplib_bytes, parse_tsplib_tour,
    read_file, read_optima, save_dataset, tsplib_rounded_length, write_atomic, write_results, DatasetFormat,
    LabeledDataset, ResultRow,
};
use localescape::gradcheck::{check_gradients, GradTarget};
use localescape::instance::{generate, tour_length, validate_tour, PointDistribution, Tour, TspInstance};
use localescape::pipeline::{improve, initial_labels, solve, train, write_traces, Models, RunConfig, SolveMode};
use localescape::{rng, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Largest relative error `checkgrad` accepts.
const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "localescape", version, about = "TSP construction and neural local search")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; unset keys keep the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Override a configuration key, e.g. `--set sr.m=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads.
    #[arg(long, global = true, env = "LOCALESCAPE_THREADS")]
    jobs: Option<usize>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size models and training schedule.
    Full,
    /// Small models and budgets for a single-core machine.
    Desk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled dataset of random instances.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "uniform")]
        distribution: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dataset.ds")]
        out: PathBuf,
        #[arg(long)]
        binary: bool,
    },
    /// Train the three policies on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Construct (and optionally improve) tours.
    Solve {
        /// TSPLIB file or dataset.
        #[arg(long)]
        instance: PathBuf,
        /// `greedy` or `rec:<iterations>`.
        #[arg(long, default_value = "greedy")]
        mode: String,
        /// Checkpoint directory; fresh policies from the config when absent.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Tour file, or a directory of tour files for a dataset.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Improve an existing tour.
    Improve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        tour: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration stage lengths as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Add wall-clock columns to the trace.
        #[arg(long)]
        timings: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve every instance of a directory and report gaps against optima.
    Bench {
        #[arg(long)]
        dir: PathBuf,
        /// CSV with columns `instance,optimum`.
        #[arg(long)]
        optima: Option<PathBuf>,
        #[arg(long, default_value = "greedy")]
        mode: String,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from random insertion instead of the constructive policy.
        #[arg(long)]
        insertion_start: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic and finite-difference gradients.
    Checkgrad {
        /// constructive, subseq or regional.
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse a TSPLIB file and report its size.
    Parse {
        file: PathBuf,
        /// Optional `.tour` file to score with the rounded metric.
        #[arg(long)]
        tour: Option<PathBuf>,
    },
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn classify(e: anyhow::Error) -> Failure {
    let code = match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_USAGE,
        Some(err) if err.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_DATA,
    };
    Failure { code, error: e }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, error: anyhow!(msg.into()) }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(j) = cli.common.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// Sets `path` (dotted) in a TOML table to `raw`, parsed as a TOML value
/// when possible and as a string otherwise.
fn set_key(root: &mut toml::Table, path: &str, raw: &str) -> Result<(), Failure> {
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| usage(format!("empty key in `{path}`")))?;
    let mut table = root;
    for k in keys {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| usage(format!("`{k}` in `{path}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let preset = match common.preset {
        Preset::Full => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
    };
    let mut table = toml::Table::try_from(&preset).map_err(|e| usage(format!("config: {e}")))?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(|e| Failure { code: EXIT_DATA, error: e })?;
        let file: toml::Table = text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?;
        merge(&mut table, file);
    }
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set `{o}`: expected KEY=VALUE")))?;
        set_key(&mut table, k.trim(), v.trim())?;
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| usage(format!("config: {e}")))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// A TSPLIB file gives one instance; a dataset gives all of its instances
/// and labels.
fn load_instances(path: &Path) -> anyhow::Result<(Vec<TspInstance>, Option<Vec<Tour>>)> {
    let bytes = read_file(path)?;
    if is_dataset(&bytes) {
        let ds = load_dataset(path)?;
        Ok((ds.instances, Some(ds.labels)))
    } else {
        let inst = parse_tsplib_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        Ok((vec![inst], None))
    }
}

fn instance_name(inst: &TspInstance, index: usize) -> String {
    inst.name.clone().unwrap_or_else(|| format!("instance{index}"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Generate { n, count, distribution, seed, out, binary } => {
            let dist: PointDistribution = distribution.parse().map_err(|e: Error| usage(e.to_string()))?;
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let instances = (0..count)
                .map(|i| generate(dist, n, rng::split(seed, i as u64)))
                .collect::<localescape::Result<Vec<_>>>()
                .map_err(|e| classify(e.into()))?;
            let labels = initial_labels(&instances, rng::split(seed, u64::MAX));
            let ds = LabeledDataset::new(instances, labels, 0).map_err(|e| classify(e.into()))?;
            let format = if binary { DatasetFormat::Binary } else { DatasetFormat::Text };
            save_dataset(&ds, &out, format).map_err(|e| classify(e.into()))?;
            println!("wrote {count} instances of {n} nodes to {}", out.display());
            Ok(())
        }
        Command::Train { data, out, seed } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (instances, labels) = load_instances(&data).map_err(classify)?;
            let labels = labels.unwrap_or_else(|| initial_labels(&instances, cfg.seed));
            let ds = LabeledDataset::new(instances, labels, 0).map_err(|e| classify(e.into()))?;
            let (final_ds, _, logs) = train(ds, &cfg, &out).map_err(|e| classify(e.into()))?;
            for l in &logs {
                println!("iteration={} mean_label_length={}", l.iteration, l.mean_label_length);
            }
            println!("final mean_label_length={}", final_ds.mean_label_length());
            Ok(())
        }
        Command::Solve { instance, mode, models, out, seed } => {
            let mode: SolveMode = mode.parse().map_err(|e: Error| usage(e.to_string()))?;
            let seed = seed.unwrap_or(cfg.seed);
            let models = Models::load_or_init(models.as_deref(), &cfg).map_err(|e| classify(e.into()))?;
            let (instances, _) = load_instances(&instance).map_err(classify)?;
            let single = instances.len() == 1 && !is_dataset(&read_file(&instance).map_err(|e| classify(e.into()))?);
            let outputs = solve_all(&instances, &models, mode, &cfg, seed).map_err(classify)?;
            if !single {
                fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).map_err(classify)?;
            }
            for (i, (inst, o)) in instances.iter().zip(&outputs).enumerate() {
                let path = if single { out.clone() } else { out.join(format!("{i:05}.tour")) };
                write_atomic(&path, format_tour_file(&o.tour, o.length).as_bytes()).map_err(|e| classify(e.into()))?;
                println!(
                    "instance={} n={} greedy={} length={} construct_s={:.3} improve_s={:.3}",
                    instance_name(inst, i),
                    inst.len(),
                    o.greedy_length,
                    o.length,
                    o.construct_seconds,
                    o.improve_seconds
                );
            }
            Ok(())
        }
        Command::Improve { instance, tour, iterations, models, out, trace, timings, seed } => {
            let seed = seed.unwrap_or(cfg.seed);
            let models = Models::load_or_init(models.as_deref(), &cfg).map_err(|e| classify(e.into()))?;
            let (instances, _) = load_instances(&instance).map_err(classify)?;
            if instances.len() != 1 {
                return Err(usage("improve takes a single instance"));
            }
            let inst = &instances[0];
            let text =
                fs::read_to_string(&tour).with_context(|| format!("reading {}", tour.display())).map_err(classify)?;
            let start = match parse_tour_file(&text) {
                Ok((t, _)) => t,
                Err(_) => parse_tsplib_tour(&text).map_err(|e| classify(e.into()))?,
            };
            validate_tour(inst, &start).map_err(|v| classify(Error::TourInvalid(v).into()))?;
            let t = iterations.unwrap_or(cfg.iterations);
            let (best, traces) = improve(inst, &start, &models.subseq, &models.regional, &cfg, t, seed)
                .map_err(|e| classify(e.into()))?;
            let len = tour_length(inst, &best).map_err(|e| classify(e.into()))?;
            write_atomic(&out, format_tour_file(&best, len).as_bytes()).map_err(|e| classify(e.into()))?;
            if let Some(p) = trace {
                let name = instance_name(inst, 0);
                let rows: Vec<(String, _)> = traces.into_iter().map(|t| (name.clone(), t)).collect();
                let mut buf = Vec::new();
                write_traces(&mut buf, &rows, timings).map_err(|e| classify(e.into()))?;
                write_atomic(&p, &buf).map_err(|e| classify(e.into()))?;
            }
            let before = tour_length(inst, &start).map_err(|e| classify(e.into()))?;
            println!("input={before} output={len}");
            Ok(())
        }
        Command::Bench { dir, optima, mode, models, out, insertion_start, seed } => {
            let mode: SolveMode = mode.parse().map_err(|e: Error| usage(e.to_string()))?;
            let seed = seed.unwrap_or(cfg.seed);
            let models = Models::load_or_init(models.as_deref(), &cfg).map_err(|e| classify(e.into()))?;
            let optima = match optima {
                Some(p) => {
                    let text =
                        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display())).map_err(classify)?;
                    read_optima(&text).map_err(|e| classify(e.into()))?
                }
                None => Vec::new(),
            };
            let rows = bench(&dir, &optima, &models, mode, insertion_start, &cfg, seed).map_err(classify)?;
            let mut buf = Vec::new();
            write_results(&mut buf, &rows).map_err(|e| classify(e.into()))?;
            write_atomic(&out, &buf).map_err(|e| classify(e.into()))?;
            let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap_pct).collect();
            let total: f64 = rows.iter().map(|r| r.seconds).sum();
            if gaps.is_empty() {
                println!("instances={} time_s={total:.3}", rows.len());
            } else {
                let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
                println!("instances={} mean_gap_pct={mean:.4} time_s={total:.3}", rows.len());
            }
            Ok(())
        }
        Command::Checkgrad { module, seed } => {
            let target: GradTarget = module.parse().map_err(|e: Error| usage(e.to_string()))?;
            let err = check_gradients(target, seed).map_err(|e| classify(e.into()))?;
            println!("module={module} max_relative_error={err:e}");
            if err < GRAD_TOLERANCE {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_NUMERIC,
                    error: anyhow!("gradient check failed: {err:e} >= {GRAD_TOLERANCE:e}"),
                })
            }
        }
        Command::Parse { file, tour } => {
            let bytes = read_file(&file).map_err(|e| classify(e.into()))?;
            let inst = parse_tsplib_bytes(&bytes).map_err(|e| classify(e.into()))?;
            print!("name={} n={}", instance_name(&inst, 0), inst.len());
            if let Some(t) = tour {
                let text =
                    fs::read_to_string(&t).with_context(|| format!("reading {}", t.display())).map_err(classify)?;
                let tour = parse_tsplib_tour(&text).map_err(|e| classify(e.into()))?;
                let len = tsplib_rounded_length(&inst, &tour).map_err(|e| classify(e.into()))?;
                print!(" tour_length={len}");
            }
            println!();
            let _ = std::io::stdout().flush();
            Ok(())
        }
    }
}

fn solve_all(
    instances: &[TspInstance],
    models: &Models,
    mode: SolveMode,
    cfg: &RunConfig,
    seed: u64,
) -> anyhow::Result<Vec<localescape::pipeline::SolveOutput>> {
    use rayon::prelude::*;
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| solve(inst, models, mode, cfg, rng::split(seed, i as u64)).map_err(Into::into))
        .collect()
}

/// Every `.tsp` file in `dir`, in name order.
fn bench(
    dir: &Path,
    optima: &[(String, f64)],
    models: &Models,
    mode: SolveMode,
    insertion_start: bool,
    cfg: &RunConfig,
    seed: u64,
) -> anyhow::Result<Vec<ResultRow>> {
    use rayon::prelude::*;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsp"))
        .collect();
    files.sort();
    let method = match mode {
        SolveMode::Greedy => "greedy".to_string(),
        SolveMode::Rec(t) => format!("rec{t}"),
    };
    let method = if insertion_start { format!("insertion+{method}") } else { method };
    files
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let inst = parse_tsplib_bytes(&read_file(path)?).with_context(|| format!("parsing {}", path.display()))?;
            let name = inst
                .name
                .clone()
                .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let s = rng::split(seed, i as u64);
            let t0 = Instant::now();
            let tour = if insertion_start {
                let start = localescape::instance::random_insertion(&inst, s);
                match mode {
                    SolveMode::Greedy => start,
                    SolveMode::Rec(t) => improve(&inst, &start, &models.subseq, &models.regional, cfg, t, s)?.0,
                }
            } else {
                solve(&inst, models, mode, cfg, s)?.tour
            };
            let seconds = t0.elapsed().as_secs_f64();
            let length = tsplib_rounded_length(&inst, &tour)? as f64;
            let gap = optima.iter().find(|(n, _)| *n == name).map(|&(_, opt)| gap_pct(length, opt));
            Ok(ResultRow { instance: name, n: inst.len(), method: method.clone(), length, gap_pct: gap, seconds })
        })
        .collect()
}
