use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use localescape::data::{gap_pct, parse_tour_file, read_results};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_localescape"))
        .current_dir(dir)
        .env("LOCALESCAPE_THREADS", "1")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn unknown_flags_and_bad_config_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["solve", "--bogus"])), 1);
    assert_eq!(code(&run(dir.path(), &["--set", "sr.m=1", "parse", "x.tsp"])), 1);
    assert_eq!(code(&run(dir.path(), &["--set", "no_such_key=3", "parse", "x.tsp"])), 1);
    assert_eq!(code(&run(dir.path(), &["solve", "--instance", "x.tsp", "--mode", "rec:", "--out", "t"])), 1);
}

#[test]
fn missing_and_malformed_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["parse", "missing.tsp"])), 2);
    fs::write(
        dir.path().join("bad.tsp"),
        "NAME: bad\nDIMENSION: 3\nEDGE_WEIGHT_TYPE: EUC_2D\nNODE_COORD_SECTION\n1 0 0\n",
    )
    .unwrap();
    assert_eq!(code(&run(dir.path(), &["parse", "bad.tsp"])), 2);
}

#[test]
fn single_node_instance_solves_to_the_trivial_tour() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("one.tsp"),
        "NAME: one\nDIMENSION: 1\nEDGE_WEIGHT_TYPE: EUC_2D\nNODE_COORD_SECTION\n1 3 4\nEOF\n",
    )
    .unwrap();
    for mode in ["greedy", "rec:3"] {
        let o = run(
            dir.path(),
            &["--preset", "desk", "solve", "--instance", "one.tsp", "--mode", mode, "--out", "one.tour"],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let (tour, length) = parse_tour_file(&fs::read_to_string(dir.path().join("one.tour")).unwrap()).unwrap();
        assert_eq!(tour.order, vec![0]);
        assert_eq!(length, 0.0);
    }
}

#[test]
fn parse_scores_reference_tours_with_the_rounded_metric() {
    let d = data_dir();
    let o = run(&d, &["parse", "eil51.tsp", "--tour", "eil51.opt.tour"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("tour_length=426"));
}

#[test]
fn bench_reports_gaps_against_the_optima_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_dir();
    let optima = data.join("optima.csv");
    let o = run(
        dir.path(),
        &[
            "--preset",
            "desk",
            "bench",
            "--dir",
            data.to_str().unwrap(),
            "--optima",
            optima.to_str().unwrap(),
            "--out",
            "r.csv",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_results(&fs::read_to_string(dir.path().join("r.csv")).unwrap()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.instance.as_str()).collect();
    assert_eq!(names, ["berlin52", "eil51"]);
    for r in &rows {
        let opt = if r.instance == "eil51" { 426.0 } else { 7542.0 };
        assert_eq!(r.length.fract(), 0.0);
        assert!(r.length >= opt);
        assert!((r.gap_pct.unwrap() - gap_pct(r.length, opt)).abs() < 1e-9);
        assert!((r.gap_pct.unwrap() - (r.length - opt) / opt * 100.0).abs() < 1e-9);
    }
}

#[test]
fn improve_never_returns_a_longer_tour() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_dir();
    let inst = data.join("berlin52.tsp");
    let first =
        run(dir.path(), &["--preset", "desk", "solve", "--instance", inst.to_str().unwrap(), "--out", "g.tour"]);
    assert!(first.status.success());
    let o = run(
        dir.path(),
        &[
            "--preset",
            "desk",
            "improve",
            "--instance",
            inst.to_str().unwrap(),
            "--tour",
            "g.tour",
            "--iterations",
            "5",
            "--out",
            "i.tour",
            "--trace",
            "trace.csv",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, before) = parse_tour_file(&fs::read_to_string(dir.path().join("g.tour")).unwrap()).unwrap();
    let (_, after) = parse_tour_file(&fs::read_to_string(dir.path().join("i.tour")).unwrap()).unwrap();
    assert!(after <= before);
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 6);
}

#[test]
fn checkgrad_passes_for_every_module() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["constructive", "subseq", "regional"] {
        assert_eq!(code(&run(dir.path(), &["checkgrad", m])), 0);
    }
    assert_eq!(code(&run(dir.path(), &["checkgrad", "nope"])), 1);
}
