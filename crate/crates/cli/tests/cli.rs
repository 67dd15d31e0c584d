//! End-to-end behaviour of the command-line runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use fourierformer_cli::{run, ExperimentConfig, CONFIG_ECHO, OUTPUT_DIR_ENV};

fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("fourierformer").chain(args.iter().copied()))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Every row has the header's column count and no cell is empty except
/// where a column is optional.
fn check_csv(text: &str) {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    assert!(header.iter().all(|h| !h.is_empty()));
    for line in lines {
        assert_eq!(line.split(',').count(), header.len(), "{line}");
    }
}

fn check_outputs(dir: &Path) {
    for (name, bytes) in snapshot(dir) {
        let text = String::from_utf8(bytes);
        if name.ends_with(".json") {
            let v: serde_json::Value = serde_json::from_str(&text.unwrap()).unwrap();
            assert!(v.is_object(), "{name}");
        } else if name.ends_with(".csv") {
            check_csv(&text.unwrap());
        }
    }
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(run_args(&[]), 2);
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(run_args(&["fit-everything"]), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run_args(&["equivalence", "--bogus", "1", "--output-dir", out]), 2);
    assert_eq!(run_args(&["equivalence", "--n", "many", "--output-dir", out]), 2);
    assert_eq!(run_args(&["equivalence", "--threads", "0", "--output-dir", out]), 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "n=3\nwidth=9\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run_args(&["equivalence", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]),
        2
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    let out = dir.path().join("out");
    fs::write(&cfg, format!("n=3\nmax_d=4\nseed=9\noutput_dir={}\n", out.display())).unwrap();
    assert_eq!(run_args(&["equivalence", "--config", cfg.to_str().unwrap(), "--n", "5"]), 0);
    let echo = ExperimentConfig::parse(&fs::read_to_string(out.join(CONFIG_ECHO)).unwrap()).unwrap();
    assert_eq!(echo.get::<usize>("n").unwrap(), 5);
    assert_eq!(echo.get::<usize>("max_d").unwrap(), 4);
    assert_eq!(echo.get::<u64>("seed").unwrap(), 9);
    assert_eq!(echo.get::<usize>("max_n").unwrap(), 16);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("equivalence.json")).unwrap()).unwrap();
    assert_eq!(report["instances"], 5);
}

#[test]
fn gradcheck_and_equivalence_examples() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    assert_eq!(run_args(&["gradcheck", "--dims", "4", "--seeds", "25", "--output-dir", g.to_str().unwrap()]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(g.join("gradcheck.json")).unwrap()).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() <= 1e-4);
    assert_eq!(v["cases"].as_array().unwrap().len(), 12);

    let e = dir.path().join("e");
    assert_eq!(run_args(&["equivalence", "--n", "50", "--output-dir", e.to_str().unwrap()]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(e.join("equivalence.json")).unwrap()).unwrap();
    assert!(v["max_gap"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn failed_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // A zero tolerance cannot be met by finite differences.
    assert_eq!(run_args(&["gradcheck", "--seeds", "1", "--tol", "0", "--output-dir", out]), 1);
}

#[test]
fn output_dir_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_fourierformer"))
        .args(["equivalence", "--n", "2"])
        .env(OUTPUT_DIR_ENV, dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("equivalence.json").exists());
    let echo = fs::read_to_string(dir.path().join(CONFIG_ECHO)).unwrap();
    assert!(echo.contains(&format!("output_dir={}", dir.path().display())));
}

#[test]
fn outputs_parse_and_rerun_from_echo_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<Vec<&str>> = vec![
        vec!["bandlimit", "--points", "9"],
        vec!["density-rate", "--ladder", "50,100,200", "--reps", "3", "--grid-points", "301"],
        vec!["regression-rate", "--repeats", "3"],
        vec!["ablate-r", "--steps", "5", "--r-inits", "0.5,2", "--corpus-bytes", "8000"],
        vec!["train-lm", "--steps", "5", "--layers", "1", "--d-model", "8", "--d-ff", "8", "--context", "8",
             "--corpus-bytes", "4000", "--require-baseline", "false"],
        vec!["head-distance", "--steps", "3", "--corpus-bytes", "8000", "--source", "attention"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let mut full = args.clone();
        let out_s = out.to_str().unwrap().to_string();
        full.extend(["--output-dir", &out_s]);
        assert_eq!(run_args(&full), 0, "{args:?}");
        check_outputs(&out);
        let first = snapshot(&out);
        let echo = out.join(CONFIG_ECHO).to_str().unwrap().to_string();
        assert_eq!(run_args(&[args[0], "--config", &echo]), 0);
        assert_eq!(snapshot(&out), first, "{args:?}");
    }
}

#[test]
fn thread_count_does_not_change_ablation_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut tables = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let code = run_args(&[
            "ablate-phi", "--steps", "4", "--exponents", "2,4,6", "--corpus-bytes", "8000",
            "--threads", threads, "--output-dir", out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        tables.push(fs::read(out.join("ablate_phi.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
}
