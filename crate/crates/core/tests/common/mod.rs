//! Golden CLI runs shared by the CLI integration tests and the acceptance
//! suite.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub struct GoldenRun {
    pub name: &'static str,
    pub args: &'static [&'static str],
}

/// Input paths are relative to the fixtures directory, which is the working
/// directory of every run.
pub const GOLDEN_RUNS: &[GoldenRun] = &[
    GoldenRun { name: "simulate", args: &["simulate", "--spec", "dgp.json"] },
    GoldenRun {
        name: "validate",
        args: &["validate", "--panel", "panel.csv", "--size-column", "outcome", "--min-size=-5", "--min-pre", "6"],
    },
    GoldenRun {
        name: "estimate_gsc",
        args: &[
            "estimate", "--method", "gsc", "--panel", "panel.csv", "--covariates", "x1", "--r-max", "3", "--bootstrap",
            "200", "--seed", "7",
        ],
    },
    GoldenRun {
        name: "estimate_mc",
        args: &["estimate", "--method", "mc", "--panel", "panel.csv", "--lambda-count", "12", "--seed", "3"],
    },
    GoldenRun {
        name: "estimate_twfe",
        args: &["estimate", "--method", "twfe", "--panel", "panel.csv", "--compute", "compute.csv", "--covariates", "x1", "--log-compute"],
    },
    GoldenRun {
        name: "placebo_time",
        args: &[
            "placebo", "--kind", "time", "--panel", "panel.csv", "--covariates", "x1", "--r", "1", "--shift", "2",
            "--min-pre", "4", "--bootstrap", "100", "--seed", "5",
        ],
    },
    GoldenRun {
        name: "placebo_space",
        args: &[
            "placebo", "--kind", "space", "--panel", "panel.csv", "--covariates", "x1", "--r", "1", "--n-pseudo", "3",
            "--bootstrap", "100", "--seed", "5",
        ],
    },
    GoldenRun { name: "counts", args: &["counts", "--records", "records.jsonl", "--groups", "groups.json"] },
    GoldenRun {
        name: "counts_weighted",
        args: &["counts", "--records", "records.jsonl", "--groups", "groups.json", "--weighted"],
    },
    GoldenRun { name: "shares", args: &["shares", "--records", "records.jsonl", "--groups", "groups.json"] },
    GoldenRun { name: "filter_dl", args: &["filter-dl", "--records", "records.jsonl"] },
    GoldenRun {
        name: "tfidf",
        args: &["tfidf", "--records", "records.jsonl", "--groups", "groups.json", "--split-year", "2012"],
    },
];

pub struct Outcome {
    pub code: i32,
    pub stderr: String,
    pub files: BTreeMap<String, Vec<u8>>,
}

pub fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let path = e.path();
            if path.is_file() {
                files.insert(e.file_name().to_string_lossy().into_owned(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// Runs the CLI binary with `GAPCAST_THREADS` set and collects the
/// artifacts written to a fresh output directory.
pub fn run_cli(args: &[&str], threads: usize, out: &Path) -> Outcome {
    let output = Command::new(env!("CARGO_BIN_EXE_gapcast"))
        .args(args)
        .arg("--out")
        .arg(out)
        .current_dir(fixtures())
        .env("GAPCAST_THREADS", threads.to_string())
        .output()
        .expect("binary runs");
    Outcome {
        code: output.status.code().unwrap_or(-1),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        files: read_dir_files(out),
    }
}

/// Compares a golden run against its checked-in files and across thread
/// counts. Returns a list of problems (empty on success).
pub fn check_golden(run: &GoldenRun) -> Vec<String> {
    let mut problems = Vec::new();
    let expected = read_dir_files(&golden_root().join(run.name));
    if expected.is_empty() {
        problems.push(format!("{}: no golden files", run.name));
    }
    let mut outcomes = Vec::new();
    for threads in [1, 4, 1] {
        let dir = tempfile::tempdir().unwrap();
        let o = run_cli(run.args, threads, dir.path());
        if o.code != 0 {
            problems.push(format!("{} (threads {threads}): exit {} {}", run.name, o.code, o.stderr.trim()));
        }
        outcomes.push((threads, o.files));
    }
    for (threads, files) in &outcomes {
        if files != &expected {
            let differing: Vec<&String> = expected
                .keys()
                .chain(files.keys())
                .filter(|k| expected.get(*k) != files.get(*k))
                .collect();
            problems.push(format!("{} (threads {threads}): differs from golden in {differing:?}", run.name));
        }
    }
    problems
}

/// Rewrites the golden files from the current binary.
pub fn bless() {
    for run in GOLDEN_RUNS {
        let dir = golden_root().join(run.name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let o = run_cli(run.args, 1, &dir);
        assert_eq!(o.code, 0, "{}: {}", run.name, o.stderr);
    }
}
