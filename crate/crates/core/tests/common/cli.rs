//! Drives the `clue` binary inside a scratch directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub fn clue(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clue"))
        .current_dir(dir)
        .env_remove("CLUE_SEED")
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("spawn clue")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = clue(dir, args);
    assert!(
        out.status.success(),
        "clue {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL_RUN: &str = r#"{"eval": {"seeds": 2, "episodes": 2}, "skills": {"eval_episodes": 2, "finetune_iterations": 20}}"#;

/// Every subcommand at toy size, with relative paths so that two runs in
/// different directories write identical files.
pub fn run_all(dir: &Path) {
    fs::write(dir.join("small.json"), SMALL_RUN).unwrap();
    let with =
        |args: &[&'static str]| -> Vec<&'static str> { [args, &["--seed", "3"][..]].concat() };
    ok(
        dir,
        &with(&[
            "gen-data",
            "--layout",
            "umaze",
            "--episodes",
            "30",
            "--expert-episodes",
            "3",
            "--out",
            "data",
        ]),
    );
    ok(
        dir,
        &with(&[
            "train-cvae",
            "--layout",
            "umaze",
            "--data",
            "data/dataset.jsonl",
            "--cvae-iterations",
            "60",
            "--out",
            "cvae",
        ]),
    );
    ok(
        dir,
        &with(&[
            "relabel",
            "--layout",
            "umaze",
            "--data",
            "data/dataset.jsonl",
            "--cvae-dir",
            "cvae",
            "--out",
            "relabel",
        ]),
    );
    ok(
        dir,
        &with(&[
            "relabel",
            "--layout",
            "umaze",
            "--data",
            "data/dataset.jsonl",
            "--expert",
            "data/expert.jsonl",
            "--cvae-iterations",
            "60",
            "--out",
            "il",
        ]),
    );
    ok(
        dir,
        &with(&[
            "train",
            "--layout",
            "umaze",
            "--data",
            "relabel/relabeled.jsonl",
            "--steps",
            "40",
            "--batch-size",
            "32",
            "--out",
            "agent",
        ]),
    );
    ok(
        dir,
        &with(&[
            "eval",
            "--config",
            "small.json",
            "--layout",
            "umaze",
            "--agent",
            "agent",
            "--out",
            "eval",
        ]),
    );
    ok(
        dir,
        &with(&[
            "gen-data",
            "--layout",
            "arena",
            "--four-goal",
            "--episodes",
            "8",
            "--out",
            "arena",
        ]),
    );
    ok(
        dir,
        &with(&[
            "skills",
            "--config",
            "small.json",
            "--layout",
            "arena",
            "--data",
            "arena/dataset.jsonl",
            "--k",
            "2",
            "--cvae-iterations",
            "40",
            "--steps",
            "20",
            "--batch-size",
            "32",
            "--out",
            "skills",
        ]),
    );
    ok(
        dir,
        &with(&[
            "sweep",
            "--config",
            "small.json",
            "--layout",
            "umaze",
            "--data",
            "data/dataset.jsonl",
            "--lambda",
            "0,0.8",
            "--cvae-iterations",
            "40",
            "--steps",
            "20",
            "--batch-size",
            "32",
            "--out",
            "sweep",
        ]),
    );
}

/// All files under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                let key = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                acc.insert(key, fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc);
    acc
}
