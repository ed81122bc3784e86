#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use curate_core::feature_store::{save_features, save_manifest};
use curate_core::Dataset;

pub fn write_dataset(dir: &Path, name: &str, data: &Dataset) -> (PathBuf, PathBuf) {
    std::fs::create_dir_all(dir).unwrap();
    let f = dir.join(format!("{name}.featmat"));
    let m = dir.join(format!("{name}.jsonl"));
    save_features(&data.features, &f).unwrap();
    save_manifest(&data.manifest, &m).unwrap();
    (f, m)
}

pub fn curate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curate"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn curate")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The only run directory under `runs`.
pub fn only_run(runs: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}
