#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aspdnet")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn aspdnet")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "aspdnet {args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file under `dir` keyed by relative path, minus names in `skip`.
pub fn tree(dir: &Path, skip: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, skip: &[&str], out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let name = p.file_name().unwrap().to_str().unwrap();
            if skip.contains(&name) {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, skip, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, skip, &mut out);
    out
}

/// Relative paths whose bytes differ or exist on one side only.
pub fn tree_diff(a: &Path, b: &Path, skip: &[&str]) -> Vec<PathBuf> {
    let (ta, tb) = (tree(a, skip), tree(b, skip));
    let mut diff: Vec<PathBuf> = ta.iter().filter(|(k, v)| tb.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect();
    diff.extend(tb.keys().filter(|k| !ta.contains_key(*k)).cloned());
    diff
}

/// A front end small enough for 32×32 smoke runs.
pub const MICRO_MODEL: &str = r#"{
  "use_cbam": true, "use_spm": true, "use_dcm": true,
  "frontend_channels": [4, "P", 8, "P", 8, "P", 16],
  "spm_rates": [2, 4], "spm_branch_channels": 4,
  "midend_channels": [8], "backend_channels": [4],
  "attention": {"reduction_ratio": 4, "spatial_kernel": 3},
  "init": {"kind": "he"}
}"#;

pub fn write(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}
