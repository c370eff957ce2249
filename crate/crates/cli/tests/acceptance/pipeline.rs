//! Two complete runs of the command-line pipeline on the demo config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::{ensure, Check};

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.json")
}

/// Relative path to contents for every CSV under `root`.
fn csv_files(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| format!("{}: {e}", dir.display()))? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let rel = p.strip_prefix(root).expect("under root").display().to_string();
                out.insert(rel, std::fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn run_all(work: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_claimcraft"))
        .arg("--config")
        .arg(demo_config())
        .arg("--deterministic")
        .arg("all")
        .env("CLAIMCRAFT_WORK_DIR", work)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "run in {} exited with {}: {}", work.display(), out.status, String::from_utf8_lossy(&out.stderr));
    Ok(())
}

pub fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_all(&a)?;
    run_all(&b)?;
    let (fa, fb) = (csv_files(&a)?, csv_files(&b)?);
    ensure!(fa.keys().eq(fb.keys()), "runs wrote different CSV sets: {:?} vs {:?}", fa.keys(), fb.keys());
    for key in ["onset/comparison.csv", "cost/metrics.csv", "rwe/summary.csv"] {
        ensure!(fa.contains_key(key), "missing {key}");
    }
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k).collect();
    ensure!(differing.is_empty(), "differing CSVs: {differing:?}");
    Ok(format!("{} CSVs byte-identical across two runs", fa.len()))
}
