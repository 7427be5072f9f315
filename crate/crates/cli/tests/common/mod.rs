#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn apm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_apm"));
    c.env_remove("APM_SEED");
    c
}

pub fn run(args: &[&str]) -> Output {
    apm().args(args).output().expect("spawn apm")
}

/// Runs `apm`, requires success and returns the parsed summary.
pub fn run_ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "apm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary JSON")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A smooth 32×32 test picture: two colour ramps and a disc. `invert`
/// gives a second, different image.
pub fn write_test_image(path: &Path, invert: bool) {
    let n = 32;
    let mut bytes = format!("P6\n{n} {n}\n255\n").into_bytes();
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let disc = (fx - 0.6).powi(2) + (fy - 0.4).powi(2) < 0.25f64.powi(2);
            for v in [0.2 + 0.6 * fx, 0.8 - 0.5 * fy, if disc { 0.9 } else { 0.15 }] {
                let b = (v * 255.0).round() as u8;
                bytes.push(if invert { 255 - b } else { b });
            }
        }
    }
    std::fs::write(path, bytes).unwrap();
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// `a.ppm`, `b.ppm` and a one-line manifest listing `a.ppm`.
    pub fn images(&self) -> (PathBuf, PathBuf, PathBuf) {
        let (a, b, m) = (self.path("a.ppm"), self.path("b.ppm"), self.path("train.tsv"));
        write_test_image(&a, false);
        write_test_image(&b, true);
        std::fs::write(&m, "a.ppm\n").unwrap();
        (a, b, m)
    }
}
