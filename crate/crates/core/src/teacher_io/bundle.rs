//! Distilled teacher bundles.
//!
//! A bundle is a directory:
//!
//! | file           | contents                                   |
//! |----------------|--------------------------------------------|
//! | `cls.apmt`     | `1×d_c` CLS token                          |
//! | `grid.apmt`    | optional `H×W×d_c` last-layer feature grid |
//! | `classes.apmt` | optional `n×d_c` class embedding bank      |
//! | `classes.json` | ordered label names (`[]` without a bank)  |
//! | `meta.json`    | `{"d_c": <int>, "teacher": <string>}`      |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file::{read_file, read_tensor, write_atomic, write_tensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ttt::ClassBank;

pub const CLS_FILE: &str = "cls.apmt";
pub const GRID_FILE: &str = "grid.apmt";
pub const CLASSES_FILE: &str = "classes.apmt";
pub const LABELS_FILE: &str = "classes.json";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub d_c: usize,
    pub teacher: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledBundle {
    pub meta: BundleMeta,
    /// `1×d_c`.
    pub cls: Tensor,
    pub grid: Option<Tensor>,
    pub classes: Option<ClassBank>,
}

fn invalid(path: &Path, reason: impl Into<String>) -> Error {
    Error::Bundle {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl DistilledBundle {
    pub fn d_c(&self) -> usize {
        self.meta.d_c
    }

    /// The CLS token as a flat `d_c` vector.
    pub fn cls_vector(&self) -> Tensor {
        Tensor::vector(self.cls.data().to_vec())
    }

    /// Checks every declared dimension against `meta.d_c`.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let dc = self.meta.d_c;
        if dc == 0 {
            return Err(invalid(dir, "meta.json: d_c must be positive"));
        }
        if self.cls.shape() != [1, dc] {
            return Err(invalid(
                &dir.join(CLS_FILE),
                format!("shape {:?}, expected [1, {dc}]", self.cls.shape()),
            ));
        }
        if !self.cls.is_finite() {
            return Err(invalid(&dir.join(CLS_FILE), "non-finite values"));
        }
        if let Some(g) = &self.grid {
            let ok = matches!(g.shape(), [h, w, d] if *h > 0 && *w > 0 && *d == dc);
            if !ok {
                return Err(invalid(
                    &dir.join(GRID_FILE),
                    format!("shape {:?}, expected [H, W, {dc}]", g.shape()),
                ));
            }
        }
        if let Some(bank) = &self.classes {
            if bank.dim() != dc {
                return Err(invalid(
                    &dir.join(CLASSES_FILE),
                    format!("embedding width {}, expected {dc}", bank.dim()),
                ));
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let meta: BundleMeta = serde_json::from_slice(&read_file(&meta_path)?)
            .map_err(|source| Error::Json {
                path: meta_path.clone(),
                source,
            })?;
        let cls = read_tensor(dir.join(CLS_FILE))?;
        let grid_path = dir.join(GRID_FILE);
        let grid = grid_path.exists().then(|| read_tensor(&grid_path)).transpose()?;

        let labels_path = dir.join(LABELS_FILE);
        let labels: Vec<String> = serde_json::from_slice(&read_file(&labels_path)?)
            .map_err(|source| Error::Json {
                path: labels_path.clone(),
                source,
            })?;
        let bank_path = dir.join(CLASSES_FILE);
        let classes = if bank_path.exists() {
            let emb = read_tensor(&bank_path)?;
            if emb.shape().len() != 2 || emb.shape()[0] != labels.len() {
                return Err(invalid(
                    &bank_path,
                    format!(
                        "shape {:?} does not match {} labels in {LABELS_FILE}",
                        emb.shape(),
                        labels.len()
                    ),
                ));
            }
            Some(ClassBank::new(emb, labels).map_err(|e| invalid(&bank_path, e.to_string()))?)
        } else {
            if !labels.is_empty() {
                return Err(invalid(
                    &labels_path,
                    format!("{} labels but no {CLASSES_FILE}", labels.len()),
                ));
            }
            None
        };
        let bundle = Self {
            meta,
            cls,
            grid,
            classes,
        };
        bundle.validate(dir)?;
        Ok(bundle)
    }

    /// Writes every file of the bundle into `dir` (created if missing).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.validate(dir)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(dir.join(CLS_FILE), &self.cls)?;
        if let Some(g) = &self.grid {
            write_tensor(dir.join(GRID_FILE), g)?;
        }
        let labels: &[String] = match &self.classes {
            Some(bank) => {
                write_tensor(dir.join(CLASSES_FILE), bank.embeddings())?;
                bank.names()
            }
            None => &[],
        };
        let json = |path: PathBuf, v: serde_json::Result<Vec<u8>>| -> Result<()> {
            let bytes = v.map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?;
            write_atomic(&path, &bytes)
        };
        json(dir.join(LABELS_FILE), serde_json::to_vec_pretty(labels))?;
        json(dir.join(META_FILE), serde_json::to_vec_pretty(&self.meta))
    }

    /// Files of the bundle that exist on disk, in a fixed order.
    pub fn files(dir: impl AsRef<Path>) -> Vec<PathBuf> {
        let dir = dir.as_ref();
        [CLS_FILE, GRID_FILE, CLASSES_FILE, LABELS_FILE, META_FILE]
            .iter()
            .map(|f| dir.join(f))
            .filter(|p| p.exists())
            .collect()
    }
}
