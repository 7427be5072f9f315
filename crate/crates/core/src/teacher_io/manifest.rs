//! Training manifests: one sample per line, tab-separated
//! `image.ppm [<TAB> grid.apmt [<TAB> cls.apmt]]`. Empty fields mean the
//! signal is absent; blank lines and lines starting with `#` are skipped.
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use super::tensor_file::read_file;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub grid: Option<PathBuf>,
    pub cls: Option<PathBuf>,
}

pub fn parse_manifest(text: &str, base: &Path, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() > 3 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: n + 1,
                reason: format!("expected at most 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let resolve = |s: &str| -> Option<PathBuf> {
            let s = s.trim();
            (!s.is_empty()).then(|| base.join(s))
        };
        let image = resolve(fields[0]).ok_or_else(|| Error::Manifest {
            path: path.to_path_buf(),
            line: n + 1,
            reason: "missing image path".into(),
        })?;
        out.push(ManifestEntry {
            image,
            grid: fields.get(1).and_then(|s| resolve(s)),
            cls: fields.get(2).and_then(|s| resolve(s)),
        });
    }
    if out.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            line: 0,
            reason: "no samples listed".into(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        reason: "not UTF-8".into(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_and_optional_fields() {
        let text = "# samples\na.ppm\tg.apmt\tc.apmt\n\nb.ppm\n/abs/c.ppm\t\tc2.apmt\n";
        let e = parse_manifest(text, Path::new("/data"), Path::new("m.tsv")).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].image, PathBuf::from("/data/a.ppm"));
        assert_eq!(e[0].grid, Some(PathBuf::from("/data/g.apmt")));
        assert_eq!(e[1].grid, None);
        assert_eq!(e[1].cls, None);
        assert_eq!(e[2].image, PathBuf::from("/abs/c.ppm"));
        assert_eq!(e[2].grid, None);
        assert_eq!(e[2].cls, Some(PathBuf::from("/data/c2.apmt")));
    }

    #[test]
    fn errors() {
        let p = Path::new("m.tsv");
        assert!(matches!(parse_manifest("", Path::new("."), p), Err(Error::Manifest { line: 0, .. })));
        assert!(matches!(
            parse_manifest("# only a comment\n", Path::new("."), p),
            Err(Error::Manifest { .. })
        ));
        assert!(matches!(
            parse_manifest("a\n\tg.apmt\n", Path::new("."), p),
            Err(Error::Manifest { line: 2, .. })
        ));
        assert!(matches!(
            parse_manifest("a\tb\tc\td\n", Path::new("."), p),
            Err(Error::Manifest { line: 1, .. })
        ));
    }
}
