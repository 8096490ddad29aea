use std::path::{Path, PathBuf};

use crate::error::{DataError, Error, Result};
use crate::level::{Level, NUM_LEVELS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest.
    pub raw_path: String,
    /// Path resolved against the manifest's directory.
    pub path: PathBuf,
    pub level: Level,
}

/// Ordered list of labelled images.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Samples per level.
    pub fn counts(&self) -> [usize; NUM_LEVELS] {
        let mut c = [0; NUM_LEVELS];
        for e in &self.entries {
            c[e.level.index()] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<Level> {
        self.entries.iter().map(|e| e.level).collect()
    }

    /// Keeps the entries at `indices` (zero-based, in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let entries = indices
            .iter()
            .map(|&i| {
                self.entries.get(i).cloned().ok_or_else(|| {
                    Error::Config(format!("subset index {i} outside manifest of {}", self.len()))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    /// Writes `path,level` rows with paths relative to `path`'s directory
    /// when possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["path", "level"]).map_err(|e| csv_io(path, e))?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            w.write_record([rel.to_string_lossy().as_ref(), &e.level.to_string()])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Reads a `path,level` CSV. Image paths are resolved relative to the
/// manifest and must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()).into());
    }
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let malformed = |line: usize, msg: String| DataError::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "level" {
        return Err(malformed(1, format!("expected header `path,level`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))).into());
    }

    let mut entries = Vec::new();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                return Err(malformed(line, e.to_string()).into());
            }
        };
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 2 {
            return Err(malformed(line, format!("expected 2 fields, found {}", record.len())).into());
        }
        let raw: i64 = record[1]
            .parse()
            .map_err(|_| malformed(line, format!("level `{}` is not an integer", &record[1])))?;
        let level = Level::new(raw).map_err(|_| DataError::LevelOutOfRange {
            path: path.to_path_buf(),
            line,
            level: raw,
        })?;
        let raw_path = record[0].to_string();
        let resolved = base.join(&raw_path);
        if !resolved.is_file() {
            return Err(DataError::MissingFile(resolved).into());
        }
        entries.push(ManifestEntry {
            raw_path,
            path: resolved,
            level,
        });
    }
    Ok(DatasetManifest { entries })
}

/// Reads zero-based sample indices, one per line (`#` comments allowed).
pub fn load_index_subset(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.parse().map_err(|_| {
                DataError::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("`{l}` is not an index"),
                }
                .into()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn one_row_per_level() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=4 {
            write(dir.path(), &format!("{i}.pgm"), "");
        }
        let m = write(dir.path(), "m.csv", "path,level\n1.pgm,1\n2.pgm,2\n3.pgm,3\n4.pgm,4\n");
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.counts(), [1, 1, 1, 1]);
        assert_eq!(man.entries[2].raw_path, "3.pgm");
        assert_eq!(man.entries[2].path, dir.path().join("3.pgm"));
    }

    #[test]
    fn level_five_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.pgm", "");
        let m = write(dir.path(), "m.csv", "path,level\na.pgm,1\na.pgm,5\n");
        let err = load_manifest(&m).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::LevelOutOfRange { line: 3, level: 5, .. })));
        assert!(err.to_string().contains(":3:"));
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(dir.path().join("nope.csv")),
            Err(Error::Data(DataError::MissingFile(_)))
        ));
        write(dir.path(), "a.pgm", "");
        let m = write(dir.path(), "m.csv", "path,level\na.pgm,x\n");
        assert!(matches!(load_manifest(&m), Err(Error::Data(DataError::Malformed { line: 2, .. }))));
        let m = write(dir.path(), "m2.csv", "file,grade\na.pgm,1\n");
        assert!(matches!(load_manifest(&m), Err(Error::Data(DataError::Malformed { line: 1, .. }))));
        let m = write(dir.path(), "m3.csv", "path,level\nb.pgm,1\n");
        assert!(matches!(load_manifest(&m), Err(Error::Data(DataError::MissingFile(_)))));
    }

    #[test]
    fn full_training_layout_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("path,level\n");
        for (level, n) in [(1, 214), (2, 461), (3, 364), (4, 461)] {
            for i in 0..n {
                let name = format!("l{level}_{i}.pgm");
                write(dir.path(), &name, "");
                body.push_str(&format!("{name},{level}\n"));
            }
        }
        let m = write(dir.path(), "m.csv", &body);
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.counts(), [214, 461, 364, 461]);

        // write + reload keeps order and labels
        let again = dir.path().join("again.csv");
        man.write(&again).unwrap();
        assert_eq!(load_manifest(&again).unwrap(), man);
    }

    #[test]
    fn index_subsets() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write(dir.path(), &format!("{i}.pgm"), "");
        }
        let m = write(dir.path(), "m.csv", "path,level\n0.pgm,1\n1.pgm,2\n2.pgm,4\n");
        let idx = write(dir.path(), "keep.txt", "# kept\n2\n0\n");
        let keep = load_index_subset(&idx).unwrap();
        let sub = load_manifest(&m).unwrap().subset(&keep).unwrap();
        assert_eq!(sub.counts(), [1, 0, 0, 1]);
        assert_eq!(sub.entries[0].raw_path, "2.pgm");
        assert!(load_manifest(&m).unwrap().subset(&[9]).is_err());
    }
}
