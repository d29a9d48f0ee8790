use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// Write `rows` as a headed CSV. Floats use the shortest round-trip form,
/// so identical values always give identical bytes.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    for row in rows {
        w.serialize(row).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        record: 0,
        message: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Paths of one command run: `<command>_<seed>[.<part>].<ext>` under `dir`.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub command: &'static str,
    pub seed: u64,
}

impl RunFiles {
    pub fn path(&self, part: Option<&str>, ext: &str) -> PathBuf {
        self.sibling(self.command, part, ext)
    }

    /// Path of another command's output for the same seed.
    pub fn sibling(&self, command: &str, part: Option<&str>, ext: &str) -> PathBuf {
        let name = match part {
            Some(p) => format!("{command}_{}.{p}.{ext}", self.seed),
            None => format!("{command}_{}.{ext}", self.seed),
        };
        self.dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: usize,
        b: f64,
        c: Option<f64>,
    }

    #[test]
    fn csv_has_header_and_stable_floats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_csv(&p, &[Row { a: 1, b: 0.1, c: None }, Row { a: 2, b: 1e-300, c: Some(2.5) }]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "a,b,c\n1,0.1,\n2,1e-300,2.5\n");
    }

    #[test]
    fn names_follow_command_and_seed() {
        let f = RunFiles {
            dir: PathBuf::from("out"),
            command: "train-world",
            seed: 7,
        };
        assert_eq!(f.path(None, "csv"), PathBuf::from("out/train-world_7.csv"));
        assert_eq!(f.path(Some("dynamics"), "json"), PathBuf::from("out/train-world_7.dynamics.json"));
        assert_eq!(
            f.sibling("gen-data", None, "jsonl"),
            PathBuf::from("out/gen-data_7.jsonl")
        );
    }
}
