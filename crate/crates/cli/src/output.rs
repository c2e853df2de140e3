//! Artifact writers. Every CSV opens with a `# config_hash=..,seed=..` line
//! and every JSON report carries a `provenance` object. Nothing time-dependent
//! is written, so reruns reproduce files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash,
            seed,
        }
    }

    pub fn csv_line(&self) -> String {
        format!("# config_hash={},seed={}\n", self.config_hash, self.seed)
    }
}

pub struct Artifacts {
    pub dir: PathBuf,
    pub prov: Provenance,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::internal("Io", format!("{}: {e}", path.display()))
}

impl Artifacts {
    pub fn new(dir: PathBuf, prov: Provenance) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self { dir, prov })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes a CSV produced by `body` after the provenance line.
    pub fn csv<F>(&self, name: &str, body: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> pathloss_core::Result<()>,
    {
        let mut buf = self.prov.csv_line().into_bytes();
        body(&mut buf).map_err(CliError::from)?;
        self.write(name, &buf)
    }

    /// Writes `fields` as a JSON object led by the provenance block.
    pub fn json(&self, name: &str, fields: Value) -> Result<PathBuf, CliError> {
        let mut obj = Map::new();
        obj.insert("provenance".into(), serde_json::to_value(&self.prov).expect("provenance serializes"));
        match fields {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("data".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(obj)).expect("report serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    /// Reads an upstream artifact, failing with an input error if absent.
    pub fn read(&self, name: &str, producer: &str) -> Result<Vec<u8>, CliError> {
        let path = self.path(name);
        fs::read(&path).map_err(|_| {
            CliError::input(
                "MissingArtifact",
                format!("{} not found; run `{producer}` first", path.display()),
            )
        })
    }

    pub fn read_json(&self, name: &str, producer: &str) -> Result<Value, CliError> {
        let bytes = self.read(name, producer)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::input("CorruptArtifact", format!("{}: {e}", self.path(name).display())))
    }
}

/// One hold-out prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub device_id: String,
    pub timestamp: f64,
    pub observed_db: f64,
    pub predicted_db: f64,
    pub residual_db: f64,
}

pub fn write_holdout_csv<W: std::io::Write>(rows: &[HoldoutRow], writer: W) -> pathloss_core::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_holdout_csv(bytes: &[u8]) -> Result<Vec<HoldoutRow>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let rows: Result<Vec<HoldoutRow>, _> = rdr.deserialize().collect();
    let rows = rows.map_err(|e| CliError::input("CorruptArtifact", format!("hold-out table: {e}")))?;
    if rows.is_empty() {
        return Err(CliError::empty("EmptySample", "hold-out table has no rows"));
    }
    Ok(rows)
}

/// Two-column `name,value` CSV.
pub fn write_pairs_csv<W: std::io::Write>(header: [&str; 2], rows: &[(String, f64)], writer: W) -> pathloss_core::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for (name, v) in rows {
        w.write_record([name.clone(), format!("{v:?}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json_carry_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let a = Artifacts::new(dir.path().to_path_buf(), Provenance::new("test", "abc".into(), 7)).unwrap();
        a.csv("t.csv", |w| write_pairs_csv(["k", "v"], &[("x".into(), 1.5)], w)).unwrap();
        let text = fs::read_to_string(a.path("t.csv")).unwrap();
        assert_eq!(text, "# config_hash=abc,seed=7\nk,v\nx,1.5\n");
        a.json("r.json", serde_json::json!({"answer": 42})).unwrap();
        let v = a.read_json("r.json", "test").unwrap();
        assert_eq!(v["provenance"]["seed"], 7);
        assert_eq!(v["answer"], 42);
    }

    #[test]
    fn holdout_round_trip_and_missing_artifact() {
        let rows = vec![HoldoutRow {
            device_id: "d".into(),
            timestamp: 1.0,
            observed_db: 80.0,
            predicted_db: 78.5,
            residual_db: 1.5,
        }];
        let mut buf = b"# config_hash=h,seed=0\n".to_vec();
        write_holdout_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_holdout_csv(&buf).unwrap(), rows);

        let dir = tempfile::tempdir().unwrap();
        let a = Artifacts::new(dir.path().to_path_buf(), Provenance::new("t", "h".into(), 0)).unwrap();
        assert_eq!(a.read("nope.csv", "fit").unwrap_err().code, 2);
    }
}
