//! Check-in files, manifests and the JSON helpers behind every artifact.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use canoe_core::data::{preprocess, CheckIn, Dataset, PreprocessConfig, SECONDS_PER_DAY};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKINS_FILE: &str = "checkins.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.json";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|source| Error::Input { path: path.into(), source })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Parse { path: path.into(), line: 0, source })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize to JSON");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Output { path: dir.into(), source })?;
    }
    fs::write(path, text).map_err(|source| Error::Output { path: path.into(), source })
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Output { path: dir.into(), source })
}

/// One JSON object per line, blank lines skipped.
pub fn read_checkins(path: &Path) -> Result<Vec<CheckIn>> {
    let file = File::open(path).map_err(|source| Error::Input { path: path.into(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Input { path: path.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let c = serde_json::from_str(&line).map_err(|source| Error::Parse { path: path.into(), line: i + 1, source })?;
        out.push(c);
    }
    Ok(out)
}

pub fn write_checkins(path: &Path, checkins: &[CheckIn]) -> Result<()> {
    let err = |source| Error::Output { path: path.into(), source };
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    for c in checkins {
        serde_json::to_writer(&mut w, c).expect("check-ins serialize to JSON");
        w.write_all(b"\n").map_err(err)?;
    }
    w.flush().map_err(err)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub users: usize,
    pub checkins: usize,
    pub distinct_locations: usize,
    pub duration_days: f64,
}

impl Manifest {
    pub fn describe(checkins: &[CheckIn]) -> Self {
        let count = |mut v: Vec<u32>| {
            v.sort_unstable();
            v.dedup();
            v.len()
        };
        let span = match (checkins.iter().map(|c| c.t).min(), checkins.iter().map(|c| c.t).max()) {
            (Some(a), Some(b)) => (b - a) as f64 / SECONDS_PER_DAY as f64,
            _ => 0.0,
        };
        Manifest {
            users: count(checkins.iter().map(|c| c.user).collect()),
            checkins: checkins.len(),
            distinct_locations: count(checkins.iter().map(|c| c.loc).collect()),
            duration_days: span,
        }
    }
}

/// Where a `--data` argument points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    CheckIns(PathBuf),
    Prepared(PathBuf),
}

impl DataSource {
    /// A directory resolves to its prepared dataset when present, else its
    /// check-in file; a `.json` file is a prepared dataset and anything else
    /// a check-in file.
    pub fn resolve(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let prepared = path.join(DATASET_FILE);
            return Ok(if prepared.is_file() {
                DataSource::Prepared(prepared)
            } else {
                DataSource::CheckIns(path.join(CHECKINS_FILE))
            });
        }
        if !path.exists() {
            return Err(Error::Input {
                path: path.into(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            });
        }
        Ok(match path.extension().and_then(|e| e.to_str()) {
            Some("json") => DataSource::Prepared(path.into()),
            _ => DataSource::CheckIns(path.into()),
        })
    }

    pub fn load(&self, cfg: &PreprocessConfig) -> Result<Dataset> {
        let ds = match self {
            DataSource::CheckIns(p) => preprocess(&read_checkins(p)?, cfg)?,
            DataSource::Prepared(p) => read_json(p)?,
        };
        if ds.train.is_empty() {
            return Err(Error::Format(format!(
                "no user has at least {} activity records, nothing to train on",
                cfg.min_records
            )));
        }
        Ok(ds)
    }
}

pub fn load_dataset(path: &Path, cfg: &PreprocessConfig) -> Result<Dataset> {
    DataSource::resolve(path)?.load(cfg)
}
