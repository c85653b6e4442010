use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalRecord;
use crate::error::{Error, Result};

pub const SCHEMA: &str = "tempo.metrics";
pub const SCHEMA_VERSION: u32 = 1;

/// First line of a metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    pub method: String,
    pub seed: u64,
}

impl LogHeader {
    pub fn new(method: &str, seed: u64) -> Self {
        Self { schema: SCHEMA.into(), version: SCHEMA_VERSION, method: method.into(), seed }
    }
}

/// Append-only JSON-lines log: a header line, then one record per evaluation.
pub struct MetricLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricLog {
    /// Starts a new log, replacing any file at `path`.
    pub fn create(path: &Path, header: &LogHeader) -> Result<Self> {
        Self::with_records(path, header, &[])
    }

    /// Rewrites `path` with `header` and `records`, leaving it open for appends.
    pub fn with_records(path: &Path, header: &LogHeader, records: &[EvalRecord]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        let mut log = Self { path: path.to_path_buf(), out };
        for r in records {
            log.append(r)?;
        }
        Ok(log)
    }

    /// Appends `record` without its wall-clock field and flushes.
    pub fn append(&mut self, record: &EvalRecord) -> Result<()> {
        let r = EvalRecord { wall_clock_s: None, ..record.clone() };
        serde_json::to_writer(&mut self.out, &r)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metric_log(path: &Path) -> Result<(LogHeader, Vec<EvalRecord>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| Error::Format(format!("{} is empty", path.display())))??;
    let header: LogHeader = serde_json::from_str(&first)?;
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(Error::Format(format!("{}: unsupported schema {} v{}", path.display(), header.schema, header.version)));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, records))
}
