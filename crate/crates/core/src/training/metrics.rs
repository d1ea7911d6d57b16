use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use super::StepRecord;
use crate::Result;

pub const HEADER: &str = "step,loss,wall_ms";

/// Append-only per-step loss log.
pub struct MetricsLog {
    out: BufWriter<File>,
    start: Instant,
}

impl MetricsLog {
    /// Starts a new log, replacing any file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{HEADER}")?;
        Ok(Self {
            out,
            start: Instant::now(),
        })
    }

    /// Continues a log after step `step`, dropping any rows recorded past it.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<String> = match fs::read_to_string(path) {
            Ok(text) => text
                .lines()
                .skip(1)
                .filter(|l| {
                    l.split(',')
                        .next()
                        .and_then(|s| s.parse::<u64>().ok())
                        .is_some_and(|s| s <= step)
                })
                .map(str::to_string)
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut log = Self::create(path)?;
        for l in kept {
            writeln!(log.out, "{l}")?;
        }
        log.out.flush()?;
        drop(log);
        let out = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(Self {
            out,
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        let ms = self.start.elapsed().as_millis();
        writeln!(self.out, "{},{},{ms}", r.step, r.loss)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}
