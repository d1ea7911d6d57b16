//! Task cache files.
//!
//! Layout: the line `ICICL-TASKS`, one line of JSON header, then every
//! tensor of every task as little-endian `f64`. Per task the order is context
//! inputs and outputs, each in-context dataset's inputs and outputs, target
//! inputs, then target outputs when present.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kernel::KernelSpec;
use crate::task::{Dataset, Task};
use crate::{Error, Result, Tensor};

const MAGIC_LINE: &[u8] = b"ICICL-TASKS\n";
const VERSION: u32 = 1;

/// A task with the kernel that generated it, when known.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedTask {
    pub task: Task,
    pub kernel: Option<KernelSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    n_c: usize,
    n_t: usize,
    n_ic: Vec<usize>,
    has_target_y: bool,
    kernel: Option<KernelSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    d_x: usize,
    d_y: usize,
    tasks: Vec<Entry>,
}

/// Hex SHA-256 of the JSON serialization of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn encode_task_cache(config_hash: &str, tasks: &[CachedTask]) -> Result<Vec<u8>> {
    let (d_x, d_y) = tasks
        .first()
        .map(|t| (t.task.target_x.cols(), t.task.context.d_y()))
        .unwrap_or((0, 0));
    let mut payload = Vec::new();
    let mut put = |t: &Tensor| {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    let mut entries = Vec::with_capacity(tasks.len());
    for (i, ct) in tasks.iter().enumerate() {
        let t = &ct.task;
        t.validate(d_x, d_y)
            .map_err(|e| Error::InvalidTask(format!("task {i}: {e}")))?;
        put(&t.context.x);
        put(&t.context.y);
        for d in &t.in_context {
            put(&d.x);
            put(&d.y);
        }
        put(&t.target_x);
        if let Some(y) = &t.target_y {
            put(y);
        }
        entries.push(Entry {
            n_c: t.context.len(),
            n_t: t.n_t(),
            n_ic: t.in_context.iter().map(Dataset::len).collect(),
            has_target_y: t.target_y.is_some(),
            kernel: ct.kernel,
        });
    }
    let header = Header {
        version: VERSION,
        config_hash: config_hash.to_string(),
        d_x,
        d_y,
        tasks: entries,
    };
    let mut out = MAGIC_LINE.to_vec();
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Format(e.to_string()))?;
    out.push(b'\n');
    out.extend(payload);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let len = rows * cols * 8;
        let chunk = self
            .bytes
            .get(self.at..self.at + len)
            .ok_or_else(|| Error::Format("task cache payload is truncated".into()))?;
        self.at += len;
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::matrix(rows, cols, data)
    }

    fn dataset(&mut self, n: usize, d_x: usize, d_y: usize) -> Result<Dataset> {
        let x = self.matrix(n, d_x)?;
        let y = self.matrix(n, d_y)?;
        Dataset::new(x, y)
    }
}

/// Decodes a cache, refusing it when `expected_hash` is given and differs.
/// Returns the stored config hash with the tasks.
pub fn decode_task_cache(bytes: &[u8], expected_hash: Option<&str>) -> Result<(String, Vec<CachedTask>)> {
    let rest = bytes
        .strip_prefix(MAGIC_LINE)
        .ok_or_else(|| Error::Format("not a task cache file".into()))?;
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("task cache header is unterminated".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..end]).map_err(|e| Error::Format(format!("task cache header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Format(format!("task cache version {}", header.version)));
    }
    if let Some(expected) = expected_hash {
        if expected != header.config_hash {
            return Err(Error::Format(format!(
                "task cache was generated for config {} but the current config hashes to {expected}; regenerate it",
                header.config_hash
            )));
        }
    }
    let mut r = Reader {
        bytes: &rest[end + 1..],
        at: 0,
    };
    let (d_x, d_y) = (header.d_x, header.d_y);
    let mut tasks = Vec::with_capacity(header.tasks.len());
    for e in &header.tasks {
        let context = r.dataset(e.n_c, d_x, d_y)?;
        let in_context = e
            .n_ic
            .iter()
            .map(|&n| r.dataset(n, d_x, d_y))
            .collect::<Result<Vec<_>>>()?;
        let target_x = r.matrix(e.n_t, d_x)?;
        let target_y = if e.has_target_y {
            Some(r.matrix(e.n_t, d_y)?)
        } else {
            None
        };
        tasks.push(CachedTask {
            task: Task {
                context,
                in_context,
                target_x,
                target_y,
            },
            kernel: e.kernel,
        });
    }
    if r.at != r.bytes.len() {
        return Err(Error::Format(format!(
            "{} unexpected bytes after the last task",
            r.bytes.len() - r.at
        )));
    }
    Ok((header.config_hash, tasks))
}

pub fn write_task_cache(path: &Path, config_hash: &str, tasks: &[CachedTask]) -> Result<()> {
    std::fs::write(path, encode_task_cache(config_hash, tasks)?)?;
    Ok(())
}

pub fn read_task_cache(path: &Path, expected_hash: Option<&str>) -> Result<Vec<CachedTask>> {
    Ok(decode_task_cache(&std::fs::read(path)?, expected_hash)?.1)
}
