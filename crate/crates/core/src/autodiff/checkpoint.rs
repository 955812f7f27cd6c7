//! Checkpoint layout: a directory holding `tensors.bin` (every tensor's values
//! as little-endian `f64`, concatenated) and `manifest.txt`:
//!
//! ```text
//! whends-checkpoint 1
//! <name> <rows> <cols> <byte offset>
//! ...
//! ```

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::linalg::Matrix;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TENSORS_FILE: &str = "tensors.bin";
const MAGIC: &str = "whends-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error at {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

pub type NamedTensor = (String, Matrix);

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_checkpoint(dir: &Path, tensors: &[(String, &Matrix)]) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from(MAGIC);
    manifest.push('\n');
    let mut bytes = Vec::new();
    let mut seen = HashSet::new();
    for (name, m) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) || !seen.insert(name.as_str()) {
            return Err(CheckpointError::CorruptCheckpoint(format!(
                "invalid or duplicate tensor name {name:?}"
            )));
        }
        manifest.push_str(&format!(
            "{name} {} {} {}\n",
            m.rows(),
            m.cols(),
            bytes.len()
        ));
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, bytes).map_err(io_err(&tpath))?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let tpath = dir.join(TENSORS_FILE);
    let bytes = fs::read(&tpath).map_err(io_err(&tpath))?;
    let corrupt = |msg: String| CheckpointError::CorruptCheckpoint(msg);

    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt("missing manifest header".into()));
    }
    let mut out = Vec::new();
    let mut expected_offset = 0usize;
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, rows, cols, offset] = fields[..] else {
            return Err(corrupt(format!("manifest line {}: {line:?}", lineno + 2)));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| corrupt(format!("manifest line {}: bad number {s:?}", lineno + 2)))
        };
        let (rows, cols, offset) = (parse(rows)?, parse(cols)?, parse(offset)?);
        if offset != expected_offset {
            return Err(corrupt(format!(
                "tensor {name} at offset {offset}, expected {expected_offset}"
            )));
        }
        let len = rows * cols * 8;
        let end = offset + len;
        if end > bytes.len() {
            return Err(corrupt(format!(
                "tensor {name} needs bytes {offset}..{end} but file holds {}",
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::from_vec(rows, cols, data)
            .map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
        out.push((name.to_string(), m));
        expected_offset = end;
    }
    if expected_offset != bytes.len() {
        return Err(corrupt(format!(
            "manifest covers {expected_offset} bytes, file holds {}",
            bytes.len()
        )));
    }
    Ok(out)
}
