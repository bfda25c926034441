//! Checkpoint files.
//!
//! ```text
//! FLOWGSPO-CKPT v1
//! l0.weight 128 52
//! l0.bias 128
//! ...
//! <blank line>
//! <little-endian f64 payload in descriptor order>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::{ParamVector, TensorDesc};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "FLOWGSPO-CKPT v1";

pub fn write_checkpoint<W: Write>(mut out: W, params: &ParamVector) -> Result<()> {
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    for desc in params.layout() {
        writeln!(out, "{desc}")?;
    }
    writeln!(out)?;
    let mut payload = Vec::with_capacity(params.len() * 8);
    for v in params.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<ParamVector> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end_matches(['\r', '\n']) != CHECKPOINT_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{CHECKPOINT_HEADER}`"),
        });
    }
    let mut layout = Vec::new();
    let mut line_no = 1;
    loop {
        line.clear();
        line_no += 1;
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "unexpected end of file before payload".into(),
            });
        }
        let text = line.trim_end_matches(['\r', '\n']);
        if text.is_empty() {
            break;
        }
        let mut parts = text.split_whitespace();
        let name = parts.next().expect("non-empty line has a token");
        let shape = parts
            .map(|tok| {
                tok.parse::<usize>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad dimension `{tok}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        layout.push(TensorDesc::new(name, shape));
    }
    let total: usize = layout.iter().map(TensorDesc::numel).sum();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != total * 8 {
        return Err(Error::Parse {
            line: line_no,
            message: format!(
                "payload holds {} bytes, descriptors need {}",
                payload.len(),
                total * 8
            ),
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ParamVector::new(layout, values)
}

/// Writes next to `path` and renames on success, so readers never see a partial file.
pub fn save_checkpoint(path: &Path, params: &ParamVector) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamVector> {
    read_checkpoint(fs::File::open(path)?)
}

/// Writes `bytes` to a hidden sibling file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}
