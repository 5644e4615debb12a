//! Flat binary blobs behind a small text header.
//!
//! ```text
//! <magic line>
//! key=value
//! ...
//! <empty line>
//! <little-endian f64 payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_blob<'a>(path: &Path, magic: &str, header: &[(String, String)], values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut buf = Vec::new();
    writeln!(buf, "{magic}")?;
    for (k, v) in header {
        writeln!(buf, "{k}={v}")?;
    }
    writeln!(buf)?;
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Split a blob into its header lines (magic first) and binary payload.
pub fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Vec<String>, &'a [u8])> {
    let end = bytes.windows(2).position(|w| w == b"\n\n").ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "missing header terminator".into(),
    })?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "header is not UTF-8".into(),
    })?;
    Ok((text.lines().map(str::to_string).collect(), &bytes[end + 2..]))
}

pub fn header_map(lines: &[String]) -> BTreeMap<String, String> {
    lines
        .iter()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
        .collect()
}

pub fn f64s(body: &[u8]) -> Vec<f64> {
    body.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

/// Read a blob, checking its magic line.
pub fn read_blob(path: &Path, magic: &str) -> Result<(BTreeMap<String, String>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    let (header, body) = split_header(&bytes, path)?;
    if header.first().map(String::as_str) != Some(magic) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected {magic:?}"),
        });
    }
    if body.len() % 8 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: header.len() + 2,
            msg: "payload length is not a multiple of 8".into(),
        });
    }
    Ok((header_map(&header[1..]), f64s(body)))
}
