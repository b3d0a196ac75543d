//! `AGMW1` weights files.
//!
//! Layout: the magic line `AGMW1\n`, one JSON header line listing parameter
//! names and shapes in order (plus an opaque `meta` object), then every
//! parameter's values as little-endian f64 in header order.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8] = b"AGMW1\n";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub params: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl WeightsFile {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Protocol(format!("weights file has no parameter `{name}`")))
    }
}

pub fn write_weights<W: Write>(mut out: W, params: &[(&str, &Tensor)], meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        params: params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    out.write_all(MAGIC)?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, t) in params {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_weights<R: BufRead>(mut input: R) -> Result<WeightsFile> {
    let mut magic = [0u8; 6];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Truncated("weights magic".into()))?;
    if magic != MAGIC {
        return Err(Error::UnsupportedFormat("not an AGMW1 weights file".into()));
    }
    let mut line = String::new();
    input.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Truncated("weights header".into()));
    }
    let header: Header = serde_json::from_str(line.trim_end())?;
    let mut params = Vec::with_capacity(header.params.len());
    let mut buf = [0u8; 8];
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Truncated(format!("values of `{}`", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::UnsupportedFormat(format!("{} trailing bytes after weights", rest.len())));
    }
    Ok(WeightsFile {
        params,
        meta: header.meta,
    })
}

pub fn save_weights(path: &Path, params: &[(&str, &Tensor)], meta: &serde_json::Value) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_weights(std::io::BufWriter::new(file), params, meta)
}

pub fn load_weights(path: &Path) -> Result<WeightsFile> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_weights(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_magic_header_then_le_doubles() {
        let a = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.25]).unwrap();
        let mut bytes = Vec::new();
        write_weights(&mut bytes, &[("a", &a), ("b", &b)], &serde_json::json!({"seed": 7})).unwrap();
        assert!(bytes.starts_with(b"AGMW1\n{"));
        let nl = bytes[6..].iter().position(|&c| c == b'\n').unwrap() + 6;
        let payload = &bytes[nl + 1..];
        assert_eq!(payload.len(), 3 * 8);
        assert_eq!(&payload[8..16], &(-0.5f64).to_le_bytes());

        let back = read_weights(&bytes[..]).unwrap();
        assert_eq!(back.params, vec![("a".to_string(), a), ("b".to_string(), b)]);
        assert_eq!(back.meta["seed"], 7);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = Vec::new();
        write_weights(&mut bytes, &[("a", &a)], &serde_json::Value::Null).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_weights(&bytes[..]), Err(Error::Truncated(_))));
        assert!(matches!(read_weights(&b"AGMW2\n{}\n"[..]), Err(Error::UnsupportedFormat(_))));
    }
}
