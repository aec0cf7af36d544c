//! Named-tensor container used for checkpoints and probe inputs.
//!
//! A file is a UTF-8 manifest followed by one little-endian blob:
//!
//! ```text
//! nitp-tensors v1
//! [meta]
//! model.hidden_dim = 64
//! [tensors]
//! tok_emb shape=[256,64] dtype=f32 offset=0 len=65536
//! [data]
//! <raw bytes>
//! ```
//!
//! `offset` and `len` are byte positions relative to the start of the blob.
//! Values are row-major. `f32` is the storage default; `f64` exists so that
//! resumable training state round-trips exactly.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "nitp-tensors v1";
const DATA_MARKER: &str = "[data]\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::format("tensor manifest", format!("unknown dtype `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.push((key.into(), value.into()));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let mut manifest = format!("{MAGIC}\n[meta]\n");
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::format("tensor manifest", format!("meta value for `{k}` spans lines")));
            }
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        manifest.push_str("[tensors]\n");
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let len = t.numel() * dtype.width();
            manifest.push_str(&format!(
                "{name} shape=[{}] dtype={dtype} offset={} len={len}\n",
                shape.join(","),
                blob.len()
            ));
            for &v in t.data() {
                match dtype {
                    DType::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        manifest.push_str(DATA_MARKER);
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // The marker is searched for at a line start; no manifest line can
        // begin with `[data]` except the marker itself.
        let marker = format!("\n{DATA_MARKER}");
        let marker = marker.as_bytes();
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::format("tensor manifest", "missing [data] section"))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|e| Error::format("tensor manifest", e.to_string()))?;
        let blob = &bytes[split + marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::format("tensor manifest", "bad magic line"));
        }
        let mut out = TensorFile::new();
        let mut section = "";
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if line == "[meta]" || line == "[tensors]" {
                section = line;
                continue;
            }
            match section {
                "[meta]" => {
                    let (k, v) = line
                        .split_once(" = ")
                        .ok_or_else(|| Error::format("tensor manifest", format!("bad meta line `{line}`")))?;
                    out.push_meta(k, v);
                }
                "[tensors]" => {
                    let (name, t) = parse_tensor_line(line, blob)?;
                    out.push_tensor(name, t);
                }
                _ => return Err(Error::format("tensor manifest", format!("line outside a section: `{line}`"))),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') || s.starts_with('[') {
        return Err(Error::format("tensor manifest", format!("invalid {what} `{s}`")));
    }
    Ok(())
}

fn parse_tensor_line(line: &str, blob: &[u8]) -> Result<(String, Tensor)> {
    let bad = |detail: &str| Error::format("tensor manifest", format!("{detail} in `{line}`"));
    let mut parts = line.split_whitespace();
    let name = parts.next().ok_or_else(|| bad("missing name"))?;
    let (mut shape, mut dtype, mut offset, mut len) = (None, None, None, None);
    for part in parts {
        let (k, v) = part.split_once('=').ok_or_else(|| bad("bad field"))?;
        match k {
            "shape" => {
                let inner = v
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| bad("bad shape"))?;
                let dims = if inner.is_empty() {
                    Vec::new()
                } else {
                    inner
                        .split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| bad("bad extent")))
                        .collect::<Result<Vec<_>>>()?
                };
                shape = Some(dims);
            }
            "dtype" => dtype = Some(v.parse::<DType>()?),
            "offset" => offset = Some(v.parse::<usize>().map_err(|_| bad("bad offset"))?),
            "len" => len = Some(v.parse::<usize>().map_err(|_| bad("bad len"))?),
            _ => return Err(bad("unknown field")),
        }
    }
    let (shape, dtype, offset, len) = match (shape, dtype, offset, len) {
        (Some(s), Some(d), Some(o), Some(l)) => (s, d, o, l),
        _ => return Err(bad("missing field")),
    };
    let count: usize = shape.iter().product();
    if count * dtype.width() != len {
        return Err(bad("len disagrees with shape"));
    }
    let bytes = blob
        .get(offset..offset + len)
        .ok_or_else(|| bad("range past end of blob"))?;
    let data = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((name.to_string(), Tensor::new(shape, data)?))
}
