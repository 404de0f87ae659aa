//! Named weight tensors and their on-disk format.
//!
//! ```text
//! ROIFUSE-WEIGHTS 1
//! <name> f32 <d0>x<d1>x...
//! ...
//! END
//! <f32 LE payloads, concatenated in manifest order>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const HEADER: &str = "ROIFUSE-WEIGHTS 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Bundle(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Bundle(format!("missing tensor `{name}`")))
    }

    /// Fetches a tensor and checks its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Bundle(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies every tensor of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: WeightBundle) {
        self.tensors.extend(other.tensors);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "{HEADER}");
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(header, "{name} f32 {}", dims.join("x"));
        }
        let _ = writeln!(header, "END");
        let mut out = header.into_bytes();
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Bundle(msg.to_string());
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<&str> {
            let rest = &bytes[*pos..];
            let end = rest.iter().position(|b| *b == b'\n').ok_or_else(|| bad("unterminated header"))?;
            *pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line(&mut pos)? != HEADER {
            return Err(bad("bad header line"));
        }
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "END" {
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, dims] = parts[..] else {
                return Err(Error::Bundle(format!("malformed manifest line `{line}`")));
            };
            if dtype != "f32" {
                return Err(Error::Bundle(format!("unsupported dtype `{dtype}`")));
            }
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Bundle(format!("bad shape `{dims}`")))?;
            if manifest.iter().any(|(n, _)| n == name) {
                return Err(Error::Bundle(format!("duplicate tensor name `{name}`")));
            }
            manifest.push((name.to_string(), shape));
        }
        let mut bundle = WeightBundle::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let end = pos + n * 4;
            if end > bytes.len() {
                return Err(Error::Bundle(format!("payload truncated in `{name}`")));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            pos = end;
            let t = Tensor::new(shape, data).map_err(|e| Error::Bundle(format!("`{name}`: {e}")))?;
            bundle.insert(name, t);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(bundle)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}
