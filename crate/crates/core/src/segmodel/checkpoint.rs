//! `PSEG1` tensor container.
//!
//! ```text
//! PSEG1
//! <tensor count>
//! <name> <dtype> <dims, comma separated, `-` for a scalar>
//! ...
//! <raw little-endian payloads in manifest order>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

pub const MAGIC: &str = "PSEG1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "u8" => Some(1),
        "u32" | "f32" => Some(4),
        "u64" | "i64" | "f64" => Some(8),
        _ => None,
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, dtype: &str, shape: &[usize], bytes: Vec<u8>) {
        debug_assert!(!name.contains(char::is_whitespace));
        self.entries.push(Entry {
            name: name.to_string(),
            dtype: dtype.to_string(),
            shape: shape.to_vec(),
            bytes,
        });
    }

    pub fn push_real<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
        for &v in t.data() {
            v.put_le(&mut bytes);
        }
        self.push(name, T::DTYPE, t.shape(), bytes);
    }

    pub fn push_u8(&mut self, name: &str, values: &[u8]) {
        self.push(name, "u8", &[values.len()], values.to_vec());
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], values: &[u32]) {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, "u32", shape, bytes);
    }

    pub fn push_i64(&mut self, name: &str, shape: &[usize], values: &[i64]) {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, "i64", shape, bytes);
    }

    pub fn push_u64(&mut self, name: &str, value: u64) {
        self.push(name, "u64", &[], value.to_le_bytes().to_vec());
    }

    pub fn push_text(&mut self, name: &str, text: &str) {
        self.push_u8(name, text.as_bytes());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))
    }

    fn typed(&self, name: &str, dtype: &str) -> Result<&Entry> {
        let e = self.get(name)?;
        if e.dtype != dtype {
            return Err(bad(format!("tensor `{name}` has dtype {}, expected {dtype}", e.dtype)));
        }
        Ok(e)
    }

    pub fn real<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.typed(name, T::DTYPE)?;
        let data = e.bytes.chunks_exact(T::BYTES).map(T::from_le).collect();
        Tensor::new(e.shape.clone(), data)
    }

    pub fn u8s(&self, name: &str) -> Result<&[u8]> {
        Ok(&self.typed(name, "u8")?.bytes)
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        let e = self.typed(name, "u32")?;
        Ok(e.bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn i64s(&self, name: &str) -> Result<Vec<i64>> {
        let e = self.typed(name, "i64")?;
        Ok(e.bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let e = self.typed(name, "u64")?;
        e.bytes
            .as_slice()
            .try_into()
            .map(u64::from_le_bytes)
            .map_err(|_| bad(format!("tensor `{name}` is not a scalar")))
    }

    pub fn text(&self, name: &str) -> Result<String> {
        String::from_utf8(self.u8s(name)?.to_vec()).map_err(|_| bad(format!("tensor `{name}` is not utf-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC}\n{}\n", self.entries.len());
        for e in &self.entries {
            let dims = if e.shape.is_empty() {
                "-".to_string()
            } else {
                e.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            out.push_str(&format!("{} {} {dims}\n", e.name, e.dtype));
        }
        let mut bytes = out.into_bytes();
        for e in &self.entries {
            bytes.extend_from_slice(&e.bytes);
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic = format!("{MAGIC}\n");
        if !bytes.starts_with(magic.as_bytes()) {
            return Err(bad(format!("bad magic: not a {MAGIC} checkpoint")));
        }
        let mut pos = magic.len();
        let mut line = || -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest"))?;
            let s = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("manifest is not utf-8"))?;
            pos += end + 1;
            Ok(s)
        };
        let count: usize = line()?.trim().parse().map_err(|_| bad("bad tensor count"))?;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let l = line()?;
            let parts: Vec<&str> = l.split(' ').collect();
            if parts.len() != 3 {
                return Err(bad(format!("bad manifest line `{l}`")));
            }
            let size = dtype_size(parts[1]).ok_or_else(|| bad(format!("unknown dtype `{}`", parts[1])))?;
            let shape: Vec<usize> = if parts[2] == "-" {
                Vec::new()
            } else {
                parts[2]
                    .split(',')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape in `{l}`"))))
                    .collect::<Result<_>>()?
            };
            headers.push((parts[0].to_string(), parts[1].to_string(), shape, size));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, dtype, shape, size) in headers {
            let len = shape.iter().product::<usize>() * size;
            if bytes.len() - pos < len {
                return Err(bad(format!("payload of `{name}` truncated")));
            }
            entries.push(Entry {
                name,
                dtype,
                shape,
                bytes: bytes[pos..pos + len].to_vec(),
            });
            pos += len;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted run never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(d) => Error::Checkpoint(format!("{}: {d}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_real("w", &Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap());
        c.push_real("h", &Tensor::<f32>::from_f64(&[2], &[0.5, 1.5]).unwrap());
        c.push_u8("mask", &[1, 0, 1]);
        c.push_u32("cls", &[3], &[0, 1, 2]);
        c.push_i64("prov", &[1, 3], &[-1, 4, 5]);
        c.push_u64("step", 42);
        c.push_text("stage", "joint");
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.real::<f64>("w").unwrap().shape(), &[2, 3]);
        assert_eq!(back.u64("step").unwrap(), 42);
        assert_eq!(back.text("stage").unwrap(), "joint");
        assert_eq!(back.i64s("prov").unwrap(), vec![-1, 4, 5]);
        assert!(back.real::<f32>("w").is_err());
    }

    #[test]
    fn manifest_layout() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes[..60]).to_string();
        assert!(text.starts_with("PSEG1\n7\nw f64 2,3\nh f32 2\n"));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(b"PSEG2\n0\n").unwrap_err();
        assert!(err.to_string().contains("PSEG1"));
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes.extend_from_slice(&[0, 0]);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
