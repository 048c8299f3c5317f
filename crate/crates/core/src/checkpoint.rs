//! Checkpoint container format.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! magic          8 bytes: "MNCLGLF1"
//! manifest_len   u64 little-endian
//! manifest       utf-8 text, one entry per line:
//!                  tensor <name> <dtype> <dim0>x<dim1>x...
//!                  bytes  <name> <len>
//!                  scalar <name> <u64>
//! config_len     u64 little-endian
//! config         utf-8 text echo of the run configuration
//! payload        raw little-endian tensor data in manifest order
//! ```
//!
//! Loading validates the magic, the dtype, and the declared sizes; callers
//! validate structural identity against a freshly built model.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MNCLGLF1";

/// Everything a checkpoint holds, in named form.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint<F> {
    pub tensors: Vec<(String, ArrayD<F>)>,
    pub byte_blobs: Vec<(String, Vec<u8>)>,
    pub scalars: Vec<(String, u64)>,
    pub config_text: String,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn scalar(&self, name: &str) -> Result<u64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Structure(format!("checkpoint missing scalar {name}")))
    }

    pub fn tensor_map(&self) -> BTreeMap<&str, &ArrayD<F>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = String::new();
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {} {}\n", F::DTYPE, dims.join("x")));
        }
        for (name, b) in &self.byte_blobs {
            manifest.push_str(&format!("bytes {name} {}\n", b.len()));
        }
        for (name, v) in &self.scalars {
            manifest.push_str(&format!("scalar {name} {v}\n"));
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)
                .map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
            let werr = |e| Error::io(format!("writing {}", tmp.display()), e);
            f.write_all(MAGIC).map_err(werr)?;
            f.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(werr)?;
            f.write_all(manifest.as_bytes()).map_err(werr)?;
            f.write_all(&(self.config_text.len() as u64).to_le_bytes())
                .map_err(werr)?;
            f.write_all(self.config_text.as_bytes()).map_err(werr)?;
            let mut buf = Vec::new();
            for (_, t) in &self.tensors {
                buf.clear();
                if F::DTYPE == "f32" {
                    for v in t.iter() {
                        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                    }
                } else {
                    for v in t.iter() {
                        buf.extend_from_slice(&v.as_f64().to_le_bytes());
                    }
                }
                f.write_all(&buf).map_err(werr)?;
            }
            for (_, b) in &self.byte_blobs {
                f.write_all(b).map_err(werr)?;
            }
            f.flush().map_err(werr)?;
        }
        fs::rename(&tmp, path)
            .map_err(|e| Error::io(format!("renaming {} into place", tmp.display()), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |off: usize, len: usize| -> Result<&[u8]> {
            bytes.get(off..off + len).ok_or(Error::Format {
                offset: off as u64,
                message: "checkpoint truncated".into(),
            })
        };
        if take(0, 8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let mut off = 8usize;
        let manifest_len = u64::from_le_bytes(take(off, 8)?.try_into().unwrap()) as usize;
        off += 8;
        let manifest = std::str::from_utf8(take(off, manifest_len)?)
            .map_err(|_| Error::Format {
                offset: off as u64,
                message: "manifest is not utf-8".into(),
            })?
            .to_string();
        off += manifest_len;
        let config_len = u64::from_le_bytes(take(off, 8)?.try_into().unwrap()) as usize;
        off += 8;
        let config_text = std::str::from_utf8(take(off, config_len)?)
            .map_err(|_| Error::Format {
                offset: off as u64,
                message: "config echo is not utf-8".into(),
            })?
            .to_string();
        off += config_len;

        let mut out = Checkpoint {
            tensors: Vec::new(),
            byte_blobs: Vec::new(),
            scalars: Vec::new(),
            config_text,
        };
        let elem = if F::DTYPE == "f32" { 4 } else { 8 };
        for line in manifest.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["tensor", name, dtype, dims] => {
                    if *dtype != F::DTYPE {
                        return Err(Error::Structure(format!(
                            "tensor {name} has dtype {dtype}, expected {}",
                            F::DTYPE
                        )));
                    }
                    let shape: Vec<usize> = dims
                        .split('x')
                        .map(|d| d.parse().map_err(|_| Error::Structure(format!(
                            "tensor {name}: bad shape {dims}"
                        ))))
                        .collect::<Result<_>>()?;
                    let count: usize = shape.iter().product();
                    let raw = take(off, count * elem)?;
                    off += count * elem;
                    let mut data = Vec::with_capacity(count);
                    if elem == 4 {
                        for c in raw.chunks_exact(4) {
                            data.push(F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
                        }
                    } else {
                        for c in raw.chunks_exact(8) {
                            data.push(F::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
                        }
                    }
                    let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                        .map_err(|e| Error::Structure(format!("tensor {name}: {e}")))?;
                    out.tensors.push((name.to_string(), arr));
                }
                ["bytes", name, len] => {
                    let len: usize = len.parse().map_err(|_| {
                        Error::Structure(format!("bytes {name}: bad length"))
                    })?;
                    // blob payloads follow all tensors; sized now, filled below
                    out.byte_blobs.push((name.to_string(), vec![0u8; len]));
                }
                ["scalar", name, v] => {
                    let v: u64 = v.parse().map_err(|_| {
                        Error::Structure(format!("scalar {name}: bad value"))
                    })?;
                    out.scalars.push((name.to_string(), v));
                }
                _ => {
                    return Err(Error::Structure(format!("bad manifest line: {line}")));
                }
            }
        }
        for (_, blob) in out.byte_blobs.iter_mut() {
            let len = blob.len();
            blob.copy_from_slice(take(off, len)?);
            off += len;
        }
        if off != bytes.len() {
            return Err(Error::Format {
                offset: off as u64,
                message: format!("{} trailing bytes after payload", bytes.len() - off),
            });
        }
        Ok(out)
    }
}
