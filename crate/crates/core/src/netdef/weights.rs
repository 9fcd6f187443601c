//! Binary tensor container and model checkpoints.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "RDET" | u32 version | u32 n_meta | { u32 klen, key, u32 vlen, value }*
//! | u32 n_tensors | { u32 nlen, name, u8 dtype, u32 n,c,h,w, u64 offset }*
//! | u64 data_bytes | raw f32 data
//! ```
//!
//! Round trips are bit-exact. Files are written atomically (temp + rename).

use super::{fuse_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RDET";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Named tensors plus string metadata, the on-disk unit for checkpoints and
/// dataset caches.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                msg: "truncated file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format {
            msg: "non-utf8 string".into(),
        })
    }
}

/// Serialize a container to bytes.
pub fn encode_container(c: &Container) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    put_u32(&mut head, VERSION);
    put_u32(&mut head, c.meta.len() as u32);
    for (k, v) in &c.meta {
        put_str(&mut head, k);
        put_str(&mut head, v);
    }
    put_u32(&mut head, c.tensors.len() as u32);
    let mut offset = 0u64;
    for (name, t) in &c.tensors {
        put_str(&mut head, name);
        head.push(DTYPE_F32);
        let s = t.shape();
        for d in [s.n, s.c, s.h, s.w] {
            put_u32(&mut head, d as u32);
        }
        put_u64(&mut head, offset);
        offset += (t.numel() * 4) as u64;
    }
    put_u64(&mut head, offset);
    head.reserve(offset as usize);
    for (_, t) in &c.tensors {
        for v in t.data() {
            head.extend_from_slice(&v.to_le_bytes());
        }
    }
    head
}

pub fn decode_container(buf: &[u8]) -> Result<Container> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            msg: "bad magic, not a tensor container".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            msg: format!("unsupported version {version}"),
        });
    }
    let n_meta = r.u32()? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let k = r.string()?;
        let v = r.string()?;
        meta.push((k, v));
    }
    let n_tensors = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format {
                msg: format!("unknown dtype tag {dtype}"),
            });
        }
        let dims: Vec<u32> = (0..4).map(|_| r.u32()).collect::<Result<_>>()?;
        let offset = r.u64()?;
        entries.push((name, dims, offset));
    }
    let data_bytes = r.u64()? as usize;
    let data = r.take(data_bytes)?;
    let mut tensors = Vec::with_capacity(n_tensors);
    for (name, dims, offset) in entries {
        let shape = Shape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
        let bytes = shape.numel() * 4;
        let start = offset as usize;
        if start + bytes > data.len() {
            return Err(Error::Format {
                msg: format!("tensor `{name}` overruns data section"),
            });
        }
        let vals: Vec<f32> = data[start..start + bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, vals)?));
    }
    Ok(Container { meta, tensors })
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_container(c: &Container, path: &Path) -> Result<()> {
    let bytes = encode_container(c);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Container> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_container(&buf)
}

/// Persist a model: config + fused flag + seed in metadata, every tensor in
/// the table.
pub fn save_weights(m: &Model, path: &Path) -> Result<()> {
    let mut meta = vec![("kind".to_string(), "model".to_string())];
    meta.extend(m.config.to_kv());
    meta.push(("fused".into(), if m.fused { "1" } else { "0" }.into()));
    meta.push(("seed".into(), format!("{}", m.seed)));
    let c = Container {
        meta,
        tensors: m.collect_tensors(),
    };
    save_container(&c, path)
}

/// Rebuild a model from a checkpoint. The tensor table must match the graph
/// implied by the stored config exactly: unknown, missing, or mis-shaped
/// entries are format errors.
pub fn load_weights(path: &Path) -> Result<Model> {
    let c = load_container(path)?;
    model_from_container(&c)
}

pub fn model_from_container(c: &Container) -> Result<Model> {
    if c.meta_get("kind") != Some("model") {
        return Err(Error::Format {
            msg: "container does not hold a model checkpoint".into(),
        });
    }
    let mut cfg = ModelConfig::for_variant(super::Variant::N);
    for (k, v) in &c.meta {
        if k == "kind" || k == "fused" || k == "seed" {
            continue;
        }
        cfg.set_kv(k, v).map_err(|e| Error::Format {
            msg: format!("bad config metadata: {e}"),
        })?;
    }
    let fused = c.meta_get("fused") == Some("1");
    let seed: u64 = c
        .meta_get("seed")
        .and_then(|s| s.parse().ok())
        .ok_or(Error::Format {
            msg: "missing seed metadata".into(),
        })?;

    let mut model = Model::build(&cfg, seed)?;
    if fused {
        model = fuse_model(&model)?;
    }

    let mut table: BTreeMap<String, Tensor> = c.tensors.iter().cloned().collect();
    if table.len() != c.tensors.len() {
        return Err(Error::Format {
            msg: "duplicate tensor names".into(),
        });
    }
    model.assign_tensors(&mut |name, shape| {
        let t = table.remove(name).ok_or(Error::Format {
            msg: format!("checkpoint is missing tensor `{name}`"),
        })?;
        if t.shape() != shape {
            return Err(Error::Format {
                msg: format!(
                    "tensor `{name}` has shape {}, graph expects {shape}",
                    t.shape()
                ),
            });
        }
        Ok(t)
    })?;
    if let Some((name, _)) = table.into_iter().next() {
        return Err(Error::Format {
            msg: format!("checkpoint has unexpected tensor `{name}`"),
        });
    }
    Ok(model)
}
