//! Binary checkpoint files.
//!
//! Layout (little endian): magic `DPTC`, `u32` format version, `u64` step
//! count, length-prefixed config digest and metadata JSON, `u32` block count,
//! then per block: length-prefixed name, `u8` dtype tag, `u32` rank, `u64`
//! dims, raw element data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};
use indexmap::IndexMap;

use crate::error::{Error, IoContext, Result};
use crate::nn::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPTC";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step_count: u64,
    pub config_digest: String,
    /// Free-form JSON describing how to rebuild the model.
    pub metadata: String,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(step_count: u64, config_digest: impl Into<String>, metadata: impl Into<String>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step_count,
            config_digest: config_digest.into(),
            metadata: metadata.into(),
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.tensors.insert(name.into(), t.detach().copy()?);
        Ok(())
    }

    pub fn extend_prefixed(&mut self, prefix: &str, tensors: &IndexMap<String, Tensor>) -> Result<()> {
        for (k, t) in tensors {
            self.insert(format!("{prefix}{k}"), t)?;
        }
        Ok(())
    }

    /// Blocks under `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> IndexMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no block {name}")))
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let file = File::create(&tmp).at(&tmp)?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| match e {
            Error::Io { source, .. } => Error::Io { path: tmp.clone(), source },
            e => e,
        })?;
        out.flush().at(&tmp)?;
        out.get_ref().sync_all().at(&tmp)?;
        drop(out);
        std::fs::rename(&tmp, path).at(path)
    }

    fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::Io { path: Default::default(), source: e };
        out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        out.write_u32::<LittleEndian>(self.format_version).map_err(io)?;
        out.write_u64::<LittleEndian>(self.step_count).map_err(io)?;
        write_str(out, &self.config_digest).map_err(io)?;
        write_str(out, &self.metadata).map_err(io)?;
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).map_err(io)?;
        for (name, t) in &self.tensors {
            write_str(out, name).map_err(io)?;
            let t = t.contiguous()?;
            let tag = match t.dtype() {
                DType::F32 => 0u8,
                DType::F64 => 1,
                DType::U32 => 2,
                other => return Err(Error::Config(format!("cannot store dtype {other:?} for {name}"))),
            };
            out.write_u8(tag).map_err(io)?;
            out.write_u32::<LittleEndian>(t.rank() as u32).map_err(io)?;
            for &d in t.dims() {
                out.write_u64::<LittleEndian>(d as u64).map_err(io)?;
            }
            let flat = t.flatten_all()?;
            match tag {
                0 => flat.to_vec1::<f32>()?.iter().try_for_each(|&v| out.write_f32::<LittleEndian>(v)),
                1 => flat.to_vec1::<f64>()?.iter().try_for_each(|&v| out.write_f64::<LittleEndian>(v)),
                _ => flat.to_vec1::<u32>()?.iter().try_for_each(|&v| out.write_u32::<LittleEndian>(v)),
            }
            .map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).at(path)?;
        let mut r = BufReader::new(file);
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let trunc = |e: std::io::Error| Error::Format { path: path.to_path_buf(), reason: format!("truncated: {e}") };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let format_version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {format_version}")));
        }
        let step_count = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let config_digest = read_str(&mut r).map_err(trunc)?;
        let metadata = read_str(&mut r).map_err(trunc)?;
        let n = r.read_u32::<LittleEndian>().map_err(trunc)?;
        let mut tensors = IndexMap::new();
        for _ in 0..n {
            let name = read_str(&mut r).map_err(trunc)?;
            let tag = r.read_u8().map_err(trunc)?;
            let rank = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if rank > 8 {
                return Err(bad(format!("block {name} has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(trunc)?;
            let count: usize = dims.iter().product();
            let dev = &Device::Cpu;
            let t = match tag {
                0 => {
                    let mut v = vec![0f32; count];
                    r.read_f32_into::<LittleEndian>(&mut v).map_err(trunc)?;
                    Tensor::from_vec(v, dims, dev)?
                }
                1 => {
                    let mut v = vec![0f64; count];
                    r.read_f64_into::<LittleEndian>(&mut v).map_err(trunc)?;
                    Tensor::from_vec(v, dims, dev)?
                }
                2 => {
                    let mut v = vec![0u32; count];
                    r.read_u32_into::<LittleEndian>(&mut v).map_err(trunc)?;
                    Tensor::from_vec(v, dims, dev)?
                }
                t => return Err(bad(format!("unknown dtype tag {t} for block {name}"))),
            };
            tensors.insert(name, t);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).at(path)? != 0 {
            return Err(bad("trailing bytes after last block".into()));
        }
        Ok(Self { format_version, step_count, config_digest, metadata, tensors })
    }
}

fn write_str(out: &mut impl Write, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Stores Adam moments and step under `prefix`.
pub fn save_adam(ckpt: &mut Checkpoint, prefix: &str, opt: &Adam) -> Result<()> {
    let (m, v) = opt.state();
    for (i, (a, b)) in m.iter().zip(v).enumerate() {
        ckpt.insert(format!("{prefix}m.{i}"), a)?;
        ckpt.insert(format!("{prefix}v.{i}"), b)?;
    }
    ckpt.insert(format!("{prefix}step"), &Tensor::new(&[opt.step as u32], &Device::Cpu)?)?;
    Ok(())
}

pub fn load_adam(ckpt: &Checkpoint, prefix: &str, opt: &mut Adam) -> Result<()> {
    let n = opt.vars().len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, var) in opt.vars().iter().enumerate() {
        let (dt, dev) = (var.dtype(), var.device());
        m.push(ckpt.get(&format!("{prefix}m.{i}"))?.to_dtype(dt)?.to_device(dev)?);
        v.push(ckpt.get(&format!("{prefix}v.{i}"))?.to_dtype(dt)?.to_device(dev)?);
    }
    let step = ckpt.get(&format!("{prefix}step"))?.to_vec1::<u32>()?[0] as usize;
    opt.load_state(m, v, step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dev = Device::Cpu;
        let mut c = Checkpoint::new(42, "abc123", r#"{"kind":"test"}"#);
        c.insert("a", &Tensor::new(&[[1.5f32, -0.0], [f32::MIN_POSITIVE, 3e38]], &dev).unwrap()).unwrap();
        c.insert("b", &Tensor::new(&[0.1f64, 1.0 / 3.0], &dev).unwrap()).unwrap();
        c.insert("c", &Tensor::new(&[7u32], &dev).unwrap()).unwrap();
        c.insert("s", &Tensor::new(2.5f32, &dev).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs/x/step_1.ckpt");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!((back.step_count, back.config_digest.as_str(), back.metadata.as_str()), (42, "abc123", c.metadata.as_str()));
        let bytes = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bytes(back.get("a").unwrap()), bytes(c.get("a").unwrap()));
        assert_eq!(back.get("b").unwrap().to_vec1::<f64>().unwrap(), vec![0.1, 1.0 / 3.0]);
        assert_eq!(back.get("s").unwrap().dims(), &[] as &[usize]);
        assert_eq!(back.tensors.keys().collect::<Vec<_>>(), c.tensors.keys().collect::<Vec<_>>());
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, std::fs::read(&p).unwrap());
        assert!(!p.with_extension("ckpt.tmp").exists());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let mut c = Checkpoint::new(1, "d", "{}");
        c.insert("a", &Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap()).unwrap();
        c.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
    }
}
