//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "PSCAPSCK"
//! version    u32      1
//! head       u8       0 = ps, 1 = fc, 2 = cnn
//! in_ch      u8
//! classes    u16
//! census     u32 row count, then per row: u16 name length, name, u64 scalars
//! params     u32 count, then per tensor: u16 name length, name, u8 rank,
//!            rank x u32 dims, f32 values
//! bn stats   u32 count, then per layer: u16 name length, name, u32 channels,
//!            f32 running means, f32 running variances
//! ```
//!
//! Loading rebuilds the model from the header and refuses files whose census
//! differs from the rebuilt model's.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::archnet::{HeadKind, Model, ModelConfig};
use crate::backend::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSCAPSCK";
const VERSION: u32 = 1;

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
    out.extend_from_slice(name.as_bytes());
}

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let w = &mut out;
    w.write_u32::<LittleEndian>(VERSION).unwrap();
    w.write_u8(model.config.head.code()).unwrap();
    w.write_u8(model.config.in_channels as u8).unwrap();
    w.write_u16::<LittleEndian>(model.config.classes as u16).unwrap();

    let census = model.census();
    w.write_u32::<LittleEndian>(census.len() as u32).unwrap();
    for (name, count) in &census {
        write_name(w, name);
        w.write_u64::<LittleEndian>(*count as u64).unwrap();
    }

    w.write_u32::<LittleEndian>(model.store.len() as u32).unwrap();
    for (_, p) in model.store.iter() {
        write_name(w, &p.name);
        w.write_u8(p.value.rank() as u8).unwrap();
        for &d in p.value.shape() {
            w.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &v in p.value.data() {
            w.write_f32::<LittleEndian>(v).unwrap();
        }
    }

    w.write_u32::<LittleEndian>(model.bn_stats.len() as u32).unwrap();
    for (name, stats) in &model.bn_stats {
        write_name(w, name);
        w.write_u32::<LittleEndian>(stats.mean.len() as u32).unwrap();
        for &v in stats.mean.iter().chain(&stats.var) {
            w.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    out
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn fail(&self, msg: impl std::fmt::Display) -> Error {
        Error::Checkpoint(format!("{msg} (at byte {})", self.cur.position()))
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.fail("truncated"))
    }

    fn u16(&mut self) -> Result<u16> {
        self.cur.read_u16::<LittleEndian>().map_err(|_| self.fail("truncated"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| self.fail("truncated"))
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LittleEndian>().map_err(|_| self.fail("truncated"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut v = vec![0.0; n];
        self.cur.read_f32_into::<LittleEndian>(&mut v).map_err(|_| self.fail("truncated"))?;
        Ok(v)
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let mut buf = vec![0; len];
        self.cur.read_exact(&mut buf).map_err(|_| self.fail("truncated"))?;
        String::from_utf8(buf).map_err(|_| self.fail("name is not UTF-8"))
    }
}

/// Reads only the header.
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    let mut magic = [0u8; 8];
    r.cur.read_exact(&mut magic).map_err(|_| r.fail("truncated"))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let code = r.u8()?;
    let head = HeadKind::from_code(code).ok_or_else(|| r.fail(format!("unknown head code {code}")))?;
    let in_channels = r.u8()? as usize;
    let classes = r.u16()? as usize;
    ModelConfig::new(head, in_channels, classes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let config = peek_config(bytes)?;
    let mut model = Model::new(config, 0);
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    r.cur.set_position(16);

    let rows = r.u32()? as usize;
    let mut census = Vec::with_capacity(rows);
    for _ in 0..rows {
        census.push((r.name()?, r.u64()? as usize));
    }
    if census != model.census() {
        return Err(Error::Checkpoint(format!(
            "census mismatch: file lists {} layers / {} parameters, a {} model with {} input channels has {} / {}",
            census.len(),
            census.iter().map(|c| c.1).sum::<usize>(),
            config.head,
            config.in_channels,
            model.census().len(),
            model.count_parameters()
        )));
    }

    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(r.fail(format!("{count} tensors, model has {}", model.store.len())));
    }
    for _ in 0..count {
        let name = r.name()?;
        let id = model.store.find(&name).ok_or_else(|| r.fail(format!("unknown tensor '{name}'")))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let param = model.store.get_mut(id);
        if dims != param.value.shape() {
            return Err(r.fail(format!("tensor '{name}' has shape {dims:?}, expected {:?}", param.value.shape())));
        }
        let n = param.numel();
        param.value = Tensor::from_vec(&dims, r.f32s(n)?)?;
    }

    let count = r.u32()? as usize;
    if count != model.bn_stats.len() {
        return Err(r.fail(format!("{count} BN layers, model has {}", model.bn_stats.len())));
    }
    for _ in 0..count {
        let name = r.name()?;
        let channels = r.u32()? as usize;
        let values = r.f32s(2 * channels)?;
        let (_, stats) = model
            .bn_stats
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown BN layer '{name}'")))?;
        if stats.mean.len() != channels {
            return Err(Error::Checkpoint(format!("BN layer '{name}' has {channels} channels")));
        }
        stats.mean.copy_from_slice(&values[..channels]);
        stats.var.copy_from_slice(&values[channels..]);
    }
    if (r.cur.position() as usize) != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&to_bytes(model)))
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
