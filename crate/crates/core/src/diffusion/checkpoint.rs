//! TCKPT binary checkpoints.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "TCKPT" version record_count
//! record*: name_len name rank dims[rank] f64[prod(dims)] fnv1a64(payload bytes)
//! ```
//!
//! The first record is `meta/dims` holding channels, heads, rank, blocks,
//! feed-forward width, grid height, grid width and the completed stage. Every
//! tensor follows as `group/tensor` in group order.

use super::params::{fnv1a64, DenoiserParams, Group, ModelDims};
use crate::attention::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"TCKPT";
pub const VERSION: u32 = 1;
const META: &str = "meta/dims";

struct Record {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn write_record(out: &mut Vec<u8>, name: &str, dims: &[usize], values: impl Iterator<Item = f64>) {
    push_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    push_u32(out, dims.len());
    for &d in dims {
        push_u32(out, d);
    }
    let start = out.len();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = fnv1a64(&out[start..]);
    out.extend_from_slice(&digest.to_le_bytes());
}

pub fn to_bytes(p: &DenoiserParams) -> Vec<u8> {
    let d = p.dims;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION as usize);
    let count = 1 + Group::ALL
        .iter()
        .map(|&g| p.tensors(g).len())
        .sum::<usize>();
    push_u32(&mut out, count);
    let meta = [
        d.channels,
        d.heads,
        d.rank,
        d.blocks,
        d.ff_hidden,
        d.grid_h,
        d.grid_w,
        p.trained_stage as usize,
    ];
    write_record(
        &mut out,
        META,
        &[meta.len()],
        meta.iter().map(|&v| v as f64),
    );
    for g in Group::ALL {
        for (name, t) in p.tensors(g) {
            let (r, c) = t.dim();
            write_record(
                &mut out,
                &format!("{}/{name}", g.name()),
                &[r, c],
                t.iter().copied(),
            );
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32("name length")?;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32("rank")?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "{name}: implausible rank {rank}"
            )));
        }
        let dims = (0..rank)
            .map(|_| self.u32("dims"))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: payload size overflows")))?;
        let payload = self.take(count, &name)?;
        let digest = u64::from_le_bytes(self.take(8, "digest")?.try_into().unwrap());
        if fnv1a64(payload) != digest {
            return Err(Error::Checkpoint(format!("{name}: digest mismatch")));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Record { name, dims, values })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<DenoiserParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5, "magic")? != MAGIC {
        return Err(Error::Checkpoint("missing TCKPT magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")?;
    let meta = r.record()?;
    if meta.name != META || meta.dims != [8] {
        return Err(Error::Checkpoint(format!("first record must be {META}")));
    }
    let m: Vec<usize> = meta
        .values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Checkpoint(format!("bad meta value {v}")))
            }
        })
        .collect::<Result<_>>()?;
    let dims = ModelDims {
        channels: m[0],
        heads: m[1],
        rank: m[2],
        blocks: m[3],
        ff_hidden: m[4],
        grid_h: m[5],
        grid_w: m[6],
    };
    dims.validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut p = DenoiserParams::init(dims, 0)?;
    p.trained_stage = m[7] as u32;

    let expected = 1 + Group::ALL
        .iter()
        .map(|&g| p.tensors(g).len())
        .sum::<usize>();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "{count} records, expected {expected}"
        )));
    }
    for g in Group::ALL {
        for (name, t) in p.tensors_mut(g) {
            let full = format!("{}/{name}", g.name());
            let rec = r.record()?;
            if rec.name != full {
                return Err(Error::Checkpoint(format!(
                    "expected record {full}, found {}",
                    rec.name
                )));
            }
            let (rows, cols) = t.dim();
            if rec.dims != [rows, cols] {
                return Err(Error::Checkpoint(format!(
                    "{full}: shape {:?}, expected [{rows}, {cols}]",
                    rec.dims
                )));
            }
            *t = Matrix::from_shape_vec((rows, cols), rec.values).expect("shape checked");
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(p)
}
