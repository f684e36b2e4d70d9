//! Versioned binary snapshots of model parameters, optimizer buffers, RNG
//! position, and the epoch counter.
//!
//! Layout: magic "DAGN", u32 version, then two tensor sections (model
//! parameters, optimizer buffers), each a u32 count followed by framed
//! records: u16 name length, name bytes, u8 dtype tag (0 = f32, 1 = f64),
//! u8 rank, rank u32 dims, raw little-endian payload. After the optimizer
//! section come the two step counters (u64 each), the RNG snapshot (32-byte
//! seed, u64 stream, u128 word position), and a u32 epoch. All integers are
//! little-endian. Every length is validated on load, and the file must end
//! exactly at the epoch field, so save -> load -> save is byte-identical.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DAGN";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;
const MAX_NAME: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub params: Vec<(String, Tensor<T>)>,
    pub opt: Vec<(String, Tensor<T>)>,
    pub t_g: u64,
    pub t_d: u64,
    pub rng: RngSnapshot,
    pub epoch: u32,
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for section in [&ckpt.params, &ckpt.opt] {
        out.extend_from_slice(&(section.len() as u32).to_le_bytes());
        for (name, t) in section {
            put_tensor(&mut out, name, t);
        }
    }
    out.extend_from_slice(&ckpt.t_g.to_le_bytes());
    out.extend_from_slice(&ckpt.t_d.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.seed);
    out.extend_from_slice(&ckpt.rng.stream.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::CkptTruncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn get_tensor<T: Scalar>(r: &mut Reader, index: usize) -> Result<(String, Tensor<T>)> {
    let framing = |name: &str, detail: String| Error::CkptFraming {
        index,
        name: name.to_string(),
        detail,
    };
    let name_len = r.u16("tensor name length")? as usize;
    if name_len == 0 || name_len > MAX_NAME {
        return Err(framing("?", format!("name length {name_len} out of range")));
    }
    if r.at + name_len > r.bytes.len() {
        return Err(framing(
            "?",
            format!("name length {name_len} overruns the file at offset {}", r.at),
        ));
    }
    let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
        .map_err(|_| framing("?", "name is not utf-8".into()))?
        .to_string();
    let tag = r.take(1, "dtype tag")?[0];
    let dtype = Dtype::from_tag(tag).ok_or_else(|| framing(&name, format!("unknown dtype tag {tag}")))?;
    if dtype != T::DTYPE {
        return Err(framing(
            &name,
            format!("stored as {dtype:?}, expected {:?}", T::DTYPE),
        ));
    }
    let rank = r.take(1, "rank")?[0] as usize;
    if rank > MAX_RANK {
        return Err(framing(&name, format!("rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for i in 0..rank {
        let d = r.u32("dimension")? as usize;
        if d == 0 {
            return Err(framing(&name, format!("dimension {i} is zero")));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| framing(&name, "element count overflows".into()))?;
        shape.push(d);
    }
    let payload_len = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| framing(&name, "payload length overflows".into()))?;
    if r.at + payload_len > r.bytes.len() {
        return Err(framing(
            &name,
            format!(
                "payload of {payload_len} bytes overruns the file at offset {}",
                r.at
            ),
        ));
    }
    let raw = r.take(payload_len, "payload")?;
    let size = dtype.size();
    let data = (0..numel).map(|i| T::read_le(&raw[i * size..])).collect();
    Ok((name, Tensor::from_vec(shape, data)?))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CkptMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CkptVersion(version));
    }
    let mut sections = Vec::with_capacity(2);
    for what in ["parameter count", "optimizer tensor count"] {
        let count = r.u32(what)? as usize;
        let mut section = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            section.push(get_tensor::<T>(&mut r, i)?);
        }
        sections.push(section);
    }
    let opt = sections.pop().unwrap();
    let params = sections.pop().unwrap();
    let t_g = r.u64("generator step counter")?;
    let t_d = r.u64("discriminator step counter")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng word position")?.try_into().unwrap());
    let epoch = r.u32("epoch")?;
    if r.at != bytes.len() {
        return Err(Error::CkptFraming {
            index: params.len() + opt.len(),
            name: "<tail>".into(),
            detail: format!("{} trailing bytes after the epoch field", bytes.len() - r.at),
        });
    }
    Ok(Checkpoint {
        params,
        opt,
        t_g,
        t_d,
        rng: RngSnapshot { seed, stream, word_pos },
        epoch,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}
