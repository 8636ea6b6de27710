//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TMNCKPT\0"
//! version  u32      CHECKPOINT_VERSION
//! dtype    u8       4 = f32, 8 = f64
//! count    u32      number of tensors
//! count x {
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims u64 x rank
//!   data     product(dims) elements of dtype, row-major
//! }
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.num_elements() * T::BYTES + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, tensor) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in tensor.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(invalid("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint, converting stored values to `T` when the stored
/// precision differs.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> io::Result<ParamStore<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(invalid("not a checkpoint file (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(format!("unsupported checkpoint version {version}")));
    }
    let dtype = cur.take(1)?[0];
    if dtype != 4 && dtype != 8 {
        return Err(invalid(format!("unknown dtype tag {dtype}")));
    }
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| invalid("parameter name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * dtype as usize)?;
        let data: Vec<T> = if dtype == 4 {
            raw.chunks(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect()
        } else {
            raw.chunks(8).map(|c| T::from_f64(f64::read_le(c))).collect()
        };
        let tensor = Tensor::new(&shape, data).map_err(|e| invalid(e.to_string()))?;
        store.add(name, tensor).map_err(|e| invalid(e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(invalid("trailing bytes after checkpoint"));
    }
    Ok(store)
}

pub fn write_checkpoint<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(store))?;
    f.flush()
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> io::Result<ParamStore<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_store() -> ParamStore<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        s.add("enc.b", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample_store();
        let back: ParamStore<f32> = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
        assert_eq!(back.len(), 2);
        for (id, name, t) in s.iter() {
            assert_eq!(back.name(id), name);
            assert_eq!(back.get(id), t);
        }
    }

    #[test]
    fn header_layout_is_stable() {
        let bytes = encode_checkpoint(&sample_store());
        assert_eq!(&bytes[..8], b"TMNCKPT\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], 4);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        // name_len + "enc.w" + rank + 2 dims + 12 f32 + second tensor.
        let first = 4 + 5 + 4 + 16 + 12 * 4;
        let second = 4 + 5 + 4 + 8 + 4 * 4;
        assert_eq!(bytes.len(), 17 + first + second);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode_checkpoint(&sample_store());
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_checkpoint::<f32>(&bytes).is_err());
    }

    #[test]
    fn widens_to_f64() {
        let s = sample_store();
        let wide: ParamStore<f64> = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
        let id = wide.id("enc.b").unwrap();
        assert_eq!(wide.get(id).data()[0], s.get(id).data()[0] as f64);
    }
}
