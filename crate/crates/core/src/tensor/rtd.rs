//! Raw tensor dump ("RTD1"): 8-byte magic `RTDUMP01`, little-endian `u32`
//! rank, `rank` little-endian `u32` dims, then row-major little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel_of, Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RTDUMP01";

pub fn encode<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(v.to_wide() as f32).to_le_bytes());
    }
    buf
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Dump(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode<T: Float>(mut bytes: &[u8]) -> Result<Tensor<T>> {
    if take(&mut bytes, 8, "magic")? != MAGIC {
        return Err(Error::Dump("bad magic".into()));
    }
    let rank = read_u32(&mut bytes, "rank")? as usize;
    if rank == 0 {
        return Err(Error::Dump("rank must be positive".into()));
    }
    let shape = (0..rank)
        .map(|_| read_u32(&mut bytes, "dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = numel_of(&shape);
    let payload = take(&mut bytes, 4 * n, "payload")?;
    if !bytes.is_empty() {
        return Err(Error::Dump(format!("{} trailing bytes", bytes.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_wide(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn write<T: Float>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Float>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::<f32>::new([1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let mut expected = b"RTDUMP01".to_vec();
        expected.extend([2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode::<f32>(&bytes).unwrap(), t);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let t = Tensor::<f32>::ones([3]).unwrap();
        let bytes = encode(&t);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }
}
