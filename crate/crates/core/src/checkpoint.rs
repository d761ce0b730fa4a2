//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"DWMT"  u32 version
//! repeated until end of file:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank × u64 dims
//!   product(dims) × f64 values, row-major
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DWMT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(buf: &[u8], pos: &mut usize) -> Result<[u8; N]> {
    let end = *pos + N;
    let bytes = buf
        .get(*pos..end)
        .ok_or_else(|| Error::Format(format!("truncated at byte {}", *pos)))?;
    *pos = end;
    Ok(bytes.try_into().expect("slice length"))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    if take::<4>(&buf, &mut pos)? != *MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&buf, &mut pos)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut params = ParamStore::new();
    while pos < buf.len() {
        let len = u32::from_le_bytes(take(&buf, &mut pos)?) as usize;
        let name = buf
            .get(pos..pos + len)
            .ok_or_else(|| Error::Format("truncated name".into()))?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        pos += len;
        let rank = u32::from_le_bytes(take(&buf, &mut pos)?) as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(take(&buf, &mut pos)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| Ok(f64::from_le_bytes(take(&buf, &mut pos)?)))
            .collect::<Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let mut out = Vec::new();
        let mut ps = ParamStore::new();
        ps.insert("a", Tensor::vector(vec![1.0]).unwrap());
        write_checkpoint(&mut out, &ps).unwrap();
        assert_eq!(&out[..4], b"DWMT");
        assert_eq!(&out[4..8], &[1, 0, 0, 0]);
        assert_eq!(&out[8..12], &[1, 0, 0, 0]);
        assert_eq!(out[12], b'a');
        assert_eq!(&out[out.len() - 8..], &1.0f64.to_le_bytes());
        assert_eq!(out.len(), 4 + 4 + 4 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn roundtrip_and_errors() {
        let mut ps = ParamStore::new();
        ps.insert(
            "w",
            Tensor::matrix(2, 3, vec![0.1, -2.0, 3.5, 1e-300, -0.0, 7.0]).unwrap(),
        );
        ps.insert("s", Tensor::scalar(4.25));
        let mut out = Vec::new();
        write_checkpoint(&mut out, &ps).unwrap();
        let back = read_checkpoint(&out[..]).unwrap();
        assert_eq!(back, ps);

        assert!(read_checkpoint(&out[..out.len() - 3]).is_err());
        let mut bad = out.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format(_))));
    }
}
