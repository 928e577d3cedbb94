//! Little-endian tensor container.
//!
//! ```text
//! "ASPD"            4 bytes
//! version           u32 (currently 1)
//! entry count       u32
//! per entry:
//!   name length     u32, then that many UTF-8 bytes
//!   rank            u32, then one u32 per extent
//!   values          f64 × product(extents)
//! ```
//! Values are always stored as f64 whatever the in-memory element type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::{ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ASPD";
pub const FORMAT_VERSION: u32 = 1;

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

pub fn write_tensors<'a, T: Scalar + 'a, W: Write>(
    w: &mut W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> std::io::Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let put = |buf: &mut Vec<u8>, n: usize| {
        let v = u32::try_from(n).map_err(|_| std::io::Error::other("value exceeds u32"))?;
        buf.extend_from_slice(&v.to_le_bytes());
        Ok::<_, std::io::Error>(())
    };
    put(&mut buf, entries.len())?;
    for (name, t) in entries {
        put(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put(&mut buf, t.shape().len())?;
        for &e in t.shape() {
            put(&mut buf, e)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        w.write_all(&buf)?;
        buf.clear();
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<T: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated values for {name:?}: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name:?}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_params<T: Scalar>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    u32_of(params.len(), "entry count")?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensors(&mut w, params.iter()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_tensors(&mut BufReader::new(f))?;
    let mut store = ParamStore::new();
    for (n, t) in entries {
        store.insert(n, t)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[2], vec![1.0f64, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("ab", &t)]).unwrap();
        let mut want = b"ASPD".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, want);
        let back: Vec<(String, Tensor<f64>)> = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_tensors::<f64, _>(&mut &b"ASPX\x01\0\0\0\0\0\0\0"[..]).is_err());
        assert!(read_tensors::<f64, _>(&mut &b"ASPD\x02\0\0\0\0\0\0\0"[..]).is_err());
        assert!(read_tensors::<f64, _>(&mut &b"ASPD\x01\0\0\0\x01\0\0\0"[..]).is_err());
    }
}
