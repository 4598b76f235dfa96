//! Binary checkpoint container: fixed magic, version byte, then
//! length-prefixed named entries of (shape, raw little-endian f32 data).
//! Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DVLMCKPT";
pub const VERSION: u8 = 1;

pub fn write_to<W: Write>(w: &mut W, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_from<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", ver[0])));
    }
    let n = read_u32(r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non-utf8 name".into()))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save<P: AsRef<Path>>(path: P, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(&mut f, entries)
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<BTreeMap<String, Tensor>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_from(&mut f)
}

/// Packs raw bytes into a `[len]` tensor (one byte per f32 value) so
/// non-tensor state can ride in the same container.
pub fn bytes_to_tensor(bytes: &[u8]) -> Tensor {
    Tensor::new(vec![bytes.len().max(1)], {
        if bytes.is_empty() {
            vec![0.0]
        } else {
            bytes.iter().map(|&b| b as f32).collect()
        }
    })
    .expect("length matches by construction")
}

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v > 255.0 || v.fract() != 0.0 {
                Err(Error::Format("tensor does not encode bytes".into()))
            } else {
                Ok(v as u8)
            }
        })
        .collect()
}
