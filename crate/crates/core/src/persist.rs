//! Binary container for small trained models: an 8-byte magic, a version,
//! a JSON header and a sequence of length-prefixed little-endian f64 arrays.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::encoder::read_f64s;
use crate::error::{Error, Result};

const VERSION: u32 = 1;

pub(crate) fn save_blob<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    arrays: &[&[f64]],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let json = serde_json::to_vec(header)?;
    let write = |w: &mut BufWriter<std::fs::File>| -> std::io::Result<()> {
        w.write_all(magic)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(arrays.len() as u32).to_le_bytes())?;
        for a in arrays {
            w.write_all(&(a.len() as u64).to_le_bytes())?;
            for x in a.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub(crate) fn load_blob<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<Vec<f64>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(io)?;
    if &m != magic {
        return Err(Error::BadParamFile(format!("{}: bad magic", path.display())));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::BadParamFile(format!("{}: unsupported version {version}", path.display())));
    }
    r.read_exact(&mut b8).map_err(io)?;
    let json_len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(io)?;
    let header: H = serde_json::from_slice(&json)?;
    r.read_exact(&mut b4).map_err(io)?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8).map_err(io)?;
        let len = u64::from_le_bytes(b8) as usize;
        let a = read_f64s(&mut r, len).map_err(io)?;
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::BadParamFile(format!("{}: non-finite parameter", path.display())));
        }
        arrays.push(a);
    }
    Ok((header, arrays))
}
