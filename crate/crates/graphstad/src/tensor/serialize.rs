//! Tensor blob format shared by checkpoints and map files.
//!
//! Layout (little endian): magic `GSTN`, u32 version = 1, u32 rank,
//! u32 extents[rank], u8 dtype (0 = f32, 1 = f64), raw element data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dtype, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GSTN";
const VERSION: u32 = 1;

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> std::io::Result<()> {
    write_blob(w, t.shape(), &t.data())
}

pub fn write_blob<S: Scalar, W: Write>(w: &mut W, shape: &[usize], data: &[S]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    w.write_all(&[S::DTYPE as u8])?;
    match S::DTYPE {
        Dtype::F32 => {
            for v in data {
                w.write_all(&(v.to_f32().unwrap()).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for v in data {
                w.write_all(&(v.to_f64().unwrap()).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read a blob, converting the stored dtype to `S` if they differ.
pub fn read_blob<S: Scalar, R: Read>(r: &mut R) -> std::io::Result<(Vec<usize>, Vec<S>)> {
    let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic, not a tensor blob"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != VERSION {
        return Err(bad("unsupported tensor blob version"));
    }
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype[0] {
        0 => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(S::c(f32::from_le_bytes(buf) as f64));
            }
        }
        1 => {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(S::c(f64::from_le_bytes(buf)));
            }
        }
        _ => return Err(bad("unknown dtype tag")),
    }
    Ok((shape, data))
}

pub fn write_tensor_file<S: Scalar>(path: &Path, shape: &[usize], data: &[S]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_blob(&mut w, shape, data).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file<S: Scalar>(path: &Path) -> Result<(Vec<usize>, Vec<S>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    read_blob(&mut r).map_err(|e| Error::io(path, e))
}
