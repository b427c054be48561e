//! Little-endian f64 array files used for preprocessing and feature outputs.
//!
//! ```text
//! "CSTN"        4 bytes magic
//! version       u16 (= 1)
//! ndim          u16
//! dims          ndim x u64
//! data          prod(dims) x f64, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CSTN";
pub const VERSION: u16 = 1;

pub fn encode_array(array: &ArrayD<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + array.ndim() * 8 + array.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(array.ndim() as u16).to_le_bytes());
    for &d in array.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8]) -> Result<ArrayD<f64>> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let data_start = 8 + ndim * 8;
    if bytes.len() < data_start {
        return Err(Error::TruncatedHeader);
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|k| u64::from_le_bytes(bytes[8 + k * 8..16 + k * 8].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != data_start + n * 8 {
        return Err(Error::Shape(format!(
            "payload has {} bytes, shape {:?} needs {}",
            bytes.len() - data_start,
            shape,
            n * 8
        )));
    }
    let data = bytes[data_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_array(array: &ArrayD<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_array(array))?;
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    decode_array(&fs::read(path)?)
}
