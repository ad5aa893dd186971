//! Little-endian binary encoding of f64 arrays.

use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const ARRAY_MAGIC: &[u8; 8] = b"VCDARR\0\0";

/// Appends raw values (no header) in standard layout.
pub fn put_values(out: &mut Vec<u8>, a: &ArrayD<f64>) {
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn take_values(bytes: &[u8], shape: &[usize]) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    if bytes.len() != 8 * n {
        return Err(Error::Checkpoint(format!(
            "payload of {} bytes does not hold shape {shape:?}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
}

/// Self-describing single-array file: magic, ndim (u32), dims (u64 each),
/// values.
pub fn write_array(w: &mut impl Write, a: &ArrayD<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * a.ndim() + 8 * a.len());
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    put_values(&mut buf, a);
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_array(r: &mut impl Read) -> Result<ArrayD<f64>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != ARRAY_MAGIC {
        return Err(Error::Corpus("not an array file".into()));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dims_end = 12 + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Corpus("truncated array header".into()));
    }
    let shape: Vec<usize> = bytes[12..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    take_values(&bytes[dims_end..], &shape).map_err(|e| Error::Corpus(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip() {
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64 - 0.5);
        let mut buf = Vec::new();
        write_array(&mut buf, &a).unwrap();
        assert_eq!(read_array(&mut buf.as_slice()).unwrap(), a);
        buf[0] = b'x';
        assert!(read_array(&mut buf.as_slice()).is_err());
    }
}
