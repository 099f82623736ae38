//! Versioned flat-binary parameter files.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32` layer count,
//! `u32` tensor count, then per tensor `u32` rank followed by `u32` extents,
//! then every tensor's `f64` data in declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nfhybrid_autodiff::Tensor;

use crate::codec;
use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub fn write_tensors(
    w: &mut impl Write,
    magic: &[u8; 8],
    layers: usize,
    tensors: &[&Tensor],
) -> Result<()> {
    w.write_all(magic)?;
    codec::put_u32(w, VERSION)?;
    codec::put_u32(w, layers as u32)?;
    codec::put_u32(w, tensors.len() as u32)?;
    for t in tensors {
        codec::put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            codec::put_u32(w, d as u32)?;
        }
    }
    for t in tensors {
        codec::put_f64s(w, t.data())?;
    }
    Ok(())
}

/// Returns the layer count and the tensors.
pub fn read_tensors(
    r: &mut impl Read,
    magic: &[u8; 8],
    what: &'static str,
) -> Result<(usize, Vec<Tensor>)> {
    codec::expect_magic(r, magic, what)?;
    codec::expect_version(r, VERSION, what)?;
    let layers = codec::get_u32(r)? as usize;
    let count = codec::get_u32(r)? as usize;
    let mut shapes = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rank = codec::get_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Format {
                what,
                msg: format!("tensor rank {rank}"),
            });
        }
        let shape = (0..rank)
            .map(|_| codec::get_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format {
                what,
                msg: format!("tensor shape {shape:?} overflows"),
            })?;
        let data = codec::get_f64s(r, n)?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format {
            what,
            msg: e.to_string(),
        })?);
    }
    codec::expect_eof(r, what)?;
    Ok((layers, tensors))
}

pub(crate) fn save_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn load_file<T>(path: &Path, f: impl FnOnce(&mut BufReader<File>) -> Result<T>) -> Result<T> {
    let mut r = BufReader::new(File::open(path)?);
    f(&mut r)
}
