//! `.wts` weights files.
//!
//! Layout (little-endian): magic "MMWT", version u8, count u32, then per
//! parameter: name length u16, UTF-8 name, rank u8, one u32 per extent, and
//! the values as 32-bit floats.

use std::io::{Read, Write};
use std::path::Path;

use super::{shape_err, Module, NeuralError, Parameter, Result, Scalar, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MMWT";
const WEIGHTS_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn write_weights<T: Scalar>(mut w: impl Write, params: &[&Parameter<T>]) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&[WEIGHTS_VERSION])?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&[shape.len() as u8])?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(data: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if data.len() < n {
        return Err(NeuralError::BadWeights("unexpected end of file".into()));
    }
    let (head, tail) = data.split_at(n);
    *data = tail;
    Ok(head)
}

pub fn read_weights(mut r: impl Read) -> Result<Vec<NamedTensor>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut data = &buf[..];
    if take(&mut data, 4)? != WEIGHTS_MAGIC {
        return Err(NeuralError::BadWeights("bad magic".into()));
    }
    let version = take(&mut data, 1)?[0];
    if version != WEIGHTS_VERSION {
        return Err(NeuralError::BadWeights(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut data, 4)?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut data, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut data, len)?)
            .map_err(|e| NeuralError::BadWeights(format!("parameter name: {e}")))?
            .to_string();
        let rank = take(&mut data, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut data, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let values = take(&mut data, 4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, values)?,
        });
    }
    if !data.is_empty() {
        return Err(NeuralError::BadWeights(format!("{} trailing bytes", data.len())));
    }
    Ok(out)
}

/// Copies every parameter of `module` from `weights`, matched by name.
pub fn load_into<T: Scalar, M: Module<T> + ?Sized>(
    module: &mut M,
    weights: &[NamedTensor],
) -> Result<()> {
    for p in module.params_mut() {
        let src = weights
            .iter()
            .find(|w| w.name == p.name)
            .ok_or_else(|| NeuralError::MissingParameter(p.name.clone()))?;
        if src.tensor.shape() != p.value.shape() {
            return Err(shape_err(
                "load weights",
                format!(
                    "{}: file {:?}, model {:?}",
                    p.name,
                    src.tensor.shape(),
                    p.value.shape()
                ),
            ));
        }
        p.value = src.tensor.cast();
        p.zero_grad();
    }
    Ok(())
}

pub fn save_module<T: Scalar, M: Module<T> + ?Sized>(module: &M, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(&mut buf, &module.params())?;
    std::fs::write(path, buf)?;
    Ok(())
}
