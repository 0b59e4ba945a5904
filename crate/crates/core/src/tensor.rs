//! Binary tensor container.
//!
//! Layout: magic `TNSR`, version byte, dtype code (0 = f32, 1 = f64,
//! 2 = i32), ndim byte, `ndim` u64 little-endian extents, then the
//! row-major little-endian payload. Collections of named tensors are
//! described by a JSON sidecar manifest pointing at individual files.

use crate::error::{Error, Result};
use ndarray::{ArrayD, ArrayViewD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;

/// A tensor of any of the supported dtypes.
#[derive(Debug, Clone)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I32(ArrayD<i32>),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
            Tensor::I32(a) => a.shape(),
        }
    }

    /// Unwraps an f64 tensor, the dtype used throughout this crate.
    pub fn expect_f64(self) -> Result<ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a),
            other => Err(Error::CorruptFile(format!(
                "expected f64 tensor, found {}",
                other.dtype_name()
            ))),
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            Tensor::F32(_) => "f32",
            Tensor::F64(_) => "f64",
            Tensor::I32(_) => "i32",
        }
    }
}

fn dtype_code(t: &Tensor) -> u8 {
    match t {
        Tensor::F32(_) => 0,
        Tensor::F64(_) => 1,
        Tensor::I32(_) => 2,
    }
}

/// Writes a tensor to `path`.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype_code(tensor), tensor.shape().len() as u8])?;
    for &dim in tensor.shape() {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    match tensor {
        Tensor::F32(a) => {
            for &v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::F64(a) => {
            for &v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::I32(a) => {
            for &v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Convenience writer for the crate's native dtype.
pub fn write_tensor_f64(path: &Path, view: ArrayViewD<f64>) -> Result<()> {
    write_tensor(path, &Tensor::F64(view.to_owned()))
}

/// Reads a tensor from `path`, validating magic, version, and size.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|_| Error::CorruptFile(format!("{}: truncated header", path.display())))?;
    if &head[0..4] != MAGIC {
        return Err(Error::CorruptFile(format!("{}: bad magic", path.display())));
    }
    if head[4] != VERSION {
        return Err(Error::CorruptFile(format!(
            "{}: unsupported version {}",
            path.display(),
            head[4]
        )));
    }
    let dtype = head[5];
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|_| Error::CorruptFile(format!("{}: truncated shape", path.display())))?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let count: usize = shape.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let expect = |elem: usize| -> Result<()> {
        if payload.len() != count * elem {
            return Err(Error::CorruptFile(format!(
                "{}: payload is {} bytes, expected {}",
                path.display(),
                payload.len(),
                count * elem
            )));
        }
        Ok(())
    };
    let dyn_shape = IxDyn(&shape);
    match dtype {
        0 => {
            expect(4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::F32(ArrayD::from_shape_vec(dyn_shape, data).unwrap()))
        }
        1 => {
            expect(8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::F64(ArrayD::from_shape_vec(dyn_shape, data).unwrap()))
        }
        2 => {
            expect(4)?;
            let data: Vec<i32> = payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::I32(ArrayD::from_shape_vec(dyn_shape, data).unwrap()))
        }
        other => Err(Error::CorruptFile(format!(
            "{}: unknown dtype code {other}",
            path.display()
        ))),
    }
}

/// Reads a tensor and requires the f64 dtype.
pub fn read_tensor_f64(path: &Path) -> Result<ArrayD<f64>> {
    read_tensor(path)?.expect_f64()
}
