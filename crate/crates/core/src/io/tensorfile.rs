//! Binary tensor container: a fixed prefix (magic "KRCT", rank, dtype tag,
//! two reserved zero bytes) followed by rank little-endian u32 dims and the
//! row-major payload. dtype 0 is f32, dtype 1 is f64; values promote to f64
//! in memory. For a rank-2 tensor the header is exactly 16 bytes.

use crate::error::{KrcError, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"KRCT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

fn format_err(path: &Path, detail: impl Into<String>) -> KrcError {
    KrcError::Format { path: path.to_path_buf(), detail: detail.into() }
}

pub fn write_tensor_to(w: &mut impl Write, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[tensor.rank() as u8, dtype as u8, 0, 0])?;
    for d in tensor.shape() {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for v in tensor.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor_from(r: &mut impl Read, path: &Path) -> Result<Tensor> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(|e| format_err(path, format!("short header: {e}")))?;
    if &head[..4] != MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", &head[..4])));
    }
    let rank = head[4] as usize;
    let dtype = match head[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(format_err(path, format!("unknown dtype tag {other}"))),
    };
    if rank == 0 || rank > 8 {
        return Err(format_err(path, format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| format_err(path, format!("short dims: {e}")))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(|e| format_err(path, format!("short payload: {e}")))?;
            for c in buf.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        Dtype::F64 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(|e| format_err(path, format!("short payload: {e}")))?;
            for c in buf.chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
    }
    Tensor::from_vec(shape, data)
}

pub fn save_tensor(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor_to(&mut buf, tensor, dtype)?;
    crate::io::atomic_write(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| format_err(path, e.to_string()))?;
    read_tensor_from(&mut bytes.as_slice(), path)
}
