//! RTEN v1 tensor file format.
//!
//! Layout, all little-endian:
//!   magic `RTEN` | u8 version=1 | u8 dtype (0 = f32) | u8 ndim | pad byte |
//!   ndim × u32 extents | row-major f32 payload

use std::io::{Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"RTEN";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

fn format_err(detail: impl Into<String>) -> TensorError {
    TensorError::Rten {
        detail: detail.into(),
    }
}

pub fn write_rten_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let ndim = t.shape().len();
    if ndim > u8::MAX as usize {
        return Err(format_err(format!("too many dimensions: {ndim}")));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F32, ndim as u8, 0])?;
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(format_err(format!("extent {d} exceeds u32")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_rten_from(r: &mut impl Read) -> Result<Tensor> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(|_| format_err("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(format_err("bad magic"));
    }
    if head[4] != VERSION {
        return Err(format_err(format!("unsupported version {}", head[4])));
    }
    if head[5] != DTYPE_F32 {
        return Err(format_err(format!("unsupported dtype {}", head[5])));
    }
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| format_err("truncated extents"))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|_| format_err("truncated payload"))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::new(data, shape))
}

pub fn write_rten(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_rten_to(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn read_rten(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_rten_from(&mut f)
}
