//! `KRN1` kernel files.
//!
//! Little-endian layout: magic `b"KRN1"`, `u32` F, C, kh, kw, stride_h, stride_w, pad_h, pad_w,
//! then `F·C·kh·kw` f64 weights (row-major) and `F` f64 biases.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::KernelStack;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KRN1";

pub fn write_kernels_to<W: Write>(k: &KernelStack, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    let (kh, kw) = k.kernel_size();
    let (sh, sw) = k.stride();
    let (ph, pw) = k.padding();
    for v in [k.filters(), k.channels(), kh, kw, sh, sw, ph, pw] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in k.weights().iter().chain(k.bias()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn write_kernels(k: &KernelStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_kernels_to(k, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_kernels_from<R: Read>(mut r: R, origin: &Path) -> Result<KernelStack> {
    let truncated = |_| Error::format(origin, "truncated kernel file");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format(origin, "bad magic, expected KRN1"));
    }
    let mut header = [0usize; 8];
    let mut buf = [0u8; 4];
    for h in header.iter_mut() {
        r.read_exact(&mut buf).map_err(truncated)?;
        *h = u32::from_le_bytes(buf) as usize;
    }
    let [f, c, kh, kw, sh, sw, ph, pw] = header;
    let count = f
        .checked_mul(c)
        .and_then(|v| v.checked_mul(kh))
        .and_then(|v| v.checked_mul(kw))
        .filter(|&v| v <= 1 << 28)
        .ok_or_else(|| Error::format(origin, "kernel dimensions too large"))?;
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let weights = read_f64s(count)?;
    let bias = read_f64s(f)?;
    KernelStack::new(f, c, kh, kw, weights, bias, (sh, sw), (ph, pw))
        .map_err(|e| Error::format(origin, e.to_string()))
}

pub fn read_kernels(path: impl AsRef<Path>) -> Result<KernelStack> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_kernels_from(BufReader::new(file), path)
}
