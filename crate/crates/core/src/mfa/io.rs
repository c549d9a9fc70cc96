//! `MFA1` model files.
//!
//! Little-endian layout: magic `b"MFA1"`, `u32 n`, `u32 l`, `u32 k`, then `k` records of
//! `f64 weight`, `n × f64 mean`, `n·l × f64 loadings` (column-major), `n × f64 noise`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{FactorAnalyzer, MfaModel, WEIGHT_SUM_TOL};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MFA1";

pub fn write_model_to<W: Write>(model: &MfaModel, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for v in [model.dim(), model.rank(), model.num_components()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (c, &p) in model.components().iter().zip(model.weights()) {
        w.write_all(&p.to_le_bytes())?;
        let values = c
            .mean()
            .iter()
            .chain(c.loadings().as_slice())
            .chain(c.noise().iter());
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn write_model(model: &MfaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model_to(model, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Reads a model; `origin` is only used in error messages.
pub fn read_model_from<R: Read>(mut r: R, origin: &Path) -> Result<MfaModel> {
    let truncated = |_| Error::format(origin, "truncated model file");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format(origin, "bad magic, expected MFA1"));
    }
    let mut u32_buf = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut u32_buf).map_err(truncated)?;
        *d = u32::from_le_bytes(u32_buf) as usize;
    }
    let [n, l, k] = dims;
    if n == 0 || k == 0 {
        return Err(Error::format(
            origin,
            format!("invalid dimensions n={n}, k={k}"),
        ));
    }
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let mut components = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for _ in 0..k {
        weights.push(read_f64s(1)?[0]);
        let mean = DVector::from_vec(read_f64s(n)?);
        let loadings = DMatrix::from_vec(n, l, read_f64s(n * l)?);
        let noise = DVector::from_vec(read_f64s(n)?);
        components.push(
            FactorAnalyzer::new(mean, loadings, noise)
                .map_err(|e| Error::format(origin, e.to_string()))?,
        );
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(origin, e))? != 0 {
        return Err(Error::format(origin, "trailing bytes after last component"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::format(origin, format!("weights sum to {total}")));
    }
    MfaModel::new(components, weights).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<MfaModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model_from(BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MfaModel {
        let a = FactorAnalyzer::new(
            DVector::from_vec(vec![0.1, 0.2, 0.3]),
            DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            DVector::from_vec(vec![0.5, 0.25, 0.125]),
        )
        .unwrap();
        let b = FactorAnalyzer::point_mass(DVector::from_vec(vec![-1.0, 0.0, 1.0]), 2).unwrap();
        MfaModel::new(vec![a, b], vec![0.25, 0.75]).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model_to(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 2 * (8 + 8 * (3 + 6 + 3)));
        assert_eq!(&buf[..4], b"MFA1");
        assert_eq!(&buf[4..8], &3u32.to_le_bytes());
        let back = read_model_from(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn loader_rejects_corruption() {
        let m = model();
        let mut buf = Vec::new();
        write_model_to(&m, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_model_from(bad_magic.as_slice(), Path::new("mem")).is_err());

        let truncated = &buf[..buf.len() - 3];
        assert!(read_model_from(truncated, Path::new("mem")).is_err());

        let mut bad_weight = buf.clone();
        bad_weight[16..24].copy_from_slice(&0.5f64.to_le_bytes());
        let err = read_model_from(bad_weight.as_slice(), Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("weights sum"), "{err}");

        assert!(read_model_from(&[][..], Path::new("mem")).is_err());
    }
}
