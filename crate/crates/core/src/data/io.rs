//! Flat dataset files: `ZOFD1`, then `N`, `d`, `C` as little-endian `u64`, then
//! `N·d` little-endian `f64` values row-major, then `N` little-endian `u32` labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::task::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::net::{read_f64s, write_f64s};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"ZOFD1";

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    for v in [ds.len(), ds.dim(), ds.classes()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    write_f64s(&mut w, ds.x.data())?;
    let mut buf = Vec::with_capacity(ds.len() * 4);
    for &y in &ds.y {
        let y = u32::try_from(y).map_err(|_| Error::invalid(format!("label {y} does not fit in u32")))?;
        buf.extend_from_slice(&y.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("missing dataset header: {e}")))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a ZOFD1 dataset file".into()));
    }
    let mut dims = [0usize; 3];
    for v in dims.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated dataset header: {e}")))?;
        *v = usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("dimension overflow".into()))?;
    }
    let [n, d, c] = dims;
    let len = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("dataset size overflow".into()))?;
    let x = read_f64s(&mut r, len)?;
    let mut lb = vec![0u8; n * 4];
    r.read_exact(&mut lb)
        .map_err(|e| Error::Format(format!("truncated label block: {e}")))?;
    let y = lb
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after label block".into()));
    }
    let meta = DatasetMeta { seed: 0, d, classes: c, domain: "external".into(), severity: 0 };
    Dataset::new(Tensor::new(vec![n, d], x)?, y, meta).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
