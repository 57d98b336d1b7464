//! Flat little-endian arrays.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_u32(path: &Path, values: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_words(path: &Path, expected: Option<usize>) -> Result<Vec<[u8; 4]>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::CacheInvalid(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / 4;
    if let Some(e) = expected {
        if e != n {
            return Err(Error::CacheInvalid(format!(
                "{}: expected {e} values, found {n}",
                path.display()
            )));
        }
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

pub fn read_u32(path: &Path, expected: Option<usize>) -> Result<Vec<u32>> {
    Ok(read_words(path, expected)?
        .into_iter()
        .map(u32::from_le_bytes)
        .collect())
}

pub fn read_f32(path: &Path, expected: Option<usize>) -> Result<Vec<f32>> {
    Ok(read_words(path, expected)?
        .into_iter()
        .map(f32::from_le_bytes)
        .collect())
}
