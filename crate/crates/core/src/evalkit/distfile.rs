//! Binary distance-matrix dumps: four little-endian `u32` header words
//! (magic, version, rows, cols) followed by row-major little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DIST_MAGIC: u32 = u32::from_le_bytes(*b"MFDM");
pub const DIST_VERSION: u32 = 1;

pub fn write_matrix_to(mut out: impl Write, m: &Array2<f64>) -> Result<()> {
    let (rows, cols) = m.dim();
    let rows = u32::try_from(rows).map_err(|_| Error::Shape("too many rows for a dump".into()))?;
    let cols = u32::try_from(cols).map_err(|_| Error::Shape("too many columns for a dump".into()))?;
    for word in [DIST_MAGIC, DIST_VERSION, rows, cols] {
        out.write_all(&word.to_le_bytes())?;
    }
    for v in m.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_from(mut input: impl Read) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::parse(0, "distance dump shorter than its header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != DIST_MAGIC {
        return Err(Error::parse(0, "bad distance dump magic"));
    }
    if word(1) != DIST_VERSION {
        return Err(Error::parse(0, format!("unsupported distance dump version {}", word(1))));
    }
    let (rows, cols) = (word(2) as usize, word(3) as usize);
    let body = &bytes[16..];
    if body.len() != rows * cols * 8 {
        return Err(Error::parse(0, format!("{rows}x{cols} dump needs {} payload bytes, found {}", rows * cols * 8, body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    write_matrix_to(std::io::BufWriter::new(std::fs::File::create(path)?), m)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_matrix_from(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &array![[1.5, -2.0, 0.25]]).unwrap();
        assert_eq!(&buf[..4], b"MFDM");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &3u32.to_le_bytes());
        assert_eq!(&buf[16..24], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 16 + 24);
        assert_eq!(read_matrix_from(&buf[..]).unwrap(), array![[1.5, -2.0, 0.25]]);
    }

    #[test]
    fn rejects_truncated_and_foreign() {
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &array![[1.0, 2.0]]).unwrap();
        assert!(read_matrix_from(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_matrix_from(&buf[..]).is_err());
    }
}
