//! The L2SG binary grid format.
//!
//! Layout: magic `L2SG`, version byte `0x01`, dtype byte (`0` = u8 labels,
//! `1` = f32, `2` = f64), ndim byte, `ndim` little-endian u32 extents, then
//! the row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{numel, Grid, LabelMap};

pub const MAGIC: &[u8; 4] = b"L2SG";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    U8 = 0,
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Dtype::U8),
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridFile {
    Labels { shape: Vec<usize>, labels: Vec<u8> },
    Values { dtype: Dtype, grid: Grid },
}

fn header(dtype: Dtype, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::invalid("too many dimensions for L2SG"));
    }
    let mut out = Vec::with_capacity(7 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_grid(grid: &Grid, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = header(dtype, grid.shape())?;
    match dtype {
        Dtype::F64 => grid.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => grid
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::U8 => return Err(Error::invalid("use encode_labels for u8 payloads")),
    }
    Ok(out)
}

pub fn encode_labels(map: &LabelMap) -> Result<Vec<u8>> {
    let mut out = header(Dtype::U8, &map.shape())?;
    out.extend_from_slice(map.labels());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<GridFile, String> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err("missing L2SG magic".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let dtype = Dtype::from_byte(bytes[5]).ok_or_else(|| format!("unknown dtype {}", bytes[5]))?;
    let ndim = bytes[6] as usize;
    let body = 7 + 4 * ndim;
    if ndim == 0 || bytes.len() < body {
        return Err("truncated header".into());
    }
    let shape: Vec<usize> = bytes[7..body]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = numel(&shape);
    let payload = &bytes[body..];
    if payload.len() != n * dtype.width() {
        return Err(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            n * dtype.width()
        ));
    }
    let values: Vec<f64> = match dtype {
        Dtype::U8 => {
            return Ok(GridFile::Labels {
                shape,
                labels: payload.to_vec(),
            })
        }
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let grid = Grid::new(shape, values).map_err(|e| e.to_string())?;
    Ok(GridFile::Values { dtype, grid })
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_grid(path: impl AsRef<Path>, grid: &Grid, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_grid(grid, dtype)?)?;
    Ok(())
}

pub fn write_labels(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    fs::write(path, encode_labels(map)?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<GridFile> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|r| format_err(path, r))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    match read_file(path)? {
        GridFile::Values { grid, .. } => Ok(grid),
        GridFile::Labels { .. } => Err(format_err(path, "expected float payload, found labels")),
    }
}

pub fn read_labels(path: impl AsRef<Path>, classes: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    match read_file(path)? {
        GridFile::Labels { shape, labels } => match shape.as_slice() {
            [h, w] => LabelMap::new(*h, *w, classes, labels),
            _ => Err(format_err(path, "label maps must be 2-D")),
        },
        GridFile::Values { .. } => Err(format_err(path, "expected u8 labels")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let g = Grid::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode_grid(&g, Dtype::F64).unwrap();
        assert_eq!(&b[..7], &[b'L', b'2', b'S', b'G', 1, 2, 2]);
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[15..23], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 15 + 16);

        let m = LabelMap::new(1, 3, 4, vec![3, 0, 1]).unwrap();
        let b = encode_labels(&m).unwrap();
        assert_eq!(&b[..7], &[b'L', b'2', b'S', b'G', 1, 0, 2]);
        assert_eq!(&b[15..], &[3, 0, 1]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE\x01\x02\x01\x01\x00\x00\x00").is_err());
        assert!(decode(b"L2SG\x02\x02\x01\x01\x00\x00\x00").is_err());
        assert!(decode(b"L2SG\x01\x07\x01\x01\x00\x00\x00").is_err());
        // one f64 declared, three bytes supplied
        assert!(decode(b"L2SG\x01\x02\x01\x01\x00\x00\x00abc").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::from_fn(&[2, 3, 4], |i| i as f64 * 0.25 - 1.0);
        let p = dir.path().join("g.l2s");
        write_grid(&p, &g, Dtype::F32).unwrap();
        assert_eq!(read_grid(&p).unwrap(), g);
        let m = LabelMap::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let q = dir.path().join("m.l2s");
        write_labels(&q, &m).unwrap();
        assert_eq!(read_labels(&q, 3).unwrap(), m);
        assert!(read_grid(&q).is_err());
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_bitwise(shape in prop::collection::vec(1usize..5, 1..4),
                                    vals in prop::collection::vec(-1e6f64..1e6, 64)) {
            let n = numel(&shape);
            let g = Grid::new(shape, vals[..n].to_vec()).unwrap();
            let back = decode(&encode_grid(&g, Dtype::F64).unwrap()).unwrap();
            prop_assert_eq!(back, GridFile::Values { dtype: Dtype::F64, grid: g });
        }
    }
}
