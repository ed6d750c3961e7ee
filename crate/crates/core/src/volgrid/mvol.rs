//! MVOL on-disk format.
//!
//! Layout (little-endian):
//!
//! | field   | type      |
//! |---------|-----------|
//! | magic   | `b"MVOL"` |
//! | version | u32 = 1   |
//! | kind    | u8        |
//! | dims    | 3 × u32   |
//! | spacing | 3 × f64   |
//! | origin  | 3 × f64   |
//! | values  | nx·ny·nz × f32, x fastest |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Grid, Kind, Volume3D};
use crate::error::{Error, Result};

pub const MVOL_MAGIC: &[u8; 4] = b"MVOL";
pub const MVOL_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 1 + 12 + 24 + 24;

pub fn write_mvol_to(v: &Volume3D, w: &mut impl Write) -> Result<()> {
    let g = v.grid();
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MVOL_MAGIC);
    header.extend_from_slice(&MVOL_VERSION.to_le_bytes());
    header.push(v.kind().code());
    for d in g.dims {
        let d = u32::try_from(d).map_err(|_| Error::MalformedFile(format!("dim {d} exceeds u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    for s in g.spacing {
        header.extend_from_slice(&s.to_le_bytes());
    }
    for o in g.origin {
        header.extend_from_slice(&o.to_le_bytes());
    }
    w.write_all(&header)?;
    let mut body = Vec::with_capacity(v.len() * 4);
    for &x in v.values() {
        body.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&body)?;
    Ok(())
}

pub fn read_mvol_from(r: &mut impl Read) -> Result<Volume3D> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::MalformedFile(format!("short header: {e}")))?;
    if &header[0..4] != MVOL_MAGIC {
        return Err(Error::MalformedFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != MVOL_VERSION {
        return Err(Error::MalformedFile(format!("unsupported version {version}")));
    }
    let kind = Kind::from_code(header[8])
        .ok_or_else(|| Error::MalformedFile(format!("unknown kind code {}", header[8])))?;
    let mut off = 9;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = u32::from_le_bytes(header[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
    }
    let mut f64s = [0f64; 6];
    for x in f64s.iter_mut() {
        *x = f64::from_le_bytes(header[off..off + 8].try_into().unwrap());
        off += 8;
    }
    let grid = Grid::new(
        dims,
        [f64s[0], f64s[1], f64s[2]],
        [f64s[3], f64s[4], f64s[5]],
    )
    .map_err(|e| Error::MalformedFile(e.to_string()))?;
    let n = grid.len();
    let mut body = vec![0u8; n * 4];
    r.read_exact(&mut body)
        .map_err(|e| Error::MalformedFile(format!("truncated values: {e}")))?;
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume3D::new(grid, kind, values).map_err(|e| Error::MalformedFile(e.to_string()))
}

pub fn write_mvol(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mvol_to(v, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Volume3D> {
    let mut r = BufReader::new(File::open(path)?);
    read_mvol_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kind_strategy() -> impl Strategy<Value = Kind> {
        prop_oneof![
            Just(Kind::Suv),
            Just(Kind::Hu),
            Just(Kind::Label),
            Just(Kind::Prob)
        ]
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            kind in kind_strategy(),
            dims in (1usize..5, 1usize..5, 1usize..5),
            spacing in (0.1f64..9.0, 0.1f64..9.0, 0.1f64..9.0),
            origin in (-500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0),
            seed in any::<u64>(),
        ) {
            let grid = Grid::new([dims.0, dims.1, dims.2], [spacing.0, spacing.1, spacing.2], [origin.0, origin.1, origin.2]).unwrap();
            let mut s = seed;
            let values: Vec<f32> = (0..grid.len()).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if kind == Kind::Label { ((s >> 40) % 9) as f32 } else { f32::from_bits((s >> 32) as u32 & 0x7f7f_ffff) * if s & 1 == 0 { 1.0 } else { -1.0 } }
            }).collect();
            let v = Volume3D::new(grid, kind, values).unwrap();
            let mut buf = Vec::new();
            write_mvol_to(&v, &mut buf).unwrap();
            prop_assert_eq!(buf.len(), HEADER_LEN + 4 * v.len());
            let back = read_mvol_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.grid(), v.grid());
            prop_assert_eq!(back.kind(), v.kind());
            let bits_a: Vec<u32> = back.values().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = v.values().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn header_layout() {
        let g = Grid::new([2, 1, 1], [3.0; 3], [1.0, 2.0, 3.0]).unwrap();
        let v = Volume3D::new(g, Kind::Hu, vec![-1000.0, 40.0]).unwrap();
        let mut buf = Vec::new();
        write_mvol_to(&v, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"MVOL");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(buf[8], 1);
        assert_eq!(&buf[9..13], &2u32.to_le_bytes());
        assert_eq!(&buf[21..29], &3.0f64.to_le_bytes());
        assert_eq!(&buf[45..53], &1.0f64.to_le_bytes());
        assert_eq!(&buf[69..73], &(-1000.0f32).to_le_bytes());
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            read_mvol_from(&mut &b"MVO"[..]),
            Err(Error::MalformedFile(_))
        ));
        let g = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3D::filled(g, Kind::Suv, 1.0).unwrap();
        let mut buf = Vec::new();
        write_mvol_to(&v, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_mvol_from(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_mvol_from(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_mvol_from(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 1];
        assert!(read_mvol_from(&mut &truncated[..]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mvol");
        let g = Grid::new([3, 2, 1], [3.0; 3], [0.5; 3]).unwrap();
        let v = Volume3D::from_fn(g, Kind::Suv, |[x, y, _]| x as f32 * 0.1 + y as f32).unwrap();
        write_mvol(&v, &p).unwrap();
        assert_eq!(read_mvol(&p).unwrap(), v);
    }
}
