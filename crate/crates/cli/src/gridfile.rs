//! Single-grid binary container and a lossy PGM export.
//!
//! Layout, all little-endian: magic `SRGD`, version u16, height u32, width
//! u32, channels u16, dtype u8 (0 = f64, 1 = u8), then the payload in
//! row-major (y, x, channel) order. Round-trips are bit-exact: f64 values
//! pass through untouched, and the u8 dtype refuses any grid that is not
//! already integral in 0..=255.

use crate::{CliError, CliResult};
use srgd_core::Grid;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SRGD";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    U8,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::U8 => 1,
        }
    }

    fn from_tag(tag: u8) -> CliResult<Dtype> {
        match tag {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::U8),
            other => Err(CliError::Data(format!("unknown grid dtype tag {}", other))),
        }
    }
}

pub fn write_grid(path: &Path, g: &Grid, dtype: Dtype) -> CliResult<()> {
    let (h, w, c) = g.shape();
    if h > u32::MAX as usize || w > u32::MAX as usize || c > u16::MAX as usize {
        return Err(CliError::Data(format!("grid {}x{}x{} exceeds header range", h, w, c)));
    }
    let mut buf = Vec::with_capacity(16 + g.numel() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u16).to_le_bytes());
    buf.push(dtype.tag());
    match dtype {
        Dtype::F64 => {
            for &v in g.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::U8 => {
            for &v in g.data() {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(CliError::Data(format!(
                        "value {} does not fit the u8 dtype",
                        v
                    )));
                }
                buf.push(v as u8);
            }
        }
    }
    fs::write(path, buf).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))
}

pub fn read_grid(path: &Path) -> CliResult<Grid> {
    let buf =
        fs::read(path).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    let fail = |m: &str| CliError::Data(format!("{}: {}", path.display(), m));
    if buf.len() < 17 || &buf[0..4] != MAGIC {
        return Err(fail("not a grid file"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {}", version)));
    }
    let h = u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
    let w = u32::from_le_bytes([buf[10], buf[11], buf[12], buf[13]]) as usize;
    let c = u16::from_le_bytes([buf[14], buf[15]]) as usize;
    let dtype = Dtype::from_tag(buf[16])?;
    let numel = h * w * c;
    let payload = &buf[17..];
    let data: Vec<f64> = match dtype {
        Dtype::F64 => {
            if payload.len() != numel * 8 {
                return Err(fail("payload length does not match header"));
            }
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect()
        }
        Dtype::U8 => {
            if payload.len() != numel {
                return Err(fail("payload length does not match header"));
            }
            payload.iter().map(|&b| b as f64).collect()
        }
    };
    Grid::from_vec(h, w, c, data).map_err(CliError::from)
}

/// 8-bit PGM of channel 0, min-max scaled. For eyeballing only; the
/// scaling makes it lossy and nothing reads it back.
pub fn write_pgm(path: &Path, g: &Grid) -> CliResult<()> {
    let (h, w, _) = g.shape();
    let (lo, hi) = (g.min(), g.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut f = fs::File::create(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    let mut buf = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    for y in 0..h {
        for x in 0..w {
            buf.push((255.0 * (g.get(y, x, 0) - lo) / span).round() as u8);
        }
    }
    f.write_all(&buf)?;
    Ok(())
}
