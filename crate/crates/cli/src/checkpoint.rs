//! Trained-network container.
//!
//! Layout, little-endian: magic `SRGDCKPT`, version u16, experiment and
//! setting strings (u16 length + utf8), training seed u64, architecture
//! (levels u16, width count u16 + u32 each, leaky slope f64), parameter
//! count u32, then each parameter as name string, h u32, w u32, c u16, and
//! the f64 payload. Bit-stable: saving the same network twice yields
//! identical bytes.

use crate::{CliError, CliResult};
use srgd_core::model::{ArchConfig, RegNet};
use srgd_core::Grid;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SRGDCKPT";
const VERSION: u16 = 1;

/// Provenance carried alongside the weights so `eval` can label its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub experiment: String,
    pub setting: String,
    pub seed: u64,
}

fn push_str(buf: &mut Vec<u8>, s: &str) -> CliResult<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(CliError::Data(format!("string '{}' too long for checkpoint", s)));
    }
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::Data(format!("{}: truncated checkpoint", self.path)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> CliResult<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CliError::Data(format!("{}: invalid utf8 in checkpoint", self.path)))
    }
}

pub fn save_checkpoint(path: &Path, net: &RegNet, meta: &CheckpointMeta) -> CliResult<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    push_str(&mut buf, &meta.experiment)?;
    push_str(&mut buf, &meta.setting)?;
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    buf.extend_from_slice(&(net.arch.levels as u16).to_le_bytes());
    buf.extend_from_slice(&(net.arch.widths.len() as u16).to_le_bytes());
    for &w in &net.arch.widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&net.arch.leaky_slope.to_le_bytes());
    buf.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for (name, p) in net.named_params() {
        push_str(&mut buf, name)?;
        let (h, w, c) = p.value.shape();
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(w as u32).to_le_bytes());
        buf.extend_from_slice(&(c as u16).to_le_bytes());
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))
}

pub fn load_checkpoint(path: &Path) -> CliResult<(RegNet, CheckpointMeta)> {
    let buf =
        fs::read(path).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    let mut r = Reader { buf: &buf, pos: 0, path: path.display().to_string() };
    if r.take(8)? != MAGIC {
        return Err(CliError::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CliError::Data(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            version
        )));
    }
    let experiment = r.string()?;
    let setting = r.string()?;
    let seed = r.u64()?;
    let levels = r.u16()? as usize;
    let n_widths = r.u16()? as usize;
    let mut widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        widths.push(r.u32()? as usize);
    }
    let leaky_slope = r.f64()?;
    let arch = ArchConfig { levels, widths, leaky_slope };
    let n_params = r.u32()? as usize;
    let mut parts = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u16()? as usize;
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w * c {
            data.push(r.f64()?);
        }
        parts.push((name, Grid::from_vec(h, w, c, data).map_err(CliError::from)?));
    }
    if r.pos != buf.len() {
        return Err(CliError::Data(format!("{}: trailing bytes", path.display())));
    }
    let net = RegNet::from_parts(&arch, parts).map_err(CliError::from)?;
    Ok((net, CheckpointMeta { experiment, setting, seed }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use srgd_core::model::regnet_init;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("srgd-checkpoint-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_restores_weights_and_meta() {
        let arch = ArchConfig { levels: 2, widths: vec![3, 4], leaky_slope: 0.2 };
        let net = regnet_init(&arch, 42).unwrap();
        let meta = CheckpointMeta {
            experiment: "artifact".into(),
            setting: "ours".into(),
            seed: 7,
        };
        let p = tmp("net.ckpt");
        save_checkpoint(&p, &net, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&p).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.arch.widths, arch.widths);
        for (a, b) in net.params.iter().zip(&back.params) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let arch = ArchConfig { levels: 1, widths: vec![2], leaky_slope: 0.2 };
        let net = regnet_init(&arch, 3).unwrap();
        let meta =
            CheckpointMeta { experiment: "mask".into(), setting: "masked".into(), seed: 0 };
        let (p1, p2) = (tmp("a.ckpt"), tmp("b.ckpt"));
        save_checkpoint(&p1, &net, &meta).unwrap();
        save_checkpoint(&p2, &net, &meta).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let p = tmp("bad.ckpt");
        fs::write(&p, b"SRGDCKPT junk").unwrap();
        assert!(load_checkpoint(&p).is_err());

        let arch = ArchConfig { levels: 1, widths: vec![2], leaky_slope: 0.2 };
        let net = regnet_init(&arch, 3).unwrap();
        let meta = CheckpointMeta { experiment: "x".into(), setting: "y".into(), seed: 0 };
        save_checkpoint(&p, &net, &meta).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.push(0);
        fs::write(&p, bytes).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
