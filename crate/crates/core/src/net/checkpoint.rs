//! Flat binary net checkpoints.
//!
//! Layout: magic `"SRNN1"`, a little-endian u32 count of shape words, the
//! shape words themselves (dim, level-embed, pos-embed, hidden, trunk
//! layers, head layers, output-kind code, head-flag bitmask), a little-
//! endian u64 parameter count, then every parameter as a little-endian f64
//! in the canonical flatten order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{DenoiserNet, NetConfig};
use crate::paradigm::PredictionKind;

pub const MAGIC: &[u8; 5] = b"SRNN1";

fn kind_code(kind: PredictionKind) -> u32 {
    match kind {
        PredictionKind::Epsilon => 0,
        PredictionKind::X0 => 1,
        PredictionKind::V => 2,
        PredictionKind::U => 3,
    }
}

fn kind_from_code(code: u32) -> Result<PredictionKind> {
    Ok(match code {
        0 => PredictionKind::Epsilon,
        1 => PredictionKind::X0,
        2 => PredictionKind::V,
        3 => PredictionKind::U,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown output-kind code {other}"
            )))
        }
    })
}

pub fn save<P: AsRef<Path>>(net: &DenoiserNet, path: P) -> Result<()> {
    let cfg = net.config();
    let shape: [u32; 8] = [
        cfg.dim as u32,
        cfg.level_embed as u32,
        cfg.pos_embed as u32,
        cfg.hidden as u32,
        cfg.trunk_layers as u32,
        cfg.head_layers as u32,
        kind_code(cfg.output_kind),
        (cfg.uncertainty_head as u32) | ((cfg.variance_interp_head as u32) << 1),
    ];
    let params = net.flatten_params();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(shape.len() as u32).to_le_bytes())?;
    for word in shape {
        out.write_all(&word.to_le_bytes())?;
    }
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<DenoiserNet> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let n_shape = u32::from_le_bytes(u32buf) as usize;
    if n_shape != 8 {
        return Err(Error::Checkpoint(format!(
            "expected 8 shape words, found {n_shape}"
        )));
    }
    let mut shape = [0u32; 8];
    for word in shape.iter_mut() {
        file.read_exact(&mut u32buf)?;
        *word = u32::from_le_bytes(u32buf);
    }
    let cfg = NetConfig {
        dim: shape[0] as usize,
        level_embed: shape[1] as usize,
        pos_embed: shape[2] as usize,
        hidden: shape[3] as usize,
        trunk_layers: shape[4] as usize,
        head_layers: shape[5] as usize,
        output_kind: kind_from_code(shape[6])?,
        uncertainty_head: shape[7] & 1 != 0,
        variance_interp_head: shape[7] & 2 != 0,
    };
    let mut u64buf = [0u8; 8];
    file.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;

    let mut net = DenoiserNet::new(cfg, 0)?;
    if count != net.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match the declared shape ({})",
            net.param_count()
        )));
    }
    let mut params = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for _ in 0..count {
        file.read_exact(&mut f64buf)?;
        let v = f64::from_le_bytes(f64buf);
        if !v.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        params.push(v);
    }
    if file.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    net.set_params(&params)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetConfig {
        NetConfig {
            dim: 2,
            level_embed: 4,
            pos_embed: 6,
            hidden: 5,
            trunk_layers: 2,
            head_layers: 1,
            output_kind: PredictionKind::V,
            uncertainty_head: true,
            variance_interp_head: false,
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.srnn");
        let net = DenoiserNet::new(cfg(), 123).unwrap();
        save(&net, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config(), net.config());
        assert_eq!(loaded.flatten_params(), net.flatten_params());
    }

    #[test]
    fn file_starts_with_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.srnn");
        save(&DenoiserNet::new(cfg(), 1).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"SRNN1"));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.srnn");
        save(&DenoiserNet::new(cfg(), 1).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.srnn");
        std::fs::write(&path, b"NOPE!rest").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
