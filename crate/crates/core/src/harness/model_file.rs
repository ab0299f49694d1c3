//! Binary model files.
//!
//! Layout, all little-endian:
//!
//! | offset | field |
//! |-------:|-------|
//! | 0  | magic `HDN1` |
//! | 4  | u32 format version (1) |
//! | 8  | u32 input_dim |
//! | 12 | u32 hidden_dim |
//! | 16 | u32 num_layers |
//! | 20 | u32 output_dim |
//! | 24 | u32 architecture (0 plain, 1 highway) |
//! | 28 | u32 gate flags (bit 0 transform, bit 1 carry, bit 2 constrained) |
//! | 32 | u64 parameter count |
//! | 40 | f64 values of every parameter array in declaration order |

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::network::{param_count, Architecture, GateConfig, ModelConfig, Parameters};

pub const MAGIC: [u8; 4] = *b"HDN1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 40;

fn gate_flags(config: &ModelConfig) -> u32 {
    match config.gates() {
        None => 0,
        Some(g) => g.transform_enabled as u32 | (g.carry_enabled as u32) << 1 | (g.constrained as u32) << 2,
    }
}

pub fn encode_model(params: &Parameters<f64>, config: &ModelConfig) -> Result<Vec<u8>> {
    config.validate()?;
    params.check_config(config)?;
    let count = param_count(config);
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 8 * count);
    out.write_all(&MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    for dim in [
        config.input_dim,
        config.hidden_dim,
        config.num_layers,
        config.output_dim,
    ] {
        let v = u32::try_from(dim).map_err(|_| Error::Config(format!("dimension {dim} exceeds u32")))?;
        out.write_u32::<LittleEndian>(v)?;
    }
    out.write_u32::<LittleEndian>(config.is_highway() as u32)?;
    out.write_u32::<LittleEndian>(gate_flags(config))?;
    out.write_u64::<LittleEndian>(count as u64)?;
    for (_, values) in params.arrays() {
        for &v in values {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(out)
}

fn format_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<(Parameters<f64>, ModelConfig)> {
    let mut cur = Cursor::new(bytes);
    let truncated = |at: u64| format_err(at, "file truncated");
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| truncated(0))?;
    if magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}")));
    }
    let mut header = [0u32; 7];
    for (i, h) in header.iter_mut().enumerate() {
        *h = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated(4 + 4 * i as u64))?;
    }
    let [version, input, hidden, layers, output, arch, flags] = header;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let architecture = match (arch, flags) {
        (0, 0) => Architecture::PlainDnn,
        (1, f) if f < 8 => Architecture::Highway(
            GateConfig::new(f & 1 != 0, f & 2 != 0, f & 4 != 0).map_err(|e| format_err(28, e.to_string()))?,
        ),
        (0 | 1, f) => return Err(format_err(28, format!("bad gate flags {f:#x}"))),
        (a, _) => return Err(format_err(24, format!("unknown architecture code {a}"))),
    };
    let config = ModelConfig {
        input_dim: input as usize,
        hidden_dim: hidden as usize,
        num_layers: layers as usize,
        output_dim: output as usize,
        architecture,
    };
    config.validate().map_err(|e| format_err(8, e.to_string()))?;
    let count = cur.read_u64::<LittleEndian>().map_err(|_| truncated(32))?;
    let expected = param_count(&config) as u64;
    if count != expected {
        return Err(format_err(
            32,
            format!("parameter count {count} does not match {expected} implied by the header"),
        ));
    }
    let available = bytes.len() as u64 - HEADER_LEN;
    if available < 8 * count {
        return Err(format_err(bytes.len() as u64, "file truncated"));
    }
    if available > 8 * count {
        return Err(format_err(HEADER_LEN + 8 * count, "trailing bytes after parameters"));
    }
    let mut params = Parameters::<f64>::zeros(&config);
    for (_, values) in params.arrays_mut() {
        for v in values.iter_mut() {
            *v = cur.read_f64::<LittleEndian>()?;
        }
    }
    Ok((params, config))
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path`.
pub fn save_model(path: &Path, params: &Parameters<f64>, config: &ModelConfig) -> Result<()> {
    let bytes = encode_model(params, config)?;
    write_atomic(path, &bytes)
}

pub fn load_model(path: &Path) -> Result<(Parameters<f64>, ModelConfig)> {
    decode_model(&std::fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;

    fn sample() -> (Parameters<f64>, ModelConfig) {
        let config = ModelConfig::highway(3, 4, 3, 5, GateConfig::BOTH);
        (init_params(&config, 9).unwrap(), config)
    }

    #[test]
    fn round_trip_is_bitwise() {
        for config in [
            ModelConfig::plain(3, 4, 2, 5),
            ModelConfig::highway(3, 4, 3, 5, GateConfig::TRANSFORM_ONLY),
            ModelConfig::highway(3, 4, 3, 5, GateConfig::CARRY_ONLY),
            ModelConfig::highway(3, 4, 3, 5, GateConfig::CONSTRAINED),
        ] {
            let params = init_params::<f64>(&config, 4).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.hdnn");
            save_model(&path, &params, &config).unwrap();
            let (back, back_cfg) = load_model(&path).unwrap();
            assert_eq!(back_cfg, config);
            assert!(back.bits_equal(&params));
            assert_eq!(
                std::fs::metadata(&path).unwrap().len(),
                HEADER_LEN + 8 * param_count(&config) as u64
            );
        }
    }

    #[test]
    fn corrupted_magic_reports_offset_zero() {
        let (p, c) = sample();
        let mut bytes = encode_model(&p, &c).unwrap();
        bytes[1] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn count_mismatch_and_truncation() {
        let (p, c) = sample();
        let good = encode_model(&p, &c).unwrap();
        let mut bad = good.clone();
        bad[32] ^= 1;
        assert!(matches!(decode_model(&bad), Err(Error::Format { offset: 32, .. })));
        let short = &good[..good.len() - 3];
        assert!(matches!(decode_model(short), Err(Error::Format { .. })));
        assert!(matches!(
            decode_model(&good[..10]),
            Err(Error::Format { offset: 8, .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(Error::Format { .. })));
        let mut version = good;
        version[4] = 9;
        assert!(matches!(decode_model(&version), Err(Error::Format { offset: 4, .. })));
    }
}
