//! `TLM1` checkpoint format, all integers little-endian:
//!
//! ```text
//! "TLM1"
//! u32 n_layers, u32 hidden_dim, u32 n_heads, u32 context_len, u32 vocab_size
//! u64 seed
//! u64 n_params
//! n_params × f32   (order documented in the model module)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{LmConfig, LmError, LossRecord, TinyLm};

const MAGIC: &[u8; 4] = b"TLM1";
const HEADER_LEN: usize = 4 + 5 * 4 + 8 + 8;

pub fn save_checkpoint(model: &TinyLm, path: &Path) -> Result<(), LmError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        w.write_all(MAGIC)?;
        w.write_all(&model.config().to_bytes())?;
        w.write_all(&(model.num_params() as u64).to_le_bytes())?;
        for p in model.params() {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| LmError::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TinyLm, LmError> {
    let bad = |message: String| LmError::Checkpoint { path: path.display().to_string(), message };
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic, expected TLM1".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let config = LmConfig {
        n_layers: u32_at(4),
        hidden_dim: u32_at(8),
        n_heads: u32_at(12),
        context_len: u32_at(16),
        vocab_size: u32_at(20),
        seed: u64_at(24),
    };
    let n = u64_at(32) as usize;
    let expected = HEADER_LEN + n * 4;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let params = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    TinyLm::from_params(config, params)
}

pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<(), LmError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LmError::Io(std::io::Error::other(e)))?;
    for r in history {
        w.serialize(r).map_err(|e| LmError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>, LmError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| LmError::Io(std::io::Error::other(e)))?;
    r.deserialize().collect::<Result<Vec<LossRecord>, _>>().map_err(|e| LmError::Io(std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rounds_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tlm");
        let cfg = LmConfig { n_layers: 2, hidden_dim: 8, n_heads: 2, context_len: 12, vocab_size: 257, seed: 11 };
        let m = TinyLm::new(cfg.clone()).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), &cfg);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(*b, f64::from(*a as f32));
        }
        assert_eq!(back.digest(), m.digest());
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, HEADER_LEN + 4 * m.num_params());
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"TLM2aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(LmError::Checkpoint { .. })));
        let cfg = LmConfig { n_layers: 1, hidden_dim: 4, n_heads: 1, context_len: 4, vocab_size: 257, seed: 0 };
        save_checkpoint(&TinyLm::new(cfg).unwrap(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(LmError::Checkpoint { .. })));
    }

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let h = vec![
            LossRecord { step: 0, loss: 12.5, per_token_loss: 2.5, lr: 1e-3 },
            LossRecord { step: 1, loss: 10.0, per_token_loss: 2.0, lr: 5e-4 },
        ];
        write_loss_csv(&h, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,loss,per_token_loss,lr\n"));
        assert_eq!(read_loss_csv(&path).unwrap(), h);
    }
}
