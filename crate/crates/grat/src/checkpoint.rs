//! Versioned binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes        "GRAT"
//! version  u32            currently 1
//! cfg_len  u32            byte length of the embedded config text
//! cfg      cfg_len bytes  UTF-8 run configuration, stored verbatim
//! count    u32            number of named arrays
//! per array:
//!   name_len u32, name (UTF-8)
//!   rank     u32
//!   dims     rank × u64
//!   values   Πdims × f64 (IEEE-754 bits, bit-exact round trip)
//! ```
//!
//! The config block is opaque to this module — it exists so a checkpoint
//! is self-describing: a loader can rebuild the exact model shape (and
//! the run settings that produced it) from the file alone.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::propagation::Model;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GRAT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A checkpoint in memory: the config text plus named arrays in a fixed
/// order (the model's own parameter order).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshots a model's parameters alongside the configuration text
    /// that should be persisted with them.
    pub fn from_model(config_text: &str, model: &Model) -> Self {
        Checkpoint {
            config_text: config_text.to_string(),
            arrays: model
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec(), t.values().to_vec()))
                .collect(),
        }
    }

    /// The arrays as a name-keyed map (the shape `Model::from_named`
    /// consumes).
    pub fn array_map(&self) -> HashMap<String, (Vec<usize>, Vec<f64>)> {
        self.arrays
            .iter()
            .map(|(n, s, v)| (n.clone(), (s.clone(), v.clone())))
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = self.config_text.as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, shape, values) in &self.arrays {
            let numel: usize = shape.iter().product();
            if numel != values.len() {
                return Err(Error::BadFile(format!(
                    "array '{name}' has {} values for shape {shape:?}",
                    values.len()
                )));
            }
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::BadFile("file too short for a checkpoint header".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadFile(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadFile(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)
            .map_err(|_| Error::BadFile("truncated config block".into()))?;
        let config_text = String::from_utf8(cfg)
            .map_err(|_| Error::BadFile("config block is not UTF-8".into()))?;
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)
                .map_err(|_| Error::BadFile("truncated array name".into()))?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::BadFile("array name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::BadFile(format!("truncated values in array '{name}'")))?;
                values.push(f64::from_le_bytes(buf));
            }
            arrays.push((name, shape, values));
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::BadFile("trailing bytes after the last array".into()));
        }
        Ok(Checkpoint { config_text, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_from(BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::BadFile("truncated integer field".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::BadFile("truncated integer field".into()))?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::propagation::ModelConfig;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_text: "model.n = 8\nmodel.c = 32\n".into(),
            arrays: vec![
                ("a".into(), vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, f64::MIN_POSITIVE]),
                ("b.c".into(), vec![1], vec![std::f64::consts::PI]),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.config_text, ck.config_text);
        for ((na, sa, va), (nb, sb, vb)) in ck.arrays.iter().zip(&back.arrays) {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
            let bits_a: Vec<u64> = va.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = vb.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "values must survive with their exact bits");
        }
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"GRAT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::read_from(&bad_magic[..]).is_err());
        let mut bad_version = buf.clone();
        bad_version[4] = 99;
        assert!(Checkpoint::read_from(&bad_version[..]).is_err());
    }

    #[test]
    fn rejects_truncation_and_trailing_garbage() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        for cut in [3, 7, 20, buf.len() - 1] {
            assert!(Checkpoint::read_from(&buf[..cut]).is_err(), "cut at {cut}");
        }
        let mut padded = buf.clone();
        padded.push(0);
        assert!(Checkpoint::read_from(&padded[..]).is_err());
    }

    #[test]
    fn model_survives_a_checkpoint_cycle() {
        let cfg = ModelConfig {
            decoder: DecoderConfig { n: 4, c: 8, l: 1, h: 2, ..DecoderConfig::default() },
            k_classes: 3,
            grid: 2,
        };
        let model = Model::init(&cfg, 123).unwrap();
        let ck = Checkpoint::from_model("seed = 123\n", &model);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        let rebuilt = Model::from_named(&cfg, &back.array_map()).unwrap();
        for ((na, ta), (_, tb)) in model.named().iter().zip(rebuilt.named().iter()) {
            assert_eq!(ta.values(), tb.values(), "{na}");
        }
        assert_eq!(back.config_text, "seed = 123\n");
    }

    #[test]
    fn file_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.grat");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
    }
}
