//! Weight bundles (`ARIG`).
//!
//! ```text
//! magic "ARIG" | version u32 | count u32
//! count × { name_len u32 | name utf-8 | rank u32 | dims u32×rank | f32×Πdims }
//! crc32 u32
//! ```
//!
//! Tensors are written in name order. Rank is 1 for `1 × n` tensors and 2
//! otherwise.

use std::collections::HashSet;
use std::path::Path;

use arig_core::{EngineConfig, Model, Tensor, Weights};

use super::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ARIG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u32>,
    /// Byte offset of the first value.
    pub offset: usize,
}

pub fn encode(w: &Weights) -> Vec<u8> {
    let mut out = ByteWriter::new();
    out.bytes(&MAGIC);
    out.u32(VERSION);
    out.u32(w.len() as u32);
    for (name, t) in w.iter() {
        out.str(name);
        let (r, c) = t.shape();
        if r == 1 {
            out.u32(1);
            out.u32(c as u32);
        } else {
            out.u32(2);
            out.u32(r as u32);
            out.u32(c as u32);
        }
        out.f32s(t.data());
    }
    out.finish()
}

/// Decodes a bundle and lists its tensors in file order.
pub fn decode(bytes: &[u8]) -> Result<(Weights, Vec<TensorEntry>)> {
    let mut r = ByteReader::open(bytes, &MAGIC, "weight bundle")?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            what: "weight bundle",
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let mut w = Weights::new();
    let mut entries = Vec::with_capacity(count);
    let mut names = HashSet::new();
    for _ in 0..count {
        let name = r.str()?;
        if !names.insert(name.clone()) {
            return Err(Error::format(format!(
                "weight bundle: duplicate tensor `{name}`"
            )));
        }
        let rank = r.u32()?;
        let dims = match rank {
            1 => vec![r.u32()?],
            2 => vec![r.u32()?, r.u32()?],
            _ => {
                return Err(Error::format(format!(
                    "weight bundle: tensor `{name}` has rank {rank}"
                )))
            }
        };
        let (rows, cols) = match dims[..] {
            [n] => (1, n as usize),
            [a, b] => (a as usize, b as usize),
            _ => unreachable!(),
        };
        let offset = r.offset();
        let data = r.f32s(rows * cols)?;
        w.insert(name.clone(), Tensor::from_vec(rows, cols, data)?);
        entries.push(TensorEntry { name, dims, offset });
    }
    r.finish()?;
    Ok((w, entries))
}

pub fn save(w: &Weights, path: &Path) -> Result<()> {
    write_file(path, &encode(w))
}

pub fn load(path: &Path) -> Result<Weights> {
    Ok(decode(&read_file(path)?)?.0)
}

/// Loads a bundle and checks it against the topology of `cfg`.
pub fn load_model(path: &Path, cfg: &EngineConfig) -> Result<Model> {
    let w = load(path)?;
    w.validate(cfg)?;
    Ok(Model::from_weights(cfg, &w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use arig_core::InitMode;

    fn bundle() -> Weights {
        Weights::init(&EngineConfig::small(), 3, InitMode::Random).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = bundle();
        let bytes = encode(&w);
        let (back, entries) = decode(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(entries.len(), w.len());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn flipped_payload_byte_fails_the_checksum() {
        let mut bytes = encode(&bundle());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(decode(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn unknown_version_is_reported() {
        let mut bytes = encode(&bundle());
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn missing_tensor_is_named() {
        let mut w = bundle();
        w.remove("diffmlp.block2.w1").unwrap();
        let (back, _) = decode(&encode(&w)).unwrap();
        let err = back.validate(&EngineConfig::small()).unwrap_err();
        assert_eq!(
            err,
            arig_core::Error::MissingTensor("diffmlp.block2.w1".into())
        );
    }

    #[test]
    fn header_layout() {
        let mut w = Weights::new();
        w.insert("b", Tensor::from_vec(1, 2, vec![1.0, -2.0]).unwrap());
        let bytes = encode(&w);
        let expected: Vec<u8> = [
            &b"ARIG"[..],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            b"b",
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
            &(-2.0f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(&bytes[..bytes.len() - 4], &expected[..]);
    }
}
