//! Binary checkpoint: magic, version, header, catalog, then one checksummed
//! block per tensor. All integers and floats are little-endian.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use awgnn_tensor::Matrix;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{HyperParams, Model, ModelParams, ParamId};
use crate::data::Catalog;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AWGNNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch in block `{0}`")]
    Corrupt(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(
        "catalog fingerprint mismatch: checkpoint has {found:016x}, data gives {expected:016x}"
    )]
    CatalogMismatch { expected: u64, found: u64 },
}

/// A trained model together with the catalog its rows index.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub catalog: Catalog,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    catalog: &Catalog,
) -> Result<(), CheckpointError> {
    let bytes = encode(model, catalog);
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)
}

/// Reads a checkpoint; when `expected_catalog` is given the stored catalog
/// fingerprint must match it.
pub fn load_checkpoint(
    path: &Path,
    expected_catalog: Option<u64>,
) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ckpt = decode(&bytes)?;
    if let Some(expected) = expected_catalog {
        let found = ckpt.catalog.fingerprint();
        if found != expected {
            return Err(CheckpointError::CatalogMismatch { expected, found });
        }
    }
    Ok(ckpt)
}

fn encode(model: &Model, catalog: &Catalog) -> Vec<u8> {
    let h = &model.hyper;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut header = Vec::new();
    header.extend_from_slice(&(h.dim as u64).to_le_bytes());
    header.extend_from_slice(&(h.steps as u64).to_le_bytes());
    header.extend_from_slice(&h.t_order.to_le_bytes());
    header.extend_from_slice(&(h.max_len as u64).to_le_bytes());
    header.extend_from_slice(&h.flag_bits().to_le_bytes());
    header.extend_from_slice(&catalog.fingerprint().to_le_bytes());
    header.extend_from_slice(&(catalog.len() as u64).to_le_bytes());
    for (i, id) in catalog.ids().iter().enumerate() {
        header.extend_from_slice(&id.to_le_bytes());
        header.push(catalog.is_trained(i) as u8);
    }
    let blocks: Vec<_> = model.params.iter().collect();
    header.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    push_checked(&mut out, &header);

    for (id, m) in blocks {
        let mut block = Vec::with_capacity(32 + m.len() * 8);
        let name = id.name().as_bytes();
        block.extend_from_slice(&(name.len() as u16).to_le_bytes());
        block.extend_from_slice(name);
        block.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        block.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            block.extend_from_slice(&v.to_le_bytes());
        }
        push_checked(&mut out, &block);
    }
    out
}

/// Length-prefixed payload followed by its SHA-256.
fn push_checked(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&Sha256::digest(payload));
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?)
            .map_err(|_| CheckpointError::Malformed("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn checked(&mut self, what: &str) -> Result<Reader<'b>, CheckpointError> {
        let len = self.usize()?;
        let payload = self.take(len)?;
        let digest = self.take(32)?;
        if Sha256::digest(payload).as_slice() != digest {
            return Err(CheckpointError::Corrupt(what.to_string()));
        }
        Ok(Reader {
            bytes: payload,
            pos: 0,
        })
    }

    fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(CHECKPOINT_MAGIC.len())
        .map_err(|_| CheckpointError::BadMagic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let mut h = r.checked("header")?;
    let dim = h.usize()?;
    let steps = h.usize()?;
    let t_order = h.f64()?;
    let max_len = h.usize()?;
    let flags = h.u32()?;
    let fingerprint = h.u64()?;
    let n_items = h.usize()?;
    let mut trained = Vec::new();
    let mut others = Vec::new();
    for _ in 0..n_items {
        let id = h.u64()?;
        match h.u8()? {
            1 => trained.push(id),
            0 => others.push(id),
            b => return Err(CheckpointError::Malformed(format!("bad catalog flag {b}"))),
        }
    }
    let n_blocks = h.u32()?;
    if !h.finished() {
        return Err(CheckpointError::Malformed(
            "trailing bytes in header".into(),
        ));
    }
    let catalog = Catalog::new(trained, others);
    if catalog.len() != n_items || catalog.fingerprint() != fingerprint {
        return Err(CheckpointError::Malformed(
            "catalog does not match its fingerprint".into(),
        ));
    }
    let hyper = HyperParams {
        dim,
        steps,
        t_order,
        max_len,
        use_adaptive: flags & 1 != 0,
        use_si: flags & 2 != 0,
        use_msi: flags & 4 != 0,
        include_last: flags & 8 != 0,
    };
    hyper
        .validate()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let mut params = ModelParams::empty();
    for i in 0..n_blocks {
        let mut b = r.checked(&format!("#{i}"))?;
        let name_len = b.u16()? as usize;
        let name = std::str::from_utf8(b.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("block name is not UTF-8".into()))?;
        let id = ParamId::from_name(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown block `{name}`")))?;
        let rows = b.usize()?;
        let cols = b.usize()?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Malformed(format!("block `{name}` is too large")))?;
        let data = (0..len).map(|_| b.f64()).collect::<Result<Vec<_>, _>>()?;
        if !b.finished() {
            return Err(CheckpointError::Malformed(format!(
                "trailing bytes in block `{name}`"
            )));
        }
        let m = Matrix::from_vec(rows, cols, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params.insert(id, m);
    }
    if !r.finished() {
        return Err(CheckpointError::Malformed(
            "trailing bytes after last block".into(),
        ));
    }

    let pair_count = params.get(ParamId::SidePairEmbed).map_or(0, Matrix::rows);
    for id in ParamId::ALL {
        let want = id.shape(&hyper, n_items, pair_count);
        let have = params.get(id).map(Matrix::shape);
        if want != have {
            return Err(CheckpointError::Malformed(format!(
                "block `{id}` has shape {have:?}, configuration requires {want:?}"
            )));
        }
    }
    Ok(Checkpoint {
        model: Model { hyper, params },
        catalog,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Model, Catalog) {
        let hyper = HyperParams {
            dim: 4,
            use_adaptive: true,
            use_si: true,
            use_msi: true,
            include_last: false,
            t_order: 2.5,
            ..HyperParams::default()
        };
        let catalog = Catalog::new([3, 5, 8], [11]);
        (Model::new(hyper, catalog.len(), 6, 9).unwrap(), catalog)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, catalog) = sample();
        let back = decode(&encode(&model, &catalog)).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.catalog, catalog);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let (model, catalog) = sample();
        let bytes = encode(&model, &catalog);
        for cut in (0..bytes.len()).step_by(7) {
            assert!(
                decode(&bytes[..cut]).is_err(),
                "accepted a file cut at {cut}"
            );
        }
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let (model, catalog) = sample();
        let mut bytes = encode(&model, &catalog);
        let at = bytes.len() - 100;
        bytes[at] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn wrong_magic_and_version() {
        let (model, catalog) = sample();
        let mut bytes = encode(&model, &catalog);
        bytes[8] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }
}
