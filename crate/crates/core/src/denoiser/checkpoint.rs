//! Binary checkpoint container: magic, little-endian header length, JSON
//! header describing every tensor, then raw little-endian f64 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Param, ParamGroup, ParamStore};
use super::transformer::{ToyTransformer, ToyTransformerConfig};
use super::MultiplierTable;
use crate::error::{MdmError, Result};
use crate::vocab::UnifiedVocab;

pub const MAGIC: &[u8; 8] = b"MDMCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
    /// Offset into the data section, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ToyTransformerConfig,
    pub vocab: UnifiedVocab,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (seed, config hash, step count, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    model: &ToyTransformer,
    metadata: serde_json::Value,
    mut out: W,
) -> Result<()> {
    let mut offset = 0;
    let tensors = model
        .store
        .params
        .iter()
        .map(|p| {
            let (r, c) = p.value.dim();
            let e = TensorEntry {
                name: p.name.clone(),
                group: p.group,
                shape: [r, c],
                offset,
            };
            offset += r * c;
            e
        })
        .collect();
    let header = CheckpointHeader {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        tensors,
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for p in &model.store.params {
        for v in p.value.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ToyTransformer, serde_json::Value)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MdmError::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let vocab = UnifiedVocab::from_json(&serde_json::to_string(&header.vocab)?)?;

    let mut store = ParamStore::default();
    let mut expected_offset = 0;
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(MdmError::Format(format!(
                "tensor `{}` has a non-contiguous offset",
                entry.name
            )));
        }
        let [r, c] = entry.shape;
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let value =
            Array2::from_shape_vec((r, c), data).map_err(|e| MdmError::Format(e.to_string()))?;
        store.params.push(Param {
            name: entry.name.clone(),
            group: entry.group,
            value,
        });
        expected_offset += r * c;
    }
    if input.read(&mut buf)? != 0 {
        return Err(MdmError::Format("trailing bytes after tensor data".into()));
    }

    // Any initialization works here: every value is overwritten by the stored tensors.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model =
        ToyTransformer::new(header.config, vocab, &MultiplierTable::uniform(), &mut rng)?;
    model.load_store(store)?;
    Ok((model, header.metadata))
}

pub fn save(model: &ToyTransformer, metadata: serde_json::Value, path: &Path) -> Result<()> {
    write_checkpoint(model, metadata, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<(ToyTransformer, serde_json::Value)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyTransformer {
        let vocab = UnifiedVocab::build([5, 4, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        ToyTransformer::new(
            ToyTransformerConfig::default(),
            vocab,
            &MultiplierTable::trimodal_preset(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let mut bytes = Vec::new();
        write_checkpoint(&m, serde_json::json!({"seed": 11}), &mut bytes).unwrap();
        let (back, meta) = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta["seed"], 11);
    }

    #[test]
    fn truncated_or_corrupt_files_are_rejected() {
        let m = model();
        let mut bytes = Vec::new();
        write_checkpoint(&m, serde_json::Value::Null, &mut bytes).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(MdmError::Format(_))
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
    }
}
