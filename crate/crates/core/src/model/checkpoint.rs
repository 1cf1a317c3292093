//! Flat binary checkpoint.
//!
//! Layout: the 8-byte magic `RMXCKPT1`, a little-endian `u64` header length,
//! a JSON header echoing the configuration and the parameter manifest, then
//! every dense value as a little-endian `f64` in [`RankMixer::segments`]
//! order, then (if present) each embedding table's rows in schema order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RankMixer, RankMixerConfig};
use crate::data::{EmbeddingSet, EmbeddingTable};
use crate::error::{Error, Result};
use crate::moe::MoEConfig;

pub const MAGIC: &[u8; 8] = b"RMXCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub feature: String,
    pub vocab: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: RankMixerConfig,
    pub moe: Option<MoEConfig>,
    pub input_width: usize,
    pub params: Vec<ParamEntry>,
    pub dense_values: usize,
    pub embeddings: Vec<TableEntry>,
}

fn header_for(model: &RankMixer, emb: Option<&EmbeddingSet>) -> Header {
    Header {
        model: model.config().clone(),
        moe: model.moe_config().cloned(),
        input_width: model.tokenizer_config().input_width,
        params: model
            .params()
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
        dense_values: model.total_param_count(),
        embeddings: emb
            .map(|e| {
                e.tables()
                    .iter()
                    .map(|t| TableEntry { feature: t.feature().to_string(), vocab: t.vocab(), dim: t.dim() })
                    .collect()
            })
            .unwrap_or_default(),
    }
}

pub fn write<W: Write>(mut w: W, model: &RankMixer, emb: Option<&EmbeddingSet>) -> Result<()> {
    let io = |e| Error::io("writing checkpoint", e);
    let header = serde_json::to_vec(&header_for(model, emb)).expect("header serializes");
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    let mut buf = Vec::with_capacity(model.total_param_count() * 8);
    for (id, range) in model.segments() {
        for v in &model.params().get(id).data()[range] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)?;
    if let Some(e) = emb {
        for t in e.tables() {
            let bytes: Vec<u8> = t.weights().iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&bytes).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn save(path: &Path, model: &RankMixer, emb: Option<&EmbeddingSet>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write(std::io::BufWriter::new(f), model, emb)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| Error::Checkpoint(format!("truncated parameter data: {e}")))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn read<R: Read>(mut r: R) -> Result<(RankMixer, Option<EmbeddingSet>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::Checkpoint(format!("missing header length: {e}")))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut hbytes = vec![0u8; len];
    r.read_exact(&mut hbytes).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: Header =
        serde_json::from_slice(&hbytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut model = RankMixer::new(header.model.clone(), header.moe.clone(), header.input_width, 0)?;
    let manifest: Vec<ParamEntry> = model
        .params()
        .iter()
        .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
        .collect();
    if manifest != header.params || header.dense_values != model.total_param_count() {
        return Err(Error::Checkpoint("parameter manifest does not match the configuration".into()));
    }
    for (id, range) in model.segments() {
        let vals = read_f64s(&mut r, range.len())?;
        model.params_mut().get_mut(id).data_mut()[range].copy_from_slice(&vals);
    }
    let emb = if header.embeddings.is_empty() {
        None
    } else {
        let mut tables = Vec::with_capacity(header.embeddings.len());
        for t in &header.embeddings {
            let w = read_f64s(&mut r, t.vocab * t.dim)?;
            tables.push(EmbeddingTable::from_weights(&t.feature, t.vocab, t.dim, w)?);
        }
        Some(EmbeddingSet::from_tables(tables))
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io("reading checkpoint", e))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((model, emb))
}

pub fn load(path: &Path) -> Result<(RankMixer, Option<EmbeddingSet>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read(std::io::BufReader::new(f))
}
