use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"HDRTVCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network weights plus the configuration needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
}

/// Layout: magic, `u32` version, `u64` manifest length, JSON manifest, then
/// all tensors as little-endian `f32`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NnError> {
    let mut offset = 0;
    let tensors = ckpt
        .params
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        version: CHECKPOINT_VERSION,
        kind: ckpt.kind.clone(),
        config: ckpt.config.clone(),
        tensors,
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, t) in ckpt.params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |m: &str| NnError::Checkpoint(format!("{}: {m}", path.display()));
    let mut head = [0u8; 20];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    if mlen > 1 << 30 {
        return Err(bad("manifest too large"));
    }
    let mut mbuf = vec![0u8; mlen];
    r.read_exact(&mut mbuf).map_err(|_| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&mbuf)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = ParamSet::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(&format!("tensor {} extends past the payload", e.name)))?;
        params.push(e.name, Tensor::from_vec(&e.shape, data.to_vec()));
    }
    if params.count() != floats.len() {
        return Err(bad("payload size does not match the manifest"));
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        config: manifest.config,
        params,
    })
}
