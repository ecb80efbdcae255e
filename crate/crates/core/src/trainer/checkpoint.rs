use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::model::Model;
use super::optim::AdamWState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The JSON config blob of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub vocabulary: Vec<String>,
    pub epoch: usize,
    pub steps: usize,
}

fn write_blob(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_u64::<LittleEndian>(bytes.len() as u64)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_blob(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    Ok(bytes)
}

/// Serialises every tensor of `model` (frozen backbone included), the run
/// config with its vocabulary, and the optimizer state.
pub fn write_checkpoint(w: &mut impl Write, model: &Model, opt: &AdamWState, epoch: usize, steps: usize) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(model.store.len() as u32)?;
    for (_, name, t) in model.store.iter() {
        write_blob(w, name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    let meta = CheckpointMeta {
        config: model.config.clone(),
        vocabulary: model.text.vocab().tokens().to_vec(),
        epoch,
        steps,
    };
    write_blob(w, &serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?)?;
    let mut opt_bytes = Vec::new();
    opt.write_to(&mut opt_bytes)?;
    write_blob(w, &opt_bytes)
}

/// Rebuilds the model from the stored config, then overwrites every tensor
/// with its stored value.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(Model, AdamWState, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_blob(r)?).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..ndim)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| r.read_f64::<LittleEndian>())
            .collect::<std::io::Result<Vec<_>>>()?;
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(&read_blob(r)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let opt = AdamWState::read_from(&mut read_blob(r)?.as_slice())?;
    let mut model = Model::new(&meta.config, Vocabulary::from_tokens(meta.vocabulary.clone())?)?;
    if tensors.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, the model has {}",
            tensors.len(),
            model.store.len()
        )));
    }
    for (name, t) in tensors {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} is not part of the model")))?;
        let slot = model.store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok((model, opt, meta))
}

pub fn save_checkpoint(path: &Path, model: &Model, opt: &AdamWState, epoch: usize, steps: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model, opt, epoch, steps)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, AdamWState, CheckpointMeta)> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
