//! "ACNT" checkpoints: magic, version u32, config text (u32 length + UTF-8),
//! tensor count u32, tensor table, trailing CRC32 of everything before it.
//!
//! Table entries are `name length u32, name, dtype u32, ndim u32, dims u64[],
//! payload`. The table holds every parameter, the running statistics of
//! every batch normalization (`<bn>.running_mean`, `.running_var`,
//! `.updates`), the normalization statistics of the training data and the
//! training progress.

use std::collections::BTreeMap;
use std::path::Path;

use acnet_numeric::{ParamStore, Tensor};

use super::config::{parse_config, serialize_config, RunConfig};
use crate::backbone::FeatureExtractor;
use crate::data::NormStats;
use crate::error::{CheckpointError, Result};
use crate::io::{get_tensor_body, put_tensor_body, read_bytes, write_bytes, Reader};
use crate::tree::TreeModel;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ACNT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PROGRESS: &str = "meta.progress";
const NORM_MEAN: &str = "data.norm_mean";
const NORM_STD: &str = "data.norm_std";

/// Where training stood when the checkpoint was written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub stages_completed: usize,
    /// Epochs finished inside the next stage; 0 at a stage boundary.
    pub epochs_into_stage: usize,
}

impl Progress {
    pub fn at_stage_boundary(&self) -> bool {
        self.epochs_into_stage == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub progress: Progress,
    pub stats: NormStats,
}

fn store_tensors(store: &ParamStore, out: &mut Vec<(String, Tensor)>) {
    for p in store.params() {
        out.push((p.name.clone(), p.value.clone()));
    }
    for bn in store.bn_states() {
        let c = bn.state.channels();
        out.push((format!("{}.running_mean", bn.name), Tensor::from_fn(&[c], |i| bn.state.running_mean[i])));
        out.push((format!("{}.running_var", bn.name), Tensor::from_fn(&[c], |i| bn.state.running_var[i])));
        out.push((format!("{}.updates", bn.name), Tensor::scalar(bn.state.updates as f64)));
    }
}

/// Every named tensor of `model` in a fixed order.
pub fn model_tensors(model: &TreeModel) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for store in model.stores() {
        store_tensors(store, &mut out);
    }
    out
}

fn take_shaped(
    table: &mut BTreeMap<String, Tensor>,
    name: &str,
    shape: &[usize],
) -> std::result::Result<Tensor, CheckpointError> {
    let t = table.remove(name).ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
    if t.shape() != shape {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}

fn restore_store(store: &mut ParamStore, table: &mut BTreeMap<String, Tensor>) -> std::result::Result<(), CheckpointError> {
    for p in store.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = take_shaped(table, &p.name, &shape)?;
    }
    for bn in store.bn_states_mut() {
        let c = bn.state.channels();
        let mean = take_shaped(table, &format!("{}.running_mean", bn.name), &[c])?;
        let var = take_shaped(table, &format!("{}.running_var", bn.name), &[c])?;
        let updates = take_shaped(table, &format!("{}.updates", bn.name), &[])?.item();
        if !(updates >= 0.0 && updates.fract() == 0.0) {
            return Err(CheckpointError::Malformed(format!("{}.updates is {updates}", bn.name)));
        }
        bn.state.running_mean = mean.into_data();
        bn.state.running_var = var.into_data();
        bn.state.updates = updates as u64;
    }
    Ok(())
}

pub fn encode_checkpoint(model: &TreeModel, config: &RunConfig, meta: &CheckpointMeta) -> Vec<u8> {
    let mut tensors = model_tensors(model);
    tensors.push((
        PROGRESS.into(),
        Tensor::from_fn(&[2], |i| [meta.progress.stages_completed, meta.progress.epochs_into_stage][i] as f64),
    ));
    let c = meta.stats.mean.len();
    tensors.push((NORM_MEAN.into(), Tensor::from_fn(&[c], |i| meta.stats.mean[i])));
    tensors.push((NORM_STD.into(), Tensor::from_fn(&[c], |i| meta.stats.std[i])));

    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    let text = serialize_config(config);
    out.extend((text.len() as u32).to_le_bytes());
    out.extend(text.as_bytes());
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        put_tensor_body(&mut out, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

/// Checks framing and integrity and returns the config text and tensor
/// table in file order.
fn read_table(bytes: &[u8]) -> std::result::Result<(String, Vec<(String, Tensor)>), CheckpointError> {
    let malformed = |m: &str| CheckpointError::Malformed(m.to_string());
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(CheckpointError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found,
        });
    }
    let version = bytes
        .get(4..8)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| malformed("truncated version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(malformed("too short for a checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }

    let mut r = Reader::new(&body[8..]);
    let len = r.u32().ok_or_else(|| malformed("truncated config length"))? as usize;
    let text = r.take(len).ok_or_else(|| malformed("truncated config text"))?;
    let text = String::from_utf8(text.to_vec()).map_err(|_| malformed("config text is not UTF-8"))?;
    let count = r.u32().ok_or_else(|| malformed("truncated tensor count"))? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32().ok_or_else(|| malformed("truncated tensor name length"))? as usize;
        let name = r.take(n).ok_or_else(|| malformed("truncated tensor name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| malformed("tensor name is not UTF-8"))?;
        let t = get_tensor_body(&mut r).map_err(|m| CheckpointError::Malformed(format!("{name}: {m}")))?;
        tensors.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed(format!("{} bytes after the tensor table", r.remaining())));
    }
    Ok((text, tensors))
}

fn into_map(tensors: Vec<(String, Tensor)>) -> std::result::Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut map = BTreeMap::new();
    for (name, t) in tensors {
        if map.contains_key(&name) {
            return Err(CheckpointError::Malformed(format!("tensor {name} appears twice")));
        }
        map.insert(name, t);
    }
    Ok(map)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TreeModel, RunConfig, CheckpointMeta)> {
    let (text, tensors) = read_table(bytes)?;
    let config = parse_config(&text)?;
    let mut model = config.build_architecture()?;
    let mut table = into_map(tensors)?;
    for store in model.stores_mut() {
        restore_store(store, &mut table)?;
    }
    let progress = take_shaped(&mut table, PROGRESS, &[2])?;
    let p = progress.data();
    if p.iter().any(|v| !(*v >= 0.0 && v.fract() == 0.0)) {
        return Err(CheckpointError::Malformed(format!("progress {p:?} is not a pair of counts")).into());
    }
    let c = config.backbone.spec.input_channels;
    let mean = take_shaped(&mut table, NORM_MEAN, &[c])?.into_data();
    let std = take_shaped(&mut table, NORM_STD, &[c])?.into_data();
    if let Some(name) = table.keys().next() {
        return Err(CheckpointError::UnexpectedTensor(name.clone()).into());
    }
    let meta = CheckpointMeta {
        progress: Progress {
            stages_completed: p[0] as usize,
            epochs_into_stage: p[1] as usize,
        },
        stats: NormStats { mean, std },
    };
    Ok((model, config, meta))
}

pub fn save_checkpoint(model: &TreeModel, config: &RunConfig, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    write_bytes(path, &encode_checkpoint(model, config, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(TreeModel, RunConfig, CheckpointMeta)> {
    decode_checkpoint(&read_bytes(path)?)
}

/// Copies the `backbone.*` parameters and statistics of a checkpoint into
/// `model`'s backbone; other tensors in the file are ignored.
pub fn load_backbone_weights(model: &mut TreeModel, path: &Path) -> Result<()> {
    let bytes = read_bytes(path)?;
    let (_, tensors) = read_table(&bytes)?;
    let mut table = into_map(tensors.into_iter().filter(|(n, _)| n.starts_with("backbone.")).collect())?;
    restore_store(model.backbone_mut().params_mut(), &mut table)?;
    if let Some(name) = table.keys().next() {
        return Err(CheckpointError::UnexpectedTensor(name.clone()).into());
    }
    Ok(())
}
