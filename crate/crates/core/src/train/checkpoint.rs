//! `VIPCKPT1` named-tensor files.
//!
//! Layout: magic, u32 entry count, then per entry a u32 name length, the
//! UTF-8 name, u32 rank, `rank` u32 extents and the f32 values. All integers
//! and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VIPCKPT1";

/// Prefixes of optimizer entries in a training checkpoint.
const ADAM_M: &str = "optim.m.";
const ADAM_V: &str = "optim.v.";
const ADAM_STEP: &str = "optim.step";
const EPOCH: &str = "train.epoch";
const BEST_TOP1: &str = "train.best_top1";

pub type TensorMap = IndexMap<String, Tensor<f32>>;

/// Exact byte size of a checkpoint holding `entries`.
pub fn checkpoint_size<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> u64 {
    12 + entries
        .into_iter()
        .map(|(name, shape)| (4 + name.len() + 4 + 4 * shape.len() + 4 * shape.iter().product::<usize>()) as u64)
        .sum::<u64>()
}

pub fn write_tensors<'a>(mut w: impl Write, entries: &[(&'a str, &'a Tensor<f32>)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_tensors(mut r: impl Read) -> Result<TensorMap> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file shorter than the magic header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected VIPCKPT1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let u32_at = |r: &mut dyn Read, what: &str| -> Result<usize> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let count = u32_at(&mut r, "entry count")?;
    let mut out = TensorMap::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = u32_at(&mut r, &format!("name length of entry {i}"))?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint(format!("truncated in name of entry {i}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint(format!("entry {i} name is not UTF-8")))?;
        let rank = u32_at(&mut r, &format!("rank of `{name}`"))?;
        let shape = (0..rank)
            .map(|_| u32_at(&mut r, &format!("extents of `{name}`")))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * numel];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated in data of `{name}`")))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::new(shape, data)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).unwrap_or(0) != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
    }
    Ok(out)
}

fn write_file(path: &Path, entries: &[(&str, &Tensor<f32>)]) -> Result<()> {
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("ckpt.tmp");
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_tensors(&mut w, entries)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<TensorMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(std::io::BufReader::new(file))
}

/// Writes every parameter of `store`.
pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let entries: Vec<(&str, &Tensor<f32>)> = store.iter().map(|(_, n, e)| (n, e.tensor())).collect();
    write_file(path, &entries)
}

/// Copies every tensor of the file into `store`. The file must name exactly
/// the parameters of the store, with matching shapes.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let map = read_file(path)?;
    assign_all(store, &map, |_| false)
}

fn assign_all(store: &mut ParamStore<f32>, map: &TensorMap, extra: impl Fn(&str) -> bool) -> Result<()> {
    if let Some(unknown) = map.keys().find(|k| store.id(k).is_none() && !extra(k)) {
        return Err(Error::Checkpoint(format!("unknown tensor `{unknown}` not in the model")));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = map
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != store.tensor(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.tensor(id).shape()
            )));
        }
        store.assign(id, t)?;
    }
    Ok(())
}

/// Resume point stored next to the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_top1: f64,
}

/// Parameters plus Adam moments, step counter and progress.
pub fn save_training_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    state: &OptimizerState<f32>,
    progress: Progress,
) -> Result<()> {
    let names: Vec<&str> = store.names().collect();
    let m_names: Vec<String> = names.iter().map(|n| format!("{ADAM_M}{n}")).collect();
    let v_names: Vec<String> = names.iter().map(|n| format!("{ADAM_V}{n}")).collect();
    // Counters travel as two 16-bit halves so f32 holds them exactly.
    let split = |v: u64| Tensor::new([2], vec![(v >> 16) as f32, (v & 0xffff) as f32]).expect("two values");
    let step = split(state.step);
    let epoch = split(progress.epoch as u64);
    let best = Tensor::new([1], vec![progress.best_top1 as f32]).expect("one value");
    let mut entries: Vec<(&str, &Tensor<f32>)> = store.iter().map(|(_, n, e)| (n, e.tensor())).collect();
    entries.extend(m_names.iter().map(String::as_str).zip(&state.m));
    entries.extend(v_names.iter().map(String::as_str).zip(&state.v));
    entries.push((ADAM_STEP, &step));
    entries.push((EPOCH, &epoch));
    entries.push((BEST_TOP1, &best));
    write_file(path, &entries)
}

pub fn load_training_checkpoint(path: &Path, store: &mut ParamStore<f32>) -> Result<(OptimizerState<f32>, Progress)> {
    let map = read_file(path)?;
    assign_all(store, &map, |k| {
        k.starts_with(ADAM_M) || k.starts_with(ADAM_V) || [ADAM_STEP, EPOCH, BEST_TOP1].contains(&k)
    })?;
    let get = |k: &str| map.get(k).ok_or_else(|| Error::Checkpoint(format!("missing `{k}` in training checkpoint")));
    let mut state = OptimizerState::new(store);
    for (i, name) in store.names().enumerate() {
        for (prefix, slot) in [(ADAM_M, &mut state.m[i]), (ADAM_V, &mut state.v[i])] {
            let t = get(&format!("{prefix}{name}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("optimizer moment for `{name}` has the wrong shape")));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
    }
    let join = |t: &Tensor<f32>| -> Result<u64> {
        match t.data() {
            [hi, lo] => Ok(((*hi as u64) << 16) | *lo as u64),
            _ => Err(Error::Checkpoint("malformed counter entry".into())),
        }
    };
    state.step = join(get(ADAM_STEP)?)?;
    let progress = Progress {
        epoch: join(get(EPOCH)?)? as usize,
        best_top1: get(BEST_TOP1)?.data().first().copied().unwrap_or(0.0) as f64,
    };
    Ok((state, progress))
}
