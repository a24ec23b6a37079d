//! Self-describing checkpoint container: a versioned header, the full model
//! configuration as JSON, and shape-tagged named parameter arrays. Optimizer
//! moments ride along so training can resume exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FlowNet, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Run metadata stored next to the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Whether the weights were fine-tuned with warm starting in the graph.
    pub warmstart_trained: bool,
    #[serde(default)]
    pub train_progress: Option<TrainProgress>,
}

/// Scalar training-state fields (the moment tensors live in the binary part).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainProgress {
    pub step: u64,
    pub phase: usize,
    pub epoch_in_phase: usize,
    pub adam_t: u64,
}

/// First and second Adam moments per parameter.
#[derive(Debug, Clone, Default)]
pub struct OptimMoments {
    pub entries: Vec<(String, Tensor, Tensor)>,
}

pub fn save_checkpoint(
    path: &Path,
    net: &FlowNet,
    meta: &CheckpointMeta,
    moments: Option<&OptimMoments>,
) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::data(format!("serialize checkpoint meta: {e}")))?;
    f.write_u32::<LittleEndian>(meta_json.len() as u32)?;
    f.write_all(&meta_json)?;
    f.write_u8(moments.is_some() as u8)?;

    let params = net.params();
    f.write_u32::<LittleEndian>(params.len() as u32)?;
    for p in &params {
        write_tensor(&mut f, &p.name, &p.value)?;
    }
    if let Some(m) = moments {
        f.write_u32::<LittleEndian>(m.entries.len() as u32)?;
        for (name, m1, m2) in &m.entries {
            write_tensor(&mut f, name, m1)?;
            write_tensor(&mut f, name, m2)?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FlowNet, CheckpointMeta, Option<OptimMoments>)> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::data(format!(
            "{}: not a checkpoint (magic {magic:?})",
            path.display()
        )));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let meta_len = f.read_u32::<LittleEndian>()? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    f.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::data(format!("{}: bad checkpoint meta: {e}", path.display())))?;
    let has_moments = f.read_u8()? != 0;

    let count = f.read_u32::<LittleEndian>()? as usize;
    let mut stored: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut f)?;
        stored.insert(name, t);
    }

    let mut net = FlowNet::new(meta.config.clone(), 0)?;
    for p in net.params_mut() {
        let Some(t) = stored.remove(&p.name) else {
            return Err(Error::data(format!(
                "{}: checkpoint is missing parameter {}",
                path.display(),
                p.name
            )));
        };
        if t.shape() != p.value.shape() {
            return Err(Error::data(format!(
                "{}: parameter {} has shape {:?}, expected {:?}",
                path.display(),
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::data(format!(
            "{}: checkpoint contains unknown parameter {name}",
            path.display()
        )));
    }

    let moments = if has_moments {
        let n = f.read_u32::<LittleEndian>()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let (name, m1) = read_tensor(&mut f)?;
            let (name2, m2) = read_tensor(&mut f)?;
            if name != name2 {
                return Err(Error::data(format!(
                    "{}: moment pair mismatch: {name} vs {name2}",
                    path.display()
                )));
            }
            entries.push((name, m1, m2));
        }
        Some(OptimMoments { entries })
    } else {
        None
    };
    Ok((net, meta, moments))
}

fn write_tensor<W: Write>(f: &mut W, name: &str, t: &Tensor) -> Result<()> {
    f.write_u16::<LittleEndian>(name.len() as u16)?;
    f.write_all(name.as_bytes())?;
    f.write_u8(t.shape().len() as u8)?;
    for d in t.shape() {
        f.write_u32::<LittleEndian>(*d as u32)?;
    }
    for v in t.data() {
        f.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(f: &mut R) -> Result<(String, Tensor)> {
    let name_len = f.read_u16::<LittleEndian>()? as usize;
    let mut name_buf = vec![0u8; name_len];
    f.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|e| Error::data(format!("bad parameter name: {e}")))?;
    let ndim = f.read_u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(f.read_u32::<LittleEndian>()? as usize);
    }
    let numel = shape.iter().product();
    let mut data = vec![0.0; numel];
    for v in &mut data {
        *v = f.read_f64::<LittleEndian>()?;
    }
    Ok((name, Tensor::new(shape, data)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_weights_and_meta() {
        let cfg = ModelConfig::tiny();
        let net = FlowNet::new(cfg.clone(), 42).unwrap();
        let meta = CheckpointMeta {
            config: cfg,
            warmstart_trained: true,
            train_progress: Some(TrainProgress {
                step: 17,
                phase: 1,
                epoch_in_phase: 2,
                adam_t: 17,
            }),
        };
        let moments = OptimMoments {
            entries: net
                .params()
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        Tensor::full(p.value.shape(), 0.25),
                        Tensor::full(p.value.shape(), 0.5),
                    )
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &net, &meta, Some(&moments)).unwrap();
        let (back, meta2, moments2) = load_checkpoint(&path).unwrap();
        assert!(meta2.warmstart_trained);
        assert_eq!(meta2.train_progress.as_ref().unwrap().step, 17);
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let m2 = moments2.unwrap();
        assert_eq!(m2.entries.len(), net.params().len());
        assert!(m2.entries.iter().all(|(_, m, v)| {
            m.data().iter().all(|x| *x == 0.25) && v.data().iter().all(|x| *x == 0.5)
        }));
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
