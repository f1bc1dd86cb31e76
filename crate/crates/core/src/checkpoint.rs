//! Checkpoint files.
//!
//! Layout (little endian): the 8-byte magic `KPNETCKP`, a `u32` format
//! version, a `u64` header length, a JSON header and then the raw `f32`
//! tensor data in header order. The header records configs, training
//! progress and, per tensor, its name, shape, element offset and whether it
//! is only needed to resume training (IO-Net weights and Adam moments).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ionet::{IoNet, IoNetConfig};
use crate::model::{KeyPointNet, KeypointNetConfig};
use crate::nn::{Adam, Module};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"KPNETCKP";
pub const FORMAT_VERSION: u32 = 1;

const MODEL: &str = "model";
const IONET: &str = "ionet";
const ADAM_M: &str = "adam.m";
const ADAM_V: &str = "adam.v";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub train_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: KeypointNetConfig,
    pub ionet: Option<IoNetConfig>,
    /// Optimiser steps completed.
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub adam: Option<AdamState>,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub run_config: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

/// In-memory checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: HashMap<String, Tensor<f32>>,
}

fn qualified(group: &str, name: &str) -> String {
    format!("{group}/{name}")
}

impl Checkpoint {
    /// Captures the keypoint network and, optionally, the training state.
    pub fn capture(
        model: &KeyPointNet<f32>,
        ionet: Option<&IoNet<f32>>,
        adam: Option<&Adam>,
        epoch: usize,
        run_config: Option<serde_json::Value>,
    ) -> Self {
        let mut header = Header {
            model: model.config.clone(),
            ionet: ionet.map(|n| n.config.clone()),
            step: adam.map_or(0, |a| a.step),
            epoch,
            adam: adam.map(|a| AdamState { beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step }),
            run_config,
            tensors: Vec::new(),
        };
        let mut tensors = HashMap::new();
        let mut offset = 0;
        let mut push = |name: String, t: Tensor<f32>, train_only: bool| {
            header.tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, train_only });
            offset += t.numel();
            tensors.insert(name, t);
        };
        for (name, t, _) in model.named_tensors() {
            push(qualified(MODEL, &name), t, false);
        }
        if let Some(io) = ionet {
            for (name, t, _) in io.named_tensors() {
                push(qualified(IONET, &name), t, true);
            }
        }
        if let Some(a) = adam {
            let mut names: Vec<&String> = a.moments.keys().collect();
            names.sort();
            for name in names {
                let (m, v) = &a.moments[name];
                push(qualified(ADAM_M, name), Tensor::from_vec(&[m.len()], m.clone()), true);
                push(qualified(ADAM_V, name), Tensor::from_vec(&[v.len()], v.clone()), true);
            }
        }
        Self { header, tensors }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        let mut buf = Vec::new();
        for entry in &self.header.tensors {
            buf.clear();
            for v in self.tensors[&entry.name].data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 28 {
            return Err(Error::Checkpoint("implausible header length".into()));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(io)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut tensors = HashMap::new();
        let mut expected_offset = 0;
        for entry in &header.tensors {
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!("{}: offset mismatch", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(io)?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data));
            expected_offset += n;
        }
        Ok(Self { header, tensors })
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    fn restore(&self, group: &str, module: &mut dyn Module<f32>) -> Result<()> {
        let mut err = None;
        module.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let key = qualified(group, name);
            match self.tensors.get(&key) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                Some(t) => err = Some(format!("{key}: shape {:?} != {:?}", t.shape(), p.value.shape())),
                None => err = Some(format!("missing tensor {key}")),
            }
        });
        err.map_or(Ok(()), |e| Err(Error::Checkpoint(e)))
    }

    /// Rebuilds the keypoint network, rejecting a config that differs from
    /// `expected` when one is given.
    pub fn model(&self, expected: Option<&KeypointNetConfig>) -> Result<KeyPointNet<f32>> {
        if let Some(cfg) = expected {
            if cfg != &self.header.model {
                return Err(Error::Checkpoint(format!(
                    "model config mismatch: checkpoint has {:?}, expected {:?}",
                    self.header.model, cfg
                )));
            }
        }
        let mut model = KeyPointNet::new(self.header.model.clone(), 0);
        self.restore(MODEL, &mut model)?;
        Ok(model)
    }

    /// Rebuilds IO-Net if the checkpoint carries it.
    pub fn ionet(&self) -> Result<Option<IoNet<f32>>> {
        let Some(cfg) = &self.header.ionet else { return Ok(None) };
        let mut net = IoNet::new(cfg.clone(), 0);
        self.restore(IONET, &mut net)?;
        Ok(Some(net))
    }

    /// Rebuilds the optimiser state if present.
    pub fn adam(&self) -> Option<Adam> {
        let state = self.header.adam.as_ref()?;
        let mut moments = HashMap::new();
        let prefix = format!("{ADAM_M}/");
        for entry in &self.header.tensors {
            if let Some(name) = entry.name.strip_prefix(&prefix) {
                let m = self.tensors[&entry.name].data().to_vec();
                let v = self.tensors.get(&qualified(ADAM_V, name))?.data().to_vec();
                moments.insert(name.to_string(), (m, v));
            }
        }
        Some(Adam { beta1: state.beta1, beta2: state.beta2, eps: state.eps, step: state.step, moments })
    }

    /// Copy without the train-only tensors, for deployment.
    pub fn inference_only(&self) -> Self {
        let mut header = self.header.clone();
        header.ionet = None;
        header.adam = None;
        header.tensors.retain(|t| !t.train_only);
        let mut offset = 0;
        for t in header.tensors.iter_mut() {
            t.offset = offset;
            offset += t.shape.iter().product::<usize>();
        }
        let tensors = header.tensors.iter().map(|t| (t.name.clone(), self.tensors[&t.name].clone())).collect();
        Self { header, tensors }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Var;
    use crate::nn::ForwardCtx;

    fn small_config() -> KeypointNetConfig {
        KeypointNetConfig { descriptor_dim: 8, descriptor_upsample: false, ..Default::default() }
    }

    #[test]
    fn round_trip_preserves_outputs_and_training_state() {
        let model = KeyPointNet::<f32>::new(small_config(), 4);
        let ionet = IoNet::<f32>::new(IoNetConfig { channels: 8, residual_blocks: 1, k: 4 }, 5);
        let mut adam = Adam::default();
        adam.step = 7;
        adam.moments.insert("model.x".into(), (vec![1.0, 2.0], vec![3.0, 4.0]));
        let ckpt = Checkpoint::capture(&model, Some(&ionet), Some(&adam), 3, None);
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.header, ckpt.header);
        let restored = back.model(Some(&small_config())).unwrap();
        let x = Var::constant(Tensor::<f32>::full(&[1, 3, 16, 16], 0.3));
        let a = model.forward(&x, &mut ForwardCtx::eval()).unwrap();
        let b = restored.forward(&x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(a.descriptors.value().data(), b.descriptors.value().data());
        let adam2 = back.adam().unwrap();
        assert_eq!(adam2.step, 7);
        assert_eq!(adam2.moments["model.x"], (vec![1.0, 2.0], vec![3.0, 4.0]));
        assert!(back.ionet().unwrap().is_some());
    }

    #[test]
    fn rejects_mismatched_config_and_corruption() {
        let model = KeyPointNet::<f32>::new(small_config(), 4);
        let ckpt = Checkpoint::capture(&model, None, None, 0, None);
        let other = KeypointNetConfig { cross_border: false, ..small_config() };
        assert!(ckpt.model(Some(&other)).is_err());
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn inference_only_drops_training_tensors() {
        let model = KeyPointNet::<f32>::new(small_config(), 4);
        let ionet = IoNet::<f32>::new(IoNetConfig { channels: 8, residual_blocks: 1, k: 4 }, 5);
        let full = Checkpoint::capture(&model, Some(&ionet), Some(&Adam::default()), 0, None);
        let slim = full.inference_only();
        assert!(slim.header.tensors.iter().all(|t| t.name.starts_with("model/")));
        let mut buf = Vec::new();
        slim.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(buf.as_slice()).unwrap().model(None).is_ok());
    }
}
