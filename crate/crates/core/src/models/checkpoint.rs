//! Checkpoint container: one line of compact JSON (the header), a newline,
//! then every tensor's data as little-endian `f64` in header order.

use super::{
    Activation, DiffusionConfig, DiffusionSchedule, EpsMlpDiffusion, LmConfig, MlpClassifier, Parametrized,
    TinyCausalLm, TrainReport,
};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_bytes};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

pub const FORMAT: &str = "repromia-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// `mlp`, `lm`, `diffusion` or `pattern`.
    pub kind: String,
    pub arch: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<DiffusionSchedule>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_report: Option<TrainReport>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, arch: Value, seed: u64, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let entries = names
            .into_iter()
            .zip(&tensors)
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format: FORMAT.into(),
                version: VERSION,
                kind: kind.into(),
                arch,
                schedule: None,
                seed,
                train_report: None,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint: missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint: unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let payload = &bytes[nl + 1..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Format(format!(
                "checkpoint: payload has {} bytes, header describes {}",
                payload.len(),
                total * 8
            )));
        }
        let mut off = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[off..off + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += n * 8;
            tensors.push(Tensor::new(&e.shape, data)?);
        }
        Ok(Self { header, tensors })
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Format(format!(
                "checkpoint: expected kind {kind}, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_bytes(path, &ck.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_bytes(path)?)
}

fn load_params<M: Parametrized>(model: &mut M, ck: &Checkpoint) -> Result<()> {
    let names = model.param_names();
    if names.len() != ck.tensors.len() {
        return Err(Error::Format("checkpoint: tensor count does not match architecture".into()));
    }
    for ((slot, t), (name, e)) in model
        .params_mut()
        .iter_mut()
        .zip(&ck.tensors)
        .zip(names.iter().zip(&ck.header.tensors))
    {
        if *name != e.name || slot.shape() != t.shape() {
            return Err(Error::Format(format!("checkpoint: tensor {} does not fit {name}", e.name)));
        }
        *slot = t.clone();
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MlpArch {
    widths: Vec<usize>,
    activation: Activation,
}

impl MlpClassifier {
    pub fn to_checkpoint(&self, seed: u64, report: Option<&TrainReport>) -> Result<Checkpoint> {
        let arch = serde_json::to_value(MlpArch {
            widths: self.widths.clone(),
            activation: self.activation,
        })?;
        let mut ck = Checkpoint::new("mlp", arch, seed, self.param_names(), self.params().to_vec());
        ck.header.train_report = report.cloned();
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("mlp")?;
        let arch: MlpArch = serde_json::from_value(ck.header.arch.clone())?;
        let mut m = MlpClassifier::new(&arch.widths, arch.activation, &mut crate::rng::Rng::new(0))?;
        load_params(&mut m, ck)?;
        Ok(m)
    }
}

impl TinyCausalLm {
    pub fn to_checkpoint(&self, seed: u64, report: Option<&TrainReport>) -> Result<Checkpoint> {
        let arch = serde_json::to_value(&self.config)?;
        let mut ck = Checkpoint::new("lm", arch, seed, self.param_names(), self.params().to_vec());
        ck.header.train_report = report.cloned();
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("lm")?;
        let cfg: LmConfig = serde_json::from_value(ck.header.arch.clone())?;
        let mut m = TinyCausalLm::new(cfg, &mut crate::rng::Rng::new(0))?;
        load_params(&mut m, ck)?;
        Ok(m)
    }
}

impl EpsMlpDiffusion {
    pub fn to_checkpoint(&self, seed: u64, report: Option<&TrainReport>) -> Result<Checkpoint> {
        let arch = serde_json::to_value(&self.config)?;
        let mut ck = Checkpoint::new("diffusion", arch, seed, self.param_names(), self.params().to_vec());
        ck.header.schedule = Some(self.schedule.clone());
        ck.header.train_report = report.cloned();
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("diffusion")?;
        let cfg: DiffusionConfig = serde_json::from_value(ck.header.arch.clone())?;
        let mut m = EpsMlpDiffusion::new(cfg, &mut crate::rng::Rng::new(0))?;
        if let Some(s) = &ck.header.schedule {
            s.validate()?;
            m.schedule = s.clone();
        }
        load_params(&mut m, ck)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn models_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mlp = MlpClassifier::new(&[2, 5, 3], Activation::Relu, &mut Rng::new(1)).unwrap();
        let report = TrainReport::new(0.5, 0.75, 10, 1);
        let p = dir.path().join("mlp.ckpt");
        save_checkpoint(&p, &mlp.to_checkpoint(1, Some(&report)).unwrap()).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.header.train_report.as_ref().unwrap().rho, 1.5);
        assert_eq!(MlpClassifier::from_checkpoint(&ck).unwrap(), mlp);

        let lm = TinyCausalLm::new(LmConfig::default(), &mut Rng::new(2)).unwrap();
        let ck = Checkpoint::from_bytes(&lm.to_checkpoint(2, None).unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(TinyCausalLm::from_checkpoint(&ck).unwrap(), lm);

        let dm = EpsMlpDiffusion::new(DiffusionConfig::default(), &mut Rng::new(3)).unwrap();
        let ck = Checkpoint::from_bytes(&dm.to_checkpoint(3, None).unwrap().to_bytes().unwrap()).unwrap();
        assert_eq!(EpsMlpDiffusion::from_checkpoint(&ck).unwrap(), dm);
        assert!(MlpClassifier::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mlp = MlpClassifier::new(&[2, 3], Activation::Relu, &mut Rng::new(1)).unwrap();
        let mut bytes = mlp.to_checkpoint(0, None).unwrap().to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
