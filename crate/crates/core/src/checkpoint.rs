//! Checkpoints: one JSON document holding the model config and every tensor
//! as its shape plus base64 of the little-endian `f64` bytes, so a
//! save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Head, Model, ModelConfig};
use crate::module::Module;
use crate::tensor::Tensor;

pub const FORMAT: &str = "lrformer-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl StoredTensor {
    pub fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        StoredTensor { shape: t.shape().to_vec(), data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self, name: &str) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::InvalidInput(format!("tensor {name}: bad base64: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::InvalidInput(format!("tensor {name}: byte length {} is not a multiple of 8", bytes.len())));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    /// The run configuration that produced the weights, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

const RFF_W: &str = "head.rff_w";
const RFF_B: &str = "head.rff_b";
const PRECISION: &str = "head.precision";

impl Checkpoint {
    pub fn from_model(model: &Model, train: Option<&TrainConfig>) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |name, t| {
            tensors.insert(name.to_string(), StoredTensor::encode(t));
        });
        if let Head::Gp(gp) = &model.head {
            tensors.insert(RFF_W.into(), StoredTensor::encode(&gp.w));
            tensors.insert(RFF_B.into(), StoredTensor::encode(&gp.b));
            if let Some(p) = &gp.precision {
                tensors.insert(PRECISION.into(), StoredTensor::encode(p));
            }
        }
        Checkpoint { format: FORMAT.into(), model: model.config.clone(), train: train.cloned(), tensors }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::InvalidInput(format!("unsupported checkpoint format {:?}", self.format)));
        }
        let mut model = Model::new(self.model.clone())?;
        let mut used = 0usize;
        let mut result = Ok(());
        model.visit_mut("", &mut |name, t| {
            if result.is_err() {
                return;
            }
            result = (|| {
                let stored = self
                    .tensors
                    .get(name)
                    .ok_or_else(|| Error::InvalidInput(format!("checkpoint is missing tensor {name}")))?;
                let value = stored.decode(name)?;
                if value.shape() != t.shape() {
                    return Err(Error::shape("checkpoint", value.shape(), t.shape()));
                }
                t.data_mut().copy_from_slice(value.data());
                used += 1;
                Ok(())
            })();
        });
        result?;
        if let Head::Gp(gp) = &mut model.head {
            for (name, slot) in [(RFF_W, &mut gp.w), (RFF_B, &mut gp.b)] {
                let stored = self
                    .tensors
                    .get(name)
                    .ok_or_else(|| Error::InvalidInput(format!("checkpoint is missing tensor {name}")))?;
                let value = stored.decode(name)?;
                if value.shape() != slot.shape() {
                    return Err(Error::shape("checkpoint", value.shape(), slot.shape()));
                }
                *slot = value;
                used += 1;
            }
            if let Some(p) = self.tensors.get(PRECISION) {
                gp.precision = Some(p.decode(PRECISION)?);
                used += 1;
            }
            gp.validate()?;
        }
        if used != self.tensors.len() {
            let mut known = Vec::new();
            model.visit("", &mut |n, _| known.push(n.to_string()));
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| !known.contains(k) && ![RFF_W, RFF_B, PRECISION].contains(&k.as_str()))
                .collect();
            return Err(Error::InvalidInput(format!("checkpoint has unexpected tensors {extra:?}")));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("bad checkpoint: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn save_model(model: &Model, train: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, train).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, Option<TrainConfig>)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_model()?, ck.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Kernel;
    use crate::gp_head::GpConfig;
    use crate::model::HeadKind;

    fn cfg(head: HeadKind) -> ModelConfig {
        ModelConfig {
            depth: 1,
            d_model: 4,
            heads: 2,
            d_ff: 4,
            n_tokens: 2,
            kernel: Kernel::Lrsa,
            head_kind: head,
            gp: GpConfig { features: 8, ..GpConfig::default() },
            seed: 5,
            ..ModelConfig::two_moons()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for head in [HeadKind::Dense, HeadKind::Gp] {
            let mut m = Model::new(cfg(head)).unwrap();
            m.embed.w.data_mut()[0] = 0.1 + 0.2; // not representable in short decimal
            if let Some(gp) = m.gp_mut() {
                gp.precision = Some(Tensor::eye(8).scale(1.0 / 3.0));
            }
            let text = Checkpoint::from_model(&m, None).to_json().unwrap();
            let back = Checkpoint::from_json(&text).unwrap().to_model().unwrap();
            let mut a = Vec::new();
            m.visit("", &mut |_, t| a.extend(t.data().iter().map(|v| v.to_bits())));
            let mut b = Vec::new();
            back.visit("", &mut |_, t| b.extend(t.data().iter().map(|v| v.to_bits())));
            assert_eq!(a, b);
            assert_eq!(m.gp().map(|g| &g.w), back.gp().map(|g| &g.w));
            assert_eq!(m.gp().map(|g| &g.precision), back.gp().map(|g| &g.precision));
            assert_eq!(Checkpoint::from_model(&back, None).to_json().unwrap(), text);
        }
    }

    #[test]
    fn missing_or_extra_tensors_are_rejected() {
        let m = Model::new(cfg(HeadKind::Dense)).unwrap();
        let mut ck = Checkpoint::from_model(&m, None);
        let removed = ck.tensors.remove("embed.cls").unwrap();
        assert!(ck.to_model().is_err());
        ck.tensors.insert("embed.cls".into(), removed.clone());
        ck.tensors.insert("bogus".into(), removed);
        assert!(ck.to_model().is_err());
    }
}
