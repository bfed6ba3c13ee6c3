//! JSON checkpoint container shared by every learned component.
//!
//! ```json
//! { "format_version": 1,
//!   "component": "world_model" | "classifier" | "qnet",
//!   "hyperparameters": { ... },
//!   "tensors": [ { "name": "...", "shape": [..], "data": [..] }, ... ] }
//! ```
//!
//! Tensors appear in the owning model's `named_params` order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::layers::Parameterized;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    WorldModel,
    Classifier,
    Qnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub component: Component,
    pub hyperparameters: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture<H: Serialize>(component: Component, hyperparameters: &H, model: &impl Parameterized<f32>) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            component,
            hyperparameters: serde_json::to_value(hyperparameters)?,
            tensors: model
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        })
    }

    pub fn hyperparameters<H: DeserializeOwned>(&self, expect: Component) -> Result<H> {
        self.check_header(expect)?;
        serde_json::from_value(self.hyperparameters.clone())
            .map_err(|e| Error::Checkpoint(format!("hyperparameters: {e}")))
    }

    fn check_header(&self, expect: Component) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.component != expect {
            return Err(Error::Checkpoint(format!(
                "expected a {expect:?} checkpoint, found {:?}",
                self.component
            )));
        }
        Ok(())
    }

    /// Copies tensors into a model built from this checkpoint's hyperparameters,
    /// rejecting any name or shape disagreement.
    pub fn restore_into(&self, expect: Component, model: &mut impl Parameterized<f32>) -> Result<()> {
        self.check_header(expect)?;
        let mut slots = model.named_params_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), saved) in slots.iter_mut().zip(&self.tensors) {
            if *name != saved.name || slot.shape() != saved.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model slot {name} {:?}",
                    saved.name,
                    saved.shape,
                    slot.shape()
                )));
            }
            let t = Tensor::new(saved.shape.clone(), saved.data.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", saved.name)))?;
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!("tensor {} has non-finite values", saved.name)));
            }
            **slot = t;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_shape_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m: Mlp<f32> = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Identity, 0.0, &mut rng);
        let ck = Checkpoint::capture(Component::Qnet, &vec![3, 4, 2], &m).unwrap();
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();

        let mut fresh: Mlp<f32> = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Identity, 0.0, &mut rng);
        back.restore_into(Component::Qnet, &mut fresh).unwrap();
        assert_eq!(fresh, m);

        let mut wrong: Mlp<f32> = Mlp::new(&[3, 5, 2], Activation::Relu, Activation::Identity, 0.0, &mut rng);
        assert!(back.restore_into(Component::Qnet, &mut wrong).is_err());
        assert!(back.restore_into(Component::Classifier, &mut fresh).is_err());
    }
}
