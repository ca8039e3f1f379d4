use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradSet = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Slot {
    value: Tensor,
    velocity: Tensor,
}

/// Named parameters, each paired with a momentum buffer of the same shape.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    slots: BTreeMap<String, Slot>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.slots.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        let velocity = Tensor::zeros(value.shape());
        self.slots.insert(name.to_string(), Slot { value, velocity });
        Ok(())
    }

    /// He-normal weight `[fan_in × fan_out]` plus zero bias `[fan_out]`.
    pub fn insert_affine(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Result<()> {
        let std = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.normal() * std )
            .collect();
        self.insert(&format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, w)?)?;
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn velocity(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.velocity)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Zero gradients with the parameter shapes.
    pub fn zero_grads(&self) -> GradSet {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), Tensor::zeros(s.value.shape())))
            .collect()
    }

    pub fn reset_momentum(&mut self) {
        for slot in self.slots.values_mut() {
            slot.velocity = Tensor::zeros(slot.value.shape());
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, slot) in &self.slots {
            hasher.update(name.as_bytes());
            for d in slot.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in slot.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step(params: &mut ParamSet, grads: &GradSet, lr: f64, momentum: f64) -> Result<()> {
    if grads.len() != params.slots.len() || grads.keys().any(|k| !params.slots.contains_key(k)) {
        let missing: Vec<_> = params
            .slots
            .keys()
            .filter(|k| !grads.contains_key(*k))
            .cloned()
            .collect();
        let extra: Vec<_> = grads
            .keys()
            .filter(|k| !params.slots.contains_key(*k))
            .cloned()
            .collect();
        return Err(Error::Usage(format!(
            "gradient names do not match parameters (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    for (name, grad) in grads {
        let slot = params.slots.get_mut(name).expect("checked above");
        if grad.shape() != slot.value.shape() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                grad.shape(),
                slot.value.shape()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for {name}")));
        }
        for ((p, v), &g) in slot
            .value
            .data_mut()
            .iter_mut()
            .zip(slot.velocity.data_mut())
            .zip(grad.data())
        {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Adds `factor · src` into `dst`, creating missing entries.
pub fn accumulate(dst: &mut GradSet, src: &GradSet, factor: f64) -> Result<()> {
    for (name, g) in src {
        match dst.get_mut(name) {
            Some(acc) => acc.add_scaled(g, factor)?,
            None => {
                dst.insert(name.clone(), g.scale(factor));
            }
        }
    }
    Ok(())
}
