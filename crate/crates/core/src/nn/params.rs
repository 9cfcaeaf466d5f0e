//! Named parameter tensors and the AdamW update rule.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// All trainable tensors of a model, keyed by hierarchical dotted names
/// (`"keypoint.face.spatial.w0"`). Shapes are fixed once inserted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::validation(format!("duplicate parameter '{name}'")));
        }
        self.tensors.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::validation(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::validation(format!("unknown parameter '{name}'")))
    }

    /// Overwrite an existing tensor; the replacement must keep its shape.
    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.raw_dim() != value.raw_dim() {
            return Err(Error::validation(format!(
                "parameter '{name}' shape {:?} cannot be replaced by {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copy every tensor under `prefix` from `other` into this set,
    /// replacing same-named tensors. Used to load pretrained branches
    /// into a full model.
    pub fn adopt_prefixed(&mut self, other: &ParameterSet, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in other.iter() {
            if name.starts_with(prefix) {
                if self.contains(name) {
                    self.set(name, value.clone())?;
                } else {
                    self.insert(name, value.clone())?;
                }
                copied += 1;
            }
        }
        if copied == 0 {
            return Err(Error::validation(format!(
                "no parameters under prefix '{prefix}'"
            )));
        }
        Ok(copied)
    }

    /// Names present here but not in `other`.
    pub fn names_missing_from(&self, other: &ParameterSet) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| !other.contains(k))
            .cloned()
            .collect()
    }
}

/// Uniform Glorot initialization scaled by fan-in and fan-out.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..=limit))
}

/// Decoupled-weight-decay Adam. Gradients arrive as a name-keyed map; any
/// parameter absent from the map is left untouched that step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Array2<f64>>,
    second_moment: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> AdamW {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Array2<f64>>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let value = params.get_mut(name)?;
            if value.raw_dim() != grad.raw_dim() {
                return Err(Error::validation(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    grad.shape(),
                    value.shape()
                )));
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *p -= self.learning_rate
                        * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
        Ok(())
    }
}
