use indexmap::IndexMap;
use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Param {
    value: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Named parameters with per-parameter Adam moments and a shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::invalid(format!("parameter `{name}` has non-finite entries")));
        }
        let (r, c) = value.shape();
        self.params.insert(
            name.to_owned(),
            Param {
                value,
                m: Matrix::zeros(r, c),
                v: Matrix::zeros(r, c),
            },
        );
        Ok(())
    }

    /// Uniform in `[-scale, scale]`.
    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale));
        self.insert(name, m).expect("finite init");
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name).map(|p| &p.value)
    }

    /// Direct access for tests and finite differences; moments are untouched.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// The subset of `grads` that names parameters of this store.
    pub fn select(&self, grads: &IndexMap<String, Matrix>) -> IndexMap<String, Matrix> {
        grads
            .iter()
            .filter(|(k, _)| self.params.contains_key(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// One bias-corrected Adam update. Parameters absent from `grads` see a
    /// zero gradient. Nothing is modified when validation fails.
    pub fn adam_step(&mut self, grads: &IndexMap<String, Matrix>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter `{name}` of shape {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = grads.get(name);
            let n = p.value.len();
            for k in 0..n {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let m = cfg.beta1 * p.m.data()[k] + (1.0 - cfg.beta1) * gk;
                let v = cfg.beta2 * p.v.data()[k] + (1.0 - cfg.beta2) * gk * gk;
                p.m.data_mut()[k] = m;
                p.v.data_mut()[k] = v;
                let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                p.value.data_mut()[k] -= update;
            }
        }
        Ok(())
    }

    /// Parameter values only, in insertion order.
    pub fn values(&self) -> IndexMap<String, Matrix> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Zeroes the Adam moments and step count, keeping values.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in self.params.values_mut() {
            p.m.data_mut().fill(0.0);
            p.v.data_mut().fill(0.0);
        }
    }

    pub fn from_values(values: IndexMap<String, Matrix>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (k, v) in values {
            store.insert(&k, v)?;
        }
        Ok(store)
    }
}
