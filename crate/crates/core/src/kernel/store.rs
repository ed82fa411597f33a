use std::collections::BTreeMap;

use rand::Rng;

use super::{Array, KernelError};

/// Gradient of a scalar loss with respect to named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, Array>,
}

impl Gradients {
    pub fn from_map(entries: BTreeMap<String, Array>) -> Self {
        Self { entries }
    }

    /// All-zero gradients shaped like every parameter in `store`.
    pub fn zeros_like(store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(n, a)| (n.to_string(), Array::zeros(a.shape())))
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `factor · other` into matching entries; names absent here are inserted.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f32) -> Result<(), KernelError> {
        for (name, g) in &other.entries {
            match self.entries.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(KernelError::Shape(format!("gradient shape mismatch for {name}")));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += factor * b;
                    }
                }
                None => {
                    let mut scaled = g.clone();
                    scaled.data_mut().iter_mut().for_each(|v| *v *= factor);
                    self.entries.insert(name.clone(), scaled);
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f32 {
        self.entries
            .values()
            .flat_map(|a| a.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f32) -> f32 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for a in self.entries.values_mut() {
                a.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Array::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

/// Named trainable arrays plus Adam moment state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<(), KernelError> {
        if self.params.contains_key(name) {
            return Err(KernelError::DuplicateParam(name.to_string()));
        }
        let n = value.len();
        self.params.insert(name.to_string(), value);
        self.moments.insert(
            name.to_string(),
            Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            },
        );
        Ok(())
    }

    /// Inserts a matrix initialised uniformly in `±1/√fan_in`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<(), KernelError> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Array::new(shape.to_vec(), data)?)
    }

    /// Inserts the nine arrays of a GRU cell under `prefix.*`.
    pub fn insert_gru<R: Rng>(
        &mut self,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<(), KernelError> {
        for gate in ["update", "reset", "candidate"] {
            self.insert_uniform(&format!("{prefix}.w_{gate}"), &[hidden, input], input, rng)?;
            self.insert_uniform(&format!("{prefix}.u_{gate}"), &[hidden, hidden], hidden, rng)?;
            self.insert_uniform(&format!("{prefix}.b_{gate}"), &[hidden], hidden, rng)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    /// Direct mutable access. Moment state is left untouched.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(n, a)| (n.as_str(), a))
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

    pub fn num_values(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Clears optimizer moments and the step counter, keeping parameter values.
    pub fn reset_optimizer(&mut self) {
        for m in self.moments.values_mut() {
            m.first.iter_mut().for_each(|v| *v = 0.0);
            m.second.iter_mut().for_each(|v| *v = 0.0);
        }
        self.step = 0;
    }

    /// One Adam update. Every parameter must have a gradient of matching shape.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f32, cfg: AdamConfig) -> Result<(), KernelError> {
        for (name, p) in &self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| KernelError::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(KernelError::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            let m = self.moments.get_mut(name).expect("moments track params");
            for (k, value) in p.data_mut().iter_mut().enumerate() {
                m.first[k] = cfg.beta1 * m.first[k] + (1.0 - cfg.beta1) * g[k];
                m.second[k] = cfg.beta2 * m.second[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = m.first[k] as f64 / bc1;
                let v_hat = m.second[k] as f64 / bc2;
                let update = (lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
                *value -= update;
            }
        }
        Ok(())
    }
}
