use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::DEFAULT_RAW_DIM;
use crate::kernel::{Array, KernelError, ParamStore, Tape, Var};

/// Architecture sizes. `max_nodes` fixes the edge-feature width and the
/// longest graph the model can describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of raw text embeddings (query and role rows).
    pub raw_dim: usize,
    /// Task / history / role-projection width.
    pub embed_dim: usize,
    /// Node and edge GRU width.
    pub hidden_dim: usize,
    pub max_nodes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            raw_dim: DEFAULT_RAW_DIM,
            embed_dim: 384,
            hidden_dim: 256,
            max_nodes: 10,
        }
    }
}

impl ModelConfig {
    pub fn edge_feature_dim(&self) -> usize {
        self.max_nodes - 1
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.raw_dim < 2 || self.embed_dim < 1 || self.hidden_dim < 1 {
            return Err(KernelError::Shape(format!("invalid model sizes {self:?}")));
        }
        if self.max_nodes < 2 {
            return Err(KernelError::Shape("max_nodes must be at least 2".into()));
        }
        Ok(())
    }
}

pub(crate) const EDGE_CATEGORIES: usize = 3;

/// The trainable topology generator: configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyModel {
    config: ModelConfig,
    params: ParamStore,
}

fn insert_mlp(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), KernelError> {
    store.insert_uniform(&format!("{prefix}.w1"), &[hidden, input], input, rng)?;
    store.insert_uniform(&format!("{prefix}.b1"), &[hidden], input, rng)?;
    store.insert_uniform(&format!("{prefix}.w2"), &[output, hidden], hidden, rng)?;
    store.insert_uniform(&format!("{prefix}.b2"), &[output], hidden, rng)?;
    Ok(())
}

impl TopologyModel {
    /// Fresh model with seeded uniform initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, KernelError> {
        config.validate()?;
        let ModelConfig {
            raw_dim: raw,
            embed_dim: d,
            hidden_dim: h,
            max_nodes: _,
        } = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.insert("task.ln.gain", Array::filled(&[raw], 1.0))?;
        p.insert("task.ln.bias", Array::zeros(&[raw]))?;
        insert_mlp(&mut p, "task.ffn", raw, d, d, &mut rng)?;
        p.insert_uniform("hist.h0", &[d], d, &mut rng)?;
        p.insert_gru("gru_prev", raw, d, &mut rng)?;
        insert_mlp(&mut p, "node_mlp", d + config.edge_feature_dim(), h, h, &mut rng)?;
        p.insert_gru("gru_node", h, h, &mut rng)?;
        insert_mlp(&mut p, "pred_n", h, h, d, &mut rng)?;
        insert_mlp(&mut p, "role_mlp", raw, d, d, &mut rng)?;
        p.insert_uniform("role.end", &[raw], raw, &mut rng)?;
        insert_mlp(&mut p, "node2edge", h, h, h, &mut rng)?;
        insert_mlp(&mut p, "edge_mlp", EDGE_CATEGORIES, h, h, &mut rng)?;
        p.insert_gru("gru_edge", h, h, &mut rng)?;
        insert_mlp(&mut p, "pred_e", h, h, 1, &mut rng)?;
        Ok(Self { config, params: p })
    }

    /// Wraps existing parameters, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, KernelError> {
        let reference = Self::new(config, 0)?;
        for (name, a) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == a.shape() => {}
                Some(p) => {
                    return Err(KernelError::Shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        a.shape()
                    )))
                }
                None => return Err(KernelError::MissingParam(name.to_string())),
            }
        }
        if params.len() != reference.params.len() {
            return Err(KernelError::Shape("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters used only by the edge generator.
    pub fn is_edge_param(name: &str) -> bool {
        ["node2edge.", "edge_mlp.", "gru_edge.", "pred_e."]
            .iter()
            .any(|p| name.starts_with(p))
    }

    /// Parameters that only feed node scores (never edge probabilities).
    pub fn is_node_head_param(name: &str) -> bool {
        ["pred_n.", "role_mlp.", "role.end"].iter().any(|p| name.starts_with(p))
    }
}

/// Two-layer perceptron `W2·tanh(W1·x + b1) + b2`, optionally squashed.
pub(crate) fn mlp(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    squash_output: bool,
) -> Result<Var, KernelError> {
    let w1 = tape.param(store, &format!("{prefix}.w1"))?;
    let b1 = tape.param(store, &format!("{prefix}.b1"))?;
    let w2 = tape.param(store, &format!("{prefix}.w2"))?;
    let b2 = tape.param(store, &format!("{prefix}.b2"))?;
    let a = tape.linear(x, w1, b1)?;
    let a = tape.tanh(a)?;
    let y = tape.linear(a, w2, b2)?;
    if squash_output {
        tape.tanh(y)
    } else {
        Ok(y)
    }
}
