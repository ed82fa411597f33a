//! Teacher-forced maximum-likelihood training.

mod checkpoint;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumError, TrainingExample};
use crate::encoding::{EmbeddingProvider, RoleRegistry, TaskQuery};
use crate::generator::{GenerateError, Generator, TopologyModel};
use crate::graph::CollabGraph;
use crate::kernel::{AdamConfig, Gradients, KernelError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] CurriculumError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, example {index} (query {query:?})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        index: usize,
        query: String,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    ColdStart,
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the node loss; the edge loss gets `1 − alpha`.
    pub alpha: f32,
    pub lr_cold_start: f32,
    pub lr_fine_tune: f32,
    pub epochs_cold_start: usize,
    pub epochs_fine_tune: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lr_cold_start: 1e-3,
            lr_fine_tune: 2e-4,
            epochs_cold_start: 300,
            epochs_fine_tune: 150,
            batch_size: 8,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.lr_cold_start >= 0.0 && self.lr_fine_tune >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.lr_cold_start > 0.0 && self.lr_fine_tune >= self.lr_cold_start {
            return bad("the fine-tune learning rate must be below the cold-start rate".into());
        }
        if self.lr_cold_start == 0.0 && self.lr_fine_tune > 0.0 {
            return bad("the fine-tune learning rate must be below the cold-start rate".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn learning_rate(&self, phase: Phase) -> f32 {
        match phase {
            Phase::ColdStart => self.lr_cold_start,
            Phase::FineTune => self.lr_fine_tune,
        }
    }

    pub fn epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::ColdStart => self.epochs_cold_start,
            Phase::FineTune => self.epochs_fine_tune,
        }
    }
}

/// Per-example losses: `total = α·node + (1 − α)·edge`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f32,
    pub node: f32,
    pub edge: f32,
}

fn loss_and_grad(
    gen: &Generator<'_>,
    query: &TaskQuery,
    graph: &CollabGraph,
    alpha: f32,
    with_grad: bool,
) -> Result<(LossParts, Option<Gradients>), TrainError> {
    let mut tf = gen.teacher_forced(query, graph)?;
    let tape = &mut tf.tape;
    let node_sum = tape.sum(&tf.node_terms)?;
    let node = -tape.scalar(node_sum)?;
    let mut parts = vec![tape.scale(node_sum, -alpha)?];
    let mut edge = 0.0;
    if !tf.edge_terms.is_empty() {
        let edge_sum = tape.sum(&tf.edge_terms)?;
        edge = -tape.scalar(edge_sum)?;
        parts.push(tape.scale(edge_sum, -(1.0 - alpha))?);
    }
    let loss = tape.sum(&parts)?;
    let total = tape.scalar(loss)?;
    let grads = if with_grad { Some(tape.backward(loss)?) } else { None };
    Ok((LossParts { total, node, edge }, grads))
}

/// Teacher-forced losses for one example.
pub fn example_loss(gen: &Generator<'_>, ex: &TrainingExample, alpha: f32) -> Result<LossParts, TrainError> {
    Ok(loss_and_grad(gen, &ex.task_query()?, &ex.graph, alpha, false)?.0)
}

/// Losses and parameter gradients for one example. Parameters the pass
/// never touches are absent from the returned gradients.
pub fn example_gradients(
    gen: &Generator<'_>,
    ex: &TrainingExample,
    alpha: f32,
) -> Result<(LossParts, Gradients), TrainError> {
    let (l, g) = loss_and_grad(gen, &ex.task_query()?, &ex.graph, alpha, true)?;
    Ok((l, g.expect("requested gradients")))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Option<Phase>,
    pub epochs: Vec<usize>,
    pub total: Vec<f32>,
    pub node: Vec<f32>,
    pub edge: Vec<f32>,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<LossParts> {
        let k = self.total.len().checked_sub(1)?;
        Some(LossParts {
            total: self.total[k],
            node: self.node[k],
            edge: self.edge[k],
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        crate::io::write_atomic(path, self.to_json().as_bytes()).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Runs one phase of mini-batch Adam over `dataset`. Optimiser moments are
/// reset at the start of every phase.
pub fn train_phase(
    model: &mut TopologyModel,
    provider: &EmbeddingProvider,
    registry: &RoleRegistry,
    dataset: &[TrainingExample],
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("the training set is empty".into()));
    }
    let queries = dataset.iter().map(|e| e.task_query()).collect::<Result<Vec<_>, _>>()?;
    let lr = cfg.learning_rate(phase);
    let start = Instant::now();
    let phase_salt = match phase {
        Phase::ColdStart => 0x636f_6c64,
        Phase::FineTune => 0x6669_6e65,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ phase_salt);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport {
        phase: Some(phase),
        ..TrainReport::default()
    };
    model.params_mut().reset_optimizer();

    for epoch in 1..=cfg.epochs(phase) {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(model.params());
            {
                let gen = Generator::new(model, provider, registry)?;
                for &k in batch {
                    let (l, g) = loss_and_grad(&gen, &queries[k], &dataset[k].graph, cfg.alpha, true)?;
                    let g = g.expect("requested gradients");
                    let non_finite = |what| TrainError::NonFinite {
                        what,
                        epoch,
                        index: k,
                        query: dataset[k].query.clone(),
                    };
                    if !(l.total.is_finite() && l.node.is_finite() && l.edge.is_finite()) {
                        return Err(non_finite("loss"));
                    }
                    if !g.is_finite() {
                        return Err(non_finite("gradient"));
                    }
                    grads.add_scaled(&g, 1.0 / batch.len() as f32)?;
                    sums[0] += l.total as f64;
                    sums[1] += l.node as f64;
                    sums[2] += l.edge as f64;
                }
            }
            if let Some(c) = cfg.clip_norm {
                grads.clip_global_norm(c);
            }
            model.params_mut().adam_step(&grads, lr, AdamConfig::default())?;
        }
        let n = dataset.len() as f64;
        report.epochs.push(epoch);
        report.total.push((sums[0] / n) as f32);
        report.node.push((sums[1] / n) as f32);
        report.edge.push((sums[2] / n) as f32);
        log::debug!("{phase:?} epoch {epoch}: loss {:.5}", sums[0] / n);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub count: usize,
    pub mean_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub count: usize,
    pub mean_log_likelihood: f64,
    pub by_source: BTreeMap<String, SourceStats>,
}

/// Mean teacher-forced log-likelihood, overall and per source tag.
pub fn evaluate(gen: &Generator<'_>, dataset: &[TrainingExample]) -> Result<Evaluation, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Config("the evaluation set is empty".into()));
    }
    let mut groups: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut total = 0.0;
    for ex in dataset {
        let order = ex.graph.canonical_order().map_err(GenerateError::from)?;
        let lp = gen.guided_log_prob(&ex.task_query()?, &ex.graph, &order)? as f64;
        total += lp;
        let tag = serde_json::to_value(ex.source).expect("tag serialises");
        let e = groups.entry(tag.as_str().unwrap_or_default().to_string()).or_default();
        e.0 += 1;
        e.1 += lp;
    }
    Ok(Evaluation {
        count: dataset.len(),
        mean_log_likelihood: total / dataset.len() as f64,
        by_source: groups
            .into_iter()
            .map(|(k, (c, s))| {
                (
                    k,
                    SourceStats {
                        count: c,
                        mean_log_likelihood: s / c as f64,
                    },
                )
            })
            .collect(),
    })
}
