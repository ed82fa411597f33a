//! Autoregressive topology generator.
//!
//! Each step picks the role of the next agent (or END) by scoring a
//! projected "intent" vector against projected role embeddings, then
//! decides the new agent's incoming links one source at a time, from the
//! most recent agent back to the first.

mod model;
mod session;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EmbeddingProvider, EncodingError, RoleRegistry, TaskQuery};
use crate::graph::{CollabGraph, GraphError};
use crate::kernel::{softmax, Array, KernelError, Tape, Var};

pub use model::{ModelConfig, TopologyModel};
pub(crate) use session::{Decider, NodeChoice, Session, Unrolled};

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("END was chosen at the first step; the topology is empty")]
    EmptyTopology,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("capacity error: {0}")]
    Capacity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodePolicy {
    pub mode: DecodeMode,
    /// Softmax / sigmoid temperature in sample mode.
    pub temperature: f32,
    /// Greedy mode adds an edge when its probability is at least this.
    pub edge_threshold: f32,
    pub max_nodes: usize,
    pub seed: u64,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            edge_threshold: 0.5,
            max_nodes: 10,
            seed: 0,
        }
    }
}

impl DecodePolicy {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn sample(seed: u64) -> Self {
        Self {
            mode: DecodeMode::Sample,
            seed,
            ..Self::default()
        }
    }

    pub fn with_max_nodes(mut self, n: usize) -> Self {
        self.max_nodes = n;
        self
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(GenerateError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.edge_threshold > 0.0 && self.edge_threshold < 1.0) {
            return Err(GenerateError::Config(format!(
                "edge threshold must lie in (0, 1), got {}",
                self.edge_threshold
            )));
        }
        if self.max_nodes == 0 {
            return Err(GenerateError::Config("max_nodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Decision on one candidate link `source → target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeDecision {
    pub source: usize,
    pub target: usize,
    pub present: bool,
    pub log_prob: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Registry index of the chosen role; `None` for END.
    pub role: Option<usize>,
    pub node_log_prob: f32,
    pub edges: Vec<EdgeDecision>,
}

impl TraceStep {
    pub fn log_prob(&self) -> f32 {
        self.node_log_prob + self.edges.iter().map(|e| e.log_prob).sum::<f32>()
    }
}

/// Every decision of one generation with its log-probability under the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub steps: Vec<TraceStep>,
    pub total_log_prob: f32,
    /// False when generation stopped at the node cap instead of on END.
    pub ended_on_end: bool,
}

/// Hidden state of the node generator before step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    pub h_node: Array,
    pub history: Vec<usize>,
    pub step: usize,
}

impl GeneratorState {
    pub fn initial(config: &ModelConfig) -> Self {
        Self {
            h_node: Array::zeros(&[config.hidden_dim]),
            history: Vec::new(),
            step: 1,
        }
    }
}

/// Incoming-adjacency vector of node `step − 1`: entry `k − 1` is 1 iff the
/// prefix has edge `(k, step − 1)`. Width `max_nodes − 1`.
pub fn edge_feature(prefix: &CollabGraph, step: usize, max_nodes: usize) -> Result<Array, GenerateError> {
    if step == 0 {
        return Err(GenerateError::Config("step index starts at 1".into()));
    }
    if max_nodes < 2 {
        return Err(GenerateError::Capacity("edge features need max_nodes ≥ 2".into()));
    }
    let previous = step - 1;
    if previous > max_nodes {
        return Err(GenerateError::Capacity(format!(
            "node {previous} exceeds max_nodes {max_nodes}"
        )));
    }
    let mut v = vec![0.0f32; max_nodes - 1];
    if previous >= 2 {
        for k in prefix.predecessors(previous) {
            if k < previous {
                v[k - 1] = 1.0;
            }
        }
    }
    Ok(Array::vector(v))
}

/// Gated fusion of history and task embeddings, on plain arrays.
pub fn fuse_context(f_hist: &Array, f_q: &Array) -> Result<(Array, f32), GenerateError> {
    let mut tape = Tape::new();
    let h = tape.input(f_hist.clone());
    let q = tape.input(f_q.clone());
    let d = f_q.len() as f32;
    let dot = tape.dot(h, q)?;
    let scaled = tape.scale(dot, 1.0 / d.sqrt())?;
    let gate = tape.sigmoid(scaled)?;
    let diff = tape.sub(q, h)?;
    let mix = tape.scalar_mul(gate, diff)?;
    let out = tape.add(h, mix)?;
    Ok((tape.value(out)?.clone(), tape.scalar(gate)?))
}

struct PolicyDecider {
    policy: DecodePolicy,
    rng: ChaCha8Rng,
}

impl Decider for PolicyDecider {
    fn node(&mut self, _step: usize, scores: &Array) -> Result<NodeChoice, GenerateError> {
        let end = scores.len() - 1;
        let index = match self.policy.mode {
            DecodeMode::Greedy => {
                let mut best = 0;
                for (k, &s) in scores.data().iter().enumerate() {
                    if s > scores.data()[best] {
                        best = k;
                    }
                }
                best
            }
            DecodeMode::Sample => {
                let t = self.policy.temperature;
                let scaled = Array::vector(scores.data().iter().map(|s| s / t).collect());
                let probs = softmax(&scaled);
                let u: f64 = self.rng.gen();
                let mut acc = 0.0f64;
                let mut pick = end;
                for (k, &p) in probs.data().iter().enumerate() {
                    acc += p as f64;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                pick
            }
        };
        Ok(if index == end { NodeChoice::End } else { NodeChoice::Role(index) })
    }

    fn edge(&mut self, _source: usize, _target: usize, logit: f32) -> bool {
        match self.policy.mode {
            DecodeMode::Greedy => crate::kernel::sigmoid(logit as f64) >= self.policy.edge_threshold as f64,
            DecodeMode::Sample => {
                let p = crate::kernel::sigmoid(logit as f64 / self.policy.temperature as f64);
                self.rng.gen::<f64>() < p
            }
        }
    }
}

/// Replays a fixed graph: its roles in order, then END.
pub(crate) struct TeacherDecider {
    roles: Vec<usize>,
    graph: CollabGraph,
}

impl TeacherDecider {
    pub fn new(graph: CollabGraph, registry: &RoleRegistry) -> Result<Self, GenerateError> {
        let roles = graph
            .roles()
            .iter()
            .map(|r| {
                registry
                    .index_of(r)
                    .ok_or_else(|| GenerateError::Lookup(format!("role `{r}` is not registered")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { roles, graph })
    }
}

impl Decider for TeacherDecider {
    fn node(&mut self, step: usize, _scores: &Array) -> Result<NodeChoice, GenerateError> {
        Ok(match self.roles.get(step - 1) {
            Some(&k) => NodeChoice::Role(k),
            None => NodeChoice::End,
        })
    }

    fn edge(&mut self, source: usize, target: usize, _logit: f32) -> bool {
        self.graph.has_edge(source, target)
    }
}

/// Teacher-forced pass over one graph, kept on its tape for training.
pub(crate) struct TeacherForced {
    pub tape: Tape,
    pub node_terms: Vec<Var>,
    pub edge_terms: Vec<Var>,
    pub total_log_prob: f32,
}

/// A model bound to an embedding provider and a role registry.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    model: &'a TopologyModel,
    provider: &'a EmbeddingProvider,
    registry: &'a RoleRegistry,
}

impl<'a> Generator<'a> {
    pub fn new(
        model: &'a TopologyModel,
        provider: &'a EmbeddingProvider,
        registry: &'a RoleRegistry,
    ) -> Result<Self, GenerateError> {
        let raw = model.config().raw_dim;
        if provider.dim() != raw || registry.dim() != raw {
            return Err(GenerateError::Config(format!(
                "embedding widths disagree: model {raw}, provider {}, registry {}",
                provider.dim(),
                registry.dim()
            )));
        }
        Ok(Self {
            model,
            provider,
            registry,
        })
    }

    pub fn model(&self) -> &TopologyModel {
        self.model
    }

    pub fn registry(&self) -> &RoleRegistry {
        self.registry
    }

    fn session(&self) -> Session<'a> {
        Session::new(self.model, self.registry)
    }

    /// Projected task embedding `f_Q`.
    pub fn encode_task(&self, query: &TaskQuery) -> Result<Array, GenerateError> {
        let base = query.base_embedding(self.provider)?;
        let mut s = self.session();
        let v = s.encode_task(&base)?;
        Ok(s.value(v)?.clone())
    }

    /// Final `GRU_prev` state over the given roles; the learned initial
    /// vector for an empty history.
    pub fn history_embed(&self, roles: &[usize]) -> Result<Array, GenerateError> {
        let mut s = self.session();
        let mut h = s.history_start()?;
        for &r in roles {
            h = s.history_push(h, r)?;
        }
        Ok(s.value(h)?.clone())
    }

    /// One node-GRU update from fused context and edge features.
    pub fn node_step(&self, f_cont: &Array, f_edge: &Array, state: &GeneratorState) -> Result<GeneratorState, GenerateError> {
        if state.step != state.history.len() + 1 {
            return Err(GenerateError::Config(format!(
                "state step {} does not follow a history of {}",
                state.step,
                state.history.len()
            )));
        }
        let mut s = self.session();
        let c = s.tape.input(f_cont.clone());
        let h = s.tape.input(state.h_node.clone());
        let out = s.node_step(c, f_edge.clone(), h)?;
        Ok(GeneratorState {
            h_node: s.value(out)?.clone(),
            history: state.history.clone(),
            step: state.step,
        })
    }

    /// Scores and probabilities over the registry roles followed by END.
    pub fn score_roles(&self, state: &GeneratorState) -> Result<(Array, Array), GenerateError> {
        let mut s = self.session();
        let h = s.tape.input(state.h_node.clone());
        let scores = s.scores(h)?;
        let scores = s.value(scores)?.clone();
        let probs = softmax(&scores);
        Ok((scores, probs))
    }

    /// Incoming-edge decisions for node `step` given the current hidden state.
    pub fn edge_sequence(
        &self,
        state: &GeneratorState,
        step: usize,
        policy: &DecodePolicy,
    ) -> Result<Vec<EdgeDecision>, GenerateError> {
        policy.validate()?;
        let mut s = self.session();
        let h = s.tape.input(state.h_node.clone());
        let mut decider = PolicyDecider {
            policy: *policy,
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
        };
        Ok(s.edges_for(h, step, &mut decider)?.into_iter().map(|(d, _)| d).collect())
    }

    /// Generates a topology for `query`.
    pub fn generate(&self, query: &TaskQuery, policy: &DecodePolicy) -> Result<(CollabGraph, GenerationTrace), GenerateError> {
        policy.validate()?;
        if self.registry.is_empty() {
            return Err(GenerateError::Config("the role registry is empty".into()));
        }
        let cap = policy.max_nodes.min(self.model.config().max_nodes);
        let base = query.base_embedding(self.provider)?;
        let mut s = self.session();
        let f_q = s.encode_task(&base)?;
        let mut decider = PolicyDecider {
            policy: *policy,
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
        };
        let run = s.unroll(f_q, cap, &mut decider)?;
        if run.graph.node_count() == 0 {
            return Err(GenerateError::EmptyTopology);
        }
        let total = run.total_log_prob();
        let Unrolled { graph, steps, ended, .. } = run;
        let graph = graph.with_meta(Some(query.text().to_string()), Some("generated".into()));
        Ok((
            graph,
            GenerationTrace {
                steps,
                total_log_prob: total,
                ended_on_end: ended,
            },
        ))
    }

    pub(crate) fn teacher_forced(&self, query: &TaskQuery, graph: &CollabGraph) -> Result<TeacherForced, GenerateError> {
        let cap = self.model.config().max_nodes;
        if graph.node_count() == 0 {
            return Err(GenerateError::Config("cannot score an empty graph".into()));
        }
        if graph.node_count() > cap {
            return Err(GenerateError::Capacity(format!(
                "graph has {} nodes, the model supports {cap}",
                graph.node_count()
            )));
        }
        let ordered = graph.relabel(&graph.canonical_order()?)?;
        let mut decider = TeacherDecider::new(ordered, self.registry)?;
        let base = query.base_embedding(self.provider)?;
        let mut s = self.session();
        let f_q = s.encode_task(&base)?;
        let run = s.unroll(f_q, cap, &mut decider)?;
        let total = run.total_log_prob();
        Ok(TeacherForced {
            tape: s.tape,
            node_terms: run.node_terms,
            edge_terms: run.edge_terms,
            total_log_prob: total,
        })
    }

    /// `log P(G | Q)` under teacher forcing, with nodes taken in `order`.
    ///
    /// Includes the terminal END decision unless the graph already fills
    /// the model's node cap, where decoding stops without one.
    pub fn guided_log_prob(&self, query: &TaskQuery, graph: &CollabGraph, order: &[usize]) -> Result<f32, GenerateError> {
        let ordered = graph.relabel(order)?;
        Ok(self.teacher_forced(query, &ordered)?.total_log_prob)
    }
}
