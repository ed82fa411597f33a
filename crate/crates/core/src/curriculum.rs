//! Training corpora: exploration data from dense configurations, and
//! efficiency data built from simple configurations, pruned variants and
//! replayed exploration examples.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodingError, TaskQuery};
use crate::kernel::Array;
use crate::graph::{CollabGraph, GraphError};

#[derive(Debug, thiserror::Error)]
pub enum CurriculumError {
    #[error("invalid blueprint: {0}")]
    Blueprint(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("oracle failed: {0}")]
    Oracle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Chain,
    Star,
    Tree,
    Complete,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleSource {
    Explicit(Vec<String>),
    SampleFromPool,
}

/// High-level description of a graph to synthesise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigBlueprint {
    pub topology: Topology,
    pub agent_num: usize,
    pub roles: RoleSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_prob: Option<f64>,
}

impl ConfigBlueprint {
    pub fn new(topology: Topology, agent_num: usize) -> Self {
        Self {
            topology,
            agent_num,
            roles: RoleSource::SampleFromPool,
            edge_prob: (topology == Topology::Random).then_some(0.5),
        }
    }

    pub fn with_roles(mut self, roles: Vec<String>) -> Self {
        self.roles = RoleSource::Explicit(roles);
        self
    }

    pub fn validate(&self) -> Result<(), CurriculumError> {
        if self.agent_num == 0 {
            return Err(CurriculumError::Blueprint("agent_num must be at least 1".into()));
        }
        if self.topology == Topology::Star && self.agent_num < 2 {
            return Err(CurriculumError::Blueprint("star needs at least 2 agents".into()));
        }
        if let RoleSource::Explicit(r) = &self.roles {
            if r.len() != self.agent_num {
                return Err(CurriculumError::Blueprint(format!(
                    "{} explicit roles for {} agents",
                    r.len(),
                    self.agent_num
                )));
            }
        }
        match (self.topology, self.edge_prob) {
            (Topology::Random, None) => Err(CurriculumError::Blueprint("random topology needs edge_prob".into())),
            (_, Some(p)) if !(0.0..=1.0).contains(&p) => {
                Err(CurriculumError::Blueprint(format!("edge_prob {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Dense configurations used for exploration data.
pub fn complex_configs() -> Vec<ConfigBlueprint> {
    let mut out = Vec::new();
    for t in [Topology::Complete, Topology::Random, Topology::Star] {
        for n in 4..=6 {
            out.push(ConfigBlueprint::new(t, n));
        }
    }
    out
}

/// Small configurations used for efficiency data.
pub fn simple_configs() -> Vec<ConfigBlueprint> {
    let mut out = Vec::new();
    for t in [Topology::Chain, Topology::Tree, Topology::Star] {
        for n in 2..=3 {
            out.push(ConfigBlueprint::new(t, n));
        }
    }
    out
}

/// Deterministic graph for `(blueprint, seed)`. Sampled roles are drawn
/// uniformly with replacement from `pool`.
pub fn build_graph(c: &ConfigBlueprint, pool: &[String], seed: u64) -> Result<CollabGraph, CurriculumError> {
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.agent_num;
    let roles = match &c.roles {
        RoleSource::Explicit(r) => r.clone(),
        RoleSource::SampleFromPool => {
            if pool.is_empty() {
                return Err(CurriculumError::Blueprint("role pool is empty".into()));
            }
            (0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
        }
    };
    let mut edges = Vec::new();
    match c.topology {
        Topology::Chain => edges.extend((1..n).map(|j| (j, j + 1))),
        Topology::Star => edges.extend((2..=n).map(|k| (1, k))),
        Topology::Tree => {
            for k in 2..=n {
                edges.push((rng.gen_range(1..k), k));
            }
        }
        Topology::Complete => {
            for i in 2..=n {
                edges.extend((1..i).map(|j| (j, i)));
            }
        }
        Topology::Random => {
            let p = c.edge_prob.unwrap_or(0.5);
            for i in 2..=n {
                for j in 1..i {
                    if rng.gen_bool(p) {
                        edges.push((j, i));
                    }
                }
            }
        }
    }
    Ok(CollabGraph::from_parts(roles, edges))
}

/// Recognises the chain / star / complete families; `None` otherwise.
pub fn classify(g: &CollabGraph) -> Option<Topology> {
    let n = g.node_count();
    if n < 3 {
        return None;
    }
    let edges = g.edge_set();
    let chain: Vec<_> = (1..n).map(|j| (j, j + 1)).collect();
    let star: Vec<_> = (2..=n).map(|k| (1, k)).collect();
    if edges.len() == n * (n - 1) / 2 && edges.iter().all(|&(j, i)| j < i) {
        Some(Topology::Complete)
    } else if edges.iter().copied().eq(chain) {
        Some(Topology::Chain)
    } else if edges.iter().copied().eq(star) {
        Some(Topology::Star)
    } else {
        None
    }
}

/// Structural requirement attached to a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// Some node with role `from` reaches some other node with role `to`.
    Path { from: String, to: String },
    /// Some node with `role` has at least `min_out` successors.
    Hub {
        role: String,
        #[serde(default = "default_min_out")]
        min_out: usize,
    },
    NodeCount {
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
    },
}

fn default_min_out() -> usize {
    2
}

impl Predicate {
    pub fn holds(&self, g: &CollabGraph) -> bool {
        let with_role = |r: &str| -> Vec<usize> { (1..=g.node_count()).filter(|&k| g.role(k) == Some(r)).collect() };
        match self {
            Predicate::Path { from, to } => {
                let targets = with_role(to);
                with_role(from)
                    .into_iter()
                    .any(|u| targets.iter().any(|&v| v != u && g.has_path(u, v)))
            }
            Predicate::Hub { role, min_out } => with_role(role).into_iter().any(|u| g.successors(u).len() >= *min_out),
            Predicate::NodeCount { min, max } => {
                let n = g.node_count();
                min.map_or(true, |m| n >= m) && max.map_or(true, |m| n <= m)
            }
        }
    }
}

/// Entry of a task-suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub query: String,
    #[serde(default)]
    pub required_roles: Vec<String>,
    pub predicate: Predicate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, query: impl Into<String>, required_roles: Vec<String>, predicate: Predicate) -> Self {
        Self {
            id: id.into(),
            query: query.into(),
            required_roles,
            predicate,
            expected_answer: None,
            embedding: None,
        }
    }

    pub fn task_query(&self) -> Result<TaskQuery, CurriculumError> {
        Ok(match &self.embedding {
            Some(e) => TaskQuery::with_embedding(self.query.clone(), Array::vector(e.clone()))?,
            None => TaskQuery::new(self.query.clone())?,
        })
    }

    /// Every required role appears at least as often as listed.
    pub fn roles_satisfied(&self, g: &CollabGraph) -> bool {
        let mut need: HashMap<&str, usize> = HashMap::new();
        for r in &self.required_roles {
            *need.entry(r).or_default() += 1;
        }
        need.into_iter()
            .all(|(r, k)| g.roles().iter().filter(|x| x.as_str() == r).count() >= k)
    }
}

pub fn read_task_suite(path: &Path) -> Result<Vec<TaskSpec>, CurriculumError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

/// `S(Q, G)`: whether graph `G` succeeds on task `Q`.
pub trait SuccessOracle {
    fn check(&self, task: &TaskSpec, graph: &CollabGraph) -> Result<bool, CurriculumError>;
}

/// Required roles plus the task's structural predicate. Empty graphs fail.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleOracle;

impl SuccessOracle for RuleOracle {
    fn check(&self, task: &TaskSpec, graph: &CollabGraph) -> Result<bool, CurriculumError> {
        Ok(graph.node_count() > 0 && task.roles_satisfied(graph) && task.predicate.holds(graph))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantOracle(pub bool);

impl SuccessOracle for ConstantOracle {
    fn check(&self, _: &TaskSpec, _: &CollabGraph) -> Result<bool, CurriculumError> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleSource {
    Exp,
    Simple,
    Pruned,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: String,
    pub graph: CollabGraph,
    pub source: ExampleSource,
    #[serde(default = "truthy")]
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

fn truthy() -> bool {
    true
}

impl TrainingExample {
    pub fn from_task(task: &TaskSpec, graph: CollabGraph, source: ExampleSource) -> Self {
        Self {
            query: task.query.clone(),
            graph,
            source,
            success: true,
            task_id: Some(task.id.clone()),
            embedding: task.embedding.clone(),
        }
    }

    pub fn task_query(&self) -> Result<TaskQuery, CurriculumError> {
        Ok(match &self.embedding {
            Some(e) => TaskQuery::with_embedding(self.query.clone(), Array::vector(e.clone()))?,
            None => TaskQuery::new(self.query.clone())?,
        })
    }
}

pub type Dataset = Vec<TrainingExample>;

/// Per-instance seed for the `(task, config)` cell of a synthesis grid.
pub fn instance_seed(seed: u64, task: usize, config: usize) -> u64 {
    let mut z = seed ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (config as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn synth(
    tasks: &[TaskSpec],
    configs: &[ConfigBlueprint],
    pool: &[String],
    oracle: &dyn SuccessOracle,
    seed: u64,
    source: ExampleSource,
) -> Result<Dataset, CurriculumError> {
    if tasks.is_empty() || configs.is_empty() {
        return Err(CurriculumError::Argument("need at least one task and one configuration".into()));
    }
    let mut out = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        for (ci, c) in configs.iter().enumerate() {
            let g = build_graph(c, pool, instance_seed(seed, ti, ci))?;
            match oracle.check(task, &g) {
                Ok(true) => out.push(TrainingExample::from_task(task, g, source)),
                Ok(false) => {}
                Err(e) => log::warn!("skipping task {} config {ci}: {e}", task.id),
            }
        }
    }
    if out.is_empty() {
        log::warn!("no {source:?} instance passed the oracle");
    }
    Ok(out)
}

/// Exploration set: every successful `(G(c), Q)` over tasks × configs.
pub fn synth_exploration(
    tasks: &[TaskSpec],
    configs: &[ConfigBlueprint],
    pool: &[String],
    oracle: &dyn SuccessOracle,
    seed: u64,
) -> Result<Dataset, CurriculumError> {
    synth(tasks, configs, pool, oracle, seed, ExampleSource::Exp)
}

/// Same filter over simple configurations, tagged `simple`.
pub fn synth_simple(
    tasks: &[TaskSpec],
    configs: &[ConfigBlueprint],
    pool: &[String],
    oracle: &dyn SuccessOracle,
    seed: u64,
) -> Result<Dataset, CurriculumError> {
    synth(tasks, configs, pool, oracle, seed, ExampleSource::Simple)
}

/// All single-edge and single-node removals of `g`: edges in ascending
/// order, then nodes in ascending id order.
pub fn single_removals(g: &CollabGraph) -> Vec<CollabGraph> {
    let mut out = Vec::new();
    for (j, i) in g.edges() {
        let mut v = g.clone();
        v.remove_edge(j, i);
        out.push(v);
    }
    for id in 1..=g.node_count() {
        let mut v = g.clone();
        if v.remove_node(id).is_ok() {
            out.push(v);
        }
    }
    out
}

/// Single-removal variants of `example` that still pass the oracle.
pub fn prune_variants(
    example: &TrainingExample,
    task: &TaskSpec,
    oracle: &dyn SuccessOracle,
) -> Result<Vec<TrainingExample>, CurriculumError> {
    if !example.success {
        return Err(CurriculumError::Argument("can only prune successful examples".into()));
    }
    let mut out = Vec::new();
    for g in single_removals(&example.graph) {
        if g.node_count() == 0 {
            continue;
        }
        match oracle.check(task, &g) {
            Ok(true) => out.push(TrainingExample {
                graph: g,
                source: ExampleSource::Pruned,
                ..example.clone()
            }),
            Ok(false) => {}
            Err(e) => log::warn!("skipping pruned variant of {}: {e}", task.id),
        }
    }
    Ok(out)
}

/// Prunes every example whose task id is found in `tasks`.
pub fn prune_dataset(
    data: &[TrainingExample],
    tasks: &[TaskSpec],
    oracle: &dyn SuccessOracle,
) -> Result<Dataset, CurriculumError> {
    let by_id: HashMap<&str, &TaskSpec> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut out = Vec::new();
    for ex in data {
        let Some(task) = ex.task_id.as_deref().and_then(|id| by_id.get(id)) else {
            log::warn!("example without a known task id skipped during pruning");
            continue;
        };
        out.extend(prune_variants(ex, task, oracle)?);
    }
    Ok(out)
}

/// `simple ∪ pruned ∪ replay`, where replay is `⌈f·|exp|⌉` exploration
/// examples drawn without replacement.
pub fn assemble_efficiency(
    simple: &[TrainingExample],
    pruned: &[TrainingExample],
    exp: &[TrainingExample],
    replay_fraction: f64,
    seed: u64,
) -> Result<Dataset, CurriculumError> {
    if !(0.0..=1.0).contains(&replay_fraction) {
        return Err(CurriculumError::Argument(format!("replay fraction {replay_fraction} outside [0, 1]")));
    }
    let k = ((replay_fraction * exp.len() as f64).ceil() as usize).min(exp.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, exp.len(), k).into_vec();
    picks.sort_unstable();
    let mut out = Vec::with_capacity(simple.len() + pruned.len() + k);
    out.extend(simple.iter().map(|e| TrainingExample { source: ExampleSource::Simple, ..e.clone() }));
    out.extend(pruned.iter().map(|e| TrainingExample { source: ExampleSource::Pruned, ..e.clone() }));
    out.extend(picks.into_iter().map(|i| TrainingExample {
        source: ExampleSource::Replay,
        ..exp[i].clone()
    }));
    Ok(out)
}

/// Deterministic topological order (Kahn, ascending tie-break).
pub fn canonical_order(g: &CollabGraph) -> Result<Vec<usize>, GraphError> {
    g.canonical_order()
}

/// Re-runs the oracle over stored examples; returns indices that fail.
pub fn recheck(data: &[TrainingExample], tasks: &[TaskSpec], oracle: &dyn SuccessOracle) -> Result<Vec<usize>, CurriculumError> {
    let by_id: HashMap<&str, &TaskSpec> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut bad = Vec::new();
    for (k, ex) in data.iter().enumerate() {
        let ok = match ex.task_id.as_deref().and_then(|id| by_id.get(id)) {
            Some(task) => ex.success && oracle.check(task, &ex.graph)?,
            None => false,
        };
        if !ok {
            bad.push(k);
        }
    }
    Ok(bad)
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> CurriculumError {
    CurriculumError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes one JSON object per line.
pub fn write_dataset(path: &Path, data: &[TrainingExample]) -> Result<(), CurriculumError> {
    let mut buf = Vec::new();
    for ex in data {
        serde_json::to_writer(&mut buf, ex).map_err(|e| file_err(path, e))?;
        buf.push(b'\n');
    }
    crate::io::write_atomic(path, &buf).map_err(|e| file_err(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CurriculumError> {
    let f = fs::File::open(path).map_err(|e| file_err(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| file_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample =
            serde_json::from_str(&line).map_err(|e| file_err(path, format!("line {}: {e}", k + 1)))?;
        if ex.graph.node_count() == 0 {
            return Err(file_err(path, format!("line {}: empty graph", k + 1)));
        }
        ex.graph.validate_dag().map_err(|e| file_err(path, format!("line {}: {e}", k + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes a dataset as pretty JSON lines to any sink; handy for inspection.
pub fn dump(data: &[TrainingExample], mut w: impl Write) -> std::io::Result<()> {
    for ex in data {
        serde_json::to_writer(&mut w, ex)?;
        writeln!(w)?;
    }
    Ok(())
}
