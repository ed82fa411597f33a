//! Command-line front end. `main.rs` only forwards to [`run`].

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{
    self, build_graph, complex_configs, simple_configs, ConfigBlueprint, ConstantOracle, CurriculumError, ExampleSource,
    RuleOracle, SuccessOracle, TaskSpec, Topology,
};
use crate::encoding::{read_role_pool, EmbeddingProvider, EncodingError, RoleRegistry, DEFAULT_RAW_DIM};
use crate::generator::{DecodeMode, DecodePolicy, GenerateError, Generator, ModelConfig, TopologyModel};
use crate::graph::CollabGraph;
use crate::runtime::{self, AgentBackend, Aggregation, ExecOptions, MockBackend, RemoteBackend, RemoteConfig, RuntimeError};
use crate::training::{self, load_checkpoint, save_checkpoint, Phase, TrainConfig, TrainError};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INPUT: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const GENERATION: i32 = 4;
    pub const BACKEND: i32 = 5;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn input(message: impl fmt::Display) -> CliError {
    CliError {
        code: exit::INPUT,
        message: message.to_string(),
    }
}

impl From<EncodingError> for CliError {
    fn from(e: EncodingError) -> Self {
        input(e)
    }
}

impl From<CurriculumError> for CliError {
    fn from(e: CurriculumError) -> Self {
        input(e)
    }
}

impl From<GenerateError> for CliError {
    fn from(e: GenerateError) -> Self {
        let code = match e {
            GenerateError::EmptyTopology => exit::GENERATION,
            GenerateError::Kernel(_) => exit::NUMERIC,
            _ => exit::INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::NonFinite { .. } | TrainError::Kernel(_) => exit::NUMERIC,
            _ => exit::INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        let code = match e {
            RuntimeError::Backend { .. } => exit::BACKEND,
            _ => exit::INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub role_pool: PathBuf,
    pub task_suite: PathBuf,
    pub d_exp: PathBuf,
    pub d_eff: PathBuf,
    pub checkpoint: PathBuf,
    pub fine_tuned: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            role_pool: "roles.json".into(),
            task_suite: "tasks.json".into(),
            d_exp: "out/d_exp.jsonl".into(),
            d_eff: "out/d_eff.jsonl".into(),
            checkpoint: "out/cold_start.json".into(),
            fine_tuned: "out/fine_tune.json".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    /// JSON-lines table of `{"text", "embedding"}`; hashed features when absent.
    pub table: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_RAW_DIM,
            table: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub backend: BackendKind,
    pub remote: RemoteConfig,
    pub rounds: usize,
    pub strategy: String,
    pub max_retries: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            remote: RemoteConfig::from_env(),
            rounds: runtime::DEFAULT_ROUNDS,
            strategy: "summarizer".into(),
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    #[default]
    Rule,
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub oracle: OracleKind,
    pub replay_fraction: f64,
    pub complex: Vec<ConfigBlueprint>,
    pub simple: Vec<ConfigBlueprint>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            oracle: OracleKind::Rule,
            replay_fraction: 0.25,
            complex: complex_configs(),
            simple: simple_configs(),
        }
    }
}

/// Everything a command may need; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub embedding: EmbeddingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodePolicy,
    pub runtime: RuntimeConfig,
    pub synthesis: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            embedding: EmbeddingConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodePolicy::default(),
            runtime: RuntimeConfig::default(),
            synthesis: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))
    }

    /// Seed for one component, derived from the root seed and a fixed label.
    pub fn seed_for(&self, label: &str) -> u64 {
        component_seed(self.seed, label)
    }

    fn provider(&self) -> Result<EmbeddingProvider> {
        Ok(match &self.embedding.table {
            Some(p) => EmbeddingProvider::from_jsonl(p, self.embedding.dim)?,
            None => EmbeddingProvider::hashed(self.embedding.dim),
        })
    }
}

pub fn component_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Parser)]
#[command(name = "topogen", version, about = "Generate, train and run multi-agent collaboration topologies")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    ColdStart,
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TopologyArg {
    Chain,
    Star,
    Tree,
    Complete,
    Random,
}

impl From<TopologyArg> for Topology {
    fn from(t: TopologyArg) -> Self {
        match t {
            TopologyArg::Chain => Topology::Chain,
            TopologyArg::Star => Topology::Star,
            TopologyArg::Tree => Topology::Tree,
            TopologyArg::Complete => Topology::Complete,
            TopologyArg::Random => Topology::Random,
        }
    }
}

#[derive(Debug, Args)]
struct RoleArgs {
    /// Role-pool JSON file.
    #[arg(long)]
    roles: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the exploration and efficiency datasets.
    SynthData {
        #[command(flatten)]
        roles: RoleArgs,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        oracle: Option<OracleKind>,
        #[arg(long)]
        replay_fraction: Option<f64>,
    },
    /// Train one phase and write a checkpoint plus report.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[command(flatten)]
        roles: RoleArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Starting checkpoint (required for fine-tune).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate a topology for a query.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        export_dot: Option<PathBuf>,
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        sample: bool,
        #[arg(long)]
        temperature: Option<f32>,
        /// Extra sampling attempts when END comes first.
        #[arg(long, default_value_t = 3)]
        retries: usize,
    },
    /// Execute a graph on the agent runtime.
    Run {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        rounds: Option<usize>,
        /// majority-vote, terminal-agent:<id>, last-in-order or summarizer.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        /// Task suite entry whose expected answer judges the output.
        #[arg(long)]
        task_id: Option<String>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a fixed topology) on the task suite.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        topology: Option<TopologyArg>,
        /// Agent count for fixed-topology baselines.
        #[arg(long, default_value_t = 4)]
        agents: usize,
        #[command(flatten)]
        roles: RoleArgs,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a graph file to Graphviz DOT.
    ExportDot {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Append roles to a checkpoint's registry without retraining.
    ExtendRoles {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        roles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::INPUT } else { exit::OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::SynthData {
            roles,
            tasks,
            out_dir,
            oracle,
            replay_fraction,
        } => {
            if let Some(p) = roles.roles {
                cfg.paths.role_pool = p;
            }
            if let Some(p) = tasks {
                cfg.paths.task_suite = p;
            }
            if let Some(d) = out_dir {
                cfg.paths.d_exp = d.join("d_exp.jsonl");
                cfg.paths.d_eff = d.join("d_eff.jsonl");
            }
            if let Some(o) = oracle {
                cfg.synthesis.oracle = o;
            }
            if let Some(f) = replay_fraction {
                cfg.synthesis.replay_fraction = f;
            }
            cmd_synth(&cfg)
        }
        Command::Train {
            phase,
            roles,
            data,
            init,
            out,
            epochs,
        } => {
            if let Some(p) = roles.roles {
                cfg.paths.role_pool = p;
            }
            let phase = match phase {
                PhaseArg::ColdStart => Phase::ColdStart,
                PhaseArg::FineTune => Phase::FineTune,
            };
            if let Some(e) = epochs {
                cfg.train.epochs_cold_start = e;
                cfg.train.epochs_fine_tune = e;
            }
            cmd_train(&cfg, phase, data, init, out)
        }
        Command::Generate {
            checkpoint,
            query,
            out,
            export_dot,
            n_max,
            sample,
            temperature,
            retries,
        } => {
            if sample {
                cfg.decode.mode = DecodeMode::Sample;
            }
            if let Some(t) = temperature {
                cfg.decode.temperature = t;
            }
            if let Some(n) = n_max {
                cfg.decode.max_nodes = n;
            }
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            cmd_generate(&cfg, &ckpt, &query, out, export_dot, retries)
        }
        Command::Run {
            graph,
            query,
            rounds,
            strategy,
            backend,
            task_id,
            tasks,
            out,
        } => {
            if let Some(k) = rounds {
                cfg.runtime.rounds = k;
            }
            if let Some(s) = strategy {
                cfg.runtime.strategy = s;
            }
            if let Some(b) = backend {
                cfg.runtime.backend = b;
            }
            if let Some(p) = tasks {
                cfg.paths.task_suite = p;
            }
            cmd_run(&cfg, &graph, &query, task_id.as_deref(), out)
        }
        Command::Eval {
            checkpoint,
            topology,
            agents,
            roles,
            tasks,
            out,
        } => {
            if let Some(p) = roles.roles {
                cfg.paths.role_pool = p;
            }
            if let Some(p) = tasks {
                cfg.paths.task_suite = p;
            }
            let source = match topology {
                Some(t) => EvalSource::Fixed(t.into(), agents),
                None => EvalSource::Checkpoint(checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone())),
            };
            cmd_eval(&cfg, source, out)
        }
        Command::ExportDot { graph, out } => {
            let g = read_graph(&graph)?;
            let dot = g.to_dot();
            match out {
                Some(p) => write_file(&p, dot.as_bytes())?,
                None => print!("{dot}"),
            }
            Ok(())
        }
        Command::ExtendRoles { checkpoint, roles, out } => cmd_extend(&cfg, &checkpoint, &roles, &out),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(input(format!("{}: file not found", path.display())))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::io::write_atomic(path, bytes).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn read_graph(path: &Path) -> Result<CollabGraph> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let g = CollabGraph::from_json(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    g.validate_dag().map_err(|e| input(format!("{}: {e}", path.display())))?;
    Ok(g)
}

fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>> {
    require(path)?;
    let tasks = curriculum::read_task_suite(path)?;
    if tasks.is_empty() {
        return Err(input(format!("{}: task suite is empty", path.display())));
    }
    Ok(tasks)
}

fn load_registry(provider: &EmbeddingProvider, path: &Path) -> Result<RoleRegistry> {
    require(path)?;
    let specs = read_role_pool(path)?;
    if specs.is_empty() {
        return Err(input(format!("{}: role pool is empty", path.display())));
    }
    Ok(RoleRegistry::register(provider, &specs)?)
}

fn oracle_for(kind: OracleKind) -> Box<dyn SuccessOracle> {
    match kind {
        OracleKind::Rule => Box::new(RuleOracle),
        OracleKind::Always => Box::new(ConstantOracle(true)),
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let tasks = load_tasks(&cfg.paths.task_suite)?;
    require(&cfg.paths.role_pool)?;
    let pool: Vec<String> = read_role_pool(&cfg.paths.role_pool)?.into_iter().map(|r| r.name).collect();
    let oracle = oracle_for(cfg.synthesis.oracle);
    let seed = cfg.seed_for("synth");
    let exp = curriculum::synth_exploration(&tasks, &cfg.synthesis.complex, &pool, oracle.as_ref(), seed)?;
    let simple = curriculum::synth_simple(&tasks, &cfg.synthesis.simple, &pool, oracle.as_ref(), seed ^ 1)?;
    let pruned = curriculum::prune_dataset(&exp, &tasks, oracle.as_ref())?;
    let eff = curriculum::assemble_efficiency(&simple, &pruned, &exp, cfg.synthesis.replay_fraction, cfg.seed_for("replay"))?;
    curriculum::write_dataset(&cfg.paths.d_exp, &exp)?;
    curriculum::write_dataset(&cfg.paths.d_eff, &eff)?;
    let count = |s: ExampleSource| eff.iter().filter(|e| e.source == s).count();
    println!("exp {}", exp.len());
    println!("simple {}", count(ExampleSource::Simple));
    println!("pruned {}", count(ExampleSource::Pruned));
    println!("replay {}", count(ExampleSource::Replay));
    println!("wrote {} and {}", cfg.paths.d_exp.display(), cfg.paths.d_eff.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, phase: Phase, data: Option<PathBuf>, init: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let provider = cfg.provider()?;
    let (data, out) = match phase {
        Phase::ColdStart => (
            data.unwrap_or_else(|| cfg.paths.d_exp.clone()),
            out.unwrap_or_else(|| cfg.paths.checkpoint.clone()),
        ),
        Phase::FineTune => (
            data.unwrap_or_else(|| cfg.paths.d_eff.clone()),
            out.unwrap_or_else(|| cfg.paths.fine_tuned.clone()),
        ),
    };
    require(&data)?;
    let (mut model, registry) = match (phase, init) {
        (_, Some(p)) => {
            require(&p)?;
            let (m, manifest) = load_checkpoint(&p)?;
            (m, RoleRegistry::register(&provider, &manifest.roles)?)
        }
        (Phase::FineTune, None) => return Err(input("fine-tune needs a cold-start checkpoint (--init)")),
        (Phase::ColdStart, None) => {
            let model_cfg = ModelConfig {
                raw_dim: provider.dim(),
                ..cfg.model
            };
            let m = TopologyModel::new(model_cfg, cfg.seed_for("init")).map_err(|e| input(e))?;
            (m, load_registry(&provider, &cfg.paths.role_pool)?)
        }
    };
    let dataset = curriculum::read_dataset(&data)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed_for("train"),
        ..cfg.train
    };
    let mut report = training::train_phase(&mut model, &provider, &registry, &dataset, &train_cfg, phase)?;
    save_checkpoint(&out, &model, &registry)?;
    report.checkpoint = Some(out.display().to_string());
    let report_path = out.with_extension("report.json");
    report.write(&report_path)?;
    if let Some(l) = report.final_loss() {
        println!("final loss {:.6} (node {:.6}, edge {:.6})", l.total, l.node, l.edge);
    }
    println!("wrote {} and {}", out.display(), report_path.display());
    Ok(())
}

fn load_generator_parts(cfg: &RunConfig, checkpoint: &Path) -> Result<(TopologyModel, EmbeddingProvider, RoleRegistry)> {
    require(checkpoint)?;
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let provider = EmbeddingProvider::hashed(model.config().raw_dim);
    let provider = match &cfg.embedding.table {
        Some(p) => EmbeddingProvider::from_jsonl(p, model.config().raw_dim)?,
        None => provider,
    };
    let registry = RoleRegistry::register(&provider, &manifest.roles)?;
    if registry.fingerprint() != manifest.registry_fingerprint {
        return Err(input(format!("{}: role registry fingerprint mismatch", checkpoint.display())));
    }
    Ok((model, provider, registry))
}

fn generate_with_retries(
    gen: &Generator<'_>,
    query: &crate::encoding::TaskQuery,
    policy: &DecodePolicy,
    retries: usize,
) -> std::result::Result<(CollabGraph, crate::generator::GenerationTrace), GenerateError> {
    let mut p = *policy;
    let attempts = if p.mode == DecodeMode::Sample { retries + 1 } else { 1 };
    let mut last = GenerateError::EmptyTopology;
    for k in 0..attempts {
        p.seed = policy.seed.wrapping_add(k as u64);
        match gen.generate(query, &p) {
            Err(GenerateError::EmptyTopology) => last = GenerateError::EmptyTopology,
            other => return other,
        }
    }
    Err(last)
}

fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    query: &str,
    out: Option<PathBuf>,
    dot: Option<PathBuf>,
    retries: usize,
) -> Result<()> {
    let (model, provider, registry) = load_generator_parts(cfg, checkpoint)?;
    let gen = Generator::new(&model, &provider, &registry)?;
    let q = crate::encoding::TaskQuery::new(query)?;
    let policy = DecodePolicy {
        seed: cfg.seed_for("decode"),
        ..cfg.decode
    };
    let (graph, trace) = generate_with_retries(&gen, &q, &policy, retries)?;
    match out {
        Some(p) => write_file(&p, graph.to_json_pretty().as_bytes())?,
        None => println!("{}", graph.to_json_pretty()),
    }
    if let Some(p) = dot {
        write_file(&p, graph.to_dot().as_bytes())?;
    }
    eprintln!(
        "nodes {} edges {} log_prob {:.6}",
        graph.node_count(),
        graph.edge_count(),
        trace.total_log_prob
    );
    Ok(())
}

fn backend_for(cfg: &RunConfig) -> Result<Box<dyn AgentBackend>> {
    Ok(match cfg.runtime.backend {
        BackendKind::Mock => Box::new(MockBackend::new(cfg.seed_for("mock"))),
        BackendKind::Remote => Box::new(RemoteBackend::new(cfg.runtime.remote.clone()).map_err(|e| CliError {
            code: exit::BACKEND,
            message: e.to_string(),
        })?),
    })
}

fn exec_options(cfg: &RunConfig, descriptions: Option<&RoleRegistry>) -> Result<ExecOptions> {
    Ok(ExecOptions {
        rounds: cfg.runtime.rounds,
        strategy: Aggregation::parse(&cfg.runtime.strategy)?,
        max_retries: cfg.runtime.max_retries,
        max_in_flight: match cfg.runtime.backend {
            BackendKind::Mock => 1,
            BackendKind::Remote => cfg.runtime.remote.max_in_flight.max(1),
        },
        descriptions: descriptions
            .map(|r| r.roles().iter().map(|x| (x.name.clone(), x.description.clone())).collect())
            .unwrap_or_default(),
    })
}

fn role_descriptions(cfg: &RunConfig) -> Option<RoleRegistry> {
    if !cfg.paths.role_pool.exists() {
        return None;
    }
    let provider = EmbeddingProvider::hashed(8);
    let specs: Vec<_> = read_role_pool(&cfg.paths.role_pool)
        .ok()?
        .into_iter()
        .map(|mut s| {
            s.embedding = None;
            s
        })
        .collect();
    RoleRegistry::register(&provider, &specs).ok()
}

fn cmd_run(cfg: &RunConfig, graph: &Path, query: &str, task_id: Option<&str>, out: Option<PathBuf>) -> Result<()> {
    let g = read_graph(graph)?;
    let task = match task_id {
        Some(id) => Some(
            load_tasks(&cfg.paths.task_suite)?
                .into_iter()
                .find(|t| t.id == id)
                .ok_or_else(|| input(format!("task `{id}` not in the suite")))?,
        ),
        None => None,
    };
    let backend = backend_for(cfg)?;
    let opts = exec_options(cfg, role_descriptions(cfg).as_ref())?;
    let t = match runtime::execute(&g, query, backend.as_ref(), &opts) {
        Ok(t) => t,
        Err(RuntimeError::Backend { error, partial, node, round }) => {
            if let Some(p) = &out {
                let _ = crate::io::write_atomic(p, partial.to_json().as_bytes());
            }
            return Err(RuntimeError::Backend { error, partial, node, round }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let out = out.unwrap_or_else(|| cfg.paths.output_dir.join("transcript.json"));
    write_file(&out, t.to_json().as_bytes())?;
    println!("final: {}", t.final_output.as_deref().unwrap_or(""));
    if let Some(task) = task {
        println!("success: {}", runtime::success_oracle(&task, &t)?);
    }
    println!("prompt tokens: {}", runtime::token_cost(&t));
    Ok(())
}

enum EvalSource {
    Checkpoint(PathBuf),
    Fixed(Topology, usize),
}

#[derive(Debug, Serialize)]
struct TaskResult {
    id: String,
    success: bool,
    nodes: usize,
    edges: usize,
    prompt_tokens: usize,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    method: String,
    tasks: Vec<TaskResult>,
    success_rate: f64,
    mean_nodes: f64,
    mean_edges: f64,
    mean_prompt_tokens: f64,
}

fn cmd_eval(cfg: &RunConfig, source: EvalSource, out: Option<PathBuf>) -> Result<()> {
    let tasks = load_tasks(&cfg.paths.task_suite)?;
    let backend = backend_for(cfg)?;
    let parts = match &source {
        EvalSource::Checkpoint(p) => Some(load_generator_parts(cfg, p)?),
        EvalSource::Fixed(..) => None,
    };
    let pool: Vec<String> = match &parts {
        Some((_, _, r)) => r.names(),
        None => {
            require(&cfg.paths.role_pool)?;
            read_role_pool(&cfg.paths.role_pool)?.into_iter().map(|r| r.name).collect()
        }
    };
    let opts = exec_options(cfg, parts.as_ref().map(|p| &p.2))?;
    let mut results = Vec::new();
    for (k, task) in tasks.iter().enumerate() {
        let graph = match (&source, &parts) {
            (EvalSource::Fixed(t, n), _) => {
                build_graph(&ConfigBlueprint::new(*t, *n), &pool, curriculum::instance_seed(cfg.seed_for("eval"), k, 0))?
            }
            (_, Some((m, p, r))) => {
                let gen = Generator::new(m, p, r)?;
                let policy = DecodePolicy {
                    seed: cfg.seed_for("decode").wrapping_add(k as u64),
                    ..cfg.decode
                };
                match generate_with_retries(&gen, &task.task_query()?, &policy, 3) {
                    Ok((g, _)) => g,
                    Err(GenerateError::EmptyTopology) => {
                        results.push(TaskResult {
                            id: task.id.clone(),
                            success: false,
                            nodes: 0,
                            edges: 0,
                            prompt_tokens: 0,
                        });
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            _ => unreachable!("checkpoint source always has parts"),
        };
        let t = runtime::execute(&graph, &task.query, backend.as_ref(), &opts)?;
        let success = match &task.expected_answer {
            Some(_) => runtime::success_oracle(task, &t)?,
            None => RuleOracle.check(task, &graph)?,
        };
        results.push(TaskResult {
            id: task.id.clone(),
            success,
            nodes: graph.node_count(),
            edges: graph.edge_count(),
            prompt_tokens: runtime::token_cost(&t),
        });
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&TaskResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let report = EvalReport {
        method: match &source {
            EvalSource::Checkpoint(p) => p.display().to_string(),
            EvalSource::Fixed(t, n) => format!("{}:{n}", serde_json::to_value(t).unwrap().as_str().unwrap_or("")),
        },
        success_rate: mean(&|r| r.success as u8 as f64),
        mean_nodes: mean(&|r| r.nodes as f64),
        mean_edges: mean(&|r| r.edges as f64),
        mean_prompt_tokens: mean(&|r| r.prompt_tokens as f64),
        tasks: results,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    match out {
        Some(p) => write_file(&p, json.as_bytes())?,
        None => println!("{json}"),
    }
    eprintln!(
        "success {:.3} nodes {:.2} edges {:.2} tokens {:.1}",
        report.success_rate, report.mean_nodes, report.mean_edges, report.mean_prompt_tokens
    );
    Ok(())
}

fn cmd_extend(cfg: &RunConfig, checkpoint: &Path, roles: &Path, out: &Path) -> Result<()> {
    let (model, provider, registry) = load_generator_parts(cfg, checkpoint)?;
    require(roles)?;
    let extended = registry.extend(&provider, &read_role_pool(roles)?)?;
    save_checkpoint(out, &model, &extended)?;
    println!("{} roles ({} added); wrote {}", extended.len(), extended.len() - registry.len(), out.display());
    Ok(())
}
