//! Executing a collaboration graph as a multi-agent system.
//!
//! Agents run for `K` rounds. In round `k` each agent sees its own earlier
//! replies and its predecessors' round `k − 1` replies; round 1 has no
//! inputs. The final-round replies are aggregated into one output.

mod backend;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumError, RuleOracle, SuccessOracle, TaskSpec};
use crate::graph::{CollabGraph, GraphError};

pub use backend::{AgentBackend, AgentRequest, BackendError, MockBackend, RemoteBackend, RemoteConfig};

pub const DEFAULT_ROUNDS: usize = 3;
/// Tokens contributed by the system-part tags alone.
pub const SYSTEM_OVERHEAD_TOKENS: usize = 2;
pub const SUMMARIZER_ROLE: &str = "Summarizer";

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{error} (node {node}, round {round}; {} messages kept)", partial.message_count())]
    Backend {
        error: BackendError,
        node: usize,
        round: usize,
        partial: Box<Transcript>,
    },
    #[error("oracle error: {0}")]
    Oracle(String),
}

/// Whitespace-delimited token count.
pub fn token_proxy(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Accepts iff the graph is acyclic with in-range endpoints.
pub fn validate_dag(g: &CollabGraph) -> Result<(), GraphError> {
    g.validate_dag()
}

/// Execution order: Kahn's procedure with ascending tie-break.
pub fn topo_order(g: &CollabGraph) -> Result<Vec<usize>, GraphError> {
    g.canonical_order()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentInstance {
    pub id: usize,
    pub role: String,
    pub description: String,
    /// The agent's own earlier replies, oldest first.
    pub state: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub node: usize,
    pub round: usize,
    pub role: String,
    pub content: String,
    pub prompt_tokens: usize,
}

impl Message {
    pub fn token_count(&self) -> usize {
        token_proxy(&self.content)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn tokens(&self) -> usize {
        token_proxy(&self.system) + token_proxy(&self.user)
    }
}

/// System part: role description and memory. User part: the query, then
/// predecessor replies in ascending sender order.
pub fn build_prompt(agent: &AgentInstance, query: &str, predecessors: &[Message]) -> Prompt {
    let mut system = format!("[role] {}\n[memory]", agent.description);
    for s in &agent.state {
        system.push('\n');
        system.push_str(s);
    }
    let mut preds: Vec<&Message> = predecessors.iter().collect();
    preds.sort_by_key(|m| m.node);
    let mut user = query.to_string();
    if !preds.is_empty() {
        user.push_str("\n[inputs]");
        for m in preds {
            let _ = write!(user, "\n[from {}] {}", m.node, m.content);
        }
    }
    Prompt { system, user }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "node")]
pub enum Aggregation {
    MajorityVote,
    TerminalAgent(usize),
    LastInOrder,
    Summarizer,
}

impl Default for Aggregation {
    fn default() -> Self {
        Aggregation::Summarizer
    }
}

impl Aggregation {
    pub fn name(&self) -> String {
        match self {
            Aggregation::MajorityVote => "majority-vote".into(),
            Aggregation::TerminalAgent(n) => format!("terminal-agent:{n}"),
            Aggregation::LastInOrder => "last-in-order".into(),
            Aggregation::Summarizer => "summarizer".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, RuntimeError> {
        Ok(match s {
            "majority-vote" => Aggregation::MajorityVote,
            "last-in-order" => Aggregation::LastInOrder,
            "summarizer" => Aggregation::Summarizer,
            _ => match s.strip_prefix("terminal-agent:").map(str::parse) {
                Some(Ok(n)) => Aggregation::TerminalAgent(n),
                _ => return Err(RuntimeError::Config(format!("unknown aggregation strategy `{s}`"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub node: usize,
    pub role: String,
    pub content: String,
    pub prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Transcript {
    pub graph: CollabGraph,
    #[serde(rename = "K")]
    pub rounds_requested: usize,
    /// `rounds[k − 1]` holds round `k`, sorted by node id.
    pub rounds: Vec<Vec<MessageRecord>>,
    pub final_output: Option<String>,
    pub strategy: String,
    pub aggregation_prompt_tokens: usize,
    pub total_prompt_tokens: usize,
}

impl Transcript {
    pub fn message_count(&self) -> usize {
        self.rounds.iter().map(Vec::len).sum()
    }

    pub fn message(&self, round: usize, node: usize) -> Option<&MessageRecord> {
        self.rounds.get(round.checked_sub(1)?)?.iter().find(|m| m.node == node)
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("transcript serialises");
        if let Some(o) = v.as_object_mut() {
            let f = o.remove("final_output").unwrap_or_default();
            o.insert("final".into(), f);
        }
        serde_json::to_string_pretty(&v).expect("transcript serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut v: serde_json::Value = serde_json::from_str(text)?;
        if let Some(o) = v.as_object_mut() {
            if let Some(f) = o.remove("final") {
                o.insert("final_output".into(), f);
            }
        }
        serde_json::from_value(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOptions {
    pub rounds: usize,
    pub strategy: Aggregation,
    /// Extra attempts per invocation after a backend failure.
    pub max_retries: usize,
    /// Run agents of a round on worker threads, at most this many at once.
    pub max_in_flight: usize,
    /// Role descriptions for system prompts; a role without one is described by its name.
    pub descriptions: HashMap<String, String>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            strategy: Aggregation::Summarizer,
            max_retries: 2,
            max_in_flight: 1,
            descriptions: HashMap::new(),
        }
    }
}

impl ExecOptions {
    pub fn with_strategy(mut self, s: Aggregation) -> Self {
        self.strategy = s;
        self
    }

    pub fn with_rounds(mut self, k: usize) -> Self {
        self.rounds = k;
        self
    }
}

fn call_with_retry(backend: &dyn AgentBackend, req: &AgentRequest, retries: usize) -> Result<String, BackendError> {
    let mut last = None;
    for attempt in 0..=retries {
        match backend.complete(req) {
            Ok(s) => return Ok(s),
            Err(e) => {
                log::warn!("node {} round {} attempt {}: {e}", req.node, req.round, attempt + 1);
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Runs `K` rounds of message passing and aggregates the last round.
pub fn execute(
    g: &CollabGraph,
    query: &str,
    backend: &dyn AgentBackend,
    opts: &ExecOptions,
) -> Result<Transcript, RuntimeError> {
    validate_dag(g)?;
    if opts.rounds == 0 {
        return Err(RuntimeError::Config("K must be at least 1".into()));
    }
    if g.node_count() == 0 {
        return Err(RuntimeError::Config("cannot execute an empty graph".into()));
    }
    if let Aggregation::TerminalAgent(n) = opts.strategy {
        if n == 0 || n > g.node_count() {
            return Err(RuntimeError::Config(format!("terminal agent {n} is not in the graph")));
        }
    }
    let order = topo_order(g)?;
    let mut agents: Vec<AgentInstance> = (1..=g.node_count())
        .map(|id| {
            let role = g.role(id).unwrap_or_default().to_string();
            AgentInstance {
                id,
                description: opts
                    .descriptions
                    .get(&role)
                    .filter(|d| !d.is_empty())
                    .cloned()
                    .unwrap_or_else(|| role.clone()),
                role,
                state: Vec::new(),
            }
        })
        .collect();
    let mut transcript = Transcript {
        graph: g.clone(),
        rounds_requested: opts.rounds,
        strategy: opts.strategy.name(),
        ..Transcript::default()
    };
    let mut previous: Vec<Message> = Vec::new();

    for round in 1..=opts.rounds {
        let requests: Vec<(AgentRequest, usize)> = order
            .iter()
            .map(|&id| {
                let preds: Vec<Message> = previous
                    .iter()
                    .filter(|m| g.has_edge(m.node, id))
                    .cloned()
                    .collect();
                let agent = &agents[id - 1];
                let p = build_prompt(agent, query, &preds);
                let tokens = p.tokens();
                let mut inputs: Vec<(usize, String)> = preds.into_iter().map(|m| (m.node, m.content)).collect();
                inputs.sort_by_key(|x| x.0);
                (
                    AgentRequest {
                        node: id,
                        role: agent.role.clone(),
                        round,
                        system: p.system,
                        user: p.user,
                        inputs,
                    },
                    tokens,
                )
            })
            .collect();
        let replies = run_round(backend, &requests, opts);
        let mut current = Vec::with_capacity(requests.len());
        let mut failure = None;
        for ((req, tokens), reply) in requests.iter().zip(replies) {
            match reply {
                Ok(content) => current.push(Message {
                    node: req.node,
                    round,
                    role: req.role.clone(),
                    content,
                    prompt_tokens: *tokens,
                }),
                Err(e) => {
                    failure.get_or_insert((e, req.node));
                }
            }
        }
        current.sort_by_key(|m| m.node);
        transcript.total_prompt_tokens += current.iter().map(|m| m.prompt_tokens).sum::<usize>();
        transcript.rounds.push(
            current
                .iter()
                .map(|m| MessageRecord {
                    node: m.node,
                    role: m.role.clone(),
                    content: m.content.clone(),
                    prompt_tokens: m.prompt_tokens,
                })
                .collect(),
        );
        if let Some((error, node)) = failure {
            return Err(RuntimeError::Backend {
                error,
                node,
                round,
                partial: Box::new(transcript),
            });
        }
        for m in &current {
            agents[m.node - 1].state.push(m.content.clone());
        }
        previous = current;
    }

    let out = aggregate(&previous, &order, query, &opts.strategy, backend, opts.max_retries, &transcript);
    match out {
        Ok((text, tokens)) => {
            transcript.final_output = Some(text);
            transcript.aggregation_prompt_tokens = tokens;
            transcript.total_prompt_tokens += tokens;
            Ok(transcript)
        }
        Err(AggregateError::Config(m)) => Err(RuntimeError::Config(m)),
        Err(AggregateError::Backend(error)) => Err(RuntimeError::Backend {
            error,
            node: 0,
            round: opts.rounds + 1,
            partial: Box::new(transcript),
        }),
    }
}

fn run_round(
    backend: &dyn AgentBackend,
    requests: &[(AgentRequest, usize)],
    opts: &ExecOptions,
) -> Vec<Result<String, BackendError>> {
    if opts.max_in_flight <= 1 {
        return requests.iter().map(|(r, _)| call_with_retry(backend, r, opts.max_retries)).collect();
    }
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(opts.max_in_flight) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(r, _)| s.spawn(move || call_with_retry(backend, r, opts.max_retries)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(BackendError("worker panicked".into()))))
                .collect()
        });
        out.extend(results);
    }
    out
}

#[derive(Debug)]
enum AggregateError {
    Config(String),
    Backend(BackendError),
}

/// Answer extracted for voting: last non-empty line, trimmed, lower-cased.
pub fn extract_answer(content: &str) -> String {
    content
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_lowercase()
}

/// Most frequent extracted answer; ties go to the answer first given by
/// the lowest sender id.
pub fn majority_vote(messages: &[Message]) -> Option<String> {
    let mut sorted: Vec<&Message> = messages.iter().collect();
    sorted.sort_by_key(|m| m.node);
    let mut counts: Vec<(String, usize)> = Vec::new();
    for m in sorted {
        let a = extract_answer(&m.content);
        match counts.iter_mut().find(|(x, _)| *x == a) {
            Some(c) => c.1 += 1,
            None => counts.push((a, 1)),
        }
    }
    let best = counts.iter().map(|c| c.1).max()?;
    counts.into_iter().find(|c| c.1 == best).map(|c| c.0)
}

/// Prompt for the summariser call over the whole dialogue.
pub fn summarizer_prompt(query: &str, transcript: &Transcript) -> Prompt {
    let mut user = query.to_string();
    user.push_str("\n[dialogue]");
    for (k, round) in transcript.rounds.iter().enumerate() {
        for m in round {
            let _ = write!(user, "\n[round {} from {}] {}", k + 1, m.node, m.content);
        }
    }
    Prompt {
        system: "[role] summarize the dialogue into one final answer\n[memory]".into(),
        user,
    }
}

fn aggregate(
    finals: &[Message],
    order: &[usize],
    query: &str,
    strategy: &Aggregation,
    backend: &dyn AgentBackend,
    retries: usize,
    transcript: &Transcript,
) -> Result<(String, usize), AggregateError> {
    if finals.is_empty() {
        return Err(AggregateError::Config("no final-round messages".into()));
    }
    let by_node = |n: usize| finals.iter().find(|m| m.node == n).map(|m| m.content.clone());
    match strategy {
        Aggregation::MajorityVote => Ok((majority_vote(finals).unwrap_or_default(), 0)),
        Aggregation::TerminalAgent(n) => by_node(*n)
            .map(|c| (c, 0))
            .ok_or_else(|| AggregateError::Config(format!("terminal agent {n} has no message"))),
        Aggregation::LastInOrder => {
            let last = *order.last().expect("non-empty order");
            Ok((by_node(last).unwrap_or_default(), 0))
        }
        Aggregation::Summarizer => {
            let p = summarizer_prompt(query, transcript);
            let tokens = p.tokens();
            let req = AgentRequest {
                node: 0,
                role: SUMMARIZER_ROLE.into(),
                round: transcript.rounds.len() + 1,
                system: p.system,
                user: p.user,
                inputs: finals.iter().map(|m| (m.node, m.content.clone())).collect(),
            };
            call_with_retry(backend, &req, retries)
                .map(|s| (s, tokens))
                .map_err(AggregateError::Backend)
        }
    }
}

/// Aggregates standalone final-round messages without a transcript.
pub fn aggregate_messages(
    finals: &[Message],
    order: &[usize],
    query: &str,
    strategy: &Aggregation,
    backend: &dyn AgentBackend,
) -> Result<String, RuntimeError> {
    let t = Transcript {
        rounds: vec![finals
            .iter()
            .map(|m| MessageRecord {
                node: m.node,
                role: m.role.clone(),
                content: m.content.clone(),
                prompt_tokens: m.prompt_tokens,
            })
            .collect()],
        ..Transcript::default()
    };
    match aggregate(finals, order, query, strategy, backend, 0, &t) {
        Ok((s, _)) => Ok(s),
        Err(AggregateError::Config(m)) => Err(RuntimeError::Config(m)),
        Err(AggregateError::Backend(error)) => Err(RuntimeError::Backend {
            error,
            node: 0,
            round: 0,
            partial: Box::new(t),
        }),
    }
}

/// Total prompt tokens over every invocation, the summariser included.
pub fn token_cost(t: &Transcript) -> usize {
    t.rounds.iter().flatten().map(|m| m.prompt_tokens).sum::<usize>() + t.aggregation_prompt_tokens
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whether `output` (or its last non-empty line) equals `expected` after
/// whitespace and case normalisation.
pub fn answer_matches(expected: &str, output: &str) -> bool {
    let e = normalize(expected);
    normalize(output) == e || normalize(&extract_answer(output)) == e
}

/// Verdict on an executed transcript.
pub fn success_oracle(task: &TaskSpec, transcript: &Transcript) -> Result<bool, RuntimeError> {
    let expected = task
        .expected_answer
        .as_deref()
        .ok_or_else(|| RuntimeError::Oracle(format!("task {} has no expected answer", task.id)))?;
    let out = transcript
        .final_output
        .as_deref()
        .ok_or_else(|| RuntimeError::Oracle("transcript has no final output".into()))?;
    Ok(answer_matches(expected, out))
}

/// How [`RuntimeOracle`] decides success.
pub enum OracleMode<'a> {
    /// Required roles plus the structural predicate; no execution.
    Structural,
    /// Executes the graph and compares the output with the expected answer.
    ExpectedAnswer { backend: &'a dyn AgentBackend, options: ExecOptions },
    /// Executes the graph, then asks a judge whether the output solves the task.
    Judge {
        backend: &'a dyn AgentBackend,
        judge: &'a dyn AgentBackend,
        options: ExecOptions,
    },
}

pub struct RuntimeOracle<'a> {
    pub mode: OracleMode<'a>,
}

impl SuccessOracle for RuntimeOracle<'_> {
    fn check(&self, task: &TaskSpec, graph: &CollabGraph) -> Result<bool, CurriculumError> {
        let fail = |e: RuntimeError| CurriculumError::Oracle(e.to_string());
        match &self.mode {
            OracleMode::Structural => RuleOracle.check(task, graph),
            OracleMode::ExpectedAnswer { backend, options } => {
                let t = execute(graph, &task.query, *backend, options).map_err(fail)?;
                success_oracle(task, &t).map_err(fail)
            }
            OracleMode::Judge { backend, judge, options } => {
                let t = execute(graph, &task.query, *backend, options).map_err(fail)?;
                let out = t.final_output.unwrap_or_default();
                let req = AgentRequest {
                    node: 0,
                    role: "Judge".into(),
                    round: 0,
                    system: "[role] reply YES if the answer solves the task, otherwise NO\n[memory]".into(),
                    user: format!("{}\n[answer]\n{out}", task.query),
                    inputs: Vec::new(),
                };
                let verdict = judge.complete(&req).map_err(|e| CurriculumError::Oracle(e.to_string()))?;
                let v = extract_answer(&verdict);
                if v.starts_with("yes") {
                    Ok(true)
                } else if v.starts_with("no") {
                    Ok(false)
                } else {
                    Err(CurriculumError::Oracle(format!("unparseable judge verdict `{verdict}`")))
                }
            }
        }
    }
}
