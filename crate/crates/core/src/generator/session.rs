//! One forward pass of the generator recorded on a tape.

use crate::encoding::RoleRegistry;
use crate::graph::CollabGraph;
use crate::kernel::{Array, GruVars, Tape, Var};

use super::model::{mlp, TopologyModel, EDGE_CATEGORIES};
use super::{edge_feature, EdgeDecision, GenerateError, TraceStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EdgeCategory {
    Start,
    NoEdge,
    Edge,
}

impl EdgeCategory {
    fn one_hot(self) -> Array {
        let mut v = vec![0.0; EDGE_CATEGORIES];
        v[self as usize] = 1.0;
        Array::vector(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NodeChoice {
    Role(usize),
    End,
}

/// Supplies node and edge decisions during an unroll: sampled, greedy or
/// read from a ground-truth graph.
pub(crate) trait Decider {
    fn node(&mut self, step: usize, scores: &Array) -> Result<NodeChoice, GenerateError>;
    fn edge(&mut self, source: usize, target: usize, logit: f32) -> bool;
}

pub(crate) struct Unrolled {
    pub graph: CollabGraph,
    pub steps: Vec<TraceStep>,
    pub node_terms: Vec<Var>,
    pub edge_terms: Vec<Var>,
    pub ended: bool,
}

impl Unrolled {
    /// Sum of step log-probabilities, accumulated step by step.
    pub fn total_log_prob(&self) -> f32 {
        self.steps.iter().map(TraceStep::log_prob).sum()
    }
}

pub(crate) struct Session<'a> {
    pub tape: Tape,
    model: &'a TopologyModel,
    registry: &'a RoleRegistry,
    role_matrix: Option<Var>,
    gru_prev: Option<GruVars>,
    gru_node: Option<GruVars>,
    gru_edge: Option<GruVars>,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a TopologyModel, registry: &'a RoleRegistry) -> Self {
        Self {
            tape: Tape::new(),
            model,
            registry,
            role_matrix: None,
            gru_prev: None,
            gru_node: None,
            gru_edge: None,
        }
    }

    fn gru(&mut self, which: &str) -> Result<GruVars, GenerateError> {
        let slot = match which {
            "gru_prev" => &mut self.gru_prev,
            "gru_node" => &mut self.gru_node,
            _ => &mut self.gru_edge,
        };
        if let Some(v) = slot {
            return Ok(*v);
        }
        let v = self.tape.gru_params(self.model.params(), which)?;
        *slot = Some(v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Result<&Array, GenerateError> {
        Ok(self.tape.value(v)?)
    }

    /// `FFN(LN(e))` for a raw query embedding `e`.
    pub fn encode_task(&mut self, base: &Array) -> Result<Var, GenerateError> {
        let store = self.model.params();
        let x = self.tape.input(base.clone());
        let gain = self.tape.param(store, "task.ln.gain")?;
        let bias = self.tape.param(store, "task.ln.bias")?;
        let n = self.tape.layer_norm(x, gain, bias)?;
        Ok(mlp(&mut self.tape, store, "task.ffn", n, false)?)
    }

    pub fn history_start(&mut self) -> Result<Var, GenerateError> {
        Ok(self.tape.param(self.model.params(), "hist.h0")?)
    }

    pub fn history_push(&mut self, h: Var, role: usize) -> Result<Var, GenerateError> {
        let row = self
            .registry
            .get(role)
            .ok_or_else(|| GenerateError::Lookup(format!("role index {role}")))?
            .embedding
            .clone();
        let z = self.tape.input(row);
        let w = self.gru("gru_prev")?;
        Ok(self.tape.gru_cell(z, h, &w)?)
    }

    /// Gated fusion; returns `(f_cont, gate)`.
    pub fn fuse(&mut self, f_hist: Var, f_q: Var) -> Result<(Var, Var), GenerateError> {
        let d = self.tape.value(f_q)?.len() as f32;
        let dot = self.tape.dot(f_hist, f_q)?;
        let scaled = self.tape.scale(dot, 1.0 / d.sqrt())?;
        let gate = self.tape.sigmoid(scaled)?;
        let diff = self.tape.sub(f_q, f_hist)?;
        let mix = self.tape.scalar_mul(gate, diff)?;
        Ok((self.tape.add(f_hist, mix)?, gate))
    }

    pub fn node_step(&mut self, f_cont: Var, f_edge: Array, h_prev: Var) -> Result<Var, GenerateError> {
        let e = self.tape.input(f_edge);
        let x = self.tape.concat(&[f_cont, e])?;
        let m = mlp(&mut self.tape, self.model.params(), "node_mlp", x, false)?;
        let w = self.gru("gru_node")?;
        Ok(self.tape.gru_cell(m, h_prev, &w)?)
    }

    /// `MLP_role([Z; z_end])`, one row per role with END last.
    pub fn role_matrix(&mut self) -> Result<Var, GenerateError> {
        if let Some(m) = self.role_matrix {
            return Ok(m);
        }
        let store = self.model.params();
        let mut rows = Vec::with_capacity(self.registry.len() + 1);
        for role in self.registry.roles() {
            let z = self.tape.input(role.embedding.clone());
            rows.push(mlp(&mut self.tape, store, "role_mlp", z, false)?);
        }
        let end = self.tape.param(store, "role.end")?;
        rows.push(mlp(&mut self.tape, store, "role_mlp", end, false)?);
        let m = self.tape.stack(&rows)?;
        self.role_matrix = Some(m);
        Ok(m)
    }

    pub fn scores(&mut self, h_node: Var) -> Result<Var, GenerateError> {
        let roles = self.role_matrix()?;
        let intent = mlp(&mut self.tape, self.model.params(), "pred_n", h_node, false)?;
        Ok(self.tape.matvec(roles, intent)?)
    }

    pub fn edge_start(&mut self, h_node: Var) -> Result<Var, GenerateError> {
        Ok(mlp(&mut self.tape, self.model.params(), "node2edge", h_node, true)?)
    }

    /// Returns the new edge state and the logit of the next edge.
    pub fn edge_step(&mut self, h_edge: Var, previous: EdgeCategory) -> Result<(Var, Var), GenerateError> {
        let store = self.model.params();
        let x = self.tape.input(previous.one_hot());
        let e = mlp(&mut self.tape, store, "edge_mlp", x, false)?;
        let w = self.gru("gru_edge")?;
        let h = self.tape.gru_cell(e, h_edge, &w)?;
        let logit = mlp(&mut self.tape, store, "pred_e", h, false)?;
        Ok((h, logit))
    }

    /// Incoming-edge decisions for node `target`, visiting sources
    /// `target − 1` down to 1.
    pub fn edges_for(
        &mut self,
        h_node: Var,
        target: usize,
        decider: &mut dyn Decider,
    ) -> Result<Vec<(EdgeDecision, Var)>, GenerateError> {
        let mut out = Vec::with_capacity(target.saturating_sub(1));
        if target < 2 {
            return Ok(out);
        }
        let mut h = self.edge_start(h_node)?;
        let mut previous = EdgeCategory::Start;
        for source in (1..target).rev() {
            let (next, logit) = self.edge_step(h, previous)?;
            h = next;
            let s = self.tape.scalar(logit)?;
            let present = decider.edge(source, target, s);
            let term = if present {
                self.tape.log_sigmoid(logit)?
            } else {
                let neg = self.tape.scale(logit, -1.0)?;
                self.tape.log_sigmoid(neg)?
            };
            out.push((
                EdgeDecision {
                    source,
                    target,
                    present,
                    log_prob: self.tape.scalar(term)?,
                },
                term,
            ));
            previous = if present { EdgeCategory::Edge } else { EdgeCategory::NoEdge };
        }
        Ok(out)
    }

    /// Full autoregressive pass. Stops on END or after `cap` nodes.
    pub fn unroll(&mut self, f_q: Var, cap: usize, decider: &mut dyn Decider) -> Result<Unrolled, GenerateError> {
        let cfg = *self.model.config();
        if cap > cfg.max_nodes {
            return Err(GenerateError::Capacity(format!(
                "node cap {cap} exceeds the model's max_nodes {}",
                cfg.max_nodes
            )));
        }
        let mut graph = CollabGraph::new(Vec::new());
        let mut steps = Vec::new();
        let mut node_terms = Vec::new();
        let mut edge_terms = Vec::new();
        let mut ended = false;

        let mut hist = self.history_start()?;
        let mut h_node = self.tape.input(Array::zeros(&[cfg.hidden_dim]));
        let end_index = self.registry.len();

        for step in 1..=cap {
            let (f_cont, _) = self.fuse(hist, f_q)?;
            let f_edge = edge_feature(&graph, step, cfg.max_nodes)?;
            h_node = self.node_step(f_cont, f_edge, h_node)?;
            let scores = self.scores(h_node)?;
            let choice = decider.node(step, self.tape.value(scores)?)?;
            let index = match choice {
                NodeChoice::Role(k) if k < end_index => k,
                NodeChoice::Role(k) => return Err(GenerateError::Lookup(format!("role index {k}"))),
                NodeChoice::End => end_index,
            };
            let term = self.tape.log_softmax_at(scores, index)?;
            node_terms.push(term);
            let node_log_prob = self.tape.scalar(term)?;
            if choice == NodeChoice::End {
                steps.push(TraceStep {
                    role: None,
                    node_log_prob,
                    edges: Vec::new(),
                });
                ended = true;
                break;
            }
            let name = self.registry.roles()[index].name.clone();
            let id = graph.push_node(name);
            let decisions = self.edges_for(h_node, id, decider)?;
            let mut edges = Vec::with_capacity(decisions.len());
            for (d, term) in decisions {
                if d.present {
                    graph.add_edge(d.source, d.target)?;
                }
                edge_terms.push(term);
                edges.push(d);
            }
            steps.push(TraceStep {
                role: Some(index),
                node_log_prob,
                edges,
            });
            hist = self.history_push(hist, index)?;
        }

        Ok(Unrolled {
            graph,
            steps,
            node_terms,
            edge_terms,
            ended,
        })
    }
}
