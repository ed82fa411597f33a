//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::collections::{BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use topogen::curriculum::{
    self, build_graph, classify, complex_configs, prune_variants, simple_configs, ConfigBlueprint, ExampleSource,
    Predicate, RuleOracle, SuccessOracle, TaskSpec, Topology, TrainingExample,
};
use topogen::encoding::{EmbeddingProvider, RoleRegistry, RoleSpec, TaskQuery};
use topogen::generator::{DecodePolicy, GenerateError, Generator, GeneratorState, ModelConfig, TopologyModel};
use topogen::graph::CollabGraph;
use topogen::kernel::{Array, ParamStore};
use topogen::runtime::{self, AgentBackend, AgentRequest, Aggregation, ExecOptions, MockBackend};
use topogen::training::{example_gradients, train_phase, Phase, TrainConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn specs(names: &[&str]) -> Vec<RoleSpec> {
    names.iter().map(|n| RoleSpec::new(*n, format!("the {n} agent"))).collect()
}

fn example(query: &str, graph: CollabGraph) -> TrainingExample {
    TrainingExample {
        query: query.into(),
        graph,
        source: ExampleSource::Exp,
        success: true,
        task_id: None,
        embedding: None,
    }
}

// ---------------------------------------------------------------- A1

/// Independent double-precision forward pass of the teacher-forced loss.
struct Reference<'a> {
    p: &'a ParamStore,
    over: Option<(&'a str, usize, f64)>,
}

impl Reference<'_> {
    fn get(&self, name: &str) -> (Vec<f64>, Vec<usize>) {
        let a = self.p.get(name).unwrap_or_else(|| panic!("missing {name}"));
        let mut v: Vec<f64> = a.data().iter().map(|&x| x as f64).collect();
        if let Some((n, k, d)) = self.over {
            if n == name {
                v[k] += d;
            }
        }
        (v, a.shape().to_vec())
    }

    fn affine(&self, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
        let (w, shape) = self.get(w);
        let (b, _) = self.get(b);
        let cols = shape[1];
        assert_eq!(cols, x.len());
        (0..shape[0])
            .map(|r| b[r] + (0..cols).map(|c| w[r * cols + c] * x[c]).sum::<f64>())
            .collect()
    }

    fn matvec(&self, w: &str, x: &[f64]) -> Vec<f64> {
        let (w, shape) = self.get(w);
        let cols = shape[1];
        (0..shape[0]).map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum()).collect()
    }

    fn mlp(&self, prefix: &str, x: &[f64], squash: bool) -> Vec<f64> {
        let h: Vec<f64> = self
            .affine(&format!("{prefix}.w1"), &format!("{prefix}.b1"), x)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let y = self.affine(&format!("{prefix}.w2"), &format!("{prefix}.b2"), &h);
        if squash {
            y.into_iter().map(f64::tanh).collect()
        } else {
            y
        }
    }

    fn gru(&self, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let gate = |g: &str, hh: &[f64]| -> Vec<f64> {
            let a = self.affine(&format!("{prefix}.w_{g}"), &format!("{prefix}.b_{g}"), x);
            let u = self.matvec(&format!("{prefix}.u_{g}"), hh);
            a.iter().zip(&u).map(|(p, q)| p + q).collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z: Vec<f64> = gate("update", h).into_iter().map(sig).collect();
        let r: Vec<f64> = gate("reset", h).into_iter().map(sig).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = gate("candidate", &rh).into_iter().map(f64::tanh).collect();
        (0..h.len()).map(|i| h[i] + z[i] * (c[i] - h[i])).collect()
    }

    fn loss(&self, base: &[f64], roles: &[Vec<f64>], role_of: &[usize], g: &CollabGraph, alpha: f64, max_nodes: usize) -> f64 {
        let mean = base.iter().sum::<f64>() / base.len() as f64;
        let var = base.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / base.len() as f64;
        let (gain, _) = self.get("task.ln.gain");
        let (bias, _) = self.get("task.ln.bias");
        let ln: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, v)| gain[i] * (v - mean) / (var + 1e-5).sqrt() + bias[i])
            .collect();
        let fq = self.mlp("task.ffn", &ln, false);
        let d = fq.len() as f64;
        let (mut hist, _) = self.get("hist.h0");
        let hidden = self.get("gru_node.b_update").0.len();
        let mut h_node = vec![0.0; hidden];
        let mut rows: Vec<Vec<f64>> = roles.iter().map(|z| self.mlp("role_mlp", z, false)).collect();
        rows.push(self.mlp("role_mlp", &self.get("role.end").0, false));
        let n = g.node_count();
        let (mut l_node, mut l_edge) = (0.0, 0.0);
        for step in 1..=max_nodes {
            let gate = 1.0 / (1.0 + (-(hist.iter().zip(&fq).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())).exp());
            let mut x: Vec<f64> = hist.iter().zip(&fq).map(|(h, q)| h + gate * (q - h)).collect();
            let mut fe = vec![0.0; max_nodes - 1];
            if step >= 3 {
                for j in 1..step - 1 {
                    if g.has_edge(j, step - 1) {
                        fe[j - 1] = 1.0;
                    }
                }
            }
            x.extend(fe);
            let m = self.mlp("node_mlp", &x, false);
            h_node = self.gru("gru_node", &m, &h_node);
            let intent = self.mlp("pred_n", &h_node, false);
            let scores: Vec<f64> = rows.iter().map(|r| r.iter().zip(&intent).map(|(a, b)| a * b).sum()).collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
            let target = if step <= n { role_of[step - 1] } else { roles.len() };
            l_node -= scores[target] - lse;
            if step > n {
                break;
            }
            if step >= 2 {
                let mut he = self.mlp("node2edge", &h_node, true);
                let mut prev = [1.0, 0.0, 0.0];
                for src in (1..step).rev() {
                    let e = self.mlp("edge_mlp", &prev, false);
                    he = self.gru("gru_edge", &e, &he);
                    let logit = self.mlp("pred_e", &he, false)[0];
                    let present = g.has_edge(src, step);
                    let s = if present { logit } else { -logit };
                    l_edge += (-s).exp().ln_1p();
                    prev = if present { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
                }
            }
            hist = self.gru("gru_prev", &roles[role_of[step - 1]], &hist);
        }
        alpha * l_node + (1.0 - alpha) * l_edge
    }
}

fn a1_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        raw_dim: 16,
        embed_dim: 16,
        hidden_dim: 16,
        max_nodes: 6,
    };
    let provider = EmbeddingProvider::hashed(16);
    let registry = RoleRegistry::register(&provider, &specs(&["Planner", "Coder", "Reviewer"])).unwrap();
    let model = TopologyModel::new(cfg, 17).unwrap();
    let graph = CollabGraph::from_parts(
        vec!["Planner".into(), "Coder".into(), "Coder".into(), "Reviewer".into()],
        [(1, 2), (1, 3), (2, 4), (3, 4)],
    );
    let ex = example("implement and review a rate limiter", graph.clone());
    let gen = Generator::new(&model, &provider, &registry).unwrap();
    let (parts, grads) = example_gradients(&gen, &ex, 0.2).unwrap();

    let base: Vec<f64> = provider.embed(&ex.query).unwrap().data().iter().map(|&v| v as f64).collect();
    let roles: Vec<Vec<f64>> = registry.roles().iter().map(|r| r.embedding.data().iter().map(|&v| v as f64).collect()).collect();
    let role_of: Vec<usize> = graph.roles().iter().map(|r| registry.index_of(r).unwrap()).collect();
    let f = |over: Option<(&str, usize, f64)>| {
        Reference { p: model.params(), over }.loss(&base, &roles, &role_of, &graph, 0.2, cfg.max_nodes)
    };
    let l0 = f(None);
    if (l0 - parts.total as f64).abs() > 1e-4 * l0.abs().max(1.0) {
        return Err(format!("reference loss {l0} disagrees with model loss {}", parts.total));
    }
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for (name, a) in model.params().iter() {
        let g = grads.get(name).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; a.len()]);
        for k in 0..a.len() {
            let numeric = (f(Some((name, k, h))) - f(Some((name, k, -h)))) / (2.0 * h);
            let analytic = g[k] as f64;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
            count += 1;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}] analytic {analytic:.3e} numeric {numeric:.3e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.0 <= 1e-3 && secs < 60.0,
        format!("{count} parameters, max rel err {:.2e} at {} in {secs:.1}s", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- A2

fn a2_memorization() -> Outcome {
    let start = Instant::now();
    let names = ["Planner", "Coder", "Tester", "Reviewer"];
    let pool: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let provider = EmbeddingProvider::hashed(64);
    let registry = RoleRegistry::register(&provider, &specs(&names)).unwrap();
    let topics = [
        "parser", "cache", "scheduler", "compiler", "website", "database", "ledger", "tokenizer", "renderer", "crawler",
        "firmware", "payroll", "chatbot", "router", "indexer", "allocator", "installer", "profiler", "debugger", "planner",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut data = Vec::new();
    for (k, topic) in topics.iter().enumerate() {
        let topo = [Topology::Chain, Topology::Star, Topology::Tree][k % 3];
        let n = if topo == Topology::Star { rng.gen_range(2..=5) } else { rng.gen_range(2..=5) };
        let g = build_graph(&ConfigBlueprint::new(topo, n), &pool, 100 + k as u64).unwrap();
        data.push(example(&format!("build the {topic} component"), g));
    }
    let cfg = ModelConfig {
        raw_dim: 64,
        embed_dim: 32,
        hidden_dim: 32,
        max_nodes: 10,
    };
    let mut model = TopologyModel::new(cfg, 3).unwrap();
    let train = TrainConfig {
        lr_cold_start: 1e-2,
        lr_fine_tune: 1e-3,
        epochs_cold_start: 500,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let report = train_phase(&mut model, &provider, &registry, &data, &train, Phase::ColdStart).unwrap();
    let final_loss = report.final_loss().unwrap().total;
    let gen = Generator::new(&model, &provider, &registry).unwrap();
    let mut exact = 0;
    for ex in &data {
        if let Ok((g, _)) = gen.generate(&TaskQuery::new(ex.query.clone()).unwrap(), &DecodePolicy::greedy()) {
            if g.roles() == ex.graph.roles() && g.edge_set() == ex.graph.edge_set() {
                exact += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        exact == data.len() && final_loss < 0.1 && secs < 300.0,
        format!("{exact}/{} graphs reproduced, final loss {final_loss:.4}, {secs:.1}s", data.len()),
    )
}

// ---------------------------------------------------------------- A3

const FILLER: [&str; 40] = [
    "please", "quickly", "team", "customer", "report", "data", "urgent", "weekly", "review", "budget", "market",
    "product", "launch", "legal", "design", "plan", "summary", "notes", "project", "client", "server", "invoice",
    "schedule", "meeting", "draft", "policy", "survey", "result", "metric", "feature", "release", "support", "ticket",
    "vendor", "contract", "audit", "model", "query", "answer", "question",
];

fn family_query(rng: &mut ChaCha8Rng, keyword: &str) -> String {
    let count = rng.gen_range(4..7);
    let mut words: Vec<&str> = FILLER.choose_multiple(rng, count).copied().collect();
    let pos = rng.gen_range(0..=words.len());
    words.insert(pos, keyword);
    words.join(" ")
}

struct Families {
    model: TopologyModel,
    provider: EmbeddingProvider,
    registry: RoleRegistry,
}

fn train_families() -> (Families, usize, usize) {
    let families = [(Topology::Chain, "pipeline"), (Topology::Star, "broadcast"), (Topology::Complete, "roundtable")];
    let names = ["Lead", "Analyst", "Engineer", "Critic"];
    let provider = EmbeddingProvider::hashed(64);
    let registry = RoleRegistry::register(&provider, &specs(&names)).unwrap();
    let roles: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut train = Vec::new();
    for k in 0..200 {
        let (topo, kw) = families[k % 3];
        let g = build_graph(&ConfigBlueprint::new(topo, 4).with_roles(roles.clone()), &[], 0).unwrap();
        train.push(example(&family_query(&mut rng, kw), g));
    }
    let cfg = ModelConfig {
        raw_dim: 64,
        embed_dim: 32,
        hidden_dim: 32,
        max_nodes: 10,
    };
    let mut model = TopologyModel::new(cfg, 4).unwrap();
    let tc = TrainConfig {
        lr_cold_start: 5e-3,
        lr_fine_tune: 1e-3,
        epochs_cold_start: 40,
        batch_size: 8,
        seed: 6,
        ..TrainConfig::default()
    };
    train_phase(&mut model, &provider, &registry, &train, &tc, Phase::ColdStart).unwrap();

    let seen: HashSet<String> = train.iter().map(|e| e.query.clone()).collect();
    let mut held_rng = ChaCha8Rng::seed_from_u64(977);
    let gen = Generator::new(&model, &provider, &registry).unwrap();
    let mut correct = 0;
    let mut total = 0;
    while total < 50 {
        let (topo, kw) = families[total % 3];
        let q = family_query(&mut held_rng, kw);
        if seen.contains(&q) {
            continue;
        }
        total += 1;
        if let Ok((g, _)) = gen.generate(&TaskQuery::new(q).unwrap(), &DecodePolicy::greedy()) {
            if classify(&g) == Some(topo) {
                correct += 1;
            }
        }
    }
    (Families { model, provider, registry }, correct, total)
}

fn a3_conditional(f: &(Families, usize, usize)) -> Outcome {
    let (_, correct, total) = *f;
    check(
        correct * 10 >= total * 9,
        format!("{correct}/{total} held-out queries matched their family"),
    )
}

// ---------------------------------------------------------------- A4

fn sample_many(gen: &Generator<'_>, queries: &[&str], want: usize) -> Result<(BTreeSet<usize>, usize), String> {
    let mut counts = BTreeSet::new();
    let mut got = 0;
    let mut empty = 0;
    let mut seed = 0u64;
    while got < want {
        let q = TaskQuery::new(queries[seed as usize % queries.len()]).unwrap();
        let policy = DecodePolicy::sample(seed).with_max_nodes(10);
        seed += 1;
        match gen.generate(&q, &policy) {
            Ok((g, _)) => {
                got += 1;
                if !(g.is_forward() && g.validate_dag().is_ok() && (1..=10).contains(&g.node_count())) {
                    return Err(format!("invalid graph: {}", g.to_json()));
                }
                counts.insert(g.node_count());
            }
            Err(GenerateError::EmptyTopology) => empty += 1,
            Err(e) => return Err(e.to_string()),
        }
        if seed > 20 * want as u64 {
            return Err("too many empty topologies".into());
        }
    }
    Ok((counts, empty))
}

fn a4_validity(f: &(Families, usize, usize)) -> Outcome {
    let fam = &f.0;
    let untrained = TopologyModel::new(*fam.model.config(), 99).unwrap();
    let queries = ["pipeline plan a launch", "broadcast the survey result", "roundtable legal review", "anything at all"];
    let mut lines = Vec::new();
    let mut distinct_untrained = 0;
    for (label, model) in [("untrained", &untrained), ("trained", &fam.model)] {
        let gen = Generator::new(model, &fam.provider, &fam.registry).unwrap();
        let (counts, empty) = sample_many(&gen, &queries, 1000)?;
        if label == "untrained" {
            distinct_untrained = counts.len();
        }
        lines.push(format!("{label}: 1000 valid DAGs, sizes {counts:?}, {empty} empty draws"));
    }
    check(distinct_untrained >= 2, lines.join("; "))
}

// ---------------------------------------------------------------- A5

fn efficiency_tasks() -> Vec<TaskSpec> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let path = |a: &str, b: &str| Predicate::Path { from: a.into(), to: b.into() };
    let hub = |r: &str| Predicate::Hub { role: r.into(), min_out: 2 };
    vec![
        TaskSpec::new("t1", "prove the lemma and check every step", s(&["planner", "checker"]), path("planner", "checker")),
        TaskSpec::new("t2", "solve the equation then verify the result", s(&["solver", "checker"]), path("solver", "checker")),
        TaskSpec::new("t3", "plan a study then solve the exercises", s(&["planner", "solver"]), path("planner", "solver")),
        TaskSpec::new("t4", "coordinate several solvers on a puzzle", s(&["solver"]), hub("solver")),
        TaskSpec::new("t5", "plan a trip and delegate bookings", s(&["planner"]), hub("planner")),
        TaskSpec::new("t6", "double check an audit with two reviewers", s(&["checker"]), hub("checker")),
        TaskSpec::new("t7", "outline a proof and hand it to a solver", s(&["planner", "solver"]), path("planner", "solver")),
        TaskSpec::new("t8", "solve a riddle and have it checked", s(&["solver", "checker"]), path("solver", "checker")),
    ]
}

struct PhaseStats {
    edges: f64,
    success: f64,
    tokens: f64,
}

fn phase_stats(model: &TopologyModel, provider: &EmbeddingProvider, registry: &RoleRegistry, tasks: &[TaskSpec]) -> PhaseStats {
    let gen = Generator::new(model, provider, registry).unwrap();
    let backend = MockBackend::new(1);
    let (mut edges, mut ok, mut tokens) = (0.0, 0.0, 0.0);
    for t in tasks {
        let g = match gen.generate(&t.task_query().unwrap(), &DecodePolicy::greedy()) {
            Ok((g, _)) => g,
            Err(_) => continue,
        };
        edges += g.edge_count() as f64;
        ok += RuleOracle.check(t, &g).unwrap() as u8 as f64;
        tokens += runtime::token_cost(&runtime::execute(&g, &t.query, &backend, &ExecOptions::default()).unwrap()) as f64;
    }
    let n = tasks.len() as f64;
    PhaseStats {
        edges: edges / n,
        success: ok / n,
        tokens: tokens / n,
    }
}

fn repeat(configs: Vec<ConfigBlueprint>, times: usize) -> Vec<ConfigBlueprint> {
    (0..times).flat_map(|_| configs.clone()).collect()
}

fn a5_efficiency() -> Outcome {
    let names = ["planner", "solver", "checker"];
    let pool: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let provider = EmbeddingProvider::hashed(64);
    let registry = RoleRegistry::register(&provider, &specs(&names)).unwrap();
    let tasks = efficiency_tasks();
    let exp = curriculum::synth_exploration(&tasks, &repeat(complex_configs(), 1), &pool, &RuleOracle, 7).unwrap();
    let simple = curriculum::synth_simple(&tasks, &repeat(simple_configs(), 80), &pool, &RuleOracle, 8).unwrap();
    let pruned = curriculum::prune_dataset(&exp, &tasks, &RuleOracle).unwrap();
    let eff = curriculum::assemble_efficiency(&simple, &pruned, &exp, 0.25, 9).unwrap();

    let cfg = ModelConfig {
        raw_dim: 64,
        embed_dim: 32,
        hidden_dim: 32,
        max_nodes: 10,
    };
    let mut model = TopologyModel::new(cfg, 10).unwrap();
    let tc = TrainConfig {
        lr_cold_start: 5e-3,
        lr_fine_tune: 1e-3,
        epochs_cold_start: 80,
        epochs_fine_tune: 10,
        batch_size: 8,
        seed: 12,
        ..TrainConfig::default()
    };
    train_phase(&mut model, &provider, &registry, &exp, &tc, Phase::ColdStart).unwrap();
    let p1 = phase_stats(&model, &provider, &registry, &tasks);
    train_phase(&mut model, &provider, &registry, &eff, &tc, Phase::FineTune).unwrap();
    let p2 = phase_stats(&model, &provider, &registry, &tasks);
    let drop = 1.0 - p2.tokens / p1.tokens;
    let mean_edges = |d: &[TrainingExample]| d.iter().map(|e| e.graph.edge_count()).sum::<usize>() as f64 / d.len() as f64;
    check(
        p2.edges < p1.edges && p2.success >= p1.success && drop >= 0.10,
        format!(
            "|exp| {} ({:.1} edges) |eff| {} ({:.1} edges, {} simple, {} pruned); edges {:.2} -> {:.2}, success {:.2} -> {:.2}, tokens {:.0} -> {:.0} ({:.1}% less)",
            exp.len(),
            mean_edges(&exp),
            eff.len(),
            mean_edges(&eff),
            eff.iter().filter(|e| e.source == ExampleSource::Simple).count(),
            pruned.len(),
            p1.edges,
            p2.edges,
            p1.success,
            p2.success,
            p1.tokens,
            p2.tokens,
            100.0 * drop
        ),
    )
}

// ---------------------------------------------------------------- A6

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 0.1 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn cos(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn a6_extensibility() -> Outcome {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let provider = EmbeddingProvider::hashed(d);
    let base: Vec<Vec<f32>> = (0..128).map(|_| unit(&mut rng, d)).collect();
    let role_specs: Vec<RoleSpec> = base
        .iter()
        .enumerate()
        .map(|(k, e)| RoleSpec {
            name: format!("role{k}"),
            description: String::new(),
            embedding: Some(e.clone()),
        })
        .collect();
    let registry = RoleRegistry::register(&provider, &role_specs).unwrap();
    let nearest = |q: &[f32], set: &[Vec<f32>]| {
        (0..set.len())
            .max_by(|&a, &b| cos(q, &set[a]).total_cmp(&cos(q, &set[b])))
            .unwrap()
    };
    let mut data = Vec::new();
    for k in 0..5000 {
        let q = unit(&mut rng, d);
        let r = nearest(&q, &base);
        data.push(TrainingExample {
            query: format!("synthetic query {k}"),
            graph: CollabGraph::from_parts(vec![format!("role{r}")], []),
            source: ExampleSource::Exp,
            success: true,
            task_id: None,
            embedding: Some(q),
        });
    }
    let cfg = ModelConfig {
        raw_dim: d,
        embed_dim: 16,
        hidden_dim: 16,
        max_nodes: 10,
    };
    let mut model = TopologyModel::new(cfg, 62).unwrap();
    let tc = TrainConfig {
        lr_cold_start: 5e-3,
        lr_fine_tune: 1e-3,
        epochs_cold_start: 20,
        batch_size: 16,
        seed: 63,
        ..TrainConfig::default()
    };
    train_phase(&mut model, &provider, &registry, &data, &tc, Phase::ColdStart).unwrap();

    // three new roles, each placed far from every existing role
    let mut new_vecs: Vec<Vec<f32>> = Vec::new();
    for _ in 0..3 {
        let best = (0..2000)
            .map(|_| unit(&mut rng, d))
            .min_by(|a, b| {
                let worst = |v: &Vec<f32>| base.iter().chain(&new_vecs).map(|e| cos(v, e)).fold(f32::MIN, f32::max);
                worst(a).total_cmp(&worst(b))
            })
            .unwrap();
        new_vecs.push(best);
    }
    let new_specs: Vec<RoleSpec> = new_vecs
        .iter()
        .enumerate()
        .map(|(k, e)| RoleSpec {
            name: format!("newcomer{k}"),
            description: String::new(),
            embedding: Some(e.clone()),
        })
        .collect();
    let extended = registry.extend(&provider, &new_specs).unwrap();

    let old = Generator::new(&model, &provider, &registry).unwrap();
    let new = Generator::new(&model, &provider, &extended).unwrap();
    let mut state = GeneratorState::initial(&cfg);
    let mut bitwise = true;
    for _ in 0..20 {
        state.h_node = Array::vector((0..cfg.hidden_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let (a, _) = old.score_roles(&state).unwrap();
        let (b, _) = new.score_roles(&state).unwrap();
        let n = registry.len();
        bitwise &= a.data()[..n] == b.data()[..n] && a.data()[n] == b.data()[n + 3];
    }
    let mut hits = 0;
    for (k, v) in new_vecs.iter().enumerate() {
        let q = TaskQuery::with_embedding(format!("engineered query {k}"), Array::vector(v.clone())).unwrap();
        if let Ok((g, _)) = new.generate(&q, &DecodePolicy::greedy()) {
            if g.roles().iter().any(|r| *r == format!("newcomer{k}")) {
                hits += 1;
            }
        }
    }
    check(
        bitwise && hits == 3,
        format!("existing scores bitwise unchanged: {bitwise}; engineered queries picked the new role {hits}/3"),
    )
}

// ---------------------------------------------------------------- A7

fn a7_likelihood() -> Outcome {
    let provider = EmbeddingProvider::hashed(24);
    let registry = RoleRegistry::register(&provider, &specs(&["A", "B", "C", "D"])).unwrap();
    let words = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa"];
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst = 0.0f32;
    let mut done = 0;
    let mut attempts = 0;
    while done < 100 {
        attempts += 1;
        let model = TopologyModel::new(
            ModelConfig {
                raw_dim: 24,
                embed_dim: 16,
                hidden_dim: 16,
                max_nodes: 10,
            },
            rng.gen(),
        )
        .unwrap();
        let gen = Generator::new(&model, &provider, &registry).unwrap();
        let q: Vec<&str> = words.choose_multiple(&mut rng, 3).copied().collect();
        let q = TaskQuery::new(q.join(" ")).unwrap();
        let policy = DecodePolicy {
            temperature: rng.gen_range(0.5..2.0),
            ..DecodePolicy::sample(rng.gen())
        };
        let Ok((g, trace)) = gen.generate(&q, &policy) else { continue };
        let order: Vec<usize> = (1..=g.node_count()).collect();
        let lp = gen.guided_log_prob(&q, &g, &order).unwrap();
        worst = worst.max((lp - trace.total_log_prob).abs());
        done += 1;
    }
    check(worst <= 1e-5, format!("100 generations ({attempts} draws), max |Δ log p| = {worst:.2e}"))
}

// ---------------------------------------------------------------- A8

/// Round simulator written directly from the documented protocol.
fn brute_force(g: &CollabGraph, query: &str, k: usize, backend: &MockBackend) -> Vec<Vec<(usize, String, usize)>> {
    let n = g.node_count();
    let mut memory: Vec<Vec<String>> = vec![Vec::new(); n + 1];
    let mut last: Vec<Option<String>> = vec![None; n + 1];
    let mut rounds = Vec::new();
    for round in 1..=k {
        let mut out = Vec::new();
        for id in 1..=n {
            let mut system = format!("[role] {}\n[memory]", g.role(id).unwrap());
            for m in &memory[id] {
                system = format!("{system}\n{m}");
            }
            let mut user = query.to_string();
            let preds: Vec<usize> = (1..=n).filter(|&j| g.has_edge(j, id)).collect();
            let mut inputs = Vec::new();
            if round > 1 && !preds.is_empty() {
                user += "\n[inputs]";
                for j in preds {
                    let c = last[j].clone().unwrap();
                    user += &format!("\n[from {j}] {c}");
                    inputs.push((j, c));
                }
            }
            let tokens = system.split_whitespace().count() + user.split_whitespace().count();
            let reply = backend
                .complete(&AgentRequest {
                    node: id,
                    role: g.role(id).unwrap().to_string(),
                    round,
                    system,
                    user,
                    inputs,
                })
                .unwrap();
            out.push((id, reply, tokens));
        }
        for (id, reply, _) in &out {
            memory[*id].push(reply.clone());
            last[*id] = Some(reply.clone());
        }
        rounds.push(out);
    }
    rounds
}

fn a8_protocol() -> Outcome {
    let pool: Vec<String> = ["Planner", "Coder", "Tester", "Writer", "Critic"].iter().map(|s| s.to_string()).collect();
    let backend = MockBackend::echo(81);
    let query = "design a caching layer for the api";
    let defaults = ExecOptions::default();
    if defaults.rounds != 3 {
        return Err(format!("default K is {}", defaults.rounds));
    }
    let mut details = Vec::new();
    let mut costs = Vec::new();
    for topo in [Topology::Chain, Topology::Star, Topology::Complete] {
        for n in [3, 5] {
            let g = build_graph(&ConfigBlueprint::new(topo, n), &pool, n as u64).unwrap();
            let opts = ExecOptions::default().with_strategy(Aggregation::LastInOrder);
            let t = runtime::execute(&g, query, &backend, &opts).unwrap();
            let expected = brute_force(&g, query, 3, &backend);
            if t.rounds.len() != 3 {
                return Err(format!("{topo:?}/{n}: {} rounds", t.rounds.len()));
            }
            for (got, want) in t.rounds.iter().zip(&expected) {
                let got: Vec<(usize, String, usize)> = got.iter().map(|m| (m.node, m.content.clone(), m.prompt_tokens)).collect();
                if &got != want {
                    return Err(format!("{topo:?}/{n}: transcript diverges from the simulator"));
                }
            }
            costs.push((topo, n, runtime::token_cost(&t)));
        }
    }
    let cost = |t: Topology, n: usize| costs.iter().find(|c| c.0 == t && c.1 == n).unwrap().2;
    let mut ordered = true;
    for n in [3, 5] {
        ordered &= cost(Topology::Complete, n) >= cost(Topology::Chain, n);
        details.push(format!("n={n}: chain {} complete {}", cost(Topology::Chain, n), cost(Topology::Complete, n)));
    }
    check(ordered, format!("6 fixtures match message-for-message, K=3 default; {}", details.join(", ")))
}

// ---------------------------------------------------------------- A9

fn reaches(n: usize, edges: &BTreeSet<(usize, usize)>, from: usize, to: usize) -> bool {
    let mut reach = vec![vec![false; n + 1]; n + 1];
    for &(j, i) in edges {
        reach[j][i] = true;
    }
    for k in 1..=n {
        for a in 1..=n {
            for b in 1..=n {
                if reach[a][k] && reach[k][b] {
                    reach[a][b] = true;
                }
            }
        }
    }
    reach[from][to]
}

fn brute_path_ok(roles: &[&str], edges: &BTreeSet<(usize, usize)>, from: &str, to: &str) -> bool {
    let n = roles.len();
    (1..=n).any(|u| (1..=n).any(|v| u != v && roles[u - 1] == from && roles[v - 1] == to && reaches(n, edges, u, v)))
}

fn a9_curriculum() -> Outcome {
    let roles = ["A", "B", "C"];
    let full: BTreeSet<(usize, usize)> = [(1, 2), (1, 3), (2, 3)].into_iter().collect();
    let task = TaskSpec::new("t", "route A to C", vec![], Predicate::Path { from: "A".into(), to: "C".into() });
    let ex = TrainingExample::from_task(
        &task,
        CollabGraph::from_parts(roles.iter().map(|s| s.to_string()).collect(), full.clone()),
        ExampleSource::Exp,
    );
    let got: BTreeSet<(Vec<String>, Vec<(usize, usize)>)> = prune_variants(&ex, &task, &RuleOracle)
        .unwrap()
        .into_iter()
        .map(|e| (e.graph.roles().to_vec(), e.graph.edges().collect()))
        .collect();

    let mut want = BTreeSet::new();
    for &e in &full {
        let mut edges = full.clone();
        edges.remove(&e);
        if brute_path_ok(&roles, &edges, "A", "C") {
            want.insert((roles.iter().map(|s| s.to_string()).collect::<Vec<_>>(), edges.into_iter().collect::<Vec<_>>()));
        }
    }
    for drop in 1..=3usize {
        let kept: Vec<usize> = (1..=3).filter(|&k| k != drop).collect();
        let rs: Vec<&str> = kept.iter().map(|&k| roles[k - 1]).collect();
        let renum = |k: usize| kept.iter().position(|&x| x == k).unwrap() + 1;
        let edges: BTreeSet<(usize, usize)> = full
            .iter()
            .filter(|(j, i)| *j != drop && *i != drop)
            .map(|&(j, i)| (renum(j), renum(i)))
            .collect();
        if brute_path_ok(&rs, &edges, "A", "C") {
            want.insert((rs.iter().map(|s| s.to_string()).collect(), edges.into_iter().collect()));
        }
    }
    if got != want {
        return Err(format!("prune_variants kept {got:?}, enumeration kept {want:?}"));
    }

    // stored datasets re-pass their oracle after a file round trip
    let names = ["planner", "solver", "checker"];
    let pool: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let tasks = efficiency_tasks();
    let exp = curriculum::synth_exploration(&tasks, &complex_configs(), &pool, &RuleOracle, 91).unwrap();
    let simple = curriculum::synth_simple(&tasks, &simple_configs(), &pool, &RuleOracle, 92).unwrap();
    let pruned = curriculum::prune_dataset(&exp, &tasks, &RuleOracle).unwrap();
    let eff = curriculum::assemble_efficiency(&simple, &pruned, &exp, 0.25, 93).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut stored = 0;
    for (file, data) in [("d_exp.jsonl", &exp), ("d_eff.jsonl", &eff)] {
        let path = dir.path().join(file);
        curriculum::write_dataset(&path, data).unwrap();
        let back = curriculum::read_dataset(&path).unwrap();
        let bad = curriculum::recheck(&back, &tasks, &RuleOracle).unwrap();
        if !bad.is_empty() {
            return Err(format!("{file}: {} stored examples fail their oracle", bad.len()));
        }
        for e in &back {
            let task = tasks.iter().find(|t| Some(&t.id) == e.task_id.as_ref()).unwrap();
            let Predicate::Path { from, to } = &task.predicate else { continue };
            let rs: Vec<&str> = e.graph.roles().iter().map(String::as_str).collect();
            if !brute_path_ok(&rs, e.graph.edge_set(), from, to) {
                return Err(format!("{file}: stored example fails the brute-force path check"));
            }
        }
        stored += back.len();
    }
    Ok(format!(
        "{} pruned variants match enumeration; {stored} stored examples re-pass",
        got.len()
    ))
}

// ---------------------------------------------------------------- harness

fn run(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => {
            println!("{label} PASS ({secs:.1}s) {d}");
            true
        }
        Err(d) => {
            println!("{label} FAIL ({secs:.1}s) {d}");
            false
        }
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |l: &str| filter.is_empty() || filter.iter().any(|f| l.contains(f.as_str()));
    let mut ok = true;
    if wanted("A1") {
        ok &= run("A1 gradient correctness", a1_gradients);
    }
    if wanted("A2") {
        ok &= run("A2 memorization", a2_memorization);
    }
    if wanted("A3") || wanted("A4") {
        let fam = train_families();
        if wanted("A3") {
            ok &= run("A3 conditional control", || a3_conditional(&fam));
        }
        if wanted("A4") {
            ok &= run("A4 structural validity", || a4_validity(&fam));
        }
    }
    if wanted("A5") {
        ok &= run("A5 efficiency fine-tuning", a5_efficiency);
    }
    if wanted("A6") {
        ok &= run("A6 extensibility", a6_extensibility);
    }
    if wanted("A7") {
        ok &= run("A7 likelihood consistency", a7_likelihood);
    }
    if wanted("A8") {
        ok &= run("A8 protocol fidelity", a8_protocol);
    }
    if wanted("A9") {
        ok &= run("A9 curriculum correctness", a9_curriculum);
    }
    if !ok {
        std::process::exit(1);
    }
}
