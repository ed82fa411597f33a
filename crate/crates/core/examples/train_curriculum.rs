// Build the exploration and efficiency datasets from a task suite, train
// both phases and compare the resulting topologies.

use std::error::Error;

use topogen::curriculum::{
    assemble_efficiency, complex_configs, prune_dataset, simple_configs, synth_exploration, synth_simple, Predicate,
    RuleOracle, SuccessOracle, TaskSpec,
};
use topogen::encoding::{EmbeddingProvider, RoleRegistry, RoleSpec};
use topogen::generator::{DecodePolicy, Generator, ModelConfig, TopologyModel};
use topogen::runtime::{execute, token_cost, ExecOptions, MockBackend};
use topogen::training::{train_phase, Phase, TrainConfig};

fn report(label: &str, model: &TopologyModel, provider: &EmbeddingProvider, registry: &RoleRegistry, tasks: &[TaskSpec]) -> Result<(), Box<dyn Error>> {
    let gen = Generator::new(model, provider, registry)?;
    let backend = MockBackend::new(0);
    for task in tasks {
        let (g, _) = gen.generate(&task.task_query()?, &DecodePolicy::greedy())?;
        let transcript = execute(&g, &task.query, &backend, &ExecOptions::default())?;
        println!(
            "{label} {}: {} nodes, {} edges, success {}, {} prompt tokens",
            task.id,
            g.node_count(),
            g.edge_count(),
            RuleOracle.check(task, &g)?,
            token_cost(&transcript)
        );
    }
    Ok(())
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let names = ["planner", "solver", "checker"];
    let pool: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let tasks = vec![
        TaskSpec::new(
            "verify",
            "solve the equation then verify the result",
            vec!["solver".into(), "checker".into()],
            Predicate::Path { from: "solver".into(), to: "checker".into() },
        ),
        TaskSpec::new(
            "delegate",
            "plan a trip and delegate bookings",
            vec!["planner".into()],
            Predicate::Hub { role: "planner".into(), min_out: 2 },
        ),
    ];
    let simple: Vec<_> = (0..40).flat_map(|_| simple_configs()).collect();

    let exp = synth_exploration(&tasks, &complex_configs(), &pool, &RuleOracle, 1)?;
    let simple = synth_simple(&tasks, &simple, &pool, &RuleOracle, 2)?;
    let pruned = prune_dataset(&exp, &tasks, &RuleOracle)?;
    let eff = assemble_efficiency(&simple, &pruned, &exp, 0.25, 3)?;
    println!("D_exp {} examples, D_eff {} examples", exp.len(), eff.len());

    let provider = EmbeddingProvider::hashed(32);
    let registry = RoleRegistry::register(&provider, &names.map(|n| RoleSpec::new(n, format!("the {n}"))))?;
    let mut model = TopologyModel::new(
        ModelConfig {
            raw_dim: 32,
            embed_dim: 16,
            hidden_dim: 16,
            max_nodes: 8,
        },
        4,
    )?;
    let train = TrainConfig {
        lr_cold_start: 5e-3,
        lr_fine_tune: 1e-3,
        epochs_cold_start: 40,
        epochs_fine_tune: 5,
        ..TrainConfig::default()
    };
    train_phase(&mut model, &provider, &registry, &exp, &train, Phase::ColdStart)?;
    report("cold-start", &model, &provider, &registry, &tasks)?;
    train_phase(&mut model, &provider, &registry, &eff, &train, Phase::FineTune)?;
    report("fine-tune", &model, &provider, &registry, &tasks)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
