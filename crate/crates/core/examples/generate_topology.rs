// Fit a small model to a handful of query/topology pairs, then decode
// greedily and by sampling.

use std::error::Error;

use topogen::curriculum::{ExampleSource, TrainingExample};
use topogen::encoding::{EmbeddingProvider, RoleRegistry, RoleSpec, TaskQuery};
use topogen::generator::{DecodePolicy, Generator, ModelConfig, TopologyModel};
use topogen::graph::CollabGraph;
use topogen::training::{train_phase, Phase, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let provider = EmbeddingProvider::hashed(32);
    let registry = RoleRegistry::register(
        &provider,
        &[
            RoleSpec::new("Planner", "splits the task into steps"),
            RoleSpec::new("Coder", "writes the implementation"),
            RoleSpec::new("Reviewer", "checks the result"),
        ],
    )?;
    let pairs = [
        ("write a sorting function", CollabGraph::from_parts(vec!["Coder".into(), "Reviewer".into()], [(1, 2)])),
        (
            "plan and build a web scraper",
            CollabGraph::from_parts(vec!["Planner".into(), "Coder".into(), "Reviewer".into()], [(1, 2), (2, 3)]),
        ),
        ("sketch a project roadmap", CollabGraph::from_parts(vec!["Planner".into()], [])),
    ];
    let data: Vec<TrainingExample> = pairs
        .iter()
        .map(|(q, g)| TrainingExample {
            query: q.to_string(),
            graph: g.clone(),
            source: ExampleSource::Exp,
            success: true,
            task_id: None,
            embedding: None,
        })
        .collect();

    let config = ModelConfig {
        raw_dim: 32,
        embed_dim: 16,
        hidden_dim: 16,
        max_nodes: 6,
    };
    let mut model = TopologyModel::new(config, 7)?;
    let train = TrainConfig {
        lr_cold_start: 1e-2,
        epochs_cold_start: 150,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let report = train_phase(&mut model, &provider, &registry, &data, &train, Phase::ColdStart)?;
    println!("final loss {:.4}", report.final_loss().map(|l| l.total).unwrap_or(f32::NAN));

    let gen = Generator::new(&model, &provider, &registry)?;
    for (q, _) in &pairs {
        let (g, trace) = gen.generate(&TaskQuery::new(*q)?, &DecodePolicy::greedy())?;
        println!("{q}: {} (log p {:.3})", g.to_json(), trace.total_log_prob);
    }
    let query = TaskQuery::new("plan and build a web scraper")?;
    for seed in 0..3 {
        let policy = DecodePolicy {
            temperature: 1.5,
            ..DecodePolicy::sample(seed)
        };
        match gen.generate(&query, &policy) {
            Ok((g, _)) => println!("sample {seed}: {}", g.to_json()),
            Err(e) => println!("sample {seed}: {e}"),
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
