// Append a role to a trained registry without retraining and check that
// the scores of existing roles do not move.

use std::error::Error;

use topogen::encoding::{EmbeddingProvider, RoleRegistry, RoleSpec, TaskQuery};
use topogen::generator::{DecodePolicy, Generator, GeneratorState, ModelConfig, TopologyModel};
use topogen::kernel::Array;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let provider = EmbeddingProvider::hashed(32);
    let registry = RoleRegistry::register(
        &provider,
        &[
            RoleSpec::new("Analyst", "reads the documents"),
            RoleSpec::new("Writer", "drafts the answer"),
        ],
    )?;
    let config = ModelConfig {
        raw_dim: 32,
        embed_dim: 16,
        hidden_dim: 16,
        max_nodes: 5,
    };
    let model = TopologyModel::new(config, 3)?;
    let extended = registry.extend(&provider, &[RoleSpec::new("Lawyer", "reviews contracts and liability")])?;
    println!("roles before {:?}", registry.names());
    println!("roles after  {:?}", extended.names());

    let before = Generator::new(&model, &provider, &registry)?;
    let after = Generator::new(&model, &provider, &extended)?;
    let mut state = GeneratorState::initial(&config);
    state.h_node = Array::vector((0..16).map(|k| (k as f32 * 0.37).sin()).collect());
    let (a, _) = before.score_roles(&state)?;
    let (b, _) = after.score_roles(&state)?;
    let n = registry.len();
    println!("old scores {:?}", &a.data()[..n]);
    println!("new scores {:?}", &b.data()[..=n]);
    assert_eq!(a.data()[..n], b.data()[..n]);

    let (g, _) = after.generate(&TaskQuery::new("review this lease agreement")?, &DecodePolicy::sample(5))
        .or_else(|_| after.generate(&TaskQuery::new("review this lease agreement")?, &DecodePolicy::greedy()))?;
    println!("extended pool generates {}", g.to_json());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
