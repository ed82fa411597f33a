// Save a model with its role registry and load it back.

use std::error::Error;

use topogen::encoding::{EmbeddingProvider, RoleRegistry, RoleSpec, TaskQuery};
use topogen::generator::{DecodePolicy, Generator, ModelConfig, TopologyModel};
use topogen::training::{load_checkpoint, save_checkpoint};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.json");
    let provider = EmbeddingProvider::hashed(16);
    let registry = RoleRegistry::register(&provider, &[RoleSpec::new("Researcher", ""), RoleSpec::new("Editor", "")])?;
    let config = ModelConfig {
        raw_dim: 16,
        embed_dim: 8,
        hidden_dim: 8,
        max_nodes: 4,
    };
    let model = TopologyModel::new(config, 9)?;
    let manifest = save_checkpoint(&path, &model, &registry)?;
    println!("saved {} tensors, registry {}", manifest.params.len(), manifest.registry_fingerprint);

    let (loaded, manifest) = load_checkpoint(&path)?;
    let registry = RoleRegistry::register(&provider, &manifest.roles)?;
    let query = TaskQuery::new("summarise three papers")?;
    let policy = DecodePolicy::sample(2);
    let a = Generator::new(&model, &provider, &registry)?.generate(&query, &policy);
    let b = Generator::new(&loaded, &provider, &registry)?.generate(&query, &policy);
    println!("identical decode after reload: {}", a.ok() == b.ok());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
