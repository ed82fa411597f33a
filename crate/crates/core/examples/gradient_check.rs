// Compare backpropagated gradients of the generation loss with central
// finite differences on a few parameters.

use std::error::Error;

use topogen::curriculum::{ExampleSource, TrainingExample};
use topogen::encoding::{EmbeddingProvider, RoleRegistry, RoleSpec};
use topogen::generator::{Generator, ModelConfig, TopologyModel};
use topogen::graph::CollabGraph;
use topogen::training::{example_gradients, example_loss};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let provider = EmbeddingProvider::hashed(8);
    let registry = RoleRegistry::register(&provider, &[RoleSpec::new("A", "first"), RoleSpec::new("B", "second")])?;
    let config = ModelConfig {
        raw_dim: 8,
        embed_dim: 8,
        hidden_dim: 8,
        max_nodes: 4,
    };
    let mut model = TopologyModel::new(config, 1)?;
    let ex = TrainingExample {
        query: "a small task".into(),
        graph: CollabGraph::from_parts(vec!["A".into(), "B".into(), "B".into()], [(1, 2), (1, 3)]),
        source: ExampleSource::Exp,
        success: true,
        task_id: None,
        embedding: None,
    };
    let alpha = 0.2;
    let (_, grads) = example_gradients(&Generator::new(&model, &provider, &registry)?, &ex, alpha)?;

    let h = 1e-2f32;
    for name in ["pred_n.b2", "pred_e.w2", "gru_node.u_update", "task.ln.gain"] {
        let analytic = grads.get(name).map(|g| g.data()[0]).unwrap_or(0.0);
        let mut loss_at = |delta: f32| -> Result<f32, Box<dyn Error>> {
            model.params_mut().get_mut(name).ok_or("unknown parameter")?.data_mut()[0] += delta;
            let l = example_loss(&Generator::new(&model, &provider, &registry)?, &ex, alpha)?.total;
            model.params_mut().get_mut(name).ok_or("unknown parameter")?.data_mut()[0] -= delta;
            Ok(l)
        };
        let numeric = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
        println!("{name:<20} analytic {analytic:+.5} numeric {numeric:+.5}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
