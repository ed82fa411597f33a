// Execute a collaboration graph on the deterministic mock backend and
// compare aggregation strategies.

use std::error::Error;

use topogen::graph::CollabGraph;
use topogen::runtime::{execute, token_cost, Aggregation, ExecOptions, MockBackend};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let graph = CollabGraph::from_parts(
        vec!["Planner".into(), "Solver".into(), "Solver".into(), "Checker".into()],
        [(1, 2), (1, 3), (2, 4), (3, 4)],
    );
    let backend = MockBackend::echo(11);
    let query = "what is 17 times 23";

    for strategy in [
        Aggregation::Summarizer,
        Aggregation::MajorityVote,
        Aggregation::TerminalAgent(4),
        Aggregation::LastInOrder,
    ] {
        let opts = ExecOptions::default().with_strategy(strategy.clone());
        let t = execute(&graph, query, &backend, &opts)?;
        println!(
            "{:<16} messages {} tokens {} final {:?}",
            strategy.name(),
            t.message_count(),
            token_cost(&t),
            t.final_output.as_deref().unwrap_or("")
        );
    }

    let t = execute(&graph, query, &backend, &ExecOptions::default().with_rounds(1))?;
    for m in &t.rounds[0] {
        println!("round 1 node {} ({}): {}", m.node, m.role, m.content);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
