// Graph construction, validation, JSON round trip and Graphviz export.

use std::error::Error;

use topogen::graph::CollabGraph;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut g = CollabGraph::new(Vec::new());
    let planner = g.push_node("Planner");
    let coder = g.push_node("Coder");
    let tester = g.push_node("Tester");
    g.add_edge(planner, coder)?;
    g.add_edge(planner, tester)?;
    g.add_edge(coder, tester)?;
    g.validate_dag()?;

    let json = g.to_json_pretty();
    println!("{json}");
    assert_eq!(CollabGraph::from_json(&json)?, g);
    println!("{}", g.to_dot());

    println!("cycle rejected: {}", g.add_edge(tester, planner).is_err());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
