use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Self { dir };
        ws.write(
            "roles.json",
            &json!([
                {"name": "Planner", "description": "breaks the task down"},
                {"name": "Solver", "description": "works the problem"},
                {"name": "Checker", "description": "verifies the answer"}
            ])
            .to_string(),
        );
        ws.write(
            "tasks.json",
            &json!([
                {"id": "t1", "query": "solve and verify the sum", "required_roles": ["Solver"],
                 "predicate": {"kind": "path", "from": "Solver", "to": "Checker"}},
                {"id": "t2", "query": "plan a schedule", "required_roles": ["Planner"],
                 "predicate": {"kind": "node_count", "min": 1, "max": 6}}
            ])
            .to_string(),
        );
        ws.write(
            "config.json",
            &json!({
                "seed": 3,
                "paths": {
                    "role_pool": ws.path("roles.json"),
                    "task_suite": ws.path("tasks.json"),
                    "d_exp": ws.path("data/d_exp.jsonl"),
                    "d_eff": ws.path("data/d_eff.jsonl"),
                    "checkpoint": ws.path("ckpt/cold.json"),
                    "fine_tuned": ws.path("ckpt/fine.json"),
                    "output_dir": ws.path("out")
                },
                "embedding": {"dim": 16},
                "model": {"raw_dim": 16, "embed_dim": 8, "hidden_dim": 8, "max_nodes": 6},
                "train": {"epochs_cold_start": 2, "epochs_fine_tune": 1, "batch_size": 4}
            })
            .to_string(),
        );
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) {
        let p = self.path(name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, text).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("config.json");
        Command::new(env!("CARGO_BIN_EXE_topogen"))
            .arg("--config")
            .arg(&config)
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn trained(&self) -> PathBuf {
        self.ok(&["synth-data", "--oracle", "always"]);
        self.ok(&["train", "--phase", "cold-start"]);
        self.path("ckpt/cold.json")
    }
}

fn lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn synth_data_counts_and_rerun_is_identical() {
    let ws = Workspace::new();
    ws.ok(&["synth-data", "--oracle", "always"]);
    // two tasks times nine complex configurations, all accepted
    assert_eq!(lines(&ws.path("data/d_exp.jsonl")), 18);
    let first = fs::read(ws.path("data/d_eff.jsonl")).unwrap();
    let first_exp = fs::read(ws.path("data/d_exp.jsonl")).unwrap();
    ws.ok(&["synth-data", "--oracle", "always"]);
    assert_eq!(fs::read(ws.path("data/d_eff.jsonl")).unwrap(), first);
    assert_eq!(fs::read(ws.path("data/d_exp.jsonl")).unwrap(), first_exp);
}

#[test]
fn synth_data_rejects_an_empty_suite() {
    let ws = Workspace::new();
    ws.write("tasks.json", "[]");
    assert_eq!(code(&ws.run(&["synth-data"])), 2);
}

#[test]
fn train_both_phases_and_require_init_for_fine_tune() {
    let ws = Workspace::new();
    let cold = ws.trained();
    assert!(cold.exists());
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.path("ckpt/cold.report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);

    assert_eq!(code(&ws.run(&["train", "--phase", "fine-tune"])), 2);
    ws.ok(&["train", "--phase", "fine-tune", "--init", cold.to_str().unwrap()]);
    assert!(ws.path("ckpt/fine.json").exists());
}

#[test]
fn generate_respects_n_max_and_exports_stable_dot() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let ckpt = ckpt.to_str().unwrap();
    let graph_path = ws.path("out/g.json");
    let dot_path = ws.path("out/g.dot");
    ws.ok(&[
        "generate",
        "--checkpoint",
        ckpt,
        "--query",
        "solve and verify the sum",
        "--n-max",
        "1",
        "--out",
        graph_path.to_str().unwrap(),
        "--export-dot",
        dot_path.to_str().unwrap(),
    ]);
    let g: Value = serde_json::from_str(&fs::read_to_string(&graph_path).unwrap()).unwrap();
    assert_eq!(g["nodes"].as_array().unwrap().len(), 1);
    let dot = fs::read_to_string(&dot_path).unwrap();
    assert!(dot.starts_with("digraph"));

    let again = ws.path("out/again.dot");
    ws.ok(&["export-dot", "--graph", graph_path.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(again).unwrap(), dot);
}

#[test]
fn run_executes_a_chain_and_rejects_cycles() {
    let ws = Workspace::new();
    ws.write(
        "chain.json",
        &json!({"nodes": [{"id": 1, "role": "Planner"}, {"id": 2, "role": "Solver"}, {"id": 3, "role": "Checker"}],
                "edges": [[1, 2], [2, 3]]})
        .to_string(),
    );
    let transcript = ws.path("out/t.json");
    let stdout = ws.ok(&[
        "run",
        "--graph",
        "chain.json",
        "--query",
        "add two numbers",
        "--strategy",
        "last-in-order",
        "--out",
        transcript.to_str().unwrap(),
    ]);
    assert!(stdout.contains("prompt tokens"));
    let t: Value = serde_json::from_str(&fs::read_to_string(&transcript).unwrap()).unwrap();
    let messages: usize = t["rounds"].as_array().unwrap().iter().map(|r| r.as_array().unwrap().len()).sum();
    assert_eq!(messages, 9);
    assert_eq!(t["K"], 3);

    ws.write(
        "cycle.json",
        &json!({"nodes": [{"id": 1, "role": "Planner"}, {"id": 2, "role": "Solver"}], "edges": [[1, 2], [2, 1]]})
            .to_string(),
    );
    assert_eq!(code(&ws.run(&["run", "--graph", "cycle.json", "--query", "q"])), 2);
    assert_eq!(code(&ws.run(&["run", "--graph", "missing.json", "--query", "q"])), 2);
}

#[test]
fn eval_reports_a_fixed_topology_baseline() {
    let ws = Workspace::new();
    let out = ws.path("out/eval.json");
    ws.ok(&["eval", "--topology", "chain", "--agents", "3", "--out", out.to_str().unwrap()]);
    let r: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(r["tasks"].as_array().unwrap().len(), 2);
    assert_eq!(r["mean_nodes"], 3.0);
    assert_eq!(r["mean_edges"], 2.0);
    assert!(r["mean_prompt_tokens"].as_f64().unwrap() > 0.0);
}

#[test]
fn extend_roles_appends_to_the_checkpoint() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    ws.write("new_roles.json", &json!([{"name": "Lawyer", "description": "reviews contracts"}]).to_string());
    let out = ws.path("ckpt/extended.json");
    ws.ok(&[
        "extend-roles",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--roles",
        "new_roles.json",
        "--out",
        out.to_str().unwrap(),
    ]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let names: Vec<&str> = manifest["roles"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["Planner", "Solver", "Checker", "Lawyer"]);
    ws.ok(&["generate", "--checkpoint", out.to_str().unwrap(), "--query", "review the lease"]);
}
