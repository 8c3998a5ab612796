use std::path::Path;
use std::process::{Command, Output};

use hedra_core::harness::report::{read_trace, ExperimentReport};
use hedra_core::harness::workload::Workload;

const CONFIG: &str = r#"
[corpus]
n_vectors = 2000
dim = 16
n_topics = 8

[index]
k_clusters = 32
train_iters = 5

[workload]
requests = 12
max_iterations = 2

[workload.arrival.poisson]
rate_rps = 50.0

[run]
nprobe = 8
"#;

fn hedra(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_hedra"))
        .current_dir(dir)
        .env_remove("HEDRA_SEED")
        .args(["--config", "exp.toml"])
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "hedra {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.toml"), CONFIG).unwrap();

    hedra(dir, &["gen-corpus", "--out", "corpus.hvec"]);
    hedra(dir, &["build-index", "--corpus", "corpus.hvec", "--out", "index"]);
    hedra(dir, &["gen-workload", "--out", "workload.jsonl"]);
    assert_eq!(Workload::read_jsonl(dir.join("workload.jsonl")).unwrap().requests.len(), 12);
    hedra(
        dir,
        &["bench", "--corpus", "corpus.hvec", "--index", "index", "--profile", "profile.csv", "--out", "bench.json"],
    );
    assert!(dir.join("profile.csv").exists());

    let data = ["--corpus", "corpus.hvec", "--index", "index", "--workload", "workload.jsonl"];
    for strategy in ["coarse", "naive", "hedra"] {
        let report = format!("{strategy}.json");
        let trace = format!("{strategy}.jsonl");
        let mut args = vec!["run", "--strategy", strategy, "--report", &report, "--trace", &trace];
        args.extend(data);
        hedra(dir, &args);
        let r = ExperimentReport::read(dir.join(&report)).unwrap();
        assert_eq!(r.summary.admitted, 12);
        assert_eq!(r.summary.completed, 12);
        assert!(!read_trace(dir.join(&trace)).unwrap().is_empty());
    }
    let coarse = ExperimentReport::read(dir.join("coarse.json")).unwrap();
    let hedra_r = ExperimentReport::read(dir.join("hedra.json")).unwrap();
    for (id, r) in &coarse.requests {
        assert_eq!(r.bindings, hedra_r.requests[id].bindings, "request {id}");
    }

    let mut args = vec![
        "run", "--bench", "bench.json", "--profile", "profile.csv", "--total-mem", "4294967296", "--model-bytes",
        "1073741824", "--approx", "--speculation", "off", "--report", "tuned.json",
    ];
    args.extend(data);
    hedra(dir, &args);

    let out = hedra(dir, &["report", "--trace", "hedra.jsonl", "--report", "hedra.json"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("busy_ms"));
}

#[test]
fn seed_env_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.toml"), CONFIG).unwrap();
    let gen = |name: &str, seed: &str, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_hedra"));
        c.current_dir(dir).env_remove("HEDRA_SEED");
        if let Some(e) = env {
            c.env("HEDRA_SEED", e);
        }
        let st = c
            .args(["--config", "exp.toml", "gen-corpus", "--out", name, "--seed", seed])
            .output()
            .unwrap();
        assert!(st.status.success());
        std::fs::read(dir.join(name)).unwrap()
    };
    let a = gen("a.hvec", "1", Some("7"));
    let b = gen("b.hvec", "2", Some("7"));
    let c = gen("c.hvec", "1", None);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn bad_arguments_fail() {
    let st = Command::new(env!("CARGO_BIN_EXE_hedra"))
        .args(["run", "--strategy", "greedy"])
        .output()
        .unwrap();
    assert!(!st.status.success());
    let st = Command::new(env!("CARGO_BIN_EXE_hedra"))
        .args(["report", "--trace", "/nonexistent/trace.jsonl"])
        .output()
        .unwrap();
    assert!(!st.status.success());
}
