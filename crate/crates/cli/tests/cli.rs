use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sparsevid::fixtures::{read_tensor, write_tensor, GridDims, TokenGrid};
use sparsevid::pipeline::TraceRecord;
use tempfile::TempDir;

fn sparsevid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsevid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = sparsevid(args);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn read(path: &str) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn pipeline_config(mode: &str, attn: [f64; 2], token: [f64; 2]) -> Value {
    json!({
        "version": 1,
        "grid": [2, 4, 4, 16],
        "cube": [2, 2, 2],
        "n_layers": 3,
        "n_heads": 2,
        "schedule": {
            "steps": [999, 500],
            "rho_attn_base": attn,
            "rho_token_base": token
        },
        "policy": {"rho_attn_max": 0.9, "rho_token_max": 0.6},
        "weight_seed": 11,
        "noise": {"seed": 5, "distribution": "standard-normal", "correlation": {"block-smoothed": [1, 2, 2]}},
        "mode": mode,
        "steps_dense": 8,
        "mlp_expansion": 2
    })
}

fn run(dir: &Path, tag: &str, config: &Value, extra: &[&str]) -> TraceRecord {
    let cfg = write(dir, &format!("{tag}.json"), config);
    let trace = path(dir, &format!("{tag}.trace.json"));
    let csv = path(dir, &format!("{tag}.csv"));
    let mut args = vec!["run", "--config", &cfg, "--trace", &trace, "--csv", &csv];
    args.extend_from_slice(extra);
    ok(&args);
    serde_json::from_slice(&std::fs::read(&trace).unwrap()).unwrap()
}

#[test]
fn gen_fixture_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(dir.path(), "a"), path(dir.path(), "b"));
    for out in [&a, &b] {
        ok(&["gen-fixture", "--seed", "7", "--dims", "2,2,2,8", "--mode", "iid", "--out", out]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(format!("{a}.json")).unwrap(),
        std::fs::read(format!("{b}.json")).unwrap()
    );
    assert_eq!(read_tensor(Path::new(&a)).unwrap().dims(), GridDims::new(2, 2, 2, 8).unwrap());
}

#[test]
fn gen_fixture_rejects_bad_dims() {
    for dims in ["2,2,8", "2,x,2,8", "0,2,2,8"] {
        let out = sparsevid(&["gen-fixture", "--seed", "1", "--dims", dims, "--out", "/nonexistent/x"]);
        assert_eq!(code(&out), 2, "{dims}");
    }
}

#[test]
fn smoothed_fixture_raises_neighbour_similarity() {
    let dir = TempDir::new().unwrap();
    for seed in ["0", "1", "2", "3"] {
        let (iid, smooth) = (path(dir.path(), "iid"), path(dir.path(), "smooth"));
        ok(&["gen-fixture", "--seed", seed, "--dims", "1,4,4,8", "--out", &iid]);
        ok(&["gen-fixture", "--seed", seed, "--dims", "1,4,4,8", "--mode", "smoothed", "--out", &smooth]);
        let a = read_tensor(Path::new(&iid)).unwrap().mean_horizontal_cosine();
        let b = read_tensor(Path::new(&smooth)).unwrap().mean_horizontal_cosine();
        assert!(b > a, "seed {seed}: {b} vs {a}");
    }
}

fn allocate_docs(dir: &Path, values: Value, base: f64, max: f64) -> (String, String, String) {
    let profile = write(dir, "profile.json", &json!({"version": 1, "values": values, "n_tokens_used": 100}));
    let schedule = write(
        dir,
        "schedule.json",
        &json!({"version": 1, "steps": [0], "rho_attn_base": [base], "rho_token_base": [base]}),
    );
    let params = write(dir, "params.json", &json!({"version": 1, "rho_attn_max": max, "rho_token_max": max}));
    (profile, schedule, params)
}

#[test]
fn allocate_reproduces_hand_examples() {
    let dir = TempDir::new().unwrap();
    let out = path(dir.path(), "alloc.json");
    for (base, expect) in [(0.5, [0.8, 0.2]), (0.7, [0.95, 0.45])] {
        let (p, s, q) = allocate_docs(dir.path(), json!([[0.2, 0.8]]), base, 0.95);
        ok(&["allocate", "--profile", &p, "--schedule", &s, "--params", &q, "--out", &out]);
        let doc = read(&out);
        assert_eq!(doc["version"], 1);
        for (l, want) in expect.iter().enumerate() {
            let got = doc["rho_attn"][0][l].as_f64().unwrap();
            assert!((got - want).abs() < 1e-12, "base {base}: {got} vs {want}");
        }
        if base == 0.5 {
            assert_eq!(doc["k_token"], json!([[80, 20]]));
        }
    }
}

#[test]
fn allocate_equal_entropies_returns_base() {
    let dir = TempDir::new().unwrap();
    let out = path(dir.path(), "alloc.json");
    let (p, s, q) = allocate_docs(dir.path(), json!([[0.6, 0.6, 0.6]]), 0.35, 1.0);
    ok(&["allocate", "--profile", &p, "--schedule", &s, "--params", &q, "--out", &out]);
    assert_eq!(read(&out)["rho_attn"], json!([[0.35, 0.35, 0.35]]));
}

#[test]
fn allocate_input_errors_exit_with_data_code() {
    let dir = TempDir::new().unwrap();
    let out = path(dir.path(), "alloc.json");
    let (p, s, q) = allocate_docs(dir.path(), json!([[0.2, 0.8], [0.1, 0.3]]), 0.5, 1.0);
    let res = sparsevid(&["allocate", "--profile", &p, "--schedule", &s, "--params", &q, "--out", &out]);
    assert_eq!(code(&res), 3);

    let (p, s, _) = allocate_docs(dir.path(), json!([[0.2, 0.8]]), 0.5, 1.0);
    let unknown = write(dir.path(), "unknown.json", &json!({"version": 1, "gamma": 1.0, "gama": 2.0}));
    let res = sparsevid(&["allocate", "--profile", &p, "--schedule", &s, "--params", &unknown, "--out", &out]);
    assert_eq!(code(&res), 3);
    let wrong = write(dir.path(), "wrong.json", &json!({"version": 2}));
    let res = sparsevid(&["allocate", "--profile", &p, "--schedule", &s, "--params", &wrong, "--out", &out]);
    assert_eq!(code(&res), 3);
    let missing = path(dir.path(), "missing.json");
    let res = sparsevid(&["allocate", "--profile", &p, "--schedule", &s, "--params", &missing, "--out", &out]);
    assert_eq!(code(&res), 3);
}

#[test]
fn dense_and_zero_sparsity_dynamic_agree() {
    let dir = TempDir::new().unwrap();
    let dense = run(dir.path(), "dense", &pipeline_config("dense", [0.5, 0.5], [0.2, 0.2]), &[]);
    let zero = run(dir.path(), "zero", &pipeline_config("dynamic-sparse", [0.0, 0.0], [0.0, 0.0]), &[]);
    assert_eq!(dense.checksums(), zero.checksums());
    let threaded = run(
        dir.path(),
        "threaded",
        &pipeline_config("dynamic-sparse", [0.0, 0.0], [0.0, 0.0]),
        &["--threads", "3"],
    );
    assert_eq!(threaded.checksums(), zero.checksums());
}

#[test]
fn reversed_schedule_keeps_total_flops() {
    let dir = TempDir::new().unwrap();
    // Merged lengths 16 and 24 split into whole chunks of 8, so realized
    // densities do not depend on which chunks are selected.
    let forward = run(dir.path(), "fwd", &pipeline_config("static-sparse", [0.75, 0.25], [0.5, 0.25]), &[]);
    let reversed = run(dir.path(), "rev", &pipeline_config("reversed-schedule", [0.75, 0.25], [0.5, 0.25]), &[]);
    assert_eq!(forward.cost.sparse_total, reversed.cost.sparse_total);
    assert_ne!(forward.steps[0].base_rho_attn, reversed.steps[0].base_rho_attn);
    assert_eq!(forward.steps[0].base_rho_attn, reversed.steps[1].base_rho_attn);
    assert_eq!(forward.steps[1].base_rho_token, reversed.steps[0].base_rho_token);
}

#[test]
fn trace_matches_documented_schema() {
    let dir = TempDir::new().unwrap();
    let grid = path(dir.path(), "grid.bin");
    let cost = path(dir.path(), "cost.csv");
    let trace = run(
        dir.path(),
        "dyn",
        &pipeline_config("dynamic-sparse", [0.5, 0.75], [0.25, 0.25]),
        &["--out-grid", &grid, "--cost-csv", &cost],
    );
    let raw = read(&path(dir.path(), "dyn.trace.json"));
    let keys: Vec<&str> = raw.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["config", "cost", "schedule", "steps", "version"]);
    let layer = &raw["steps"][0]["layers"][0];
    for key in [
        "layer", "entropy", "rho_attn", "rho_token", "k_cubes", "n_cubes", "merged_len",
        "mask_density", "flops_attention", "flops_mlp", "wall_time_us",
    ] {
        assert!(layer.get(key).is_some(), "missing {key}");
    }
    assert_eq!(raw["cost"]["wallclock_reference"]["dit_speedup"], 83.3);
    assert_eq!(trace.steps.len(), 2);
    assert!(trace.steps.iter().all(|s| s.layers.len() == 3));
    assert_eq!(read_tensor(Path::new(&grid)).unwrap().dims(), GridDims::new(2, 4, 4, 16).unwrap());

    let csv = std::fs::read_to_string(path(dir.path(), "dyn.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,layer,entropy,rho_attn,rho_token,k_cubes,n_cubes,merged_len,mask_density,flops_attention,flops_mlp,wall_time_us"
    );
    assert_eq!(lines.count(), 6);
    assert_eq!(std::fs::read_to_string(&cost).unwrap().lines().count(), 7);
}

#[test]
fn run_rejects_unknown_config_fields() {
    let dir = TempDir::new().unwrap();
    let mut cfg = pipeline_config("dense", [0.0, 0.0], [0.0, 0.0]);
    cfg["n_layer"] = json!(2);
    let file = write(dir.path(), "bad.json", &cfg);
    let trace = path(dir.path(), "t.json");
    let csv = path(dir.path(), "t.csv");
    assert_eq!(code(&sparsevid(&["run", "--config", &file, "--trace", &trace, "--csv", &csv])), 3);
}

#[test]
fn bench_writes_self_baselined_rows() {
    let dir = TempDir::new().unwrap();
    let spec = write(
        dir.path(),
        "bench.json",
        &json!({
            "version": 1,
            "token_counts": [256, 512],
            "sparsity_levels": [0.0, 0.5, 0.75],
            "repeats": 3,
            "d_model": 8,
            "n_heads": 1,
            "cube_dims": [2, 2, 2]
        }),
    );
    let out = path(dir.path(), "bench.csv");
    ok(&["bench", "--spec", &spec, "--out", &out, "--threads", "2"]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("n_tokens,sparsity,mean_wall_time_s,flops,speedup_vs_dense,"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for row in rows.iter().filter(|r| r[1] == "0.0") {
        assert_eq!(row[4], "1.0");
    }
    let meta = read(&format!("{out}.json"));
    assert_eq!(meta["threads"], 2);
    assert!(meta["available_parallelism"].as_u64().unwrap() >= 1);
}

#[test]
fn bench_rejects_too_few_repeats() {
    let dir = TempDir::new().unwrap();
    let spec = write(
        dir.path(),
        "bench.json",
        &json!({"version": 1, "token_counts": [64], "sparsity_levels": [0.0], "repeats": 1}),
    );
    let out = path(dir.path(), "bench.csv");
    assert_eq!(code(&sparsevid(&["bench", "--spec", &spec, "--out", &out])), 3);
}

fn dump(dir: &Path, name: &str, n: usize, rows: impl Fn(usize) -> Vec<f32>) -> PathBuf {
    let data: Vec<f32> = (0..n).flat_map(rows).collect();
    let grid = TokenGrid::new(GridDims::new(1, n, n, 1).unwrap(), data).unwrap();
    let p = dir.join(name);
    write_tensor(&grid, &p).unwrap();
    p
}

#[test]
fn entropy_from_uniform_dump_is_one() {
    let dir = TempDir::new().unwrap();
    let dumps = dir.path().join("dumps");
    std::fs::create_dir(&dumps).unwrap();
    dump(&dumps, "s0_t3_l0.bin", 8, |_| vec![0.125; 8]);
    let out = path(dir.path(), "entropy.csv");
    let profile = path(dir.path(), "profile.json");
    ok(&["entropy", "--dumps", dumps.to_str().unwrap(), "--out", &out, "--profile-out", &profile]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..2], ["3", "0"]);
    assert!((row[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-6);
    let doc = read(&profile);
    assert_eq!(doc["version"], 1);
    assert_eq!(doc["n_tokens_used"], 8);
}

#[test]
fn entropy_rejects_non_stochastic_rows() {
    let dir = TempDir::new().unwrap();
    dump(dir.path(), "s0_t0_l0.bin", 4, |i| if i == 2 { vec![0.125; 4] } else { vec![0.25; 4] });
    let out = path(dir.path(), "entropy.csv");
    assert_eq!(code(&sparsevid(&["entropy", "--dumps", dir.path().to_str().unwrap(), "--out", &out])), 3);
}

#[test]
fn run_dumps_feed_entropy_command() {
    let dir = TempDir::new().unwrap();
    let dumps = path(dir.path(), "dumps");
    let trace = run(
        dir.path(),
        "dense",
        &pipeline_config("dense", [0.0, 0.0], [0.0, 0.0]),
        &["--dump-dir", &dumps],
    );
    let out = path(dir.path(), "entropy.csv");
    ok(&["entropy", "--dumps", &dumps, "--out", &out]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        let step = trace.steps.iter().find(|s| s.step as f64 == row[0]).unwrap();
        let want = step.layers[row[1] as usize].entropy;
        assert!((row[2] - want).abs() < 1e-5, "{} vs {want}", row[2]);
    }
}
