use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn clsa(args: &[&str], config: &Value, dir: &Path) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_clsa"))
        .args(args)
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_csv(path: PathBuf) -> Vec<std::collections::HashMap<String, String>> {
    let mut r = csv::Reader::from_path(&path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

fn first_line(path: PathBuf) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn num(row: &std::collections::HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn six_compressors(horizon: usize, seeds: usize) -> Value {
    let runs: Vec<Value> = [
        "quantize_s",
        "stabilized_quantize",
        "rand_h",
        "sparsify",
        "partial_participation",
        "sketch_gaussian",
    ]
    .iter()
    .map(|k| json!({"name": k, "algorithm": "compressed_central", "calibrate": {"kind": k, "omega": 4}}))
    .collect();
    json!({
        "problem": {"kind": "synthetic", "dim": 8, "decay": 2.0, "rotation": "random_orthogonal", "seed": 3},
        "horizon": horizon,
        "seeds": seeds,
        "seed": 11,
        "runs": runs,
    })
}

#[test]
fn run_writes_one_file_per_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok(&clsa(&["run"], &six_compressors(2_000, 5), dir.path()));
    let out = dir.path().join("out");
    for k in ["quantize_s", "stabilized_quantize", "rand_h", "sparsify", "partial_participation", "sketch_gaussian"] {
        for s in 0..5 {
            assert!(out.join(k).join(format!("seed{s}.csv")).is_file(), "{k} seed{s}");
        }
    }
    let summary = read_csv(out.join("summary.csv"));
    assert!(summary.iter().all(|r| r["n_seeds"] == "5"));
    let last = summary.iter().filter(|r| r["iter"] == "2000").count();
    assert_eq!(last, 6);
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["variants"].as_array().unwrap().len(), 6);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = six_compressors(3_000, 2);
    let snapshot = |root: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    files.push((e.clone(), fs::read(&e).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    ok(&clsa(&["run"], &cfg, dir.path()));
    let a = snapshot(&dir.path().join("out"));
    ok(&clsa(&["run"], &cfg, dir.path()));
    let b = snapshot(&dir.path().join("out"));
    assert!(a.len() > 10);
    assert_eq!(a, b);
}

#[test]
fn golden_headers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = six_compressors(100, 1);
    cfg["covariance"] = json!({"omega_grid": [3], "kinds": ["identity"], "n_samples": 100});
    ok(&clsa(&["run"], &cfg, dir.path()));
    ok(&clsa(&["covariance"], &cfg, dir.path()));
    let out = dir.path().join("out");
    assert_eq!(first_line(out.join("rand_h/seed0.csv")), "iter,loss_last,loss_avg,memory_gap");
    assert_eq!(
        first_line(out.join("summary.csv")),
        "variant,iter,n_seeds,mean_log10_loss_avg,std_log10_loss_avg,mean_log10_loss_last"
    );
    assert_eq!(
        first_line(out.join("covariance.csv")),
        "compressor,omega,realized_omega,spec,analytical_trace,empirical_trace,frobenius_gap,is_upper_bound"
    );
    assert_eq!(first_line(out.join("eigenvalues.csv")), "compressor,omega,source,index,eigenvalue");
    assert_eq!(
        first_line(out.join("theory.csv")),
        "variant,compressor,k,gamma,gamma_max_nonlinear,gamma_max_linear,bound_nonlinear,bound_linear,\
bound_corollary,tr_ania_hinv,a,m1,m2,sha_add,sha_mult,omega,flag"
    );
}

#[test]
fn empty_runs_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"problem": {"kind": "synthetic", "dim": 4}, "runs": []});
    let out = clsa(&["run"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no runs"));
}

#[test]
fn unknown_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"problem": {"kind": "synthetic", "dim": 4}, "runs": [], "horizn": 5});
    assert_eq!(clsa(&["run"], &cfg, dir.path()).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"kind": "synthetic", "dim": 4},
        "horizon": 1000,
        "seeds": 1,
        "runs": [{"name": "lms", "algorithm": "lms", "step": {"kind": "constant", "gamma": 10.0}}],
    });
    assert_eq!(clsa(&["run"], &cfg, dir.path()).status.code(), Some(3));
}

#[test]
fn bad_worker_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, "{}").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_clsa"))
        .args(["run", path.to_str().unwrap()])
        .env("CLSA_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn covariance_rows(dim: usize, omegas: &[f64], kinds: &[&str]) -> Vec<std::collections::HashMap<String, String>> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"kind": "synthetic", "dim": dim, "decay": 1.0},
        "covariance": {"omega_grid": omegas, "kinds": kinds, "n_samples": 0},
    });
    ok(&clsa(&["covariance"], &cfg, dir.path()));
    read_csv(dir.path().join("out/covariance.csv"))
}

#[test]
fn identity_and_pp_trace_rows() {
    let rows = covariance_rows(12, &[1.0, 3.0, 11.0], &["identity", "partial_participation"]);
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let omega = num(r, "omega");
        let tr = num(r, "analytical_trace");
        let expected = if r["compressor"] == "identity" { 12.0 } else { 12.0 * (1.0 + omega) };
        assert!((tr - expected).abs() < 1e-9 * expected, "{r:?}");
        assert_eq!(r["empirical_trace"], "");
        assert_eq!(r["is_upper_bound"], "false");
    }
}

#[test]
fn diagonal_projection_traces_agree() {
    let rows = covariance_rows(100, &[9.0, 10.0], &["partial_participation", "sparsify", "rand_h"]);
    for r in &rows {
        // Every kind sits at d(1 + realized ω); the integer h in rand_h can
        // only hit ω = d/h − 1 exactly.
        let tr = num(r, "analytical_trace");
        let expected = 100.0 * (1.0 + num(r, "realized_omega"));
        assert!((tr - expected).abs() < 1e-9 * expected, "{r:?}");
    }
    let at9: Vec<f64> = rows.iter().filter(|r| r["omega"] == "9").map(|r| num(r, "analytical_trace")).collect();
    assert_eq!(at9.len(), 3);
    assert!(at9.iter().all(|t| (t - 1000.0).abs() < 1e-9));
}

#[test]
fn covariance_empirical_columns_track_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"kind": "synthetic", "dim": 6, "decay": 1.0, "rotation": "random_orthogonal"},
        "covariance": {"omega_grid": [3], "kinds": ["sparsify", "quantize_s"], "n_samples": 50000},
    });
    ok(&clsa(&["covariance"], &cfg, dir.path()));
    let rows = read_csv(dir.path().join("out/covariance.csv"));
    let sp = rows.iter().find(|r| r["compressor"] == "sparsify").unwrap();
    assert!(num(sp, "frobenius_gap") < 0.1, "{sp:?}");
    let q = rows.iter().find(|r| r["compressor"] == "quantize_s").unwrap();
    assert_eq!(q["is_upper_bound"], "true");
    let eig = read_csv(dir.path().join("out/eigenvalues.csv"));
    assert_eq!(eig.len(), 2 * 2 * 6);
}

#[test]
fn theory_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "problem": {"kind": "synthetic", "dim": 10, "decay": 1.0, "noise_var": 0.5},
        "horizon": 1000,
        "theory": {"k_grid": [100, 1000]},
        "runs": [
            {"name": "lms", "algorithm": "lms", "step": {"kind": "max_admissible"}},
            {"name": "pp", "algorithm": "compressed_central",
             "calibrate": {"kind": "partial_participation", "omega": 3}, "step": {"kind": "max_admissible"}},
            {"name": "pp_default", "algorithm": "compressed_central",
             "calibrate": {"kind": "partial_participation", "omega": 3}},
            {"name": "q_horizon", "algorithm": "compressed_central",
             "compressor": {"kind": "quantize_s", "s": 1}, "step": {"kind": "horizon_power", "alpha_exp": 0.4}},
        ],
    });
    ok(&clsa(&["theory"], &cfg, dir.path()));
    let rows = read_csv(dir.path().join("out/theory.csv"));
    assert_eq!(rows.len(), 8);
    for r in rows.iter().filter(|r| r["variant"] == "lms") {
        // Leading term of the LMS bound: d σ² / (2K).
        assert!((num(r, "tr_ania_hinv") - 5.0).abs() < 1e-12);
        let k = num(r, "k");
        assert!(num(r, "bound_linear") >= 5.0 / (2.0 * k));
    }
    for r in rows.iter().filter(|r| r["variant"] == "pp") {
        let b = num(r, "bound_linear");
        assert!(b.is_finite() && b > 0.0);
    }
    // The default step breaks the 4 Sha_mult γ ≤ 1 condition for PP.
    for r in rows.iter().filter(|r| r["variant"] == "pp_default") {
        assert_eq!(r["bound_linear"], "");
        assert!(r["flag"].contains("linear"));
    }
    for r in rows.iter().filter(|r| r["variant"] == "q_horizon") {
        assert!(num(r, "bound_corollary") > 0.0);
        assert_eq!(r["bound_linear"], "");
    }
}

#[test]
fn singular_hessian_is_flagged_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "clients": [{
            "covariance": {"dim": 2, "matrix": [[1.0, 0.0], [0.0, 0.0]]},
            "w_star_local": [1.0, 0.0],
            "noise_var": 1.0,
        }],
    });
    let cfg = json!({
        "problem": {"kind": "inline", "spec": spec},
        "horizon": 100,
        "runs": [{"name": "q", "algorithm": "compressed_central",
                  "compressor": {"kind": "quantize_s", "s": 1}, "step": {"kind": "constant", "gamma": 0.01}}],
    });
    let out = clsa(&["theory"], &cfg, dir.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let rows = read_csv(dir.path().join("out/theory.csv"));
    assert!(rows.iter().all(|r| !r["flag"].is_empty() && r["bound_nonlinear"].is_empty()));
}

#[test]
fn dataset_problem_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,b,c,label\n");
    let mut state = 7u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    for i in 0..400 {
        let shift = if i % 2 == 0 { 3.0 } else { -3.0 };
        let (a, b, c) = (next() + shift, next(), next());
        text += &format!("{a},{b},{c},{}\n", a - 2.0 * b + 0.1 * next());
    }
    text += "1,,2,3\n";
    fs::write(dir.path().join("data.csv"), text).unwrap();
    let cfg = json!({
        "problem": {"kind": "dataset", "path": "data.csv", "preprocess": "standardize",
                    "clients": 2, "split": "cluster"},
        "horizon": 2000,
        "seeds": 2,
        "runs": [{"name": "dist", "algorithm": "compressed_distributed",
                  "compressor": {"kind": "sparsify", "p": 0.5}}],
    });
    let out = clsa(&["run"], &cfg, dir.path());
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropped 1 rows"));
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["n_clients"], 2);
    assert!(dir.path().join("out/dist/seed1.csv").is_file());
}
