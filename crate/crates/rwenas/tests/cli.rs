mod support;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rwenas::config::RunConfig;
use rwenas::table::save_table;
use rwenas_core::netgraph::decode;
use support::fixtures::{covering_table, TINY};
use support::oracle;

const GENOME: &str = "micro:0,1,1,7,2,1,0,5,2,6,3,4,0,7,2,3,1,3,0,7,0,2,2,5,0,2,2,1,3,4,4,7";

fn rwenas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwenas")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(rwenas(&["--help"]).status.code(), Some(0));
    assert_eq!(rwenas(&[]).status.code(), Some(1));
    assert_eq!(rwenas(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rwenas(&["search"]).status.code(), Some(1), "search without --out");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[search]\npop_sise = 4\n");
    let out = rwenas(&["--config", &cfg, "describe", GENOME]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("search.pop_sise"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), "[rwe]\nfolds = 0\n");
    let out = rwenas(&["--config", &cfg, "describe", GENOME]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("rwe.folds"));

    let out = rwenas(&["--config", "/nonexistent/run.toml", "describe", GENOME]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn search_output_is_reproducible_across_runs_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let runs: Vec<_> = [("a", "1"), ("b", "1"), ("c", "4")]
        .iter()
        .map(|(name, workers)| {
            let out_dir = dir.path().join(name);
            let out = rwenas(&["--config", &cfg, "--workers", workers, "--out", out_dir.to_str().unwrap(), "search"]);
            assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
            (out_dir, stdout(&out))
        })
        .collect();

    let front = fs::read_to_string(runs[0].0.join("front.csv")).unwrap();
    let mut lines = front.lines();
    assert_eq!(lines.next(), Some("genome,rwe_error,flops_m"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for row in rows {
        let fields: Vec<&str> = row.rsplitn(3, ',').collect();
        let err: f64 = fields[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&err));
    }
    assert_eq!(runs[0].1.trim_end(), front.trim_end());
    assert_eq!(fs::read_to_string(runs[0].0.join("generations.jsonl")).unwrap().lines().count(), 3);
    assert!(fs::read_to_string(runs[0].0.join("timing.csv")).unwrap().starts_with("genome,wall_seconds\n"));

    for (other, _) in &runs[1..] {
        for name in rwenas::commands::SearchOutputs::PRIMARY {
            let a = fs::read(runs[0].0.join(name)).unwrap();
            let b = fs::read(other.join(name)).unwrap();
            assert!(a == b, "{name} differs between runs");
        }
    }
}

#[test]
fn eval_prints_a_reproducible_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let first = rwenas(&["--config", &cfg, "eval", GENOME]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let report: serde_json::Value = serde_json::from_str(&stdout(&first)).unwrap();
    let err = report["rwe_error"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&err));
    assert!(report.get("wall_seconds").is_none_or(|v| v.is_null()));

    let out_dir = dir.path().join("eval");
    let second = rwenas(&["--config", &cfg, "--workers", "3", "--out", out_dir.to_str().unwrap(), "eval", GENOME]);
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(fs::read_to_string(out_dir.join("report.json")).unwrap(), stdout(&first));

    let reseeded = rwenas(&["--config", &cfg, "--seed", "4", "eval", GENOME]);
    assert_ne!(stdout(&first), stdout(&reseeded));

    for bad in ["micro:1,2,3", "macro:0,0", "garbage", "micro:0,1,1,7,2,1,0,5,2,6,3,4,0,7,2,3,1,3,0,7,0,2,2,5,0,2,2,1,3,4,4,99"] {
        let out = rwenas(&["--config", &cfg, "eval", bad]);
        assert_eq!(out.status.code(), Some(1), "{bad}");
        assert!(stderr(&out).starts_with("error:"));
    }
}

#[test]
fn describe_counts_match_a_loop_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), TINY);
    let out = rwenas(&["--config", &cfg_path, "describe", GENOME]);
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();

    let cfg = RunConfig::from_toml(TINY).unwrap();
    let net = decode(&GENOME.parse().unwrap(), &cfg.scale()).unwrap();
    assert_eq!(doc["flops"].as_u64(), Some(oracle::counted_macs(&net)));
    assert_eq!(doc["params"].as_u64(), Some(net.count_params()));
    let nodes = doc["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), net.nodes().len());
    for (i, node) in nodes.iter().enumerate() {
        assert_eq!(node["macs"].as_u64(), Some(oracle::counted_node_macs(&net, i)));
    }
}

#[test]
fn ablation_with_the_table_as_estimator_is_perfectly_correlated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), TINY);
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let table_path = dir.path().join("table.csv");
    save_table(&table_path, &covering_table(&cfg)).unwrap();
    let table_arg = table_path.to_str().unwrap();

    let run = |workers: &str| rwenas(&["--config", &cfg_path, "--workers", workers, "ablate", "--table", table_arg]);
    let first = run("1");
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let trace = stdout(&first);
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("estimator,trial,generation,rho"));
    let mut table_rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        if fields[0] == "table" {
            let rho: f64 = fields[3].parse().unwrap();
            assert!((rho - 1.0).abs() < 1e-12, "{line}");
            table_rows += 1;
        }
    }
    assert_eq!(table_rows, 2 * 4);
    assert_eq!(stdout(&run("4")), trace);

    let out_dir = dir.path().join("ablate");
    let out = rwenas(&["--config", &cfg_path, "--out", out_dir.to_str().unwrap(), "ablate", "--table", table_arg]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out_dir.join("trace.csv")).unwrap().trim_end(), trace.trim_end());
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("estimator,generation,mean,std\ntable,0,1,0\n"), "{summary}");
}

#[test]
fn ablation_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), TINY);
    let missing = rwenas(&["--config", &cfg_path, "ablate", "--table", "/nonexistent/table.csv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("/nonexistent/table.csv"));
    assert_eq!(rwenas(&["--config", &cfg_path, "ablate"]).status.code(), Some(1));
    let unknown = rwenas(&["--config", &cfg_path, "ablate", "--table", "t.csv", "--estimators", "table,oracle"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stderr(&unknown).contains("oracle"));
}
