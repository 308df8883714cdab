use std::path::Path;
use std::process::{Command, Output};

use aoi_nest::model::Mode;
use aoi_nest_cli::config::parse_config;
use aoi_nest_cli::PAPER_BASE;

const SMALL: &str = r#"{
  "schema_version": 1,
  "mode": "preemptive",
  "user_groups": [{ "tau_min": 1, "count": 2 }, { "tau_min": 3, "count": 2 }],
  "server_groups": [{ "p": 0.7, "count": 1 }, { "p": 0.4, "count": 1 }],
  "horizon": 2000,
  "seed": 4,
  "a_max": 40
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aoi-nest"));
    c.env_remove("AOI_NEST_THREADS").env("RUST_LOG", "warn");
    c
}

fn aoi(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bundled_config_matches_the_experiments() {
    let (cfg, warnings) = parse_config(PAPER_BASE).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(cfg.num_users(), 50);
    assert_eq!(cfg.num_servers(), 6);
    assert_eq!(cfg.mode, Mode::NonPreemptive);
    let taus: Vec<u32> = cfg.user_groups.iter().map(|g| g.tau_min).collect();
    assert_eq!(taus, [2, 4, 8, 16, 32, 64]);
    let counts: Vec<usize> = cfg.user_groups.iter().map(|g| g.count).collect();
    assert_eq!(counts, [5, 10, 5, 5, 10, 15]);
    let mut p: Vec<f64> = cfg.server_groups.iter().map(|g| g.p).collect();
    p.sort_by(f64::total_cmp);
    assert_eq!(p, [0.1, 0.3, 0.5, 0.6, 0.7, 0.8]);
    assert_eq!(cfg.beta, 0.05);
}

#[test]
fn config_errors() {
    assert!(parse_config("").is_err());
    assert!(parse_config("{}").is_err());
    assert!(parse_config(&SMALL.replace("\"schema_version\": 1", "\"schema_version\": 2")).is_err());
    let (_, warnings) = parse_config(&SMALL.replace("\"seed\": 4", "\"seed\": 4, \"colour\": 1")).unwrap();
    assert!(warnings.iter().any(|w| w.contains("colour")), "{warnings:?}");

    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.json", "");
    let o = aoi(&["solve", "--config", &empty]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("schema"), "{}", stderr(&o));

    let bad = write(dir.path(), "bad.json", &SMALL.replace("\"seed\": 4", "\"seed\": 4, \"beta\": 1.5"));
    let o = aoi(&["solve", "--config", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
}

#[test]
fn simulate_writes_reproducible_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&a, &b] {
        let o = aoi(&["simulate", "--config", &cfg, "--r", "2", "--T", "1500", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &Path, f: &str| std::fs::read_to_string(d.join(f)).unwrap();
    assert_eq!(read(&a, "summary.csv"), read(&b, "summary.csv"));
    assert_eq!(read(&a, "trace.csv"), read(&b, "trace.csv"));

    let summary = read(&a, "summary.csv");
    assert!(summary.starts_with("# aoi-nest "));
    assert!(summary.contains("policy,r,seed,tail_avg_aoi,gap_vs_lb,running_avg_aoi,lower_bound"));
    let trace = read(&a, "trace.csv");
    assert!(trace.contains("t,policy,avg_aoi,nu_1,nu_2,window_avg_aoi"));
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 1 + 1500);

    let summary_path = a.join("summary.csv");
    let o = aoi(&["simulate", "--replay", summary_path.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&a, "summary.csv"), read(&c, "summary.csv"));
    assert_eq!(read(&a, "trace.csv"), read(&c, "trace.csv"));
}

#[test]
fn usage_errors_exit_with_two() {
    let o = aoi(&["simulate", "--policy", "greedy", "--T", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nested"), "{}", stderr(&o));

    for threads in ["zero", "0"] {
        let o = bin().args(["solve", "--a-max", "20"]).env("AOI_NEST_THREADS", threads).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
        assert!(stderr(&o).contains("AOI_NEST_THREADS"));
    }
}

#[test]
fn index_table_and_fluid_lb_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.json", SMALL);

    let table = dir.path().join("index.csv");
    let o = aoi(&["index-table", "--config", &cfg, "--nu", "1,2", "--out", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&table).unwrap();
    let mut rows = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(rows.next(), Some("user_type,layer,delta,gen_age,server,index"));
    assert!(rows.count() > 0);

    let lb = dir.path().join("lb.json");
    let o = aoi(&["fluid-lb", "--config", &cfg, "--out", lb.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&lb).unwrap()).unwrap();
    let result = &doc["result"];
    for key in ["nu_star", "lower_bound", "upper_bound", "residuals", "load", "capacity", "rounds", "converged"] {
        assert!(!result[key].is_null(), "missing {key}");
    }
    assert_eq!(result["nu_star"].as_array().unwrap().len(), 2);
    assert!(result["lower_bound"].as_f64().unwrap() <= result["upper_bound"].as_f64().unwrap() + 1e-6);
}
