use std::path::Path;
use std::process::{Command, Output};

use evstation::experiment::{AgentKind, ExperimentConfig, MetricsReport};
use evstation::sac::SacConfig;

fn evstation(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evstation"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, agent: AgentKind) -> std::path::PathBuf {
    let mut config = ExperimentConfig {
        agent,
        episodes: 2,
        eval_episodes: 1,
        seeds: vec![3],
        out_dir: dir.join("unused"),
        sac: SacConfig {
            hidden: vec![16, 16],
            warmup_steps: 100,
            batch_size: 16,
            ..SacConfig::default()
        },
        ..ExperimentConfig::default()
    };
    config.scenario.n_ports = 3;
    config.scenario.horizon_slots = 48;
    let path = dir.join(format!("{}.json", agent.label()));
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn stderr_error(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

#[test]
fn train_eval_compare_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for agent in [AgentKind::Proposed, AgentKind::FleetJpr] {
        let cfg = tiny_config(tmp.path(), agent);
        let out = tmp.path().join(agent.label());
        let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());

        let train = evstation(&["train", "--config", cfg, "--out", out]);
        assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
        let seed_dir = Path::new(out).join("seed_3");
        for file in ["config.json", "train_log.csv", "checkpoint.json", "checkpoints/episode_0.json"] {
            assert!(seed_dir.join(file).is_file(), "missing {file}");
        }
        let log = std::fs::read_to_string(seed_dir.join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3, "header plus one row per episode");

        let eval = evstation(&["eval", "--config", cfg, "--out", out]);
        assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
        let report_path = Path::new(out).join("report.json");
        let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(report.agent, agent);
        assert_eq!(report.seeds.len(), 1);
        assert!(report.mean.jpr.is_finite());
        assert!(Path::new(out).join("report.csv").is_file());
        reports.push(report_path);
    }

    let cmp_dir = tmp.path().join("cmp");
    let compare = evstation(&[
        "compare",
        reports[0].to_str().unwrap(),
        reports[1].to_str().unwrap(),
        "--out",
        cmp_dir.to_str().unwrap(),
    ]);
    assert!(compare.status.success(), "{}", String::from_utf8_lossy(&compare.stderr));
    let csv = std::fs::read_to_string(cmp_dir.join("compare.csv")).unwrap();
    assert!(csv.contains("proposed_vs_fleet_jpr"), "{csv}");
    assert!(cmp_dir.join("compare.json").is_file());
}

#[test]
fn eval_rejects_checkpoint_from_another_station_size() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), AgentKind::Proposed);
    let out = tmp.path().join("run");
    let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert!(evstation(&["train", "--config", cfg, "--out", out]).status.success());
    let eval = evstation(&["eval", "--config", cfg, "--out", out, "--ports", "4"]);
    let err = stderr_error(&eval);
    assert_eq!(err["error"], "mismatch", "{err}");
}

#[test]
fn invalid_config_reports_field_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let train = evstation(&["train", "--ports", "0", "--out", out.to_str().unwrap()]);
    let err = stderr_error(&train);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("n_ports"), "{err}");
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = evstation(&["train", "--config", "/nonexistent/evstation.json"]);
    assert_eq!(stderr_error(&out)["error"], "io");
}

#[test]
fn compare_refuses_mismatched_protocols() {
    let tmp = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (i, eval_seed) in [1u64, 2].into_iter().enumerate() {
        let config = ExperimentConfig {
            eval_seed,
            ..ExperimentConfig::default()
        };
        let report = MetricsReport::new(&config, Vec::new());
        let path = tmp.path().join(format!("r{i}.json"));
        std::fs::write(&path, serde_json::to_string(&report).unwrap()).unwrap();
        paths.push(path);
    }
    let out = evstation(&[
        "compare",
        paths[0].to_str().unwrap(),
        paths[1].to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(stderr_error(&out)["error"], "mismatch");
}
