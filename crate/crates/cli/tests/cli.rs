use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hybridq_cli::{load_dataset, manifest, DatasetName, ExperimentConfig, Profile};
use hybridq_core::fisher::empirical_fisher_eigs;
use hybridq_core::HybridModel;

const TINY: &str = r#"
top_k = 2

[evolution]
population_size = 4
offspring_size = 4
generations = 2

[train]
inner_epochs = 2
outer_epochs = 5

[fisher]
k_samples = 32
top_k = 5
"#;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn hybridq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridq"))
        .args(args)
        .arg("--data-dir")
        .arg(data_dir())
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn replay_reports_gate_counts() {
    let out = hybridq(&["replay", "--dataset", "iris", "--profile", "desk", "--genome", "3:100"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("gates 8\n"));

    let out = hybridq(&["replay", "--dataset", "iris", "--profile", "desk", "--genome", "3:000"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("gates 6\n"));
}

#[test]
fn malformed_genome_is_rejected() {
    let out = hybridq(&["replay", "--dataset", "iris", "--genome", "3:10"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[evolution]\npopulaton_size = 4\n").unwrap();
    let out = hybridq(&["replay", "--dataset", "iris", "--genome", "3:100", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_heart_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hybridq"))
        .args(["replay", "--dataset", "heart", "--genome", "3:100", "--data-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn full_manifest_echoes_evolution_settings() {
    let mut cfg = ExperimentConfig::preset(DatasetName::Iris, Profile::Full).finalize();
    cfg.data.dir = data_dir();
    let d = load_dataset(&cfg).unwrap();
    let m: serde_json::Value = serde_json::from_str(&manifest(&cfg, "search", &d)).unwrap();
    let evo = &m["config"]["evolution"];
    assert_eq!(evo["population_size"], 20);
    assert_eq!(evo["generations"], 50);
    assert_eq!(evo["p_c"], 0.9);
    assert_eq!(m["config"]["qubits"], "3..10");
    assert_eq!(m["dataset"]["rows"], 150);
}

#[test]
fn search_then_fisher_writes_consistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let common = [
        "--dataset",
        "iris",
        "--profile",
        "desk",
        "--qubits",
        "3..4",
        "--seed",
        "5",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];
    let mut args = vec!["search"];
    args.extend(common);
    let out = hybridq(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let results = fs::read_to_string(out_dir.join("results_iris.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next(), Some("qubits,genome,gates,search_accuracy,test_accuracy,status"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let n: usize = r[0].parse().unwrap();
        let genome: hybridq_core::Genome = r[1].parse().unwrap();
        assert_eq!(genome.n_qubits(), n);
        assert_eq!(r[2].parse::<usize>().unwrap(), 2 * n + 2 * genome.popcount());
        let acc: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(r[5], "ok");
    }
    let table = fs::read_to_string(out_dir.join("table_iris.csv")).unwrap();
    assert!(table.starts_with("metric,3,4\naccuracy,"));
    for n in [3, 4] {
        assert!(out_dir.join(format!("front_iris_n{n}.csv")).exists());
        assert!(out_dir.join(format!("circuit_iris_n{n}.txt")).exists());
    }

    let mut args = vec!["fisher"];
    args.extend(common);
    let out = hybridq(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut cfg = ExperimentConfig::from_toml(TINY, Some(DatasetName::Iris), Some(Profile::Desk)).unwrap();
    cfg.seed = 5;
    cfg.data.dir = data_dir();
    let cfg = cfg.finalize();
    let d = load_dataset(&cfg).unwrap();
    for n in [3, 4] {
        let csv = fs::read_to_string(out_dir.join(format!("fisher_iris_n{n}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("eig_index,eigenvalue,t_share,q_share"));
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 5);

        let mut model = HybridModel::load(out_dir.join(format!("model_iris_n{n}.gtqc"))).unwrap();
        let report = empirical_fisher_eigs(&mut model, &d, &d.split.train, &cfg.fisher).unwrap();
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r[0], i as f64);
            assert!((r[2] + r[3] - 1.0).abs() < 1e-6);
            assert!((r[1] - report.eigenvalues[i]).abs() <= 1e-9 * report.eigenvalues[0]);
        }
    }

    // A checkpoint outside the requested qubit range is refused.
    let ckpt = out_dir.join("model_iris_n4.gtqc");
    let out = hybridq(&[
        "fisher",
        "--dataset",
        "iris",
        "--qubits",
        "3",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
