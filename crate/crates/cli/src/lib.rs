//! Experiment harness around `hybridq-core`.
//!
//! Three commands share one [`ExperimentConfig`]:
//! `search` evolves circuits per qubit count, retrains the most accurate front
//! members and writes result tables; `fisher` analyses saved checkpoints;
//! `replay` trains and scores a single genome.

pub mod config;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use hybridq_core::data::{self, DataError, Dataset, MnistOptions, Schema};
use hybridq_core::fisher::{empirical_fisher_eigs, FisherError, FisherReport};
use hybridq_core::genome::{Genome, GenomeError};
use hybridq_core::hybrid::{fitness, train_fresh, FitnessReport, HybridError, HybridModel};
use hybridq_core::nsga2::{evolve, select_top_k, write_front_csv, EvolutionError, Objectives};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use config::{DatasetName, ExperimentConfig, Profile, QubitRange};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] HybridError),
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error("genome: {0}")]
    Genome(#[from] GenomeError),
    #[error("every qubit count failed")]
    AllCellsFailed,
}

impl CliError {
    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Data(DataError::Io { .. }) => 3,
            CliError::Data(_) => 4,
            CliError::Model(_) | CliError::Fisher(_) | CliError::Evolution(_) | CliError::AllCellsFailed => 5,
            CliError::Genome(_) => 6,
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load the configured dataset and split it.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let dc = &cfg.data;
    let dir = &dc.dir;
    let tabular = |csv: PathBuf, schema: PathBuf| -> Result<Dataset, CliError> {
        let schema = Schema::from_file(schema)?;
        Ok(data::load_csv(csv, &schema)?)
    };
    let or = |p: &Option<PathBuf>, default: PathBuf| p.clone().unwrap_or(default);
    let raw = match cfg.dataset {
        DatasetName::Iris => data::load_iris(),
        DatasetName::BreastCancer => tabular(
            or(&dc.csv, dir.join("breast_cancer.csv")),
            or(&dc.schema, dir.join("breast_cancer.schema.toml")),
        )?,
        DatasetName::Heart => tabular(or(&dc.csv, dir.join("heart.csv")), or(&dc.schema, dir.join("heart.schema.toml")))?,
        DatasetName::Csv => match (&dc.csv, &dc.schema) {
            (Some(c), Some(s)) => tabular(c.clone(), s.clone())?,
            _ => return Err(CliError::Config("dataset \"csv\" needs data.csv and data.schema".into())),
        },
        DatasetName::Mnist => {
            if dc.validation_frac > 0.0 {
                return Err(CliError::Config("three-way splits are not supported for mnist".into()));
            }
            let opts = MnistOptions {
                digits: dc.digits.clone(),
                test_frac: dc.test_frac,
                train_subsample: dc.train_subsample,
                test_subsample: dc.test_subsample,
                seed: cfg.seed,
            };
            let m = dir.join("mnist");
            return Ok(data::load_mnist_subset(m.join("images-idx3-ubyte"), m.join("labels-idx1-ubyte"), &opts)?);
        }
    };
    let mut d = if dc.validation_frac > 0.0 {
        data::split_three_way(raw, dc.validation_frac, dc.test_frac, cfg.seed)?
    } else {
        data::split_standardize(raw, dc.test_frac, cfg.seed)?
    };
    if let Some(n) = dc.train_subsample {
        d.subsample_train(n, cfg.seed.wrapping_add(1));
    }
    if let Some(n) = dc.test_subsample {
        d.subsample_test(n, cfg.seed.wrapping_add(2));
    }
    Ok(d)
}

/// Circuit diagram with input angles `x0..` and trained angles `θ0..`.
pub fn circuit_text(model: &HybridModel) -> String {
    let n = model.genome().n_qubits();
    model.circuit().diagram(&|slot| if slot < n { format!("x{slot}") } else { format!("θ{}", slot - n) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub genome: String,
    pub gates: usize,
    pub search_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

/// Outcome for one qubit count.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchCell {
    pub qubits: usize,
    pub result: Result<CellResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub best: Candidate,
    pub candidates: Vec<Candidate>,
    pub evaluations: usize,
    pub distinct_genomes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub dataset: String,
    pub cells: Vec<SearchCell>,
}

impl SearchOutcome {
    pub fn best_test_accuracy(&self, qubits: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.qubits == qubits)
            .and_then(|c| c.result.as_ref().ok())
            .map(|r| r.best.test_accuracy)
    }
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    name: &'a str,
    rows: usize,
    features: usize,
    classes: usize,
    train: usize,
    validation: usize,
    test: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: serde_json::Value,
    dataset: DatasetSummary<'a>,
}

/// The run manifest: every hyperparameter and seed, plus the code version.
/// The output directory is left out, so identical runs always produce
/// identical manifests.
pub fn manifest(cfg: &ExperimentConfig, command: &str, d: &Dataset) -> String {
    let mut config = serde_json::to_value(cfg).expect("config serializes");
    if let Some(obj) = config.as_object_mut() {
        obj.remove("out");
    }
    let m = Manifest {
        tool: "hybridq",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        dataset: DatasetSummary {
            name: &d.name,
            rows: d.len(),
            features: d.n_features(),
            classes: d.n_classes,
            train: d.split.train.len(),
            validation: d.split.validation.len(),
            test: d.split.test.len(),
        },
    };
    let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
    s.push('\n');
    s
}

fn search_cell(cfg: &ExperimentConfig, d: &Dataset, n: usize) -> Result<CellResult, CliError> {
    let name = cfg.dataset.as_str();
    let out = &cfg.out;
    let enc = hybridq_core::transformer::TransformerConfig {
        n_qubits: n,
        ..cfg.transformer
    };
    if d.n_classes > n {
        return Err(CliError::Config(format!("{} classes need at least {} qubits", d.n_classes, d.n_classes)));
    }
    let cache: Mutex<HashMap<Genome, Result<FitnessReport, String>>> = Mutex::new(HashMap::new());
    let evaluate = |g: &Genome, _seed: u64| -> Result<Objectives, String> {
        if let Some(hit) = cache.lock().expect("cache lock").get(g) {
            return hit.as_ref().map(FitnessReport::objectives).map_err(Clone::clone);
        }
        let r = fitness(g, d, &enc, &cfg.train).map_err(|e| e.to_string());
        cache.lock().expect("cache lock").insert(g.clone(), r.clone());
        r.map(|f| f.objectives())
    };
    let run = evolve(&cfg.evolution, n, evaluate)?;
    let distinct_genomes = cache.lock().expect("cache lock").len();

    let mut fronts = Vec::new();
    write_front_csv(&mut fronts, &run.history).expect("writing to memory");
    write_file(&out.join(format!("front_{name}_n{n}.csv")), fronts)?;

    let top = select_top_k(&run.final_front(), cfg.top_k);
    let trained: Vec<Result<(HybridModel, Candidate), CliError>> = top
        .par_iter()
        .map(|ind| {
            let (model, hist) = train_fresh(&ind.genome, d, &enc, &cfg.train, cfg.train.outer_epochs)?;
            let test_accuracy = model.accuracy(d, &d.split.test)?;
            Ok((
                model,
                Candidate {
                    genome: ind.genome.to_string(),
                    gates: ind.genome.gate_count(),
                    search_accuracy: ind.objectives.accuracy(),
                    test_accuracy,
                    final_loss: hist.last().map_or(f64::NAN, |h| h.loss),
                },
            ))
        })
        .collect();
    let mut best: Option<(HybridModel, Candidate)> = None;
    let mut candidates = Vec::new();
    for (t, ind) in trained.into_iter().zip(&top) {
        let (model, cand) = t?;
        candidates.push(cand.clone());
        let better = match &best {
            None => true,
            Some((bm, bc)) => {
                cand.test_accuracy > bc.test_accuracy
                    || (cand.test_accuracy == bc.test_accuracy
                        && (cand.gates, &ind.genome) < (bc.gates, bm.genome()))
            }
        };
        if better {
            best = Some((model, cand));
        }
    }
    let (model, best) = best.ok_or_else(|| CliError::Config("search produced an empty front".into()))?;

    let mut topk = String::from("genome,gates,search_accuracy,test_accuracy,final_loss\n");
    for c in &candidates {
        writeln!(topk, "{},{},{:.6},{:.6},{:.6}", c.genome, c.gates, c.search_accuracy, c.test_accuracy, c.final_loss)
            .unwrap();
    }
    write_file(&out.join(format!("topk_{name}_n{n}.csv")), topk)?;
    let diagram = format!(
        "genome {}\ngates {}\ntest accuracy {:.6}\n\n{}",
        best.genome,
        best.gates,
        best.test_accuracy,
        circuit_text(&model)
    );
    write_file(&out.join(format!("circuit_{name}_n{n}.txt")), diagram)?;
    write_file(&out.join(format!("model_{name}_n{n}.gtqc")), model.to_bytes())?;
    Ok(CellResult {
        best,
        candidates,
        evaluations: run.evaluations,
        distinct_genomes,
    })
}

/// Search every qubit count in the configured range. A failing cell is
/// recorded in the results and the sweep continues.
pub fn run_search(cfg: &ExperimentConfig) -> Result<SearchOutcome, CliError> {
    cfg.validate()?;
    let d = load_dataset(cfg)?;
    create_dir(&cfg.out)?;
    let name = cfg.dataset.as_str();
    write_file(&cfg.out.join("manifest.json"), manifest(cfg, "search", &d))?;

    let mut cells = Vec::new();
    for n in cfg.qubits.iter() {
        log::info!("{name}: searching {n} qubits");
        let result = search_cell(cfg, &d, n).map_err(|e| {
            log::error!("{name}, {n} qubits: {e}");
            e.to_string()
        });
        cells.push(SearchCell { qubits: n, result });
    }

    let mut csv = String::from("qubits,genome,gates,search_accuracy,test_accuracy,status\n");
    let mut acc_row = String::from("accuracy");
    let mut gate_row = String::from("gate_count");
    let mut header = String::from("metric");
    for c in &cells {
        write!(header, ",{}", c.qubits).unwrap();
        match &c.result {
            Ok(r) => {
                let b = &r.best;
                writeln!(csv, "{},{},{},{:.6},{:.6},ok", c.qubits, b.genome, b.gates, b.search_accuracy, b.test_accuracy)
                    .unwrap();
                write!(acc_row, ",{:.4}", b.test_accuracy).unwrap();
                write!(gate_row, ",{}", b.gates).unwrap();
            }
            Err(e) => {
                let msg = e.replace([',', '\n'], ";");
                writeln!(csv, "{},,,,,error: {msg}", c.qubits).unwrap();
                acc_row.push(',');
                gate_row.push(',');
            }
        }
    }
    write_file(&cfg.out.join(format!("results_{name}.csv")), csv)?;
    write_file(&cfg.out.join(format!("table_{name}.csv")), format!("{header}\n{acc_row}\n{gate_row}\n"))?;
    if cells.iter().all(|c| c.result.is_err()) {
        return Err(CliError::AllCellsFailed);
    }
    Ok(SearchOutcome {
        dataset: name.to_string(),
        cells,
    })
}

/// Fisher reports for saved checkpoints. With `checkpoint` set only that
/// file is analysed, and its qubit count must lie in the configured range.
/// Otherwise `model_{dataset}_n{N}.gtqc` is read from the output directory
/// for every `N` in range.
pub fn run_fisher(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<(usize, FisherReport)>, CliError> {
    cfg.validate()?;
    let d = load_dataset(cfg)?;
    create_dir(&cfg.out)?;
    let name = cfg.dataset.as_str();
    let jobs: Vec<(usize, PathBuf)> = match checkpoint {
        Some(p) => {
            let m = load_checkpoint(p)?;
            let n = m.genome().n_qubits();
            if !cfg.qubits.contains(n) {
                return Err(CliError::Config(format!(
                    "checkpoint has {n} qubits, outside the configured range {}",
                    cfg.qubits
                )));
            }
            vec![(n, p.to_path_buf())]
        }
        None => cfg
            .qubits
            .iter()
            .map(|n| (n, cfg.out.join(format!("model_{name}_n{n}.gtqc"))))
            .collect(),
    };
    let mut reports = Vec::new();
    for (n, path) in jobs {
        let mut model = load_checkpoint(&path)?;
        if model.genome().n_qubits() != n {
            return Err(CliError::Config(format!(
                "{}: checkpoint has {} qubits, expected {n}",
                path.display(),
                model.genome().n_qubits()
            )));
        }
        if model.encoder.input_len() != d.n_features() || model.n_classes() != d.n_classes {
            return Err(CliError::Config(format!("{}: checkpoint does not match dataset {name}", path.display())));
        }
        let report = empirical_fisher_eigs(&mut model, &d, &d.split.train, &cfg.fisher)?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv).expect("writing to memory");
        write_file(&cfg.out.join(format!("fisher_{name}_n{n}.csv")), csv)?;
        let mut spec = Vec::new();
        report.write_spectrum(&mut spec).expect("writing to memory");
        write_file(&cfg.out.join(format!("spectrum_{name}_n{n}.dat")), spec)?;
        reports.push((n, report));
    }
    write_file(&cfg.out.join("fisher_manifest.json"), manifest(cfg, "fisher", &d))?;
    Ok(reports)
}

fn load_checkpoint(path: &Path) -> Result<HybridModel, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(HybridModel::from_bytes(&bytes)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub genome: Genome,
    pub gates: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub diagram: String,
}

impl ReplayReport {
    pub fn render(&self) -> String {
        format!(
            "genome {}\ngates {}\ntrain accuracy {:.6}\ntest accuracy {:.6}\n\n{}",
            self.genome, self.gates, self.train_accuracy, self.test_accuracy, self.diagram
        )
    }
}

/// Train a single genome for the outer epoch budget and score it.
pub fn replay(cfg: &ExperimentConfig, genome_text: &str) -> Result<ReplayReport, CliError> {
    let genome: Genome = genome_text.parse()?;
    let mut cfg = cfg.clone();
    cfg.qubits = QubitRange::single(genome.n_qubits());
    cfg.validate()?;
    let d = load_dataset(&cfg)?;
    let enc = hybridq_core::transformer::TransformerConfig {
        n_qubits: genome.n_qubits(),
        ..cfg.transformer
    };
    let (model, _) = train_fresh(&genome, &d, &enc, &cfg.train, cfg.train.outer_epochs)?;
    Ok(ReplayReport {
        gates: genome.gate_count(),
        train_accuracy: model.accuracy(&d, &d.split.train)?,
        test_accuracy: model.accuracy(&d, &d.split.test)?,
        diagram: circuit_text(&model),
        genome,
    })
}
