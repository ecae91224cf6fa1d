//! Experiment configuration: profile presets, TOML overrides, CLI flags.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use hybridq_core::fisher::FisherConfig;
use hybridq_core::hybrid::TrainConfig;
use hybridq_core::nsga2::EvolutionConfig;
use hybridq_core::qsim::MAX_QUBITS;
use hybridq_core::transformer::{TokenMode, TransformerConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Iris,
    BreastCancer,
    Heart,
    Mnist,
    /// Any CSV described by `data.csv` and `data.schema`.
    Csv,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Iris => "iris",
            DatasetName::BreastCancer => "breast-cancer",
            DatasetName::Heart => "heart",
            DatasetName::Mnist => "mnist",
            DatasetName::Csv => "csv",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Full-size search: population 20, 50 generations, qubits 3..10.
    Full,
    /// Laptop-scale search: population 8, 10 generations.
    Desk,
}

/// Inclusive qubit range, written `A..B` or a single `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QubitRange {
    pub start: usize,
    pub end: usize,
}

impl QubitRange {
    pub fn single(n: usize) -> Self {
        Self { start: n, end: n }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }

    pub fn contains(&self, n: usize) -> bool {
        (self.start..=self.end).contains(&n)
    }
}

impl FromStr for QubitRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad qubit count {t:?}"));
        let (start, end) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.trim_start_matches('='))?),
            None => {
                let n = parse(s)?;
                (n, n)
            }
        };
        if start > end {
            return Err(format!("empty qubit range {s}"));
        }
        Ok(Self { start, end })
    }
}

impl fmt::Display for QubitRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl Serialize for QubitRange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QubitRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the bundled data files.
    pub dir: PathBuf,
    pub csv: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub test_frac: f64,
    /// Fraction held out for fitness scoring; 0 scores on the test split.
    pub validation_frac: f64,
    pub train_subsample: Option<usize>,
    pub test_subsample: Option<usize>,
    pub digits: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub profile: Profile,
    pub qubits: QubitRange,
    /// Master seed. Nested `seed` fields are overwritten from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Front members retrained per qubit count.
    pub top_k: usize,
    pub data: DataConfig,
    pub evolution: EvolutionConfig,
    pub train: TrainConfig,
    pub transformer: TransformerConfig,
    pub fisher: FisherConfig,
}

impl ExperimentConfig {
    pub fn preset(dataset: DatasetName, profile: Profile) -> Self {
        let desk = profile == Profile::Desk;
        let (pop, generations, inner) = if desk { (8, 10, 15) } else { (20, 50, 50) };
        let outer = match (profile, dataset) {
            (Profile::Desk, _) => 60,
            (Profile::Full, DatasetName::Iris) => 250,
            (Profile::Full, DatasetName::Mnist) => 500,
            (Profile::Full, DatasetName::Heart) => 400,
            (Profile::Full, _) => 100,
        };
        let qubits = match (profile, dataset) {
            (Profile::Full, _) => QubitRange { start: 3, end: 10 },
            (Profile::Desk, DatasetName::BreastCancer) => QubitRange::single(4),
            (Profile::Desk, _) => QubitRange::single(3),
        };
        let token_mode = if dataset == DatasetName::Mnist {
            TokenMode::Patch(7)
        } else {
            TokenMode::Scalar
        };
        let mnist = dataset == DatasetName::Mnist;
        Self {
            dataset,
            profile,
            qubits,
            seed: 0,
            out: PathBuf::from("runs").join(dataset.as_str()),
            top_k: 10,
            data: DataConfig {
                dir: PathBuf::from("data"),
                csv: None,
                schema: None,
                test_frac: 0.2,
                validation_frac: 0.0,
                train_subsample: (mnist && desk).then_some(600),
                test_subsample: mnist.then_some(150),
                digits: vec![1, 2, 3],
            },
            evolution: EvolutionConfig {
                population_size: pop,
                offspring_size: pop,
                generations,
                p_c: 0.9,
                p_m: None,
                seed: 0,
            },
            train: TrainConfig {
                inner_epochs: inner,
                outer_epochs: outer,
                batch_size: 32,
                lr: 1e-3,
                seed: 0,
            },
            transformer: TransformerConfig {
                token_mode,
                ..TransformerConfig::default()
            },
            fisher: FisherConfig::default(),
        }
    }

    /// Preset for the dataset and profile named in `text` (or the given
    /// fallbacks), overridden key by key by `text`.
    pub fn from_toml(text: &str, dataset: Option<DatasetName>, profile: Option<Profile>) -> Result<Self, CliError> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let pick = |key: &str| -> Result<Option<String>, CliError> {
            match file.get(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s.clone())),
                Some(v) => Err(CliError::Config(format!("{key} must be a string, got {v}"))),
            }
        };
        let dataset = match dataset {
            Some(d) => d,
            None => match pick("dataset")? {
                Some(s) => <DatasetName as clap::ValueEnum>::from_str(&s, false).map_err(CliError::Config)?,
                None => DatasetName::Iris,
            },
        };
        let profile = match profile {
            Some(p) => p,
            None => match pick("profile")? {
                Some(s) => <Profile as clap::ValueEnum>::from_str(&s, false).map_err(CliError::Config)?,
                None => Profile::Desk,
            },
        };
        let mut base = toml::Table::try_from(Self::preset(dataset, profile)).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut base, file);
        base.insert("dataset".into(), toml::Value::String(dataset.as_str().into()));
        base.insert(
            "profile".into(),
            toml::Value::String(if profile == Profile::Full { "full" } else { "desk" }.into()),
        );
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        Ok(cfg.finalize())
    }

    /// Copy the master seed into every nested config.
    pub fn finalize(mut self) -> Self {
        self.evolution.seed = self.seed;
        self.train.seed = self.seed;
        self.fisher.seed = self.seed;
        self.transformer.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.qubits.start < 2 || self.qubits.end > MAX_QUBITS {
            return Err(CliError::Config(format!("qubit range {} must lie within 2..{MAX_QUBITS}", self.qubits)));
        }
        if self.top_k == 0 {
            return Err(CliError::Config("top_k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.data.validation_frac) || self.data.validation_frac + self.data.test_frac >= 1.0 {
            return Err(CliError::Config("validation_frac + test_frac must stay below 1".into()));
        }
        self.evolution.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.fisher.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for n in self.qubits.iter() {
            let t = TransformerConfig {
                n_qubits: n,
                ..self.transformer
            };
            t.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
