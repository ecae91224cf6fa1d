//! Hybrid transformer / variational-circuit classifiers with multi-objective
//! circuit search.
//!
//! The pipeline: a small transformer encoder compresses each sample into one
//! angle per qubit, a shallow H / RY / CNOT circuit is simulated exactly, the
//! per-qubit `⟨Z⟩` readout becomes class probabilities, and NSGA-II searches
//! the CNOT+RY placement for the accuracy / gate-count trade-off. The
//! [`fisher`] module inspects the trained model's empirical Fisher spectrum.

pub mod autodiff;
pub mod data;
pub mod fisher;
pub mod genome;
pub mod hybrid;
pub mod linalg;
pub mod nsga2;
pub mod qsim;
pub mod tensor;
pub mod transformer;

pub use autodiff::{Adam, AdamConfig, Param, Tape, Var};
pub use data::{Dataset, Schema};
pub use fisher::{FisherConfig, FisherReport, LabelMode};
pub use genome::Genome;
pub use hybrid::{HybridModel, TrainConfig};
pub use nsga2::{EvolutionConfig, Individual, Objectives};
pub use qsim::{Circuit, GateKind, GateOp, StateVector};
pub use tensor::Tensor;
pub use transformer::{Encoder, TokenMode, TransformerConfig};
