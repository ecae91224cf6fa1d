//! Transformer-to-circuit classifier.
//!
//! The encoder turns a sample into one angle per qubit. Those angles feed
//! the RY input layer of the decoded circuit, and `⟨Z⟩` on the first
//! `n_classes` qubits, divided by a temperature, gives softmax logits.
//! Circuit gradients come from the shift rule. The angle part is pushed back
//! through the encoder tape as a seed, so one backward pass covers every
//! encoder weight.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_in_place, Adam, AdamConfig, AutodiffError, Param};
use crate::data::Dataset;
use crate::genome::{Genome, GenomeError};
use crate::nsga2::{stream_seed, Objectives};
use crate::qsim::{parameter_shift_jacobian, Circuit, QsimError};
use crate::tensor::Tensor;
use crate::transformer::{Encoder, TransformerConfig, TransformerError};

/// Default softmax temperature on the `⟨Z⟩` logits.
pub const TEMPERATURE: f64 = 0.5;

const CHECKPOINT_MAGIC: &[u8; 4] = b"GTQC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("invalid model: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Qsim(#[from] QsimError),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HybridError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub inner_epochs: usize,
    pub outer_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_epochs: 50,
            outer_epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_epochs == 0 || self.outer_epochs == 0 {
            return Err(HybridError::Config("epoch counts must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HybridError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(HybridError::Config(format!("learning rate {} is not a finite non-negative number", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub encoder: Encoder,
    genome: Genome,
    circuit: Circuit,
    /// Trainable circuit angles, `[1, popcount]`.
    pub theta: Param,
    n_classes: usize,
    pub temperature: f64,
}

/// Softmax probabilities and loss for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub angles: Vec<f64>,
    pub z: Vec<f64>,
    pub probs: Vec<f64>,
}

impl HybridModel {
    pub fn new(encoder: Encoder, genome: Genome, theta: Vec<f64>, n_classes: usize) -> Result<Self> {
        let n = genome.n_qubits();
        if encoder.config().n_qubits != n {
            return Err(HybridError::Config(format!(
                "encoder emits {} angles but the genome has {n} qubits",
                encoder.config().n_qubits
            )));
        }
        if n_classes < 2 || n_classes > n {
            return Err(HybridError::Config(format!("{n_classes} classes cannot be read out from {n} qubits")));
        }
        if theta.len() != genome.popcount() {
            return Err(HybridError::Config(format!(
                "genome needs {} circuit angles, got {}",
                genome.popcount(),
                theta.len()
            )));
        }
        let circuit = genome.decode()?;
        Ok(Self {
            encoder,
            circuit,
            theta: Param::new(Tensor::new(vec![1, genome.popcount()], theta).map_err(AutodiffError::from)?),
            genome,
            n_classes,
            temperature: TEMPERATURE,
        })
    }

    /// Fresh model: encoder seeded with `seed`, circuit angles uniform on
    /// `[-π, π)`.
    pub fn init(
        config: &TransformerConfig,
        input_len: usize,
        genome: Genome,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut cfg = *config;
        cfg.n_qubits = genome.n_qubits();
        cfg.seed = seed;
        let encoder = Encoder::new(cfg, input_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e7a);
        let theta = (0..genome.popcount()).map(|_| rng.gen_range(-PI..PI)).collect();
        Self::new(encoder, genome, theta, n_classes)
    }

    pub fn genome(&self) -> &Genome {
        &self.genome
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn theta_values(&self) -> &[f64] {
        self.theta.value.data()
    }

    /// Encoder parameters followed by circuit angles.
    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.theta.len()
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.theta.zero_grad();
    }

    fn circuit_params(&self, angles: &[f64]) -> Vec<f64> {
        let mut p = angles.to_vec();
        p.extend_from_slice(self.theta.value.data());
        p
    }

    fn readout(&self, z: &[f64]) -> Vec<f64> {
        let mut logits: Vec<f64> = z[..self.n_classes].iter().map(|v| v / self.temperature).collect();
        softmax_in_place(&mut logits);
        logits
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.encoder.input_len() {
            return Err(HybridError::Input(format!(
                "model expects {} features, got {}",
                self.encoder.input_len(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<SampleOutput> {
        self.check_input(x)?;
        let h = self.encoder.encode(x)?;
        let angles: Vec<f64> = h.iter().map(|v| PI * v.tanh()).collect();
        let z = self.circuit.expectations(&self.circuit_params(&angles))?;
        let probs = self.readout(&z);
        Ok(SampleOutput { angles, z, probs })
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.probs)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.probs(x)?))
    }

    /// Mean cross-entropy over `batch`. Gradients of that mean are added to
    /// the encoder and `theta` gradient buffers; the returned vector holds
    /// each sample's probabilities.
    pub fn loss_and_grads(&mut self, batch: &[(&[f64], usize)]) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(HybridError::Input("empty batch".into()));
        }
        let n = self.genome.n_qubits();
        let inv_b = 1.0 / batch.len() as f64;
        let observed: Vec<usize> = (0..self.n_classes).collect();
        let mut total = 0.0;
        let mut all_probs = Vec::with_capacity(batch.len());
        let mut theta_grad = vec![0.0; self.theta.len()];
        for &(x, y) in batch {
            self.check_input(x)?;
            if y >= self.n_classes {
                return Err(HybridError::Input(format!("label {y} out of range for {} classes", self.n_classes)));
            }
            let mut pass = self.encoder.forward(x)?;
            let params = self.circuit_params(pass.angles());
            let z = self.circuit.expectations(&params)?;
            let probs = self.readout(&z);
            total += cross_entropy(&probs, y);

            // dL/dz_c = (p_c - [c = y]) / τ
            let dz: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(c, p)| (p - f64::from(c == y)) / self.temperature)
                .collect();
            let jac = parameter_shift_jacobian(&self.circuit, &params, &observed)?;
            let mut dparams = vec![0.0; params.len()];
            for (row, g) in jac.iter().zip(&dz) {
                for (d, j) in dparams.iter_mut().zip(row) {
                    *d += g * j * inv_b;
                }
            }
            let seed = Tensor::new(vec![1, n], dparams[..n].to_vec()).map_err(AutodiffError::from)?;
            pass.tape.backward_with_seed(pass.angles, &seed)?;
            pass.accumulate_grads(self.encoder.params_mut())?;
            for (t, d) in theta_grad.iter_mut().zip(&dparams[n..]) {
                *t += d;
            }
            all_probs.push(probs);
        }
        for (g, d) in self.theta.grad.data_mut().iter_mut().zip(&theta_grad) {
            *g += d;
        }
        Ok((total * inv_b, all_probs))
    }

    /// Mean cross-entropy without touching gradients.
    pub fn loss(&self, batch: &[(&[f64], usize)]) -> Result<f64> {
        let mut total = 0.0;
        for &(x, y) in batch {
            total += cross_entropy(&self.probs(x)?, y);
        }
        Ok(total / batch.len() as f64)
    }

    pub fn accuracy(&self, data: &Dataset, rows: &[usize]) -> Result<f64> {
        if rows.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for &r in rows {
            correct += usize::from(self.predict(&data.features[r])? == data.labels[r]);
        }
        Ok(correct as f64 / rows.len() as f64)
    }

    /// `counts[true][predicted]`.
    pub fn confusion_matrix(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut m = vec![vec![0; self.n_classes]; self.n_classes];
        for &r in rows {
            m[data.labels[r]][self.predict(&data.features[r])?] += 1;
        }
        Ok(m)
    }

    fn diagnostic(&self, epoch: usize, batch: usize) -> String {
        let norms: Vec<String> = self
            .encoder
            .params()
            .iter()
            .map(|p| format!("{:.3e}", p.value.norm_sq().sqrt()))
            .collect();
        format!(
            "epoch {epoch}, batch {batch}, genome {}, theta {:?}, encoder weight norms [{}]",
            self.genome,
            self.theta.value.data(),
            norms.join(", ")
        )
    }

    /// Versioned single-file checkpoint: header, genome text, circuit
    /// angles, then the encoder record.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_le_bytes());
        out.extend_from_slice(&self.temperature.to_le_bytes());
        let g = self.genome.to_string();
        out.extend_from_slice(&(g.len() as u32).to_le_bytes());
        out.extend_from_slice(g.as_bytes());
        out.extend_from_slice(&(self.theta.len() as u32).to_le_bytes());
        for v in self.theta.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.encoder.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HybridError::Checkpoint(m.to_string());
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes.get(*pos..*pos + n).ok_or_else(|| bad("truncated"))?;
            *pos += n;
            Ok(s)
        };
        let mut pos = 0;
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic, expected GTQC"));
        }
        let u32_at = |pos: &mut usize| -> Result<u32> { Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap())) };
        let version = u32_at(&mut pos)?;
        if version != CHECKPOINT_VERSION {
            return Err(HybridError::Checkpoint(format!("unsupported version {version}")));
        }
        let n_classes = u32_at(&mut pos)? as usize;
        let temperature = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let glen = u32_at(&mut pos)? as usize;
        let gtext = std::str::from_utf8(take(&mut pos, glen)?).map_err(|_| bad("genome is not UTF-8"))?;
        let genome: Genome = gtext.parse()?;
        let tlen = u32_at(&mut pos)? as usize;
        let mut theta = Vec::with_capacity(tlen);
        for _ in 0..tlen {
            theta.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let (encoder, used) = Encoder::from_bytes(&bytes[pos..])?;
        if pos + used != bytes.len() {
            return Err(bad("trailing bytes after encoder record"));
        }
        let mut m = Self::new(encoder, genome, theta, n_classes)?;
        m.temperature = temperature;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `-ln p_y`, floored to stay finite at `p_y = 0`.
pub fn cross_entropy(probs: &[f64], y: usize) -> f64 {
    -probs[y].max(f64::MIN_POSITIVE).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Accuracy of the predictions made while training, before each update.
    pub train_accuracy: f64,
}

/// Train on `rows` of `data` for `epochs` epochs with shuffled mini-batches.
pub fn train(
    model: &mut HybridModel,
    data: &Dataset,
    rows: &[usize],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(HybridError::Input("no training rows".into()));
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut enc_opt = Adam::new(adam_cfg);
    let mut theta_opt = Adam::new(adam_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = rows.to_vec();
    let mut step = 0u64;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&r| (data.features[r].as_slice(), data.labels[r])).collect();
            model.zero_grad();
            let (loss, probs) = match model.loss_and_grads(&batch) {
                Ok(v) => v,
                Err(HybridError::Autodiff(e)) => {
                    return Err(HybridError::NonFinite(format!("{e}; {}", model.diagnostic(epoch, b))))
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(HybridError::NonFinite(model.diagnostic(epoch, b)));
            }
            for (p, (_, y)) in probs.iter().zip(&batch) {
                correct += usize::from(argmax(p) == *y);
            }
            loss_sum += loss;
            n_batches += 1;
            step += 1;
            enc_opt.step(model.encoder.params_mut(), step)?;
            theta_opt.step(std::slice::from_mut(&mut model.theta), step)?;
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / n_batches as f64,
            train_accuracy: correct as f64 / rows.len() as f64,
        };
        log::debug!("epoch {epoch}: loss {:.5} train acc {:.4}", m.loss, m.train_accuracy);
        history.push(m);
    }
    Ok(history)
}

/// Initialisation seed for a genome: fitness depends only on the genome and
/// the run seed.
pub fn genome_seed(seed: u64, genome: &Genome) -> u64 {
    genome
        .bits()
        .chunks(64)
        .enumerate()
        .fold(stream_seed(seed, genome.n_qubits(), genome.len()), |acc, (i, chunk)| {
            let word = chunk.iter().fold(0u64, |w, &b| w << 1 | u64::from(b));
            stream_seed(acc, i, word as usize)
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitnessReport {
    /// Accuracy on the selection rows (validation when present, else test).
    pub accuracy: f64,
    pub test_accuracy: f64,
    pub gates: usize,
}

impl FitnessReport {
    pub fn objectives(&self) -> Objectives {
        Objectives::new(self.accuracy, self.gates)
    }
}

/// Train a fresh model for `cfg.inner_epochs` and score it.
pub fn fitness(
    genome: &Genome,
    data: &Dataset,
    encoder_cfg: &TransformerConfig,
    cfg: &TrainConfig,
) -> Result<FitnessReport> {
    let (model, _) = train_fresh(genome, data, encoder_cfg, cfg, cfg.inner_epochs)?;
    let accuracy = model.accuracy(data, data.selection_rows())?;
    let test_accuracy = if data.split.validation.is_empty() {
        accuracy
    } else {
        model.accuracy(data, &data.split.test)?
    };
    Ok(FitnessReport {
        accuracy,
        test_accuracy,
        gates: genome.gate_count(),
    })
}

/// Initialise from [`genome_seed`] and train on the training split.
pub fn train_fresh(
    genome: &Genome,
    data: &Dataset,
    encoder_cfg: &TransformerConfig,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(HybridModel, Vec<EpochMetrics>)> {
    let seed = genome_seed(cfg.seed, genome);
    let mut model = HybridModel::init(encoder_cfg, data.n_features(), genome.clone(), data.n_classes, seed)?;
    let run_cfg = TrainConfig { seed, ..cfg.clone() };
    let history = train(&mut model, data, &data.split.train, &run_cfg, epochs)?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_iris, split_standardize, Split};
    use crate::transformer::TokenMode;
    use nalgebra::DMatrix;
    use num_complex::Complex64;

    fn tiny_cfg(n_qubits: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 4,
            n_qubits,
            token_mode: TokenMode::Scalar,
            seed: 0,
        }
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn probabilities_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in 0..10 {
            let g = Genome::random(4, &mut rng).unwrap();
            let m = HybridModel::init(&TransformerConfig::default(), 5, g, 3, s).unwrap();
            let p = m.probs(&random_x(&mut rng, 5)).unwrap();
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_model_is_uniform() {
        let mut m = HybridModel::init(&tiny_cfg(2), 3, Genome::zeros(2).unwrap(), 2, 4).unwrap();
        m.encoder.zero_all();
        let p = m.probs(&[0.3, -1.0, 2.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let mut m = HybridModel::init(&tiny_cfg(3), 3, Genome::zeros(3).unwrap(), 3, 4).unwrap();
        m.encoder.zero_all();
        let l = m.loss(&[(&[1.0, 2.0, 3.0], 1)]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_one_hot_is_zero() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1), 0.0);
        assert!(cross_entropy(&[1e-300, 1.0], 0).is_finite());
    }

    #[test]
    fn readout_checks() {
        let enc = Encoder::new(tiny_cfg(2), 3).unwrap();
        assert!(matches!(
            HybridModel::new(enc.clone(), Genome::zeros(2).unwrap(), vec![], 3),
            Err(HybridError::Config(_))
        ));
        assert!(matches!(
            HybridModel::new(enc, Genome::ones(2).unwrap(), vec![], 2),
            Err(HybridError::Config(_))
        ));
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn mat2(a: [[f64; 2]; 2]) -> DMatrix<Complex64> {
        DMatrix::from_fn(2, 2, |i, j| c(a[i][j]))
    }

    /// `op` on qubit `q`, identity elsewhere; qubit `n-1` is the leftmost factor.
    fn embed(n: usize, ops: &[(usize, DMatrix<Complex64>)]) -> DMatrix<Complex64> {
        let mut full = DMatrix::from_element(1, 1, c(1.0));
        for q in (0..n).rev() {
            let f = ops.iter().find(|(k, _)| *k == q).map_or_else(|| DMatrix::identity(2, 2), |(_, m)| m.clone());
            full = full.kronecker(&f);
        }
        full
    }

    fn dense_z(genome: &Genome, params: &[f64]) -> Vec<f64> {
        let n = genome.n_qubits();
        let dim = 1 << n;
        let s = 1.0 / 2f64.sqrt();
        let h = mat2([[s, s], [s, -s]]);
        let ry = |t: f64| mat2([[(t / 2.0).cos(), -(t / 2.0).sin()], [(t / 2.0).sin(), (t / 2.0).cos()]]);
        let p0 = mat2([[1.0, 0.0], [0.0, 0.0]]);
        let p1 = mat2([[0.0, 0.0], [0.0, 1.0]]);
        let x = mat2([[0.0, 1.0], [1.0, 0.0]]);
        let z = mat2([[1.0, 0.0], [0.0, -1.0]]);
        let mut psi = DMatrix::from_fn(dim, 1, |i, _| c(f64::from(i == 0)));
        for q in 0..n {
            psi = embed(n, &[(q, h.clone())]) * psi;
        }
        for q in 0..n {
            psi = embed(n, &[(q, ry(params[q]))]) * psi;
        }
        let mut slot = n;
        for (idx, _) in genome.bits().iter().enumerate().filter(|(_, b)| **b) {
            let (i, j) = crate::genome::pair_at(idx, n);
            let cnot = embed(n, &[(i, p0.clone())]) + embed(n, &[(i, p1.clone()), (j, x.clone())]);
            psi = cnot * psi;
            psi = embed(n, &[(j, ry(params[slot]))]) * psi;
            slot += 1;
        }
        (0..n)
            .map(|q| (psi.adjoint() * embed(n, &[(q, z.clone())]) * &psi)[(0, 0)].re)
            .collect()
    }

    #[test]
    fn forward_matches_dense_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in 0..10 {
            let g = Genome::random(3, &mut rng).unwrap();
            let m = HybridModel::init(&TransformerConfig::default(), 4, g.clone(), 3, s).unwrap();
            let x = random_x(&mut rng, 4);
            let out = m.forward(&x).unwrap();
            let mut params = out.angles.clone();
            params.extend_from_slice(m.theta_values());
            let z = dense_z(&g, &params);
            let mut logits: Vec<f64> = z.iter().map(|v| v / TEMPERATURE).collect();
            softmax_in_place(&mut logits);
            for (a, b) in out.probs.iter().zip(&logits) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    fn flat(m: &HybridModel) -> Vec<f64> {
        let mut v = m.encoder.flat_values();
        v.extend_from_slice(m.theta_values());
        v
    }

    fn set_flat(m: &mut HybridModel, v: &[f64]) {
        let k = m.encoder.param_count();
        m.encoder.set_flat_values(&v[..k]).unwrap();
        m.theta.value.data_mut().copy_from_slice(&v[k..]);
    }

    fn flat_grads(m: &HybridModel) -> Vec<f64> {
        let mut v: Vec<f64> = m.encoder.params().iter().flat_map(|p| p.grad.data().to_vec()).collect();
        v.extend_from_slice(m.theta.grad.data());
        v
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut m = HybridModel::init(&tiny_cfg(2), 3, Genome::ones(2).unwrap(), 2, seed).unwrap();
            let xs: Vec<Vec<f64>> = (0..3).map(|_| random_x(&mut rng, 3)).collect();
            let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 2)).collect();
            m.zero_grad();
            m.loss_and_grads(&batch).unwrap();
            let analytic = flat_grads(&m);
            let base = flat(&m);
            let eps = 1e-5;
            for k in 0..base.len() {
                let mut v = base.clone();
                v[k] += eps;
                set_flat(&mut m, &v);
                let up = m.loss(&batch).unwrap();
                v[k] -= 2.0 * eps;
                set_flat(&mut m, &v);
                let down = m.loss(&batch).unwrap();
                set_flat(&mut m, &base);
                let fd = (up - down) / (2.0 * eps);
                let tol = (1e-4 * fd.abs()).max(1e-8);
                assert!((analytic[k] - fd).abs() <= tol, "seed {seed} param {k}: {} vs {fd}", analytic[k]);
            }
        }
    }

    fn toy() -> Dataset {
        let features: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let s = if i < 4 { -1.0 } else { 1.0 };
                vec![s * (1.0 + 0.1 * i as f64), s * 0.5, -s * 0.8]
            })
            .collect();
        Dataset {
            name: "toy".into(),
            feature_names: vec!["a".into(), "b".into(), "c".into()],
            class_names: vec!["neg".into(), "pos".into()],
            labels: (0..8).map(|i| usize::from(i >= 4)).collect(),
            n_classes: 2,
            features,
            means: vec![],
            stds: vec![],
            split: Split {
                train: (0..8).collect(),
                validation: vec![],
                test: (0..8).collect(),
            },
            image_side: None,
        }
    }

    #[test]
    fn learns_separable_toy_set() {
        let d = toy();
        let mut m = HybridModel::init(&tiny_cfg(3), 3, Genome::ones(3).unwrap(), 2, 2).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let hist = train(&mut m, &d, &d.split.train, &cfg, 100).unwrap();
        assert_eq!(m.accuracy(&d, &d.split.train).unwrap(), 1.0);
        assert!(hist.last().unwrap().loss < hist[0].loss);
    }

    #[test]
    fn zero_learning_rate_keeps_metrics_constant() {
        let d = toy();
        let mut m = HybridModel::init(&tiny_cfg(3), 3, Genome::ones(3).unwrap(), 2, 2).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let hist = train(&mut m, &d, &d.split.train, &cfg, 5).unwrap();
        for h in &hist {
            assert!((h.loss - hist[0].loss).abs() < 1e-12);
            assert_eq!(h.train_accuracy, hist[0].train_accuracy);
        }
        assert_eq!(flat(&m), flat(&before));
    }

    #[test]
    fn training_is_deterministic() {
        let d = split_standardize(load_iris(), 0.2, 0).unwrap();
        let cfg = TrainConfig {
            lr: 0.01,
            ..TrainConfig::default()
        };
        let g: Genome = "3:101".parse().unwrap();
        let (m1, h1) = train_fresh(&g, &d, &TransformerConfig::default(), &cfg, 2).unwrap();
        let (m2, h2) = train_fresh(&g, &d, &TransformerConfig::default(), &cfg, 2).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(flat(&m1), flat(&m2));
    }

    #[test]
    fn fitness_contract() {
        let d = split_standardize(load_iris(), 0.2, 1).unwrap();
        let cfg = TrainConfig {
            inner_epochs: 1,
            ..TrainConfig::default()
        };
        let enc = TransformerConfig::default();
        let zero = Genome::zeros(3).unwrap();
        let f = fitness(&zero, &d, &enc, &cfg).unwrap();
        assert_eq!(f.gates, 6);
        assert!((0.0..=1.0).contains(&f.accuracy));
        assert_eq!(f, fitness(&zero, &d, &enc, &cfg).unwrap());
        assert_ne!(genome_seed(0, &zero), genome_seed(0, &Genome::ones(3).unwrap()));
    }

    #[test]
    fn accuracy_agrees_with_confusion_matrix() {
        let d = split_standardize(load_iris(), 0.2, 2).unwrap();
        let m = HybridModel::init(&TransformerConfig::default(), 4, Genome::ones(3).unwrap(), 3, 3).unwrap();
        let cm = m.confusion_matrix(&d, &d.split.test).unwrap();
        let diag: usize = (0..3).map(|i| cm[i][i]).sum();
        let total: usize = cm.iter().flatten().sum();
        assert_eq!(total, 30);
        assert_eq!(m.accuracy(&d, &d.split.test).unwrap(), diag as f64 / total as f64);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = HybridModel::init(&TransformerConfig::default(), 4, "3:110".parse().unwrap(), 3, 5).unwrap();
        let back = HybridModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(back.probs(&x).unwrap(), m.probs(&x).unwrap());
        let mut bytes = m.to_bytes();
        bytes[4] = 9;
        assert!(matches!(HybridModel::from_bytes(&bytes), Err(HybridError::Checkpoint(_))));
        assert!(HybridModel::from_bytes(&m.to_bytes()[..20]).is_err());
    }
}
