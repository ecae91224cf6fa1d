//! Empirical Fisher spectrum of a trained hybrid model.
//!
//! With `k` per-sample log-probability gradients stacked as the columns of
//! `G / √k`, the empirical Fisher is `G Gᵀ`. Its nonzero spectrum equals that
//! of the `k × k` Gram matrix `Gᵀ G`, which is what gets diagonalized.
//! Eigenvectors are lifted back with `u = G v / √λ`.

use std::io::{self, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::hybrid::{HybridError, HybridModel};
use crate::linalg::{symmetric_eigen, LinalgError};

#[derive(Debug, Error)]
pub enum FisherError {
    #[error("invalid Fisher config: {0}")]
    Config(String),
    #[error("vector norm² is {0}, expected 1")]
    NotNormalized(f64),
    #[error("no rows to sample from")]
    NoRows,
    #[error(transparent)]
    Model(#[from] HybridError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, FisherError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Draw `y ~ p(y | x)` from the model itself.
    ModelSampled,
    /// Use the dataset labels.
    DataLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherConfig {
    pub k_samples: usize,
    pub top_k: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            k_samples: 256,
            top_k: 10,
            label_mode: LabelMode::ModelSampled,
            seed: 0,
        }
    }
}

impl FisherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.k_samples < self.top_k {
            return Err(FisherError::Config(format!(
                "need k_samples >= top_k >= 1, got k_samples {} and top_k {}",
                self.k_samples, self.top_k
            )));
        }
        Ok(())
    }
}

/// Gradient of `ln p(y | x)` over the encoder parameters followed by the
/// circuit angles. The block boundary is `model.encoder.param_count()`.
pub fn logprob_grad(model: &mut HybridModel, x: &[f64], y: usize) -> Result<Vec<f64>> {
    model.zero_grad();
    let (_, probs) = model.loss_and_grads(&[(x, y)])?;
    if probs[0][y] == 0.0 {
        log::warn!("p(y = {y} | x) underflowed to zero; log-probability clamped");
    }
    let mut g: Vec<f64> = model
        .encoder
        .params()
        .iter()
        .flat_map(|p| p.grad.data().iter().map(|v| -v))
        .collect();
    g.extend(model.theta.grad.data().iter().map(|v| -v));
    model.zero_grad();
    Ok(g)
}

/// Share of `u`'s squared mass on coordinates `< boundary`, and the rest.
pub fn energy_split(u: &[f64], boundary: usize) -> Result<(f64, f64)> {
    let norm: f64 = u.iter().map(|v| v * v).sum();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(FisherError::NotNormalized(norm));
    }
    let t: f64 = u[..boundary.min(u.len())].iter().map(|v| v * v).sum();
    let t = t.clamp(0.0, 1.0);
    Ok((t, 1.0 - t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherReport {
    /// Top eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit parameter-space eigenvectors. Numerically null directions carry
    /// the uniform vector, whose split is `(|T|, |Q|) / D`.
    pub eigenvectors: Vec<Vec<f64>>,
    pub energy_splits: Vec<(f64, f64)>,
    /// `(|T|, |Q|)`: encoder and circuit parameter counts.
    pub block_sizes: (usize, usize),
    /// Trace of the Gram matrix, `Σ‖g_j‖² / k`.
    pub trace: f64,
    pub samples: usize,
}

impl FisherReport {
    /// `eig_index,eigenvalue,t_share,q_share`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "eig_index,eigenvalue,t_share,q_share")?;
        for (i, (lam, (t, q))) in self.eigenvalues.iter().zip(&self.energy_splits).enumerate() {
            writeln!(w, "{i},{lam:.12e},{t:.12},{q:.12}")?;
        }
        Ok(())
    }

    /// Whitespace-separated spectrum table for bar plots: index, eigenvalue,
    /// `log10` eigenvalue, eigenvalue relative to the largest, and the two
    /// shares.
    pub fn write_spectrum<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# index eigenvalue log10_eigenvalue relative t_share q_share")?;
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        for (i, (lam, (t, q))) in self.eigenvalues.iter().zip(&self.energy_splits).enumerate() {
            let rel = if top > 0.0 { lam / top } else { 0.0 };
            let log = if *lam > 0.0 { lam.log10() } else { f64::NEG_INFINITY };
            writeln!(w, "{i} {lam:.12e} {log:.6} {rel:.6e} {t:.6} {q:.6}")?;
        }
        Ok(())
    }
}

/// Pick `k` rows: without replacement when enough exist, otherwise with.
fn draw_rows(rows: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rows.len() >= k {
        let mut picked: Vec<usize> = sample(rng, rows.len(), k).into_iter().map(|i| rows[i]).collect();
        picked.sort_unstable();
        picked
    } else {
        (0..k).map(|_| rows[rng.gen_range(0..rows.len())]).collect()
    }
}

/// Gradient matrix `G / √k` as `k` columns of length `D`, drawn from `rows`.
pub fn gradient_columns(
    model: &mut HybridModel,
    data: &Dataset,
    rows: &[usize],
    cfg: &FisherConfig,
) -> Result<Vec<Vec<f64>>> {
    if cfg.k_samples == 0 {
        return Err(FisherError::Config("k_samples must be at least 1".into()));
    }
    if rows.is_empty() {
        return Err(FisherError::NoRows);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picked = draw_rows(rows, cfg.k_samples, &mut rng);
    let inv_sqrt_k = 1.0 / (cfg.k_samples as f64).sqrt();
    let mut cols = Vec::with_capacity(picked.len());
    for r in picked {
        let x = &data.features[r];
        let y = match cfg.label_mode {
            LabelMode::DataLabels => data.labels[r],
            LabelMode::ModelSampled => {
                let p = model.probs(x)?;
                WeightedIndex::new(&p).map_or(0, |d| d.sample(&mut rng))
            }
        };
        let mut g = logprob_grad(model, x, y)?;
        g.iter_mut().for_each(|v| *v *= inv_sqrt_k);
        cols.push(g);
    }
    Ok(cols)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top eigenpairs of `G Gᵀ` from its columns, via the Gram matrix.
pub fn gram_eigs(cols: &[Vec<f64>], boundary: usize, top_k: usize) -> Result<FisherReport> {
    let k = cols.len();
    let d = cols.first().map_or(0, Vec::len);
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| dot(&cols[i], &cols[j])).collect())
        .collect();
    // The Gram matrix is symmetric up to summation order; mirror it exactly.
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| if j < i { gram[j][i] } else { gram[i][j] }).collect())
        .collect();
    let trace = (0..k).map(|i| gram[i][i]).sum();
    let eig = symmetric_eigen(&gram)?;
    let lam_max = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let uniform = vec![1.0 / (d as f64).sqrt(); d];
    let mut eigenvalues = Vec::new();
    let mut eigenvectors = Vec::new();
    let mut energy_splits = Vec::new();
    for (lam, v) in eig.values.iter().zip(&eig.vectors).take(top_k) {
        let lam = lam.max(0.0);
        let u = if lam > 1e-13 * lam_max && lam > 0.0 {
            let mut u = vec![0.0; d];
            for (c, vj) in cols.iter().zip(v) {
                for (ui, ci) in u.iter_mut().zip(c) {
                    *ui += ci * vj;
                }
            }
            let norm = dot(&u, &u).sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            u
        } else {
            uniform.clone()
        };
        energy_splits.push(energy_split(&u, boundary)?);
        eigenvalues.push(lam);
        eigenvectors.push(u);
    }
    Ok(FisherReport {
        eigenvalues,
        eigenvectors,
        energy_splits,
        block_sizes: (boundary, d - boundary),
        trace,
        samples: k,
    })
}

/// Empirical Fisher spectrum of `model` on `rows` of `data`.
pub fn empirical_fisher_eigs(
    model: &mut HybridModel,
    data: &Dataset,
    rows: &[usize],
    cfg: &FisherConfig,
) -> Result<FisherReport> {
    cfg.validate()?;
    let cols = gradient_columns(model, data, rows, cfg)?;
    gram_eigs(&cols, model.encoder.param_count(), cfg.top_k)
}

/// `‖G Gᵀ u − λ u‖`.
pub fn residual(cols: &[Vec<f64>], lam: f64, u: &[f64]) -> f64 {
    let fu = fisher_apply(cols, u);
    fu.iter().zip(u).map(|(a, b)| (a - lam * b).powi(2)).sum::<f64>().sqrt()
}

/// `1e-8·λ`, floored at the float64 roundoff level of the
/// matrix-free product, `1e-12·λ_max`.
pub fn residual_tolerance(lam: f64, lam_max: f64) -> f64 {
    1e-8 * lam + 1e-12 * lam_max
}

/// Matrix-free `G (Gᵀ v)`.
pub fn fisher_apply(cols: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for c in cols {
        let s = dot(c, v);
        for (o, ci) in out.iter_mut().zip(c) {
            *o += s * ci;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_iris, split_standardize, Dataset};
    use crate::genome::Genome;
    use crate::transformer::{TokenMode, TransformerConfig};
    use nalgebra::DMatrix;

    fn small_model(seed: u64) -> HybridModel {
        let cfg = TransformerConfig {
            d_model: 2,
            n_heads: 1,
            n_layers: 1,
            d_ff: 2,
            n_qubits: 2,
            token_mode: TokenMode::Scalar,
            seed,
        };
        HybridModel::init(&cfg, 4, Genome::ones(2).unwrap(), 2, seed).unwrap()
    }

    /// Iris restricted to its first two species.
    fn two_class_iris() -> Dataset {
        let mut d = load_iris();
        let keep: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] < 2).collect();
        d.features = keep.iter().map(|&i| d.features[i].clone()).collect();
        d.labels = keep.iter().map(|&i| d.labels[i]).collect();
        d.n_classes = 2;
        d.class_names.truncate(2);
        split_standardize(d, 0.2, 0).unwrap()
    }

    #[test]
    fn logprob_grad_layout_and_finite_differences() {
        let mut m = small_model(1);
        let x = [0.5, -0.2, 1.0, 0.3];
        let g = logprob_grad(&mut m, &x, 1).unwrap();
        assert_eq!(g.len(), m.param_count());
        let base = m.encoder.flat_values();
        let eps = 1e-5;
        let logp = |m: &HybridModel| m.probs(&x).unwrap()[1].ln();
        for k in 0..base.len() {
            let mut v = base.clone();
            v[k] += eps;
            m.encoder.set_flat_values(&v).unwrap();
            let up = logp(&m);
            v[k] -= 2.0 * eps;
            m.encoder.set_flat_values(&v).unwrap();
            let down = logp(&m);
            m.encoder.set_flat_values(&base).unwrap();
            let fd = (up - down) / (2.0 * eps);
            assert!((g[k] - fd).abs() <= (1e-4 * fd.abs()).max(1e-8));
        }
    }

    #[test]
    fn energy_split_cases() {
        assert_eq!(energy_split(&[0.0, 0.0, 1.0], 2).unwrap(), (0.0, 1.0));
        let u = vec![0.5; 4];
        let (t, q) = energy_split(&u, 2).unwrap();
        assert!((t - 0.5).abs() < 1e-15 && (q - 0.5).abs() < 1e-15);
        assert!(matches!(energy_split(&[1.0, 1.0], 1), Err(FisherError::NotNormalized(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mut u: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = dot(&u, &u).sqrt();
            u.iter_mut().for_each(|x| *x /= n);
            let b = rng.gen_range(0..=9);
            let mut brute = 0.0;
            for (i, x) in u.iter().enumerate() {
                if i < b {
                    brute += x * x;
                }
            }
            let (t, q) = energy_split(&u, b).unwrap();
            assert!((t - brute).abs() < 1e-12);
            assert_eq!(t + q, 1.0);
        }
    }

    #[test]
    fn single_sample_is_rank_one() {
        let g = vec![vec![3.0, 0.0, 4.0]];
        let r = gram_eigs(&g, 1, 1).unwrap();
        assert!((r.eigenvalues[0] - 25.0).abs() < 1e-12);
        let expect = [0.6, 0.0, 0.8];
        for (a, b) in r.eigenvectors[0].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_trick_matches_dense_eigendecomposition() {
        let d = two_class_iris();
        let mut m = small_model(3);
        assert!(m.param_count() <= 60, "{} parameters", m.param_count());
        let cfg = FisherConfig {
            k_samples: 40,
            top_k: 10,
            ..FisherConfig::default()
        };
        let cols = gradient_columns(&mut m, &d, &d.split.train, &cfg).unwrap();
        let r = gram_eigs(&cols, m.encoder.param_count(), cfg.top_k).unwrap();
        let dim = m.param_count();
        let f = DMatrix::from_fn(dim, dim, |i, j| cols.iter().map(|c| c[i] * c[j]).sum::<f64>());
        let mut dense: Vec<f64> = f.symmetric_eigen().eigenvalues.iter().copied().collect();
        dense.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in r.eigenvalues.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let norms: f64 = cols.iter().map(|c| dot(c, c)).sum();
        assert!((r.trace - norms).abs() < 1e-10);
        for (lam, u) in r.eigenvalues.iter().zip(&r.eigenvectors) {
            assert!(residual(&cols, *lam, u) <= residual_tolerance(*lam, r.eigenvalues[0]));
        }
        for w in r.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn sampling_modes_and_errors() {
        let d = two_class_iris();
        let mut m = small_model(5);
        let rows = &d.split.test[..5];
        let cfg = FisherConfig {
            k_samples: 12,
            top_k: 3,
            label_mode: LabelMode::DataLabels,
            seed: 1,
        };
        let r = empirical_fisher_eigs(&mut m, &d, rows, &cfg).unwrap();
        assert_eq!(r.samples, 12);
        assert_eq!(r.eigenvalues.len(), 3);
        let again = empirical_fisher_eigs(&mut m, &d, rows, &cfg).unwrap();
        assert_eq!(r, again);
        let bad = FisherConfig { k_samples: 2, ..cfg };
        assert!(matches!(empirical_fisher_eigs(&mut m, &d, rows, &bad), Err(FisherError::Config(_))));
    }
}
