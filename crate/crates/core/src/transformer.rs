//! Transformer encoder that compresses one sample into `n_qubits` angles.
//!
//! tokens → linear embedding → + sinusoidal positions → `n_layers` ×
//! (multi-head self-attention + residual, ReLU feed-forward + residual) →
//! mean over the sequence → linear head → `π·tanh`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Axis, Param, Tape, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GTQ1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformerError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input format: {0}")]
    Format(String),
    #[error("encoder record: {0}")]
    Record(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TransformerError>;

/// How a raw feature vector is cut into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    /// One token per feature, token dimension 1.
    Scalar,
    /// Square image cut into `p × p` patches, token dimension `p²`.
    Patch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_qubits: usize,
    pub token_mode: TokenMode,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            n_qubits: 3,
            token_mode: TokenMode::Scalar,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TransformerError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_qubits == 0 || self.n_qubits > self.d_model {
            return bad(format!("n_qubits {} must lie in 1..={}", self.n_qubits, self.d_model));
        }
        if let TokenMode::Patch(0) = self.token_mode {
            return bad("patch size must be positive".into());
        }
        Ok(())
    }
}

/// `(sequence length, token dimension)` for an input of `len` features.
pub fn token_layout(len: usize, mode: TokenMode) -> Result<(usize, usize)> {
    if len == 0 {
        return Err(TransformerError::Format("empty input".into()));
    }
    match mode {
        TokenMode::Scalar => Ok((len, 1)),
        TokenMode::Patch(p) => {
            let side = (len as f64).sqrt().round() as usize;
            if side * side != len {
                return Err(TransformerError::Format(format!("{len} features do not form a square image")));
            }
            if p == 0 || !side.is_multiple_of(p) {
                return Err(TransformerError::Format(format!("image side {side} not divisible by patch {p}")));
            }
            Ok(((side / p) * (side / p), p * p))
        }
    }
}

/// Cut `x` into a `[T, token_dim]` matrix. Patches are taken in row-major
/// order over the patch grid, pixels row-major inside each patch.
pub fn tokenize(x: &[f64], mode: TokenMode) -> Result<Tensor> {
    let (t, dim) = token_layout(x.len(), mode)?;
    let data = match mode {
        TokenMode::Scalar => x.to_vec(),
        TokenMode::Patch(p) => {
            let side = (x.len() as f64).sqrt().round() as usize;
            let grid = side / p;
            let mut data = Vec::with_capacity(x.len());
            for pr in 0..grid {
                for pc in 0..grid {
                    for r in 0..p {
                        let row = pr * p + r;
                        let start = row * side + pc * p;
                        data.extend_from_slice(&x[start..start + p]);
                    }
                }
            }
            data
        }
    };
    Tensor::new(vec![t, dim], data).map_err(|e| TransformerError::Format(e.to_string()))
}

/// `angle_i = π·tanh(h_i)`.
pub fn to_angles(h: &[f64]) -> Vec<f64> {
    h.iter().map(|v| PI * v.tanh()).collect()
}

/// Fixed sinusoidal table, `[T, d]`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[seq_len, d_model]);
    for pos in 0..seq_len {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let rate = 10000f64.powf(2.0 * pair / d_model as f64);
            let arg = pos as f64 / rate;
            pe.set(pos, i, if i % 2 == 0 { arg.sin() } else { arg.cos() });
        }
    }
    pe
}

const PARAMS_PER_LAYER: usize = 8;

/// Offsets of one layer's parameters inside [`Encoder::params`].
#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl LayerSlots {
    fn new(layer: usize) -> Self {
        let base = 2 + PARAMS_PER_LAYER * layer;
        Self {
            wq: base,
            wk: base + 1,
            wv: base + 2,
            wo: base + 3,
            w1: base + 4,
            b1: base + 5,
            w2: base + 6,
            b2: base + 7,
        }
    }
}

/// Encoder weights. Layout of `params`: embedding weight and bias, then per
/// layer `W_Q, W_K, W_V, W_O, W_1, b_1, W_2, b_2`, then head weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: TransformerConfig,
    seq_len: usize,
    token_dim: usize,
    params: Vec<Param>,
    pos_enc: Tensor,
}

/// One recorded forward pass.
pub struct EncoderPass {
    pub tape: Tape,
    pub param_vars: Vec<Var>,
    /// Head output `[1, n_qubits]`.
    pub h: Var,
    /// `π·tanh(h)`, `[1, n_qubits]`.
    pub angles: Var,
    /// Attention weights `[T, T]` per layer per head.
    pub attention: Vec<Vec<Var>>,
}

impl EncoderPass {
    pub fn angles(&self) -> &[f64] {
        self.tape.value(self.angles).data()
    }

    /// Add the tape's parameter gradients into `params`.
    pub fn accumulate_grads(&self, params: &mut [Param]) -> Result<()> {
        for (p, v) in params.iter_mut().zip(&self.param_vars) {
            p.grad.add_assign(self.tape.grad(*v)).map_err(AutodiffError::from)?;
        }
        Ok(())
    }
}

impl Encoder {
    /// Build an encoder for inputs of `input_len` features, weights drawn
    /// uniformly from `±1/√fan_in`, biases zero.
    pub fn new(config: TransformerConfig, input_len: usize) -> Result<Self> {
        config.validate()?;
        let (seq_len, token_dim) = token_layout(input_len, config.token_mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut params = Vec::with_capacity(4 + PARAMS_PER_LAYER * config.n_layers);
        params.push(Param::new(uniform(&mut rng, token_dim, d)));
        params.push(Param::new(Tensor::zeros(&[1, d])));
        for _ in 0..config.n_layers {
            for _ in 0..4 {
                params.push(Param::new(uniform(&mut rng, d, d)));
            }
            params.push(Param::new(uniform(&mut rng, d, config.d_ff)));
            params.push(Param::new(Tensor::zeros(&[1, config.d_ff])));
            params.push(Param::new(uniform(&mut rng, config.d_ff, d)));
            params.push(Param::new(Tensor::zeros(&[1, d])));
        }
        params.push(Param::new(uniform(&mut rng, d, config.n_qubits)));
        params.push(Param::new(Tensor::zeros(&[1, config.n_qubits])));
        Ok(Self {
            config,
            seq_len,
            token_dim,
            pos_enc: positional_encoding(seq_len, d),
            params,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn input_len(&self) -> usize {
        match self.config.token_mode {
            TokenMode::Scalar => self.seq_len,
            TokenMode::Patch(_) => self.seq_len * self.token_dim,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Total number of scalar weights.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    fn head_slots(&self) -> (usize, usize) {
        let n = self.params.len();
        (n - 2, n - 1)
    }

    /// Zero the head weight and bias.
    pub fn zero_head(&mut self) {
        let (w, b) = self.head_slots();
        self.params[w].value.fill(0.0);
        self.params[b].value.fill(0.0);
    }

    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.fill(0.0);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Flattened weights, in parameter order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(TransformerError::Config(format!(
                "expected {} weights, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Multi-head self-attention block with residuals and the feed-forward
    /// sublayer. Returns the new hidden state and the attention weights of
    /// every head.
    pub fn attention_layer(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        hidden: Var,
        layer: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let s = LayerSlots::new(layer);
        let heads = self.config.n_heads;
        let dk = self.config.d_model / heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let q = tape.matmul(hidden, vars[s.wq])?;
        let k = tape.matmul(hidden, vars[s.wk])?;
        let v = tape.matmul(hidden, vars[s.wv])?;
        let mut z_heads = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dk, dk)?;
            let kh = tape.slice_cols(k, head * dk, dk)?;
            let vh = tape.slice_cols(v, head * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax_rows(scores)?;
            z_heads.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let z = if heads == 1 { z_heads[0] } else { tape.concat_cols(&z_heads)? };
        let o = tape.matmul(z, vars[s.wo])?;
        let h1 = tape.add(hidden, o)?;

        let f = tape.matmul(h1, vars[s.w1])?;
        let f = tape.add_row(f, vars[s.b1])?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, vars[s.w2])?;
        let f = tape.add_row(f, vars[s.b2])?;
        let h2 = tape.add(h1, f)?;
        Ok((h2, weights))
    }

    /// Record a forward pass of `x` on a fresh tape.
    pub fn forward(&self, x: &[f64]) -> Result<EncoderPass> {
        if x.len() != self.input_len() {
            return Err(TransformerError::Format(format!(
                "expected {} features, got {}",
                self.input_len(),
                x.len()
            )));
        }
        let tokens = tokenize(x, self.config.token_mode)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p)).collect();
        let tokens = tape.constant(tokens);
        let pe = tape.constant(self.pos_enc.clone());

        let e = tape.matmul(tokens, vars[0])?;
        let e = tape.add_row(e, vars[1])?;
        let mut hidden = tape.add(e, pe)?;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            let (next, w) = self.attention_layer(&mut tape, &vars, hidden, layer)?;
            hidden = next;
            attention.push(w);
        }
        let pooled = tape.mean(hidden, Axis::Rows)?;
        let (hw, hb) = self.head_slots();
        let h = tape.matmul(pooled, vars[hw])?;
        let h = tape.add_row(h, vars[hb])?;
        let t = tape.tanh(h)?;
        let angles = tape.scale(t, PI)?;
        Ok(EncoderPass {
            tape,
            param_vars: vars,
            h,
            angles,
            attention,
        })
    }

    /// Head output `h` without keeping the tape.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pass = self.forward(x)?;
        Ok(pass.tape.value(pass.h).data().to_vec())
    }

    /// Versioned binary record: `GTQ1`, config, tensor shapes, then every
    /// tensor's row-major `f64` payload. All integers little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let c = &self.config;
        let (mode, patch) = match c.token_mode {
            TokenMode::Scalar => (0u32, 0u32),
            TokenMode::Patch(p) => (1, p as u32),
        };
        for v in [
            c.d_model as u32,
            c.n_heads as u32,
            c.n_layers as u32,
            c.d_ff as u32,
            c.n_qubits as u32,
            mode,
            patch,
            self.input_len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a record written by [`Encoder::to_bytes`]. Returns the encoder
    /// and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TransformerError::Record("bad magic, expected GTQ1".into()));
        }
        let mut fields = [0u32; 8];
        for f in &mut fields {
            *f = r.u32()?;
        }
        let seed = r.u64()?;
        let [d_model, n_heads, n_layers, d_ff, n_qubits, mode, patch, input_len] = fields;
        let token_mode = match mode {
            0 => TokenMode::Scalar,
            1 => TokenMode::Patch(patch as usize),
            m => return Err(TransformerError::Record(format!("unknown token mode {m}"))),
        };
        let config = TransformerConfig {
            d_model: d_model as usize,
            n_heads: n_heads as usize,
            n_layers: n_layers as usize,
            d_ff: d_ff as usize,
            n_qubits: n_qubits as usize,
            token_mode,
            seed,
        };
        let mut enc = Encoder::new(config, input_len as usize)?;
        let count = r.u32()? as usize;
        if count != enc.params.len() {
            return Err(TransformerError::Record(format!(
                "record holds {count} tensors, config implies {}",
                enc.params.len()
            )));
        }
        for p in &enc.params {
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            if shape != p.value.shape() {
                return Err(TransformerError::Record(format!(
                    "tensor shape {shape:?} does not match expected {:?}",
                    p.value.shape()
                )));
            }
        }
        for p in &mut enc.params {
            for v in p.value.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        Ok((enc, r.pos))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(TransformerError::Record("truncated record".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny(n_qubits: usize, d_model: usize, seed: u64) -> TransformerConfig {
        TransformerConfig {
            d_model,
            n_heads: 2,
            n_layers: 1,
            d_ff: 2 * d_model,
            n_qubits,
            token_mode: TokenMode::Scalar,
            seed,
        }
    }

    #[test]
    fn tokenize_layouts() {
        let t = tokenize(&[5.1, 3.5, 1.4, 0.2], TokenMode::Scalar).unwrap();
        assert_eq!(t.shape(), &[4, 1]);
        let img: Vec<f64> = (0..784).map(|i| i as f64).collect();
        let t = tokenize(&img, TokenMode::Patch(4)).unwrap();
        assert_eq!(t.shape(), &[49, 16]);
        // Second patch starts at column 4 of row 0; its second row starts at 28 + 4.
        assert_eq!(t.get(1, 0), 4.0);
        assert_eq!(t.get(1, 4), 32.0);
        assert!(matches!(tokenize(&[], TokenMode::Scalar), Err(TransformerError::Format(_))));
        assert!(matches!(tokenize(&[0.0; 27], TokenMode::Patch(3)), Err(TransformerError::Format(_))));
        assert!(matches!(tokenize(&[0.0; 25], TokenMode::Patch(4)), Err(TransformerError::Format(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = TransformerConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = TransformerConfig::default();
        c.n_qubits = 17;
        assert!(c.validate().is_err());
        assert!(TransformerConfig::default().validate().is_ok());
    }

    #[test]
    fn output_length_is_n_qubits() {
        for n in 3..=10 {
            let enc = Encoder::new(tiny(n, 16, n as u64), 5).unwrap();
            let h = enc.encode(&[0.1, -0.2, 0.3, 0.4, -0.5]).unwrap();
            assert_eq!(h.len(), n);
        }
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let mut enc = Encoder::new(tiny(4, 8, 1), 6).unwrap();
        enc.zero_head();
        let h = enc.encode(&[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn token_order_matters_through_positions() {
        let enc = Encoder::new(tiny(3, 8, 7), 4).unwrap();
        let a = enc.encode(&[0.9, -0.4, 0.1, 0.3]).unwrap();
        let b = enc.encode(&[-0.4, 0.9, 0.1, 0.3]).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "swapping tokens left output unchanged");
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let enc = Encoder::new(tiny(3, 8, 3), 5).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<_> = enc.params().iter().map(|p| tape.param(p)).collect();
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let hidden = tape.constant(Tensor::from_rows(&vec![row; 5]).unwrap());
        let (_, weights) = enc.attention_layer(&mut tape, &vars, hidden, 0).unwrap();
        for w in weights {
            for v in tape.value(w).data() {
                assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let enc = Encoder::new(tiny(3, 8, 11), 6).unwrap();
        let pass = enc.forward(&[0.3, -1.2, 0.5, 2.0, -0.1, 0.7]).unwrap();
        for layer in &pass.attention {
            for &w in layer {
                let t = pass.tape.value(w);
                let (m, n) = t.dims2("test").unwrap();
                for i in 0..m {
                    let s: f64 = (0..n).map(|j| t.get(i, j)).sum();
                    assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn to_angles_range_and_slope() {
        assert_eq!(to_angles(&[0.0, 0.0]), vec![0.0, 0.0]);
        let sat = to_angles(&[50.0])[0];
        assert!(sat <= PI && PI - sat < 1e-12);
        let eps = 1e-6;
        let slope = (to_angles(&[eps])[0] - to_angles(&[-eps])[0]) / (2.0 * eps);
        assert_abs_diff_eq!(slope, PI, epsilon = 1e-8);
    }

    /// Finite-difference check of `sum(w ⊙ angles)` over every encoder weight.
    fn gradcheck_encoder(enc: &Encoder, x: &[f64], weights: &[f64]) -> f64 {
        let loss = |e: &Encoder| -> f64 {
            let a = e.forward(x).unwrap();
            a.angles().iter().zip(weights).map(|(a, w)| a * w).sum()
        };
        let mut pass = enc.forward(x).unwrap();
        let seed = Tensor::row(weights.to_vec());
        pass.tape.backward_with_seed(pass.angles, &seed).unwrap();
        let mut params = enc.params().to_vec();
        params.iter_mut().for_each(Param::zero_grad);
        pass.accumulate_grads(&mut params).unwrap();
        let analytic: Vec<f64> = params.iter().flat_map(|p| p.grad.data().to_vec()).collect();

        let base = enc.flat_values();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut e = enc.clone();
            let mut v = base.clone();
            v[i] += eps;
            e.set_flat_values(&v).unwrap();
            let up = loss(&e);
            v[i] -= 2.0 * eps;
            e.set_flat_values(&v).unwrap();
            let down = loss(&e);
            let fd = (up - down) / (2.0 * eps);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut cfg = tiny(3, 4, seed);
            cfg.n_layers = 2;
            let mut enc = Encoder::new(cfg, 6).unwrap();
            // Non-zero biases so every parameter path is exercised.
            let mut v = enc.flat_values();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            v.iter_mut().for_each(|w| *w += 0.1 * rng.gen_range(-1.0..1.0));
            enc.set_flat_values(&v).unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let worst = gradcheck_encoder(&enc, &x, &w);
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn record_roundtrip_and_errors() {
        let mut cfg = tiny(3, 8, 2);
        cfg.token_mode = TokenMode::Patch(2);
        let enc = Encoder::new(cfg, 16).unwrap();
        let bytes = enc.to_bytes();
        assert_eq!(&bytes[..4], b"GTQ1");
        let (back, used) = Encoder::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, enc);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Encoder::from_bytes(&bad).is_err());
        assert!(Encoder::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
