//! Exact statevector simulation of H / RY / CNOT circuits.
//!
//! Qubit ordering is little-endian: qubit `q` is bit `q` of the amplitude
//! index, so qubit 0 is the least-significant bit. Bitstrings printed by
//! [`sample_shots`] put the highest qubit first (`"01"` means q0 = 1).

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Largest register the simulator accepts.
pub const MAX_QUBITS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsimError {
    #[error("qubit index {qubit} out of range for a {n_qubits}-qubit register")]
    QubitIndex { qubit: usize, n_qubits: usize },
    #[error("two-qubit gate needs distinct qubits, got {0} twice")]
    RepeatedQubit(usize),
    #[error("register size {0} outside 1..={MAX_QUBITS}")]
    RegisterSize(usize),
    #[error("parameter slot {slot} out of range for {len} parameters")]
    ParamSlot { slot: usize, len: usize },
    #[error("{kind:?} gate has an invalid parameter binding")]
    ParamBinding { kind: GateKind },
    #[error("parameter-shift differentiation does not support parameterized {0:?} gates")]
    UnsupportedGate(GateKind),
    #[error("shot count must be >= 1")]
    ZeroShots,
}

pub type Result<T> = std::result::Result<T, QsimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    H,
    Ry,
    Cnot,
}

/// One gate. For `Cnot`, `qubits` is `[control, target]`; single-qubit gates
/// use only `qubits[0]`. `param` indexes the concatenated angle store
/// (input angles first, then trainable angles).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GateOp {
    pub kind: GateKind,
    pub qubits: [usize; 2],
    pub param: Option<usize>,
}

impl GateOp {
    pub fn h(q: usize) -> Self {
        Self {
            kind: GateKind::H,
            qubits: [q, q],
            param: None,
        }
    }

    pub fn ry(q: usize, slot: usize) -> Self {
        Self {
            kind: GateKind::Ry,
            qubits: [q, q],
            param: Some(slot),
        }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        Self {
            kind: GateKind::Cnot,
            qubits: [control, target],
            param: None,
        }
    }

    pub fn arity(&self) -> usize {
        match self.kind {
            GateKind::Cnot => 2,
            _ => 1,
        }
    }

    pub fn validate(&self, n_qubits: usize) -> Result<()> {
        for &q in &self.qubits[..self.arity()] {
            if q >= n_qubits {
                return Err(QsimError::QubitIndex { qubit: q, n_qubits });
            }
        }
        if self.kind == GateKind::Cnot && self.qubits[0] == self.qubits[1] {
            return Err(QsimError::RepeatedQubit(self.qubits[0]));
        }
        let ok = match self.kind {
            GateKind::Ry => self.param.is_some(),
            GateKind::H | GateKind::Cnot => self.param.is_none(),
        };
        if !ok {
            return Err(QsimError::ParamBinding { kind: self.kind });
        }
        Ok(())
    }

    fn angle(&self, params: &[f64]) -> Result<f64> {
        let slot = self.param.ok_or(QsimError::ParamBinding { kind: self.kind })?;
        params
            .get(slot)
            .copied()
            .ok_or(QsimError::ParamSlot { slot, len: params.len() })
    }
}

/// An ordered gate list on a fixed register, with the size of the angle
/// store it reads from.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    pub n_qubits: usize,
    pub gates: Vec<GateOp>,
    pub n_params: usize,
}

impl Circuit {
    pub fn new(n_qubits: usize, gates: Vec<GateOp>, n_params: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(QsimError::RegisterSize(n_qubits));
        }
        for g in &gates {
            g.validate(n_qubits)?;
            if let Some(slot) = g.param {
                if slot >= n_params {
                    return Err(QsimError::ParamSlot { slot, len: n_params });
                }
            }
        }
        Ok(Self {
            n_qubits,
            gates,
            n_params,
        })
    }

    /// Run from `|0…0⟩`.
    pub fn run(&self, params: &[f64]) -> Result<StateVector> {
        let mut s = StateVector::zero(self.n_qubits)?;
        for g in &self.gates {
            s.apply(g, params)?;
        }
        Ok(s)
    }

    /// `⟨Z_q⟩` for every qubit after running the circuit.
    pub fn expectations(&self, params: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(params)?.z_expectations())
    }

    /// Text diagram, one line per qubit. Each gate gets its own column.
    pub fn diagram(&self, labels: &dyn Fn(usize) -> String) -> String {
        let n = self.n_qubits;
        let mut lines: Vec<String> = (0..n).map(|q| format!("q{q}: ")).collect();
        let pad = lines.iter().map(String::len).max().unwrap_or(0);
        for l in &mut lines {
            while l.len() < pad {
                l.push(' ');
            }
            l.push('─');
        }
        for g in &self.gates {
            let mut cells = vec![String::new(); n];
            match g.kind {
                GateKind::H => cells[g.qubits[0]] = "H".to_string(),
                GateKind::Ry => {
                    let label = g.param.map(labels).unwrap_or_default();
                    cells[g.qubits[0]] = format!("RY({label})");
                }
                GateKind::Cnot => {
                    let [c, t] = g.qubits;
                    cells[c] = "●".to_string();
                    cells[t] = "X".to_string();
                    let (lo, hi) = (c.min(t), c.max(t));
                    for cell in cells.iter_mut().take(hi).skip(lo + 1) {
                        *cell = "│".to_string();
                    }
                }
            }
            let width = cells.iter().map(|c| c.chars().count()).max().unwrap_or(1);
            for (line, cell) in lines.iter_mut().zip(&cells) {
                let len = cell.chars().count();
                line.push_str(cell);
                for _ in len..width {
                    line.push('─');
                }
                line.push_str("──");
            }
        }
        let mut out = String::new();
        for l in lines {
            let _ = writeln!(out, "{l}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    /// `|0…0⟩` on `n_qubits`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(QsimError::RegisterSize(n_qubits));
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        Ok(Self { n_qubits, amps })
    }

    /// Computational basis state with index `index` (little-endian).
    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        let mut s = Self::zero(n_qubits)?;
        s.amps[0] = Complex64::new(0.0, 0.0);
        s.amps[index] = Complex64::new(1.0, 0.0);
        Ok(s)
    }

    pub fn from_amplitudes(amps: Vec<Complex64>) -> Result<Self> {
        let n = amps.len().trailing_zeros() as usize;
        if !amps.len().is_power_of_two() || n == 0 || n > MAX_QUBITS {
            return Err(QsimError::RegisterSize(n));
        }
        Ok(Self { n_qubits: n, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sq(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn apply(&mut self, g: &GateOp, params: &[f64]) -> Result<()> {
        g.validate(self.n_qubits)?;
        match g.kind {
            GateKind::H => self.apply_h(g.qubits[0]),
            GateKind::Ry => {
                let theta = g.angle(params)?;
                self.apply_ry(g.qubits[0], theta);
            }
            GateKind::Cnot => self.apply_cnot(g.qubits[0], g.qubits[1]),
        }
        Ok(())
    }

    fn apply_h(&mut self, q: usize) {
        let mask = 1usize << q;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..self.amps.len() {
            if i & mask == 0 {
                let a0 = self.amps[i];
                let a1 = self.amps[i | mask];
                self.amps[i] = (a0 + a1) * s;
                self.amps[i | mask] = (a0 - a1) * s;
            }
        }
    }

    /// `RY(θ) = [[cos θ/2, −sin θ/2], [sin θ/2, cos θ/2]]`.
    fn apply_ry(&mut self, q: usize, theta: f64) {
        let mask = 1usize << q;
        let (s, c) = (theta / 2.0).sin_cos();
        for i in 0..self.amps.len() {
            if i & mask == 0 {
                let a0 = self.amps[i];
                let a1 = self.amps[i | mask];
                self.amps[i] = a0 * c - a1 * s;
                self.amps[i | mask] = a0 * s + a1 * c;
            }
        }
    }

    fn apply_cnot(&mut self, control: usize, target: usize) {
        let cm = 1usize << control;
        let tm = 1usize << target;
        for i in 0..self.amps.len() {
            if i & cm != 0 && i & tm == 0 {
                self.amps.swap(i, i | tm);
            }
        }
    }

    /// `⟨Z_q⟩` for each qubit.
    pub fn z_expectations(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.n_qubits];
        for (i, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            for (q, zq) in z.iter_mut().enumerate() {
                if i >> q & 1 == 0 {
                    *zq += p;
                } else {
                    *zq -= p;
                }
            }
        }
        z
    }
}

/// Draw `shots` measurements in the computational basis. Keys are bitstrings
/// with the highest qubit first.
pub fn sample_shots(s: &StateVector, shots: u64, seed: u64) -> Result<BTreeMap<String, u64>> {
    if shots == 0 {
        return Err(QsimError::ZeroShots);
    }
    let mut cumulative = Vec::with_capacity(s.amps.len());
    let mut acc = 0.0;
    for a in &s.amps {
        acc += a.norm_sqr();
        cumulative.push(acc);
    }
    let total = acc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; s.amps.len()];
    for _ in 0..shots {
        let u = rng.gen::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c <= u).min(counts.len() - 1);
        counts[idx] += 1;
    }
    let width = s.n_qubits;
    Ok(counts
        .into_iter()
        .enumerate()
        .filter(|(_, c)| *c > 0)
        .map(|(i, c)| (format!("{i:0width$b}"), c))
        .collect())
}

/// `⟨Z_q⟩` estimated from a shot histogram.
pub fn z_from_counts(counts: &BTreeMap<String, u64>, n_qubits: usize) -> Vec<f64> {
    let total: u64 = counts.values().sum();
    let mut z = vec![0.0; n_qubits];
    for (bits, &c) in counts {
        let bytes = bits.as_bytes();
        for (q, zq) in z.iter_mut().enumerate() {
            let bit = bytes[n_qubits - 1 - q] == b'1';
            *zq += if bit { -(c as f64) } else { c as f64 };
        }
    }
    z.iter_mut().for_each(|v| *v /= total as f64);
    z
}

/// Jacobian `d⟨Z_q⟩ / d param` via the two-term shift rule.
///
/// Rows follow `observed`, columns are parameter slots. A slot bound to more
/// than one RY gate gets the sum of the per-gate shifts.
pub fn parameter_shift_jacobian(
    circuit: &Circuit,
    params: &[f64],
    observed: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if params.len() < circuit.n_params {
        return Err(QsimError::ParamSlot {
            slot: circuit.n_params.saturating_sub(1),
            len: params.len(),
        });
    }
    for &q in observed {
        if q >= circuit.n_qubits {
            return Err(QsimError::QubitIndex {
                qubit: q,
                n_qubits: circuit.n_qubits,
            });
        }
    }
    for g in &circuit.gates {
        if g.param.is_some() && g.kind != GateKind::Ry {
            return Err(QsimError::UnsupportedGate(g.kind));
        }
    }
    let mut jac = vec![vec![0.0; params.len()]; observed.len()];
    for (pos, g) in circuit.gates.iter().enumerate() {
        let Some(slot) = g.param else { continue };
        let base = params[slot];
        let plus = run_with_shift(circuit, params, pos, base + FRAC_PI_2)?;
        let minus = run_with_shift(circuit, params, pos, base - FRAC_PI_2)?;
        for (row, &q) in jac.iter_mut().zip(observed) {
            row[slot] += 0.5 * (plus[q] - minus[q]);
        }
    }
    Ok(jac)
}

/// Gradient of `⟨Z_obs⟩` with respect to every parameter slot.
pub fn parameter_shift_grad(circuit: &Circuit, params: &[f64], obs: usize) -> Result<Vec<f64>> {
    let mut jac = parameter_shift_jacobian(circuit, params, &[obs])?;
    Ok(jac.remove(0))
}

/// Runs the circuit with the angle of gate `pos` replaced by `angle`.
fn run_with_shift(circuit: &Circuit, params: &[f64], pos: usize, angle: f64) -> Result<Vec<f64>> {
    let mut s = StateVector::zero(circuit.n_qubits)?;
    for (i, g) in circuit.gates.iter().enumerate() {
        if i == pos {
            s.apply_ry(g.qubits[0], angle);
        } else {
            s.apply(g, params)?;
        }
    }
    Ok(s.z_expectations())
}
