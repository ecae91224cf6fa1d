//! Bitstring encoding of the circuit search space.
//!
//! A genome on `N` qubits has one bit per unordered qubit pair `(i, j)`,
//! `i < j`, ranked lexicographically: `(0,1), (0,2), …, (N−2,N−1)`. Every
//! decoded circuit starts with `H` on each qubit followed by `RY(input_q)` on
//! each qubit. Each set bit then appends `CNOT(i → j)` and `RY(θ_m)` on `j`,
//! in ascending pair order, with `m` counting the set bits seen so far.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::qsim::{Circuit, GateOp, QsimError, MAX_QUBITS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenomeError {
    #[error("pair ({i}, {j}) is not an ordered pair of distinct qubits below {n}")]
    Pair { i: usize, j: usize, n: usize },
    #[error("qubit count {0} outside 2..={MAX_QUBITS}")]
    QubitCount(usize),
    #[error("genome for {n} qubits needs {expected} bits, got {actual}")]
    Length { n: usize, expected: usize, actual: usize },
    #[error("malformed genome text {0:?}, expected \"N:bitstring\"")]
    Text(String),
    #[error(transparent)]
    Circuit(#[from] QsimError),
}

/// Number of qubit pairs, `N(N−1)/2`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Lexicographic rank of `(i, j)` among pairs with `i < j < n`.
pub fn pair_index(i: usize, j: usize, n: usize) -> Result<usize, GenomeError> {
    if i >= j || j >= n {
        return Err(GenomeError::Pair { i, j, n });
    }
    // Pairs starting with a < i: sum over a of (n - 1 - a).
    Ok(i * (2 * n - i - 1) / 2 + (j - i - 1))
}

/// Inverse of [`pair_index`].
pub fn pair_at(index: usize, n: usize) -> (usize, usize) {
    let mut rest = index;
    for i in 0..n {
        let row = n - 1 - i;
        if rest < row {
            return (i, i + 1 + rest);
        }
        rest -= row;
    }
    panic!("pair index {index} out of range for {n} qubits");
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Genome {
    n_qubits: usize,
    bits: Vec<bool>,
}

impl Genome {
    pub fn new(n_qubits: usize, bits: Vec<bool>) -> Result<Self, GenomeError> {
        if !(2..=MAX_QUBITS).contains(&n_qubits) {
            return Err(GenomeError::QubitCount(n_qubits));
        }
        let expected = pair_count(n_qubits);
        if bits.len() != expected {
            return Err(GenomeError::Length {
                n: n_qubits,
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self { n_qubits, bits })
    }

    pub fn zeros(n_qubits: usize) -> Result<Self, GenomeError> {
        Self::new(n_qubits, vec![false; pair_count(n_qubits)])
    }

    pub fn ones(n_qubits: usize) -> Result<Self, GenomeError> {
        Self::new(n_qubits, vec![true; pair_count(n_qubits)])
    }

    /// Independent fair bits.
    pub fn random<R: Rng + ?Sized>(n_qubits: usize, rng: &mut R) -> Result<Self, GenomeError> {
        let bits = (0..pair_count(n_qubits)).map(|_| rng.gen::<bool>()).collect();
        Self::new(n_qubits, bits)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// `2N + 2·popcount`.
    pub fn gate_count(&self) -> usize {
        2 * self.n_qubits + 2 * self.popcount()
    }

    /// Largest possible gate count on `n` qubits.
    pub fn max_gate_count(n: usize) -> usize {
        2 * n + 2 * pair_count(n)
    }

    pub fn bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// Decode into the gate list. Parameter slots `0..N` are the input
    /// angles, slots `N..N + popcount` are the trainable angles.
    pub fn decode(&self) -> Result<Circuit, GenomeError> {
        let n = self.n_qubits;
        let mut gates = Vec::with_capacity(self.gate_count());
        gates.extend((0..n).map(GateOp::h));
        gates.extend((0..n).map(|q| GateOp::ry(q, q)));
        let mut theta = 0;
        for (idx, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            let (i, j) = pair_at(idx, n);
            gates.push(GateOp::cnot(i, j));
            gates.push(GateOp::ry(j, n + theta));
            theta += 1;
        }
        Ok(Circuit::new(n, gates, n + theta)?)
    }

    /// Single-point crossover applied with probability `p_c`; otherwise both
    /// parents are copied. The cut lies strictly inside the string.
    pub fn crossover<R: Rng + ?Sized>(&self, other: &Genome, p_c: f64, rng: &mut R) -> (Genome, Genome) {
        debug_assert_eq!(self.n_qubits, other.n_qubits);
        let len = self.bits.len();
        if len < 2 || !rng.gen_bool(p_c.clamp(0.0, 1.0)) {
            return (self.clone(), other.clone());
        }
        let cut = rng.gen_range(1..len);
        let mut a = self.bits[..cut].to_vec();
        a.extend_from_slice(&other.bits[cut..]);
        let mut b = other.bits[..cut].to_vec();
        b.extend_from_slice(&self.bits[cut..]);
        (
            Genome {
                n_qubits: self.n_qubits,
                bits: a,
            },
            Genome {
                n_qubits: self.n_qubits,
                bits: b,
            },
        )
    }

    /// Flip each bit independently with probability `p_m`.
    pub fn mutate<R: Rng + ?Sized>(&self, p_m: f64, rng: &mut R) -> Genome {
        let p = p_m.clamp(0.0, 1.0);
        let bits = self.bits.iter().map(|&b| if rng.gen_bool(p) { !b } else { b }).collect();
        Genome {
            n_qubits: self.n_qubits,
            bits,
        }
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n_qubits, self.bitstring())
    }
}

impl FromStr for Genome {
    type Err = GenomeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GenomeError::Text(s.to_string());
        let (n, bits) = s.trim().split_once(':').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        let bits = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Genome::new(n, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::GateKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enumerate_pairs(n: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                v.push((i, j));
            }
        }
        v
    }

    #[test]
    fn pair_index_examples() {
        assert_eq!(pair_index(0, 1, 3).unwrap(), 0);
        assert_eq!(pair_index(1, 2, 3).unwrap(), 2);
        assert_eq!(pair_index(8, 9, 10).unwrap(), 44);
        assert!(pair_index(2, 1, 3).is_err());
        assert!(pair_index(1, 1, 3).is_err());
        assert!(pair_index(1, 3, 3).is_err());
    }

    #[test]
    fn pair_index_matches_enumeration() {
        for n in 2..=MAX_QUBITS {
            for (rank, (i, j)) in enumerate_pairs(n).into_iter().enumerate() {
                assert_eq!(pair_index(i, j, n).unwrap(), rank);
                assert_eq!(pair_at(rank, n), (i, j));
            }
        }
    }

    #[test]
    fn decode_three_qubit_example() {
        let g: Genome = "3:101".parse().unwrap();
        let c = g.decode().unwrap();
        let expected = vec![
            GateOp::h(0),
            GateOp::h(1),
            GateOp::h(2),
            GateOp::ry(0, 0),
            GateOp::ry(1, 1),
            GateOp::ry(2, 2),
            GateOp::cnot(0, 1),
            GateOp::ry(1, 3),
            GateOp::cnot(1, 2),
            GateOp::ry(2, 4),
        ];
        assert_eq!(c.gates, expected);
        assert_eq!(c.n_params, 5);
    }

    #[test]
    fn decode_extremes() {
        let z = Genome::zeros(4).unwrap().decode().unwrap();
        assert_eq!(z.gates.len(), 8);
        assert_eq!(z.n_params, 4);
        let o = Genome::ones(4).unwrap().decode().unwrap();
        assert_eq!(o.gates.len(), 20);
        assert_eq!(o.gates.iter().filter(|g| g.kind == GateKind::Cnot).count(), 6);
    }

    #[test]
    fn gate_count_examples() {
        let g = Genome::new(3, vec![true, false, false]).unwrap();
        assert_eq!(g.gate_count(), 8);
        let g = Genome::new(4, vec![false, false, true, false, false, false]).unwrap();
        assert_eq!(g.gate_count(), 10);
        let mut bits = vec![false; 45];
        bits[..29].iter_mut().for_each(|b| *b = true);
        assert_eq!(Genome::new(10, bits).unwrap().gate_count(), 78);
    }

    #[test]
    fn genome_text_roundtrip_and_errors() {
        let g: Genome = "3:100".parse().unwrap();
        assert_eq!(g.to_string(), "3:100");
        assert!(matches!("3:10".parse::<Genome>(), Err(GenomeError::Length { .. })));
        assert!(matches!("3-100".parse::<Genome>(), Err(GenomeError::Text(_))));
        assert!(matches!("3:1a0".parse::<Genome>(), Err(GenomeError::Text(_))));
        assert!(matches!("1:".parse::<Genome>(), Err(GenomeError::QubitCount(1))));
    }

    #[test]
    fn operator_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Genome::random(6, &mut rng).unwrap();
        assert_eq!(g.mutate(0.0, &mut rng), g);
        let flipped = g.mutate(1.0, &mut rng);
        assert!(flipped.bits().iter().zip(g.bits()).all(|(a, b)| a != b));
        let (a, b) = g.crossover(&g, 1.0, &mut rng);
        assert_eq!(a, g);
        assert_eq!(b, g);
        let other = Genome::random(6, &mut rng).unwrap();
        let (a, b) = g.crossover(&other, 0.0, &mut rng);
        assert_eq!((a, b), (g, other));
    }

    #[test]
    fn crossover_preserves_bit_multiset_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = Genome::random(5, &mut rng).unwrap();
            let b = Genome::random(5, &mut rng).unwrap();
            let (c, d) = a.crossover(&b, 1.0, &mut rng);
            for k in 0..a.len() {
                let mut src = [a.bits()[k], b.bits()[k]];
                let mut dst = [c.bits()[k], d.bits()[k]];
                src.sort();
                dst.sort();
                assert_eq!(src, dst);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn genome() -> impl Strategy<Value = Genome> {
            (2usize..=10).prop_flat_map(|n| {
                proptest::collection::vec(any::<bool>(), pair_count(n))
                    .prop_map(move |bits| Genome::new(n, bits).unwrap())
            })
        }

        proptest! {
            #[test]
            fn decoded_length_matches_gate_count(g in genome()) {
                let c = g.decode().unwrap();
                prop_assert_eq!(c.gates.len(), g.gate_count());
                prop_assert_eq!(c.n_params - g.n_qubits(), g.popcount());
                // Every set bit yields CNOT(i -> j) then RY on j.
                for w in c.gates[2 * g.n_qubits()..].chunks(2) {
                    prop_assert_eq!(w[0].kind, GateKind::Cnot);
                    prop_assert_eq!(w[1].kind, GateKind::Ry);
                    prop_assert_eq!(w[1].qubits[0], w[0].qubits[1]);
                    prop_assert!(w[0].qubits[0] < w[0].qubits[1]);
                }
            }

            #[test]
            fn decode_is_injective(a in genome(), b in genome()) {
                if a.n_qubits() == b.n_qubits() && a != b {
                    prop_assert_ne!(a.decode().unwrap().gates, b.decode().unwrap().gates);
                }
            }

            #[test]
            fn text_form_roundtrips(g in genome()) {
                prop_assert_eq!(g.to_string().parse::<Genome>().unwrap(), g);
            }
        }
    }
}
