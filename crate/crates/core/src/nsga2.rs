//! Bi-objective NSGA-II over circuit genomes.
//!
//! Both objectives are stored minimized: `[-accuracy, gates]`. Ties in the
//! tournament fall through rank, then crowding distance, then a seeded coin.

use std::cmp::Ordering;
use std::fmt;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{Genome, GenomeError};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error(transparent)]
    Genome(#[from] GenomeError),
}

/// Minimized objective pair. For circuit search this is `[-accuracy, gates]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objectives(pub [f64; 2]);

impl Objectives {
    pub fn new(accuracy: f64, gates: usize) -> Self {
        Objectives([-accuracy, gates as f64])
    }

    /// Worst possible circuit-search fitness for an `n`-qubit genome.
    pub fn worst(n_qubits: usize) -> Self {
        Self::new(0.0, Genome::max_gate_count(n_qubits))
    }

    pub fn accuracy(&self) -> f64 {
        -self.0[0]
    }

    pub fn gates(&self) -> usize {
        self.0[1].round() as usize
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genome: Genome,
    pub objectives: Objectives,
    pub rank: usize,
    pub crowding: f64,
}

impl Individual {
    pub fn new(genome: Genome, objectives: Objectives) -> Self {
        Self {
            genome,
            objectives,
            rank: 0,
            crowding: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub offspring_size: usize,
    pub generations: usize,
    pub p_c: f64,
    /// Per-bit flip probability; `None` means `1 / genome length`.
    pub p_m: Option<f64>,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            offspring_size: 20,
            generations: 50,
            p_c: 0.9,
            p_m: None,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        if self.population_size < 2 || self.offspring_size < 2 {
            return Err(EvolutionError::Config(format!(
                "population and offspring sizes must be at least 2, got {} and {}",
                self.population_size, self.offspring_size
            )));
        }
        let probs = [Some(self.p_c), self.p_m];
        if probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(EvolutionError::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn mutation_rate(&self, genome_len: usize) -> f64 {
        self.p_m.unwrap_or(1.0 / genome_len.max(1) as f64)
    }
}

/// `a` is no worse than `b` everywhere and strictly better somewhere.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    let mut strict = false;
    for (x, y) in a.0.iter().zip(&b.0) {
        if x > y {
            return false;
        }
        strict |= x < y;
    }
    strict
}

/// Fast non-dominated sort. Sets `rank` on every member and returns fronts
/// as index lists into `pop`.
pub fn non_dominated_sort(pop: &mut [Individual]) -> Vec<Vec<usize>> {
    let n = pop.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut counts = vec![0usize; n];
    for p in 0..n {
        for q in p + 1..n {
            if dominates(&pop[p].objectives, &pop[q].objectives) {
                dominated_by[p].push(q);
                counts[q] += 1;
            } else if dominates(&pop[q].objectives, &pop[p].objectives) {
                dominated_by[q].push(p);
                counts[p] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| counts[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &p in &current {
            pop[p].rank = fronts.len();
            for &q in &dominated_by[p] {
                counts[q] -= 1;
                if counts[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of the members `front` of `pop`.
pub fn crowding_distance(pop: &mut [Individual], front: &[usize]) {
    for &i in front {
        pop[i].crowding = 0.0;
    }
    if front.len() <= 2 {
        for &i in front {
            pop[i].crowding = f64::INFINITY;
        }
        return;
    }
    for m in 0..2 {
        let mut order = front.to_vec();
        order.sort_by(|&a, &b| pop[a].objectives.0[m].total_cmp(&pop[b].objectives.0[m]).then(a.cmp(&b)));
        let lo = pop[order[0]].objectives.0[m];
        let hi = pop[order[order.len() - 1]].objectives.0[m];
        pop[order[0]].crowding = f64::INFINITY;
        pop[order[order.len() - 1]].crowding = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in order.windows(3) {
            let gap = pop[w[2]].objectives.0[m] - pop[w[0]].objectives.0[m];
            pop[w[1]].crowding += gap / range;
        }
    }
}

/// Sort and assign crowding for the whole population.
pub fn rank_population(pop: &mut [Individual]) -> Vec<Vec<usize>> {
    let fronts = non_dominated_sort(pop);
    for f in &fronts {
        crowding_distance(pop, f);
    }
    fronts
}

/// Binary tournament: lower rank, then larger crowding, then a coin flip.
pub fn tournament<'a, R: Rng + ?Sized>(pop: &'a [Individual], rng: &mut R) -> &'a Individual {
    let a = &pop[rng.gen_range(0..pop.len())];
    let b = &pop[rng.gen_range(0..pop.len())];
    match a.rank.cmp(&b.rank).then(b.crowding.total_cmp(&a.crowding)) {
        Ordering::Less => a,
        Ordering::Greater => b,
        Ordering::Equal => {
            if rng.gen_bool(0.5) {
                a
            } else {
                b
            }
        }
    }
}

/// Order used for top-k extraction and for breaking survivor ties: higher
/// accuracy, fewer gates, then genome order.
pub fn accuracy_order(a: &Individual, b: &Individual) -> Ordering {
    a.objectives.0[0]
        .total_cmp(&b.objectives.0[0])
        .then(a.objectives.0[1].total_cmp(&b.objectives.0[1]))
        .then_with(|| a.genome.cmp(&b.genome))
}

/// The `k` most accurate members of `front`.
pub fn select_top_k(front: &[Individual], k: usize) -> Vec<Individual> {
    let mut v = front.to_vec();
    v.sort_by(accuracy_order);
    v.truncate(k);
    v
}

/// Independent seed for evaluation `index` of `generation`.
pub fn stream_seed(seed: u64, generation: usize, index: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ generation as u64) ^ index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub population: Vec<Individual>,
}

impl GenerationRecord {
    /// Rank-0 members, most accurate first.
    pub fn front(&self) -> Vec<Individual> {
        let mut f: Vec<Individual> = self.population.iter().filter(|i| i.rank == 0).cloned().collect();
        f.sort_by(accuracy_order);
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evolution {
    pub population: Vec<Individual>,
    /// One record per generation, starting with the initial population.
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
    pub failures: usize,
}

impl Evolution {
    pub fn final_front(&self) -> Vec<Individual> {
        self.history.last().map(GenerationRecord::front).unwrap_or_default()
    }
}

fn evaluate_all<E, F>(genomes: Vec<Genome>, seed: u64, generation: usize, n_qubits: usize, evaluate: &F) -> (Vec<Individual>, usize)
where
    E: fmt::Display,
    F: Fn(&Genome, u64) -> Result<Objectives, E> + Sync,
{
    let results: Vec<(Individual, bool)> = genomes
        .into_par_iter()
        .enumerate()
        .map(|(i, g)| match evaluate(&g, stream_seed(seed, generation, i)) {
            Ok(obj) if obj.is_finite() => (Individual::new(g, obj), false),
            Ok(obj) => {
                log::warn!("genome {g}: non-finite objectives {:?}, assigning worst fitness", obj.0);
                (Individual::new(g, Objectives::worst(n_qubits)), true)
            }
            Err(e) => {
                log::warn!("genome {g}: evaluation failed ({e}), assigning worst fitness");
                (Individual::new(g, Objectives::worst(n_qubits)), true)
            }
        })
        .collect();
    let failures = results.iter().filter(|r| r.1).count();
    (results.into_iter().map(|r| r.0).collect(), failures)
}

/// Keep `size` members of an already ranked population: whole fronts first,
/// the split front by crowding (ties by [`accuracy_order`], then index).
fn select_survivors(merged: Vec<Individual>, fronts: &[Vec<usize>], size: usize) -> Vec<Individual> {
    let mut keep = Vec::with_capacity(size);
    for f in fronts {
        if keep.len() + f.len() <= size {
            keep.extend_from_slice(f);
            continue;
        }
        let mut rest = f.clone();
        rest.sort_by(|&a, &b| {
            merged[b]
                .crowding
                .total_cmp(&merged[a].crowding)
                .then_with(|| accuracy_order(&merged[a], &merged[b]))
                .then(a.cmp(&b))
        });
        keep.extend_from_slice(&rest[..size - keep.len()]);
        break;
    }
    let mut mask = vec![false; merged.len()];
    for i in keep {
        mask[i] = true;
    }
    merged.into_iter().zip(mask).filter(|(_, k)| *k).map(|(i, _)| i).collect()
}

/// Run NSGA-II on `n_qubits`-qubit genomes. `evaluate` receives a genome and
/// a per-individual seed and must be deterministic in both.
pub fn evolve<E, F>(cfg: &EvolutionConfig, n_qubits: usize, evaluate: F) -> Result<Evolution, EvolutionError>
where
    E: fmt::Display,
    F: Fn(&Genome, u64) -> Result<Objectives, E> + Sync,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut initial = Vec::with_capacity(cfg.population_size);
    for _ in 0..cfg.population_size {
        initial.push(Genome::random(n_qubits, &mut rng)?);
    }
    let p_m = cfg.mutation_rate(initial[0].len());
    let (mut pop, mut failures) = evaluate_all(initial, cfg.seed, 0, n_qubits, &evaluate);
    let mut evaluations = pop.len();
    rank_population(&mut pop);
    let mut history = vec![GenerationRecord {
        generation: 0,
        population: pop.clone(),
    }];

    for generation in 1..=cfg.generations {
        let mut children = Vec::with_capacity(cfg.offspring_size + 1);
        while children.len() < cfg.offspring_size {
            let a = tournament(&pop, &mut rng);
            let b = tournament(&pop, &mut rng);
            let (c1, c2) = a.genome.crossover(&b.genome, cfg.p_c, &mut rng);
            children.push(c1.mutate(p_m, &mut rng));
            children.push(c2.mutate(p_m, &mut rng));
        }
        children.truncate(cfg.offspring_size);
        let (offspring, failed) = evaluate_all(children, cfg.seed, generation, n_qubits, &evaluate);
        failures += failed;
        evaluations += offspring.len();

        let mut merged = pop;
        merged.extend(offspring);
        let fronts = rank_population(&mut merged);
        pop = select_survivors(merged, &fronts, cfg.population_size);
        let best = pop.iter().map(|i| i.objectives.accuracy()).fold(f64::NEG_INFINITY, f64::max);
        log::info!("generation {generation}: best accuracy {best:.4}");
        history.push(GenerationRecord {
            generation,
            population: pop.clone(),
        });
    }
    Ok(Evolution {
        population: pop,
        history,
        evaluations,
        failures,
    })
}

/// Write every generation's front as
/// `generation,genome,accuracy,gates,rank,crowding`.
pub fn write_front_csv<W: Write>(mut w: W, history: &[GenerationRecord]) -> io::Result<()> {
    writeln!(w, "generation,genome,accuracy,gates,rank,crowding")?;
    for rec in history {
        for ind in rec.front() {
            writeln!(
                w,
                "{},{},{:.6},{},{},{}",
                rec.generation,
                ind.genome.bitstring(),
                ind.objectives.accuracy(),
                ind.objectives.gates(),
                ind.rank,
                ind.crowding
            )?;
        }
    }
    Ok(())
}
