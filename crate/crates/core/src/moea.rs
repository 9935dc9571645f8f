//! NSGA-II over genomes with two minimized objectives.
//!
//! Objective 0 is the error estimate, objective 1 the cost in millions of
//! MACs. Each unique genome is evaluated once per run, with a seed derived
//! from the run seed and the genome itself; repeats are served from a cache.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::genome::{Genome, SearchSpace};
use crate::rwe::EvalReport;

/// Number of objectives handled by the search.
pub const OBJECTIVES: usize = 2;

pub type ObjectiveVector = [f64; OBJECTIVES];

/// `a` dominates `b`: no worse everywhere, strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

/// Fast non-dominated sort. Returns fronts of indices; front 0 is the
/// non-dominated set. Indices inside each front are ascending.
pub fn nondominated_sort<O: AsRef<[f64]>>(points: &[O]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for p in 0..n {
        for q in p + 1..n {
            let (a, b) = (points[p].as_ref(), points[q].as_ref());
            if dominates(a, b) {
                dominated_by_me[p].push(q);
                domination_count[q] += 1;
            } else if dominates(b, a) {
                dominated_by_me[q].push(p);
                domination_count[p] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &p in &current {
            for &q in &dominated_by_me[p] {
                domination_count[q] -= 1;
                if domination_count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(core::mem::replace(&mut current, next));
    }
    fronts
}

/// Crowding distance of each member of one front (same order as `front`).
///
/// Per objective the members are stably sorted by value; the two extremes get
/// `+inf` and interior members add `(next - prev) / (max - min)`. An objective
/// with `max == min` adds nothing to interior members.
pub fn crowding_distance<O: AsRef<[f64]>>(front: &[O]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let m = front[0].as_ref().len();
    let mut distance = vec![0.0f64; n];
    let mut order: Vec<usize> = (0..n).collect();
    for obj in 0..m {
        let value = |i: usize| front[i].as_ref()[obj];
        order.sort_by(|&a, &b| value(a).partial_cmp(&value(b)).unwrap_or(Ordering::Equal));
        let (lo, hi) = (value(order[0]), value(order[n - 1]));
        distance[order[0]] = f64::INFINITY;
        distance[order[n - 1]] = f64::INFINITY;
        let span = hi - lo;
        if span <= 0.0 {
            continue;
        }
        for k in 1..n - 1 {
            let i = order[k];
            distance[i] += (value(order[k + 1]) - value(order[k - 1])) / span;
        }
    }
    distance
}

/// Area dominated by `points` and bounded by `reference` (both objectives
/// minimized). Points not strictly better than the reference in both
/// objectives contribute nothing.
pub fn hypervolume_2d(points: &[ObjectiveVector], reference: ObjectiveVector) -> f64 {
    let mut pts: Vec<ObjectiveVector> =
        points.iter().copied().filter(|p| p[0] < reference[0] && p[1] < reference[1]).collect();
    pts.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap_or(Ordering::Equal).then(a[1].partial_cmp(&b[1]).unwrap_or(Ordering::Equal)));
    let mut volume = 0.0;
    let mut best_f2 = reference[1];
    for p in &pts {
        if p[1] >= best_f2 {
            continue;
        }
        volume += (reference[0] - p[0]) * (best_f2 - p[1]);
        best_f2 = p[1];
    }
    volume
}

/// Outcome of evaluating one genome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub objectives: ObjectiveVector,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub message: String,
}

impl fmt::Display for EvalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl core::error::Error for EvalFailure {}

/// Scores one genome. Implementations must be deterministic in `(genome, seed)`.
pub trait Evaluate: Sync {
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<Evaluation, EvalFailure>;
}

impl<F> Evaluate for F
where
    F: Fn(&Genome, u64) -> Result<Evaluation, EvalFailure> + Sync,
{
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<Evaluation, EvalFailure> {
        self(genome, seed)
    }
}

/// Runs a batch of evaluations. Results must be returned in job order.
pub trait Dispatch {
    fn evaluate_all<E: Evaluate + ?Sized>(&self, evaluator: &E, jobs: &[(Genome, u64)]) -> Vec<Result<Evaluation, EvalFailure>>;
}

/// Evaluates jobs one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Dispatch for Sequential {
    fn evaluate_all<E: Evaluate + ?Sized>(&self, evaluator: &E, jobs: &[(Genome, u64)]) -> Vec<Result<Evaluation, EvalFailure>> {
        jobs.iter().map(|(g, seed)| evaluator.evaluate(g, *seed)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Genome,
    pub objectives: ObjectiveVector,
    /// Front index within the set it was last ranked in.
    pub rank: usize,
    pub crowding: f64,
    pub eval_seed: u64,
    /// Evaluation failed; objectives are the worst-case placeholder.
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub pop_size: usize,
    pub max_gen: usize,
    pub crossover_prob: f64,
    pub mutation_eta: f64,
    /// Per-gene mutation probability; `None` means `1 / genome length`.
    pub mutation_prob: Option<f64>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { pop_size: 20, max_gen: 30, crossover_prob: 0.9, mutation_eta: 20.0, mutation_prob: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    /// Parents plus offspring (the initial population for generation 0),
    /// ranked together.
    pub union: Vec<Individual>,
    /// Survivors carried into the next generation.
    pub population: Vec<Individual>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub generations: Vec<GenerationRecord>,
    /// Unique, successfully evaluated members of the final first front.
    pub front: Vec<Individual>,
    /// Every unique genome evaluated, in first-evaluation order.
    pub evaluations: Vec<(Genome, Evaluation)>,
}

/// Binary tournament: draw two distinct members; lower rank wins, then larger
/// crowding distance, then a fair coin.
pub fn binary_tournament<R: Rng + ?Sized>(pop: &[Individual], rng: &mut R) -> usize {
    assert!(!pop.is_empty());
    if pop.len() == 1 {
        return 0;
    }
    let a = rng.random_range(0..pop.len());
    let mut b = rng.random_range(0..pop.len() - 1);
    if b >= a {
        b += 1;
    }
    if tournament_winner(&pop[a], &pop[b], rng) { a } else { b }
}

/// True when `a` beats `b`.
fn tournament_winner<R: Rng + ?Sized>(a: &Individual, b: &Individual, rng: &mut R) -> bool {
    match a.rank.cmp(&b.rank) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => match a.crowding.partial_cmp(&b.crowding) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Less) => false,
            _ => rng.random::<bool>(),
        },
    }
}

/// Assigns rank and crowding distance to every member of `set`.
pub fn rank_and_crowd(set: &mut [Individual]) -> Vec<Vec<usize>> {
    let objs: Vec<ObjectiveVector> = set.iter().map(|i| i.objectives).collect();
    let fronts = nondominated_sort(&objs);
    for (rank, front) in fronts.iter().enumerate() {
        let pts: Vec<ObjectiveVector> = front.iter().map(|&i| objs[i]).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&pts)) {
            set[i].rank = rank;
            set[i].crowding = d;
        }
    }
    fronts
}

/// Picks `size` survivors from a ranked `union`: duplicate genomes are set
/// aside, whole fronts are admitted while they fit, and the last admitted
/// front is truncated by descending crowding distance. If there are fewer
/// unique genomes than `size`, the set-aside duplicates fill the remainder.
pub fn environmental_selection(union: &[Individual], size: usize) -> Vec<Individual> {
    let mut seen = BTreeMap::new();
    let mut unique = Vec::new();
    let mut duplicates = Vec::new();
    for (i, ind) in union.iter().enumerate() {
        if seen.insert(&ind.genome, i).is_none() {
            unique.push(ind.clone());
        } else {
            duplicates.push(ind.clone());
        }
    }
    let fronts = rank_and_crowd(&mut unique);
    let mut chosen = Vec::with_capacity(size);
    for front in fronts {
        if chosen.len() + front.len() <= size {
            chosen.extend(front.iter().map(|&i| unique[i].clone()));
        } else {
            let mut rest = front;
            // stable: equal crowding keeps index order
            rest.sort_by(|&a, &b| unique[b].crowding.partial_cmp(&unique[a].crowding).unwrap_or(Ordering::Equal));
            let room = size - chosen.len();
            chosen.extend(rest[..room].iter().map(|&i| unique[i].clone()));
        }
        if chosen.len() == size {
            break;
        }
    }
    for dup in duplicates {
        if chosen.len() == size {
            break;
        }
        chosen.push(dup);
    }
    chosen
}

struct Cache {
    entries: BTreeMap<Genome, (Result<Evaluation, EvalFailure>, u64)>,
    order: Vec<Genome>,
    worst_cost: f64,
}

impl Cache {
    fn fill<E: Evaluate + ?Sized, D: Dispatch>(&mut self, genomes: &[Genome], run_seed: u64, evaluator: &E, dispatch: &D) {
        let mut jobs = Vec::new();
        for g in genomes {
            if !self.entries.contains_key(g) && !jobs.iter().any(|(j, _): &(Genome, u64)| j == g) {
                jobs.push((g.clone(), g.stable_hash(run_seed)));
            }
        }
        let results = dispatch.evaluate_all(evaluator, &jobs);
        assert_eq!(results.len(), jobs.len(), "dispatcher dropped jobs");
        for ((g, seed), result) in jobs.into_iter().zip(results) {
            let result = result.and_then(|e| {
                if e.objectives.iter().all(|v| v.is_finite()) {
                    Ok(e)
                } else {
                    Err(EvalFailure { message: String::from("non-finite objectives") })
                }
            });
            if let Ok(e) = &result {
                self.worst_cost = self.worst_cost.max(e.objectives[1]);
            }
            self.order.push(g.clone());
            self.entries.insert(g, (result, seed));
        }
    }

    fn individual(&self, genome: &Genome) -> Individual {
        let (result, seed) = &self.entries[genome];
        let (objectives, failed) = match result {
            Ok(e) => (e.objectives, false),
            Err(_) => ([1.0, self.worst_cost], true),
        };
        Individual { genome: genome.clone(), objectives, rank: 0, crowding: 0.0, eval_seed: *seed, failed }
    }
}

/// Produces `count` offspring by tournament selection, two-point crossover
/// and polynomial mutation (with repair where the space requires it).
fn make_offspring<R: Rng + ?Sized>(space: &SearchSpace, cfg: &SearchConfig, pop: &[Individual], count: usize, rng: &mut R) -> Vec<Genome> {
    let p_m = cfg.mutation_prob.unwrap_or(1.0 / space.len().max(1) as f64);
    let mut children = Vec::with_capacity(count + 1);
    while children.len() < count {
        let a = &pop[binary_tournament(pop, rng)].genome;
        let b = &pop[binary_tournament(pop, rng)].genome;
        let (c1, c2) = if rng.random::<f64>() < cfg.crossover_prob {
            space.two_point_crossover(a, b, rng).expect("parents share the space")
        } else {
            (a.clone(), b.clone())
        };
        for child in [c1, c2] {
            if children.len() < count {
                children.push(space.polynomial_mutation(&child, cfg.mutation_eta, p_m, rng));
            }
        }
    }
    children
}

/// Runs the generational loop and returns the per-generation archive and the
/// final front.
pub fn run_search<E: Evaluate + ?Sized, D: Dispatch>(
    space: &SearchSpace,
    cfg: &SearchConfig,
    evaluator: &E,
    dispatch: &D,
) -> SearchResult {
    assert!(cfg.pop_size >= 2, "population needs at least two members");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = Cache { entries: BTreeMap::new(), order: Vec::new(), worst_cost: 0.0 };

    let initial: Vec<Genome> = (0..cfg.pop_size).map(|_| space.sample_random(&mut rng)).collect();
    cache.fill(&initial, cfg.seed, evaluator, dispatch);
    let mut pop: Vec<Individual> = initial.iter().map(|g| cache.individual(g)).collect();
    rank_and_crowd(&mut pop);
    let mut generations = vec![GenerationRecord { generation: 0, union: pop.clone(), population: pop.clone() }];

    for generation in 1..=cfg.max_gen {
        let offspring = make_offspring(space, cfg, &pop, cfg.pop_size, &mut rng);
        cache.fill(&offspring, cfg.seed, evaluator, dispatch);
        let mut union: Vec<Individual> = pop.iter().map(|i| cache.individual(&i.genome)).collect();
        union.extend(offspring.iter().map(|g| cache.individual(g)));
        let survivors = environmental_selection(&union, cfg.pop_size);
        rank_and_crowd(&mut union);
        generations.push(GenerationRecord { generation, union, population: survivors.clone() });
        pop = survivors;
    }

    let mut front: Vec<Individual> = Vec::new();
    for ind in pop.iter().filter(|i| i.rank == 0 && !i.failed) {
        if !front.iter().any(|f| f.genome == ind.genome) {
            front.push(ind.clone());
        }
    }
    front.sort_by(|a, b| a.objectives[0].partial_cmp(&b.objectives[0]).unwrap_or(Ordering::Equal).then(a.genome.cmp(&b.genome)));
    let evaluations = cache
        .order
        .iter()
        .filter_map(|g| cache.entries[g].0.as_ref().ok().map(|e| (g.clone(), e.clone())))
        .collect();
    SearchResult { generations, front, evaluations }
}
