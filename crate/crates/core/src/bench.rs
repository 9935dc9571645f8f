//! Benchmark-table adapter and the correlation ablation.
//!
//! An ablation drives the search with one estimator at a time and, at every
//! generation, rank-correlates the estimator's scores with table accuracies
//! over the union of parents and offspring.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::genome::{Genome, SpaceKind, SearchSpace};
use crate::moea::{run_search, Dispatch, EvalFailure, Evaluation, SearchConfig};
use crate::netgraph::{decode, ScaleConfig};
use crate::rwe::{evaluate_rwe, RweConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrelationError {
    LengthMismatch,
    TooShort,
    /// One of the inputs has all-equal ranks.
    ZeroVariance,
}

impl fmt::Display for CorrelationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorrelationError::LengthMismatch => f.write_str("inputs differ in length"),
            CorrelationError::TooShort => f.write_str("correlation needs at least two points"),
            CorrelationError::ZeroVariance => f.write_str("correlation undefined: constant ranks"),
        }
    }
}

impl core::error::Error for CorrelationError {}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = alloc::vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let mean = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, CorrelationError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(CorrelationError::ZeroVariance);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, CorrelationError> {
    if x.len() != y.len() {
        return Err(CorrelationError::LengthMismatch);
    }
    if x.len() < 2 {
        return Err(CorrelationError::TooShort);
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq)]
pub enum BenchError {
    Missing(String),
    Accuracy { genome: String, value: f64 },
    Space { genome: String, detail: String },
    Empty,
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::Missing(g) => write!(f, "no table entry for {g}"),
            BenchError::Accuracy { genome, value } => write!(f, "accuracy {value} for {genome} is outside [0, 1]"),
            BenchError::Space { genome, detail } => write!(f, "{genome}: {detail}"),
            BenchError::Empty => f.write_str("benchmark table is empty"),
        }
    }
}

impl core::error::Error for BenchError {}

/// Anything that can report a ground-truth accuracy for a genome.
pub trait AccuracySource: Sync {
    fn accuracy(&self, genome: &Genome) -> Result<f64, BenchError>;
}

/// Genome to accuracy lookup over one search space.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkTable {
    space: SearchSpace,
    entries: BTreeMap<Genome, f64>,
}

impl BenchmarkTable {
    pub fn new(space: SearchSpace) -> Self {
        BenchmarkTable { space, entries: BTreeMap::new() }
    }

    /// Builds a table, validating every genome against `space`.
    pub fn from_entries(space: SearchSpace, entries: impl IntoIterator<Item = (Genome, f64)>) -> Result<Self, BenchError> {
        let mut table = BenchmarkTable::new(space);
        for (g, acc) in entries {
            table.insert(g, acc)?;
        }
        if table.is_empty() {
            return Err(BenchError::Empty);
        }
        Ok(table)
    }

    pub fn insert(&mut self, genome: Genome, accuracy: f64) -> Result<(), BenchError> {
        self.space
            .validate(&genome)
            .map_err(|e| BenchError::Space { genome: format!("{genome}"), detail: format!("{e}") })?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(BenchError::Accuracy { genome: format!("{genome}"), value: accuracy });
        }
        self.entries.insert(genome, accuracy);
        Ok(())
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn kind(&self) -> SpaceKind {
        self.space.kind()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, genome: &Genome) -> Option<f64> {
        self.entries.get(genome).copied()
    }

    /// Entries in canonical genome order.
    pub fn iter(&self) -> impl Iterator<Item = (&Genome, f64)> {
        self.entries.iter().map(|(g, a)| (g, *a))
    }
}

impl AccuracySource for BenchmarkTable {
    fn accuracy(&self, genome: &Genome) -> Result<f64, BenchError> {
        self.get(genome).ok_or_else(|| BenchError::Missing(format!("{genome}")))
    }
}

/// Scores a genome; higher means predicted better.
pub trait Estimator: Sync {
    fn name(&self) -> &str;
    fn score(&self, genome: &Genome, seed: u64) -> Result<f64, EvalFailure>;
}

fn failure(e: impl fmt::Display) -> EvalFailure {
    EvalFailure { message: format!("{e}") }
}

/// The table accuracy itself (or its negation).
pub struct TableEstimator<'a, S: AccuracySource + ?Sized> {
    pub source: &'a S,
    pub negate: bool,
}

impl<S: AccuracySource + ?Sized> Estimator for TableEstimator<'_, S> {
    fn name(&self) -> &str {
        if self.negate {
            "neg_table"
        } else {
            "table"
        }
    }

    fn score(&self, genome: &Genome, _seed: u64) -> Result<f64, EvalFailure> {
        let a = self.source.accuracy(genome).map_err(failure)?;
        Ok(if self.negate { -a } else { a })
    }
}

/// Uniform noise in [0, 1), reproducible from the evaluation seed.
pub struct NoiseEstimator;

impl Estimator for NoiseEstimator {
    fn name(&self) -> &str {
        "noise"
    }

    fn score(&self, _genome: &Genome, seed: u64) -> Result<f64, EvalFailure> {
        Ok(ChaCha8Rng::seed_from_u64(seed).random::<f64>())
    }
}

/// Negated multiply-accumulate count at `scale`.
pub struct NegFlopsEstimator {
    pub scale: ScaleConfig,
}

impl Estimator for NegFlopsEstimator {
    fn name(&self) -> &str {
        "neg_flops"
    }

    fn score(&self, genome: &Genome, _seed: u64) -> Result<f64, EvalFailure> {
        Ok(-(decode(genome, &self.scale).map_err(failure)?.count_flops() as f64))
    }
}

/// Negated parameter count at `scale`.
pub struct NegParamsEstimator {
    pub scale: ScaleConfig,
}

impl Estimator for NegParamsEstimator {
    fn name(&self) -> &str {
        "neg_params"
    }

    fn score(&self, genome: &Genome, _seed: u64) -> Result<f64, EvalFailure> {
        Ok(-(decode(genome, &self.scale).map_err(failure)?.count_params() as f64))
    }
}

/// Negated random-weight evaluation error.
pub struct RweEstimator<'a> {
    pub scale: ScaleConfig,
    pub data: &'a ImageDataset,
    pub config: RweConfig,
}

impl Estimator for RweEstimator<'_> {
    fn name(&self) -> &str {
        "rwe"
    }

    fn score(&self, genome: &Genome, seed: u64) -> Result<f64, EvalFailure> {
        let cfg = RweConfig { seed, ..self.config.clone() };
        Ok(-evaluate_rwe(genome, &self.scale, self.data, &cfg).map_err(failure)?.rwe_error)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTrace {
    pub estimator: String,
    pub trial: usize,
    pub seed: u64,
    /// One entry per generation; `None` where the correlation is undefined.
    pub rho: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub search: SearchConfig,
    pub trials: usize,
    /// Scale used for the cost objective during the ablation searches.
    pub flops_scale: ScaleConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            search: SearchConfig { max_gen: 20, ..SearchConfig::default() },
            trials: 5,
            flops_scale: ScaleConfig::micro_search(),
        }
    }
}

/// Mean and population standard deviation of each generation's defined
/// correlations across `traces`.
pub fn summarize(traces: &[&CorrelationTrace]) -> Vec<Option<(f64, f64)>> {
    let gens = traces.iter().map(|t| t.rho.len()).max().unwrap_or(0);
    (0..gens)
        .map(|g| {
            let vals: Vec<f64> = traces.iter().filter_map(|t| t.rho.get(g).copied().flatten()).collect();
            if vals.is_empty() {
                return None;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Some((mean, libm::sqrt(var)))
        })
        .collect()
}

/// Runs `cfg.trials` searches per estimator (trial `t` uses seed
/// `cfg.search.seed + t`) and records the per-generation rank correlation
/// between estimator scores and `source` accuracies over each generation's
/// parent and offspring union (unique genomes, failed evaluations skipped).
pub fn run_ablation<D: Dispatch>(
    space: &SearchSpace,
    cfg: &AblationConfig,
    estimators: &[&dyn Estimator],
    source: &dyn AccuracySource,
    dispatch: &D,
) -> Result<Vec<CorrelationTrace>, BenchError> {
    let mut traces = Vec::new();
    for est in estimators {
        let evaluator = |g: &Genome, seed: u64| -> Result<Evaluation, EvalFailure> {
            let score = est.score(g, seed)?;
            let flops = decode(g, &cfg.flops_scale).map_err(failure)?.count_flops();
            Ok(Evaluation { objectives: [-score, flops as f64 / 1e6], report: None })
        };
        for trial in 0..cfg.trials {
            let seed = cfg.search.seed.wrapping_add(trial as u64);
            let search = SearchConfig { seed, ..cfg.search.clone() };
            let result = run_search(space, &search, &evaluator, dispatch);
            let mut rho = Vec::with_capacity(result.generations.len());
            for record in &result.generations {
                let mut seen = BTreeMap::new();
                for ind in record.union.iter().filter(|i| !i.failed) {
                    seen.entry(&ind.genome).or_insert(-ind.objectives[0]);
                }
                let mut scores = Vec::with_capacity(seen.len());
                let mut accs = Vec::with_capacity(seen.len());
                for (g, s) in seen {
                    scores.push(s);
                    accs.push(source.accuracy(g)?);
                }
                rho.push(spearman(&scores, &accs).ok());
            }
            traces.push(CorrelationTrace { estimator: String::from(est.name()), trial, seed, rho });
        }
    }
    Ok(traces)
}
