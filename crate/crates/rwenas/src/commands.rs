//! The four subcommands, as functions returning their output files' contents.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rwenas_core::bench::{
    run_ablation, summarize, AblationConfig, AccuracySource, BenchmarkTable, CorrelationTrace, Estimator,
    NegFlopsEstimator, NegParamsEstimator, NoiseEstimator, RweEstimator, TableEstimator,
};
use rwenas_core::data::ImageDataset;
use rwenas_core::genome::Genome;
use rwenas_core::moea::{run_search, EvalFailure, Evaluate, Evaluation, SearchConfig, SearchResult};
use rwenas_core::netgraph::{decode, ScaleConfig};
use rwenas_core::rwe::{evaluate_rwe, EvalReport, RweConfig};
use serde::Serialize;

use crate::config::{Backend, RunConfig};
use crate::pool::WorkerPool;
use crate::table::load_table;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses and validates a genome against the configured space.
pub fn parse_genome(cfg: &RunConfig, text: &str) -> Result<Genome, CliError> {
    let genome: Genome = text.parse().map_err(|e| CliError::Usage(format!("genome `{text}`: {e}")))?;
    cfg.search_space().validate(&genome).map_err(|e| CliError::Usage(format!("genome `{text}`: {e}")))?;
    Ok(genome)
}

/// Random-weight evaluation with objectives `[rwe_error, MFLOPs]`. The
/// evaluation seed becomes the backbone seed; wall time is recorded in the
/// report.
pub struct RweEvaluator<'a> {
    pub scale: ScaleConfig,
    pub data: &'a ImageDataset,
    pub config: RweConfig,
}

impl RweEvaluator<'_> {
    pub fn report(&self, genome: &Genome, seed: u64) -> Result<EvalReport, EvalFailure> {
        let start = Instant::now();
        let cfg = RweConfig { seed, ..self.config.clone() };
        let mut report = evaluate_rwe(genome, &self.scale, self.data, &cfg)
            .map_err(|e| EvalFailure { message: e.to_string() })?;
        report.wall_seconds = Some(start.elapsed().as_secs_f64());
        Ok(report)
    }
}

impl Evaluate for RweEvaluator<'_> {
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<Evaluation, EvalFailure> {
        let report = self.report(genome, seed)?;
        Ok(Evaluation { objectives: [report.rwe_error, report.flops as f64 / 1e6], report: Some(report) })
    }
}

/// Table lookup with objectives `[1 - accuracy, MFLOPs]`.
pub struct TableEvaluator<'a> {
    pub scale: ScaleConfig,
    pub table: &'a BenchmarkTable,
}

impl Evaluate for TableEvaluator<'_> {
    fn evaluate(&self, genome: &Genome, _seed: u64) -> Result<Evaluation, EvalFailure> {
        let fail = |e: &dyn std::fmt::Display| EvalFailure { message: e.to_string() };
        let acc = self.table.accuracy(genome).map_err(|e| fail(&e))?;
        let flops = decode(genome, &self.scale).map_err(|e| fail(&e))?.count_flops();
        Ok(Evaluation { objectives: [1.0 - acc, flops as f64 / 1e6], report: None })
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<ImageDataset, CliError> {
    cfg.data.load().map_err(|e| CliError::Runtime(format!("data: {e}")))
}

pub fn load_configured_table(cfg: &RunConfig) -> Result<BenchmarkTable, CliError> {
    let path = cfg.table.as_deref().ok_or_else(|| CliError::Usage("no benchmark table given (`table` or --table)".into()))?;
    load_table(path, &cfg.search_space()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn pool(cfg: &RunConfig) -> Result<WorkerPool, CliError> {
    WorkerPool::new(cfg.workers).map_err(runtime)
}

/// Files written by `search`. All but `timing_csv` are reproducible
/// byte-for-byte from the configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchOutputs {
    pub config_toml: String,
    pub generations_jsonl: String,
    pub front_csv: String,
    pub evaluations_jsonl: String,
    pub timing_csv: String,
}

impl SearchOutputs {
    pub const PRIMARY: [&'static str; 4] = ["config.toml", "generations.jsonl", "front.csv", "evaluations.jsonl"];

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        for (name, body) in [
            ("config.toml", &self.config_toml),
            ("generations.jsonl", &self.generations_jsonl),
            ("front.csv", &self.front_csv),
            ("evaluations.jsonl", &self.evaluations_jsonl),
            ("timing.csv", &self.timing_csv),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

pub fn search(cfg: &RunConfig) -> Result<SearchOutputs, CliError> {
    let space = cfg.search_space();
    let scale = cfg.scale();
    let search_cfg = SearchConfig { seed: cfg.seed, ..cfg.search.clone() };
    let pool = pool(cfg)?;
    let (result, error_column) = match cfg.backend {
        Backend::Rwe => {
            let data = load_data(cfg)?;
            let evaluator = RweEvaluator { scale, data: &data, config: cfg.rwe.clone() };
            (run_search(&space, &search_cfg, &evaluator, &pool), "rwe_error")
        }
        Backend::Table => {
            let table = load_configured_table(cfg)?;
            let evaluator = TableEvaluator { scale, table: &table };
            (run_search(&space, &search_cfg, &evaluator, &pool), "table_error")
        }
    };
    Ok(search_outputs(cfg, &result, error_column))
}

fn search_outputs(cfg: &RunConfig, result: &SearchResult, error_column: &str) -> SearchOutputs {
    let mut front_csv = format!("genome,{error_column},flops_m\n");
    for ind in &result.front {
        let _ = writeln!(front_csv, "\"{}\",{},{}", ind.genome, ind.objectives[0], ind.objectives[1]);
    }
    let mut timing_csv = String::from("genome,wall_seconds\n");
    let mut evaluations = Vec::with_capacity(result.evaluations.len());
    for (genome, eval) in &result.evaluations {
        let mut eval = eval.clone();
        if let Some(report) = eval.report.as_mut() {
            if let Some(t) = report.wall_seconds.take() {
                let _ = writeln!(timing_csv, "\"{genome}\",{t}");
            }
        }
        evaluations.push(eval);
    }
    SearchOutputs {
        config_toml: cfg.to_toml(),
        generations_jsonl: jsonl(&result.generations),
        front_csv,
        evaluations_jsonl: jsonl(&evaluations),
        timing_csv,
    }
}

/// Evaluates one genome with the seed a search under `cfg.seed` would use.
/// Returns the report with `wall_seconds` filled.
pub fn eval(cfg: &RunConfig, genome_text: &str) -> Result<EvalReport, CliError> {
    let genome = parse_genome(cfg, genome_text)?;
    let data = load_data(cfg)?;
    let evaluator = RweEvaluator { scale: cfg.scale(), data: &data, config: cfg.rwe.clone() };
    evaluator.report(&genome, genome.stable_hash(cfg.seed)).map_err(runtime)
}

/// Report JSON without the wall-clock field.
pub fn report_json(report: &EvalReport) -> String {
    let report = EvalReport { wall_seconds: None, ..report.clone() };
    serde_json::to_string_pretty(&report).expect("plain data serializes")
}

pub fn describe(cfg: &RunConfig, genome_text: &str) -> Result<String, CliError> {
    let genome = parse_genome(cfg, genome_text)?;
    let scale = cfg.scale();
    let net = decode(&genome, &scale).map_err(|e| CliError::Usage(format!("genome `{genome_text}`: {e}")))?;
    let nodes: Vec<serde_json::Value> = net
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            serde_json::json!({
                "id": i,
                "op": n.op,
                "inputs": n.inputs,
                "shape": n.shape,
                "macs": net.node_macs(i),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "genome": genome,
        "scale": scale,
        "flops": net.count_flops(),
        "params": net.count_params(),
        "feature_dim": net.feature_dim(),
        "output": net.output(),
        "layers": net.layers(),
        "nodes": nodes,
    });
    Ok(serde_json::to_string_pretty(&doc).expect("plain data serializes"))
}

pub const ESTIMATORS: [&str; 6] = ["table", "neg_table", "noise", "neg_flops", "neg_params", "rwe"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationOutputs {
    pub config_toml: String,
    /// `estimator,trial,generation,rho`; `rho` is empty where undefined.
    pub trace_csv: String,
    /// `estimator,generation,mean,std` over trials.
    pub summary_csv: String,
}

impl AblationOutputs {
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        for (name, body) in
            [("config.toml", &self.config_toml), ("trace.csv", &self.trace_csv), ("summary.csv", &self.summary_csv)]
        {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

/// The ablation settings a run configuration describes.
pub fn ablation_config(cfg: &RunConfig) -> AblationConfig {
    AblationConfig {
        search: SearchConfig { seed: cfg.seed, max_gen: cfg.ablation.max_gen, ..cfg.search.clone() },
        trials: cfg.ablation.trials,
        flops_scale: cfg.scale(),
    }
}

pub fn ablate(cfg: &RunConfig) -> Result<AblationOutputs, CliError> {
    if let Some(bad) = cfg.ablation.estimators.iter().find(|e| !ESTIMATORS.contains(&e.as_str())) {
        return Err(CliError::Usage(format!("unknown estimator `{bad}` (known: {})", ESTIMATORS.join(", "))));
    }
    if cfg.ablation.estimators.is_empty() {
        return Err(CliError::Usage("no estimators given".into()));
    }
    let table = load_configured_table(cfg)?;
    let scale = cfg.scale();
    let data = if cfg.ablation.estimators.iter().any(|e| e == "rwe") { Some(load_data(cfg)?) } else { None };

    let table_est = TableEstimator { source: &table, negate: false };
    let neg_table_est = TableEstimator { source: &table, negate: true };
    let flops_est = NegFlopsEstimator { scale: scale.clone() };
    let params_est = NegParamsEstimator { scale: scale.clone() };
    let rwe_est = data.as_ref().map(|d| RweEstimator { scale: scale.clone(), data: d, config: cfg.rwe.clone() });
    let estimators: Vec<&dyn Estimator> = cfg
        .ablation
        .estimators
        .iter()
        .map(|name| -> &dyn Estimator {
            match name.as_str() {
                "table" => &table_est,
                "neg_table" => &neg_table_est,
                "noise" => &NoiseEstimator,
                "neg_flops" => &flops_est,
                "neg_params" => &params_est,
                _ => rwe_est.as_ref().expect("data loaded for rwe"),
            }
        })
        .collect();

    let traces =
        run_ablation(&cfg.search_space(), &ablation_config(cfg), &estimators, &table, &pool(cfg)?).map_err(runtime)?;
    Ok(ablation_outputs(cfg, &traces))
}

fn ablation_outputs(cfg: &RunConfig, traces: &[CorrelationTrace]) -> AblationOutputs {
    let mut trace_csv = String::from("estimator,trial,generation,rho\n");
    for t in traces {
        for (g, rho) in t.rho.iter().enumerate() {
            let rho = rho.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(trace_csv, "{},{},{g},{rho}", t.estimator, t.trial);
        }
    }
    let mut summary_csv = String::from("estimator,generation,mean,std\n");
    for name in &cfg.ablation.estimators {
        let mine: Vec<&CorrelationTrace> = traces.iter().filter(|t| &t.estimator == name).collect();
        for (g, stat) in summarize(&mine).into_iter().enumerate() {
            let (mean, std) = stat.map(|(m, s)| (m.to_string(), s.to_string())).unwrap_or_default();
            let _ = writeln!(summary_csv, "{name},{g},{mean},{std}");
        }
    }
    AblationOutputs { config_toml: cfg.to_toml(), trace_csv, summary_csv }
}
