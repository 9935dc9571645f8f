use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rwenas::commands::{self, CliError};
use rwenas::config::RunConfig;

#[derive(Parser)]
#[command(name = "rwenas", version, about = "Architecture search with random-weight evaluation")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation threads
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run NSGA-II and write the generation log and final front
    Search,
    /// Evaluate one genome and print its report as JSON
    Eval { genome: String },
    /// Correlate estimators with a benchmark table across searches
    Ablate {
        /// `genome,accuracy` CSV
        #[arg(long)]
        table: Option<PathBuf>,
        /// Comma-separated estimator names
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
    },
    /// Print the decoded graph, FLOPs and parameters of a genome
    Describe { genome: String },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.resolve();
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Command::Ablate { table, estimators } = &cli.command {
        if table.is_some() {
            cfg.table = table.clone();
        }
        if let Some(e) = estimators {
            cfg.ablation.estimators = e.clone();
        }
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let mut stdout = std::io::stdout().lock();
    let print = |out: &mut dyn Write, text: &str| match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Runtime(e.to_string())),
        _ => Ok(()),
    };
    match &cli.command {
        Command::Search => {
            let dir = cfg.out.clone().ok_or_else(|| CliError::Usage("search needs --out".into()))?;
            let start = Instant::now();
            let outputs = commands::search(&cfg)?;
            outputs.write_to(&dir)?;
            eprintln!("search finished in {:.1} s", start.elapsed().as_secs_f64());
            print(&mut stdout, outputs.front_csv.trim_end())
        }
        Command::Eval { genome } => {
            let report = commands::eval(&cfg, genome)?;
            let json = commands::report_json(&report);
            if let Some(dir) = &cfg.out {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
                std::fs::write(dir.join("report.json"), format!("{json}\n"))
                    .and_then(|_| std::fs::write(dir.join("config.toml"), cfg.to_toml()))
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
            }
            eprintln!("evaluated in {:.2} s", report.wall_seconds.unwrap_or(0.0));
            print(&mut stdout, &json)
        }
        Command::Ablate { .. } => {
            let outputs = commands::ablate(&cfg)?;
            match &cfg.out {
                Some(dir) => {
                    outputs.write_to(dir)?;
                    print(&mut stdout, outputs.summary_csv.trim_end())
                }
                None => print(&mut stdout, outputs.trace_csv.trim_end()),
            }
        }
        Command::Describe { genome } => print(&mut stdout, &commands::describe(&cfg, genome)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
