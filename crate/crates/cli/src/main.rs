//! `crtsim`: simulate cluster randomised trials with missing binary outcomes,
//! analyse trial datasets and export multiple imputations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crtsim::analysis::{analyze, Method};
use crtsim::csvio::{export_imputations, read_dataset_file, write_dataset_file};
use crtsim::data::{AnalysisSpec, Arm, EffectEstimate, Scale, TrialDataset};
use crtsim::datagen::demo_trial;
use crtsim::mmi::{impute, mmi_from_stream, ImputationConfig, ImputationStream};
use crtsim::plan::PlanFile;
use crtsim::rng::SeedSpec;
use crtsim::sim::{emit_table, run_plan_with_threads, write_log, TableFormat};
use crtsim::Error;

#[derive(Parser)]
#[command(name = "crtsim", version, about = "Cluster randomised trials with missing binary outcomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo plan and write summary tables.
    Simulate(SimulateArgs),
    /// Analyse a trial dataset under complete records and/or multiple imputation.
    Analyze(AnalyzeArgs),
    /// Write completed datasets from multilevel multiple imputation.
    Impute(ImputeArgs),
    /// Write the bundled synthetic school trial.
    DemoData {
        #[arg(long, default_value = "data/demo_trial.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 2015)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

impl From<Format> for TableFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => TableFormat::Csv,
            Format::Markdown => TableFormat::Markdown,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML plan file.
    plan: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "crtsim-out")]
    out: PathBuf,
    /// Overrides the plan's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of replications.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    reps: Option<u64>,
    /// Overrides the plan's table format.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args, Clone)]
struct ImputationArgs {
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u64).range(2..))]
    imputations: u64,
    #[arg(long = "burn-in", default_value_t = 100)]
    burn_in: usize,
    #[arg(long = "thin", default_value_t = 25, value_parser = clap::value_parser!(u64).range(1..))]
    thin: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum CliStrategy {
    Cra,
    Mmi,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dataset CSV (`cluster_id,arm,y,<covariates>`).
    csv: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "CL_U-RD")]
    methods: Vec<String>,
    /// Covariates for adjusted and individual-level models.
    #[arg(long, value_delimiter = ',')]
    adjust: Vec<String>,
    /// Add intervention-by-covariate interactions (covariates are centred).
    #[arg(long)]
    interaction: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "cra")]
    strategy: Vec<CliStrategy>,
    #[arg(long, default_value_t = 0.95)]
    ci: f64,
    #[arg(long, value_enum, default_value = "markdown")]
    format: Format,
    #[command(flatten)]
    imputation: ImputationArgs,
}

#[derive(Args)]
struct ImputeArgs {
    csv: PathBuf,
    #[arg(long, default_value = "imputations")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    adjust: Vec<String>,
    #[arg(long)]
    interaction: bool,
    #[command(flatten)]
    imputation: ImputationArgs,
}

/// Failures split by exit code: 2 for bad input, 3 for runtime failures.
enum Failure {
    Input(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::UnknownScenario(_)
            | Error::UnknownCovariate(_)
            | Error::PlanInfeasible(_)
            | Error::Schema { .. }
            | Error::Invalid(_) => Failure::Input(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn threads() -> usize {
    std::env::var("CRTSIM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut file = PlanFile::load(&args.plan)?;
    if let Some(seed) = args.seed {
        file.design.master_seed = seed;
    }
    if let Some(reps) = args.reps {
        file.design.replications = reps as usize;
    }
    if let Some(f) = args.format {
        file.output.format = f.into();
    }
    let plan = file.to_plan()?;
    let output = run_plan_with_threads(&plan, threads())?;

    std::fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let table_path = args.out.join(file.output.table_file());
    let table = emit_table(&output.summary, file.output.format);
    std::fs::write(&table_path, &table).map_err(|e| io_failure(&table_path, e))?;
    let log_path = args.out.join(&file.output.log);
    let log = std::fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    write_log(&output.records, std::io::BufWriter::new(log))?;
    let echo_path = args.out.join("resolved_plan.toml");
    std::fs::write(&echo_path, file.resolved(&plan).to_toml()).map_err(|e| io_failure(&echo_path, e))?;
    print!("{table}");
    Ok(())
}

fn imputation_config(args: &ImputationArgs, adjust: &[String], interaction: bool) -> ImputationConfig {
    ImputationConfig {
        n_imputations: args.imputations as usize,
        burn_in: args.burn_in,
        thinning: args.thin as usize,
        include_interaction: interaction,
        adjust_for: adjust.to_vec(),
        seed: SeedSpec::new(args.seed, 0),
        ..Default::default()
    }
}

fn display_scale(scale: Scale) -> &'static str {
    match scale {
        Scale::Rd => "RD",
        Scale::LogRr => "RR",
        Scale::LogOrConditional => "OR (conditional)",
        Scale::LogOrMarginal => "OR (marginal)",
    }
}

struct Row {
    method: Method,
    strategy: &'static str,
    outcome: Result<EffectEstimate, String>,
    n: [usize; 2],
    clusters: [usize; 2],
}

fn analysis_rows(args: &AnalyzeArgs, data: &TrialDataset) -> Result<Vec<Row>, Failure> {
    let methods: Vec<Method> = args.methods.iter().map(|m| m.parse()).collect::<Result<_, Error>>()?;
    let names: Vec<&str> = args.adjust.iter().map(String::as_str).collect();
    let mut spec = AnalysisSpec::adjusted(&names);
    if args.interaction {
        spec = spec.with_interaction();
    }
    spec.check()?;
    for name in &args.adjust {
        data.covariate_index(name)?;
    }
    if let Some(m) = methods.iter().find(|m| m.needs_covariates()) {
        if args.adjust.is_empty() {
            return Err(Failure::Input(format!("{m} needs at least one --adjust covariate")));
        }
    }
    if !(args.ci > 0.0 && args.ci < 1.0) {
        return Err(Failure::Input(format!("--ci must lie strictly between 0 and 1, got {}", args.ci)));
    }

    let observed = data.observed_per_arm();
    let retained = data.nonempty_clusters_per_arm();
    let total = [Arm::Control, Arm::Intervention].map(|a| data.clusters_in(a).map(|c| c.len()).sum::<usize>());
    let all_clusters = [Arm::Control, Arm::Intervention].map(|a| data.clusters_in(a).count());
    let mut rows = Vec::new();
    for &strategy in &args.strategy {
        match strategy {
            CliStrategy::Cra => {
                for &method in &methods {
                    let outcome = analyze(data, method, &spec, args.ci).map_err(|e| e.to_string());
                    rows.push(Row { method, strategy: "CRA", outcome, n: observed, clusters: retained });
                }
            }
            CliStrategy::Mmi => {
                if !data.has_missing() {
                    eprintln!("warning: no missing outcomes; imputations are copies of the data");
                }
                let cfg = imputation_config(&args.imputation, &args.adjust, args.interaction);
                let mut stream = ImputationStream::new(data, &cfg)?;
                let results = mmi_from_stream(&mut stream, cfg.n_imputations, data, &methods, &spec, args.ci)?;
                for (&method, res) in methods.iter().zip(results) {
                    let outcome = res.map(|r| r.estimate).map_err(|e| e.to_string());
                    rows.push(Row { method, strategy: "MMI", outcome, n: total, clusters: all_clusters });
                }
            }
        }
    }
    Ok(rows)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let data = read_dataset_file(&args.csv)?;
    let rows = analysis_rows(&args, &data)?;
    let header = [
        "method",
        "strategy",
        "measure",
        "estimate",
        "ci_lower",
        "ci_upper",
        "se",
        "df",
        "n_control",
        "n_intervention",
        "clusters_control",
        "clusters_intervention",
        "note",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.method.to_string(), r.strategy.to_string(), display_scale(r.method.scale()).to_string()];
            match &r.outcome {
                Ok(e) => {
                    let (est, lo, hi) = e.display();
                    v.extend([format!("{est:.3}"), format!("{lo:.3}"), format!("{hi:.3}")]);
                    v.extend([format!("{:.4}", e.se), format!("{:.1}", e.df)]);
                }
                Err(_) => v.extend(std::iter::repeat_n("NA".to_string(), 5)),
            }
            v.extend([r.n[0], r.n[1], r.clusters[0], r.clusters[1]].map(|n| n.to_string()));
            v.push(match &r.outcome {
                Ok(e) if !e.converged => "GEE independence fallback".to_string(),
                Ok(_) => String::new(),
                Err(msg) => msg.clone(),
            });
            v
        })
        .collect();
    match args.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            let out = |e: csv::Error| Failure::Runtime(e.to_string());
            w.write_record(header).map_err(out)?;
            for c in &cells {
                w.write_record(c).map_err(out)?;
            }
            w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
        }
        Format::Markdown => {
            println!("| {} |", header.join(" | "));
            println!("|{}", "---|".repeat(header.len()));
            for c in &cells {
                println!("| {} |", c.join(" | "));
            }
        }
    }
    if rows.iter().all(|r| r.outcome.is_err()) {
        return Err(Failure::Runtime("every analysis failed".into()));
    }
    Ok(())
}

fn cmd_impute(args: ImputeArgs) -> Result<(), Failure> {
    let data = read_dataset_file(&args.csv)?;
    for name in &args.adjust {
        data.covariate_index(name)?;
    }
    if !data.has_missing() {
        eprintln!("warning: no missing outcomes; writing copies of the input");
    }
    let cfg = imputation_config(&args.imputation, &args.adjust, args.interaction);
    let set = impute(&data, &cfg)?;
    let paths = export_imputations(&set, &args.out)?;
    println!("wrote {} imputed datasets and manifest.json to {}", paths.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Impute(a) => cmd_impute(a),
        Command::DemoData { out, seed } => {
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            }
            write_dataset_file(&demo_trial(seed), &out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
