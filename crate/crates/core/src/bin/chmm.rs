//! Command-line surface: simulate panels, fit the model, and turn traces
//! into convergence tables and posterior summaries.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chmm::config::RunConfig;
use chmm::data::{load_dataset, missingness_summary, prepare_panels};
use chmm::diagnostics::{
    default_contrasts, gelman_rubin, gelman_rubin_summary, summarize, GrPoint,
};
use chmm::error::Error;
use chmm::priors::build_priors;
use chmm::sampler::{read_trace, run_chains};
use chmm::simulate::{write_truth, Simulator};

#[derive(Parser)]
#[command(
    name = "chmm",
    about = "Coupled hidden Markov models for longitudinal disease panels",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth from a config.
    Simulate(SimulateArgs),
    /// Run the adaptive Metropolis-within-Gibbs sampler on a dataset.
    Fit(FitArgs),
    /// Gelman-Rubin convergence tables from two or more traces.
    Diagnose(DiagnoseArgs),
    /// Posterior medians, credible intervals and positivity probabilities.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Run configuration (TOML) with a [sim] section.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $CHMM_OUT_DIR or the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset path; overrides the [data] section.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long, name = "burn-in")]
    burn_in: Option<u64>,
    #[arg(long)]
    thin: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run the non-adaptive pilot phase to estimate the fixed proposal
    /// covariance.
    #[arg(long)]
    pilot: bool,
    /// Worker threads for concurrent chains (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Prior regime: "vague" or "informed".
    #[arg(long)]
    prior: Option<String>,
    /// Prior file for the informed regime.
    #[arg(long, name = "prior-file")]
    prior_file: Option<PathBuf>,
    /// Dirichlet concentration for the initial distributions.
    #[arg(long, name = "dirichlet-alpha")]
    dirichlet_alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Trace files (two or more).
    #[arg(long = "trace", required = true)]
    traces: Vec<PathBuf>,
    /// Grid points for the convergence curves.
    #[arg(long, default_value_t = 20)]
    grid: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Trace files (pooled after per-trace burn-in).
    #[arg(long = "trace", required = true)]
    traces: Vec<PathBuf>,
    /// Retained rows to drop from the start of each trace.
    #[arg(long, name = "burn-in", default_value_t = 0)]
    burn_in: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("CHMM_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Schema(_)
        | Error::UnknownKind(_)
        | Error::BadPriorFile(_)
        | Error::Parse { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Summarize(args) => cmd_summarize(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let (mut config, _) = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.mcmc.seed = seed;
    }
    let model = config.model_spec()?;
    let (sim_config, beta, pi) = config.sim_inputs(&model)?;
    let simulator = Simulator::new(&model, &beta, &pi, &sim_config)?;
    let output = simulator.run()?;

    let dir = out_dir(args.out);
    std::fs::create_dir_all(&dir)?;
    let dataset_path = dir.join("dataset.csv");
    let truth_path = dir.join("truth.csv");
    chmm::data::write_dataset(&output.dataset, &dataset_path)?;
    write_truth(&model, &output.truth, &truth_path)?;

    let panels = chmm::data::build_panels(&output.dataset)?;
    println!(
        "simulated {} captures of {} voles",
        output.dataset.records.len(),
        panels.len()
    );
    println!("{}", missingness_summary(&panels));
    println!("dataset: {}", dataset_path.display());
    println!("truth:   {}", truth_path.display());
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    let (mut config, hash) = RunConfig::load(&args.config)?;
    if let Some(v) = args.chains {
        config.mcmc.chains = v;
    }
    if let Some(v) = args.iterations {
        config.mcmc.iterations = v;
    }
    if let Some(v) = args.burn_in {
        config.mcmc.burn_in = v;
    }
    if let Some(v) = args.thin {
        config.mcmc.thin = v;
    }
    if let Some(v) = args.seed {
        config.mcmc.seed = v;
    }
    if args.pilot {
        config.mcmc.pilot = true;
    }
    if let Some(v) = args.threads {
        config.mcmc.threads = v;
    }
    if let Some(v) = args.prior {
        config.priors.regime = v;
    }
    if let Some(v) = args.prior_file {
        config.priors.prior_file = Some(v);
    }
    if let Some(v) = args.dirichlet_alpha {
        config.priors.dirichlet_alpha = v;
    }
    config.validate()?;

    let dataset_path = args
        .dataset
        .or_else(|| config.data.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset given (flag --dataset or [data] section)".into()))?;

    let model = config.model_spec()?;
    let (gaussians, dirichlets) = build_priors(&model, &config.prior_config()?)?;
    let dataset = load_dataset(&dataset_path)?;
    let expected: Vec<&str> = model.diseases().iter().map(|d| d.name()).collect();
    if dataset.diseases != expected {
        return Err(Error::Schema(format!(
            "dataset diseases {:?} do not match the model {:?}",
            dataset.diseases, expected
        )));
    }
    let panels = prepare_panels(&dataset, config.panel_options()?)?;
    let controls = config.controls()?;

    let dir = out_dir(args.out);
    std::fs::create_dir_all(&dir)?;
    let output = run_chains(
        &model,
        &panels,
        &gaussians,
        &dirichlets,
        &controls,
        Some(&dir),
        &hash,
    )?;
    println!(
        "fit complete: {} chains x {} iterations ({} retained each), {:.1}s",
        controls.chains,
        controls.iterations,
        controls.retained(),
        output.manifest.wall_time_secs
    );
    for chain in &output.manifest.chains {
        let rates: Vec<String> = chain
            .acceptance_rates
            .iter()
            .map(|(d, r)| format!("{d}: {r:.3}"))
            .collect();
        println!("chain {} acceptance {}", chain.index, rates.join(", "));
    }
    println!("manifest: {}", dir.join("manifest.json").display());
    Ok(())
}

/// Loads traces and checks they share one schema.
fn load_traces(paths: &[PathBuf]) -> Result<Vec<chmm::sampler::ChainTrace>, Error> {
    let traces: Vec<_> = paths
        .iter()
        .map(|p| read_trace(p))
        .collect::<Result<_, _>>()?;
    let first: &chmm::sampler::ChainTrace = &traces[0];
    for t in &traces[1..] {
        if t.param_names != first.param_names {
            return Err(Error::Schema("traces have mismatched columns".into()));
        }
    }
    Ok(traces)
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), Error> {
    if args.traces.len() < 2 {
        return Err(Error::Config("diagnose needs at least two traces".into()));
    }
    let traces = load_traces(&args.traces)?;
    let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    if traces.iter().any(|t| t.len() != len) {
        return Err(Error::Schema("traces have unequal lengths".into()));
    }

    let names = traces[0].param_names.clone();
    let mut per_param: Vec<Vec<GrPoint>> = Vec::with_capacity(names.len());
    let columns: Vec<Vec<Vec<f64>>> = traces
        .iter()
        .map(|t| (0..names.len()).map(|i| t.column(i)).collect())
        .collect();
    for i in 0..names.len() {
        let views: Vec<&[f64]> = columns.iter().map(|c| c[i].as_slice()).collect();
        per_param.push(gelman_rubin(&views, args.grid)?);
    }

    let dir = out_dir(args.out);
    std::fs::create_dir_all(&dir)?;
    let params_path = dir.join("gr_params.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&params_path)?);
    writeln!(out, "samples,parameter,r,q975")?;
    for (name, points) in names.iter().zip(&per_param) {
        for p in points {
            writeln!(out, "{},{},{},{}", p.n, name, p.r, p.q975)?;
        }
    }
    out.flush()?;

    let summary_path = dir.join("gr_summary.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&summary_path)?);
    writeln!(out, "samples,mean_r,max_r,max_q975")?;
    for row in gelman_rubin_summary(&per_param) {
        writeln!(out, "{},{},{},{}", row.n, row.mean_r, row.max_r, row.max_q975)?;
    }
    out.flush()?;

    println!("wrote {}", params_path.display());
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn transition_of(coefficient: &str) -> (String, String) {
    // "b0_12" -> ("p12", "intercept"); "contract.bab2" -> ("contract", "bab2").
    if let Some(states) = coefficient.strip_prefix("b0_") {
        (format!("p{states}"), "intercept".to_string())
    } else if let Some((group, column)) = coefficient.split_once('.') {
        (group.to_string(), column.to_string())
    } else {
        (coefficient.to_string(), String::new())
    }
}

fn cmd_summarize(args: SummarizeArgs) -> Result<(), Error> {
    let traces = load_traces(&args.traces)?;
    let names = traces[0].param_names.clone();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for t in &traces {
        if args.burn_in >= t.len() {
            return Err(Error::EmptyTrace);
        }
        rows.extend(t.samples[args.burn_in..].iter().cloned());
    }
    let contrasts = default_contrasts(&names);
    let summaries = summarize(&names, &rows, 0, &contrasts)?;

    let dir = out_dir(args.out);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("summary.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(
        out,
        "parameter,transition,covariate,median,ci_low,ci_high,prob_positive,flag"
    )?;
    for s in &summaries {
        let (transition, covariate) = match s.name.split_once('.') {
            Some((_, coefficient)) if !s.name.contains('-') => transition_of(coefficient),
            _ => ("contrast".to_string(), String::new()),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.name,
            transition,
            covariate,
            s.median,
            s.q025,
            s.q975,
            s.prob_positive,
            s.flag.as_str()
        )?;
    }
    out.flush()?;
    println!("wrote {} ({} rows)", path.display(), summaries.len());
    Ok(())
}
