use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tokmerge::experiment::artifacts::{RunManifest, PRIVACY, SNR_SWEEP};
use tokmerge::experiment::{self, Experiment};
use tokmerge::objectives::{EvalRow, MergePolicy, MergeSchedule};
use tokmerge::optimizer::Method;
use tokmerge::{Error, Result};

#[derive(Parser)]
#[command(name = "tokmerge", version, about = "Token-merging policy search over a noisy channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bayesian optimization on the search subset; writes a run directory.
    RunBo {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One of the baseline searches.
    RunBaseline {
        #[arg(long)]
        config: PathBuf,
        /// random | sobol | constant_threshold | fixed_ratio
        #[arg(long)]
        method: String,
        /// Defaults to `bo.budget`.
        #[arg(long)]
        budget: Option<usize>,
        /// Score against this run's reference box and store results inside it.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate one policy on the full evaluation split.
    EvalPolicy {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated thresholds, one per layer.
        #[arg(long, conflicts_with = "policy_file")]
        policy: Option<String>,
        /// File holding the thresholds (comma or whitespace separated).
        #[arg(long)]
        policy_file: Option<PathBuf>,
        #[arg(long)]
        snr_db: Option<f64>,
        /// Print the JSON row only.
        #[arg(long)]
        json: bool,
        /// Append the JSON row to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Accuracy against SNR for identity, a Pareto policy and the fixed baselines.
    SnrSweep {
        #[arg(long)]
        run_dir: PathBuf,
        /// Use this config instead of the one stored in the run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Policies to choose from instead of the run's Pareto set, one per line.
        #[arg(long)]
        policies: Option<PathBuf>,
    },
    /// Model-inversion leakage of every Pareto policy of a run.
    PrivacyEval {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Plot-ready CSVs for a run.
    EmitPlots {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_policy(text: &str) -> Result<MergePolicy> {
    MergePolicy::parse(text)
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::RunBo { config, out } => {
            let exp = Experiment::load(&config)?;
            let out = out.unwrap_or_else(|| exp.config.output_dir.clone());
            let run = experiment::run_bo(&exp, &out)?;
            println!(
                "{} evaluations, {} Pareto policies, normalized HV {:.4}",
                run.trace.records.len(),
                run.pareto.len(),
                run.trace.final_hv()
            );
            println!("artifacts in {}", out.display());
        }
        Command::RunBaseline {
            config,
            method,
            budget,
            run_dir,
        } => {
            let method: Method = method.parse()?;
            if method == Method::Bo {
                return Err(Error::Config("use run-bo for the optimizer".into()));
            }
            let exp = Experiment::load(&config)?;
            let budget = budget.unwrap_or(exp.config.bo.budget);
            let out = exp.config.output_dir.clone();
            let trace = experiment::run_baseline(&exp, method, budget, run_dir.as_deref(), &out)?;
            println!(
                "{method}: {} evaluations, {} non-dominated, normalized HV {:.4}",
                trace.records.len(),
                trace.pareto_indices().len(),
                trace.final_hv()
            );
        }
        Command::EvalPolicy {
            config,
            policy,
            policy_file,
            snr_db,
            json,
            output,
        } => {
            let text = match (policy, policy_file) {
                (Some(p), _) => p,
                (None, Some(f)) => read_file(&f)?,
                (None, None) => return Err(Error::Config("give --policy or --policy-file".into())),
            };
            let policy = read_policy(&text)?;
            let exp = Experiment::load(&config)?;
            let rec = experiment::eval_policy(&exp, &MergeSchedule::threshold(policy), snr_db)?;
            let row = serde_json::to_string(&EvalRow::from_record(&rec, false))?;
            if json {
                println!("{row}");
            } else {
                println!("A = {:.4}", rec.objectives.accuracy());
                println!("F = {:.6} GFLOPs", rec.objectives.gflops());
                println!("C = {:.4} tokens", rec.objectives.comm_cost);
                println!("{row}");
            }
            if let Some(path) = output {
                use std::io::Write;
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                writeln!(f, "{row}").map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::SnrSweep {
            run_dir,
            config,
            policies,
        } => {
            let exp = match config {
                Some(c) => Experiment::load(&c)?,
                None => experiment::experiment_for_run(&run_dir)?,
            };
            let policies = match policies {
                Some(f) => Some(
                    read_file(&f)?
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(read_policy)
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            let rows = experiment::cmd_snr_sweep(&exp, &run_dir, policies)?;
            for r in &rows {
                println!(
                    "{:>6} dB  {:<20} {:<14} A = {:.4} ± {:.4}  C = {:.2}",
                    r.snr_db, r.method, r.label, r.accuracy, r.accuracy_se, r.comm_cost
                );
            }
            println!("wrote {}", run_dir.join(SNR_SWEEP).display());
        }
        Command::PrivacyEval { run_dir } => {
            let exp = experiment::experiment_for_run(&run_dir)?;
            let (rows, summary) = experiment::cmd_privacy_eval(&exp, &run_dir)?;
            for r in &rows {
                println!(
                    "policy {:>4}  C = {:>6.3}  SSIM = {:.4}  A = {:.4}",
                    r.id, r.comm_cost, r.mean_ssim, r.accuracy
                );
            }
            match summary.spearman_c_ssim {
                Some(rho) => println!("Spearman(C, SSIM) = {rho:.4} over {} policies", summary.n_policies),
                None => println!("Spearman(C, SSIM) undefined (constant column)"),
            }
            println!(
                "identity SSIM {:.4}, most aggressive SSIM {:.4}",
                summary.identity_ssim, summary.most_aggressive_ssim
            );
            println!("wrote {}", run_dir.join(PRIVACY).display());
        }
        Command::EmitPlots { run_dir } => {
            let manifest = RunManifest::load(&run_dir)?;
            let exp = Experiment::build(manifest.config)?;
            for p in experiment::emit_plots(&exp, &run_dir)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
