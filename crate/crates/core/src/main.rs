//! Command-line entry point. Exit codes: 0 success, 1 input error,
//! 2 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use bayes_arena::asymptotics::{
    aic, ktk_expansion_sigma2, nig_log_density_deriv_sigma2, posterior_loss_large_n_approx,
    sigma2_mle, KtkInput, KtkSignVariant,
};
use bayes_arena::competition::{enumerate_models, run_competition, AgentRoster};
use bayes_arena::dgp::{Dataset, Seed};
use bayes_arena::error::{Error, Result};
use bayes_arena::experiment::{
    emit, run_b0_sweep, run_sweep_with_progress, summarize, EmitFormat, ExperimentConfig, Variant,
};
use bayes_arena::oracle::{mc_marginal_loss, quadrature_posterior_sigma2, QuadratureGrid};
use bayes_arena::posterior::{
    exante_expected_loss, posterior_loss, ridge_estimate, AgentPrior, Hyperparameters, Model,
};

#[derive(Parser)]
#[command(
    name = "bayes-arena",
    about = "Monte Carlo competitions between Bayesian linear-regression agents",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for replicated sweeps (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated competition sweep from a JSON config file.
    Simulate {
        /// JSON file matching the experiment config schema.
        #[arg(long)]
        config: PathBuf,
        /// Output path; CSV emits a companion `.metrics.csv` file.
        #[arg(long)]
        out: PathBuf,
        /// Output format.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Overrides the config's base_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one competition on a dataset CSV and a roster JSON.
    Compete {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        roster: PathBuf,
        /// Output path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Lump sum for the auction framing; reported but never affects selection.
        #[arg(long)]
        m: Option<f64>,
    },
    /// Posterior loss report for one agent on a dataset CSV.
    Posterior {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        agent: AgentArgs,
    },
    /// Pre-data expected loss of an agent at sample size n.
    Exante {
        #[command(flatten)]
        agent: AgentArgs,
        #[arg(long)]
        n: usize,
    },
    /// AIC, large-n approximation, exact log loss, and the expansion value
    /// for every model of a roster on a dataset.
    Asymptotics {
        #[arg(long)]
        data: PathBuf,
        /// Enumerate all nonempty subsets of {1..k}.
        #[arg(long, conflicts_with = "models")]
        k: Option<usize>,
        /// Explicit models, semicolon-separated: "1,2;1,3".
        #[arg(long)]
        models: Option<String>,
        #[arg(long, default_value_t = 2.0)]
        a0: f64,
        #[arg(long, default_value_t = 1.0)]
        b0: f64,
        #[arg(long, default_value_t = 0.001)]
        gamma: f64,
    },
    /// Brute-force oracles for the closed-form machinery.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Args)]
struct AgentArgs {
    /// Comma-separated 1-based covariate indices, e.g. "1,3".
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 2.0)]
    a0: f64,
    #[arg(long, default_value_t = 1.0)]
    b0: f64,
    #[arg(long, default_value_t = 0.001)]
    gamma: f64,
    /// Dogmatic noise-variance belief (known-variance agent).
    #[arg(long)]
    known_sigma_sq: Option<f64>,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Posterior mean of sigma^2 by tensor-grid quadrature (|J| <= 2).
    Quadrature {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        agent: AgentArgs,
        #[arg(long, default_value_t = 2001)]
        beta_points: usize,
        #[arg(long, default_value_t = 401)]
        sigma2_points: usize,
    },
    /// Monte Carlo estimate of the pre-data expected loss.
    Mc {
        #[command(flatten)]
        agent: AgentArgs,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl AgentArgs {
    fn model(&self) -> Result<Model> {
        let indices = self
            .model
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::invalid("model", format!("bad index `{s}`: {e}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Model::new(indices)
    }

    fn hyper(&self) -> Result<Hyperparameters> {
        Hyperparameters::new(self.a0, self.b0, self.gamma)
    }

    fn agent(&self) -> Result<AgentPrior> {
        let mut agent = AgentPrior::new(self.model()?, self.hyper()?);
        if let Some(s2) = self.known_sigma_sq {
            agent = agent.with_known_variance(s2);
        }
        Ok(agent)
    }
}

/// Roster file schema for `compete`: shared hyperparameters plus a model
/// list; optional shared known variance.
#[derive(Deserialize)]
struct RosterFile {
    hyper: Hyperparameters,
    models: Vec<Vec<usize>>,
    #[serde(default)]
    known_sigma_sq: Option<f64>,
}

fn load_roster(path: &PathBuf) -> Result<AgentRoster> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: RosterFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let hyper = file.hyper.validate()?;
    let agents = file
        .models
        .into_iter()
        .map(|m| {
            let mut agent = AgentPrior::new(Model::new(m)?, hyper);
            if let Some(s2) = file.known_sigma_sq {
                agent = agent.with_known_variance(s2);
            }
            Ok(agent)
        })
        .collect::<Result<Vec<AgentPrior>>>()?;
    AgentRoster::new(agents)
}

#[derive(Serialize)]
struct CompeteReport {
    winner: String,
    tie: bool,
    margin: f64,
    losses: Vec<AgentLossRow>,
    disqualified: Vec<(String, String)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    auction: Option<AuctionReport>,
}

#[derive(Serialize)]
struct AgentLossRow {
    agent: String,
    model_fit: f64,
    estimation_uncertainty: f64,
    total: f64,
}

#[derive(Serialize)]
struct AuctionReport {
    m: f64,
    price: f64,
    winning_bid: f64,
}

#[derive(Serialize)]
struct AsymptoticsRow {
    model: String,
    aic: Option<f64>,
    large_n_approx: Option<f64>,
    exact_log_loss: Option<f64>,
    ktk_value: Option<f64>,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::invalid("threads", e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            config,
            out,
            format,
            seed,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::Io {
                path: config.display().to_string(),
                source: e,
            })?;
            let mut cfg = ExperimentConfig::from_json(&text)?;
            if let Some(seed) = seed {
                cfg.base_seed = seed;
            }
            let format: EmitFormat = format.parse()?;
            if matches!(cfg.variant, Variant::B0Sweep { .. }) {
                // One output file per b0 value, suffixed before the extension.
                for (b0, table) in run_b0_sweep(&cfg)? {
                    let stem = out.with_extension("");
                    let ext = out.extension().and_then(|e| e.to_str()).unwrap_or("csv");
                    let path = PathBuf::from(format!("{}.b0-{b0}.{ext}", stem.display()));
                    emit(&table, format, &path)?;
                    eprintln!("b0 = {b0}: wrote {}", path.display());
                }
                return Ok(());
            }
            let table = run_sweep_with_progress(&cfg, |n| eprintln!("finished n = {n}"))?;
            emit(&table, format, &out)?;
            let summary = summarize(&table);
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serialization cannot fail")
            );
            Ok(())
        }
        Command::Compete { data, roster, out, m } => {
            let data = Dataset::read_csv_path(&data)?;
            let roster = load_roster(&roster)?;
            let result = run_competition(&data, &roster)?;
            let auction = match m {
                Some(m) => {
                    let outcome = bayes_arena::competition::run_auction(&data, &roster, m)?;
                    Some(AuctionReport {
                        m,
                        price: outcome.price,
                        winning_bid: outcome.bids[outcome.winner_index]
                            .expect("winner has a bid"),
                    })
                }
                None => None,
            };
            let report = CompeteReport {
                winner: roster.labels()[result.winner_index].clone(),
                tie: result.tie,
                margin: result.margin,
                losses: roster
                    .labels()
                    .iter()
                    .zip(&result.losses)
                    .filter_map(|(label, loss)| {
                        loss.as_ref().map(|l| AgentLossRow {
                            agent: label.clone(),
                            model_fit: l.model_fit,
                            estimation_uncertainty: l.estimation_uncertainty,
                            total: l.total,
                        })
                    })
                    .collect(),
                disqualified: result.disqualified.clone(),
                auction,
            };
            let text =
                serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Posterior { data, agent } => {
            let data = Dataset::read_csv_path(&data)?;
            let report = posterior_loss(&data, &agent.agent()?)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serialization cannot fail")
            );
            Ok(())
        }
        Command::Exante { agent, n } => {
            let value = exante_expected_loss(&agent.agent()?, n)?;
            println!("{}", serde_json::json!({ "exante_expected_loss": value }));
            Ok(())
        }
        Command::Asymptotics {
            data,
            k,
            models,
            a0,
            b0,
            gamma,
        } => {
            let data = Dataset::read_csv_path(&data)?;
            let hyper = Hyperparameters::new(a0, b0, gamma)?;
            let model_list: Vec<Model> = match (k, models) {
                (Some(k), None) => enumerate_models(k, None)?,
                (None, Some(spec)) => spec
                    .split(';')
                    .map(|m| {
                        let indices = m
                            .split(',')
                            .map(|s| {
                                s.trim().parse::<usize>().map_err(|e| {
                                    Error::invalid("models", format!("bad index `{s}`: {e}"))
                                })
                            })
                            .collect::<Result<Vec<usize>>>()?;
                        Model::new(indices)
                    })
                    .collect::<Result<Vec<Model>>>()?,
                _ => {
                    return Err(Error::invalid(
                        "asymptotics",
                        "exactly one of --k or --models is required",
                    ))
                }
            };
            let rows: Vec<AsymptoticsRow> = model_list
                .iter()
                .map(|model| {
                    let agent = AgentPrior::new(model.clone(), hyper);
                    let ktk = sigma2_mle(&data, model).ok().and_then(|s2| {
                        if s2 <= 0.0 {
                            return None;
                        }
                        let beta = ridge_estimate(&data, model, hyper.gamma).ok()?;
                        let d = nig_log_density_deriv_sigma2(&hyper, model, &beta, s2).ok()?;
                        let input = KtkInput::new(s2, model.size(), d, data.n()).ok()?;
                        Some(ktk_expansion_sigma2(&input, KtkSignVariant::Canonical))
                    });
                    AsymptoticsRow {
                        model: model.label(),
                        aic: aic(&data, model).ok(),
                        large_n_approx: posterior_loss_large_n_approx(&data, &agent).ok(),
                        exact_log_loss: posterior_loss(&data, &agent).ok().map(|r| r.total.ln()),
                        ktk_value: ktk,
                    }
                })
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&rows).expect("rows serialization cannot fail")
            );
            Ok(())
        }
        Command::Oracle(cmd) => match cmd {
            OracleCommand::Quadrature {
                data,
                agent,
                beta_points,
                sigma2_points,
            } => {
                let data = Dataset::read_csv_path(&data)?;
                let model = agent.model()?;
                let hyper = agent.hyper()?;
                let grid = QuadratureGrid::auto(&model, &hyper, beta_points, sigma2_points)?;
                let value = quadrature_posterior_sigma2(&data, &model, &hyper, &grid)?;
                println!("{}", serde_json::json!({ "posterior_sigma2_mean": value }));
                Ok(())
            }
            OracleCommand::Mc { agent, n, reps, seed } => {
                let (estimate, se) = mc_marginal_loss(&agent.agent()?, n, reps, Seed::new(seed))?;
                println!(
                    "{}",
                    serde_json::json!({ "marginal_loss": estimate, "standard_error": se })
                );
                Ok(())
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is an
            // input error (exit 1).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
