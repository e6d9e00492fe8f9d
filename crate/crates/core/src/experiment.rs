//! Monte Carlo sweep engine: replicated competitions across sample sizes,
//! aggregated into winning-rate tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::drifting_prior_schedule;
use crate::competition::{enumerate_models, run_competition, AgentRoster, TIE_RTOL};
use crate::dgp::{sample_dataset, sample_dgp, true_model, Seed};
use crate::error::{Error, Result};
use crate::posterior::{AgentPrior, Hyperparameters, Model};

/// How the roster of competing models is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RosterSpec {
    /// All nonempty subsets of `{1..k}`.
    #[default]
    AllSubsets,
    /// An explicit list of models, each a strictly increasing index list.
    Explicit { models: Vec<Vec<usize>> },
    /// All nonempty subsets up to a size cap.
    MaxSize { max_size: usize },
}

/// Hyperparameter treatment applied per sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Standard,
    /// Every agent holds the noise variance fixed at this value.
    KnownVariance { sigma_sq: f64 },
    /// `b_n = c n^exponent` with exponent > 2.
    DriftingPrior { c: f64, exponent: f64 },
    /// One standard sweep per b0 value; see `run_b0_sweep`.
    B0Sweep { values: Vec<f64> },
}

fn default_sigma0_sq() -> f64 {
    1.0
}

fn default_redraw_beta() -> bool {
    true
}

/// A replicated-competition experiment over a grid of sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub k: usize,
    /// 1-based indices of the truly relevant covariates.
    pub relevant: Vec<usize>,
    #[serde(default = "default_sigma0_sq")]
    pub sigma0_sq: f64,
    pub hyper: Hyperparameters,
    pub n_values: Vec<usize>,
    pub reps: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub roster_spec: RosterSpec,
    #[serde(default)]
    pub variant: Variant,
    /// Fresh true coefficients per replication (true) or one fixed draw
    /// shared by all replications (false).
    #[serde(default = "default_redraw_beta")]
    pub redraw_beta: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("ExperimentConfig", "k must be positive"));
        }
        if self.relevant.is_empty() {
            return Err(Error::NoRelevantCovariates);
        }
        if self.relevant.windows(2).any(|w| w[0] >= w[1])
            || self.relevant[0] == 0
            || *self.relevant.last().unwrap() > self.k
        {
            return Err(Error::invalid(
                "ExperimentConfig",
                "relevant must be strictly increasing indices in 1..=k",
            ));
        }
        if self.sigma0_sq < 0.0 || !self.sigma0_sq.is_finite() {
            return Err(Error::invalid("ExperimentConfig", "sigma0_sq must be finite and nonnegative"));
        }
        self.hyper.validate()?;
        if self.n_values.is_empty() || self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "ExperimentConfig",
                "n_values must be nonempty and strictly increasing",
            ));
        }
        if self.reps == 0 {
            return Err(Error::invalid("ExperimentConfig", "reps must be at least 1"));
        }
        match &self.roster_spec {
            RosterSpec::AllSubsets => {
                enumerate_models(self.k, None)?;
            }
            RosterSpec::MaxSize { max_size } => {
                if *max_size == 0 {
                    return Err(Error::invalid("ExperimentConfig", "max_size must be positive"));
                }
                enumerate_models(self.k, Some(*max_size))?;
            }
            RosterSpec::Explicit { models } => {
                if models.is_empty() {
                    return Err(Error::invalid("ExperimentConfig", "explicit roster must be nonempty"));
                }
                for m in models {
                    let model = Model::new(m.clone())?;
                    if model.max_index() > self.k {
                        return Err(Error::invalid(
                            "ExperimentConfig",
                            "explicit model index exceeds k",
                        ));
                    }
                }
            }
        }
        match &self.variant {
            Variant::Standard => {}
            Variant::KnownVariance { sigma_sq } => {
                if *sigma_sq <= 0.0 || sigma_sq.is_nan() {
                    return Err(Error::invalid("ExperimentConfig", "known sigma_sq must be positive"));
                }
            }
            Variant::DriftingPrior { c, exponent } => {
                drifting_prior_schedule(&self.hyper, 1, *c, *exponent)?;
            }
            Variant::B0Sweep { values } => {
                if values.is_empty() || values.iter().any(|&b| b <= 0.0 || b.is_nan()) {
                    return Err(Error::invalid("ExperimentConfig", "b0 values must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<config json>".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    fn models(&self) -> Result<Vec<Model>> {
        match &self.roster_spec {
            RosterSpec::AllSubsets => enumerate_models(self.k, None),
            RosterSpec::MaxSize { max_size } => enumerate_models(self.k, Some(*max_size)),
            RosterSpec::Explicit { models } => {
                models.iter().map(|m| Model::new(m.clone())).collect()
            }
        }
    }

    fn roster_for_n(&self, n: usize) -> Result<AgentRoster> {
        let hyper = match &self.variant {
            Variant::DriftingPrior { c, exponent } => {
                drifting_prior_schedule(&self.hyper, n, *c, *exponent)?
            }
            _ => self.hyper,
        };
        let agents: Vec<AgentPrior> = self
            .models()?
            .into_iter()
            .map(|m| {
                let agent = AgentPrior::new(m, hyper);
                match &self.variant {
                    Variant::KnownVariance { sigma_sq } => agent.with_known_variance(*sigma_sq),
                    _ => agent,
                }
            })
            .collect();
        AgentRoster::new(agents)
    }
}

/// Pseudo-n used for whole-table metadata rows in the metrics listing.
const META_N: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeFreqRow {
    pub n: usize,
    pub winner_size: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFreqRow {
    pub n: usize,
    pub winner: String,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub n: usize,
    pub metric: String,
    pub value: f64,
}

/// Aggregated winning rates: per-(n, size) and per-(n, model) frequencies
/// plus per-n marginals. Metadata rows use n = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinningRateTable {
    pub size_freq: Vec<SizeFreqRow>,
    pub model_freq: Vec<ModelFreqRow>,
    pub metrics: Vec<MetricRow>,
}

impl WinningRateTable {
    pub fn size_frequency(&self, n: usize, winner_size: usize) -> f64 {
        self.size_freq
            .iter()
            .find(|r| r.n == n && r.winner_size == winner_size)
            .map_or(0.0, |r| r.frequency)
    }

    pub fn model_frequency(&self, n: usize, label: &str) -> f64 {
        self.model_freq
            .iter()
            .find(|r| r.n == n && r.winner == label)
            .map_or(0.0, |r| r.frequency)
    }

    pub fn metric(&self, n: usize, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.n == n && r.metric == name)
            .map(|r| r.value)
    }

    pub fn n_values(&self) -> Vec<usize> {
        let mut ns: Vec<usize> = self.size_freq.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        ns
    }

    /// Most frequent winning model at n.
    pub fn modal_winner(&self, n: usize) -> Option<&str> {
        self.model_freq
            .iter()
            .filter(|r| r.n == n)
            .max_by(|a, b| {
                a.frequency
                    .total_cmp(&b.frequency)
                    .then_with(|| b.winner.cmp(&a.winner))
            })
            .map(|r| r.winner.as_str())
    }
}

/// One replication's contribution to the aggregate counters.
struct RepRecord {
    winner_size: usize,
    winner_label: String,
    contains_true: bool,
    exact_true: bool,
    strictly_smaller: bool,
    tie: bool,
    /// Tie spanning models of different sizes; excluded from size counts.
    mixed_size_tie: bool,
    failures: usize,
}

fn run_replication(
    config: &ExperimentConfig,
    roster: &AgentRoster,
    n: usize,
    rep: usize,
) -> Result<RepRecord> {
    let seed = Seed::with_labels(config.base_seed, 0, n as u64, rep as u64);
    let coef_seed = if config.redraw_beta {
        seed
    } else {
        Seed::with_labels(config.base_seed, 0, 0, 0)
    };
    let spec = sample_dgp(config.k, &config.relevant, config.sigma0_sq, None, coef_seed)?;
    let data = sample_dataset(&spec, n, seed);
    let result = run_competition(&data, roster)?;

    let true_set = true_model(&spec);
    let winner = &result.winner_model;

    let mut mixed_size_tie = false;
    if result.tie {
        let min = result.winner_loss();
        let scale = min.abs().max(f64::MIN_POSITIVE);
        for (i, report) in result.losses.iter().enumerate() {
            if let Some(report) = report {
                if (report.total - min).abs() <= TIE_RTOL * scale
                    && roster.agents()[i].model.size() != winner.size()
                {
                    mixed_size_tie = true;
                    break;
                }
            }
        }
    }

    Ok(RepRecord {
        winner_size: winner.size(),
        winner_label: winner.label(),
        contains_true: winner.contains_all(&true_set),
        exact_true: winner.indices() == true_set.as_slice(),
        strictly_smaller: winner.size() < true_set.len(),
        tie: result.tie,
        mixed_size_tie,
        failures: result.disqualified.len(),
    })
}

/// Runs the full sweep. Deterministic for a fixed config under any degree
/// of parallelism: per-replication seeds depend only on (base_seed, n, rep)
/// and aggregation uses commutative integer counters.
pub fn run_sweep(config: &ExperimentConfig) -> Result<WinningRateTable> {
    run_sweep_with_progress(config, |_| {})
}

/// `run_sweep` with a per-n progress callback (called after each n finishes).
pub fn run_sweep_with_progress(
    config: &ExperimentConfig,
    mut progress: impl FnMut(usize),
) -> Result<WinningRateTable> {
    config.validate()?;
    if matches!(config.variant, Variant::B0Sweep { .. }) {
        return Err(Error::invalid(
            "ExperimentConfig",
            "b0_sweep produces one table per b0 value; use run_b0_sweep",
        ));
    }

    let mut size_freq = Vec::new();
    let mut model_freq = Vec::new();
    let mut metrics = Vec::new();

    for &n in &config.n_values {
        let roster = config.roster_for_n(n)?;
        let records: Vec<RepRecord> = (0..config.reps)
            .into_par_iter()
            .map(|rep| run_replication(config, &roster, n, rep))
            .collect::<Result<Vec<RepRecord>>>()?;

        let reps = config.reps as f64;
        let mut size_counts: BTreeMap<usize, u64> = BTreeMap::new();
        let mut model_counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut contains = 0u64;
        let mut exact = 0u64;
        let mut smaller = 0u64;
        let mut ties = 0u64;
        let mut mixed = 0u64;
        let mut failures = 0u64;
        for r in &records {
            if !r.mixed_size_tie {
                *size_counts.entry(r.winner_size).or_insert(0) += 1;
            } else {
                mixed += 1;
            }
            *model_counts.entry(r.winner_label.clone()).or_insert(0) += 1;
            contains += r.contains_true as u64;
            exact += r.exact_true as u64;
            smaller += r.strictly_smaller as u64;
            ties += r.tie as u64;
            failures += r.failures as u64;
        }
        let size_denominator = (config.reps as u64 - mixed) as f64;
        for (size, count) in size_counts {
            size_freq.push(SizeFreqRow {
                n,
                winner_size: size,
                frequency: count as f64 / size_denominator,
            });
        }
        for (label, count) in model_counts {
            model_freq.push(ModelFreqRow {
                n,
                winner: label,
                frequency: count as f64 / reps,
            });
        }
        for (name, value) in [
            ("freq_contains_true", contains as f64 / reps),
            ("freq_exact_true", exact as f64 / reps),
            ("freq_strictly_smaller", smaller as f64 / reps),
            ("tie_rate", ties as f64 / reps),
            ("failures", failures as f64),
        ] {
            metrics.push(MetricRow {
                n,
                metric: name.to_string(),
                value,
            });
        }
        progress(n);
    }

    metrics.push(MetricRow {
        n: META_N,
        metric: "reps".into(),
        value: config.reps as f64,
    });
    metrics.push(MetricRow {
        n: META_N,
        metric: "redraw_beta".into(),
        value: config.redraw_beta as u8 as f64,
    });

    Ok(WinningRateTable {
        size_freq,
        model_freq,
        metrics,
    })
}

/// Runs one standard sweep per b0 value of a `B0Sweep` config.
pub fn run_b0_sweep(config: &ExperimentConfig) -> Result<Vec<(f64, WinningRateTable)>> {
    config.validate()?;
    let values = match &config.variant {
        Variant::B0Sweep { values } => values.clone(),
        _ => {
            return Err(Error::invalid(
                "ExperimentConfig",
                "run_b0_sweep requires the b0_sweep variant",
            ))
        }
    };
    values
        .into_iter()
        .map(|b0| {
            let mut sub = config.clone();
            sub.hyper = Hyperparameters::new(config.hyper.a0, b0, config.hyper.gamma)?;
            sub.variant = Variant::Standard;
            Ok((b0, run_sweep(&sub)?))
        })
        .collect()
}

/// Per-n summary extracted from a table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub n: usize,
    pub modal_winner: String,
    pub freq_contains_true: f64,
    pub freq_exact_true: f64,
    pub freq_strictly_smaller: f64,
    pub tie_rate: f64,
    pub failures: f64,
}

pub fn summarize(table: &WinningRateTable) -> Vec<SummaryRow> {
    table
        .n_values()
        .into_iter()
        .map(|n| SummaryRow {
            n,
            modal_winner: table.modal_winner(n).unwrap_or("").to_string(),
            freq_contains_true: table.metric(n, "freq_contains_true").unwrap_or(0.0),
            freq_exact_true: table.metric(n, "freq_exact_true").unwrap_or(0.0),
            freq_strictly_smaller: table.metric(n, "freq_strictly_smaller").unwrap_or(0.0),
            tie_rate: table.metric(n, "tie_rate").unwrap_or(0.0),
            failures: table.metric(n, "failures").unwrap_or(0.0),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Json,
}

impl std::str::FromStr for EmitFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EmitFormat::Csv),
            "json" => Ok(EmitFormat::Json),
            other => Err(Error::invalid("format", format!("unknown format `{other}`"))),
        }
    }
}

/// Companion metrics path: `out.csv` becomes `out.metrics.csv`.
pub fn metrics_path(path: &Path) -> PathBuf {
    path.with_extension("metrics.csv")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn csv_io_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads a headered three-field CSV as (n, name, value) rows.
fn csv_records(path: &Path) -> Result<Vec<(usize, String, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_io_err(path))?;
    let parse_err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_io_err(path))?;
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", record.len())));
        }
        rows.push((
            record[0].parse().map_err(|e| parse_err(format!("bad n `{}`: {e}", &record[0])))?,
            record[1].to_string(),
            record[2]
                .parse()
                .map_err(|e| parse_err(format!("bad value `{}`: {e}", &record[2])))?,
        ));
    }
    Ok(rows)
}

/// Writes the table. CSV format produces the main `n,winner_size,frequency`
/// file plus a metrics file `n,metric,value` (model frequencies appear there
/// as `winner {label}` rows). JSON mirrors everything in one file.
pub fn emit(table: &WinningRateTable, format: EmitFormat, path: &Path) -> Result<()> {
    match format {
        EmitFormat::Json => {
            let text =
                serde_json::to_string_pretty(table).expect("table serialization cannot fail");
            std::fs::write(path, text).map_err(io_err(path))
        }
        EmitFormat::Csv => {
            let mut main = csv::Writer::from_path(path).map_err(csv_io_err(path))?;
            main.write_record(["n", "winner_size", "frequency"])
                .map_err(csv_io_err(path))?;
            for r in &table.size_freq {
                main.write_record([
                    r.n.to_string(),
                    r.winner_size.to_string(),
                    format!("{:.16e}", r.frequency),
                ])
                .map_err(csv_io_err(path))?;
            }
            main.flush().map_err(io_err(path))?;
            let metrics_file = metrics_path(path);
            let mut out = csv::Writer::from_path(&metrics_file).map_err(csv_io_err(&metrics_file))?;
            out.write_record(["n", "metric", "value"])
                .map_err(csv_io_err(&metrics_file))?;
            for r in &table.metrics {
                out.write_record([
                    r.n.to_string(),
                    r.metric.clone(),
                    format!("{:.16e}", r.value),
                ])
                .map_err(csv_io_err(&metrics_file))?;
            }
            for r in &table.model_freq {
                out.write_record([
                    r.n.to_string(),
                    format!("winner {}", r.winner),
                    format!("{:.16e}", r.frequency),
                ])
                .map_err(csv_io_err(&metrics_file))?;
            }
            out.flush().map_err(io_err(&metrics_file))?;
            Ok(())
        }
    }
}

/// Reads a table back from either format (CSV reads the companion file too).
pub fn parse(format: EmitFormat, path: &Path) -> Result<WinningRateTable> {
    match format {
        EmitFormat::Json => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        }
        EmitFormat::Csv => {
            let mut size_freq = Vec::new();
            for record in csv_records(path)? {
                let (n, name, value) = record;
                let winner_size = name.parse().map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    message: format!("bad winner_size `{name}`: {e}"),
                })?;
                size_freq.push(SizeFreqRow {
                    n,
                    winner_size,
                    frequency: value,
                });
            }
            let metrics_file = metrics_path(path);
            let mut metrics = Vec::new();
            let mut model_freq = Vec::new();
            for (n, name, value) in csv_records(&metrics_file)? {
                if let Some(label) = name.strip_prefix("winner ") {
                    model_freq.push(ModelFreqRow {
                        n,
                        winner: label.to_string(),
                        frequency: value,
                    });
                } else {
                    metrics.push(MetricRow {
                        n,
                        metric: name,
                        value,
                    });
                }
            }
            Ok(WinningRateTable {
                size_freq,
                model_freq,
                metrics,
            })
        }
    }
}
