//! Winner selection among agents on a shared dataset, plus the equivalent
//! second-price auction framing.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::dgp::Dataset;
use crate::error::{Error, Result};
use crate::posterior::{posterior_loss, AgentPrior, Hyperparameters, LossReport, Model};

/// Relative tolerance below which two losses count as tied.
pub const TIE_RTOL: f64 = 1e-12;

/// Maximum k for exhaustive subset enumeration (2^k - 1 models).
pub const MAX_ENUM_K: usize = 20;

/// An ordered list of competing agents with unique display labels.
#[derive(Debug, Clone)]
pub struct AgentRoster {
    agents: Vec<AgentPrior>,
    labels: Vec<String>,
}

impl AgentRoster {
    /// Default labels are the agents' model labels like `{1,3}`.
    pub fn new(agents: Vec<AgentPrior>) -> Result<Self> {
        let labels = agents.iter().map(|a| a.model.label()).collect();
        Self::with_labels(agents, labels)
    }

    pub fn with_labels(agents: Vec<AgentPrior>, labels: Vec<String>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::invalid("AgentRoster", "must contain at least one agent"));
        }
        if labels.len() != agents.len() {
            return Err(Error::invalid("AgentRoster", "one label per agent required"));
        }
        let mut seen = std::collections::HashSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::invalid(
                    "AgentRoster",
                    format!("duplicate label `{label}`"),
                ));
            }
        }
        Ok(AgentRoster { agents, labels })
    }

    /// All nonempty subsets of `{1..k}` sharing one NIG prior.
    pub fn all_subsets(k: usize, hyper: Hyperparameters) -> Result<Self> {
        let agents = enumerate_models(k, None)?
            .into_iter()
            .map(|m| AgentPrior::new(m, hyper))
            .collect();
        Self::new(agents)
    }

    pub fn agents(&self) -> &[AgentPrior] {
        &self.agents
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }
}

/// All nonempty subsets of `{1..k}` with size at most `max_size`, ordered by
/// (size, lexicographic).
pub fn enumerate_models(k: usize, max_size: Option<usize>) -> Result<Vec<Model>> {
    if k == 0 {
        return Err(Error::invalid("enumerate_models", "k must be positive"));
    }
    if k > MAX_ENUM_K {
        return Err(Error::RosterTooLarge);
    }
    let cap = max_size.unwrap_or(k).min(k);
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << k))
        .map(|mask| (1..=k).filter(|j| mask >> (j - 1) & 1 == 1).collect())
        .filter(|s: &Vec<usize>| s.len() <= cap)
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
        .into_iter()
        .map(Model::new)
        .collect()
}

/// The outcome of one competition.
#[derive(Debug, Clone, Serialize)]
pub struct CompetitionResult {
    /// Per-agent loss reports; `None` for disqualified agents.
    pub losses: Vec<Option<LossReport>>,
    /// Labels and error messages of agents whose loss computation failed.
    pub disqualified: Vec<(String, String)>,
    pub winner_index: usize,
    pub winner_model: Model,
    pub tie: bool,
    /// Gap between the lowest and second-lowest loss (0 for one survivor).
    pub margin: f64,
}

impl CompetitionResult {
    pub fn winner_loss(&self) -> f64 {
        self.losses[self.winner_index]
            .as_ref()
            .expect("winner was not disqualified")
            .total
    }
}

/// Tie-break comparator: smaller |J| first, then lexicographic J, then
/// roster order (stable since candidates are scanned in roster order).
fn prefer(challenger: &Model, incumbent: &Model) -> bool {
    (challenger.size(), challenger.indices()) < (incumbent.size(), incumbent.indices())
}

/// Runs a competition: each agent's posterior loss on the shared dataset,
/// winner = argmin with a deterministic tie-break. Agents whose computation
/// fails are disqualified, not fatal, unless no agent survives.
pub fn run_competition(data: &Dataset, roster: &AgentRoster) -> Result<CompetitionResult> {
    let outcomes: Vec<Result<LossReport>> = roster
        .agents
        .par_iter()
        .map(|agent| posterior_loss(data, agent))
        .collect();

    let mut losses = Vec::with_capacity(outcomes.len());
    let mut disqualified = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(report) => losses.push(Some(report)),
            Err(e) => {
                disqualified.push((roster.labels[i].clone(), e.to_string()));
                losses.push(None);
            }
        }
    }

    let survivors: Vec<(usize, f64)> = losses
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().map(|r| (i, r.total)))
        .collect();
    let (first_idx, min_loss) = *survivors
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| {
            let (label, why) = disqualified
                .first()
                .cloned()
                .unwrap_or_default();
            Error::Agent {
                label,
                source: Box::new(Error::invalid("run_competition", why)),
            }
        })?;

    let tie_scale = min_loss.abs().max(f64::MIN_POSITIVE);
    let mut winner_index = first_idx;
    let mut tie = false;
    let mut second_best = f64::INFINITY;
    for &(i, loss) in &survivors {
        let tied_with_min = (loss - min_loss).abs() <= TIE_RTOL * tie_scale;
        if tied_with_min {
            if i != first_idx {
                tie = true;
            }
            if i != winner_index && prefer(&roster.agents[i].model, &roster.agents[winner_index].model)
            {
                winner_index = i;
            }
        } else if loss < second_best {
            second_best = loss;
        }
    }
    let margin = if second_best.is_finite() {
        second_best - min_loss
    } else {
        0.0
    };

    Ok(CompetitionResult {
        winner_model: roster.agents[winner_index].model.clone(),
        losses,
        disqualified,
        winner_index,
        tie,
        margin,
    })
}

/// Sealed-bid second-price auction over the same roster.
#[derive(Debug, Clone, Serialize)]
pub struct AuctionOutcome {
    /// Per-agent dominant-strategy bids `M - loss`; `None` for disqualified.
    pub bids: Vec<Option<f64>>,
    pub winner_index: usize,
    /// Second-highest bid; equals the sole bid for a one-agent roster.
    pub price: f64,
    pub m: f64,
    /// True when the roster had a single surviving bidder.
    pub degenerate: bool,
}

/// Runs the auction: bids are `M - L*`, the winner is the highest bidder
/// (same tie-break as `run_competition`), the price is the second-highest
/// bid. Selection never depends on M.
pub fn run_auction(data: &Dataset, roster: &AgentRoster, m: f64) -> Result<AuctionOutcome> {
    let result = run_competition(data, roster)?;
    let bids: Vec<Option<f64>> = result
        .losses
        .iter()
        .map(|r| r.as_ref().map(|r| m - r.total))
        .collect();
    let mut sorted: Vec<f64> = bids.iter().flatten().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let degenerate = sorted.len() == 1;
    let price = if degenerate { sorted[0] } else { sorted[1] };
    Ok(AuctionOutcome {
        bids,
        winner_index: result.winner_index,
        price,
        m,
        degenerate,
    })
}

/// Convenience: known-variance roster over all subsets, shared gamma and
/// sigma^2, identity assumed moments.
pub fn known_variance_roster(k: usize, gamma: f64, sigma_sq: f64) -> Result<AgentRoster> {
    let hyper = Hyperparameters::new(2.0, 1.0, gamma)?;
    let agents = enumerate_models(k, None)?
        .into_iter()
        .map(|m| {
            let size = m.size();
            let mut a = AgentPrior::new(m, hyper).with_known_variance(sigma_sq);
            a.assumed_xx = DMatrix::identity(size, size);
            a
        })
        .collect();
    AgentRoster::new(agents)
}
