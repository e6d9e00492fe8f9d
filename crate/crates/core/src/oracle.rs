//! Slow, independent brute-force validators for the closed-form posterior
//! machinery: tensor-grid quadrature over (beta, sigma^2) and Monte Carlo
//! integration over the agent's own marginal distribution of the data.

use nalgebra::DVector;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dgp::{sample_dataset, stream, Dataset, DgpSpec, Seed};
use crate::error::{Error, Result};
use crate::posterior::{posterior_loss, AgentPrior, Hyperparameters, Model};

/// Tensor quadrature grid over the model's (beta, sigma^2) space.
///
/// Nodes per coordinate are placed at equal prior-CDF increments, so the
/// grid is dense where the prior is, and integrated with the nonuniform
/// trapezoid rule.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub beta_ranges: Vec<(f64, f64)>,
    pub beta_points: Vec<usize>,
    pub sigma2_range: (f64, f64),
    pub sigma2_points: usize,
}

/// Fraction of prior mass each marginal range must cover.
const MIN_MASS: f64 = 0.999;

/// Prior quantile levels defining the automatic ranges, before widening.
const RANGE_QUANTILES: (f64, f64) = (0.0005, 0.9995);

/// Upper quantile for the sigma^2 axis. The sigma^2-mean integrand decays
/// only polynomially in the upper tail, so the range must reach far deeper
/// there than the beta rule to keep truncation below the grid error.
const SIGMA2_UPPER_QUANTILE: f64 = 1.0 - 1e-7;

/// Factor by which automatic ranges are widened around their midpoint.
const RANGE_WIDENING: f64 = 2.0;

impl QuadratureGrid {
    pub fn new(
        beta_ranges: Vec<(f64, f64)>,
        beta_points: Vec<usize>,
        sigma2_range: (f64, f64),
        sigma2_points: usize,
    ) -> Result<Self> {
        if beta_ranges.len() != beta_points.len() || beta_ranges.is_empty() {
            return Err(Error::invalid(
                "QuadratureGrid",
                "one point count per beta coordinate required",
            ));
        }
        for &(lo, hi) in beta_ranges.iter().chain(std::iter::once(&sigma2_range)) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid("QuadratureGrid", "ranges must be finite and ordered"));
            }
        }
        if sigma2_range.0 <= 0.0 {
            return Err(Error::invalid("QuadratureGrid", "sigma2 range must be positive"));
        }
        if beta_points.iter().chain(std::iter::once(&sigma2_points)).any(|&p| p < 41) {
            return Err(Error::invalid("QuadratureGrid", "point counts must be at least 41"));
        }
        Ok(QuadratureGrid {
            beta_ranges,
            beta_points,
            sigma2_range,
            sigma2_points,
        })
    }

    /// Auto-derives ranges from the prior's marginal quantiles
    /// (0.0005 to 0.9995, widened 2x around the midpoint).
    pub fn auto(model: &Model, hyper: &Hyperparameters, beta_points: usize, sigma2_points: usize) -> Result<Self> {
        let m = model.size();
        let (blo, bhi) = widen((
            beta_prior_quantile(hyper, m, RANGE_QUANTILES.0),
            beta_prior_quantile(hyper, m, RANGE_QUANTILES.1),
        ));
        let (slo, shi) = widen((
            inv_gamma_quantile(hyper.a0, hyper.b0, RANGE_QUANTILES.0),
            inv_gamma_quantile(hyper.a0, hyper.b0, SIGMA2_UPPER_QUANTILE),
        ));
        // Widening can push the lower end to or below zero; the prior mass
        // below this floor is ~1e-9, far under the truncation tolerance.
        let floor = inv_gamma_quantile(hyper.a0, hyper.b0, 1e-9);
        Self::new(
            vec![(blo, bhi); m],
            vec![beta_points; m],
            (slo.max(floor), shi),
            sigma2_points,
        )
    }

    pub fn refined(&self) -> Result<Self> {
        Self::new(
            self.beta_ranges.clone(),
            self.beta_points.iter().map(|&p| 2 * p).collect(),
            self.sigma2_range,
            2 * self.sigma2_points,
        )
    }
}

fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo) * RANGE_WIDENING;
    (mid - half, mid + half)
}

/// Quantile of the prior beta marginal: Student-t with df = 2 a0 and
/// scale^2 = b0 / (a0 gamma |J|).
fn beta_prior_quantile(hyper: &Hyperparameters, model_size: usize, p: f64) -> f64 {
    let scale = (hyper.b0 / (hyper.a0 * hyper.gamma * model_size as f64)).sqrt();
    let t = StudentsT::new(0.0, 1.0, 2.0 * hyper.a0).expect("valid dof");
    scale * t.inverse_cdf(p)
}

/// Inverse-Gamma(a, b) CDF and quantile via the Gamma distribution of 1/x.
fn inv_gamma_cdf(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let g = statrs::distribution::Gamma::new(a, b).expect("valid gamma");
    1.0 - g.cdf(1.0 / x)
}

fn inv_gamma_quantile(a: f64, b: f64, p: f64) -> f64 {
    let g = statrs::distribution::Gamma::new(a, b).expect("valid gamma");
    1.0 / g.inverse_cdf(1.0 - p)
}

fn student_t_cdf(hyper: &Hyperparameters, model_size: usize, x: f64) -> f64 {
    let scale = (hyper.b0 / (hyper.a0 * hyper.gamma * model_size as f64)).sqrt();
    let t = StudentsT::new(0.0, 1.0, 2.0 * hyper.a0).expect("valid dof");
    t.cdf(x / scale)
}

/// Nodes at equal prior-CDF increments between the range's quantile levels.
fn cdf_spaced_nodes(
    lo: f64,
    hi: f64,
    points: usize,
    cdf: impl Fn(f64) -> f64,
    quantile: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let (plo, phi) = (cdf(lo), cdf(hi));
    (0..points)
        .map(|i| {
            let p = plo + (phi - plo) * i as f64 / (points - 1) as f64;
            quantile(p).clamp(lo, hi)
        })
        .collect()
}

/// Posterior mean of sigma^2 by brute-force quadrature: tensor grid over
/// (beta, sigma^2), nonuniform trapezoid weights, all accumulation in the
/// log domain.
pub fn quadrature_posterior_sigma2(
    data: &Dataset,
    model: &Model,
    hyper: &Hyperparameters,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let m = model.size();
    if m > 2 {
        return Err(Error::invalid("quadrature", "|J| must be at most 2"));
    }
    if data.n() == 0 {
        return Err(Error::invalid("quadrature", "n must be at least 1"));
    }
    if grid.beta_ranges.len() != m {
        return Err(Error::invalid("quadrature", "grid dimension must equal |J|"));
    }
    if hyper.gamma <= 0.0 {
        return Err(Error::invalid("quadrature", "gamma must be positive for a proper prior"));
    }

    // Truncation check: each marginal range must hold >= 99.9% prior mass.
    for &(lo, hi) in &grid.beta_ranges {
        let mass = student_t_cdf(hyper, m, hi) - student_t_cdf(hyper, m, lo);
        if mass < MIN_MASS {
            return Err(Error::GridTruncation);
        }
    }
    let sigma_mass = inv_gamma_cdf(hyper.a0, hyper.b0, grid.sigma2_range.1)
        - inv_gamma_cdf(hyper.a0, hyper.b0, grid.sigma2_range.0);
    if sigma_mass < MIN_MASS {
        return Err(Error::GridTruncation);
    }

    let beta_axes: Vec<Vec<f64>> = grid
        .beta_ranges
        .iter()
        .zip(&grid.beta_points)
        .map(|(&(lo, hi), &pts)| {
            cdf_spaced_nodes(
                lo,
                hi,
                pts,
                |x| student_t_cdf(hyper, m, x),
                |p| {
                    let scale = (hyper.b0 / (hyper.a0 * hyper.gamma * m as f64)).sqrt();
                    let t = StudentsT::new(0.0, 1.0, 2.0 * hyper.a0).expect("valid dof");
                    scale * t.inverse_cdf(p)
                },
            )
        })
        .collect();
    // Log-uniform sigma^2 axis: the integrand decays only polynomially in
    // sigma^2 but exponentially in ln(sigma^2), so a uniform log grid keeps
    // the trapezoid error controlled through the whole upper tail.
    let sigma_axis: Vec<f64> = {
        let (lo, hi) = (grid.sigma2_range.0.ln(), grid.sigma2_range.1.ln());
        (0..grid.sigma2_points)
            .map(|i| (lo + (hi - lo) * i as f64 / (grid.sigma2_points - 1) as f64).exp())
            .collect()
    };

    let xj = model.select_columns(data.x());
    let n = data.n() as f64;
    let lambda = hyper.gamma * m as f64;

    // The log joint in (beta, sigma2) splits, up to additive constants that
    // cancel in the posterior-mean ratio, into a per-sigma part and the
    // penalized sum of squares ||y - X beta||^2 + lambda ||beta||^2 scaled
    // by 1/(2 sigma2). Hoisting both keeps the tensor loop cheap.
    let ln_s2_coef = -(0.5 * n + 0.5 * m as f64 + hyper.a0 + 1.0);
    let per_sigma: Vec<(f64, f64, f64)> = sigma_axis
        .iter()
        .enumerate()
        .map(|(si, &s2)| {
            let base = ln_s2_coef * s2.ln() - hyper.b0 / s2
                + trapezoid_weight(&sigma_axis, si).ln();
            (base, 0.5 / s2, s2.ln())
        })
        .collect();

    // Streaming logsumexp over the tensor grid with trapezoid weights.
    let mut num = LogAccumulator::new();
    let mut den = LogAccumulator::new();
    let mut beta = DVector::zeros(m);
    let mut index = vec![0usize; m];
    loop {
        let mut log_wb = 0.0;
        for (d, &i) in index.iter().enumerate() {
            beta[d] = beta_axes[d][i];
            log_wb += trapezoid_weight(&beta_axes[d], i).ln();
        }
        let penalized_ssr =
            (data.y() - &xj * &beta).norm_squared() + lambda * beta.norm_squared();
        for &(base, half_inv_s2, ln_s2) in &per_sigma {
            let lj = base + log_wb - penalized_ssr * half_inv_s2;
            den.add(lj);
            num.add(lj + ln_s2);
        }
        // Odometer over the beta grid.
        let mut d = 0;
        loop {
            if d == m {
                return Ok((num.log_sum() - den.log_sum()).exp());
            }
            index[d] += 1;
            if index[d] < beta_axes[d].len() {
                break;
            }
            index[d] = 0;
            d += 1;
        }
    }
}

fn trapezoid_weight(axis: &[f64], i: usize) -> f64 {
    let left = if i == 0 { axis[0] } else { axis[i - 1] };
    let right = if i + 1 == axis.len() { axis[i] } else { axis[i + 1] };
    0.5 * (right - left)
}

/// Streaming log-sum-exp with a running maximum.
struct LogAccumulator {
    max: f64,
    sum: f64,
}

impl LogAccumulator {
    fn new() -> Self {
        LogAccumulator {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn add(&mut self, log_term: f64) {
        if log_term == f64::NEG_INFINITY {
            return;
        }
        if log_term > self.max {
            self.sum = self.sum * (self.max - log_term).exp() + 1.0;
            self.max = log_term;
        } else {
            self.sum += (log_term - self.max).exp();
        }
    }

    fn log_sum(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Monte Carlo estimate of the agent's pre-data expected posterior loss,
/// integrating over her own marginal: draw sigma^2 from the Inverse-Gamma
/// prior, beta from the conditional Normal, a dataset of size n with
/// identity covariate moments, then average `posterior_loss`.
///
/// Returns the estimate and its standard error from replication variance.
pub fn mc_marginal_loss(
    agent: &AgentPrior,
    n: usize,
    reps: usize,
    seed: Seed,
) -> Result<(f64, f64)> {
    if reps == 0 {
        return Err(Error::invalid("mc_marginal_loss", "reps must be at least 1"));
    }
    let m = agent.model.size();
    // The dataset is generated directly in the model's coordinates, so the
    // agent is remapped onto columns {1..|J|}.
    let local = AgentPrior {
        model: Model::new((1..=m).collect()).unwrap(),
        hyper: agent.hyper,
        known_sigma_sq: agent.known_sigma_sq,
        assumed_xx: agent.assumed_xx.clone(),
    };
    let gamma = agent.hyper.gamma;
    if gamma <= 0.0 {
        return Err(Error::invalid("mc_marginal_loss", "gamma must be positive"));
    }

    let losses: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = Seed::with_labels(seed.base, seed.sweep, n as u64, rep as u64);
            let mut rng = rep_seed.rng(stream::ORACLE);
            // sigma^2 ~ InvGamma(a0, b0) via 1 / Gamma(a0, scale = 1/b0).
            let gamma_draw: f64 = rand_distr::Distribution::sample(
                &rand_distr::Gamma::new(agent.hyper.a0, 1.0 / agent.hyper.b0)
                    .expect("valid gamma params"),
                &mut rng,
            );
            let sigma_sq = 1.0 / gamma_draw;
            let coef_sd = (sigma_sq / (gamma * m as f64)).sqrt();
            let beta: Vec<f64> = (0..m)
                .map(|_| {
                    let z: f64 = rand_distr::Distribution::sample(
                        &rand_distr::StandardNormal,
                        &mut rng,
                    );
                    coef_sd * z
                })
                .collect();
            let spec = DgpSpec::with_identity_cov(beta, sigma_sq).expect("valid spec");
            let data = sample_dataset(&spec, n, rep_seed);
            posterior_loss(&data, &local).map(|r| r.total)
        })
        .collect::<Result<Vec<f64>>>()?;

    // Deterministic pairwise summation, independent of the parallel schedule.
    let mean = pairwise_sum(&losses) / reps as f64;
    let sq_dev: Vec<f64> = losses.iter().map(|&l| (l - mean) * (l - mean)).collect();
    let var = if reps > 1 {
        pairwise_sum(&sq_dev) / (reps - 1) as f64
    } else {
        0.0
    };
    Ok((mean, (var / reps as f64).sqrt()))
}

fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        len => {
            let mid = len / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}
