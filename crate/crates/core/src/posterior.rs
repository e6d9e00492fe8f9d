//! Conjugate Normal-Inverse-Gamma posterior engine.
//!
//! An agent's prior over `(beta_J, sigma^2)` is
//!
//! ```text
//! beta_J | sigma^2 ~ N(0, sigma^2 / (gamma |J|) I)
//! sigma^2          ~ Inv-Gamma(a0, b0)
//! ```
//!
//! and her posterior expected squared prediction loss decomposes as
//!
//! ```text
//! L* = E[sigma^2 | D]  +  E[sigma^2 | D] tr((X_J'X_J + gamma |J| I)^-1 E[x_J x_J'])
//!      \__ model fit __/  \________ model estimation uncertainty ________/
//! ```

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::Dataset;
use crate::error::{Error, Result};

/// Normal-Inverse-Gamma hyperparameters `(a0, b0, gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub a0: f64,
    pub b0: f64,
    pub gamma: f64,
}

impl Hyperparameters {
    pub fn new(a0: f64, b0: f64, gamma: f64) -> Result<Self> {
        if a0 <= 1.0 || !a0.is_finite() {
            return Err(Error::invalid(
                "Hyperparameters",
                "a0 must exceed 1 so the prior mean b0/(a0-1) exists",
            ));
        }
        if b0 <= 0.0 || !b0.is_finite() {
            return Err(Error::invalid("Hyperparameters", "b0 must be positive"));
        }
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(Error::invalid("Hyperparameters", "gamma must be nonnegative"));
        }
        Ok(Hyperparameters { a0, b0, gamma })
    }

    /// Prior mean of the noise variance, `b0 / (a0 - 1)`.
    pub fn prior_sigma2_mean(&self) -> f64 {
        self.b0 / (self.a0 - 1.0)
    }

    /// Validates the fields after deserialization.
    pub fn validate(&self) -> Result<Self> {
        Self::new(self.a0, self.b0, self.gamma)
    }
}

/// A model: the nonempty, strictly increasing set of 1-based covariate
/// indices an agent considers relevant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Model {
    indices: Vec<usize>,
}

impl Model {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("Model", "must contain at least one covariate"));
        }
        if indices[0] == 0 {
            return Err(Error::invalid("Model", "indices are 1-based"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("Model", "indices must be strictly increasing"));
        }
        Ok(Model { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn max_index(&self) -> usize {
        *self.indices.last().expect("model is nonempty")
    }

    pub fn contains_all(&self, other: &[usize]) -> bool {
        other.iter().all(|j| self.indices.binary_search(j).is_ok())
    }

    /// Display label like `{1,3}`.
    pub fn label(&self) -> String {
        let inner: Vec<String> = self.indices.iter().map(|j| j.to_string()).collect();
        format!("{{{}}}", inner.join(","))
    }

    /// Extracts the `n x |J|` submatrix of the covariates in this model.
    pub fn select_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<usize> = self.indices.iter().map(|j| j - 1).collect();
        x.select_columns(cols.iter())
    }

    /// Extracts the entries of a length-k vector belonging to this model.
    pub fn select_entries(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.size(), self.indices.iter().map(|&j| v[j - 1]))
    }
}

/// An agent: a model plus NIG hyperparameters, optionally a dogmatic
/// (known-variance) noise belief, and assumed covariate second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPrior {
    pub model: Model,
    pub hyper: Hyperparameters,
    /// Point-mass belief on the noise variance; when set, `a0`/`b0` are
    /// ignored by loss computation.
    pub known_sigma_sq: Option<f64>,
    /// The agent's assumed `E[x_J x_J']`; identity unless overridden.
    pub assumed_xx: DMatrix<f64>,
}

impl AgentPrior {
    pub fn new(model: Model, hyper: Hyperparameters) -> Self {
        let size = model.size();
        AgentPrior {
            model,
            hyper,
            known_sigma_sq: None,
            assumed_xx: DMatrix::identity(size, size),
        }
    }

    pub fn with_known_variance(mut self, sigma_sq: f64) -> Self {
        self.known_sigma_sq = Some(sigma_sq);
        self
    }

    pub fn with_assumed_xx(mut self, assumed_xx: DMatrix<f64>) -> Result<Self> {
        let m = self.model.size();
        if assumed_xx.nrows() != m || assumed_xx.ncols() != m {
            return Err(Error::invalid("AgentPrior", "assumed_xx must be |J| x |J|"));
        }
        if Cholesky::new(assumed_xx.clone()).is_none() {
            return Err(Error::invalid("AgentPrior", "assumed_xx must be positive definite"));
        }
        self.assumed_xx = assumed_xx;
        Ok(self)
    }
}

/// Posterior moments for one agent on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    /// Posterior mean of `beta_J` (the ridge estimate).
    pub ridge_beta: DVector<f64>,
    /// Posterior mean of the noise variance.
    pub sigma2_mean: f64,
    /// `(X_J'X_J + gamma |J| I)^-1`.
    pub precision_inverse: DMatrix<f64>,
    pub n: usize,
}

/// Posterior loss split into its two components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub model_fit: f64,
    pub estimation_uncertainty: f64,
    pub total: f64,
}

/// Ridge estimate `(X_J'X_J + gamma |J| I)^-1 X_J' y` via Cholesky.
pub fn ridge_estimate(data: &Dataset, model: &Model, gamma: f64) -> Result<DVector<f64>> {
    check_model_fits(data, model)?;
    let xj = model.select_columns(data.x());
    let (chol, _) = penalized_normal_equations(&xj, gamma * model.size() as f64)?;
    Ok(chol.solve(&(xj.transpose() * data.y())))
}

fn check_model_fits(data: &Dataset, model: &Model) -> Result<()> {
    if model.max_index() > data.k() {
        return Err(Error::invalid(
            "Model",
            format!("index {} exceeds dataset k = {}", model.max_index(), data.k()),
        ));
    }
    Ok(())
}

/// Factorizes `X'X + lambda I`, failing on rank deficiency when lambda = 0.
fn penalized_normal_equations(
    xj: &DMatrix<f64>,
    lambda: f64,
) -> Result<(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)> {
    let m = xj.ncols();
    let mut a = xj.transpose() * xj;
    for i in 0..m {
        a[(i, i)] += lambda;
    }
    let chol = Cholesky::new(a.clone()).ok_or(Error::SingularDesign)?;
    Ok((chol, a))
}

/// Closed-form posterior moments for a NIG agent.
///
/// For `n = 0` this returns the prior quantities: `sigma2_mean = b0/(a0-1)`
/// and `precision_inverse = (gamma |J| I)^-1`.
pub fn posterior_summary(data: &Dataset, agent: &AgentPrior) -> Result<PosteriorSummary> {
    check_model_fits(data, &agent.model)?;
    let n = data.n();
    let hyper = &agent.hyper;
    if hyper.a0 + n as f64 / 2.0 <= 1.0 {
        return Err(Error::PosteriorMeanUndefined);
    }
    let m = agent.model.size();
    let lambda = hyper.gamma * m as f64;
    if n == 0 {
        if hyper.gamma == 0.0 {
            return Err(Error::ImproperPriorNoLoss);
        }
        return Ok(PosteriorSummary {
            ridge_beta: DVector::zeros(m),
            sigma2_mean: hyper.prior_sigma2_mean(),
            precision_inverse: DMatrix::identity(m, m) / lambda,
            n,
        });
    }
    let xj = agent.model.select_columns(data.x());
    let (chol, _) = penalized_normal_equations(&xj, lambda)?;
    let ridge_beta = chol.solve(&(xj.transpose() * data.y()));
    let residual = data.y() - &xj * &ridge_beta;
    let penalized_ssr = residual.norm_squared() + lambda * ridge_beta.norm_squared();
    let sigma2_mean = (2.0 * hyper.b0 + penalized_ssr) / (2.0 * hyper.a0 + n as f64 - 2.0);
    Ok(PosteriorSummary {
        ridge_beta,
        sigma2_mean,
        precision_inverse: chol.inverse(),
        n,
    })
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a.nrows();
    let mut t = 0.0;
    for i in 0..m {
        for j in 0..m {
            t += a[(i, j)] * b[(j, i)];
        }
    }
    t
}

/// Posterior expected loss of the agent's Bayes predictor, decomposed into
/// model fit and model estimation uncertainty.
pub fn posterior_loss(data: &Dataset, agent: &AgentPrior) -> Result<LossReport> {
    if let Some(sigma_sq) = agent.known_sigma_sq {
        let total = posterior_loss_known_variance(
            data,
            &agent.model,
            agent.hyper.gamma,
            sigma_sq,
            &agent.assumed_xx,
        )?;
        return Ok(LossReport {
            model_fit: sigma_sq,
            estimation_uncertainty: total - sigma_sq,
            total,
        });
    }
    let summary = posterior_summary(data, agent)?;
    let model_fit = summary.sigma2_mean;
    let estimation_uncertainty =
        summary.sigma2_mean * trace_product(&summary.precision_inverse, &agent.assumed_xx);
    Ok(LossReport {
        model_fit,
        estimation_uncertainty,
        total: model_fit + estimation_uncertainty,
    })
}

/// Loss of an agent whose noise-variance belief is a point mass:
/// `sigma^2 (1 + tr((X_J'X_J + gamma |J| I)^-1 assumed_xx))`.
pub fn posterior_loss_known_variance(
    data: &Dataset,
    model: &Model,
    gamma: f64,
    sigma_sq: f64,
    assumed_xx: &DMatrix<f64>,
) -> Result<f64> {
    if sigma_sq <= 0.0 || sigma_sq.is_nan() {
        return Err(Error::invalid("sigma_sq", "known variance must be positive"));
    }
    check_model_fits(data, model)?;
    let xj = model.select_columns(data.x());
    let (chol, _) = penalized_normal_equations(&xj, gamma * model.size() as f64)?;
    let precision_inverse = chol.inverse();
    Ok(sigma_sq + sigma_sq * trace_product(&precision_inverse, assumed_xx))
}

/// Bayes prediction at a fresh covariate draw: `x_J' ridge_beta`.
pub fn bayes_predict(summary: &PosteriorSummary, model: &Model, x: &DVector<f64>) -> f64 {
    model.select_entries(x).dot(&summary.ridge_beta)
}

/// Ex-ante (pre-data) expected loss under the agent's own marginal,
/// `(b0/(a0-1)) (1 + |J|/(n - |J| - 1))`, valid for `n > |J| + 1` in the
/// `gamma -> 0` regime with identity assumed moments.
pub fn exante_expected_loss(agent: &AgentPrior, n: usize) -> Result<f64> {
    let j = agent.model.size();
    if n <= j + 1 {
        return Err(Error::InverseWishartMeanUndefined);
    }
    let dim_term = j as f64 / (n - j - 1) as f64;
    Ok(agent.hyper.prior_sigma2_mean() * (1.0 + dim_term))
}
