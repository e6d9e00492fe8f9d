//! True data generating process: homoskedastic Gaussian linear regression
//! `y = x'beta0 + eps` with `x ~ N(0, cov_x)` and `eps ~ N(0, sigma0_sq)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check on covariate second moments.
const SYMMETRY_RTOL: f64 = 1e-12;

/// Specification of the true data generating process.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    k: usize,
    beta0: DVector<f64>,
    sigma0_sq: f64,
    cov_x: DMatrix<f64>,
    /// Cached Cholesky factor of `cov_x`, used when sampling covariates.
    chol_l: DMatrix<f64>,
}

impl DgpSpec {
    /// Builds a spec with an explicit covariate second-moment matrix.
    pub fn new(beta0: Vec<f64>, sigma0_sq: f64, cov_x: DMatrix<f64>) -> Result<Self> {
        let k = beta0.len();
        if k == 0 {
            return Err(Error::invalid("DgpSpec", "k must be positive"));
        }
        if sigma0_sq < 0.0 || !sigma0_sq.is_finite() {
            return Err(Error::invalid("DgpSpec", "sigma0_sq must be finite and nonnegative"));
        }
        if cov_x.nrows() != k || cov_x.ncols() != k {
            return Err(Error::invalid("DgpSpec", "cov_x must be k x k"));
        }
        let scale = cov_x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..k {
            for j in (i + 1)..k {
                if (cov_x[(i, j)] - cov_x[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::invalid("DgpSpec", "cov_x is not symmetric"));
                }
            }
        }
        let chol = Cholesky::new(cov_x.clone())
            .ok_or_else(|| Error::invalid("DgpSpec", "cov_x is not positive definite"))?;
        Ok(DgpSpec {
            k,
            beta0: DVector::from_vec(beta0),
            sigma0_sq,
            cov_x,
            chol_l: chol.l(),
        })
    }

    /// Builds a spec with identity covariate second moments.
    pub fn with_identity_cov(beta0: Vec<f64>, sigma0_sq: f64) -> Result<Self> {
        let k = beta0.len();
        Self::new(beta0, sigma0_sq, DMatrix::identity(k, k))
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn beta0(&self) -> &DVector<f64> {
        &self.beta0
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }

    pub fn cov_x(&self) -> &DMatrix<f64> {
        &self.cov_x
    }

    pub fn to_json(&self) -> String {
        let wire = DgpSpecWire::from(self);
        serde_json::to_string_pretty(&wire).expect("spec serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: DgpSpecWire = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<dgp json>".into(),
            message: e.to_string(),
        })?;
        wire.try_into()
    }
}

/// Serialized form: `k`, `beta0`, `sigma0_sq`, `cov_x` as row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct DgpSpecWire {
    k: usize,
    beta0: Vec<f64>,
    sigma0_sq: f64,
    cov_x: Vec<Vec<f64>>,
}

impl From<&DgpSpec> for DgpSpecWire {
    fn from(s: &DgpSpec) -> Self {
        DgpSpecWire {
            k: s.k,
            beta0: s.beta0.iter().copied().collect(),
            sigma0_sq: s.sigma0_sq,
            cov_x: (0..s.k)
                .map(|i| (0..s.k).map(|j| s.cov_x[(i, j)]).collect())
                .collect(),
        }
    }
}

impl TryFrom<DgpSpecWire> for DgpSpec {
    type Error = Error;

    fn try_from(w: DgpSpecWire) -> Result<Self> {
        if w.beta0.len() != w.k {
            return Err(Error::invalid("DgpSpec", "beta0 length does not match k"));
        }
        if w.cov_x.len() != w.k || w.cov_x.iter().any(|r| r.len() != w.k) {
            return Err(Error::invalid("DgpSpec", "cov_x must be k x k"));
        }
        let cov = DMatrix::from_fn(w.k, w.k, |i, j| w.cov_x[i][j]);
        DgpSpec::new(w.beta0, w.sigma0_sq, cov)
    }
}

/// An `(y, X)` sample of `n` observations on `k` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid("Dataset", "rows(X) must equal length(y)"));
        }
        if x.ncols() == 0 {
            return Err(Error::invalid("Dataset", "k must be positive"));
        }
        Ok(Dataset {
            y: DVector::from_vec(y),
            x,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Writes the dataset as CSV with header `y,x1,...,xk` and 17 significant
    /// digits per value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = std::iter::once("y".to_string())
            .chain((1..=self.k()).map(|j| format!("x{j}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n() {
            let mut row = vec![format!("{:.16e}", self.y[i])];
            for j in 0..self.k() {
                row.push(format!("{:.16e}", self.x[(i, j)]));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write cannot fail");
        String::from_utf8(buf).expect("csv output is ascii")
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::read_csv(file, &path.display().to_string())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, path: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse {
                path: path.to_string(),
                message: e.to_string(),
            })?
            .clone();
        if headers.get(0) != Some("y") {
            return Err(Error::Parse {
                path: path.to_string(),
                message: "first column must be `y`".into(),
            });
        }
        let k = headers.len() - 1;
        if k == 0 {
            return Err(Error::Parse {
                path: path.to_string(),
                message: "expected at least one covariate column".into(),
            });
        }
        let mut y = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| Error::Parse {
                path: path.to_string(),
                message: e.to_string(),
            })?;
            if record.len() != k + 1 {
                return Err(Error::Parse {
                    path: path.to_string(),
                    message: format!("expected {} fields, got {}", k + 1, record.len()),
                });
            }
            let mut fields = record.iter().map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_string(),
                    message: format!("bad number `{f}`: {e}"),
                })
            });
            y.push(fields.next().unwrap()?);
            for field in fields {
                rows.push(field?);
            }
        }
        let n = y.len();
        let x = DMatrix::from_fn(n, k, |i, j| rows[i * k + j]);
        Dataset::new(y, x)
    }
}

/// Deterministic seed: a base value plus (sweep, sample size, replication)
/// stream labels. Equal seeds yield equal pseudo-random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub base: u64,
    pub sweep: u64,
    pub n: u64,
    pub rep: u64,
}

impl Seed {
    pub fn new(base: u64) -> Self {
        Seed {
            base,
            sweep: 0,
            n: 0,
            rep: 0,
        }
    }

    pub fn with_labels(base: u64, sweep: u64, n: u64, rep: u64) -> Self {
        Seed { base, sweep, n, rep }
    }

    /// Derives an independent RNG for a named purpose. Streams for distinct
    /// (base, sweep, n, rep, purpose) tuples are mixed through a splitmix64
    /// chain, so replications are order-free.
    pub fn rng(&self, purpose: u64) -> ChaCha12Rng {
        let mut state = self.base ^ 0x9e37_79b9_7f4a_7c15;
        let mut seed_bytes = [0u8; 32];
        for (i, label) in [self.sweep, self.n, self.rep, purpose].iter().enumerate() {
            state = splitmix64(state ^ label.rotate_left(17 * (i as u32 + 1)));
        }
        for chunk in seed_bytes.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed_bytes)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose tags for deriving independent streams from one `Seed`.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const COEF: u64 = 2;
    pub const ORACLE: u64 = 3;
}

/// Samples a dataset of `n` i.i.d. rows from the spec.
pub fn sample_dataset(spec: &DgpSpec, n: usize, seed: Seed) -> Dataset {
    let mut rng = seed.rng(stream::DATA);
    let k = spec.k;
    let noise_sd = spec.sigma0_sq.sqrt();
    let mut x = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    let mut z = DVector::zeros(k);
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let xi = &spec.chol_l * &z;
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * noise_sd;
        y[i] = xi.dot(&spec.beta0) + eps;
        x.row_mut(i).copy_from(&xi.transpose());
    }
    Dataset { y, x }
}

/// Draws a DGP spec: coefficients in `relevant` (1-based) are i.i.d. standard
/// Normal, all others are exactly zero.
pub fn sample_dgp(
    k: usize,
    relevant: &[usize],
    sigma0_sq: f64,
    cov_x: Option<DMatrix<f64>>,
    coef_seed: Seed,
) -> Result<DgpSpec> {
    if relevant.is_empty() {
        return Err(Error::NoRelevantCovariates);
    }
    if relevant.iter().any(|&j| j == 0 || j > k) {
        return Err(Error::invalid("relevant", "indices must lie in 1..=k"));
    }
    let mut rng = coef_seed.rng(stream::COEF);
    let mut beta0 = vec![0.0; k];
    for &j in relevant {
        beta0[j - 1] = StandardNormal.sample(&mut rng);
    }
    match cov_x {
        Some(cov) => DgpSpec::new(beta0, sigma0_sq, cov),
        None => DgpSpec::with_identity_cov(beta0, sigma0_sq),
    }
}

/// Indices (1-based) of the exactly-nonzero coordinates of `beta0`.
pub fn true_model(spec: &DgpSpec) -> Vec<usize> {
    spec.beta0
        .iter()
        .enumerate()
        .filter(|(_, &b)| b != 0.0)
        .map(|(i, _)| i + 1)
        .collect()
}
