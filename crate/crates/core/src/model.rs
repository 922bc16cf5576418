//! Model parameterization: type proportions, infection weights, spread
//! capacity laws, and the mean offspring matrix of the associated
//! multitype branching process.
//!
//! Types are indexed from 0 throughout, including in JSON documents.

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offspring::OffspringLaw;

pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;
pub const EIGEN_TOLERANCE: f64 = 1e-10;
const POWER_ITERATION_CAP: usize = 10_000;

/// JSON form of a model. `J` is redundant with the vector lengths and is
/// checked against them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawModelSpec {
    #[serde(rename = "J")]
    pub types: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub offspring: Vec<OffspringLaw>,
    #[serde(default)]
    pub i0: usize,
}

/// Validated model. `gamma_i` is the proportion of type-`i` vertices and
/// `beta_i = n p_i` the scaled per-vertex infection weight, so the group
/// weight is `alpha_i = gamma_i beta_i` and the alphas sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    offspring: Vec<OffspringLaw>,
    i0: usize,
}

pub fn validate_spec(raw: RawModelSpec) -> Result<ModelSpec> {
    let j = raw.types;
    if j == 0 {
        return Err(Error::InvalidParameter("J must be positive".into()));
    }
    if raw.gamma.len() != j || raw.beta.len() != j || raw.offspring.len() != j {
        return Err(Error::InvalidParameter(format!(
            "J = {j} but gamma, beta, offspring have lengths {}, {}, {}",
            raw.gamma.len(),
            raw.beta.len(),
            raw.offspring.len()
        )));
    }
    if raw.i0 >= j {
        return Err(Error::InvalidParameter(format!("i0 = {} out of range for J = {j}", raw.i0)));
    }
    for (i, (&g, &b)) in raw.gamma.iter().zip(&raw.beta).enumerate() {
        if !(g.is_finite() && g > 0.0 && g <= 1.0) {
            return Err(Error::InvalidParameter(format!("gamma[{i}] = {g} not in (0, 1]")));
        }
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidParameter(format!("beta[{i}] = {b} must be positive")));
        }
    }
    let gamma_sum: f64 = raw.gamma.iter().sum();
    if (gamma_sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::Normalization(format!("sum of gamma = {gamma_sum}")));
    }
    let alpha: Vec<f64> = raw.gamma.iter().zip(&raw.beta).map(|(g, b)| g * b).collect();
    let alpha_sum: f64 = alpha.iter().sum();
    if (alpha_sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::Normalization(format!("sum of gamma_i * beta_i = {alpha_sum}")));
    }
    for law in &raw.offspring {
        if !law.variance().is_finite() || !law.mean().is_finite() {
            return Err(Error::NonFiniteMoment(format!("{:?}", law.family())));
        }
    }
    Ok(ModelSpec { gamma: raw.gamma, beta: raw.beta, alpha, offspring: raw.offspring, i0: raw.i0 })
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;
    fn try_from(raw: RawModelSpec) -> Result<Self> {
        validate_spec(raw)
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(spec: ModelSpec) -> Self {
        RawModelSpec {
            types: spec.gamma.len(),
            gamma: spec.gamma,
            beta: spec.beta,
            offspring: spec.offspring,
            i0: spec.i0,
        }
    }
}

impl ModelSpec {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, offspring: Vec<OffspringLaw>, i0: usize) -> Result<Self> {
        validate_spec(RawModelSpec { types: gamma.len(), gamma, beta, offspring, i0 })
    }

    /// Single type, unit weight.
    pub fn homogeneous(law: OffspringLaw) -> Self {
        Self::new(vec![1.0], vec![1.0], vec![law], 0).expect("homogeneous spec is valid")
    }

    pub fn types(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn offspring(&self) -> &[OffspringLaw] {
        &self.offspring
    }

    pub fn i0(&self) -> usize {
        self.i0
    }

    pub fn with_i0(&self, i0: usize) -> Result<Self> {
        Self::new(self.gamma.clone(), self.beta.clone(), self.offspring.clone(), i0)
    }

    pub fn offspring_means(&self) -> Vec<f64> {
        self.offspring.iter().map(OffspringLaw::mean).collect()
    }

    /// `sum_i alpha_i E[L^i]`, the closed-form spectral radius of the
    /// rank-one mean matrix.
    pub fn rho_closed_form(&self) -> f64 {
        self.alpha.iter().zip(&self.offspring).map(|(a, l)| a * l.mean()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A model realized at population size `n` with integer type counts.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    spec: ModelSpec,
    n: u64,
    counts: Vec<u64>,
}

impl InstanceSpec {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Number of vertices of each type.
    pub fn type_counts(&self) -> &[u64] {
        &self.counts
    }

    /// Per-vertex infection weight of type `i`. Realized as
    /// `alpha_i / n_i` so the total weight is exactly one; this equals
    /// `beta_i / n` whenever `gamma_i n` is an integer.
    pub fn vertex_weight(&self, i: usize) -> f64 {
        self.spec.alpha[i] / self.counts[i] as f64
    }
}

/// Assigns integer type counts by largest-remainder rounding of `gamma_i n`,
/// ties going to the lower type index.
pub fn realize_instance(spec: &ModelSpec, n: u64) -> Result<InstanceSpec> {
    let j = spec.types();
    if n < j as u64 {
        return Err(Error::PopulationTooSmall { n, types: j });
    }
    let mut counts = Vec::with_capacity(j);
    let mut remainders = Vec::with_capacity(j);
    for &g in &spec.gamma {
        let mut q = g * n as f64;
        if (q - q.round()).abs() < 1e-9 {
            q = q.round();
        }
        let fl = q.floor();
        counts.push(fl as u64);
        remainders.push(q - fl);
    }
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..j).collect();
    // stable sort keeps lower index first among equal remainders
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]));
    for &i in order.iter().take((n - assigned) as usize) {
        counts[i] += 1;
    }
    // types rounded down to zero borrow one vertex from the largest class
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..j)
            .filter(|&i| counts[i] >= 2)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .ok_or(Error::PopulationTooSmall { n, types: j })?;
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok(InstanceSpec { spec: spec.clone(), n, counts })
}

/// Alias table over the group weights `alpha`.
#[derive(Debug, Clone)]
pub struct TypeSampler {
    single: bool,
    table: WeightedAliasIndex<f64>,
}

impl TypeSampler {
    pub fn new(alpha: &[f64]) -> Self {
        let table = WeightedAliasIndex::new(alpha.to_vec()).expect("alpha is a valid weight vector");
        Self { single: alpha.len() == 1, table }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.single {
            0
        } else {
            self.table.sample(rng)
        }
    }
}

/// Draws the type composition of `l` offspring: Multinomial(l; alpha).
pub fn multinomial_split<R: Rng + ?Sized>(l: u64, alpha: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0u64; alpha.len()];
    let mut left = l;
    let mut mass = 1.0f64;
    for (j, &a) in alpha.iter().enumerate() {
        if left == 0 {
            break;
        }
        if j + 1 == alpha.len() || mass <= a {
            out[j] = left;
            break;
        }
        let p = (a / mass).clamp(0.0, 1.0);
        let k = Binomial::new(left, p).expect("probability clamped to [0,1]").sample(rng);
        out[j] = k;
        left -= k;
        mass -= a;
    }
    out
}

/// Mean offspring matrix `m_ij = E[L^(i,j)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanMatrix {
    rows: Vec<Vec<f64>>,
}

impl MeanMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let j = rows.len();
        if rows.iter().any(|r| r.len() != j) {
            return Err(Error::InvalidParameter("mean matrix must be square".into()));
        }
        if rows.iter().flatten().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(Error::InvalidParameter("mean matrix entries must be finite and nonnegative".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Row-vector product `z M`: expected next generation given `z`.
    pub fn propagate(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (zi, row) in z.iter().zip(&self.rows) {
            for (o, m) in out.iter_mut().zip(row) {
                *o += zi * m;
            }
        }
        out
    }
}

/// Multinomial splitting makes `m_ij = E[L^i] alpha_j`, a rank-one matrix.
pub fn mean_matrix(spec: &ModelSpec) -> MeanMatrix {
    let rows = spec
        .offspring
        .iter()
        .map(|law| spec.alpha.iter().map(|a| law.mean() * a).collect())
        .collect();
    MeanMatrix { rows }
}

/// Spectral radius by power iteration from the all-ones vector.
pub fn spectral_radius(m: &MeanMatrix) -> Result<f64> {
    let j = m.dim();
    if j == 0 {
        return Ok(0.0);
    }
    let mut v = vec![1.0; j];
    let mut last = f64::NAN;
    for _ in 0..POWER_ITERATION_CAP {
        let w: Vec<f64> = m.rows.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = w.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if norm == 0.0 {
            return Ok(0.0);
        }
        let vnorm = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        let lambda = norm / vnorm;
        if (lambda - last).abs() <= 1e-13 * lambda.max(1.0) {
            return Ok(lambda);
        }
        last = lambda;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    Err(Error::ConvergenceFailure(POWER_ITERATION_CAP))
}
