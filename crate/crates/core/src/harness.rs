//! Replicated Monte Carlo experiments checked against the closed-form
//! predictions.
//!
//! Every replicate draws from its own `ChaCha8Rng` seeded by hashing the
//! master seed with the population index, the replicate stream and the
//! replicate index, and results are gathered in index order. Reports are
//! therefore identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{acquisition_variance, covariance, predictions, CovarianceKernel, CwVariant, KernelKind, Predictions};
use crate::chain::{continuous_snapshot, run_epidemic, ContinuousSnapshot, EpidemicRow, RunOptions, SnapshotOptions};
use crate::error::{Error, Result};
use crate::mgw::{classify_survival, run_coupled};
use crate::model::{realize_instance, InstanceSpec, ModelSpec};
use crate::offspring::{Family, OffspringLaw};
use crate::stats::{
    chi_square_gof, chi_square_independence, covariance_with_se, ks_normality, normal_two_sided_p, summarize,
    variance_std_error,
};

pub const MIN_SURVIVORS: usize = 30;
pub const MIN_COVARIANCE_SNAPSHOTS: usize = 500;
pub const KAPPA_GRID: [f64; 3] = [0.2, 0.5, 0.8];

const STREAM_EPIDEMIC: u64 = 1;
const STREAM_SNAPSHOT: u64 = 2;
const STREAM_ACQUISITION: u64 = 3;
const STREAM_COUPLED: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    /// Survivor means of `tau/n`, `N/n`, `tau~/n` against `theta` and `w`.
    Lln,
    /// KS normality of the standardized duration and final size.
    CltNormality,
    /// Sample variances against the central limit constants.
    Variance,
    /// Fraction of runs classified extinct against `sigma^MGW`.
    ExtinctFraction,
    /// Survival classification agreement across `kappa` in {0.2, 0.5, 0.8}.
    KappaInvariance,
    /// Unconditioned mean of `tau/n` against `theta (1 - sigma^MGW)`.
    Conditioning,
    /// Mean and variance of the Poissonized per-type counts.
    Poissonization,
    /// Empirical covariances of the Poissonized processes against the kernels.
    Covariance,
    /// Variance of standardized acquisition times against `sigma^i(q)`.
    Acquisition,
    /// Independence of a revealed capacity and its acquisition time.
    Independence,
    /// Revealed capacities against the input offspring law.
    CapacityLaw,
}

impl CheckId {
    pub const ALL: [CheckId; 11] = [
        CheckId::Lln,
        CheckId::CltNormality,
        CheckId::Variance,
        CheckId::ExtinctFraction,
        CheckId::KappaInvariance,
        CheckId::Conditioning,
        CheckId::Poissonization,
        CheckId::Covariance,
        CheckId::Acquisition,
        CheckId::Independence,
        CheckId::CapacityLaw,
    ];

    fn needs_epidemics(self) -> bool {
        matches!(
            self,
            CheckId::Lln
                | CheckId::CltNormality
                | CheckId::Variance
                | CheckId::ExtinctFraction
                | CheckId::KappaInvariance
                | CheckId::Conditioning
        )
    }

    fn needs_theta(self) -> bool {
        self.needs_epidemics()
    }

    pub fn name(self) -> String {
        serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub lln: f64,
    pub lln_tau_tilde: f64,
    pub variance: f64,
    pub variance_w: f64,
    pub extinct_fraction: f64,
    pub kappa_agreement: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { lln: 0.01, lln_tau_tilde: 0.015, variance: 0.10, variance_w: 0.15, extinct_fraction: 0.01, kappa_agreement: 0.999 }
    }
}

/// Which revealed capacity `L^i_l` (and its acquisition time) the
/// independence check examines. Indices are 0-based for the type and
/// 1-based for `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityIndex {
    #[serde(rename = "type")]
    pub type_index: usize,
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    N,
    Beta,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub parameter: SweepParameter,
    #[serde(rename = "type", default)]
    pub type_index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebalanceRule {
    /// Solve for `beta_k` of one designated type.
    AdjustType,
    /// Scale every other `beta_j` by a common factor.
    ScaleOthers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rebalance {
    pub rule: RebalanceRule,
    #[serde(rename = "type", default)]
    pub type_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axes: Vec<SweepAxis>,
    #[serde(default)]
    pub rebalance: Option<Rebalance>,
}

fn default_replicates() -> usize {
    100
}
fn default_true() -> bool {
    true
}
fn default_kappa() -> f64 {
    0.5
}
fn default_grid() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_quantiles() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n_values: Vec<u64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub condition_on_survival: bool,
    /// Count `replicates` as surviving runs, running further replicates in
    /// index order until that many survive.
    #[serde(default)]
    pub survivors_target: bool,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub checks: Vec<CheckId>,
    #[serde(default)]
    pub c_w_variant: CwVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_override: Option<f64>,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub independence: Option<CapacityIndex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec, n: u64, replicates: usize, seed: u64, checks: Vec<CheckId>) -> Self {
        Self {
            model,
            n: None,
            n_values: vec![n],
            replicates,
            seed,
            condition_on_survival: true,
            survivors_target: false,
            kappa: default_kappa(),
            checks,
            c_w_variant: CwVariant::default(),
            theta_override: None,
            grid: default_grid(),
            quantiles: default_quantiles(),
            tolerances: Tolerances::default(),
            independence: None,
            sweep: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Population sizes, from `n_values` or else the single `n`.
    pub fn populations(&self) -> Result<Vec<u64>> {
        if !self.n_values.is_empty() {
            Ok(self.n_values.clone())
        } else if let Some(n) = self.n {
            Ok(vec![n])
        } else {
            Err(Error::Config("config needs `n` or a nonempty `n_values`".into()))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ns = self.populations()?;
        if ns.contains(&0) {
            return Err(Error::Config("population sizes must be positive".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be positive".into()));
        }
        if self.replicates < 2 && self.checks.iter().any(|c| c != &CheckId::ExtinctFraction) {
            return Err(Error::Config("variance-based checks need at least 2 replicates".into()));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("kappa = {} not in (0, 1)", self.kappa)));
        }
        if let Some(t) = self.theta_override {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("theta_override = {t} must be positive")));
            }
        }
        if self.grid.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid must be strictly increasing and nonnegative".into()));
        }
        if self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::Config("quantiles must lie in (0, 1)".into()));
        }
        if let Some(ix) = self.independence {
            if ix.type_index >= self.model.types() || ix.l == 0 {
                return Err(Error::Config("independence index out of range".into()));
            }
        }
        Ok(())
    }
}

/// 64-bit avalanche mix (splitmix64 finalizer).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `index` in `stream` for the `n_index`-th population.
pub fn derive_seed(master: u64, n_index: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(mix64(master) ^ n_index) ^ stream) ^ index)
}

pub fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Inconclusive,
    Fail,
}

impl Verdict {
    /// `|z| < 3` passes, `|z| > 4` fails.
    pub fn from_z(z: f64) -> Self {
        if !z.is_finite() {
            Verdict::Fail
        } else if z.abs() < 3.0 {
            Verdict::Pass
        } else if z.abs() <= 4.0 {
            Verdict::Inconclusive
        } else {
            Verdict::Fail
        }
    }

    /// `p > 0.01` passes, `p < 0.001` fails.
    pub fn from_p(p: f64) -> Self {
        if p.is_nan() {
            Verdict::Fail
        } else if p > 0.01 {
            Verdict::Pass
        } else if p >= 0.001 {
            Verdict::Inconclusive
        } else {
            Verdict::Fail
        }
    }

    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// JSON has no NaN or infinity: non-finite values are written as the
/// strings `"NaN"`, `"inf"`, `"-inf"`.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(x: f64) -> Repr {
        if x.is_finite() {
            Repr::Num(x)
        } else if x.is_nan() {
            Repr::Text("NaN".into())
        } else if x > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => t.parse::<f64>().map_err(|_| E::custom(format!("not a number: {t}"))),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            x.map(to_repr).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measurement {
    pub quantity: String,
    #[serde(with = "lenient_f64")]
    pub estimate: f64,
    #[serde(with = "lenient_f64")]
    pub target: f64,
    #[serde(with = "lenient_f64::option")]
    pub std_error: Option<f64>,
    #[serde(with = "lenient_f64::option")]
    pub statistic: Option<f64>,
    #[serde(with = "lenient_f64::option")]
    pub p_value: Option<f64>,
    #[serde(with = "lenient_f64::option")]
    pub z_score: Option<f64>,
    pub verdict: Verdict,
    /// Reported for information; does not enter the check verdict.
    pub supplementary: bool,
    pub note: Option<String>,
}

fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

impl PartialEq for Measurement {
    fn eq(&self, o: &Self) -> bool {
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => same(x, y),
            (x, y) => x.is_none() && y.is_none(),
        };
        self.quantity == o.quantity
            && same(self.estimate, o.estimate)
            && same(self.target, o.target)
            && opt(self.std_error, o.std_error)
            && opt(self.statistic, o.statistic)
            && opt(self.p_value, o.p_value)
            && opt(self.z_score, o.z_score)
            && self.verdict == o.verdict
            && self.supplementary == o.supplementary
            && self.note == o.note
    }
}

impl Measurement {
    fn tolerance(quantity: impl Into<String>, estimate: f64, target: f64, tol: f64, se: Option<f64>) -> Self {
        Self {
            quantity: quantity.into(),
            estimate,
            target,
            std_error: se,
            statistic: Some((estimate - target).abs()),
            p_value: None,
            z_score: se.filter(|s| *s > 0.0).map(|s| (estimate - target) / s),
            verdict: Verdict::from_bool((estimate - target).abs() < tol),
            supplementary: false,
            note: Some(format!("tolerance {tol}")),
        }
    }

    fn relative(quantity: impl Into<String>, estimate: f64, target: f64, tol: f64, se: Option<f64>) -> Self {
        let rel = (estimate - target).abs() / target.abs();
        Self {
            quantity: quantity.into(),
            estimate,
            target,
            std_error: se,
            statistic: Some(rel),
            p_value: None,
            z_score: se.filter(|s| *s > 0.0).map(|s| (estimate - target) / s),
            verdict: Verdict::from_bool(target > 0.0 && rel < tol),
            supplementary: false,
            note: Some(format!("relative tolerance {tol}")),
        }
    }

    fn z(quantity: impl Into<String>, estimate: f64, target: f64, se: f64) -> Self {
        let diff = estimate - target;
        let z = if se > 0.0 {
            diff / se
        } else if diff.abs() < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            quantity: quantity.into(),
            estimate,
            target,
            std_error: Some(se),
            statistic: None,
            p_value: Some(normal_two_sided_p(z)),
            z_score: Some(z),
            verdict: Verdict::from_z(z),
            supplementary: false,
            note: None,
        }
    }

    fn p(quantity: impl Into<String>, statistic: f64, p: f64) -> Self {
        Self {
            quantity: quantity.into(),
            estimate: statistic,
            target: 0.0,
            std_error: None,
            statistic: Some(statistic),
            p_value: Some(p),
            z_score: None,
            verdict: Verdict::from_p(p),
            supplementary: false,
            note: None,
        }
    }

    fn failed(quantity: impl Into<String>, note: String) -> Self {
        Self {
            quantity: quantity.into(),
            estimate: f64::NAN,
            target: f64::NAN,
            std_error: None,
            statistic: None,
            p_value: None,
            z_score: None,
            verdict: Verdict::Fail,
            supplementary: false,
            note: Some(note),
        }
    }

    fn supplementary(mut self) -> Self {
        self.supplementary = true;
        self
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check: CheckId,
    pub n: u64,
    pub replicates_used: usize,
    pub verdict: Verdict,
    pub measurements: Vec<Measurement>,
}

impl CheckRecord {
    fn new(check: CheckId, n: u64, replicates_used: usize, measurements: Vec<Measurement>) -> Self {
        let verdict = measurements.iter().filter(|m| !m.supplementary).map(|m| m.verdict).max().unwrap_or(Verdict::Pass);
        Self { check, n, replicates_used, verdict, measurements }
    }

    pub fn measurement(&self, quantity: &str) -> Option<&Measurement> {
        self.measurements.iter().find(|m| m.quantity == quantity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivalCounts {
    pub n: u64,
    pub total: usize,
    pub surviving: usize,
    pub extinct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub n_values: Vec<u64>,
    pub replicates: usize,
    pub kappa: f64,
    pub c_w_variant: CwVariant,
    pub theta_used: Option<f64>,
    pub predictions: Option<Predictions>,
    pub survival: Vec<SurvivalCounts>,
    pub records: Vec<CheckRecord>,
    /// Number of individual statistical comparisons in the report.
    pub tests_performed: usize,
    pub overall: Verdict,
}

/// Flat CSV row, one per measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub check: String,
    pub n: u64,
    pub quantity: String,
    pub estimate: f64,
    pub target: f64,
    pub std_error: Option<f64>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub z_score: Option<f64>,
    pub verdict: Verdict,
    pub supplementary: bool,
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.records
            .iter()
            .flat_map(|r| {
                r.measurements.iter().map(move |m| ReportRow {
                    check: r.check.name(),
                    n: r.n,
                    quantity: m.quantity.clone(),
                    estimate: m.estimate,
                    target: m.target,
                    std_error: m.std_error,
                    statistic: m.statistic,
                    p_value: m.p_value,
                    z_score: m.z_score,
                    verdict: m.verdict,
                    supplementary: m.supplementary,
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn record(&self, check: CheckId, n: u64) -> Option<&CheckRecord> {
        self.records.iter().find(|r| r.check == check && r.n == n)
    }
}

/// Summary of one chain run kept by the harness.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub index: u64,
    pub seed: u64,
    pub tau: u64,
    pub tau_tilde: f64,
    pub total_infected: u64,
    pub final_counts: Vec<u64>,
    pub full_transmission: bool,
}

fn run_replicate(instance: &InstanceSpec, seed: u64, index: u64) -> Result<ReplicateOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = run_epidemic(instance, &mut rng, RunOptions::default())?;
    Ok(ReplicateOutcome {
        index,
        seed,
        tau: r.tau,
        tau_tilde: r.tau_tilde,
        total_infected: r.total_infected,
        final_counts: r.final_counts,
        full_transmission: r.full_transmission,
    })
}

/// Runs replicates `range` of the epidemic stream in parallel, in index order.
pub fn run_replicates(
    instance: &InstanceSpec,
    master: u64,
    n_index: u64,
    range: std::ops::Range<u64>,
    pool: &rayon::ThreadPool,
) -> Result<Vec<ReplicateOutcome>> {
    pool.install(|| {
        range
            .into_par_iter()
            .map(|r| run_replicate(instance, derive_seed(master, n_index, STREAM_EPIDEMIC, r), r))
            .collect()
    })
}

fn survives(o: &ReplicateOutcome, n: u64, theta: f64, kappa: f64) -> bool {
    o.tau as f64 >= kappa * theta * n as f64
}

/// Replicate rows for the `simulate` command; `survived_flag` uses the
/// classifier when the model is supercritical.
pub fn simulate(config: &ExperimentConfig, n: u64, n_index: u64, threads: Option<usize>) -> Result<Vec<EpidemicRow>> {
    let instance = realize_instance(&config.model, n)?;
    let pool = build_pool(threads)?;
    let theta = config.theta_override.or_else(|| crate::asymptotics::solve_theta(&config.model).ok());
    pool.install(|| {
        (0..config.replicates as u64)
            .into_par_iter()
            .map(|r| {
                let seed = derive_seed(config.seed, n_index, STREAM_EPIDEMIC, r);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let res = run_epidemic(&instance, &mut rng, RunOptions::default())?;
                let survived = match theta {
                    Some(t) => classify_survival(&res, t, config.kappa)?,
                    None => false,
                };
                Ok(EpidemicRow::new(r, seed, &res, survived))
            })
            .collect()
    })
}

struct EpidemicSample {
    all: Vec<ReplicateOutcome>,
    survivors: Vec<usize>,
}

fn collect_epidemics(
    config: &ExperimentConfig,
    instance: &InstanceSpec,
    n_index: u64,
    theta: f64,
    pool: &rayon::ThreadPool,
) -> Result<EpidemicSample> {
    let n = instance.n();
    let want = config.replicates;
    if !config.survivors_target {
        let all = run_replicates(instance, config.seed, n_index, 0..want as u64, pool)?;
        let survivors = (0..all.len()).filter(|&k| survives(&all[k], n, theta, config.kappa)).collect();
        return Ok(EpidemicSample { all, survivors });
    }
    // extend in index order until `want` survivors exist, then cut right
    // after the last needed survivor
    let cap = 50 * want as u64;
    let mut all = Vec::new();
    let mut survivors = Vec::new();
    let mut next = 0u64;
    while survivors.len() < want && next < cap {
        let batch = (want - survivors.len()).max(64) as u64 * 5 / 4;
        let end = (next + batch).min(cap);
        let chunk = run_replicates(instance, config.seed, n_index, next..end, pool)?;
        for o in chunk {
            if survivors.len() >= want {
                break;
            }
            if survives(&o, n, theta, config.kappa) {
                survivors.push(all.len());
            }
            all.push(o);
        }
        next = end;
    }
    if survivors.len() < want {
        return Err(Error::InsufficientSurvivors { needed: want, got: survivors.len() });
    }
    Ok(EpidemicSample { all, survivors })
}

#[allow(clippy::too_many_arguments)]
fn snapshots(
    instance: &InstanceSpec,
    grid: &[f64],
    opts: &SnapshotOptions,
    master: u64,
    n_index: u64,
    stream: u64,
    count: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<ContinuousSnapshot>> {
    pool.install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, n_index, stream, r));
                continuous_snapshot(instance, grid, opts, &mut rng)
            })
            .collect()
    })
}

/// Runs every requested check for every population size.
pub fn run_experiment(config: &ExperimentConfig, threads: Option<usize>) -> Result<ValidationReport> {
    config.validate()?;
    let ns = config.populations()?;
    let spec = &config.model;
    let pool = build_pool(threads)?;
    let mut checks = config.checks.clone();
    checks.sort();
    checks.dedup();

    let needs_theta = checks.iter().any(|c| c.needs_theta());
    let preds = match predictions(spec, config.c_w_variant) {
        Ok(p) => Some(p),
        Err(e @ Error::Subcritical { .. }) if needs_theta => return Err(e),
        Err(Error::Subcritical { .. }) => None,
        Err(e) => return Err(e),
    };
    let theta = preds.as_ref().map(|p| config.theta_override.unwrap_or(p.theta));

    let mut records = Vec::new();
    let mut survival = Vec::new();
    for (ni, &n) in ns.iter().enumerate() {
        let n_index = ni as u64;
        let instance = realize_instance(spec, n)?;

        if checks.iter().any(|c| c.needs_epidemics()) {
            let theta = theta.expect("theta checked above");
            let p = preds.as_ref().expect("predictions checked above");
            let sample = collect_epidemics(config, &instance, n_index, theta, &pool)?;
            survival.push(SurvivalCounts {
                n,
                total: sample.all.len(),
                surviving: sample.survivors.len(),
                extinct: sample.all.len() - sample.survivors.len(),
            });
            let conditioned: Vec<&ReplicateOutcome> = if config.condition_on_survival {
                sample.survivors.iter().map(|&k| &sample.all[k]).collect()
            } else {
                sample.all.iter().collect()
            };
            let distributional = checks.iter().any(|c| matches!(c, CheckId::Lln | CheckId::CltNormality | CheckId::Variance));
            if distributional && config.condition_on_survival && conditioned.len() < MIN_SURVIVORS {
                return Err(Error::InsufficientSurvivors { needed: MIN_SURVIVORS, got: conditioned.len() });
            }
            for &check in &checks {
                let rec = match check {
                    CheckId::Lln => Some(lln_check(config, n, theta, p, &conditioned, &sample.all)),
                    CheckId::CltNormality => Some(clt_check(n, theta, p, &conditioned)?),
                    CheckId::Variance => Some(variance_check(config, n, theta, p, &conditioned)),
                    CheckId::ExtinctFraction => Some(extinct_check(config, n, p, &sample)),
                    CheckId::KappaInvariance => Some(kappa_check(config, n, theta, &sample.all)),
                    CheckId::Conditioning => Some(conditioning_check(n, theta, p, &sample.all)),
                    _ => None,
                };
                records.extend(rec);
            }
        }

        if checks.contains(&CheckId::Poissonization) || checks.contains(&CheckId::Covariance) {
            let opts = SnapshotOptions { attempts: checks.contains(&CheckId::Covariance), ..Default::default() };
            let snaps =
                snapshots(&instance, &config.grid, &opts, config.seed, n_index, STREAM_SNAPSHOT, config.replicates, &pool)?;
            if checks.contains(&CheckId::Poissonization) {
                records.push(poissonization_check(&instance, &config.grid, &snaps));
            }
            if checks.contains(&CheckId::Covariance) {
                let ms = empirical_covariance_check(&snaps, spec, &config.grid)?;
                records.push(CheckRecord::new(CheckId::Covariance, n, snaps.len(), ms));
            }
        }

        if checks.contains(&CheckId::Acquisition) {
            let opts = SnapshotOptions { acquisition_quantiles: config.quantiles.clone(), ..Default::default() };
            let snaps = snapshots(&instance, &[], &opts, config.seed, n_index, STREAM_ACQUISITION, config.replicates, &pool)?;
            records.push(acquisition_check(&instance, &config.quantiles, &snaps));
        }

        if checks.contains(&CheckId::Independence) || checks.contains(&CheckId::CapacityLaw) {
            let index = config.independence.unwrap_or(CapacityIndex { type_index: spec.i0(), l: 2 });
            let draws = coupled_draws(&instance, index, config.seed, n_index, config.replicates, &pool)?;
            if checks.contains(&CheckId::Independence) {
                records.push(independence_check(n, index, &draws));
            }
            if checks.contains(&CheckId::CapacityLaw) {
                records.push(capacity_law_check(n, spec, &draws));
            }
        }
    }

    let tests_performed = records.iter().map(|r| r.measurements.len()).sum();
    let overall = records.iter().map(|r| r.verdict).max().unwrap_or(Verdict::Pass);
    Ok(ValidationReport {
        seed: config.seed,
        n_values: ns,
        replicates: config.replicates,
        kappa: config.kappa,
        c_w_variant: config.c_w_variant,
        theta_used: theta,
        predictions: preds,
        survival,
        records,
        tests_performed,
        overall,
    })
}

fn column<F: Fn(&ReplicateOutcome) -> f64>(rs: &[&ReplicateOutcome], f: F) -> Vec<f64> {
    rs.iter().map(|r| f(r)).collect()
}

fn lln_check(
    config: &ExperimentConfig,
    n: u64,
    theta: f64,
    p: &Predictions,
    conditioned: &[&ReplicateOutcome],
    all: &[ReplicateOutcome],
) -> CheckRecord {
    let nf = n as f64;
    let tol = &config.tolerances;
    // without conditioning the extinct runs contribute ~0 to each mean
    let scale = if config.condition_on_survival { 1.0 } else { 1.0 - p.sigma_mgw };
    let tau = summarize(&column(conditioned, |r| r.tau as f64 / nf));
    let size = summarize(&column(conditioned, |r| r.total_infected as f64 / nf));
    let tilde = summarize(&column(conditioned, |r| r.tau_tilde / nf));
    let mut ms = vec![
        Measurement::tolerance("tau/n", tau.mean, theta * scale, tol.lln, Some(tau.std_error)),
        Measurement::tolerance("N/n", size.mean, p.w_total * scale, tol.lln, Some(size.std_error)),
        Measurement::tolerance("tau_tilde/n", tilde.mean, theta * scale, tol.lln_tau_tilde, Some(tilde.std_error)),
    ];
    if config.condition_on_survival {
        let everyone: Vec<&ReplicateOutcome> = all.iter().collect();
        let u = summarize(&column(&everyone, |r| r.tau as f64 / nf));
        let un = summarize(&column(&everyone, |r| r.total_infected as f64 / nf));
        ms.push(Measurement::z("tau/n unconditioned", u.mean, theta * (1.0 - p.sigma_mgw), u.std_error).supplementary());
        ms.push(Measurement::z("N/n unconditioned", un.mean, p.w_total * (1.0 - p.sigma_mgw), un.std_error).supplementary());
    }
    CheckRecord::new(CheckId::Lln, n, conditioned.len(), ms)
}

fn standardized(xs: &[f64], center: f64, var: f64, n: u64) -> Option<Vec<f64>> {
    if !(var > 0.0) {
        return None;
    }
    let sd = (var * n as f64).sqrt();
    Some(xs.iter().map(|x| (x - center) / sd).collect())
}

fn clt_check(n: u64, theta: f64, p: &Predictions, conditioned: &[&ReplicateOutcome]) -> Result<CheckRecord> {
    let nf = n as f64;
    let tau = column(conditioned, |r| r.tau as f64);
    let tilde = column(conditioned, |r| r.tau_tilde);
    let size = column(conditioned, |r| r.total_infected as f64);
    let mut ms = Vec::new();
    let cases = [
        ("tau", &tau, theta, p.var_tau, p.derived.var_tau),
        ("tau_tilde", &tilde, theta, p.var_tau_tilde, p.derived.var_tau_tilde),
        ("N", &size, p.w_total, p.var_w, p.derived.var_w),
    ];
    for (name, xs, center, var, derived) in cases {
        match standardized(xs, nf * center, var, n) {
            Some(z) => {
                let (d, pv) = ks_normality(&z)?;
                ms.push(Measurement::p(format!("KS {name}"), d, pv));
            }
            None => ms.push(Measurement::failed(
                format!("KS {name}"),
                format!("cannot standardize: displayed variance {var} is not positive"),
            )),
        }
        if let Some(z) = standardized(xs, nf * center, derived, n) {
            let (d, pv) = ks_normality(&z)?;
            ms.push(Measurement::p(format!("KS {name} (delta-method variance)"), d, pv).supplementary());
        }
    }
    Ok(CheckRecord::new(CheckId::CltNormality, n, conditioned.len(), ms))
}

fn variance_check(config: &ExperimentConfig, n: u64, theta: f64, p: &Predictions, conditioned: &[&ReplicateOutcome]) -> CheckRecord {
    let nf = n as f64;
    let sn = nf.sqrt();
    let tol = &config.tolerances;
    let tau = column(conditioned, |r| (r.tau as f64 - nf * theta) / sn);
    let tilde = column(conditioned, |r| (r.tau_tilde - nf * theta) / sn);
    let size = column(conditioned, |r| (r.total_infected as f64 - nf * p.w_total) / sn);
    let (vt, vtt, vw) = (summarize(&tau).variance, summarize(&tilde).variance, summarize(&size).variance);
    let (set, sett, sew) = (variance_std_error(&tau), variance_std_error(&tilde), variance_std_error(&size));

    let mut ms = vec![
        Measurement::relative("var tau_tilde", vtt, p.var_tau_tilde, tol.variance, Some(sett)),
        Measurement::relative("var tau", vt, p.var_tau, tol.variance, Some(set)),
    ];
    let proof = Measurement::relative("var N (ProofForm c_w)", vw, p.var_w_proof_form, tol.variance_w, Some(sew));
    let display = Measurement::relative("var N (DisplayForm c_w)", vw, p.var_w_display_form, tol.variance_w, Some(sew));
    let matching: Vec<CwVariant> = [(CwVariant::ProofForm, &proof), (CwVariant::DisplayForm, &display)]
        .iter()
        .filter(|(_, m)| m.verdict == Verdict::Pass)
        .map(|(v, _)| *v)
        .collect();
    let arbitration = match matching.as_slice() {
        [v] if *v == config.c_w_variant => format!("{v:?} matches and is the selected variant"),
        [v] => format!("{v:?} matches; the selected variant {:?} does not", config.c_w_variant),
        [] => "neither c_w variant matches".to_owned(),
        _ => "both c_w variants match".to_owned(),
    };
    let arb_ok = matching.len() == 1 && matching[0] == config.c_w_variant;
    ms.push(proof.supplementary());
    ms.push(display.supplementary());
    ms.push(Measurement {
        quantity: "c_w arbitration".into(),
        estimate: matching.len() as f64,
        target: 1.0,
        std_error: None,
        statistic: None,
        p_value: None,
        z_score: None,
        verdict: Verdict::from_bool(arb_ok),
        supplementary: false,
        note: Some(arbitration),
    });
    let d = &p.derived;
    ms.push(Measurement::relative("var tau_tilde (delta-method)", vtt, d.var_tau_tilde, tol.variance, Some(sett)).supplementary());
    ms.push(Measurement::relative("var tau (delta-method)", vt, d.var_tau, tol.variance, Some(set)).supplementary());
    ms.push(Measurement::relative("var N (delta-method)", vw, d.var_w, tol.variance_w, Some(sew)).supplementary());
    CheckRecord::new(CheckId::Variance, n, conditioned.len(), ms)
}

fn extinct_check(config: &ExperimentConfig, n: u64, p: &Predictions, sample: &EpidemicSample) -> CheckRecord {
    let total = sample.all.len();
    let frac = (total - sample.survivors.len()) as f64 / total as f64;
    let se = (p.sigma_mgw * (1.0 - p.sigma_mgw) / total as f64).sqrt();
    let mut m = Measurement::tolerance("extinct fraction", frac, p.sigma_mgw, config.tolerances.extinct_fraction, Some(se));
    if config.survivors_target {
        m = m.with_note("replicate count driven by a survivor target; fraction is biased");
    }
    CheckRecord::new(CheckId::ExtinctFraction, n, total, vec![m])
}

fn kappa_check(config: &ExperimentConfig, n: u64, theta: f64, all: &[ReplicateOutcome]) -> CheckRecord {
    let agree = all
        .iter()
        .filter(|o| {
            let first = survives(o, n, theta, KAPPA_GRID[0]);
            KAPPA_GRID.iter().all(|&k| survives(o, n, theta, k) == first)
        })
        .count();
    let frac = agree as f64 / all.len() as f64;
    let m = Measurement {
        quantity: "identical partitions over kappa {0.2, 0.5, 0.8}".into(),
        estimate: frac,
        target: config.tolerances.kappa_agreement,
        std_error: None,
        statistic: None,
        p_value: None,
        z_score: None,
        verdict: Verdict::from_bool(frac >= config.tolerances.kappa_agreement),
        supplementary: false,
        note: None,
    };
    CheckRecord::new(CheckId::KappaInvariance, n, all.len(), vec![m])
}

fn conditioning_check(n: u64, theta: f64, p: &Predictions, all: &[ReplicateOutcome]) -> CheckRecord {
    let everyone: Vec<&ReplicateOutcome> = all.iter().collect();
    let s = summarize(&column(&everyone, |r| r.tau as f64 / n as f64));
    let m = Measurement::z("tau/n unconditioned", s.mean, theta * (1.0 - p.sigma_mgw), s.std_error);
    CheckRecord::new(CheckId::Conditioning, n, all.len(), vec![m])
}

fn poissonization_check(instance: &InstanceSpec, grid: &[f64], snaps: &[ContinuousSnapshot]) -> CheckRecord {
    let n = instance.n();
    let mut ms = Vec::new();
    for (g, &s) in grid.iter().enumerate() {
        for i in 0..instance.spec().types() {
            let ni = instance.type_counts()[i] as f64;
            let e = (-instance.vertex_weight(i) * n as f64 * s).exp();
            let xs: Vec<f64> = snaps.iter().map(|sn| sn.counts[g][i] as f64).collect();
            let sum = summarize(&xs);
            ms.push(Measurement::z(format!("mean N{i} at s={s}"), sum.mean, ni * (1.0 - e), sum.std_error));
            ms.push(Measurement::z(format!("var N{i} at s={s}"), sum.variance, ni * e * (1.0 - e), variance_std_error(&xs)));
        }
    }
    CheckRecord::new(CheckId::Poissonization, n, snaps.len(), ms)
}

/// Empirical covariances of `Z^(i)_s = (N^i_{ns} - n gamma_i (1 - e^{-beta_i s})) / sqrt(n)`
/// and `Z^P_s = (P_{ns} - n s) / sqrt(n)` on every pair of grid points,
/// against `gamma_i` times the per-type kernel, the total-count kernel, the
/// clock kernel, and both forms of the cross kernel.
pub fn empirical_covariance_check(snaps: &[ContinuousSnapshot], spec: &ModelSpec, grid: &[f64]) -> Result<Vec<Measurement>> {
    if snaps.len() < MIN_COVARIANCE_SNAPSHOTS {
        return Err(Error::Precondition(format!(
            "covariance check needs at least {MIN_COVARIANCE_SNAPSHOTS} snapshots, got {}",
            snaps.len()
        )));
    }
    if snaps.iter().any(|s| s.grid.as_slice() != grid) {
        return Err(Error::GridMismatch);
    }
    let n = snaps[0].n;
    if snaps.iter().any(|s| s.n != n) {
        return Err(Error::GridMismatch);
    }
    let sn = (n as f64).sqrt();
    let j = spec.types();
    let m = grid.len();
    let z_type = |i: usize, g: usize| -> Vec<f64> {
        let center = n as f64 * spec.gamma()[i] * -(-spec.beta()[i] * grid[g]).exp_m1();
        snaps.iter().map(|s| (s.counts[g][i] as f64 - center) / sn).collect()
    };
    let z_total = |g: usize| -> Vec<f64> {
        let center: f64 = (0..j).map(|i| n as f64 * spec.gamma()[i] * -(-spec.beta()[i] * grid[g]).exp_m1()).sum();
        snaps.iter().map(|s| (s.counts[g].iter().sum::<u64>() as f64 - center) / sn).collect()
    };
    let z_clock = |g: usize| -> Option<Vec<f64>> {
        let center = n as f64 * grid[g];
        snaps.iter().map(|s| s.attempts.as_ref().map(|a| (a[g] as f64 - center) / sn)).collect()
    };
    let mut out = Vec::new();
    let mut push = |name: String, x: &[f64], y: &[f64], target: f64, supp: bool| -> Result<()> {
        let (c, se) = covariance_with_se(x, y)?;
        let mut meas = Measurement::z(name, c, target, se);
        if supp {
            meas = meas.supplementary();
        }
        out.push(meas);
        Ok(())
    };
    for a in 0..m {
        for b in a..m {
            let (s, t) = (grid[a], grid[b]);
            for i in 0..j {
                let k = CovarianceKernel::new(spec, KernelKind::NType(i))?;
                let target = spec.gamma()[i] * covariance(&k, s, t)?;
                push(format!("Cov[Z{i}_{s}, Z{i}_{t}]"), &z_type(i, a), &z_type(i, b), target, false)?;
            }
            if j > 1 {
                let k = CovarianceKernel::new(spec, KernelKind::NTotal)?;
                push(format!("Cov[ZN_{s}, ZN_{t}]"), &z_total(a), &z_total(b), covariance(&k, s, t)?, false)?;
            }
            if let (Some(x), Some(y)) = (z_clock(a), z_clock(b)) {
                let k = CovarianceKernel::new(spec, KernelKind::Clock)?;
                push(format!("Cov[ZP_{s}, ZP_{t}]"), &x, &y, covariance(&k, s, t)?, false)?;
            }
        }
    }
    for a in 0..m {
        for b in 0..m {
            let (s, t) = (grid[a], grid[b]);
            let Some(clock) = z_clock(b) else { continue };
            for i in 0..j {
                let zi = z_type(i, a);
                let shown = covariance(&CovarianceKernel::new(spec, KernelKind::Joint(i))?, s, t)?;
                let derived = covariance(&CovarianceKernel::new(spec, KernelKind::JointDerived(i))?, s, t)?;
                push(format!("Cov[Z{i}_{s}, ZP_{t}]"), &zi, &clock, shown, false)?;
                push(format!("Cov[Z{i}_{s}, ZP_{t}] (per-vertex kernel)"), &zi, &clock, derived, true)?;
            }
        }
    }
    Ok(out)
}

fn acquisition_check(instance: &InstanceSpec, quantiles: &[f64], snaps: &[ContinuousSnapshot]) -> CheckRecord {
    let n = instance.n() as f64;
    let spec = instance.spec();
    let mut ms = Vec::new();
    for (qi, &q) in quantiles.iter().enumerate() {
        for i in 0..spec.types() {
            let ni = instance.type_counts()[i] as f64;
            let b = spec.beta()[i];
            let center = (1.0 / (1.0 - q)).ln() / b;
            let xs: Vec<f64> = snaps.iter().map(|s| ni.sqrt() * (s.acquisition[qi][i] / n - center)).collect();
            let target = acquisition_variance(b, q).unwrap_or(f64::NAN);
            ms.push(Measurement::z(format!("var T{i} at q={q}"), summarize(&xs).variance, target, variance_std_error(&xs)));
        }
    }
    CheckRecord::new(CheckId::Acquisition, instance.n(), snaps.len(), ms)
}

/// Per coupled run: the examined capacity and acquisition step (`None` if
/// that vertex was never infected), and the first capacities of each type,
/// padded with fresh draws where unrevealed.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledDraw {
    pub capacity: u64,
    pub acquisition: Option<u64>,
    pub per_type: Vec<Vec<u64>>,
}

/// Capacities per type taken from every coupled run.
pub const CAPACITIES_PER_RUN: usize = 3;

fn coupled_draws(
    instance: &InstanceSpec,
    index: CapacityIndex,
    master: u64,
    n_index: u64,
    count: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<CoupledDraw>> {
    let laws = instance.spec().offspring();
    pool.install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, n_index, STREAM_COUPLED, r));
                let res = run_coupled(instance, &mut rng, RunOptions { record_acquisition: true, ..Default::default() })?;
                let caps = res.epidemic.revealed_capacities.expect("recorded");
                let times = res.epidemic.acquisition_times.expect("recorded");
                let mut pad = |i: usize, l: usize| caps[i].get(l).copied().unwrap_or_else(|| laws[i].sample(&mut rng));
                let capacity = pad(index.type_index, index.l - 1);
                let per_type = (0..laws.len()).map(|i| (0..CAPACITIES_PER_RUN).map(|l| pad(i, l)).collect()).collect();
                Ok(CoupledDraw { capacity, acquisition: times[index.type_index].get(index.l - 1).copied(), per_type })
            })
            .collect()
    })
}

fn independence_check(n: u64, index: CapacityIndex, draws: &[CoupledDraw]) -> CheckRecord {
    let mut finite: Vec<u64> = draws.iter().filter_map(|d| d.acquisition).collect();
    finite.sort_unstable();
    finite.dedup();
    // decile cut points over the distinct observed steps
    let cuts: Vec<u64> = if finite.is_empty() {
        Vec::new()
    } else {
        let mut c: Vec<u64> = (1..10).map(|k| finite[(k * finite.len() / 10).min(finite.len() - 1)]).collect();
        c.dedup();
        c
    };
    let t_cat: Vec<usize> = draws
        .iter()
        .map(|d| match d.acquisition {
            Some(t) => cuts.partition_point(|&c| c <= t),
            None => cuts.len() + 1,
        })
        .collect();
    let l_cat: Vec<usize> = draws.iter().map(|d| d.capacity.min(1_000) as usize).collect();
    let quantity = format!("L{}_{} vs T{}_{}", index.type_index, index.l, index.type_index, index.l);
    let m = match chi_square_independence(&l_cat, &t_cat) {
        Ok(r) => Measurement::p(quantity, r.statistic, r.p_value).with_note(format!("df = {}", r.df)),
        Err(Error::SparseCells) => {
            let degenerate = l_cat.windows(2).all(|w| w[0] == w[1]) || t_cat.windows(2).all(|w| w[0] == w[1]);
            if degenerate {
                let mut m = Measurement::p(quantity, 0.0, 1.0);
                m.note = Some("one coordinate is constant: independence holds trivially".into());
                m
            } else {
                Measurement::failed(quantity, "sparse contingency table".into())
            }
        }
        Err(e) => Measurement::failed(quantity, e.to_string()),
    };
    CheckRecord::new(CheckId::Independence, n, draws.len(), vec![m])
}

fn capacity_law_check(n: u64, spec: &ModelSpec, draws: &[CoupledDraw]) -> CheckRecord {
    let mut ms = Vec::new();
    for (i, law) in spec.offspring().iter().enumerate() {
        let values: Vec<u64> = draws.iter().flat_map(|d| d.per_type[i].iter().copied()).collect();
        let quantity = format!("law of L{i}");
        if let Family::PointMass(k) = law.family() {
            let ok = values.iter().all(|v| v == k);
            let mut m = Measurement::p(quantity, 0.0, if ok { 1.0 } else { 0.0 });
            m.note = Some(format!("point mass at {k}: all draws must equal it"));
            ms.push(m);
            continue;
        }
        ms.push(gof_measurement(quantity, law, &values));
    }
    CheckRecord::new(CheckId::CapacityLaw, n, draws.len(), ms)
}

fn gof_measurement(quantity: String, law: &OffspringLaw, values: &[u64]) -> Measurement {
    let max = values.iter().copied().max().unwrap_or(0);
    let mut observed = vec![0u64; max as usize + 1];
    for &v in values {
        observed[v as usize] += 1;
    }
    let probs: Vec<f64> = (0..=max).map(|k| law.pmf(k)).collect();
    match chi_square_gof(&observed, &probs) {
        Ok(r) => Measurement::p(quantity, r.statistic, r.p_value).with_note(format!("df = {}", r.df)),
        Err(e) => Measurement::failed(quantity, e.to_string()),
    }
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: usize,
    pub n: u64,
    pub gamma: String,
    pub beta: String,
    pub means: String,
    pub rho: f64,
    pub theta: Option<f64>,
    pub w_total: Option<f64>,
    pub sigma_mgw: Option<f64>,
    pub var_tau_tilde: Option<f64>,
    pub var_tau: Option<f64>,
    pub var_w: Option<f64>,
    pub replicates: usize,
    pub survivors: Option<usize>,
    pub mean_tau_over_n: f64,
    pub mean_infected_over_n: f64,
    pub mean_tau_tilde_over_n: f64,
    pub abs_error_tau: Option<f64>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

fn law_with_mean(law: &OffspringLaw, m: f64) -> Result<OffspringLaw> {
    match law.family() {
        Family::Poisson(_) => OffspringLaw::poisson(m),
        Family::Geometric(_) => OffspringLaw::geometric(1.0 / (1.0 + m)),
        Family::Binomial { trials, .. } => OffspringLaw::binomial(*trials, m / *trials as f64),
        Family::PointMass(_) if m >= 0.0 && m.fract() == 0.0 => Ok(OffspringLaw::point_mass(m as u64)),
        other => Err(Error::Config(format!("cannot set mean {m} on {other:?}"))),
    }
}

/// Applies a new `beta_i`, restoring `sum gamma_j beta_j = 1` by the rule.
pub fn rebalance_beta(spec: &ModelSpec, i: usize, value: f64, rule: Option<&Rebalance>) -> Result<ModelSpec> {
    let j = spec.types();
    if i >= j {
        return Err(Error::Config(format!("type index {i} out of range")));
    }
    let gamma = spec.gamma().to_vec();
    let mut beta = spec.beta().to_vec();
    beta[i] = value;
    let Some(rule) = rule else {
        let total: f64 = gamma.iter().zip(&beta).map(|(g, b)| g * b).sum();
        if (total - 1.0).abs() <= crate::model::NORMALIZATION_TOLERANCE {
            return ModelSpec::new(gamma, beta, spec.offspring().to_vec(), spec.i0());
        }
        return Err(Error::RebalanceImpossible(format!("beta_{i} = {value} gives sum gamma beta = {total} and no rule is declared")));
    };
    match rule.rule {
        RebalanceRule::AdjustType => {
            let k = rule.type_index.ok_or_else(|| Error::RebalanceImpossible("adjust_type needs a type".into()))?;
            if k == i || k >= j {
                return Err(Error::RebalanceImpossible(format!("cannot adjust type {k} while sweeping type {i}")));
            }
            let rest: f64 = (0..j).filter(|&t| t != k).map(|t| gamma[t] * beta[t]).sum();
            let bk = (1.0 - rest) / gamma[k];
            if !(bk > 0.0) {
                return Err(Error::RebalanceImpossible(format!("beta_{k} would be {bk}")));
            }
            beta[k] = bk;
        }
        RebalanceRule::ScaleOthers => {
            let others: f64 = (0..j).filter(|&t| t != i).map(|t| gamma[t] * beta[t]).sum();
            let target = 1.0 - gamma[i] * value;
            if j < 2 || !(target > 0.0) || others <= 0.0 {
                return Err(Error::RebalanceImpossible(format!("cannot scale other types to mass {target}")));
            }
            for t in (0..j).filter(|&t| t != i) {
                beta[t] *= target / others;
            }
        }
    }
    ModelSpec::new(gamma, beta, spec.offspring().to_vec(), spec.i0())
        .map_err(|e| Error::RebalanceImpossible(e.to_string()))
}

/// Grid points `(spec, n)` of a sweep, in row-major axis order.
pub fn sweep_points(config: &ExperimentConfig) -> Result<Vec<(ModelSpec, u64)>> {
    let sweep = config.sweep.as_ref().ok_or_else(|| Error::Config("config has no `sweep` section".into()))?;
    if sweep.axes.is_empty() || sweep.axes.len() > 2 {
        return Err(Error::Config("a sweep needs one or two axes".into()));
    }
    let base_n = config.populations()?[0];
    let mut points = vec![(config.model.clone(), base_n)];
    for axis in &sweep.axes {
        if axis.values.is_empty() {
            return Err(Error::Config("sweep axis has no values".into()));
        }
        let mut next = Vec::new();
        for (spec, n) in &points {
            for &v in &axis.values {
                let p = match axis.parameter {
                    SweepParameter::N => {
                        if !(v >= 1.0 && v.fract() == 0.0) {
                            return Err(Error::Config(format!("population size {v} is not a positive integer")));
                        }
                        (spec.clone(), v as u64)
                    }
                    SweepParameter::Beta => (rebalance_beta(spec, axis.type_index, v, sweep.rebalance.as_ref())?, *n),
                    SweepParameter::Mean => {
                        let i = axis.type_index;
                        if i >= spec.types() {
                            return Err(Error::Config(format!("type index {i} out of range")));
                        }
                        let mut laws = spec.offspring().to_vec();
                        laws[i] = law_with_mean(&laws[i], v)?;
                        (ModelSpec::new(spec.gamma().to_vec(), spec.beta().to_vec(), laws, spec.i0())?, *n)
                    }
                };
                next.push(p);
            }
        }
        points = next;
    }
    Ok(points)
}

/// Predictions plus survivor summary statistics at every sweep point.
pub fn run_sweep(config: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<SweepRow>> {
    let points = sweep_points(config)?;
    let pool = build_pool(threads)?;
    let mut rows = Vec::new();
    for (k, (spec, n)) in points.iter().enumerate() {
        let instance = realize_instance(spec, *n)?;
        let preds = match predictions(spec, config.c_w_variant) {
            Ok(p) => Some(p),
            Err(Error::Subcritical { .. }) => None,
            Err(e) => return Err(e),
        };
        let theta = preds.as_ref().map(|p| config.theta_override.unwrap_or(p.theta));
        let outcomes = run_replicates(&instance, config.seed, k as u64, 0..config.replicates as u64, &pool)?;
        let kept: Vec<&ReplicateOutcome> = match theta {
            Some(t) if config.condition_on_survival => outcomes.iter().filter(|o| survives(o, *n, t, config.kappa)).collect(),
            _ => outcomes.iter().collect(),
        };
        let nf = *n as f64;
        let mean = |f: &dyn Fn(&ReplicateOutcome) -> f64| {
            if kept.is_empty() {
                f64::NAN
            } else {
                kept.iter().map(|o| f(o)).sum::<f64>() / kept.len() as f64
            }
        };
        let mean_tau = mean(&|o| o.tau as f64 / nf);
        rows.push(SweepRow {
            point: k,
            n: *n,
            gamma: join(spec.gamma()),
            beta: join(spec.beta()),
            means: join(&spec.offspring_means()),
            rho: spec.rho_closed_form(),
            theta,
            w_total: preds.as_ref().map(|p| p.w_total),
            sigma_mgw: preds.as_ref().map(|p| p.sigma_mgw),
            var_tau_tilde: preds.as_ref().map(|p| p.var_tau_tilde),
            var_tau: preds.as_ref().map(|p| p.var_tau),
            var_w: preds.as_ref().map(|p| p.var_w),
            replicates: outcomes.len(),
            survivors: theta.map(|_| kept.len()),
            mean_tau_over_n: mean_tau,
            mean_infected_over_n: mean(&|o| o.total_infected as f64 / nf),
            mean_tau_tilde_over_n: mean(&|o| o.tau_tilde / nf),
            abs_error_tau: theta.map(|t| (mean_tau - t).abs()),
        });
    }
    Ok(rows)
}
