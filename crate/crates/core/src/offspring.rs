//! Spread-capacity laws: the number of infection attempts a newly infected
//! vertex makes.
//!
//! Every family has closed-form mean, variance and probability generating
//! function. Laws serialize as `{"family": <name>, "params": [..]}`:
//!
//! | family       | params                 | support        |
//! |--------------|------------------------|----------------|
//! | `point_mass` | `[k]`                  | `{k}`          |
//! | `poisson`    | `[lambda]`             | `0, 1, 2, ..`  |
//! | `geometric`  | `[p]`                  | `0, 1, 2, ..`, `P(k) = (1-p)^k p` |
//! | `binomial`   | `[m, p]`               | `0..=m`        |
//! | `empirical`  | `[p_0, p_1, .., p_K]`  | `0..=K`        |

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Binomial, Distribution, Geometric, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const PMF_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    PointMass(u64),
    Poisson(f64),
    Geometric(f64),
    Binomial { trials: u64, p: f64 },
    Empirical(Vec<f64>),
}

#[derive(Debug, Clone)]
enum Sampler {
    Constant(u64),
    Poisson(Poisson<f64>),
    Geometric(Geometric),
    Binomial(Binomial),
    Alias(WeightedAliasIndex<f64>),
}

/// Law of the spread capacity of one vertex type, with cached moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "LawDoc", into = "LawDoc")]
pub struct OffspringLaw {
    family: Family,
    mean: f64,
    variance: f64,
    sampler: Sampler,
}

impl PartialEq for OffspringLaw {
    fn eq(&self, other: &Self) -> bool {
        self.family == other.family
    }
}

impl OffspringLaw {
    pub fn point_mass(k: u64) -> Self {
        Self::new(Family::PointMass(k)).expect("point mass is always valid")
    }

    pub fn poisson(lambda: f64) -> Result<Self> {
        Self::new(Family::Poisson(lambda))
    }

    pub fn geometric(p: f64) -> Result<Self> {
        Self::new(Family::Geometric(p))
    }

    pub fn binomial(trials: u64, p: f64) -> Result<Self> {
        Self::new(Family::Binomial { trials, p })
    }

    pub fn empirical(pmf: Vec<f64>) -> Result<Self> {
        Self::new(Family::Empirical(pmf))
    }

    pub fn new(family: Family) -> Result<Self> {
        let (mean, variance, sampler) = match &family {
            Family::PointMass(k) => (*k as f64, 0.0, Sampler::Constant(*k)),
            Family::Poisson(lambda) => {
                let lambda = *lambda;
                if !lambda.is_finite() {
                    return Err(Error::NonFiniteMoment(format!("poisson rate {lambda}")));
                }
                if lambda < 0.0 {
                    return Err(Error::InvalidParameter(format!("poisson rate {lambda} < 0")));
                }
                let sampler = if lambda == 0.0 {
                    Sampler::Constant(0)
                } else {
                    Sampler::Poisson(
                        Poisson::new(lambda)
                            .map_err(|e| Error::InvalidParameter(format!("poisson: {e}")))?,
                    )
                };
                (lambda, lambda, sampler)
            }
            Family::Geometric(p) => {
                let p = *p;
                if !(p > 0.0 && p <= 1.0) {
                    // p = 0 puts all mass at infinity
                    return Err(Error::NonFiniteMoment(format!("geometric success probability {p}")));
                }
                let q = 1.0 - p;
                let sampler = Sampler::Geometric(
                    Geometric::new(p).map_err(|e| Error::InvalidParameter(format!("geometric: {e}")))?,
                );
                (q / p, q / (p * p), sampler)
            }
            Family::Binomial { trials, p } => {
                let (m, p) = (*trials, *p);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidParameter(format!("binomial p = {p}")));
                }
                let sampler = Sampler::Binomial(
                    Binomial::new(m, p).map_err(|e| Error::InvalidParameter(format!("binomial: {e}")))?,
                );
                (m as f64 * p, m as f64 * p * (1.0 - p), sampler)
            }
            Family::Empirical(pmf) => {
                if pmf.is_empty() {
                    return Err(Error::EmptySupport);
                }
                if pmf.iter().any(|&w| !w.is_finite() || w < 0.0) {
                    return Err(Error::InvalidParameter(
                        "empirical pmf entries must be finite and nonnegative".into(),
                    ));
                }
                let total: f64 = pmf.iter().sum();
                if (total - 1.0).abs() > PMF_TOLERANCE {
                    return Err(Error::Normalization(format!("empirical pmf sums to {total}")));
                }
                let mean: f64 = pmf.iter().enumerate().map(|(k, w)| k as f64 * w).sum();
                let second: f64 = pmf.iter().enumerate().map(|(k, w)| (k * k) as f64 * w).sum();
                let sampler = Sampler::Alias(
                    WeightedAliasIndex::new(pmf.clone())
                        .map_err(|e| Error::InvalidParameter(format!("empirical: {e}")))?,
                );
                (mean, (second - mean * mean).max(0.0), sampler)
            }
        };
        if !mean.is_finite() || !variance.is_finite() {
            return Err(Error::NonFiniteMoment(format!("{family:?}")));
        }
        Ok(Self { family, mean, variance, sampler })
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn pmf(&self, k: u64) -> f64 {
        match &self.family {
            Family::PointMass(m) => f64::from(u8::from(k == *m)),
            Family::Poisson(lambda) => {
                if *lambda == 0.0 {
                    return f64::from(u8::from(k == 0));
                }
                let kf = k as f64;
                (kf * lambda.ln() - lambda - ln_gamma(kf + 1.0)).exp()
            }
            Family::Geometric(p) => {
                if *p == 1.0 {
                    return f64::from(u8::from(k == 0));
                }
                p * (1.0 - p).powf(k as f64)
            }
            Family::Binomial { trials, p } => {
                if k > *trials {
                    return 0.0;
                }
                if *p == 0.0 || *p == 1.0 {
                    let at = if *p == 0.0 { 0 } else { *trials };
                    return f64::from(u8::from(k == at));
                }
                let (m, kf) = (*trials as f64, k as f64);
                (ln_gamma(m + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(m - kf + 1.0)
                    + kf * p.ln()
                    + (m - kf) * (1.0 - p).ln())
                .exp()
            }
            Family::Empirical(pmf) => usize::try_from(k)
                .ok()
                .and_then(|i| pmf.get(i).copied())
                .unwrap_or(0.0),
        }
    }

    /// Probability generating function `E[x^L]` for `x` in `[0, 1]`.
    pub fn pgf(&self, x: f64) -> f64 {
        match &self.family {
            Family::PointMass(k) => x.powf(*k as f64),
            Family::Poisson(lambda) => (lambda * (x - 1.0)).exp(),
            Family::Geometric(p) => p / (1.0 - (1.0 - p) * x),
            Family::Binomial { trials, p } => (1.0 - p + p * x).powf(*trials as f64),
            Family::Empirical(pmf) => pmf.iter().rev().fold(0.0, |acc, w| acc * x + w),
        }
    }

    /// Derivative of the generating function.
    pub fn pgf_derivative(&self, x: f64) -> f64 {
        match &self.family {
            Family::PointMass(0) => 0.0,
            Family::PointMass(k) => *k as f64 * x.powf(*k as f64 - 1.0),
            Family::Poisson(lambda) => lambda * (lambda * (x - 1.0)).exp(),
            Family::Geometric(p) => {
                let d = 1.0 - (1.0 - p) * x;
                p * (1.0 - p) / (d * d)
            }
            Family::Binomial { trials: 0, .. } => 0.0,
            Family::Binomial { trials, p } => {
                *trials as f64 * p * (1.0 - p + p * x).powf(*trials as f64 - 1.0)
            }
            Family::Empirical(pmf) => pmf
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, w)| acc * x + k as f64 * w),
        }
    }

    /// Largest `k` with positive mass, if the support is finite.
    pub fn support_max(&self) -> Option<u64> {
        match &self.family {
            Family::PointMass(k) => Some(*k),
            Family::Binomial { trials, .. } => Some(*trials),
            Family::Empirical(pmf) => pmf.iter().rposition(|&w| w > 0.0).map(|i| i as u64),
            Family::Poisson(lambda) if *lambda == 0.0 => Some(0),
            Family::Geometric(p) if *p == 1.0 => Some(0),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.sampler {
            Sampler::Constant(k) => *k,
            Sampler::Poisson(d) => d.sample(rng) as u64,
            Sampler::Geometric(d) => d.sample(rng),
            Sampler::Binomial(d) => d.sample(rng),
            Sampler::Alias(d) => d.sample(rng) as u64,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LawDoc {
    family: String,
    params: Vec<f64>,
}

fn as_count(x: f64, what: &str) -> Result<u64> {
    if x.is_finite() && x >= 0.0 && x.fract() == 0.0 {
        Ok(x as u64)
    } else {
        Err(Error::InvalidParameter(format!("{what} must be a nonnegative integer, got {x}")))
    }
}

impl TryFrom<LawDoc> for OffspringLaw {
    type Error = Error;

    fn try_from(doc: LawDoc) -> Result<Self> {
        let arity = |n: usize| -> Result<()> {
            if doc.params.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "family {} takes {n} params, got {}",
                    doc.family,
                    doc.params.len()
                )))
            }
        };
        let family = match doc.family.as_str() {
            "point_mass" => {
                arity(1)?;
                Family::PointMass(as_count(doc.params[0], "point mass")?)
            }
            "poisson" => {
                arity(1)?;
                Family::Poisson(doc.params[0])
            }
            "geometric" => {
                arity(1)?;
                Family::Geometric(doc.params[0])
            }
            "binomial" => {
                arity(2)?;
                Family::Binomial { trials: as_count(doc.params[0], "binomial trials")?, p: doc.params[1] }
            }
            "empirical" => Family::Empirical(doc.params),
            other => return Err(Error::InvalidParameter(format!("unknown offspring family {other:?}"))),
        };
        OffspringLaw::new(family)
    }
}

impl From<OffspringLaw> for LawDoc {
    fn from(law: OffspringLaw) -> Self {
        let (family, params) = match law.family {
            Family::PointMass(k) => ("point_mass", vec![k as f64]),
            Family::Poisson(l) => ("poisson", vec![l]),
            Family::Geometric(p) => ("geometric", vec![p]),
            Family::Binomial { trials, p } => ("binomial", vec![trials as f64, p]),
            Family::Empirical(pmf) => ("empirical", pmf),
        };
        LawDoc { family: family.to_string(), params }
    }
}
