//! Closed-form limit constants: the duration root `theta`, the law of large
//! numbers targets, the Gaussian covariance kernels and the central limit
//! variances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mgw::extinction_probability;
use crate::model::ModelSpec;

pub const THETA_TOLERANCE: f64 = 1e-12;

/// `f(theta) = sum_i E[L^i] gamma_i (1 - exp(-beta_i theta)) - theta`.
pub fn f_theta(spec: &ModelSpec, theta: f64) -> f64 {
    terms(spec).map(|(g, b, m)| -m * g * (-b * theta).exp_m1()).sum::<f64>() - theta
}

pub fn f_theta_derivative(spec: &ModelSpec, theta: f64) -> f64 {
    terms(spec).map(|(g, b, m)| m * g * b * (-b * theta).exp()).sum::<f64>() - 1.0
}

pub fn f_theta_second_derivative(spec: &ModelSpec, theta: f64) -> f64 {
    -terms(spec).map(|(g, b, m)| m * g * b * b * (-b * theta).exp()).sum::<f64>()
}

fn terms(spec: &ModelSpec) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
    spec.gamma()
        .iter()
        .zip(spec.beta())
        .zip(spec.offspring())
        .map(|((&g, &b), l)| (g, b, l.mean()))
}

/// Unique positive root of `f`. `f` is concave with `f(0) = 0` and
/// `f'(0) = rho(M) - 1`, so a positive root exists iff `rho(M) > 1`.
pub fn solve_theta(spec: &ModelSpec) -> Result<f64> {
    let rho = spec.rho_closed_form();
    if rho <= 1.0 {
        return Err(Error::Subcritical { rho });
    }
    let hi0: f64 = terms(spec).map(|(g, _, m)| g * m).sum();
    let mut lo = hi0;
    let mut found = false;
    for _ in 0..1100 {
        lo *= 0.5;
        if f_theta(spec, lo) > 0.0 {
            found = true;
            break;
        }
        if lo == 0.0 {
            break;
        }
    }
    if !found {
        return Err(Error::NonConvergence(1100));
    }
    let mut hi = hi0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f_theta(spec, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut theta = 0.5 * (lo + hi);
    for _ in 0..4 {
        let d = f_theta_derivative(spec, theta);
        if d >= 0.0 {
            break;
        }
        let next = theta - f_theta(spec, theta) / d;
        if next <= 0.0 || !next.is_finite() {
            break;
        }
        theta = next;
    }
    if f_theta(spec, theta).abs() >= THETA_TOLERANCE {
        return Err(Error::NonConvergence(200));
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlnTargets {
    pub theta: f64,
    pub w_vector: Vec<f64>,
    pub w_total: f64,
}

/// `w_i(s) = gamma_i (1 - exp(-beta_i s))`.
pub fn w_at(spec: &ModelSpec, s: f64) -> Vec<f64> {
    spec.gamma().iter().zip(spec.beta()).map(|(g, b)| -g * (-b * s).exp_m1()).collect()
}

pub fn lln_targets(spec: &ModelSpec) -> Result<LlnTargets> {
    let theta = solve_theta(spec)?;
    let w_vector = w_at(spec, theta);
    let w_total = w_vector.iter().sum();
    Ok(LlnTargets { theta, w_vector, w_total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    /// `Cov[X^(i)_s, X^(i)_t]`, per-type infected count scaled by `sqrt(n_i)`.
    NType(usize),
    /// `Cov[X^N_s, X^N_t]`, total infected count scaled by `sqrt(n)`.
    NTotal,
    /// `sigma^i(min(p, q))`, acquisition times at quantiles `p, q` of type `i`.
    TType(usize),
    /// `Cov[B^P_s, B^P_t]`, attempt clock.
    Clock,
    /// `Cov[Z^(i)_s, Z^P_t] = min(s, t) gamma_i exp(-s beta_i)` as displayed
    /// in the joint limit theorem.
    Joint(usize),
    /// `Cov[Z^(i)_s, Z^P_t] = min(s, t) gamma_i beta_i exp(-s beta_i)`, the
    /// value obtained from the per-vertex Poisson computation.
    JointDerived(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceKernel {
    kind: KernelKind,
    gamma: f64,
    beta: f64,
    weights: Vec<(f64, f64)>,
}

impl CovarianceKernel {
    pub fn new(spec: &ModelSpec, kind: KernelKind) -> Result<Self> {
        let idx = match kind {
            KernelKind::NType(i) | KernelKind::TType(i) | KernelKind::Joint(i) | KernelKind::JointDerived(i) => Some(i),
            _ => None,
        };
        let (gamma, beta) = match idx {
            Some(i) if i >= spec.types() => {
                return Err(Error::InvalidParameter(format!("type index {i} out of range for J = {}", spec.types())))
            }
            Some(i) => (spec.gamma()[i], spec.beta()[i]),
            None => (1.0, 1.0),
        };
        let weights = spec.gamma().iter().copied().zip(spec.beta().iter().copied()).collect();
        Ok(Self { kind, gamma, beta, weights })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// Whether `k(s, t) = k(t, s)`; the cross kernels are not.
    pub fn is_symmetric(&self) -> bool {
        !matches!(self.kind, KernelKind::Joint(_) | KernelKind::JointDerived(_))
    }
}

/// Evaluates a kernel. Symmetric kernels are evaluated with `s <= t` after
/// swapping; for the cross kernels `s` is the count time and `t` the clock
/// time.
pub fn covariance(kernel: &CovarianceKernel, s: f64, t: f64) -> Result<f64> {
    if !(s >= 0.0 && t >= 0.0) || !s.is_finite() || !t.is_finite() {
        return Err(Error::Domain(format!("kernel arguments must be finite and nonnegative, got ({s}, {t})")));
    }
    let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
    let b = kernel.beta;
    let v = match kernel.kind {
        KernelKind::NType(_) => (-b * hi).exp() * -(-b * lo).exp_m1(),
        KernelKind::NTotal => kernel.weights.iter().map(|&(g, b)| g * -(-b * lo).exp_m1() * (-b * hi).exp()).sum(),
        KernelKind::TType(_) => {
            if hi >= 1.0 {
                return Err(Error::Domain(format!("acquisition quantile must be < 1, got {hi}")));
            }
            acquisition_variance(b, lo)?
        }
        KernelKind::Clock => lo,
        KernelKind::Joint(_) => lo * kernel.gamma * (-s * b).exp(),
        KernelKind::JointDerived(_) => lo * kernel.gamma * b * (-s * b).exp(),
    };
    Ok(v)
}

/// `sigma^i(q) = q / (beta_i^2 (1 - q))`.
pub fn acquisition_variance(beta: f64, q: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Domain(format!("acquisition quantile must lie in [0, 1), got {q}")));
    }
    Ok(q / (beta * beta * (1.0 - q)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CwVariant {
    /// `c_w = sum beta_i gamma_i e^{-beta_i theta} / D`
    #[default]
    ProofForm,
    /// `c_w = (1 - sum beta_i gamma_i e^{-beta_i theta}) / D`
    DisplayForm,
}

impl CwVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "proof" | "proofform" | "proof_form" => Ok(CwVariant::ProofForm),
            "display" | "displayform" | "display_form" => Ok(CwVariant::DisplayForm),
            other => Err(Error::Config(format!("unknown c_w variant '{other}' (expected proof or display)"))),
        }
    }
}

/// Shared constants of the variance formulas at `theta`.
#[derive(Debug, Clone)]
struct VarianceParts {
    theta: f64,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    e: Vec<f64>,
    sigma_n: Vec<f64>,
    denom: f64,
}

impl VarianceParts {
    fn new(spec: &ModelSpec) -> Result<Self> {
        let theta = solve_theta(spec)?;
        let gamma = spec.gamma().to_vec();
        let beta = spec.beta().to_vec();
        let mean: Vec<f64> = spec.offspring().iter().map(|l| l.mean()).collect();
        let var: Vec<f64> = spec.offspring().iter().map(|l| l.variance()).collect();
        let e: Vec<f64> = beta.iter().map(|b| (-b * theta).exp()).collect();
        let sigma_n = (0..gamma.len()).map(|i| gamma[i] * (1.0 - e[i]) * e[i]).collect();
        let denom = 1.0 - (0..gamma.len()).map(|i| beta[i] * gamma[i] * mean[i] * e[i]).sum::<f64>();
        if denom <= 0.0 {
            return Err(Error::DegenerateDenominator(denom));
        }
        Ok(Self { theta, gamma, beta, mean, var, e, sigma_n, denom })
    }

    fn j(&self) -> usize {
        self.gamma.len()
    }

    fn sum<F: Fn(usize) -> f64>(&self, f: F) -> f64 {
        (0..self.j()).map(f).sum()
    }
}

/// The three central limit variances, evaluated term by term as displayed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CltVariances {
    pub var_tau_tilde: f64,
    pub var_tau: f64,
    pub var_w: f64,
    pub c_w: f64,
    pub c_w_variant: CwVariant,
}

impl CltVariances {
    /// Fails with `DegenerateVariance` on the first negative value.
    pub fn checked(self) -> Result<Self> {
        for (name, value) in [("var_tau_tilde", self.var_tau_tilde), ("var_tau", self.var_tau), ("var_w", self.var_w)] {
            if !(value >= 0.0) {
                return Err(Error::DegenerateVariance { name, value });
            }
        }
        Ok(self)
    }
}

/// Displayed formulas, unchecked; values may be negative.
pub fn clt_variances_raw(spec: &ModelSpec, variant: CwVariant) -> Result<CltVariances> {
    let p = VarianceParts::new(spec)?;
    let th = p.theta;
    let d = p.denom;
    let sig2_part = p.sum(|i| p.var[i] * p.gamma[i] * (1.0 - p.e[i]));
    let n_part = p.sum(|i| (p.mean[i] * p.gamma[i].sqrt()).powi(2) * p.sigma_n[i]);
    let g32 = p.sum(|i| p.gamma[i].powf(1.5) * p.e[i] * p.mean[i]);
    let bgme = p.sum(|i| p.beta[i] * p.gamma[i] * p.mean[i] * p.e[i]);

    let var_tau_tilde = (sig2_part + n_part + th - 2.0 * th * g32) / (d * d);

    let var_tau = (sig2_part + n_part + th * bgme * bgme) / (d * d) - 2.0 * th / d * g32 * bgme;

    let bge = p.sum(|i| p.beta[i] * p.gamma[i] * p.e[i]);
    let c_w = match variant {
        CwVariant::ProofForm => bge / d,
        CwVariant::DisplayForm => (1.0 - bge) / d,
    };
    let var_w = c_w * c_w * sig2_part
        + p.sum(|i| (c_w * p.mean[i] * p.gamma[i].sqrt() + 1.0).powi(2) * p.sigma_n[i])
        - 2.0
            * (p.sum(|i| (c_w * p.mean[i] * p.gamma[i].sqrt() + 1.0) * c_w * th * p.gamma[i] * p.e[i])
                + c_w * c_w * th);

    Ok(CltVariances { var_tau_tilde, var_tau, var_w, c_w, c_w_variant: variant })
}

/// Displayed formulas with every value checked to be nonnegative.
pub fn clt_variances(spec: &ModelSpec, variant: CwVariant) -> Result<CltVariances> {
    clt_variances_raw(spec, variant)?.checked()
}

/// Delta-method variances built from the joint limit of the per-type counts
/// and the attempt clock, using the cross covariance
/// `min(s, t) gamma_i beta_i exp(-s beta_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedVariances {
    pub var_tau_tilde: f64,
    pub var_tau: f64,
    pub var_w: f64,
    pub c_w: f64,
}

pub fn derived_variances(spec: &ModelSpec) -> Result<DerivedVariances> {
    let p = VarianceParts::new(spec)?;
    let th = p.theta;
    let d = p.denom;
    let w: Vec<f64> = (0..p.j()).map(|i| p.gamma[i] * (1.0 - p.e[i])).collect();
    let sig2_part = p.sum(|i| p.var[i] * w[i]);
    let cross = p.sum(|i| p.mean[i] * p.gamma[i] * p.beta[i] * p.e[i]);
    // G = sum_i sigma_i W_i + sum_i E_i Z^(i)_theta - Z^P_theta
    let var_g = sig2_part + p.sum(|i| p.mean[i] * p.mean[i] * p.sigma_n[i]) + th - 2.0 * th * cross;
    let var_tau_tilde = var_g / (d * d);
    let var_tau = var_tau_tilde - th;

    let c = p.sum(|i| p.beta[i] * p.gamma[i] * p.e[i]) / d;
    let var_w = c * c * sig2_part
        + p.sum(|i| (c * p.mean[i] + 1.0).powi(2) * p.sigma_n[i])
        + c * c * th
        - 2.0 * c * c * th * cross
        - 2.0 * c * th * p.sum(|i| p.gamma[i] * p.beta[i] * p.e[i]);
    Ok(DerivedVariances { var_tau_tilde, var_tau, var_w, c_w: c })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub theta: f64,
    pub w_vector: Vec<f64>,
    pub w_total: f64,
    pub rho: f64,
    pub sigma_mgw: f64,
    pub var_tau_tilde: f64,
    pub var_tau: f64,
    pub var_w: f64,
    pub c_w_variant: CwVariant,
    pub c_w: f64,
    #[serde(rename = "sigma_N")]
    pub sigma_n: Vec<f64>,
    pub var_w_proof_form: f64,
    pub var_w_display_form: f64,
    pub derived: DerivedVariances,
    /// Negative displayed variances, reported rather than clamped.
    pub degenerate: Vec<String>,
}

impl Predictions {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictions serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn predictions(spec: &ModelSpec, variant: CwVariant) -> Result<Predictions> {
    let lln = lln_targets(spec)?;
    let rho = spec.rho_closed_form();
    let sigma_mgw = extinction_probability(spec)?.sigma_mgw;
    let proof = clt_variances_raw(spec, CwVariant::ProofForm)?;
    let display = clt_variances_raw(spec, CwVariant::DisplayForm)?;
    let chosen = match variant {
        CwVariant::ProofForm => proof,
        CwVariant::DisplayForm => display,
    };
    let mut degenerate = Vec::new();
    for (name, value) in [
        ("var_tau_tilde", chosen.var_tau_tilde),
        ("var_tau", chosen.var_tau),
        ("var_w_proof_form", proof.var_w),
        ("var_w_display_form", display.var_w),
    ] {
        if !(value >= 0.0) {
            degenerate.push(Error::DegenerateVariance { name, value }.to_string());
        }
    }
    let sigma_n = spec
        .gamma()
        .iter()
        .zip(spec.beta())
        .map(|(g, b)| {
            let e = (-b * lln.theta).exp();
            g * (1.0 - e) * e
        })
        .collect();
    Ok(Predictions {
        theta: lln.theta,
        w_vector: lln.w_vector,
        w_total: lln.w_total,
        rho,
        sigma_mgw,
        var_tau_tilde: chosen.var_tau_tilde,
        var_tau: chosen.var_tau,
        var_w: chosen.var_w,
        c_w_variant: variant,
        c_w: chosen.c_w,
        sigma_n,
        var_w_proof_form: proof.var_w,
        var_w_display_form: display.var_w,
        derived: derived_variances(spec)?,
        degenerate,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::offspring::OffspringLaw;
    use proptest::prelude::*;

    fn h1() -> ModelSpec {
        ModelSpec::homogeneous(OffspringLaw::point_mass(2))
    }

    fn j2() -> ModelSpec {
        ModelSpec::new(
            vec![0.5, 0.5],
            vec![1.2, 0.8],
            vec![OffspringLaw::poisson(2.0).unwrap(), OffspringLaw::point_mass(3)],
            0,
        )
        .unwrap()
    }

    /// Independent oracle: plain bisection of `m (1 - e^-t) = t` on (0, m].
    fn homogeneous_theta(m: f64) -> f64 {
        let (mut lo, mut hi) = (1e-9, m);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if m * (1.0 - (-mid).exp()) - mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn f_basics() {
        for spec in [h1(), j2()] {
            assert_eq!(f_theta(&spec, 0.0), 0.0);
            assert!((f_theta_derivative(&spec, 0.0) - (spec.rho_closed_form() - 1.0)).abs() < 1e-14);
            assert!(f_theta_second_derivative(&spec, 0.3) < 0.0);
        }
        assert!(f_theta(&h1(), 1.59362).abs() < 1e-5);
    }

    #[test]
    fn theta_h1_and_reduction() {
        let oracle = homogeneous_theta(2.0);
        let t = solve_theta(&h1()).unwrap();
        assert!((t - oracle).abs() < 1e-10);
        assert!((t - 1.593624).abs() < 1e-6);
        assert!(f_theta(&h1(), t).abs() < 1e-12);
        let red = ModelSpec::new(
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            vec![OffspringLaw::point_mass(1), OffspringLaw::point_mass(3)],
            0,
        )
        .unwrap();
        assert!((solve_theta(&red).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn homogeneous_families_reduce() {
        for m in [1.3, 2.0, 3.7] {
            let pois = ModelSpec::homogeneous(OffspringLaw::poisson(m).unwrap());
            assert!((solve_theta(&pois).unwrap() - homogeneous_theta(m)).abs() < 1e-10);
            let t = solve_theta(&pois).unwrap();
            let lln = lln_targets(&pois).unwrap();
            assert!((lln.w_total - (1.0 - (-t).exp())).abs() < 1e-14);
            assert!((lln.w_total - t / m).abs() < 1e-12);
        }
    }

    #[test]
    fn subcritical() {
        let spec = ModelSpec::homogeneous(OffspringLaw::point_mass(1));
        let err = solve_theta(&spec).unwrap_err();
        assert!(matches!(err, Error::Subcritical { .. }));
        assert!(err.to_string().contains("rho(M) <= 1"));
        assert!(matches!(clt_variances(&spec, CwVariant::ProofForm), Err(Error::Subcritical { .. })));
        assert!(matches!(predictions(&spec, CwVariant::ProofForm), Err(Error::Subcritical { .. })));
    }

    #[test]
    fn lln_h1_and_limits() {
        let lln = lln_targets(&h1()).unwrap();
        assert!((lln.w_total - lln.theta / 2.0).abs() < 1e-12);
        assert!((lln.w_total - 0.796812).abs() < 1e-6);
        let steep = ModelSpec::new(
            vec![0.5, 0.5],
            vec![50.0 / 26.0, 2.0 / 26.0],
            vec![OffspringLaw::point_mass(2), OffspringLaw::point_mass(2)],
            0,
        )
        .unwrap();
        let big = ModelSpec::new(
            vec![0.01, 0.99],
            vec![50.0, 0.5 / 0.99],
            vec![OffspringLaw::point_mass(2), OffspringLaw::point_mass(2)],
            0,
        )
        .unwrap();
        for spec in [steep, big] {
            let l = lln_targets(&spec).unwrap();
            assert!(l.w_total < 1.0);
            assert!((l.w_vector.iter().sum::<f64>() - l.w_total).abs() < 1e-15);
        }
        let l = lln_targets(
            &ModelSpec::new(
                vec![0.01, 0.99],
                vec![50.0, 0.5 / 0.99],
                vec![OffspringLaw::point_mass(2), OffspringLaw::point_mass(2)],
                0,
            )
            .unwrap(),
        )
        .unwrap();
        assert!((l.w_vector[0] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn kernel_examples() {
        let spec = h1();
        let theta = solve_theta(&spec).unwrap();
        let nt = CovarianceKernel::new(&spec, KernelKind::NType(0)).unwrap();
        assert_eq!(covariance(&nt, 0.0, 0.0).unwrap(), 0.0);
        let v = covariance(&nt, theta, theta).unwrap();
        assert!((v - (1.0 - (-theta).exp()) * (-theta).exp()).abs() < 1e-15);
        assert!((v - 0.16190).abs() < 1e-5);
        let tt = CovarianceKernel::new(&spec, KernelKind::TType(0)).unwrap();
        assert!((covariance(&tt, 0.5, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(covariance(&tt, 0.5, 1.0), Err(Error::Domain(_))));
        let clock = CovarianceKernel::new(&spec, KernelKind::Clock).unwrap();
        assert_eq!(covariance(&clock, 0.7, 0.2).unwrap(), 0.2);
        assert!(CovarianceKernel::new(&spec, KernelKind::NType(1)).is_err());
        assert!(matches!(covariance(&clock, -1.0, 0.2), Err(Error::Domain(_))));
    }

    #[test]
    fn sigma_n_is_scaled_type_kernel() {
        let spec = j2();
        let p = predictions(&spec, CwVariant::ProofForm).unwrap();
        for i in 0..2 {
            let k = CovarianceKernel::new(&spec, KernelKind::NType(i)).unwrap();
            let v = covariance(&k, p.theta, p.theta).unwrap();
            assert!((p.sigma_n[i] - spec.gamma()[i] * v).abs() < 1e-15);
        }
        assert!((p.w_vector.iter().sum::<f64>() - p.w_total).abs() < 1e-15);
    }

    #[test]
    fn ntotal_is_sum_of_scaled_type_kernels() {
        let spec = j2();
        let tot = CovarianceKernel::new(&spec, KernelKind::NTotal).unwrap();
        for (s, t) in [(0.3, 1.1), (2.0, 0.5), (1.0, 1.0)] {
            let sum: f64 = (0..2)
                .map(|i| spec.gamma()[i] * covariance(&CovarianceKernel::new(&spec, KernelKind::NType(i)).unwrap(), s, t).unwrap())
                .sum();
            assert!((covariance(&tot, s, t).unwrap() - sum).abs() < 1e-15);
        }
    }

    #[test]
    fn h1_variances() {
        let spec = h1();
        let theta = solve_theta(&spec).unwrap();
        let e = (-theta).exp();
        // independent evaluation for J = 1, gamma = beta = 1, sigma_1 = 0, E = 2
        let numer = 4.0 * (1.0 - e) * e + theta - 4.0 * theta * e;
        let denom = (1.0 - 2.0 * e).powi(2);
        let v = clt_variances_raw(&spec, CwVariant::ProofForm).unwrap();
        assert!((numer - 0.94599).abs() < 1e-4);
        assert!((denom - 0.35239).abs() < 1e-5);
        assert!((v.var_tau_tilde - numer / denom).abs() < 1e-12);
        assert!((v.var_tau_tilde - 2.6845).abs() < 1e-4);
        let disp_tau = (4.0 * (1.0 - e) * e + theta * 4.0 * e * e) / denom - 2.0 * theta / (1.0 - 2.0 * e) * (2.0 * e) * (2.0 * e);
        assert!((disp_tau - 1.697925).abs() < 1e-5);
        assert!((v.var_tau - disp_tau).abs() < 1e-12);

        let d = derived_variances(&spec).unwrap();
        assert!((d.var_tau_tilde - v.var_tau_tilde).abs() < 1e-12);
        assert!((d.var_tau - (v.var_tau_tilde - theta)).abs() < 1e-12);
        // tau = 2 N - 1 for PointMass(2), so sigma_tau^2 = 4 sigma_w^2
        assert!((d.var_tau - 4.0 * d.var_w).abs() < 1e-12);

        assert!(v.var_w < 0.0);
        assert!(matches!(clt_variances(&spec, CwVariant::ProofForm), Err(Error::DegenerateVariance { name: "var_w", .. })));
        let p = predictions(&spec, CwVariant::ProofForm).unwrap();
        assert_eq!(p.degenerate.len(), 2);
    }

    #[test]
    fn predictions_round_trip() {
        let p = predictions(&j2(), CwVariant::DisplayForm).unwrap();
        let back = Predictions::from_json(&p.to_json()).unwrap();
        assert_eq!(p, back);
        assert!(p.to_json().contains("\"DisplayForm\""));
        assert!(p.to_json().contains("\"sigma_N\""));
    }

    #[test]
    fn cw_parse() {
        assert_eq!(CwVariant::parse("proof").unwrap(), CwVariant::ProofForm);
        assert_eq!(CwVariant::parse("Display").unwrap(), CwVariant::DisplayForm);
        assert!(CwVariant::parse("other").is_err());
    }

    /// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
    fn min_eigenvalue(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += a[p][q] * a[p][q];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let phi = 0.5 * (2.0 * a[p][q]).atan2(a[q][q] - a[p][p]);
                    let (s, c) = phi.sin_cos();
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i][i]).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn jacobi_oracle() {
        let m = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        assert!((min_eigenvalue(m) - 1.0).abs() < 1e-12);
    }

    fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
        (0.05f64..0.95, 0.2f64..1.8, 0.5f64..4.0, 0.5f64..4.0).prop_filter_map("normalizable", |(g, b1, m1, m2)| {
            let b2 = (1.0 - g * b1) / (1.0 - g);
            if b2 <= 0.05 {
                return None;
            }
            ModelSpec::new(
                vec![g, 1.0 - g],
                vec![b1, b2],
                vec![OffspringLaw::poisson(m1).unwrap(), OffspringLaw::poisson(m2).unwrap()],
                0,
            )
            .ok()
        })
    }

    proptest! {
        #[test]
        fn kernels_symmetric_and_psd(spec in spec_strategy(), grid in proptest::collection::vec(0.0f64..0.95, 1..8)) {
            let kinds = [KernelKind::NType(0), KernelKind::NType(1), KernelKind::NTotal, KernelKind::TType(0), KernelKind::TType(1), KernelKind::Clock];
            for kind in kinds {
                let k = CovarianceKernel::new(&spec, kind).unwrap();
                prop_assert!(k.is_symmetric());
                let gram: Vec<Vec<f64>> = grid.iter().map(|&s| grid.iter().map(|&t| covariance(&k, s, t).unwrap()).collect()).collect();
                for a in 0..grid.len() {
                    for b in 0..grid.len() {
                        prop_assert_eq!(gram[a][b], gram[b][a]);
                    }
                }
                prop_assert!(min_eigenvalue(gram) >= -1e-10);
            }
        }

        #[test]
        fn theta_root_and_sign_pattern(spec in spec_strategy()) {
            prop_assume!(spec.rho_closed_form() > 1.05);
            let theta = solve_theta(&spec).unwrap();
            prop_assert!(f_theta(&spec, theta).abs() < 1e-12);
            let hi: f64 = spec.gamma().iter().zip(spec.offspring()).map(|(g, l)| g * l.mean()).sum();
            for k in 1..100 {
                let s = theta * k as f64 / 100.0;
                prop_assert!(f_theta(&spec, s) > 0.0);
                let u = theta + (hi - theta) * k as f64 / 100.0;
                if u > theta * (1.0 + 1e-9) {
                    prop_assert!(f_theta(&spec, u) < 0.0);
                }
            }
            let lln = lln_targets(&spec).unwrap();
            prop_assert!(lln.w_total > 0.0 && lln.w_total < 1.0);
        }

        #[test]
        fn theta_increases_with_mean(spec in spec_strategy(), bump in 0.05f64..1.0, which in 0usize..2) {
            prop_assume!(spec.rho_closed_form() > 1.05);
            let mut laws = spec.offspring().to_vec();
            laws[which] = OffspringLaw::poisson(laws[which].mean() + bump).unwrap();
            let bigger = ModelSpec::new(spec.gamma().to_vec(), spec.beta().to_vec(), laws, 0).unwrap();
            prop_assert!(solve_theta(&bigger).unwrap() > solve_theta(&spec).unwrap());
        }

        #[test]
        fn derived_variances_nonnegative(spec in spec_strategy()) {
            prop_assume!(spec.rho_closed_form() > 1.05);
            let d = derived_variances(&spec).unwrap();
            prop_assert!(d.var_tau_tilde >= 0.0 && d.var_tau >= -1e-12 && d.var_w >= -1e-12);
        }
    }
}
