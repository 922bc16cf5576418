//! Multitype Galton-Watson trees with multinomially split offspring, their
//! extinction probability, and the pruned-tree coupling that realizes the
//! epidemic on top of such a tree.
//!
//! In the coupling every tree node is *infected* (`T°`), *pending* (`T⊞`,
//! an attempt not yet resolved) or *failed* (`T†`, the attempt hit an
//! already infected vertex and its subtree is cut). At step `t` the least
//! pending node in (generation, Ulam word) order is resolved; it succeeds
//! with probability `(n_j - |T°_j|) / n_j` for its type `j`.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{sum_exponential_gaps, EpidemicResult, RunOptions, TrajectoryMode, TrajectoryRow};
use crate::error::{Error, Result};
use crate::model::{mean_matrix, multinomial_split, spectral_radius, InstanceSpec, ModelSpec, TypeSampler};
use crate::offspring::Family;

const FIXED_POINT_CAP: usize = 1_000_000;
pub const FIXED_POINT_TOLERANCE: f64 = 1e-12;

/// A node of the Ulam-Harris tree with its type and offspring composition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GWNode {
    pub ulam_index: Vec<u32>,
    pub node_type: usize,
    pub child_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GWRun {
    #[serde(rename = "generations")]
    pub generation_sizes: Vec<Vec<u64>>,
    #[serde(rename = "total")]
    pub total_population: u64,
    pub extinct: bool,
    pub truncated: bool,
}

impl GWRun {
    /// Last generation whose cumulative population stays within `k`.
    pub fn last_generation_within(&self, k: u64) -> Option<usize> {
        let mut cum = 0u64;
        let mut last = None;
        for (g, z) in self.generation_sizes.iter().enumerate() {
            cum += z.iter().sum::<u64>();
            if cum > k {
                break;
            }
            last = Some(g);
        }
        last
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("GWRun serializes")
    }
}

/// Grows the tree generation by generation until extinction or until the
/// cumulative population exceeds `max_population`.
pub fn grow_tree<R: Rng + ?Sized>(spec: &ModelSpec, max_population: u64, rng: &mut R) -> Result<GWRun> {
    grow_tree_generations(spec, max_population, usize::MAX, rng)
}

/// As [`grow_tree`], additionally stopping (as truncated) once
/// `max_generations` generations beyond the root exist.
pub fn grow_tree_generations<R: Rng + ?Sized>(
    spec: &ModelSpec,
    max_population: u64,
    max_generations: usize,
    rng: &mut R,
) -> Result<GWRun> {
    if max_population == 0 {
        return Err(Error::Precondition("max_population must be at least 1".into()));
    }
    let j = spec.types();
    let alpha = spec.alpha();
    let laws = spec.offspring();
    let mut current = vec![0u64; j];
    current[spec.i0()] = 1;
    let mut generations = vec![current.clone()];
    let mut total = 1u64;

    loop {
        let mut next = vec![0u64; j];
        let mut next_total = 0u64;
        for (i, &count) in current.iter().enumerate() {
            for _ in 0..count {
                let l = laws[i].sample(rng);
                if j == 1 {
                    next[0] += l;
                } else {
                    for (slot, k) in next.iter_mut().zip(multinomial_split(l, alpha, rng)) {
                        *slot += k;
                    }
                }
                next_total += l;
                if total + next_total > max_population {
                    generations.push(next);
                    return Ok(GWRun {
                        generation_sizes: generations,
                        total_population: total + next_total,
                        extinct: false,
                        truncated: true,
                    });
                }
            }
        }
        total += next_total;
        generations.push(next.clone());
        if next_total == 0 {
            return Ok(GWRun { generation_sizes: generations, total_population: total, extinct: true, truncated: false });
        }
        if generations.len() > max_generations {
            return Ok(GWRun { generation_sizes: generations, total_population: total, extinct: false, truncated: true });
        }
        current = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extinction {
    /// Extinction probability of the tree rooted at type `i0`.
    pub sigma_mgw: f64,
    /// Fixed point of `x = sum_j alpha_j g_j(x)`; the probability that the
    /// subtree below a single attempt dies out.
    pub x_star: f64,
}

impl Extinction {
    /// Extinction probability `q_i = g_i(x*)` for each root type.
    pub fn per_type(&self, spec: &ModelSpec) -> Vec<f64> {
        spec.offspring().iter().map(|l| l.pgf(self.x_star)).collect()
    }
}

fn mixed_pgf(spec: &ModelSpec, x: f64) -> f64 {
    spec.alpha().iter().zip(spec.offspring()).map(|(a, l)| a * l.pgf(x)).sum()
}

fn mixed_pgf_derivative(spec: &ModelSpec, x: f64) -> f64 {
    spec.alpha().iter().zip(spec.offspring()).map(|(a, l)| a * l.pgf_derivative(x)).sum()
}

/// Extinction probability via the scalar fixed point. The multinomial
/// split makes the `J` extinction equations `q_i = g_i(sum_j alpha_j q_j)`
/// collapse to `x = sum_j alpha_j g_j(x)` with `q_i = g_i(x)`.
pub fn extinction_probability(spec: &ModelSpec) -> Result<Extinction> {
    let singular = spec.offspring().iter().all(|l| l.family() == &Family::PointMass(1));
    if singular {
        // every particle has exactly one child: the process never dies
        return Ok(Extinction { sigma_mgw: 0.0, x_star: 0.0 });
    }
    let rho = spectral_radius(&mean_matrix(spec))?;
    if rho <= 1.0 {
        let x_star = 1.0;
        return Ok(Extinction { sigma_mgw: spec.offspring()[spec.i0()].pgf(x_star), x_star });
    }

    let mut x = 0.0f64;
    let mut converged = false;
    for _ in 0..FIXED_POINT_CAP {
        let next = mixed_pgf(spec, x);
        debug_assert!(next + 1e-15 >= x, "fixed-point iteration must be nondecreasing");
        let done = (next - x).abs() < 1e-15;
        x = next;
        if done {
            converged = true;
            break;
        }
    }
    if !converged && (mixed_pgf(spec, x) - x).abs() > FIXED_POINT_TOLERANCE {
        return Err(Error::NonConvergence(FIXED_POINT_CAP));
    }
    // Newton polish; the slope of the mixed pgf at the attracting root is < 1
    for _ in 0..8 {
        let resid = mixed_pgf(spec, x) - x;
        let slope = mixed_pgf_derivative(spec, x) - 1.0;
        if resid.abs() < 1e-16 || slope >= 0.0 {
            break;
        }
        let cand = x - resid / slope;
        if !(0.0..1.0).contains(&cand) {
            break;
        }
        x = cand;
    }
    if (mixed_pgf(spec, x) - x).abs() > FIXED_POINT_TOLERANCE {
        return Err(Error::NonConvergence(FIXED_POINT_CAP));
    }
    Ok(Extinction { sigma_mgw: spec.offspring()[spec.i0()].pgf(x), x_star: x })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingResult {
    pub epidemic: EpidemicResult,
    /// `|T°(tau_n)|`
    pub infected_tree_size: u64,
    /// `|T†(tau_n)|`
    pub failures: u64,
    /// `|T°_i(tau_n)|`
    pub per_type_infected: Vec<u64>,
    /// Infected nodes with their Ulam words and offspring compositions, in
    /// infection order.
    pub infected_nodes: Option<Vec<GWNode>>,
}

#[derive(Debug, Clone)]
struct Pending {
    generation: u32,
    word: Vec<u32>,
    node_type: usize,
}

/// Realizes the epidemic as a pruned multitype Galton-Watson tree.
///
/// Children are appended to the pending queue when their parent is
/// resolved, and parents are resolved in (generation, word) order, so a
/// FIFO queue pops nodes in exactly that order.
pub fn run_coupled<R: Rng + ?Sized>(instance: &InstanceSpec, rng: &mut R, opts: RunOptions) -> Result<CouplingResult> {
    run_coupled_inner(instance, rng, opts, false)
}

/// As [`run_coupled`], also returning every infected node.
pub fn run_coupled_with_nodes<R: Rng + ?Sized>(
    instance: &InstanceSpec,
    rng: &mut R,
    opts: RunOptions,
) -> Result<CouplingResult> {
    run_coupled_inner(instance, rng, opts, true)
}

fn run_coupled_inner<R: Rng + ?Sized>(
    instance: &InstanceSpec,
    rng: &mut R,
    opts: RunOptions,
    keep_nodes: bool,
) -> Result<CouplingResult> {
    let spec = instance.spec();
    let j = spec.types();
    let laws = spec.offspring();
    let types = TypeSampler::new(spec.alpha());
    let chain = crate::chain::Chain::new(instance);
    let cap = chain.step_cap();
    let n_types = instance.type_counts();

    let mut infected = vec![0u64; j];
    let mut failures = 0u64;
    let mut pending: VecDeque<Pending> = VecDeque::new();
    let mut acquisition = opts.record_acquisition.then(|| vec![Vec::new(); j]);
    let mut capacities = opts.record_acquisition.then(|| vec![Vec::new(); j]);
    let mut nodes = keep_nodes.then(Vec::new);
    let mut rows = Vec::new();
    let record_full = opts.trajectory == TrajectoryMode::Full;

    let mut expand = |node: Pending,
                      t: u64,
                      infected: &mut Vec<u64>,
                      pending: &mut VecDeque<Pending>,
                      rng: &mut R| {
        let ty = node.node_type;
        let l = laws[ty].sample(rng);
        infected[ty] += 1;
        if let Some(a) = acquisition.as_mut() {
            a[ty].push(t);
        }
        if let Some(c) = capacities.as_mut() {
            c[ty].push(l);
        }
        let mut child_counts = vec![0u64; j];
        for k in 1..=l {
            let child_type = types.sample(rng);
            child_counts[child_type] += 1;
            let mut word = node.word.clone();
            word.push(k as u32);
            pending.push_back(Pending { generation: node.generation + 1, word, node_type: child_type });
        }
        if let Some(ns) = nodes.as_mut() {
            ns.push(GWNode { ulam_index: node.word, node_type: ty, child_counts });
        }
    };

    let root = Pending { generation: 0, word: Vec::new(), node_type: spec.i0() };
    expand(root, 0, &mut infected, &mut pending, rng);
    let mut t = 0u64;
    if record_full {
        rows.push(TrajectoryRow { t, counts: infected.clone(), capacity: pending.len() as u64 });
    }
    let mut last_key: Option<(u32, Vec<u32>)> = None;

    while let Some(node) = pending.pop_front() {
        if t >= cap {
            return Err(Error::RunawayEpidemic(cap));
        }
        t += 1;
        if cfg!(debug_assertions) {
            let key = (node.generation, node.word.clone());
            if let Some(prev) = &last_key {
                debug_assert!(*prev < key, "pending nodes must leave in (generation, word) order");
            }
            last_key = Some(key);
        }
        let ty = node.node_type;
        let free = n_types[ty] - infected[ty];
        if free > 0 && rng.random_range(0..n_types[ty]) < free {
            expand(node, t, &mut infected, &mut pending, rng);
        } else {
            failures += 1;
        }
        if record_full {
            rows.push(TrajectoryRow { t, counts: infected.clone(), capacity: pending.len() as u64 });
        }
    }

    let tau = t;
    let total: u64 = infected.iter().sum();
    let epidemic = EpidemicResult {
        n: instance.n(),
        tau,
        tau_tilde: sum_exponential_gaps(tau, rng),
        final_counts: infected.clone(),
        total_infected: total,
        full_transmission: total == instance.n(),
        acquisition_times: acquisition,
        revealed_capacities: capacities,
        trajectory: record_full.then_some(rows),
    };
    Ok(CouplingResult { epidemic, infected_tree_size: total, failures, per_type_infected: infected, infected_nodes: nodes })
}

/// A run counts as surviving when it lasted a macroscopic time,
/// `tau_n >= kappa * theta * n`.
pub fn classify_survival(result: &EpidemicResult, theta: f64, kappa: f64) -> Result<bool> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::ThetaUnavailable(format!("theta = {theta}")));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::Precondition(format!("kappa = {kappa} not in (0, 1)")));
    }
    Ok(result.tau as f64 >= kappa * theta * result.n as f64)
}
