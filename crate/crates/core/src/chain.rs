//! The epidemic as a discrete-time Markov chain on (infected counts per
//! type, available capacity), plus the Poissonized continuous-time picture
//! with independent exponential clocks per vertex.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp, Exp1, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InstanceSpec, TypeSampler};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainState {
    pub counts: Vec<u64>,
    pub capacity: u64,
    pub step: u64,
}

impl ChainState {
    pub fn total_infected(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_terminated(&self) -> bool {
        self.capacity == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// The attempt hit an already infected vertex.
    Waste { target: usize },
    /// A new vertex of type `target` was infected and revealed `capacity`.
    Infect { target: usize, capacity: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrajectoryMode {
    #[default]
    Off,
    /// Between `k` and `2k` evenly strided rows, plus the terminal row.
    Checkpoints(usize),
    /// Every step. Only sensible for small populations.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub record_acquisition: bool,
    pub trajectory: TrajectoryMode,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { record_acquisition: false, trajectory: TrajectoryMode::Off }
    }
}

impl RunOptions {
    pub fn detailed() -> Self {
        Self { record_acquisition: true, trajectory: TrajectoryMode::Checkpoints(64) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: u64,
    pub counts: Vec<u64>,
    pub capacity: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicResult {
    pub n: u64,
    pub tau: u64,
    pub tau_tilde: f64,
    pub final_counts: Vec<u64>,
    pub total_infected: u64,
    pub full_transmission: bool,
    /// `acquisition_times[i][k]`: step at which the `(k+1)`-th type-`i`
    /// vertex was infected.
    pub acquisition_times: Option<Vec<Vec<u64>>>,
    /// `revealed_capacities[i][k]`: spread capacity of that vertex.
    pub revealed_capacities: Option<Vec<Vec<u64>>>,
    pub trajectory: Option<Vec<TrajectoryRow>>,
}

impl EpidemicResult {
    /// Inter-arrival times `T^i_k - T^i_(k-1)` with `T^i_0 = 0`.
    pub fn inter_arrival_times(&self) -> Option<Vec<Vec<u64>>> {
        self.acquisition_times.as_ref().map(|per_type| {
            per_type
                .iter()
                .map(|ts| {
                    let mut prev = 0;
                    ts.iter()
                        .map(|&t| {
                            let d = t - prev;
                            prev = t;
                            d
                        })
                        .collect()
                })
                .collect()
        })
    }
}

/// Precomputed sampling tables for one instance.
#[derive(Debug, Clone)]
pub struct Chain<'a> {
    instance: &'a InstanceSpec,
    types: TypeSampler,
    step_cap: u64,
}

impl<'a> Chain<'a> {
    pub fn new(instance: &'a InstanceSpec) -> Self {
        let spec = instance.spec();
        let scale: f64 = spec.gamma().iter().zip(spec.offspring()).map(|(g, l)| g * l.mean()).sum();
        let step_cap = (instance.n() as f64 * (1.0 + scale) * 1e3).min(u64::MAX as f64 / 2.0) as u64;
        Self { instance, types: TypeSampler::new(spec.alpha()), step_cap }
    }

    pub fn instance(&self) -> &InstanceSpec {
        self.instance
    }

    pub fn step_cap(&self) -> u64 {
        self.step_cap
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> (ChainState, u64) {
        let spec = self.instance.spec();
        let i0 = spec.i0();
        let mut counts = vec![0; spec.types()];
        counts[i0] = 1;
        let capacity = spec.offspring()[i0].sample(rng);
        (ChainState { counts, capacity, step: 0 }, capacity)
    }

    /// One infection attempt. The target's type is drawn with probability
    /// `alpha_j`; the attempt succeeds with probability
    /// `(n_j - counts_j) / n_j`. This composes to the transition law with
    /// waste probability `sum_i counts_i p_i` and type-`i` infection
    /// probability `p_i (n_i - counts_i)`.
    #[inline]
    pub fn step_in_place<R: Rng + ?Sized>(&self, state: &mut ChainState, rng: &mut R) -> Result<StepOutcome> {
        if state.capacity == 0 {
            return Err(Error::CalledOnTerminated);
        }
        let j = self.types.sample(rng);
        let n_j = self.instance.type_counts()[j];
        let free = n_j - state.counts[j];
        state.step += 1;
        if free > 0 && rng.random_range(0..n_j) < free {
            let capacity = self.instance.spec().offspring()[j].sample(rng);
            state.counts[j] += 1;
            state.capacity = state.capacity - 1 + capacity;
            Ok(StepOutcome::Infect { target: j, capacity })
        } else {
            state.capacity -= 1;
            Ok(StepOutcome::Waste { target: j })
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &ChainState, rng: &mut R) -> Result<ChainState> {
        let mut next = state.clone();
        self.step_in_place(&mut next, rng)?;
        Ok(next)
    }

    pub fn run<R: Rng + ?Sized>(&self, rng: &mut R, opts: RunOptions) -> Result<EpidemicResult> {
        let j = self.instance.spec().types();
        let i0 = self.instance.spec().i0();
        let (mut state, root_capacity) = self.initial_state(rng);

        let mut acquisition = opts.record_acquisition.then(|| {
            let mut v = vec![Vec::new(); j];
            v[i0].push(0);
            v
        });
        let mut capacities = opts.record_acquisition.then(|| {
            let mut v = vec![Vec::new(); j];
            v[i0].push(root_capacity);
            v
        });
        let mut recorder = TrajectoryRecorder::new(opts.trajectory);
        recorder.observe(&state);

        while state.capacity > 0 {
            if state.step >= self.step_cap {
                return Err(Error::RunawayEpidemic(self.step_cap));
            }
            let outcome = self.step_in_place(&mut state, rng)?;
            if let StepOutcome::Infect { target, capacity } = outcome {
                if let Some(acq) = acquisition.as_mut() {
                    acq[target].push(state.step);
                }
                if let Some(caps) = capacities.as_mut() {
                    caps[target].push(capacity);
                }
            }
            recorder.observe(&state);
        }

        let tau = state.step;
        let tau_tilde = sum_exponential_gaps(tau, rng);
        let total_infected = state.total_infected();
        Ok(EpidemicResult {
            n: self.instance.n(),
            tau,
            tau_tilde,
            total_infected,
            full_transmission: total_infected == self.instance.n(),
            final_counts: state.counts.clone(),
            acquisition_times: acquisition,
            revealed_capacities: capacities,
            trajectory: recorder.finish(&state),
        })
    }
}

/// Runs the chain to termination.
pub fn run_epidemic<R: Rng + ?Sized>(instance: &InstanceSpec, rng: &mut R, opts: RunOptions) -> Result<EpidemicResult> {
    Chain::new(instance).run(rng, opts)
}

/// Sum of `count` standard exponentials, Kahan-compensated.
pub fn sum_exponential_gaps<R: Rng + ?Sized>(count: u64, rng: &mut R) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for _ in 0..count {
        let x: f64 = Exp1.sample(rng);
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

struct TrajectoryRecorder {
    mode: TrajectoryMode,
    stride: u64,
    rows: Vec<TrajectoryRow>,
}

impl TrajectoryRecorder {
    fn new(mode: TrajectoryMode) -> Self {
        Self { mode, stride: 1, rows: Vec::new() }
    }

    fn observe(&mut self, state: &ChainState) {
        let limit = match self.mode {
            TrajectoryMode::Off => return,
            TrajectoryMode::Full => usize::MAX,
            TrajectoryMode::Checkpoints(k) => 2 * k.max(1),
        };
        if !state.step.is_multiple_of(self.stride) {
            return;
        }
        self.rows.push(TrajectoryRow { t: state.step, counts: state.counts.clone(), capacity: state.capacity });
        if self.rows.len() >= limit {
            // keep every other row and double the stride
            let kept: Vec<_> = self.rows.drain(..).filter(|r| r.t % (2 * self.stride) == 0).collect();
            self.rows = kept;
            self.stride *= 2;
        }
    }

    fn finish(mut self, state: &ChainState) -> Option<Vec<TrajectoryRow>> {
        if self.mode == TrajectoryMode::Off {
            return None;
        }
        if self.rows.last().map(|r| r.t) != Some(state.step) {
            self.rows.push(TrajectoryRow { t: state.step, counts: state.counts.clone(), capacity: state.capacity });
        }
        Some(self.rows)
    }
}

/// One row of the replicate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicRow {
    pub replicate_id: u64,
    pub seed: u64,
    pub n: u64,
    pub tau: u64,
    pub tau_tilde: f64,
    pub infected_total: u64,
    pub infected_per_type: String,
    pub full_transmission: bool,
    pub survived_flag: bool,
}

impl EpidemicRow {
    pub fn new(replicate_id: u64, seed: u64, result: &EpidemicResult, survived: bool) -> Self {
        let per_type = result.final_counts.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        Self {
            replicate_id,
            seed,
            n: result.n,
            tau: result.tau,
            tau_tilde: result.tau_tilde,
            infected_total: result.total_infected,
            infected_per_type: per_type,
            full_transmission: result.full_transmission,
            survived_flag: survived,
        }
    }

    pub fn per_type_counts(&self) -> Result<Vec<u64>> {
        self.infected_per_type
            .split(';')
            .map(|s| s.parse::<u64>().map_err(|e| Error::Config(format!("bad per-type count {s:?}: {e}"))))
            .collect()
    }
}

pub fn write_rows_csv<W: Write>(out: W, rows: &[EpidemicRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv<R: std::io::Read>(input: R) -> Result<Vec<EpidemicRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SnapshotOptions {
    /// Track the total attempt count `P` at each grid time.
    pub attempts: bool,
    /// Track revealed capacities `R^i` at each grid time.
    pub capacities: bool,
    /// Fractions `q` at which to report acquisition times
    /// `T^i_{floor(n_i q)}`.
    pub acquisition_quantiles: Vec<f64>,
}

impl SnapshotOptions {
    pub fn full() -> Self {
        Self { attempts: true, capacities: true, acquisition_quantiles: Vec::new() }
    }
}

/// Continuous-time state at `t = n s` for each `s` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSnapshot {
    pub n: u64,
    pub grid: Vec<f64>,
    /// `counts[g][i]`: infected type-`i` vertices at time `n * grid[g]`.
    pub counts: Vec<Vec<u64>>,
    pub attempts: Option<Vec<u64>>,
    pub revealed: Option<Vec<Vec<u64>>>,
    /// Type of the vertex hit by the first event overall.
    pub first_event_type: usize,
    /// `acquisition[q][i]`: raw time of the `floor(n_i q)`-th type-`i`
    /// infection (`0` when that index is `0`).
    pub acquisition: Vec<Vec<f64>>,
}

impl ContinuousSnapshot {
    pub fn total_counts(&self) -> Vec<u64> {
        self.counts.iter().map(|c| c.iter().sum()).collect()
    }
}

/// Poissonized coupon collection: each vertex of type `i` carries an
/// independent rate-`p_i` Poisson clock. Only first-event times are drawn
/// per vertex; later events are aggregated per grid interval.
pub fn continuous_snapshot<R: Rng + ?Sized>(
    instance: &InstanceSpec,
    grid: &[f64],
    opts: &SnapshotOptions,
    rng: &mut R,
) -> Result<ContinuousSnapshot> {
    if grid.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Precondition("grid points must be finite and nonnegative".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Precondition("grid must be sorted ascending".into()));
    }
    if opts.acquisition_quantiles.iter().any(|q| !(0.0..1.0).contains(q)) {
        return Err(Error::Precondition("acquisition quantiles must lie in [0, 1)".into()));
    }
    let n = instance.n() as f64;
    let times: Vec<f64> = grid.iter().map(|s| s * n).collect();
    let m = times.len();
    let j = instance.spec().types();

    let mut counts = vec![vec![0u64; j]; m];
    // exposure[g]: sum over vertices of rate * time spent after their first
    // event inside interval g
    let mut exposure = vec![0.0f64; m];
    let mut firsts = vec![0u64; m];
    let mut first_event = (f64::INFINITY, 0usize);
    let mut acquisition = vec![vec![0.0; j]; opts.acquisition_quantiles.len()];

    for i in 0..j {
        let n_i = instance.type_counts()[i];
        let rate = instance.vertex_weight(i);
        let clock = Exp::new(rate).map_err(|e| Error::InvalidParameter(format!("rate {rate}: {e}")))?;
        let mut per_bin = vec![0u64; m];
        let mut keep = if opts.acquisition_quantiles.is_empty() { None } else { Some(Vec::with_capacity(n_i as usize)) };
        for _ in 0..n_i {
            let e: f64 = clock.sample(rng);
            if e < first_event.0 {
                first_event = (e, i);
            }
            if let Some(k) = keep.as_mut() {
                k.push(e);
            }
            // first grid index with time >= e
            let g = times.partition_point(|&t| t < e);
            if g < m {
                per_bin[g] += 1;
                exposure[g] += rate * (times[g] - e);
            }
        }
        let mut running = 0;
        for g in 0..m {
            running += per_bin[g];
            counts[g][i] = running;
            firsts[g] += per_bin[g];
            if g + 1 < m {
                exposure[g + 1] += rate * running as f64 * (times[g + 1] - times[g]);
            }
        }
        if let Some(mut k) = keep {
            for (qi, &q) in opts.acquisition_quantiles.iter().enumerate() {
                let idx = (n_i as f64 * q).floor() as usize;
                acquisition[qi][i] = if idx == 0 {
                    0.0
                } else {
                    *k.select_nth_unstable_by(idx - 1, f64::total_cmp).1
                };
            }
        }
    }

    let attempts = opts.attempts.then(|| {
        let mut total = 0u64;
        (0..m)
            .map(|g| {
                let extra = if exposure[g] > 0.0 {
                    Poisson::new(exposure[g]).expect("positive mean").sample(rng) as u64
                } else {
                    0
                };
                total += firsts[g] + extra;
                total
            })
            .collect()
    });

    let revealed = opts.capacities.then(|| {
        let laws = instance.spec().offspring();
        let mut out = vec![vec![0u64; j]; m];
        for i in 0..j {
            let mut sum = 0u64;
            let mut drawn = 0u64;
            for g in 0..m {
                while drawn < counts[g][i] {
                    sum += laws[i].sample(rng);
                    drawn += 1;
                }
                out[g][i] = sum;
            }
        }
        out
    });

    Ok(ContinuousSnapshot {
        n: instance.n(),
        grid: grid.to_vec(),
        counts,
        attempts,
        revealed,
        first_event_type: first_event.1,
        acquisition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{realize_instance, ModelSpec};
    use crate::offspring::OffspringLaw;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(spec: &ModelSpec, n: u64) -> InstanceSpec {
        realize_instance(spec, n).unwrap()
    }

    #[test]
    fn single_vertex_wastes_all_capacity() {
        let inst = instance(&ModelSpec::homogeneous(OffspringLaw::point_mass(3)), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let chain = Chain::new(&inst);
        let state = ChainState { counts: vec![1], capacity: 3, step: 0 };
        let next = chain.step(&state, &mut rng).unwrap();
        assert_eq!(next, ChainState { counts: vec![1], capacity: 2, step: 1 });

        let res = run_epidemic(&inst, &mut rng, RunOptions::default()).unwrap();
        assert_eq!((res.tau, res.total_infected, res.full_transmission), (3, 1, true));
    }

    #[test]
    fn step_on_terminated_chain_errors() {
        let inst = instance(&ModelSpec::homogeneous(OffspringLaw::point_mass(3)), 5);
        let chain = Chain::new(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dead = ChainState { counts: vec![2], capacity: 0, step: 4 };
        assert_eq!(chain.step(&dead, &mut rng), Err(Error::CalledOnTerminated));
    }

    #[test]
    fn initial_state_is_root_type() {
        let spec = ModelSpec::new(
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            vec![OffspringLaw::point_mass(2), OffspringLaw::point_mass(5)],
            1,
        )
        .unwrap();
        let inst = instance(&spec, 10);
        let (s, cap) = Chain::new(&inst).initial_state(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.counts, vec![0, 1]);
        assert_eq!((s.capacity, cap, s.step), (5, 5, 0));
    }

    #[test]
    fn transition_frequencies_match_exact_probabilities() {
        // n = (2, 2), counts = (1, 0): waste p1, infect type 0 p1, infect type 1 2 p2
        let spec = ModelSpec::new(
            vec![0.5, 0.5],
            vec![1.2, 0.8],
            vec![OffspringLaw::point_mass(1), OffspringLaw::point_mass(1)],
            0,
        )
        .unwrap();
        let inst = instance(&spec, 4);
        assert_eq!(inst.type_counts(), &[2, 2]);
        let (p1, p2) = (inst.vertex_weight(0), inst.vertex_weight(1));
        let expected = [p1, p1, 2.0 * p2];
        assert!((expected.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let chain = Chain::new(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let start = ChainState { counts: vec![1, 0], capacity: 5, step: 0 };
        let draws = 1_000_000;
        let mut hits = [0u64; 3];
        for _ in 0..draws {
            let mut s = start.clone();
            match chain.step_in_place(&mut s, &mut rng).unwrap() {
                StepOutcome::Waste { .. } => hits[0] += 1,
                StepOutcome::Infect { target: 0, .. } => hits[1] += 1,
                StepOutcome::Infect { .. } => hits[2] += 1,
            }
        }
        for (h, p) in hits.iter().zip(expected) {
            let f = *h as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((f - p).abs() < 3.0 * se, "{f} vs {p}");
        }
    }

    #[test]
    fn capacity_identity_and_acquisition_duality_on_full_trajectories() {
        let spec = ModelSpec::new(
            vec![0.3, 0.7],
            vec![2.0, 4.0 / 7.0],
            vec![OffspringLaw::poisson(2.5).unwrap(), OffspringLaw::geometric(0.4).unwrap()],
            0,
        )
        .unwrap();
        let inst = instance(&spec, 500);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let opts = RunOptions { record_acquisition: true, trajectory: TrajectoryMode::Full };
        for _ in 0..50 {
            let res = run_epidemic(&inst, &mut rng, opts).unwrap();
            let acq = res.acquisition_times.as_ref().unwrap();
            let caps = res.revealed_capacities.as_ref().unwrap();
            let rows = res.trajectory.as_ref().unwrap();
            assert_eq!(rows.len() as u64, res.tau + 1);
            for row in rows {
                let revealed: u64 = (0..2).map(|i| caps[i][..row.counts[i] as usize].iter().sum::<u64>()).sum();
                assert_eq!(row.capacity as i64, revealed as i64 - row.t as i64);
                for i in 0..2 {
                    assert!(row.counts[i] <= inst.type_counts()[i]);
                    let dual = acq[i].iter().filter(|&&t| t <= row.t).count() as u64;
                    assert_eq!(dual, row.counts[i]);
                }
                // capacity zero only at the end
                assert_eq!(row.capacity == 0, row.t == res.tau);
            }
            for w in rows.windows(2) {
                assert!(w[0].counts.iter().zip(&w[1].counts).all(|(a, b)| a <= b));
            }
            for ts in acq {
                assert!(ts.windows(2).all(|w| w[0] < w[1]));
            }
            assert_eq!(res.total_infected, res.final_counts.iter().sum::<u64>());
            assert!(res.tau + 1 >= res.total_infected);
            assert_eq!(res.full_transmission, res.total_infected == 500);
        }
    }

    #[test]
    fn checkpoints_are_bounded() {
        let inst = instance(&ModelSpec::homogeneous(OffspringLaw::point_mass(2)), 20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = RunOptions { record_acquisition: false, trajectory: TrajectoryMode::Checkpoints(64) };
        let res = run_epidemic(&inst, &mut rng, opts).unwrap();
        let rows = res.trajectory.unwrap();
        assert!(rows.len() <= 129, "{}", rows.len());
        if res.tau > 1000 {
            assert!(rows.len() >= 64);
        }
        assert_eq!(rows.last().unwrap().t, res.tau);
    }

    #[test]
    fn two_vertices_unit_capacity_moments() {
        // exhaustive: step 1 hits the root (tau = 1, N = 1) or the other
        // vertex (tau = 2, N = 2), each with probability 1/2
        let inst = instance(&ModelSpec::homogeneous(OffspringLaw::point_mass(1)), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps = 100_000;
        let mut tau_sum = 0u64;
        let mut full = 0u64;
        for _ in 0..reps {
            let r = run_epidemic(&inst, &mut rng, RunOptions::default()).unwrap();
            tau_sum += r.tau;
            full += u64::from(r.total_infected == 2);
        }
        let mean = tau_sum as f64 / reps as f64;
        let se = (0.25 / reps as f64).sqrt();
        assert!((mean - 1.5).abs() < 3.0 * se);
        assert!((full as f64 / reps as f64 - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn snapshot_at_zero_is_empty() {
        let inst = instance(&ModelSpec::homogeneous(OffspringLaw::point_mass(2)), 100);
        let snap = continuous_snapshot(&inst, &[0.0], &SnapshotOptions::full(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(snap.counts, vec![vec![0]]);
        assert_eq!(snap.attempts, Some(vec![0]));
        assert_eq!(snap.revealed, Some(vec![vec![0]]));
    }

    #[test]
    fn snapshot_rejects_unsorted_grid() {
        let inst = instance(&ModelSpec::homogeneous(OffspringLaw::point_mass(2)), 100);
        let r = continuous_snapshot(&inst, &[1.0, 0.5], &SnapshotOptions::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn snapshot_series_are_monotone_and_attempts_dominate_infections() {
        let spec = ModelSpec::new(
            vec![0.5, 0.5],
            vec![1.2, 0.8],
            vec![OffspringLaw::poisson(2.0).unwrap(), OffspringLaw::point_mass(3)],
            0,
        )
        .unwrap();
        let inst = instance(&spec, 1000);
        let grid = [0.1, 0.5, 1.0, 2.0, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let s = continuous_snapshot(&inst, &grid, &SnapshotOptions::full(), &mut rng).unwrap();
            let p = s.attempts.as_ref().unwrap();
            let tot = s.total_counts();
            for g in 0..grid.len() {
                assert!(p[g] >= tot[g]);
                if g > 0 {
                    assert!(p[g] >= p[g - 1]);
                    for i in 0..2 {
                        assert!(s.counts[g][i] >= s.counts[g - 1][i]);
                        assert!(s.revealed.as_ref().unwrap()[g][i] >= s.revealed.as_ref().unwrap()[g - 1][i]);
                    }
                }
            }
        }
    }

    #[test]
    fn snapshot_attempt_mean_matches_clock_rate() {
        // total attempts by time t is Poisson(t)
        let inst = instance(&ModelSpec::homogeneous(OffspringLaw::point_mass(2)), 200);
        let grid = [0.5, 1.5];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let reps = 4000;
        let mut sums = [0.0f64; 2];
        for _ in 0..reps {
            let s = continuous_snapshot(&inst, &grid, &SnapshotOptions::full(), &mut rng).unwrap();
            let p = s.attempts.unwrap();
            sums[0] += p[0] as f64;
            sums[1] += p[1] as f64;
        }
        for (sum, s) in sums.iter().zip(grid) {
            let lam = 200.0 * s;
            let se = (lam / reps as f64).sqrt();
            assert!((sum / reps as f64 - lam).abs() < 4.0 * se, "{} vs {lam}", sum / reps as f64);
        }
    }

    #[test]
    fn rows_roundtrip_through_csv() {
        let res = EpidemicResult {
            n: 10,
            tau: 7,
            tau_tilde: 6.5,
            final_counts: vec![2, 3],
            total_infected: 5,
            full_transmission: false,
            acquisition_times: None,
            revealed_capacities: None,
            trajectory: None,
        };
        let rows = vec![EpidemicRow::new(0, 99, &res, true)];
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "replicate_id,seed,n,tau,tau_tilde,infected_total,infected_per_type,full_transmission,survived_flag"
        ));
        let back = read_rows_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].per_type_counts().unwrap(), vec![2, 3]);
    }
}
