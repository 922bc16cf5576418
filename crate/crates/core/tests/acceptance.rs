//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p spread-core --test acceptance`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spread_core::asymptotics::{f_theta, predictions, solve_theta, CwVariant};
use spread_core::chain::{run_epidemic, RunOptions};
use spread_core::harness::{run_experiment, CheckId, CheckRecord, ExperimentConfig, ValidationReport, Verdict};
use spread_core::mgw::{extinction_probability, run_coupled};
use spread_core::model::{realize_instance, ModelSpec};
use spread_core::offspring::OffspringLaw;
use spread_core::stats::{chi_square_independence, summarize};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

struct Outcome {
    pass: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { pass: true, lines: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: String) {
        self.pass &= ok;
        self.lines.push(format!("{} {what}", if ok { "ok  " } else { "FAIL" }));
    }
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> ExperimentConfig {
    let text = std::fs::read_to_string(configs_dir().join(name)).expect("config readable");
    ExperimentConfig::from_json(&text).expect("config valid")
}

fn h1() -> ModelSpec {
    config("h1.json").model
}

fn poisson2() -> ModelSpec {
    config("poisson2.json").model
}

fn j2() -> ModelSpec {
    config("j2.json").model
}

fn bisect(spec: &ModelSpec) -> f64 {
    let hi0: f64 = spec.gamma().iter().zip(spec.offspring_means()).map(|(g, e)| g * e).sum();
    let (mut lo, mut hi) = (1e-9, hi0);
    while f_theta(spec, lo) <= 0.0 {
        lo /= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f_theta(spec, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn record_lines(out: &mut Outcome, rec: &CheckRecord, label: &str) {
    for m in &rec.measurements {
        let stat = match (m.p_value, m.z_score) {
            (Some(p), _) if m.z_score.is_none() => format!("p = {p:.4}"),
            (_, Some(z)) => format!("z = {z:.2}"),
            _ => format!("|diff| = {:.4}", (m.estimate - m.target).abs()),
        };
        let line = format!("{label} {}: {:.6} vs {:.6} ({stat}) {:?}", m.quantity, m.estimate, m.target, m.verdict);
        if m.supplementary {
            out.lines.push(format!("     [info] {line}"));
        } else {
            out.check(m.verdict == Verdict::Pass, line);
        }
    }
}

fn ac1() -> Outcome {
    let mut out = Outcome::new();
    // two identical types with beta = 1: the same process as H1
    let reduction = ModelSpec::new(
        vec![0.5, 0.5],
        vec![1.0, 1.0],
        vec![OffspringLaw::point_mass(2), OffspringLaw::point_mass(2)],
        0,
    )
    .unwrap();
    for (label, spec) in [("H1", h1()), ("J=2 reduction", reduction.clone()), ("J=2 example", j2())] {
        let start = Instant::now();
        let theta = solve_theta(&spec).unwrap();
        let elapsed = start.elapsed();
        let oracle = bisect(&spec);
        out.check(f_theta(&spec, theta).abs() < 1e-12, format!("{label} |f(theta)| = {:.2e} < 1e-12", f_theta(&spec, theta).abs()));
        out.check((theta - oracle).abs() < 1e-10, format!("{label} theta = {theta:.15} vs bisection {oracle:.15}"));
        out.check(elapsed.as_secs_f64() < 1e-3, format!("{label} solve time {:.1} us < 1 ms", elapsed.as_secs_f64() * 1e6));
    }
    let (a, b) = (solve_theta(&h1()).unwrap(), solve_theta(&reduction).unwrap());
    out.check((a - b).abs() < 1e-10, format!("J=2 reduction theta equals H1 theta ({:.2e})", (a - b).abs()));
    out
}

/// Exact law of `(tau, N)` for a single-type model with finite-support
/// capacities, by recursion over (infected, pending capacity).
fn enumerate(n: u64, law: &OffspringLaw) -> Vec<((u64, u64), f64)> {
    fn go(n: u64, law: &OffspringLaw, infected: u64, cap: u64, t: u64, p: f64, acc: &mut Vec<((u64, u64), f64)>) {
        if cap == 0 {
            match acc.iter_mut().find(|(k, _)| *k == (t, infected)) {
                Some((_, q)) => *q += p,
                None => acc.push(((t, infected), p)),
            }
            return;
        }
        let hit = (n - infected) as f64 / n as f64;
        if hit > 0.0 {
            for k in 0..=law.support_max().unwrap() {
                let pk = law.pmf(k);
                if pk > 0.0 {
                    go(n, law, infected + 1, cap - 1 + k, t + 1, p * hit * pk, acc);
                }
            }
        }
        if hit < 1.0 {
            go(n, law, infected, cap - 1, t + 1, p * (1.0 - hit), acc);
        }
    }
    let mut acc = Vec::new();
    for k in 0..=law.support_max().unwrap() {
        if law.pmf(k) > 0.0 {
            go(n, law, 1, k, 0, law.pmf(k), &mut acc);
        }
    }
    acc
}

fn ac2() -> Outcome {
    let mut out = Outcome::new();
    let start = Instant::now();
    let spec = ModelSpec::homogeneous(OffspringLaw::point_mass(1));
    let law = OffspringLaw::point_mass(1);
    let exact = enumerate(2, &law);
    let e_tau: f64 = exact.iter().map(|((t, _), p)| *t as f64 * p).sum();
    let p_two: f64 = exact.iter().filter(|((_, k), _)| *k == 2).map(|(_, p)| p).sum();
    out.check((e_tau - 1.5).abs() < 1e-12, format!("enumeration E[tau] = {e_tau}"));
    out.check((p_two - 0.5).abs() < 1e-12, format!("enumeration P[N = 2] = {p_two}"));

    let inst = realize_instance(&spec, 2).unwrap();
    let reps = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let chain: Vec<(u64, u64)> = (0..reps)
        .map(|_| {
            let r = run_epidemic(&inst, &mut rng, RunOptions::default()).unwrap();
            (r.tau, r.total_infected)
        })
        .collect();
    let taus: Vec<f64> = chain.iter().map(|c| c.0 as f64).collect();
    let twos: Vec<f64> = chain.iter().map(|c| (c.1 == 2) as u8 as f64).collect();
    let (st, s2) = (summarize(&taus), summarize(&twos));
    let (zt, z2) = ((st.mean - e_tau) / st.std_error, (s2.mean - p_two) / s2.std_error);
    out.check(zt.abs() < 3.0, format!("Monte Carlo E[tau] = {:.5} (z = {zt:.2})", st.mean));
    out.check(z2.abs() < 3.0, format!("Monte Carlo P[N = 2] = {:.5} (z = {z2:.2})", s2.mean));

    let coupled: Vec<(u64, u64)> = (0..reps)
        .map(|_| {
            let r = run_coupled(&inst, &mut rng, RunOptions::default()).unwrap();
            (r.epidemic.tau, r.epidemic.total_infected)
        })
        .collect();
    let mut keys: Vec<(u64, u64)> = chain.iter().chain(&coupled).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let cat = |c: &(u64, u64)| keys.binary_search(c).unwrap();
    let source: Vec<usize> = (0..2 * reps).map(|k| (k >= reps) as usize).collect();
    let joint: Vec<usize> = chain.iter().chain(&coupled).map(cat).collect();
    let chi = chi_square_independence(&source, &joint).unwrap();
    out.check(chi.p_value > 0.001, format!("coupled vs chain joint (tau, N) law: chi2 = {:.3}, p = {:.4}", chi.statistic, chi.p_value));

    // a second, less degenerate instance through the same three oracles
    let law3 = OffspringLaw::binomial(2, 0.6).unwrap();
    let spec3 = ModelSpec::homogeneous(law3.clone());
    let exact3 = enumerate(4, &law3);
    let e3: f64 = exact3.iter().map(|((t, _), p)| *t as f64 * p).sum();
    let inst3 = realize_instance(&spec3, 4).unwrap();
    let t3: Vec<f64> =
        (0..reps).map(|_| run_epidemic(&inst3, &mut rng, RunOptions::default()).unwrap().tau as f64).collect();
    let s3 = summarize(&t3);
    let z3 = (s3.mean - e3) / s3.std_error;
    out.check(z3.abs() < 3.0, format!("n=4 Binomial(2, 0.6): E[tau] exact {e3:.5}, Monte Carlo {:.5} (z = {z3:.2})", s3.mean));

    let secs = start.elapsed().as_secs_f64();
    out.check(secs < 5.0, format!("runtime {secs:.2} s < 5 s"));
    out
}

fn ac3() -> Outcome {
    let mut out = Outcome::new();
    for (label, spec) in [("H1", h1()), ("Poisson(2)", poisson2())] {
        let start = Instant::now();
        let mut cfg = ExperimentConfig::new(spec, 100_000, 200, 303, vec![CheckId::Lln]);
        cfg.survivors_target = true;
        let rep = run_experiment(&cfg, None).unwrap();
        record_lines(&mut out, rep.record(CheckId::Lln, 100_000).unwrap(), label);
        let secs = start.elapsed().as_secs_f64();
        out.check(secs < 120.0, format!("{label} runtime {secs:.1} s < 120 s"));
    }
    out
}

fn ac4() -> Outcome {
    let mut out = Outcome::new();
    let start = Instant::now();
    let cfg = config("poisson2.json");
    let sigma = extinction_probability(&cfg.model).unwrap().sigma_mgw;
    out.check((sigma - 0.203188).abs() < 1e-6, format!("sigma_MGW = {sigma:.6} from the fixed point"));
    let rep = run_experiment(&cfg, None).unwrap();
    let n = cfg.populations().unwrap()[0];
    record_lines(&mut out, rep.record(CheckId::ExtinctFraction, n).unwrap(), "Poisson(2)");
    record_lines(&mut out, rep.record(CheckId::KappaInvariance, n).unwrap(), "Poisson(2)");
    let secs = start.elapsed().as_secs_f64();
    out.check(secs < 120.0, format!("runtime {secs:.1} s < 120 s"));
    out
}

fn clt_reports() -> Vec<(&'static str, ValidationReport, f64)> {
    [("H1", h1()), ("Poisson(2)", poisson2())]
        .into_iter()
        .map(|(label, spec)| {
            let start = Instant::now();
            let mut cfg = ExperimentConfig::new(spec, 10_000, 5_000, 606, vec![CheckId::CltNormality, CheckId::Variance]);
            cfg.survivors_target = true;
            let rep = run_experiment(&cfg, None).unwrap();
            (label, rep, start.elapsed().as_secs_f64())
        })
        .collect()
}

fn ac5(reports: &[(&str, ValidationReport, f64)]) -> Outcome {
    let mut out = Outcome::new();
    for (label, rep, secs) in reports {
        record_lines(&mut out, rep.record(CheckId::CltNormality, 10_000).unwrap(), label);
        out.check(*secs < 300.0, format!("{label} runtime {secs:.1} s < 300 s"));
    }
    out
}

fn ac6(reports: &[(&str, ValidationReport, f64)]) -> Outcome {
    let mut out = Outcome::new();
    for (label, rep, _) in reports {
        record_lines(&mut out, rep.record(CheckId::Variance, 10_000).unwrap(), label);
    }
    out
}

fn ac7() -> Outcome {
    let mut out = Outcome::new();
    let start = Instant::now();
    let cfg = config("j2.json");
    let rep = run_experiment(&cfg, None).unwrap();
    for check in [CheckId::Poissonization, CheckId::Covariance] {
        let rec = rep.record(check, 10_000).unwrap();
        // only the non-passing rows are listed individually
        let mut passed = 0;
        for m in &rec.measurements {
            if m.verdict == Verdict::Pass {
                passed += 1;
            } else {
                let z = m.z_score.unwrap_or(f64::NAN);
                let line = format!("{}: {:.5} vs {:.5} (z = {z:.2}) {:?}", m.quantity, m.estimate, m.target, m.verdict);
                if m.supplementary {
                    out.lines.push(format!("     [info] {line}"));
                } else {
                    out.check(false, line);
                }
            }
        }
        out.lines.push(format!("     {} / {} {} comparisons pass", passed, rec.measurements.len(), check.name()));
        if check == CheckId::Covariance {
            let derived_ok = rec.measurements.iter().filter(|m| m.supplementary).all(|m| m.z_score.unwrap().abs() < 4.0);
            out.lines.push(format!("     [info] per-vertex cross kernel: all |z| < 4 = {derived_ok}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    out.check(secs < 180.0, format!("runtime {secs:.1} s < 180 s"));
    out
}

fn ac8() -> Outcome {
    let mut out = Outcome::new();
    let cfg = config("independence.json");
    let rep = run_experiment(&cfg, None).unwrap();
    record_lines(&mut out, rep.record(CheckId::Independence, 50).unwrap(), "n=50");
    record_lines(&mut out, rep.record(CheckId::CapacityLaw, 50).unwrap(), "n=50");
    // the root type examined past its root vertex
    let mut cfg2 = cfg.clone();
    cfg2.model = cfg.model.with_i0(0).unwrap();
    cfg2.independence = Some(spread_core::harness::CapacityIndex { type_index: 0, l: 2 });
    cfg2.checks = vec![CheckId::Independence];
    let rep2 = run_experiment(&cfg2, None).unwrap();
    record_lines(&mut out, rep2.record(CheckId::Independence, 50).unwrap(), "n=50 root type 0");
    out
}

fn ac9() -> Outcome {
    let mut out = Outcome::new();
    let inst = realize_instance(&h1(), 1_000_000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let start = Instant::now();
    let r = run_epidemic(&inst, &mut rng, RunOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let peak_mb = PEAK.load(Ordering::Relaxed).saturating_sub(base) as f64 / 1e6;
    out.check(secs < 1.0, format!("n = 10^6 epidemic (tau = {}) in {secs:.3} s < 1 s", r.tau));
    out.check(peak_mb < 100.0, format!("peak heap during the run {:.1} kB < 100 MB", peak_mb * 1e3));

    let start = Instant::now();
    for name in ["h1.json", "poisson2.json", "j2.json", "independence.json"] {
        let _ = run_experiment(&config(name), None).unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    out.check(secs < 600.0, format!("shipped validate suite (4 configs) in {secs:.1} s < 600 s"));
    out
}

fn ac10() -> Outcome {
    let mut out = Outcome::new();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("h1.json");
    cfg.replicates = 400;
    cfg.checks = CheckId::ALL.iter().copied().filter(|c| *c != CheckId::Covariance).collect();
    cfg.model = poisson2();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let mut reports = Vec::new();
    for threads in ["1", "4"] {
        let out_dir = dir.path().join(format!("t{threads}"));
        let code = spread_core::cli::run([
            "spread",
            "validate",
            "-c",
            cfg_path.to_str().unwrap(),
            "-o",
            out_dir.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        out.lines.push(format!("     validate with {threads} thread(s) exited {code}"));
        reports.push((
            std::fs::read(out_dir.join("report.json")).unwrap(),
            std::fs::read(out_dir.join("report.csv")).unwrap(),
        ));
    }
    out.check(reports[0].0 == reports[1].0, "report.json byte-identical for 1 and 4 threads".into());
    out.check(reports[0].1 == reports[1].1, "report.csv byte-identical for 1 and 4 threads".into());
    out
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        // cargo test --list compatibility
        return;
    }
    let verbose = std::env::var_os("ACCEPTANCE_QUIET").is_none();
    let clt = clt_reports();
    let results: Vec<(&str, &str, Outcome)> = vec![
        ("AC-1", "theta solver", ac1()),
        ("AC-2", "exact small-instance oracle", ac2()),
        ("AC-3", "law of large numbers", ac3()),
        ("AC-4", "extinction fraction", ac4()),
        ("AC-5", "CLT normality", ac5(&clt)),
        ("AC-6", "variance match and c_w arbitration", ac6(&clt)),
        ("AC-7", "Poissonization moments and covariance kernels", ac7()),
        ("AC-8", "capacity independence and law", ac8()),
        ("AC-9", "performance floor", ac9()),
        ("AC-10", "determinism", ac10()),
    ];
    println!();
    let mut failed = 0;
    for (id, title, o) in &results {
        println!("{} {id}: {title}", if o.pass { "PASS" } else { "FAIL" });
        if verbose {
            for l in &o.lines {
                println!("     {l}");
            }
        }
        failed += (!o.pass) as usize;
    }
    let predicted = predictions(&h1(), CwVariant::ProofForm).unwrap();
    if verbose {
        println!("\nH1 delta-method variances: tau_tilde {:.6}, tau {:.6}, N {:.6}", predicted.derived.var_tau_tilde, predicted.derived.var_tau, predicted.derived.var_w);
    }
    println!("\n{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
