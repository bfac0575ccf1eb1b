use serde::{Deserialize, Serialize};
use tsnode::metrics::evaluate;
use tsnode::odeint::{integrate, uniform_grid, FnField};
use tsnode::oracle::{check_exact_feedback, check_rollout_gradient, check_taylor, reinforce_identity_check};
use tsnode::seeding::{self, streams};
use tsnode::systems::{lk_invariant, make_dataset, pendulum_energy, SystemSpec};
use tsnode::tsnode::{FeedbackMode, TrainConfig, Trainer, Variant};
use tsnode::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, passed: bool, measured: f64, tolerance: f64, detail: String) -> CheckResult {
    CheckResult { name: name.into(), passed, measured, tolerance, detail }
}

fn failed(name: &str, tolerance: f64, err: impl std::fmt::Display) -> CheckResult {
    check(name, false, f64::NAN, tolerance, format!("error: {err}"))
}

pub fn rollout_gradient(seed: u64, instances: usize) -> CheckResult {
    let mut rng = seeding::stream(seed, streams::ORACLE);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        match check_rollout_gradient(&mut rng) {
            Ok(rel) => worst = worst.max(rel),
            Err(e) => return failed("rollout_gradient", 1e-4, e),
        }
    }
    check("rollout_gradient", worst < 1e-4, worst, 1e-4, format!("max relative error over {instances} instances"))
}

pub fn exact_feedback(seed: u64, instances: usize) -> CheckResult {
    let mut rng = seeding::stream(seed.wrapping_add(1), streams::ORACLE);
    let mut worst: f64 = 0.0;
    let mut bookkeeping = true;
    for _ in 0..instances {
        match check_exact_feedback(&mut rng, 0.01) {
            Ok(c) => {
                worst = worst.max(c.relative_error);
                bookkeeping &= c.element_passes == c.expected_passes;
            }
            Err(e) => return failed("exact_feedback", 1e-3, e),
        }
    }
    check(
        "exact_feedback",
        worst < 1e-3 && bookkeeping,
        worst,
        1e-3,
        format!("max relative error over {instances} instances; pass counts match: {bookkeeping}"),
    )
}

pub fn taylor(seed: u64, instances: usize) -> CheckResult {
    let mut rng = seeding::stream(seed.wrapping_add(2), streams::ORACLE);
    let mut worst = f64::INFINITY;
    let mut signs = true;
    for _ in 0..instances {
        match check_taylor(&mut rng, 1e-3, 0.1) {
            Ok(c) => {
                worst = worst.min(c.shrink_factor());
                signs &= c.signs_agree;
            }
            Err(e) => return failed("taylor_step_halving", 3.0, e),
        }
    }
    check(
        "taylor_step_halving",
        worst >= 3.0 && signs,
        worst,
        3.0,
        format!("min residual shrink factor over {instances} instances; signs agree: {signs}"),
    )
}

pub fn reinforce(seed: u64) -> CheckResult {
    let mut rng = seeding::stream(seed.wrapping_add(3), streams::ORACLE);
    match reinforce_identity_check(1.0, 0.5, 100_000, &mut rng) {
        Ok(c) => {
            let rel = (c.estimate - c.analytic).abs() / c.analytic;
            check("reinforce_identity", rel < 0.05, rel, 0.05, format!("estimate {} vs {}", c.estimate, c.analytic))
        }
        Err(e) => failed("reinforce_identity", 0.05, e),
    }
}

/// Smallest and largest error ratio of RK4 on `y' = -y` over `[0, 1]` when
/// the step is halved, starting from 5 steps.
pub fn rk4_halving_ratios() -> (f64, f64) {
    let decay = FnField::new(1, |y: &[f64], out: &mut [f64]| out[0] = -y[0]);
    let err = |steps: usize| {
        let times = uniform_grid(0.0, 1.0, steps + 1);
        let traj = integrate(&decay, &[1.0], &times, 1).expect("decay is stable");
        traj.rows().zip(&times).map(|(r, t)| (r[0] - (-t).exp()).abs()).fold(0.0, f64::max)
    };
    let ratios: Vec<f64> = [5, 10, 20, 40].iter().map(|&s| err(s) / err(2 * s)).collect();
    (ratios.iter().cloned().fold(f64::INFINITY, f64::min), ratios.iter().cloned().fold(0.0, f64::max))
}

/// Largest deviation of a conserved quantity along the training trajectory.
pub fn conserved_drift(spec: &SystemSpec) -> f64 {
    let traj = spec.simulate::<f64>(&spec.train_y0).expect("ground truth integrates");
    let q = |r: &[f64]| {
        lk_invariant(&spec.system, r[0], r[1])
            .or_else(|| pendulum_energy(&spec.system, r[0], r[1]))
            .unwrap_or(f64::NAN)
    };
    let q0 = q(traj.row(0));
    traj.rows().map(|r| (q(r) - q0).abs()).fold(0.0, f64::max)
}

pub fn integrator() -> Vec<CheckResult> {
    let (lo, hi) = rk4_halving_ratios();
    let lk = conserved_drift(&SystemSpec::lotka_volterra());
    let pend = conserved_drift(&SystemSpec::pendulum());
    vec![
        check("rk4_global_order", (12.0..=20.0).contains(&lo) && (12.0..=20.0).contains(&hi), lo, 12.0, format!("halving ratios in [{lo}, {hi}]")),
        check("lk_invariant_drift", lk < 1e-5, lk, 1e-5, "max |V - V0| over 10 s".into()),
        check("pendulum_energy_drift", pend < 1e-6, pend, 1e-6, "max |E - E0| over 10 s".into()),
    ]
}

/// Ground-truth metric values on the three benchmark datasets.
pub fn ground_truth_metrics(seed: u64) -> CheckResult {
    let mut worst: f64 = 0.0;
    for spec in [SystemSpec::cubic(), SystemSpec::lotka_volterra(), SystemSpec::pendulum()] {
        let ds: Dataset = match make_dataset(&spec, seed) {
            Ok(ds) => ds,
            Err(e) => return failed("ground_truth_metrics", 1e-6, e),
        };
        let rec = evaluate(&spec.system, &ds, 0);
        worst = rec.rollouts_error.iter().fold(worst.max(rec.local_error), |a, &b| a.max(b));
    }
    check("ground_truth_metrics", worst < 1e-6, worst, 1e-6, "max metric of the true system on its own data".into())
}

/// Teacher parameter sequences of the baseline and of TS-NODE with the
/// feedback switched off, compared bit for bit on a short run.
pub fn reduction_law(seed: u64) -> CheckResult {
    let spec = SystemSpec { n_steps: 200, horizon: 2.0, ..SystemSpec::lotka_volterra() };
    let ds: Dataset = match make_dataset(&spec, seed) {
        Ok(ds) => ds,
        Err(e) => return failed("reduction_law", 0.0, e),
    };
    let cfg = TrainConfig {
        iterations: 40,
        warmup: 10,
        eval_every: 20,
        hidden: vec![16],
        label_batch: 10,
        pseudo_batch: 20,
        seed,
        ..TrainConfig::default()
    };
    let sequence = |variant: Variant, cfg: TrainConfig| -> Result<Vec<Vec<f64>>, String> {
        let mut t = Trainer::new(variant, cfg, &ds).map_err(|e| e.to_string())?;
        let mut seq = vec![t.state().teacher.flatten()];
        while !t.is_finished() {
            t.step().map_err(|e| e.to_string())?;
            seq.push(t.state().teacher.flatten());
        }
        Ok(seq)
    };
    let base = sequence(Variant::Baseline, cfg.clone());
    let off = sequence(Variant::Tsnode, TrainConfig { feedback: FeedbackMode::Off, ..cfg });
    match (base, off) {
        (Ok(a), Ok(b)) => {
            let mismatches = a.iter().zip(&b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
            check(
                "reduction_law",
                mismatches == 0,
                mismatches as f64,
                0.0,
                format!("{} teacher snapshots compared bit for bit", a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => failed("reduction_law", 0.0, e),
    }
}

pub fn run_all(seed: u64) -> VerifyReport {
    let mut checks = vec![
        rollout_gradient(seed, 20),
        exact_feedback(seed, 5),
        taylor(seed, 20),
        reinforce(seed),
    ];
    checks.extend(integrator());
    checks.push(ground_truth_metrics(seed));
    checks.push(reduction_law(seed));
    VerifyReport { seed, passed: checks.iter().all(|c| c.passed), checks }
}
