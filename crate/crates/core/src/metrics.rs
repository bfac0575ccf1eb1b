//! Evaluation metrics: local error over short test windows and rollouts
//! error over horizon fractions of the full test trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::odeint::{integrate_partial, Trajectory, VectorField};
use crate::scalar::Scalar;
use crate::systems::Dataset;

/// Horizon fractions reported by the rollouts error.
pub const FRACTIONS: [f64; 5] = [0.05, 0.10, 0.20, 0.50, 1.00];
/// Stand-in value for a diverged rollout.
pub const DIVERGED_SENTINEL: f64 = 1e12;
pub const CSV_HEADER: &str = "iter,local_error,re05,re10,re20,re50,re100";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub local_error: f64,
    /// One value per entry of [`FRACTIONS`].
    pub rollouts_error: [f64; 5],
    /// Set when any evaluated rollout diverged and a sentinel was used.
    #[serde(default)]
    pub diverged: bool,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let re = &self.rollouts_error;
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.local_error, re[0], re[1], re[2], re[3], re[4]
        )
    }
}

/// Number of leading grid points covered by `fraction` of an `n`-point
/// trajectory, at least one.
pub fn prefix_len(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n)
}

/// Metric value plus the number of rollouts replaced by the sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub diverged: usize,
}

/// Sum over the short test windows of the per-element MSE between the window
/// and the model's rollout from the window's first state.
pub fn local_error<S, F>(model: &F, dataset: &Dataset<S>) -> Scored
where
    S: Scalar,
    F: VectorField<S> + Sync,
{
    let substeps = dataset.spec.substeps;
    let parts: Vec<Option<f64>> = dataset
        .test_short
        .par_iter()
        .map(|w| {
            let truth = &w.traj;
            match integrate_partial(model, truth.initial(), truth.times(), substeps) {
                Ok((pred, None)) => Some(pred.mse(truth).ok()?.to_f64_lossy()),
                _ => None,
            }
        })
        .collect();
    reduce(parts, |sum, _| sum)
}

fn reduce(parts: Vec<Option<f64>>, finish: impl Fn(f64, usize) -> f64) -> Scored {
    let mut sum = 0.0;
    let mut diverged = 0;
    for p in &parts {
        match p {
            Some(v) if v.is_finite() => sum += v,
            _ => {
                sum += DIVERGED_SENTINEL;
                diverged += 1;
            }
        }
    }
    Scored { value: finish(sum, parts.len()), diverged }
}

fn prefix_mse<S: Scalar>(pred: &Trajectory<S>, truth: &Trajectory<S>, rows: usize) -> Option<f64> {
    if pred.len() < rows {
        return None;
    }
    let sq = pred.sq_error_prefix(truth, rows).to_f64_lossy();
    Some(sq / (rows * truth.dim()) as f64)
}

/// Rollouts error at every fraction in [`FRACTIONS`], sharing one rollout per
/// test trajectory. A trajectory that diverges before the end of a prefix
/// contributes the sentinel at that fraction.
pub fn rollouts_errors<S, F>(model: &F, dataset: &Dataset<S>) -> [Scored; 5]
where
    S: Scalar,
    F: VectorField<S> + Sync,
{
    let substeps = dataset.spec.substeps;
    let per_traj: Vec<[Option<f64>; 5]> = dataset
        .test_full
        .par_iter()
        .map(|truth| {
            let pred = integrate_partial(model, truth.initial(), truth.times(), substeps)
                .ok()
                .map(|(p, _)| p);
            FRACTIONS.map(|f| {
                let rows = prefix_len(f, truth.len());
                pred.as_ref().and_then(|p| prefix_mse(p, truth, rows))
            })
        })
        .collect();
    std::array::from_fn(|k| {
        let parts = per_traj.iter().map(|v| v[k]).collect();
        reduce(parts, |sum, n| sum / n as f64)
    })
}

/// Mean over the test trajectories of the MSE over the first
/// `floor(fraction * n)` points.
pub fn rollouts_error<S, F>(model: &F, dataset: &Dataset<S>, fraction: f64) -> Scored
where
    S: Scalar,
    F: VectorField<S> + Sync,
{
    let substeps = dataset.spec.substeps;
    let parts: Vec<Option<f64>> = dataset
        .test_full
        .par_iter()
        .map(|truth| {
            let rows = prefix_len(fraction, truth.len());
            let (pred, _) = integrate_partial(model, truth.initial(), &truth.times()[..rows], substeps).ok()?;
            prefix_mse(&pred, truth, rows)
        })
        .collect();
    reduce(parts, |sum, n| sum / n as f64)
}

pub fn evaluate<S, F>(model: &F, dataset: &Dataset<S>, iteration: usize) -> MetricsRecord
where
    S: Scalar,
    F: VectorField<S> + Sync,
{
    let local = local_error(model, dataset);
    let re = rollouts_errors(model, dataset);
    MetricsRecord {
        iteration,
        local_error: local.value,
        rollouts_error: re.map(|s| s.value),
        diverged: local.diverged > 0 || re.iter().any(|s| s.diverged > 0),
    }
}

/// Elementwise mean of the last `k` records (fewer if the history is short).
pub fn last_k_average(history: &[MetricsRecord], k: usize) -> Option<MetricsRecord> {
    let tail = &history[history.len().saturating_sub(k)..];
    let last = tail.last()?;
    let n = tail.len() as f64;
    let mut re = [0.0; 5];
    for r in tail {
        for (acc, v) in re.iter_mut().zip(r.rollouts_error) {
            *acc += v;
        }
    }
    Some(MetricsRecord {
        iteration: last.iteration,
        local_error: tail.iter().map(|r| r.local_error).sum::<f64>() / n,
        rollouts_error: re.map(|v| v / n),
        diverged: tail.iter().any(|r| r.diverged),
    })
}

pub fn history_to_csv(history: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn history_from_csv(text: &str) -> Result<Vec<MetricsRecord>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err("unexpected metrics header".into());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(format!("bad metrics row `{l}`"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{e} in `{l}`"));
            let re = [num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?];
            Ok(MetricsRecord {
                iteration: f[0].parse().map_err(|e| format!("{e} in `{l}`"))?,
                local_error: num(f[1])?,
                diverged: re.iter().any(|&v| v >= DIVERGED_SENTINEL),
                rollouts_error: re,
            })
        })
        .collect()
}

/// Natural log of each value followed by a centered moving average of
/// `window` points, truncated at the ends.
pub fn smoothed_log_curve(series: &[(usize, f64)], window: usize) -> Vec<(usize, f64)> {
    let window = window.max(1);
    let logs: Vec<f64> = series.iter().map(|&(_, v)| v.ln()).collect();
    let left = (window - 1) / 2;
    let right = window - 1 - left;
    (0..logs.len())
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(logs.len() - 1);
            let avg = logs[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            (series[i].0, avg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Activation, Mlp};
    use crate::systems::{make_dataset, SystemSpec};

    #[test]
    fn prefix_lengths() {
        let lens: Vec<usize> = FRACTIONS.iter().map(|&f| prefix_len(f, 1000)).collect();
        assert_eq!(lens, vec![50, 100, 200, 500, 1000]);
        assert_eq!(prefix_len(0.0001, 1000), 1);
    }

    #[test]
    fn ground_truth_scores_zero() {
        for spec in [SystemSpec::cubic(), SystemSpec::lotka_volterra(), SystemSpec::pendulum()] {
            let ds = make_dataset::<f64>(&spec, 0).unwrap();
            let rec = evaluate(&spec.system, &ds, 0);
            assert!(rec.local_error < 1e-6, "{}", rec.local_error);
            assert!(rec.rollouts_error.iter().all(|&v| v < 1e-6));
            assert!(!rec.diverged);
        }
    }

    #[test]
    fn shared_and_single_fraction_paths_agree() {
        let spec = SystemSpec::pendulum();
        let ds = make_dataset::<f64>(&spec, 1).unwrap();
        let mut rng = crate::seeding::stream(0, 0);
        let net = Mlp::<f64>::init_uniform(&[2, 8, 2], Activation::Tanh, &mut rng).unwrap();
        let all = rollouts_errors(&net, &ds);
        for (k, &f) in FRACTIONS.iter().enumerate() {
            let one = rollouts_error(&net, &ds, f);
            assert!((one.value - all[k].value).abs() <= 1e-12 * one.value.max(1.0));
        }
        assert!(rollouts_error(&net, &ds, 1e-4).value == 0.0);
    }

    #[test]
    fn metrics_are_deterministic() {
        let spec = SystemSpec::lotka_volterra();
        let ds = make_dataset::<f64>(&spec, 2).unwrap();
        let mut rng = crate::seeding::stream(3, 0);
        let net = Mlp::<f64>::init_uniform(&[2, 8, 2], Activation::Tanh, &mut rng).unwrap();
        let a = evaluate(&net, &ds, 5);
        let b = evaluate(&net, &ds, 5);
        assert_eq!(a.csv_row(), b.csv_row());
    }

    #[test]
    fn summed_squared_error_grows_with_prefix() {
        let spec = SystemSpec::lotka_volterra();
        let truth = spec.simulate(&[1.4f64, 1.4]).unwrap();
        let pred = truth.map_states(|v| v * 1.01 + 0.002).unwrap();
        let mut last = 0.0;
        for rows in 1..=truth.len() {
            let s = pred.sq_error_prefix(&truth, rows);
            assert!(s >= last);
            last = s;
        }
    }

    #[test]
    fn local_error_is_linear_in_squared_residuals() {
        // an offset c on every element gives MSE c^2 per window; scaling the
        // residual by sqrt(2) doubles the metric
        let spec = SystemSpec::pendulum();
        let ds = make_dataset::<f64>(&spec, 0).unwrap();
        let shifted = |c: f64, ds: &Dataset<f64>| {
            let mut d = ds.clone();
            for w in &mut d.test_short {
                let init = w.traj.initial().to_vec();
                let mut states = w.traj.states().to_vec();
                for (i, v) in states.iter_mut().enumerate().skip(2) {
                    *v += if i % 2 == 0 { c } else { -c };
                }
                states[..2].copy_from_slice(&init);
                w.traj = Trajectory::from_flat(w.traj.times().to_vec(), 2, states).unwrap();
            }
            local_error(&spec.system, &d).value
        };
        let one = shifted(0.01, &ds);
        let two = shifted(0.01 * 2f64.sqrt(), &ds);
        assert!((two / one - 2.0).abs() < 1e-6, "{}", two / one);
    }

    #[test]
    fn diverging_model_gets_sentinel() {
        let spec = SystemSpec::cubic();
        let ds = make_dataset::<f64>(&spec, 0).unwrap();
        // x' = 2 x leaves the 1e6 box around t = 6.3 s
        let net = Mlp::linear(2, vec![2.0, 0.0, 0.0, 2.0], vec![0.0, 0.0]).unwrap();
        let rec = evaluate(&net, &ds, 0);
        assert!(rec.diverged);
        assert!(rec.rollouts_error[4] >= DIVERGED_SENTINEL);
        assert!(rec.rollouts_error[0] < DIVERGED_SENTINEL);
    }

    #[test]
    fn smoothing() {
        let flat: Vec<(usize, f64)> = (0..6).map(|i| (i * 100, 7.0)).collect();
        assert!(smoothed_log_curve(&flat, 3).iter().all(|&(_, v)| (v - 7f64.ln()).abs() < 1e-15));
        let s: Vec<(usize, f64)> = vec![(1, 1.0), (2, 10.0), (3, 100.0), (4, 1000.0), (5, 1.0)];
        let id = smoothed_log_curve(&s, 1);
        for (a, b) in id.iter().zip(&s) {
            assert_eq!(a.1, b.1.ln());
        }
        // window 3 by hand, with L = ln 10:
        // [L/2, L, 2L, (2L + 3L + 0)/3 = 5L/3, 3L/2]
        let l = 10f64.ln();
        let expect = [l / 2.0, l, 2.0 * l, 5.0 * l / 3.0, 1.5 * l];
        for ((_, v), e) in smoothed_log_curve(&s, 3).iter().zip(expect) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn last_five_and_csv() {
        let hist: Vec<MetricsRecord> = (1..=7)
            .map(|i| MetricsRecord {
                iteration: i * 100,
                local_error: i as f64,
                rollouts_error: [i as f64; 5],
                diverged: false,
            })
            .collect();
        let avg = last_k_average(&hist, 5).unwrap();
        assert_eq!(avg.local_error, 5.0);
        assert_eq!(avg.iteration, 700);
        let csv = history_to_csv(&hist);
        assert!(csv.starts_with("iter,local_error,re05,re10,re20,re50,re100\n"));
        assert_eq!(history_from_csv(&csv).unwrap(), hist);
        assert!(last_k_average(&[], 5).is_none());
    }
}
