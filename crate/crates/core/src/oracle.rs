//! Independent checks for the training gradients: central finite
//! differences, the exact (per-element) feedback gradient of the
//! deterministic teacher-student pipeline, the first-order Taylor model of
//! the student's labeled loss, and the score-function identity.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::diffnet::{Activation, GradientVector, Mlp, NetError};
use crate::odeint::{integrate, rollout_loss_grad, uniform_grid, OdeError, RolloutTape, Trajectory};
use crate::scalar::{dot, norm, Scalar};
use crate::systems::{batch_short_segments, Segment, System};
use crate::tsnode::{labeled_loss, labeled_loss_grad, student_step, TrainError};

/// Largest network the per-element oracle accepts.
pub const EXACT_MAX_PARAMS: usize = 60;
/// Largest number of solver steps per rollout the per-element oracle accepts.
pub const EXACT_MAX_STEPS: usize = 5;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("finite-difference step must be positive and finite")]
    BadStep,
    #[error("objective is not finite at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("instance too large for the exact oracle: {0}")]
    TooLarge(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h`, one coordinate
/// at a time.
pub fn finite_diff_grad<S, F>(f: F, params: &[S], step: S) -> Result<GradientVector<S>, OracleError>
where
    S: Scalar,
    F: Fn(&[S]) -> S + Sync,
{
    if !(step > S::zero()) || !step.is_finite() {
        return Err(OracleError::BadStep);
    }
    let two = S::lit(2.0);
    let grad = (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut p = params.to_vec();
            p[i] = params[i] + step;
            let up = f(&p);
            p[i] = params[i] - step;
            let down = f(&p);
            let g = (up - down) / (two * step);
            if g.is_finite() {
                Ok(g)
            } else {
                Err(OracleError::NonFinite { coordinate: i })
            }
        })
        .collect::<Result<Vec<S>, _>>()?;
    Ok(GradientVector::new(grad, params.len())?)
}

/// `|a - b| / |b|`, with the denominator floored at `floor`.
pub fn relative_error<S: Scalar>(a: &[S], b: &[S], floor: f64) -> f64 {
    let diff: Vec<S> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    norm(&diff).to_f64_lossy() / norm(b).to_f64_lossy().max(floor)
}

/// Labeled loss of the student after one gradient step on the teacher's
/// deterministic rollouts from `ics`: the map `theta_T -> L(theta_S')`.
pub fn feedback_objective<S: Scalar>(
    teacher: &Mlp<S>,
    student: &Mlp<S>,
    ics: &[Vec<S>],
    times: &[S],
    labeled: &[Segment<S>],
    eta_s: S,
    substeps: usize,
) -> Result<S, OracleError> {
    let pseudo = ics
        .iter()
        .map(|y0| integrate(teacher, y0, times, substeps))
        .collect::<Result<Vec<_>, _>>()?;
    let step = student_step(student, &pseudo, eta_s, substeps)?;
    Ok(labeled_loss(&step.params, labeled, substeps)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactFeedback<S: Scalar> {
    pub grad: GradientVector<S>,
    /// Reverse passes spent on per-element rollout Jacobian rows.
    pub element_passes: usize,
}

/// Gradient of [`feedback_objective`] in the teacher parameters, assembled
/// element by element from rollout Jacobian rows:
///
/// `eta_s * (2 / N) * sum_ij (a . dyS_ij/dthetaS) * dyT_ij/dthetaT`
///
/// where `a` is the labeled-loss gradient at the updated student and `N`
/// the number of pseudo rollout elements. Costs `2 * batch * n * d`
/// reverse passes, so only tiny instances are accepted.
pub fn exact_feedback_grad<S: Scalar>(
    teacher: &Mlp<S>,
    student: &Mlp<S>,
    ics: &[Vec<S>],
    times: &[S],
    labeled: &[Segment<S>],
    eta_s: S,
) -> Result<ExactFeedback<S>, OracleError> {
    let steps = times.len().saturating_sub(1);
    for (who, net) in [("teacher", teacher), ("student", student)] {
        if net.param_count() > EXACT_MAX_PARAMS {
            return Err(OracleError::TooLarge(format!(
                "{who} has {} parameters (limit {EXACT_MAX_PARAMS})",
                net.param_count()
            )));
        }
    }
    if steps > EXACT_MAX_STEPS {
        return Err(OracleError::TooLarge(format!("{steps} solver steps (limit {EXACT_MAX_STEPS})")));
    }
    if teacher.state_dim() != student.state_dim() || ics.is_empty() {
        return Err(OracleError::Contract("need matching state dimensions and at least one IC".into()));
    }
    let d = teacher.state_dim();
    let n = times.len();
    let teacher_tapes = ics
        .iter()
        .map(|y0| RolloutTape::record(teacher, y0, times, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let pseudo: Vec<Trajectory<S>> = teacher_tapes.iter().map(|t| t.trajectory().clone()).collect();
    let student_tapes = ics
        .iter()
        .map(|y0| RolloutTape::record(student, y0, times, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let (_, g_s) = rollout_loss_grad(student, ics, times, &pseudo, 1)?;
    let updated = student.offset(-eta_s, g_s.as_slice())?;
    let (_, a) = labeled_loss_grad(&updated, labeled, 1)?;

    let count = S::from_usize_lossy(ics.len() * n * d);
    let coef = eta_s * S::lit(2.0) / count;
    let mut grad = vec![S::zero(); teacher.param_count()];
    let mut passes = 0;
    let mut onehot = vec![S::zero(); n * d];
    for (tt, ts) in teacher_tapes.iter().zip(&student_tapes) {
        for e in 0..n * d {
            onehot[e] = S::one();
            let mut js = vec![S::zero(); student.param_count()];
            ts.vjp(&onehot, &mut js);
            let mut jt = vec![S::zero(); teacher.param_count()];
            tt.vjp(&onehot, &mut jt);
            passes += 2;
            onehot[e] = S::zero();
            let w = coef * dot(a.as_slice(), &js);
            for (g, &v) in grad.iter_mut().zip(&jt) {
                *g = *g + w * v;
            }
        }
    }
    Ok(ExactFeedback {
        grad: GradientVector::new(grad, teacher.param_count())?,
        element_passes: passes,
    })
}

/// Change of the student's labeled loss over one step on `pseudo`, and its
/// first-order prediction `grad L(theta_S') . (-eta_s g_S)`.
pub fn taylor_residual<S: Scalar>(
    student: &Mlp<S>,
    pseudo: &[Trajectory<S>],
    labeled: &[Segment<S>],
    eta_s: S,
) -> Result<(S, S), OracleError> {
    let step = student_step(student, pseudo, eta_s, 1)?;
    let (before, _) = labeled_loss_grad(student, labeled, 1)?;
    let (after, a) = labeled_loss_grad(&step.params, labeled, 1)?;
    let predicted = -eta_s * dot(a.as_slice(), step.grad.as_slice());
    Ok((after - before, predicted))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReinforceCheck {
    pub estimate: f64,
    pub analytic: f64,
    pub std_error: f64,
}

/// Score-function estimate of `d/dmu E[x^2]` for `x ~ N(mu, sigma^2)`,
/// `mean(x^2 (x - mu) / sigma^2)`, against the exact `2 mu`.
pub fn reinforce_identity_check<R: Rng + ?Sized>(
    mu: f64,
    sigma: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<ReinforceCheck, OracleError> {
    let dist = Normal::new(mu, sigma).map_err(|e| OracleError::Contract(e.to_string()))?;
    if n_samples < 2 {
        return Err(OracleError::Contract("need at least two samples".into()));
    }
    let vals: Vec<f64> = (0..n_samples)
        .map(|_| {
            let x = dist.sample(rng);
            x * x * (x - mu) / (sigma * sigma)
        })
        .collect();
    let n = n_samples as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(ReinforceCheck { estimate: mean, analytic: 2.0 * mu, std_error: (var / n).sqrt() })
}

/// A small teacher-student problem on Lotka-Volterra data.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub teacher: Mlp<f64>,
    pub student: Mlp<f64>,
    pub ics: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub labeled: Vec<Segment<f64>>,
}

impl TinyInstance {
    /// Random instance with at most `EXACT_MAX_PARAMS` parameters per
    /// network and at most `EXACT_MAX_STEPS` steps per rollout.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Result<Self, OracleError> {
        let hidden = rng.random_range(3..=8usize);
        let sizes = [2, hidden, 2];
        let teacher = Mlp::init_uniform(&sizes, Activation::Tanh, rng)?;
        let student = Mlp::init_uniform(&sizes, Activation::Tanh, rng)?;
        let n = rng.random_range(3..=EXACT_MAX_STEPS + 1);
        let times = uniform_grid(0.0, 0.1 * (n - 1) as f64, n);
        let truth = integrate(&System::lotka_volterra(), &[1.4, 1.4], &uniform_grid(0.0, 3.0, 31), 1)?;
        let labeled = batch_short_segments(&[truth], n, 4, rng)?;
        let batch = rng.random_range(2..=3usize);
        let ics = (0..batch)
            .map(|_| {
                (0..2)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        1.4 + 0.1 * z
                    })
                    .collect()
            })
            .collect();
        Ok(Self { teacher, student, ics, times, labeled })
    }
}

/// Reverse-mode versus central-difference gradient of the rollout MSE on a
/// random net of at most 60 parameters and at most 5 steps. Returns the
/// relative error.
pub fn check_rollout_gradient<R: Rng + ?Sized>(rng: &mut R) -> Result<f64, OracleError> {
    let d = rng.random_range(1..=2usize);
    let max_hidden = (EXACT_MAX_PARAMS - d) / (2 * d + 1);
    let hidden = rng.random_range(2..=max_hidden.min(10));
    let net = Mlp::<f64>::init_uniform(&[d, hidden, d], Activation::Tanh, rng)?;
    let n = rng.random_range(2..=EXACT_MAX_STEPS + 1);
    let times = uniform_grid(0.0, 0.1 * (n - 1) as f64, n);
    let batch = rng.random_range(1..=3usize);
    let ics: Vec<Vec<f64>> = (0..batch).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let targets = ics
        .iter()
        .map(|y0| {
            let mut s: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            s[..d].copy_from_slice(y0);
            Trajectory::from_flat(times.clone(), d, s)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (_, g) = rollout_loss_grad(&net, &ics, &times, &targets, 1)?;
    let f = |p: &[f64]| {
        let m = net.unflatten(p).expect("same shape");
        crate::odeint::rollout_loss(&m, &ics, &times, &targets, 1).unwrap_or(f64::NAN)
    };
    let fd = finite_diff_grad(f, &net.flatten(), 1e-6)?;
    Ok(relative_error(g.as_slice(), fd.as_slice(), 1e-12))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactFeedbackCheck {
    pub relative_error: f64,
    pub element_passes: usize,
    pub expected_passes: usize,
}

/// Exact feedback gradient versus finite differences of the composed
/// two-stage map on a random tiny instance.
pub fn check_exact_feedback<R: Rng + ?Sized>(rng: &mut R, eta_s: f64) -> Result<ExactFeedbackCheck, OracleError> {
    let inst = TinyInstance::random(rng)?;
    let exact = exact_feedback_grad(&inst.teacher, &inst.student, &inst.ics, &inst.times, &inst.labeled, eta_s)?;
    let f = |p: &[f64]| {
        let t = inst.teacher.unflatten(p).expect("same shape");
        feedback_objective(&t, &inst.student, &inst.ics, &inst.times, &inst.labeled, eta_s, 1).unwrap_or(f64::NAN)
    };
    let fd = finite_diff_grad(f, &inst.teacher.flatten(), 1e-5)?;
    Ok(ExactFeedbackCheck {
        relative_error: relative_error(exact.grad.as_slice(), fd.as_slice(), 1e-12),
        element_passes: exact.element_passes,
        expected_passes: 2 * inst.ics.len() * inst.times.len() * inst.teacher.state_dim(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorCheck {
    /// `|measured - predicted|` at the base step.
    pub residual: f64,
    /// The same at half the step.
    pub residual_half: f64,
    pub signs_agree: bool,
}

impl TaylorCheck {
    pub fn shrink_factor(&self) -> f64 {
        self.residual / self.residual_half
    }
}

/// Step-halving study of [`taylor_residual`] on a random tiny instance whose
/// pseudo rollouts come from the noisy teacher.
pub fn check_taylor<R: Rng + ?Sized>(rng: &mut R, eta_s: f64, sigma: f64) -> Result<TaylorCheck, OracleError> {
    let inst = TinyInstance::random(rng)?;
    let pseudo = inst
        .ics
        .iter()
        .map(|y0| {
            let clean = integrate(&inst.teacher, y0, &inst.times, 1)?;
            Ok(clean.map_states(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + sigma * z
            })?)
        })
        .collect::<Result<Vec<_>, OracleError>>()?;
    let (m1, p1) = taylor_residual(&inst.student, &pseudo, &inst.labeled, eta_s)?;
    let (m2, p2) = taylor_residual(&inst.student, &pseudo, &inst.labeled, eta_s / 2.0)?;
    Ok(TaylorCheck {
        residual: (m1 - p1).abs(),
        residual_half: (m2 - p2).abs(),
        signs_agree: m1.signum() == p1.signum() && m2.signum() == p2.signum(),
    })
}
