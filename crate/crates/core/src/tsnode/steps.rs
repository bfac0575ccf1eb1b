use rand::Rng;
use rayon::prelude::*;

use crate::diffnet::{GradientVector, Mlp};
use crate::odeint::{batch_loss_grad, rollout, rollout_loss, rollout_loss_grad, OdeError, Trajectory};
use crate::scalar::{all_finite, axpy, Scalar};
use crate::systems::{normal, Segment};

use super::TrainError;

/// Teacher parameters plus the per-element std of its sampled rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyTeacher<S: Scalar> {
    pub params: Mlp<S>,
    pub sigma: S,
}

/// Clean teacher rollouts and their noisy samples, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch<S: Scalar> {
    pub ics: Vec<Vec<S>>,
    pub clean: Vec<Trajectory<S>>,
    pub noisy: Vec<Trajectory<S>>,
}

impl<S: Scalar> PseudoBatch<S> {
    pub fn len(&self) -> usize {
        self.ics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ics.is_empty()
    }
}

/// Rolls the teacher out from each IC and adds i.i.d. `N(0, sigma^2)` noise
/// to every element. With `noisy_initial_row` false the first row is left
/// clean and consumes no draws.
pub fn sample_pseudo_rollouts<S: Scalar, R: Rng + ?Sized>(
    teacher: &NoisyTeacher<S>,
    ics: &[Vec<S>],
    times: &[S],
    substeps: usize,
    noisy_initial_row: bool,
    rng: &mut R,
) -> Result<PseudoBatch<S>, TrainError> {
    if !(teacher.sigma >= S::zero()) {
        return Err(TrainError::Contract("teacher sigma must be non-negative".into()));
    }
    let clean = ics
        .par_iter()
        .map(|y0| rollout(&teacher.params, y0, times, substeps))
        .collect::<Result<Vec<_>, OdeError>>()?;
    let sigma = teacher.sigma;
    let mut noisy = Vec::with_capacity(clean.len());
    for c in &clean {
        let skip = if noisy_initial_row { 0 } else { c.dim() };
        let mut states = c.states().to_vec();
        for v in &mut states[skip..] {
            *v = *v + sigma * normal::<S, _>(rng);
        }
        noisy.push(Trajectory::from_flat(times.to_vec(), c.dim(), states)?);
    }
    Ok(PseudoBatch { ics: ics.to_vec(), clean, noisy })
}

fn check_sigma<S: Scalar>(sigma: S) -> Result<(), TrainError> {
    if sigma > S::zero() && sigma.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Contract(format!("Gaussian NLL needs sigma > 0, got {sigma}")))
    }
}

/// Summed Gaussian negative log-likelihood of `noisy` around `clean`.
pub fn gaussian_nll<S: Scalar>(noisy: &[Trajectory<S>], clean: &[Trajectory<S>], sigma: S) -> Result<S, TrainError> {
    check_sigma(sigma)?;
    if noisy.len() != clean.len() {
        return Err(TrainError::Contract("noisy and clean batches differ in size".into()));
    }
    let two = S::lit(2.0);
    let var = sigma * sigma;
    let log_norm = S::lit(0.5) * (two * S::PI() * var).ln();
    let mut total = S::zero();
    for (n, c) in noisy.iter().zip(clean) {
        if n.len() != c.len() || n.dim() != c.dim() {
            return Err(TrainError::Contract("noisy and clean shapes differ".into()));
        }
        for (&a, &b) in n.states().iter().zip(c.states()) {
            let r = a - b;
            total = total + r * r / (two * var) + log_norm;
        }
    }
    Ok(total)
}

/// NLL of fixed `noisy` samples under the teacher rolled out from `ics`,
/// with its gradient in the teacher parameters.
pub fn gaussian_nll_grad<S: Scalar>(
    teacher: &Mlp<S>,
    ics: &[Vec<S>],
    noisy: &[Trajectory<S>],
    sigma: S,
    substeps: usize,
) -> Result<(S, GradientVector<S>), TrainError> {
    check_sigma(sigma)?;
    if ics.len() != noisy.len() {
        return Err(TrainError::Contract("one IC per noisy rollout required".into()));
    }
    let Some(first) = noisy.first() else {
        return Ok((S::zero(), GradientVector::zeros(teacher.param_count())));
    };
    let times = first.times().to_vec();
    if noisy.iter().any(|t| t.times() != times.as_slice() || t.dim() != teacher.state_dim()) {
        return Err(TrainError::Contract("noisy rollouts must share one grid".into()));
    }
    let two = S::lit(2.0);
    let var = sigma * sigma;
    let log_norm = S::lit(0.5) * (two * S::PI() * var).ln();
    let out = batch_loss_grad(teacher, ics, &times, substeps, |b, clean| {
        let mut loss = S::zero();
        let cot = noisy[b]
            .states()
            .iter()
            .zip(clean.states())
            .map(|(&y, &c)| {
                let r = y - c;
                loss = loss + r * r / (two * var) + log_norm;
                -r / var
            })
            .collect();
        (loss, cot)
    })?;
    Ok(out)
}

/// `L_F = h * nll`; `h` is a constant coefficient.
pub fn feedback_loss<S: Scalar>(h: S, nll: S) -> S {
    h * nll
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentStep<S: Scalar> {
    pub params: Mlp<S>,
    /// Student MSE on the pseudo batch before the step.
    pub loss: S,
    pub grad: GradientVector<S>,
}

/// One plain gradient-descent step of the student on the noisy pseudo
/// rollouts, each integrated from its own (noisy) first row.
pub fn student_step<S: Scalar>(
    student: &Mlp<S>,
    pseudo: &[Trajectory<S>],
    eta_s: S,
    substeps: usize,
) -> Result<StudentStep<S>, TrainError> {
    if !(eta_s >= S::zero()) {
        return Err(TrainError::Contract("eta_s must be non-negative".into()));
    }
    let Some(first) = pseudo.first() else {
        return Ok(StudentStep {
            params: student.clone(),
            loss: S::zero(),
            grad: GradientVector::zeros(student.param_count()),
        });
    };
    let ics: Vec<Vec<S>> = pseudo.iter().map(|t| t.initial().to_vec()).collect();
    let (loss, grad) = rollout_loss_grad(student, &ics, first.times(), pseudo, substeps)?;
    let params = student.offset(-eta_s, grad.as_slice())?;
    Ok(StudentStep { params, loss, grad })
}

fn split_segments<S: Scalar>(segments: &[Segment<S>]) -> (Vec<Vec<S>>, Vec<Trajectory<S>>) {
    let ics = segments.iter().map(|s| s.y0.clone()).collect();
    let targets = segments.iter().map(|s| s.target.clone()).collect();
    (ics, targets)
}

/// MSE of `net` on a labeled segment batch.
pub fn labeled_loss<S: Scalar>(net: &Mlp<S>, segments: &[Segment<S>], substeps: usize) -> Result<S, TrainError> {
    let Some(first) = segments.first() else {
        return Ok(S::zero());
    };
    let (ics, targets) = split_segments(segments);
    Ok(rollout_loss(net, &ics, first.target.times(), &targets, substeps)?)
}

pub fn labeled_loss_grad<S: Scalar>(
    net: &Mlp<S>,
    segments: &[Segment<S>],
    substeps: usize,
) -> Result<(S, GradientVector<S>), TrainError> {
    let Some(first) = segments.first() else {
        return Ok((S::zero(), GradientVector::zeros(net.param_count())));
    };
    let (ics, targets) = split_segments(segments);
    Ok(rollout_loss_grad(net, &ics, first.target.times(), &targets, substeps)?)
}

/// `h = L(old) - L(new)` on the labeled batch; positive when the update helped.
pub fn student_improvement<S: Scalar>(
    old: &Mlp<S>,
    new: &Mlp<S>,
    labeled: &[Segment<S>],
    substeps: usize,
) -> Result<S, TrainError> {
    Ok(labeled_loss(old, labeled, substeps)? - labeled_loss(new, labeled, substeps)?)
}

/// Adam step on `labeled_grad + h * nll_grad`. Returns `false`, leaving
/// teacher and optimizer untouched, when the combined gradient is not finite.
pub fn teacher_step<S: Scalar>(
    teacher: &mut Mlp<S>,
    adam: &mut super::AdamState<S>,
    labeled_grad: &GradientVector<S>,
    feedback: Option<(S, &GradientVector<S>)>,
    eta_t: S,
) -> Result<bool, TrainError> {
    let mut grad = labeled_grad.as_slice().to_vec();
    if let Some((h, g)) = feedback {
        if g.len() != grad.len() {
            return Err(TrainError::Contract("feedback gradient length".into()));
        }
        axpy(h, g.as_slice(), &mut grad);
    }
    if !all_finite(&grad) {
        return Ok(false);
    }
    let mut flat = teacher.flatten();
    let mut next = adam.clone();
    next.update(&mut flat, &grad, eta_t);
    if !all_finite(&flat) {
        return Ok(false);
    }
    teacher.assign_flat(&flat)?;
    *adam = next;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Activation;
    use crate::odeint::uniform_grid;
    use crate::systems::{batch_short_segments, SystemSpec};
    use crate::tsnode::AdamState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> Mlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::init_uniform(&[2, 5, 2], Activation::Tanh, &mut rng).unwrap()
    }

    fn ics(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn zero_sigma_is_clean() {
        let teacher = NoisyTeacher { params: tiny(1), sigma: 0.0 };
        let times = uniform_grid(0.0, 0.09, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_pseudo_rollouts(&teacher, &ics(7, 2), &times, 1, true, &mut rng).unwrap();
        assert_eq!(b.noisy, b.clean);
    }

    #[test]
    fn pseudo_noise_statistics() {
        let sigma = 0.1;
        let teacher = NoisyTeacher { params: tiny(1), sigma };
        let times = uniform_grid(0.0, 0.09, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = sample_pseudo_rollouts(&teacher, &ics(5000, 5), &times, 1, true, &mut rng).unwrap();
        let diffs: Vec<f64> = b
            .noisy
            .iter()
            .zip(&b.clean)
            .flat_map(|(n, c)| n.states().iter().zip(c.states()).map(|(a, b)| a - b).collect::<Vec<_>>())
            .collect();
        assert_eq!(diffs.len(), 100_000);
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((sd / sigma - 1.0).abs() < 0.02, "std {sd}");
        assert!(m.abs() < 3.0 * sigma / (1e5f64).sqrt(), "mean {m}");
    }

    #[test]
    fn clean_initial_row_option() {
        let teacher = NoisyTeacher { params: tiny(1), sigma: 0.5 };
        let times = uniform_grid(0.0, 0.2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = sample_pseudo_rollouts(&teacher, &ics(4, 7), &times, 1, false, &mut rng).unwrap();
        for (n, y0) in b.noisy.iter().zip(&b.ics) {
            assert_eq!(n.initial(), y0.as_slice());
            assert_ne!(n.row(1), b.clean[0].row(1));
        }
    }

    #[test]
    fn nll_values_and_scaling() {
        let times = uniform_grid(0.0, 0.3, 4);
        let clean = Trajectory::from_flat(times.clone(), 2, vec![0.0; 8]).unwrap();
        let sigma: f64 = 0.2;
        let v = gaussian_nll(&[clean.clone()], &[clean.clone()], sigma).unwrap();
        let expect = 8.0 * 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        assert!((v - expect).abs() < 1e-12);

        let noisy = clean.map_states(|_| 0.3).unwrap();
        let quad = |s: f64| {
            gaussian_nll(&[noisy.clone()], &[clean.clone()], s).unwrap()
                - gaussian_nll(&[clean.clone()], &[clean.clone()], s).unwrap()
        };
        assert!((quad(0.2) / quad(0.4) - 4.0).abs() < 1e-12);
        assert!(matches!(gaussian_nll(&[clean.clone()], &[clean], 0.0), Err(TrainError::Contract(_))));
    }

    #[test]
    fn nll_grad_matches_finite_differences() {
        let net = tiny(8);
        let sigma = 0.3;
        let times = uniform_grid(0.0, 0.4, 5);
        let starts = ics(3, 9);
        let teacher = NoisyTeacher { params: net.clone(), sigma };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch = sample_pseudo_rollouts(&teacher, &starts, &times, 1, true, &mut rng).unwrap();
        let (nll, g) = gaussian_nll_grad(&net, &starts, &batch.noisy, sigma, 1).unwrap();
        assert!((nll - gaussian_nll(&batch.noisy, &batch.clean, sigma).unwrap()).abs() < 1e-10);
        let f = |p: &[f64]| {
            let m = net.unflatten(p).unwrap();
            let clean: Vec<_> = starts.iter().map(|y| rollout(&m, y, &times, 1).unwrap()).collect();
            gaussian_nll(&batch.noisy, &clean, sigma).unwrap()
        };
        let base = net.flatten();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += 1e-6;
            let up = f(&p);
            p[i] -= 2e-6;
            let fd = (up - f(&p)) / 2e-6;
            let a = g.as_slice()[i];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(1e-3), "coord {i}: {fd} vs {a}");
        }
    }

    #[test]
    fn feedback_sign_law() {
        let net = tiny(11);
        let sigma = 0.1;
        let times = uniform_grid(0.0, 0.9, 10);
        let starts = ics(8, 12);
        let teacher = NoisyTeacher { params: net.clone(), sigma };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let batch = sample_pseudo_rollouts(&teacher, &starts, &times, 1, true, &mut rng).unwrap();
        let (nll, g) = gaussian_nll_grad(&net, &starts, &batch.noisy, sigma, 1).unwrap();
        assert_eq!(feedback_loss(0.0, nll), 0.0);
        let after = |h: f64| {
            let m = net.offset(-1e-5 * h, g.as_slice()).unwrap();
            gaussian_nll_grad(&m, &starts, &batch.noisy, sigma, 1).unwrap().0
        };
        assert!(after(1.0) < nll);
        assert!(after(-1.0) > nll);
    }

    #[test]
    fn student_step_properties() {
        let student = tiny(14);
        let times = uniform_grid(0.0, 0.9, 10);
        let own: Vec<_> = ics(6, 15).iter().map(|y| rollout(&student, y, &times, 1).unwrap()).collect();
        let s = student_step(&student, &own, 0.002, 1).unwrap();
        assert_eq!(s.loss, 0.0);
        assert_eq!(s.params, student);

        let teacher = NoisyTeacher { params: tiny(16), sigma: 0.05 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch = sample_pseudo_rollouts(&teacher, &ics(6, 18), &times, 1, true, &mut rng).unwrap();
        let frozen = student_step(&student, &batch.noisy, 0.0, 1).unwrap();
        assert_eq!(frozen.params, student);
        assert!(frozen.loss > 0.0);

        let s = student_step(&student, &batch.noisy, 1e-4, 1).unwrap();
        let again = student_step(&s.params, &batch.noisy, 0.0, 1).unwrap();
        assert!(again.loss < s.loss);
    }

    #[test]
    fn improvement_is_antisymmetric_and_rewards_fitting() {
        let spec = SystemSpec::lotka_volterra();
        let train = spec.simulate::<f64>(&[1.4, 1.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let labeled = batch_short_segments(&[train.clone()], 10, 50, &mut rng).unwrap();
        let random = tiny(20);
        assert_eq!(student_improvement(&random, &random, &labeled, 1).unwrap(), 0.0);

        let mut fitted = random.clone();
        let mut adam = AdamState::new(fitted.param_count());
        for _ in 0..300 {
            let batch = batch_short_segments(&[train.clone()], 10, 50, &mut rng).unwrap();
            let (_, g) = labeled_loss_grad(&fitted, &batch, 1).unwrap();
            assert!(teacher_step(&mut fitted, &mut adam, &g, None, 0.01).unwrap());
        }
        let h = student_improvement(&random, &fitted, &labeled, 1).unwrap();
        assert!(h > 0.0, "h = {h}");
        assert_eq!(student_improvement(&fitted, &random, &labeled, 1).unwrap(), -h);
    }

    #[test]
    fn teacher_step_reduces_to_plain_adam() {
        let spec = SystemSpec::pendulum();
        let train = spec.simulate::<f64>(&[2.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let labeled = batch_short_segments(&[train], 10, 20, &mut rng).unwrap();
        let net = tiny(22);
        let (_, g) = labeled_loss_grad(&net, &labeled, 1).unwrap();
        let zero = GradientVector::zeros(net.param_count());

        let (mut a, mut b) = (net.clone(), net.clone());
        let (mut sa, mut sb) = (AdamState::new(net.param_count()), AdamState::new(net.param_count()));
        teacher_step(&mut a, &mut sa, &g, None, 0.002).unwrap();
        teacher_step(&mut b, &mut sb, &g, Some((0.0, &zero)), 0.002).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.step_count, 1);

        let before = a.clone();
        assert!(!teacher_step(&mut a, &mut sa, &g, Some((f64::NAN, &zero)), 0.002).unwrap());
        assert_eq!(a, before);
        assert_eq!(sa.step_count, 1);
    }
}
