use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::diffnet::Mlp;
use crate::metrics::{evaluate, MetricsRecord};
use crate::odeint::Trajectory;
use crate::scalar::Scalar;
use crate::seeding::{self, streams, Rng, StreamPos};
use crate::systems::{batch_short_segments, normal, sample_pseudo_ics, Dataset, Segment};

use super::steps::{
    gaussian_nll_grad, labeled_loss_grad, sample_pseudo_rollouts, student_improvement, student_step, teacher_step,
    NoisyTeacher,
};
use super::{AdamState, FeedbackMode, TrainConfig, TrainError, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    WhiteNoise,
    Rescale,
}

/// Transformed copy of a labeled trajectory: additive `N(0, noise_std^2)`
/// noise on every element, or every state scaled by `scale`.
pub fn augment<S: Scalar>(
    traj: &Trajectory<S>,
    mode: AugmentMode,
    noise_std: f64,
    scale: f64,
    rng: &mut Rng,
) -> Result<Trajectory<S>, TrainError> {
    let out = match mode {
        AugmentMode::WhiteNoise => {
            let std = S::lit(noise_std);
            traj.map_states(|v| v + std * normal::<S, _>(rng))?
        }
        AugmentMode::Rescale => {
            let k = S::lit(scale);
            traj.map_states(|v| k * v)?
        }
    };
    Ok(out)
}

/// Everything needed to resume a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TrainerState<S: Scalar> {
    pub variant: Variant,
    pub config: TrainConfig,
    pub iteration: usize,
    pub teacher: Mlp<S>,
    pub student: Option<Mlp<S>>,
    pub adam: AdamState<S>,
    pub labeled_rng: StreamPos,
    pub pseudo_rng: StreamPos,
    pub noise_rng: StreamPos,
    pub history: Vec<MetricsRecord>,
    pub skipped: usize,
    /// Labeled teacher loss per iteration; `None` for skipped iterations.
    pub labeled_losses: Vec<Option<f64>>,
    /// Student improvement per teacher-student iteration.
    pub improvements: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub skipped: bool,
    pub labeled_loss: Option<f64>,
    pub improvement: Option<f64>,
    pub record: Option<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<S: Scalar> {
    pub variant: Variant,
    pub teacher: Mlp<S>,
    pub student: Option<Mlp<S>>,
    pub history: Vec<MetricsRecord>,
    pub skipped: usize,
}

impl<S: Scalar> TrainOutcome<S> {
    /// The model the variant reports: the student for the no-feedback
    /// ablation, the clean teacher otherwise.
    pub fn reported(&self) -> &Mlp<S> {
        match (&self.variant, &self.student) {
            (Variant::NoFeedback, Some(s)) => s,
            _ => &self.teacher,
        }
    }
}

/// Resumable training loop over one dataset.
pub struct Trainer<'d, S: Scalar> {
    dataset: &'d Dataset<S>,
    labeled_pool: Vec<Trajectory<S>>,
    pseudo_times: Vec<S>,
    state: TrainerState<S>,
    labeled_rng: Rng,
    pseudo_rng: Rng,
    noise_rng: Rng,
}

fn labeled_pool<S: Scalar>(
    variant: Variant,
    config: &TrainConfig,
    dataset: &Dataset<S>,
) -> Result<Vec<Trajectory<S>>, TrainError> {
    let mode = match variant {
        Variant::WhiteNoise => AugmentMode::WhiteNoise,
        Variant::Rescale => AugmentMode::Rescale,
        _ => return Ok(vec![dataset.train.clone()]),
    };
    let mut rng = seeding::stream(config.seed, streams::AUGMENTATION);
    let copy = augment(&dataset.train, mode, config.aug_noise_std, config.aug_scale, &mut rng)?;
    Ok(vec![dataset.train.clone(), copy])
}

impl<'d, S: Scalar> Trainer<'d, S> {
    pub fn new(variant: Variant, config: TrainConfig, dataset: &'d Dataset<S>) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        let dim = dataset.train.dim();
        let sizes = config.layer_sizes(dim);
        let mut init = seeding::stream(config.seed, streams::TEACHER_INIT);
        let teacher = Mlp::init_uniform(&sizes, config.activation, &mut init)?;
        let student = if variant.uses_student() {
            let mut init = seeding::stream(config.seed, streams::STUDENT_INIT);
            Some(Mlp::init_uniform(&sizes, config.activation, &mut init)?)
        } else {
            None
        };
        let seed = config.seed;
        let labeled_rng = seeding::stream(seed, streams::LABELED_BATCHES);
        let pseudo_rng = seeding::stream(seed, streams::PSEUDO_ICS);
        let noise_rng = seeding::stream(seed, streams::TEACHER_NOISE);
        let state = TrainerState {
            variant,
            adam: AdamState::new(teacher.param_count()),
            teacher,
            student,
            iteration: 0,
            labeled_rng: StreamPos::capture(seed, &labeled_rng),
            pseudo_rng: StreamPos::capture(seed, &pseudo_rng),
            noise_rng: StreamPos::capture(seed, &noise_rng),
            history: Vec::new(),
            skipped: 0,
            labeled_losses: Vec::new(),
            improvements: Vec::new(),
            config,
        };
        Self::resume(state, dataset)
    }

    /// Continues a run from a saved state.
    pub fn resume(state: TrainerState<S>, dataset: &'d Dataset<S>) -> Result<Self, TrainError> {
        let config = &state.config;
        config.validate().map_err(TrainError::Config)?;
        let dim = dataset.train.dim();
        if state.teacher.layer_sizes() != config.layer_sizes(dim).as_slice() {
            return Err(TrainError::Checkpoint("teacher shape does not match the configuration".into()));
        }
        if state.variant.uses_student() != state.student.is_some() {
            return Err(TrainError::Checkpoint("student presence does not match the variant".into()));
        }
        if state.adam.first_moment.len() != state.teacher.param_count() {
            return Err(TrainError::Checkpoint("optimizer state size".into()));
        }
        let restore = |p: &StreamPos| p.restore().ok_or_else(|| TrainError::Checkpoint("bad RNG position".into()));
        let labeled_rng = restore(&state.labeled_rng)?;
        let pseudo_rng = restore(&state.pseudo_rng)?;
        let noise_rng = restore(&state.noise_rng)?;
        let pseudo_len = config.pseudo_len();
        if pseudo_len > dataset.train.len() || config.seg_len > dataset.train.len() {
            return Err(TrainError::Config("segments longer than the labeled trajectory".into()));
        }
        let pseudo_times = dataset.train.times()[..pseudo_len].to_vec();
        let labeled_pool = labeled_pool(state.variant, config, dataset)?;
        Ok(Self { dataset, labeled_pool, pseudo_times, state, labeled_rng, pseudo_rng, noise_rng })
    }

    pub fn state(&self) -> &TrainerState<S> {
        &self.state
    }

    /// Snapshot with current RNG positions, suitable for [`Trainer::resume`].
    pub fn checkpoint(&self) -> TrainerState<S> {
        let seed = self.state.config.seed;
        let mut s = self.state.clone();
        s.labeled_rng = StreamPos::capture(seed, &self.labeled_rng);
        s.pseudo_rng = StreamPos::capture(seed, &self.pseudo_rng);
        s.noise_rng = StreamPos::capture(seed, &self.noise_rng);
        s
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.state.config.iterations
    }

    pub fn reported_model(&self) -> &Mlp<S> {
        match (&self.state.variant, &self.state.student) {
            (Variant::NoFeedback, Some(s)) => s,
            _ => &self.state.teacher,
        }
    }

    /// One training iteration, followed by an evaluation when due.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        if self.is_finished() {
            return Err(TrainError::Contract("training already finished".into()));
        }
        let cfg = &self.state.config;
        let labeled = batch_short_segments(&self.labeled_pool, cfg.seg_len, cfg.label_batch, &mut self.labeled_rng)?;
        let iteration = self.state.iteration;
        let (skipped, labeled_loss, improvement) = match self.iterate(&labeled) {
            Ok((loss, h)) => (false, Some(loss), h),
            Err(e) if e.is_recoverable() => {
                warn!("iteration {iteration} skipped: {e}");
                (true, None, None)
            }
            Err(e) => return Err(e),
        };
        let state = &mut self.state;
        state.iteration += 1;
        state.labeled_losses.push(labeled_loss);
        if let Some(h) = improvement {
            state.improvements.push(h);
        }
        if skipped {
            state.skipped += 1;
            let limit = state.config.max_skip_fraction * state.config.iterations as f64;
            if state.skipped as f64 > limit {
                return Err(TrainError::TooManySkips {
                    skipped: state.skipped,
                    iterations: state.config.iterations,
                });
            }
        }
        let record = if state.iteration % state.config.eval_every == 0 || self.is_finished() {
            let rec = evaluate(self.reported_model(), self.dataset, self.state.iteration);
            debug!(
                "iteration {}: local {:.4e}, rollouts {:.4e}",
                rec.iteration, rec.local_error, rec.rollouts_error[4]
            );
            self.state.history.push(rec.clone());
            Some(rec)
        } else {
            None
        };
        Ok(StepReport { iteration, skipped, labeled_loss, improvement, record })
    }

    /// Returns the labeled teacher loss and, in teacher-student iterations,
    /// the student improvement. Leaves all networks untouched on error.
    fn iterate(&mut self, labeled: &[Segment<S>]) -> Result<(f64, Option<f64>), TrainError> {
        let cfg = &self.state.config;
        let subs = cfg.substeps;
        let eta_t = S::lit(cfg.eta_t);
        let (loss, g_labeled) = labeled_loss_grad(&self.state.teacher, labeled, subs)?;
        let loss = loss.to_f64_lossy();

        let student_phase = self.state.variant.uses_student() && self.state.iteration >= cfg.warmup;
        if !student_phase {
            let state = &mut self.state;
            if !teacher_step(&mut state.teacher, &mut state.adam, &g_labeled, None, eta_t)? {
                return Err(crate::diffnet::NetError::NonFinite("teacher update").into());
            }
            return Ok((loss, None));
        }

        let sigma = S::lit(cfg.sigma);
        let ics = sample_pseudo_ics(&self.dataset.train, cfg.pseudo_batch, S::lit(cfg.pseudo_ic_std), &mut self.pseudo_rng);
        let noisy_teacher = NoisyTeacher { params: self.state.teacher.clone(), sigma };
        let batch = sample_pseudo_rollouts(
            &noisy_teacher,
            &ics,
            &self.pseudo_times,
            subs,
            cfg.noisy_initial_row,
            &mut self.noise_rng,
        )?;
        let student = self.state.student.as_ref().expect("student present in teacher-student variants");
        let step = student_step(student, &batch.noisy, S::lit(cfg.eta_s), subs)?;

        let with_feedback = self.state.variant == Variant::Tsnode && cfg.feedback != FeedbackMode::Off;
        let h = match cfg.feedback {
            FeedbackMode::Fixed(v) => S::lit(v),
            _ => student_improvement(student, &step.params, labeled, subs)?,
        };
        let nll_grad = if with_feedback && h != S::zero() && sigma > S::zero() && !batch.is_empty() {
            Some(gaussian_nll_grad(&self.state.teacher, &batch.ics, &batch.noisy, sigma, subs)?.1)
        } else {
            None
        };

        let state = &mut self.state;
        let feedback = nll_grad.as_ref().map(|g| (h, g));
        if !teacher_step(&mut state.teacher, &mut state.adam, &g_labeled, feedback, eta_t)? {
            return Err(crate::diffnet::NetError::NonFinite("teacher update").into());
        }
        state.student = Some(step.params);
        Ok((loss, Some(h.to_f64_lossy())))
    }

    /// Runs the remaining iterations.
    pub fn run(mut self) -> Result<TrainOutcome<S>, TrainError> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.into_outcome())
    }

    pub fn into_outcome(self) -> TrainOutcome<S> {
        let s = self.state;
        TrainOutcome {
            variant: s.variant,
            teacher: s.teacher,
            student: s.student,
            history: s.history,
            skipped: s.skipped,
        }
    }
}

pub fn train<S: Scalar>(variant: Variant, config: &TrainConfig, dataset: &Dataset<S>) -> Result<TrainOutcome<S>, TrainError> {
    Trainer::new(variant, config.clone(), dataset)?.run()
}

pub fn train_tsnode<S: Scalar>(config: &TrainConfig, dataset: &Dataset<S>) -> Result<TrainOutcome<S>, TrainError> {
    train(Variant::Tsnode, config, dataset)
}

pub fn train_baseline<S: Scalar>(config: &TrainConfig, dataset: &Dataset<S>) -> Result<TrainOutcome<S>, TrainError> {
    train(Variant::Baseline, config, dataset)
}

pub fn train_augmented<S: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset<S>,
    mode: AugmentMode,
) -> Result<TrainOutcome<S>, TrainError> {
    let variant = match mode {
        AugmentMode::WhiteNoise => Variant::WhiteNoise,
        AugmentMode::Rescale => Variant::Rescale,
    };
    train(variant, config, dataset)
}

pub fn train_no_feedback<S: Scalar>(config: &TrainConfig, dataset: &Dataset<S>) -> Result<TrainOutcome<S>, TrainError> {
    train(Variant::NoFeedback, config, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_dataset, SystemSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            iterations: 24,
            warmup: 8,
            eval_every: 8,
            hidden: vec![8],
            label_batch: 6,
            pseudo_batch: 5,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn lk() -> Dataset<f64> {
        let spec = SystemSpec { n_steps: 120, horizon: 1.2, ..SystemSpec::lotka_volterra() };
        make_dataset(&spec, 1).unwrap()
    }

    fn teacher_sequence(variant: Variant, cfg: &TrainConfig, ds: &Dataset<f64>) -> Vec<Vec<f64>> {
        let mut t = Trainer::new(variant, cfg.clone(), ds).unwrap();
        let mut seq = vec![t.state().teacher.flatten()];
        while !t.is_finished() {
            t.step().unwrap();
            seq.push(t.state().teacher.flatten());
        }
        seq
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = lk();
        let a = train_tsnode(&small_config(), &ds).unwrap();
        let b = train_tsnode(&small_config(), &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.history.last().unwrap().iteration, 24);
        assert_eq!(a.skipped, 0);
    }

    #[test]
    fn feedback_changes_the_teacher() {
        let ds = lk();
        let full = teacher_sequence(Variant::Tsnode, &small_config(), &ds);
        let base = teacher_sequence(Variant::Baseline, &small_config(), &ds);
        assert_eq!(full[..=8], base[..=8]);
        assert_ne!(full.last(), base.last());
    }

    #[test]
    fn reductions_reproduce_the_baseline_teacher() {
        let ds = lk();
        let cfg = small_config();
        let base = teacher_sequence(Variant::Baseline, &cfg, &ds);
        let reduced = [
            TrainConfig { pseudo_batch: 0, ..cfg.clone() },
            TrainConfig { feedback: FeedbackMode::Fixed(0.0), ..cfg.clone() },
            TrainConfig { feedback: FeedbackMode::Off, ..cfg.clone() },
            TrainConfig { sigma: 0.0, ..cfg.clone() },
        ];
        for c in &reduced {
            assert_eq!(teacher_sequence(Variant::Tsnode, c, &ds), base, "{:?}", c.feedback);
        }
        assert_eq!(teacher_sequence(Variant::NoFeedback, &cfg, &ds), base);
    }

    #[test]
    fn no_feedback_reports_student() {
        let ds = lk();
        let out = train_no_feedback(&small_config(), &ds).unwrap();
        let student = out.student.clone().unwrap();
        assert_eq!(out.reported(), &student);
        assert!(student.flatten().iter().all(|v| v.is_finite()));
        let last = out.history.last().unwrap();
        let direct = evaluate(&student, &ds, 24);
        assert_eq!(last, &direct);
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let ds = lk();
        let cfg = small_config();
        let straight = train_tsnode(&cfg, &ds).unwrap();

        let mut t = Trainer::new(Variant::Tsnode, cfg, &ds).unwrap();
        for _ in 0..13 {
            t.step().unwrap();
        }
        let json = serde_json::to_string(&t.checkpoint()).unwrap();
        drop(t);
        let state: TrainerState<f64> = serde_json::from_str(&json).unwrap();
        let resumed = Trainer::resume(state, &ds).unwrap().run().unwrap();
        assert_eq!(resumed, straight);
    }

    #[test]
    fn augmentation_transforms() {
        let ds = lk();
        let mut rng = seeding::stream(0, streams::AUGMENTATION);
        let scaled = augment(&ds.train, AugmentMode::Rescale, 0.01, 0.95, &mut rng).unwrap();
        for (a, b) in scaled.states().iter().zip(ds.train.states()) {
            assert_eq!(*a, 0.95 * b);
        }
        let same = augment(&ds.train, AugmentMode::WhiteNoise, 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(same, ds.train);
        let noisy = augment(&ds.train, AugmentMode::WhiteNoise, 0.01, 1.0, &mut rng).unwrap();
        assert_ne!(noisy, ds.train);
        for variant in [Variant::WhiteNoise, Variant::Rescale] {
            let out = train(variant, &small_config(), &ds).unwrap();
            assert_eq!(out.history.len(), 3);
        }
    }

    #[test]
    fn rejects_bad_configs_and_checkpoints() {
        let ds = lk();
        let bad = TrainConfig { warmup: 30, ..small_config() };
        assert!(matches!(Trainer::new(Variant::Tsnode, bad, &ds), Err(TrainError::Config(_))));
        let mut state = Trainer::new(Variant::Tsnode, small_config(), &ds).unwrap().checkpoint();
        state.student = None;
        assert!(matches!(Trainer::resume(state, &ds), Err(TrainError::Checkpoint(_))));
    }

    #[test]
    fn persistent_blow_ups_fail_the_run() {
        let ds = lk();
        let cfg = TrainConfig { eta_t: 1e9, ..small_config() };
        let err = train_baseline(&cfg, &ds).unwrap_err();
        assert!(matches!(err, TrainError::TooManySkips { .. }), "{err}");
    }
}
