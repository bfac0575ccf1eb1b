//! Teacher-student training of neural ODEs: a noisy teacher generates pseudo
//! rollouts, a student takes one gradient step on them, and the student's
//! improvement on labeled data reweights the teacher's likelihood gradient.

mod adam;
mod config;
mod steps;
mod trainer;

use thiserror::Error;

use crate::diffnet::NetError;
use crate::odeint::OdeError;

pub use adam::AdamState;
pub use config::{default_sigma, FeedbackMode, Profile, TrainConfig, Variant};
pub use steps::{
    feedback_loss, gaussian_nll, gaussian_nll_grad, labeled_loss, labeled_loss_grad, sample_pseudo_rollouts,
    student_improvement, student_step, teacher_step, NoisyTeacher, PseudoBatch, StudentStep,
};
pub use trainer::{
    augment, train, train_augmented, train_baseline, train_no_feedback, train_tsnode, AugmentMode, StepReport,
    TrainOutcome, Trainer, TrainerState,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{skipped} of {iterations} iterations skipped after blow-ups")]
    TooManySkips { skipped: usize, iterations: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl TrainError {
    /// Numerical failures that skip one iteration rather than end the run.
    pub fn is_recoverable(&self) -> bool {
        matches!(
            self,
            TrainError::Ode(OdeError::BlowUp { .. })
                | TrainError::Ode(OdeError::Net(NetError::NonFinite(_)))
                | TrainError::Net(NetError::NonFinite(_))
        )
    }
}
