//! Teacher-student training of neural ordinary differential equations.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix it at `f64`, which every trainer and the CLI use.

pub mod diffnet;
pub mod metrics;
pub mod odeint;
pub mod oracle;
pub mod scalar;
pub mod seeding;
pub mod systems;
pub mod tsnode;

pub use scalar::Scalar;

pub type NetworkParams = diffnet::Mlp<f64>;
pub type GradientVector = diffnet::GradientVector<f64>;
pub type Trajectory = odeint::Trajectory<f64>;
pub type Dataset = systems::Dataset<f64>;
pub type NoisyTeacher = tsnode::NoisyTeacher<f64>;
pub type AdamState = tsnode::AdamState<f64>;
pub type TrainOutcome = tsnode::TrainOutcome<f64>;
pub type TrainerState = tsnode::TrainerState<f64>;

/// Single-precision network parameters.
pub type NetworkParamsF32 = diffnet::Mlp<f32>;
