//! Ground-truth dynamics and dataset construction.
//!
//! Three planar benchmark systems, each with one labeled training rollout,
//! 20 full-length test rollouts from perturbed initial conditions, and 1000
//! ten-step windows cut from those test rollouts.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::odeint::{integrate, uniform_grid, OdeError, Trajectory, VectorField};
use crate::scalar::Scalar;
use crate::seeding::{self, streams};

pub const N_TEST_TRAJECTORIES: usize = 20;
pub const N_SHORT_WINDOWS: usize = 1000;
pub const SHORT_WINDOW_LEN: usize = 10;
/// Scale of the test initial-condition covariance `0.3 I`.
pub const IC_COVARIANCE_SCALE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("unknown system `{0}` (expected cubic, lotka_volterra/lk or pendulum)")]
    UnknownSystem(String),
    #[error("invalid system spec: {0}")]
    InvalidSpec(String),
    #[error("ground-truth integration failed: {0}")]
    Integration(#[from] OdeError),
}

/// Ground-truth right-hand sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum System {
    /// `x' = a x^3 + b y^3`, `y' = c x^3 + d y^3`
    Cubic { a: f64, b: f64, c: f64, d: f64 },
    /// `x' = alpha x - beta x y`, `y' = delta x y - gamma y`
    LotkaVolterra { alpha: f64, beta: f64, delta: f64, gamma: f64 },
    /// `theta' = omega`, `omega' = -a omega - b sin(theta)`
    Pendulum { a: f64, b: f64 },
}

impl System {
    pub fn cubic() -> Self {
        System::Cubic { a: 0.1, b: 2.0, c: -2.0, d: -0.1 }
    }

    pub fn lotka_volterra() -> Self {
        System::LotkaVolterra { alpha: 2.0 / 3.0, beta: 4.0 / 3.0, delta: 1.0, gamma: 1.0 }
    }

    pub fn pendulum() -> Self {
        System::Pendulum { a: 0.0, b: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            System::Cubic { .. } => "cubic",
            System::LotkaVolterra { .. } => "lotka_volterra",
            System::Pendulum { .. } => "pendulum",
        }
    }

    pub fn rhs<S: Scalar>(&self, y: &[S], out: &mut [S]) {
        let (x, v) = (y[0], y[1]);
        match *self {
            System::Cubic { a, b, c, d } => {
                let (x3, v3) = (x * x * x, v * v * v);
                out[0] = S::lit(a) * x3 + S::lit(b) * v3;
                out[1] = S::lit(c) * x3 + S::lit(d) * v3;
            }
            System::LotkaVolterra { alpha, beta, delta, gamma } => {
                out[0] = S::lit(alpha) * x - S::lit(beta) * x * v;
                out[1] = S::lit(delta) * x * v - S::lit(gamma) * v;
            }
            System::Pendulum { a, b } => {
                out[0] = v;
                out[1] = -S::lit(a) * v - S::lit(b) * x.sin();
            }
        }
    }

    /// Analytic equilibria of the vector field.
    pub fn equilibria(&self) -> Vec<[f64; 2]> {
        match *self {
            System::Cubic { .. } => vec![[0.0, 0.0]],
            System::LotkaVolterra { alpha, beta, delta, gamma } => {
                vec![[0.0, 0.0], [gamma / delta, alpha / beta]]
            }
            System::Pendulum { .. } => vec![[0.0, 0.0], [std::f64::consts::PI, 0.0]],
        }
    }
}

impl<S: Scalar> VectorField<S> for System {
    type Scratch = ();

    fn dim(&self) -> usize {
        2
    }

    fn scratch(&self) {}

    fn eval(&self, y: &[S], out: &mut [S], _: &mut ()) {
        self.rhs(y, out)
    }
}

pub fn cubic_rhs<S: Scalar>(state: [S; 2]) -> [S; 2] {
    eval2(&System::cubic(), state)
}

pub fn lk_rhs<S: Scalar>(state: [S; 2]) -> [S; 2] {
    eval2(&System::lotka_volterra(), state)
}

pub fn pendulum_rhs<S: Scalar>(state: [S; 2]) -> [S; 2] {
    eval2(&System::pendulum(), state)
}

fn eval2<S: Scalar>(sys: &System, state: [S; 2]) -> [S; 2] {
    let mut out = [S::zero(); 2];
    sys.rhs(&state, &mut out);
    out
}

/// Lotka-Volterra first integral `delta x - gamma ln x + beta y - alpha ln y`.
pub fn lk_invariant(sys: &System, x: f64, y: f64) -> Option<f64> {
    match *sys {
        System::LotkaVolterra { alpha, beta, delta, gamma } => {
            Some(delta * x - gamma * x.ln() + beta * y - alpha * y.ln())
        }
        _ => None,
    }
}

/// Pendulum energy `omega^2 / 2 - b cos(theta)`, conserved when `a = 0`.
pub fn pendulum_energy(sys: &System, theta: f64, omega: f64) -> Option<f64> {
    match *sys {
        System::Pendulum { b, .. } => Some(0.5 * omega * omega - b * theta.cos()),
        _ => None,
    }
}

/// How the `0.3 I` test initial-condition spread is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcSpreadReading {
    /// `0.3 I` is the covariance: per-coordinate std `sqrt(0.3)`.
    #[default]
    Variance,
    /// `0.3` is the per-coordinate std.
    Std,
}

impl IcSpreadReading {
    pub fn std(self) -> f64 {
        match self {
            IcSpreadReading::Variance => IC_COVARIANCE_SCALE.sqrt(),
            IcSpreadReading::Std => IC_COVARIANCE_SCALE,
        }
    }
}

fn default_substeps() -> usize {
    1
}

/// A benchmark system together with its data-generation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub system: System,
    pub train_y0: Vec<f64>,
    pub ic_noise_std: f64,
    pub horizon: f64,
    /// Number of grid points of each full trajectory.
    pub n_steps: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

impl SystemSpec {
    fn with_defaults(system: System, train_y0: [f64; 2]) -> Self {
        Self {
            system,
            train_y0: train_y0.to_vec(),
            ic_noise_std: IcSpreadReading::Variance.std(),
            horizon: 10.0,
            n_steps: 1000,
            substeps: 1,
        }
    }

    pub fn cubic() -> Self {
        Self::with_defaults(System::cubic(), [3.0, -1.0])
    }

    pub fn lotka_volterra() -> Self {
        Self::with_defaults(System::lotka_volterra(), [1.4, 1.4])
    }

    pub fn pendulum() -> Self {
        Self::with_defaults(System::pendulum(), [2.0, 0.0])
    }

    pub fn by_name(name: &str) -> Result<Self, SystemError> {
        match name.to_ascii_lowercase().as_str() {
            "cubic" => Ok(Self::cubic()),
            "lk" | "lotka_volterra" | "lotka-volterra" => Ok(Self::lotka_volterra()),
            "pendulum" => Ok(Self::pendulum()),
            other => Err(SystemError::UnknownSystem(other.to_string())),
        }
    }

    pub fn with_ic_reading(mut self, reading: IcSpreadReading) -> Self {
        self.ic_noise_std = reading.std();
        self
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        let bad = |m: &str| Err(SystemError::InvalidSpec(m.to_string()));
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if self.n_steps < 2 {
            return bad("n_steps must be at least 2");
        }
        if !(self.ic_noise_std >= 0.0) {
            return bad("ic_noise_std must be non-negative");
        }
        if self.train_y0.len() != 2 || self.train_y0.iter().any(|v| !v.is_finite()) {
            return bad("train_y0 must be a finite 2-vector");
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1");
        }
        if self.n_steps < SHORT_WINDOW_LEN {
            return bad("n_steps shorter than a test window");
        }
        Ok(())
    }

    pub fn times<S: Scalar>(&self) -> Vec<S> {
        uniform_grid(S::zero(), S::lit(self.horizon), self.n_steps)
    }

    pub fn simulate<S: Scalar>(&self, y0: &[S]) -> Result<Trajectory<S>, OdeError> {
        integrate(&self.system, y0, &self.times::<S>(), self.substeps)
    }
}

/// A ten-step test window and where it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortWindow<S: Scalar> {
    pub source: usize,
    pub start: usize,
    pub traj: Trajectory<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S: Scalar> {
    pub spec: SystemSpec,
    pub seed: u64,
    pub train: Trajectory<S>,
    pub test_full: Vec<Trajectory<S>>,
    pub test_short: Vec<ShortWindow<S>>,
}

pub(crate) fn normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> S {
    let z: f64 = StandardNormal.sample(rng);
    S::lit(z)
}

/// Generates the labeled trajectory and test sets; a pure function of
/// `(spec, seed)`.
pub fn make_dataset<S: Scalar>(spec: &SystemSpec, seed: u64) -> Result<Dataset<S>, SystemError> {
    spec.validate()?;
    let mut rng = seeding::stream(seed, streams::DATASET);
    let y0: Vec<S> = spec.train_y0.iter().map(|&v| S::lit(v)).collect();
    let train = spec.simulate(&y0)?;

    let std = S::lit(spec.ic_noise_std);
    let ics: Vec<Vec<S>> = (0..N_TEST_TRAJECTORIES)
        .map(|_| y0.iter().map(|&m| m + std * normal::<S, _>(&mut rng)).collect())
        .collect();
    let test_full = ics
        .par_iter()
        .map(|ic| spec.simulate(ic))
        .collect::<Result<Vec<_>, _>>()?;

    let starts = spec.n_steps - SHORT_WINDOW_LEN + 1;
    let mut test_short = Vec::with_capacity(N_SHORT_WINDOWS);
    for _ in 0..N_SHORT_WINDOWS {
        let source = rng.random_range(0..N_TEST_TRAJECTORIES);
        let start = rng.random_range(0..starts);
        let traj = test_full[source].window(start, SHORT_WINDOW_LEN)?;
        test_short.push(ShortWindow { source, start, traj });
    }
    Ok(Dataset { spec: spec.clone(), seed, train, test_full, test_short })
}

/// A labeled training window: initial state plus target rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<S: Scalar> {
    pub source: usize,
    pub start: usize,
    pub y0: Vec<S>,
    pub target: Trajectory<S>,
}

/// Uniformly samples `batch` contiguous windows of `seg_len` rows from the
/// union of all windows of `trajs`. Targets are re-based to start at the
/// first grid time so that every segment shares one grid.
pub fn batch_short_segments<S: Scalar, R: Rng + ?Sized>(
    trajs: &[Trajectory<S>],
    seg_len: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Segment<S>>, OdeError> {
    if trajs.is_empty() || seg_len == 0 {
        return Err(OdeError::Contract("need trajectories and seg_len > 0".into()));
    }
    let per: Vec<usize> = trajs
        .iter()
        .map(|t| (t.len() + 1).saturating_sub(seg_len))
        .collect();
    let total: usize = per.iter().sum();
    if total == 0 {
        return Err(OdeError::Contract(format!("seg_len {seg_len} exceeds every trajectory")));
    }
    let grid: Vec<S> = trajs[0].times()[..seg_len].to_vec();
    (0..batch)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut source = 0;
            while k >= per[source] {
                k -= per[source];
                source += 1;
            }
            let w = trajs[source].window(k, seg_len)?;
            let target = Trajectory::from_flat(grid.clone(), w.dim(), w.states().to_vec())?;
            Ok(Segment { source, start: k, y0: target.initial().to_vec(), target })
        })
        .collect()
}

/// Pseudo-rollout initial conditions: a uniformly chosen training state
/// plus isotropic Gaussian noise of std `noise_std`.
pub fn sample_pseudo_ics<S: Scalar, R: Rng + ?Sized>(
    train: &Trajectory<S>,
    batch: usize,
    noise_std: S,
    rng: &mut R,
) -> Vec<Vec<S>> {
    (0..batch)
        .map(|_| {
            let row = train.row(rng.random_range(0..train.len()));
            row.iter().map(|&v| v + noise_std * normal::<S, _>(rng)).collect()
        })
        .collect()
}
