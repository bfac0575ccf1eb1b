//! Fixed-step classical Runge-Kutta integration and differentiable rollouts.
//!
//! Rollouts are differentiated by reverse accumulation through every RK4
//! stage of the unrolled solver (discretize-then-optimize, no adjoint ODE).

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::diffnet::{GradientVector, Mlp, NetError, Workspace};
use crate::scalar::{all_finite, axpy, Scalar};

/// Any state component above this magnitude aborts the integration.
pub const BLOWUP_LIMIT: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("integration blew up at time index {index} (t = {time})")]
    BlowUp { index: usize, time: f64 },
    #[error("time grid must be non-empty, finite and strictly increasing")]
    BadTimeGrid,
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("substeps must be at least 1")]
    BadSubsteps,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Right-hand side `y -> dy/dt` of an autonomous ODE.
pub trait VectorField<S: Scalar> {
    type Scratch;

    fn dim(&self) -> usize;
    fn scratch(&self) -> Self::Scratch;
    fn eval(&self, y: &[S], out: &mut [S], scratch: &mut Self::Scratch);
}

impl<S: Scalar> VectorField<S> for Mlp<S> {
    type Scratch = Workspace<S>;

    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn scratch(&self) -> Workspace<S> {
        Workspace::for_net(self)
    }

    fn eval(&self, y: &[S], out: &mut [S], ws: &mut Workspace<S>) {
        self.forward_into(y, ws, out);
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<S: Scalar, F: Fn(&[S], &mut [S])> VectorField<S> for FnField<F> {
    type Scratch = ();

    fn dim(&self) -> usize {
        self.dim
    }

    fn scratch(&self) {}

    fn eval(&self, y: &[S], out: &mut [S], _: &mut ()) {
        (self.f)(y, out)
    }
}

/// Time grid plus an `n x d` matrix of states stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S: Scalar> {
    times: Vec<S>,
    dim: usize,
    states: Vec<S>,
}

fn check_grid<S: Scalar>(times: &[S]) -> Result<(), OdeError> {
    if times.is_empty()
        || !all_finite(times)
        || times.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(OdeError::BadTimeGrid);
    }
    Ok(())
}

impl<S: Scalar> Trajectory<S> {
    /// Builds a trajectory from a grid and row-major states.
    pub fn from_flat(times: Vec<S>, dim: usize, states: Vec<S>) -> Result<Self, OdeError> {
        check_grid(&times)?;
        if dim == 0 || states.len() != times.len() * dim {
            return Err(OdeError::Contract(format!(
                "{} state values for {} times of dimension {dim}",
                states.len(),
                times.len()
            )));
        }
        if !all_finite(&states) {
            return Err(OdeError::Contract("non-finite state".into()));
        }
        Ok(Self { times, dim, states })
    }

    pub fn from_rows(times: Vec<S>, rows: &[Vec<S>]) -> Result<Self, OdeError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(OdeError::Contract("ragged state rows".into()));
        }
        Self::from_flat(times, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[S] {
        &self.times
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[S]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn initial(&self) -> &[S] {
        self.row(0)
    }

    /// Contiguous window of `len` rows starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self, OdeError> {
        if len == 0 || start + len > self.len() {
            return Err(OdeError::Contract(format!(
                "window {start}+{len} outside trajectory of length {}",
                self.len()
            )));
        }
        Ok(Self {
            times: self.times[start..start + len].to_vec(),
            dim: self.dim,
            states: self.states[start * self.dim..(start + len) * self.dim].to_vec(),
        })
    }

    /// Same grid, states transformed elementwise.
    pub fn map_states(&self, mut f: impl FnMut(S) -> S) -> Result<Self, OdeError> {
        let states: Vec<S> = self.states.iter().map(|&v| f(v)).collect();
        Self::from_flat(self.times.clone(), self.dim, states)
    }

    /// Sum of squared differences over the first `rows` rows.
    pub fn sq_error_prefix(&self, other: &Self, rows: usize) -> S {
        let k = rows * self.dim;
        self.states[..k]
            .iter()
            .zip(&other.states[..k])
            .fold(S::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
    }

    /// Mean squared difference per element; grids must agree in shape.
    pub fn mse(&self, other: &Self) -> Result<S, OdeError> {
        if self.len() != other.len() || self.dim != other.dim {
            return Err(OdeError::Contract("trajectory shapes differ".into()));
        }
        Ok(self.sq_error_prefix(other, self.len()) / S::from_usize_lossy(self.states.len()))
    }

    /// CSV with header `t,x1,...,xd` and full-precision values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for j in 1..=self.dim {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(self.rows()) {
            let _ = write!(out, "{t}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, OdeError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| OdeError::Contract("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"t") || cols.len() < 2 {
            return Err(OdeError::Contract(format!("bad CSV header `{header}`")));
        }
        let dim = cols.len() - 1;
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| OdeError::Contract(format!("CSV row {}: {e}", ln + 2)))?;
            if vals.len() != dim + 1 {
                return Err(OdeError::Contract(format!("CSV row {} has {} fields", ln + 2, vals.len())));
            }
            times.push(S::lit(vals[0]));
            states.extend(vals[1..].iter().map(|&v| S::lit(v)));
        }
        Self::from_flat(times, dim, states)
    }
}

fn blown_up<S: Scalar>(y: &[S]) -> bool {
    let lim = S::lit(BLOWUP_LIMIT);
    y.iter().any(|v| !v.is_finite() || v.abs() > lim)
}

/// One RK4 step of size `h` from `y` written into `y_next`. Optionally
/// records the four stage inputs `y, y + h/2 k1, y + h/2 k2, y + h k3`
/// (each of length `d`) for reverse mode.
fn rk4_into<S: Scalar, F: VectorField<S>>(
    field: &F,
    y: &[S],
    h: S,
    y_next: &mut [S],
    bufs: &mut Rk4Buffers<S>,
    scratch: &mut F::Scratch,
    mut stages: Option<&mut [S]>,
) {
    let d = y.len();
    let half = h * S::lit(0.5);
    let Rk4Buffers { k1, k2, k3, k4, u } = bufs;

    field.eval(y, k1, scratch);
    for i in 0..d {
        u[i] = y[i] + half * k1[i];
    }
    if let Some(s) = stages.as_deref_mut() {
        s[..d].copy_from_slice(y);
        s[d..2 * d].copy_from_slice(u);
    }
    field.eval(u, k2, scratch);
    for i in 0..d {
        u[i] = y[i] + half * k2[i];
    }
    if let Some(s) = stages.as_deref_mut() {
        s[2 * d..3 * d].copy_from_slice(u);
    }
    field.eval(u, k3, scratch);
    for i in 0..d {
        u[i] = y[i] + h * k3[i];
    }
    if let Some(s) = stages.as_deref_mut() {
        s[3 * d..4 * d].copy_from_slice(u);
    }
    field.eval(u, k4, scratch);
    let sixth = h / S::lit(6.0);
    let two = S::lit(2.0);
    for i in 0..d {
        y_next[i] = y[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }
}

struct Rk4Buffers<S> {
    k1: Vec<S>,
    k2: Vec<S>,
    k3: Vec<S>,
    k4: Vec<S>,
    u: Vec<S>,
}

impl<S: Scalar> Rk4Buffers<S> {
    fn new(d: usize) -> Self {
        let z = vec![S::zero(); d];
        Self {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            u: z,
        }
    }
}

/// Classical RK4 update `y + h/6 (k1 + 2 k2 + 2 k3 + k4)`.
pub fn rk4_step<S: Scalar, F: VectorField<S>>(field: &F, y: &[S], h: S) -> Result<Vec<S>, OdeError> {
    if !(h > S::zero()) || !h.is_finite() {
        return Err(OdeError::BadStep(h.to_f64_lossy()));
    }
    if y.len() != field.dim() {
        return Err(OdeError::DimensionMismatch {
            expected: field.dim(),
            got: y.len(),
        });
    }
    let mut out = vec![S::zero(); y.len()];
    let mut bufs = Rk4Buffers::new(y.len());
    let mut scratch = field.scratch();
    rk4_into(field, y, h, &mut out, &mut bufs, &mut scratch, None);
    if blown_up(&out) {
        return Err(OdeError::BlowUp { index: 1, time: h.to_f64_lossy() });
    }
    Ok(out)
}

fn check_inputs<S: Scalar>(dim: usize, y0: &[S], times: &[S], substeps: usize) -> Result<(), OdeError> {
    check_grid(times)?;
    if substeps == 0 {
        return Err(OdeError::BadSubsteps);
    }
    if y0.len() != dim {
        return Err(OdeError::DimensionMismatch { expected: dim, got: y0.len() });
    }
    if blown_up(y0) {
        return Err(OdeError::BlowUp { index: 0, time: times[0].to_f64_lossy() });
    }
    Ok(())
}

/// Integrates as far as possible. Returns the successfully computed prefix
/// and the error that stopped integration, if any.
pub fn integrate_partial<S: Scalar, F: VectorField<S>>(
    field: &F,
    y0: &[S],
    times: &[S],
    substeps: usize,
) -> Result<(Trajectory<S>, Option<OdeError>), OdeError> {
    check_inputs(field.dim(), y0, times, substeps)?;
    let d = y0.len();
    let mut states = Vec::with_capacity(times.len() * d);
    states.extend_from_slice(y0);
    let mut bufs = Rk4Buffers::new(d);
    let mut scratch = field.scratch();
    let mut y = y0.to_vec();
    let mut next = vec![S::zero(); d];
    let subs = S::from_usize_lossy(substeps);
    let mut failure = None;
    'grid: for i in 1..times.len() {
        let h = (times[i] - times[i - 1]) / subs;
        for _ in 0..substeps {
            rk4_into(field, &y, h, &mut next, &mut bufs, &mut scratch, None);
            std::mem::swap(&mut y, &mut next);
            if blown_up(&y) {
                failure = Some(OdeError::BlowUp { index: i, time: times[i].to_f64_lossy() });
                break 'grid;
            }
        }
        states.extend_from_slice(&y);
    }
    let n = states.len() / d;
    let traj = Trajectory { times: times[..n].to_vec(), dim: d, states };
    Ok((traj, failure))
}

/// Integrates `field` from `y0` over `times`, one RK4 step per interval
/// times `substeps`.
pub fn integrate<S: Scalar, F: VectorField<S>>(
    field: &F,
    y0: &[S],
    times: &[S],
    substeps: usize,
) -> Result<Trajectory<S>, OdeError> {
    match integrate_partial(field, y0, times, substeps)? {
        (traj, None) => Ok(traj),
        (_, Some(err)) => Err(err),
    }
}

/// Network rollout from `y0` over `times`.
pub fn rollout<S: Scalar>(
    net: &Mlp<S>,
    y0: &[S],
    times: &[S],
    substeps: usize,
) -> Result<Trajectory<S>, OdeError> {
    integrate(net, y0, times, substeps)
}

/// A network rollout with every RK4 stage input recorded, ready for
/// reverse accumulation with arbitrary cotangents on the states.
pub struct RolloutTape<'a, S: Scalar> {
    net: &'a Mlp<S>,
    substeps: usize,
    stages: Vec<S>,
    traj: Trajectory<S>,
}

impl<'a, S: Scalar> RolloutTape<'a, S> {
    pub fn record(net: &'a Mlp<S>, y0: &[S], times: &[S], substeps: usize) -> Result<Self, OdeError> {
        check_inputs(net.state_dim(), y0, times, substeps)?;
        let d = y0.len();
        let steps = (times.len() - 1) * substeps;
        let mut stages = vec![S::zero(); steps * 4 * d];
        let mut states = Vec::with_capacity(times.len() * d);
        states.extend_from_slice(y0);
        let mut bufs = Rk4Buffers::new(d);
        let mut ws = Workspace::for_net(net);
        let mut y = y0.to_vec();
        let mut next = vec![S::zero(); d];
        let subs = S::from_usize_lossy(substeps);
        let mut k = 0;
        for i in 1..times.len() {
            let h = (times[i] - times[i - 1]) / subs;
            for _ in 0..substeps {
                let rec = &mut stages[k * 4 * d..(k + 1) * 4 * d];
                rk4_into(net, &y, h, &mut next, &mut bufs, &mut ws, Some(rec));
                std::mem::swap(&mut y, &mut next);
                if blown_up(&y) {
                    return Err(OdeError::BlowUp { index: i, time: times[i].to_f64_lossy() });
                }
                k += 1;
            }
            states.extend_from_slice(&y);
        }
        Ok(Self {
            net,
            substeps,
            stages,
            traj: Trajectory { times: times.to_vec(), dim: d, states },
        })
    }

    pub fn trajectory(&self) -> &Trajectory<S> {
        &self.traj
    }

    /// Accumulates `cotangent^T d states / d params` into `grad_params` and
    /// returns `cotangent^T d states / d y0`. `cotangent` is `n x d` row-major.
    pub fn vjp(&self, cotangent: &[S], grad_params: &mut [S]) -> Vec<S> {
        let d = self.traj.dim;
        let n = self.traj.len();
        assert_eq!(cotangent.len(), n * d, "cotangent shape");
        assert_eq!(grad_params.len(), self.net.param_count(), "gradient length");
        let mut ws = Workspace::for_net(self.net);
        let mut adj = vec![S::zero(); d];
        let mut ybar = vec![S::zero(); d];
        let mut k1b = vec![S::zero(); d];
        let mut k2b = vec![S::zero(); d];
        let mut k3b = vec![S::zero(); d];
        let mut k4b = vec![S::zero(); d];
        let mut gu = vec![S::zero(); d];
        let subs = S::from_usize_lossy(self.substeps);
        let half = S::lit(0.5);
        let mut k = (n - 1) * self.substeps;
        for i in (1..n).rev() {
            axpy(S::one(), &cotangent[i * d..(i + 1) * d], &mut adj);
            let h = (self.traj.times[i] - self.traj.times[i - 1]) / subs;
            let sixth = h / S::lit(6.0);
            let third = h / S::lit(3.0);
            for _ in 0..self.substeps {
                k -= 1;
                let st = &self.stages[k * 4 * d..(k + 1) * 4 * d];
                let (u1, u2, u3, u4) = (&st[..d], &st[d..2 * d], &st[2 * d..3 * d], &st[3 * d..]);
                ybar.copy_from_slice(&adj);
                for j in 0..d {
                    k1b[j] = sixth * adj[j];
                    k2b[j] = third * adj[j];
                    k3b[j] = third * adj[j];
                    k4b[j] = sixth * adj[j];
                }
                // k4 = f(u4), u4 = y + h k3
                self.net.vjp_accumulate(u4, &k4b, &mut ws, grad_params, &mut gu);
                axpy(S::one(), &gu, &mut ybar);
                axpy(h, &gu, &mut k3b);
                // k3 = f(u3), u3 = y + h/2 k2
                self.net.vjp_accumulate(u3, &k3b, &mut ws, grad_params, &mut gu);
                axpy(S::one(), &gu, &mut ybar);
                axpy(half * h, &gu, &mut k2b);
                // k2 = f(u2), u2 = y + h/2 k1
                self.net.vjp_accumulate(u2, &k2b, &mut ws, grad_params, &mut gu);
                axpy(S::one(), &gu, &mut ybar);
                axpy(half * h, &gu, &mut k1b);
                // k1 = f(y)
                self.net.vjp_accumulate(u1, &k1b, &mut ws, grad_params, &mut gu);
                axpy(S::one(), &gu, &mut ybar);
                adj.copy_from_slice(&ybar);
            }
        }
        axpy(S::one(), &cotangent[..d], &mut adj);
        adj
    }
}

/// Records a tape per initial condition, lets `per_item` turn each rollout
/// into `(loss contribution, state cotangent)`, and reduces in batch order.
/// Batch items run in parallel; the reduction order is fixed.
pub fn batch_loss_grad<S, F>(
    net: &Mlp<S>,
    ics: &[Vec<S>],
    times: &[S],
    substeps: usize,
    per_item: F,
) -> Result<(S, GradientVector<S>), OdeError>
where
    S: Scalar,
    F: Fn(usize, &Trajectory<S>) -> (S, Vec<S>) + Sync,
{
    let p = net.param_count();
    let parts: Vec<Result<(S, Vec<S>), OdeError>> = ics
        .par_iter()
        .enumerate()
        .map(|(b, y0)| {
            let tape = RolloutTape::record(net, y0, times, substeps)?;
            let (loss, cot) = per_item(b, tape.trajectory());
            let mut g = vec![S::zero(); p];
            tape.vjp(&cot, &mut g);
            Ok((loss, g))
        })
        .collect();
    let mut loss = S::zero();
    let mut grad = vec![S::zero(); p];
    for part in parts {
        let (l, g) = part?;
        loss = loss + l;
        axpy(S::one(), &g, &mut grad);
    }
    if !loss.is_finite() {
        return Err(OdeError::Net(NetError::NonFinite("loss")));
    }
    Ok((loss, GradientVector::new(grad, p)?))
}

/// Mean squared error between network rollouts and `targets`, averaged over
/// batch, time and state dimension, with its exact parameter gradient.
pub fn rollout_loss_grad<S: Scalar>(
    net: &Mlp<S>,
    y0_batch: &[Vec<S>],
    times: &[S],
    targets: &[Trajectory<S>],
    substeps: usize,
) -> Result<(S, GradientVector<S>), OdeError> {
    check_targets(net.state_dim(), y0_batch, times, targets)?;
    if targets.is_empty() {
        return Ok((S::zero(), GradientVector::zeros(net.param_count())));
    }
    let count = S::from_usize_lossy(targets.len() * times.len() * net.state_dim());
    let two = S::lit(2.0);
    batch_loss_grad(net, y0_batch, times, substeps, |b, pred| {
        let target = targets[b].states();
        let mut loss = S::zero();
        let cot = pred
            .states()
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let r = p - t;
                loss = loss + r * r;
                two * r / count
            })
            .collect();
        (loss / count, cot)
    })
}

/// Loss-only counterpart of [`rollout_loss_grad`].
pub fn rollout_loss<S: Scalar>(
    net: &Mlp<S>,
    y0_batch: &[Vec<S>],
    times: &[S],
    targets: &[Trajectory<S>],
    substeps: usize,
) -> Result<S, OdeError> {
    check_targets(net.state_dim(), y0_batch, times, targets)?;
    if targets.is_empty() {
        return Ok(S::zero());
    }
    let count = S::from_usize_lossy(targets.len() * times.len() * net.state_dim());
    let parts: Vec<Result<S, OdeError>> = y0_batch
        .par_iter()
        .zip(targets)
        .map(|(y0, t)| {
            let pred = rollout(net, y0, times, substeps)?;
            Ok(pred.sq_error_prefix(t, t.len()))
        })
        .collect();
    let mut total = S::zero();
    for p in parts {
        total = total + p?;
    }
    Ok(total / count)
}

fn check_targets<S: Scalar>(
    dim: usize,
    y0_batch: &[Vec<S>],
    times: &[S],
    targets: &[Trajectory<S>],
) -> Result<(), OdeError> {
    if y0_batch.len() != targets.len() {
        return Err(OdeError::Contract(format!(
            "{} initial conditions for {} targets",
            y0_batch.len(),
            targets.len()
        )));
    }
    for t in targets {
        if t.times() != times || t.dim() != dim {
            return Err(OdeError::Contract("targets must share the rollout grid".into()));
        }
    }
    Ok(())
}

/// `n` equally spaced points on `[t0, t1]`.
pub fn uniform_grid<S: Scalar>(t0: S, t1: S, n: usize) -> Vec<S> {
    if n == 1 {
        return vec![t0];
    }
    let span = t1 - t0;
    let last = S::from_usize_lossy(n - 1);
    (0..n)
        .map(|i| t0 + span * S::from_usize_lossy(i) / last)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decay() -> FnField<impl Fn(&[f64], &mut [f64])> {
        FnField::new(1, |y: &[f64], out: &mut [f64]| out[0] = -y[0])
    }

    fn zero_field() -> FnField<impl Fn(&[f64], &mut [f64])> {
        FnField::new(2, |_: &[f64], out: &mut [f64]| out.fill(0.0))
    }

    #[test]
    fn zero_rhs_keeps_state() {
        assert_eq!(rk4_step(&zero_field(), &[1.5, -2.0], 0.3).unwrap(), vec![1.5, -2.0]);
        let traj = integrate(&zero_field(), &[1.5, -2.0], &uniform_grid(0.0, 1.0, 5), 1).unwrap();
        assert!(traj.rows().all(|r| r == [1.5, -2.0]));
    }

    #[test]
    fn rk4_polynomial_for_decay() {
        let h: f64 = 0.1;
        let poly = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        let y = rk4_step(&decay(), &[1.0], h).unwrap()[0];
        assert!((y - poly).abs() < 1e-15);
        assert!((y - 0.9048375).abs() < 1e-7);
    }

    #[test]
    fn local_error_order_five() {
        let err = |h: f64| (rk4_step(&decay(), &[1.0], h).unwrap()[0] - (-h).exp()).abs();
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 32.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn decay_on_long_grid() {
        let times = uniform_grid(0.0, 10.0, 1001);
        let traj = integrate(&decay(), &[1.0], &times, 1).unwrap();
        let worst = traj
            .rows()
            .zip(&times)
            .map(|(r, t)| (r[0] - (-t).exp()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn step_and_grid_errors() {
        assert_eq!(rk4_step(&decay(), &[1.0], 0.0), Err(OdeError::BadStep(0.0)));
        assert_eq!(integrate(&decay(), &[1.0], &[0.0, 0.0], 1), Err(OdeError::BadTimeGrid));
        assert_eq!(integrate(&decay(), &[1.0], &[0.0, 1.0], 0), Err(OdeError::BadSubsteps));
        let grow = FnField::new(1, |y: &[f64], out: &mut [f64]| out[0] = y[0] * y[0]);
        let err = integrate(&grow, &[1.0], &uniform_grid(0.0, 2.0, 201), 1).unwrap_err();
        assert!(matches!(err, OdeError::BlowUp { index, .. } if index > 90 && index < 110));
        let (partial, e) = integrate_partial(&grow, &[1.0], &uniform_grid(0.0, 2.0, 201), 1).unwrap();
        let OdeError::BlowUp { index, .. } = e.unwrap() else { panic!() };
        assert_eq!(partial.len(), index);
    }

    #[test]
    fn single_point_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f64>::init_uniform(&[2, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let traj = rollout(&net, &[0.3, 0.4], &[1.25], 1).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.times(), &[1.25]);
        assert_eq!(traj.row(0), &[0.3, 0.4]);
    }

    #[test]
    fn zero_network_rollout_is_constant() {
        let net = Mlp::<f64>::zeros(&[2, 8, 2], Activation::Tanh).unwrap();
        let traj = rollout(&net, &[0.7, -0.1], &uniform_grid(0.0, 3.0, 31), 1).unwrap();
        assert!(traj.rows().all(|r| r == [0.7, -0.1]));
    }

    #[test]
    fn linear_network_matches_exponential() {
        let net = Mlp::linear(2, vec![-1.0, 0.0, 0.0, -1.0], vec![0.0, 0.0]).unwrap();
        let times = uniform_grid(0.0, 2.0, 201);
        let traj = rollout(&net, &[2.0, -0.5], &times, 1).unwrap();
        for (r, &t) in traj.rows().zip(&times) {
            let t: f64 = t;
            assert!((r[0] - 2.0 * (-t).exp()).abs() < 1e-9);
            assert!((r[1] + 0.5 * (-t).exp()).abs() < 1e-9);
        }
    }

    fn loss_of(net: &Mlp<f64>, flat: &[f64], ics: &[Vec<f64>], times: &[f64], tg: &[Trajectory<f64>]) -> f64 {
        rollout_loss(&net.unflatten(flat).unwrap(), ics, times, tg, 1).unwrap()
    }

    #[test]
    fn loss_grad_matches_finite_differences_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f64>::init_uniform(&[1, 3, 1], Activation::Tanh, &mut rng).unwrap();
        let times = uniform_grid(0.0, 0.6, 4);
        let ics = vec![vec![0.8]];
        let targets = vec![Trajectory::from_flat(times.clone(), 1, vec![0.8, 0.5, 0.9, 0.1]).unwrap()];
        let (_, g) = rollout_loss_grad(&net, &ics, &times, &targets, 1).unwrap();
        let base = net.flatten();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += 1e-6;
            let up = loss_of(&net, &p, &ics, &times, &targets);
            p[i] -= 2e-6;
            let dn = loss_of(&net, &p, &ics, &times, &targets);
            let fd = (up - dn) / 2e-6;
            assert!((fd - g.as_slice()[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "coord {i}: {fd} vs {}", g.as_slice()[i]);
        }
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::<f64>::init_uniform(&[2, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let times = uniform_grid(0.0, 0.5, 6);
        let ics = vec![vec![0.2, 0.1], vec![-0.4, 0.9]];
        let targets: Vec<_> = ics.iter().map(|y| rollout(&net, y, &times, 1).unwrap()).collect();
        let (loss, g) = rollout_loss_grad(&net, &ics, &times, &targets, 1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_is_mean_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = Mlp::<f64>::init_uniform(&[2, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let times = uniform_grid(0.0, 0.5, 6);
        let y0 = vec![0.3, -0.2];
        let tgt = Trajectory::from_flat(times.clone(), 2, (0..12).map(|i| i as f64 * 0.05).collect()).unwrap();
        let one = rollout_loss_grad(&net, &[y0.clone()], &times, &[tgt.clone()], 1).unwrap();
        let two = rollout_loss_grad(&net, &[y0.clone(), y0], &times, &[tgt.clone(), tgt], 1).unwrap();
        assert!((one.0 - two.0).abs() < 1e-15);
        for (a, b) in one.1.as_slice().iter().zip(two.1.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatched_targets_rejected() {
        let net = Mlp::<f64>::zeros(&[2, 3, 2], Activation::Tanh).unwrap();
        let times = uniform_grid(0.0, 1.0, 3);
        let other = Trajectory::from_flat(uniform_grid(0.0, 2.0, 3), 2, vec![0.0; 6]).unwrap();
        let err = rollout_loss_grad(&net, &[vec![0.0, 0.0]], &times, &[other], 1).unwrap_err();
        assert!(matches!(err, OdeError::Contract(_)));
    }

    #[test]
    fn global_order_four() {
        let max_err = |steps: usize| {
            let times = uniform_grid(0.0, 1.0, steps + 1);
            let traj = integrate(&decay(), &[1.0], &times, 1).unwrap();
            traj.rows().zip(&times).map(|(r, t)| (r[0] - (-t).exp()).abs()).fold(0.0, f64::max)
        };
        for steps in [5, 10, 20] {
            let ratio = max_err(steps) / max_err(2 * steps);
            assert!((12.0..=20.0).contains(&ratio), "{steps}: {ratio}");
        }
    }

    #[test]
    fn substeps_refine_toward_closed_form() {
        let times = uniform_grid(0.0, 1.0, 11);
        let one = integrate(&decay(), &[1.0], &times, 1).unwrap();
        let two = integrate(&decay(), &[1.0], &times, 2).unwrap();
        let diff = one.rows().zip(two.rows()).map(|(a, b)| (a[0] - b[0]).abs()).fold(0.0, f64::max);
        let exact = one.rows().zip(&times).map(|(a, t)| (a[0] - (-t).exp()).abs()).fold(0.0, f64::max);
        assert!(diff < exact);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let traj = Trajectory::from_flat(vec![0.0, 0.1], 2, vec![1.0 / 3.0, -2.5, 1e-17, 7.0]).unwrap();
        let csv = traj.to_csv();
        assert!(csv.starts_with("t,x1,x2\n"));
        assert_eq!(Trajectory::<f64>::from_csv(&csv).unwrap(), traj);
    }

    #[test]
    fn f32_rollout() {
        let net = Mlp::<f32>::linear(1, vec![-1.0], vec![0.0]).unwrap();
        let traj = rollout(&net, &[1.0f32], &uniform_grid(0.0f32, 1.0, 11), 1).unwrap();
        assert!((traj.row(10)[0] - (-1.0f32).exp()).abs() < 1e-5);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assume, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(20))]

            #[test]
            fn loss_grad_agrees_with_central_differences(seed in 0u64..100_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = rng.random_range(1..=2usize);
                let hidden = rng.random_range(2..=6usize);
                let net = Mlp::<f64>::init_uniform(&[d, hidden, d], Activation::Tanh, &mut rng).unwrap();
                prop_assume!(net.param_count() <= 60);
                let n = rng.random_range(2..=5usize);
                let times = uniform_grid(0.0, 0.1 * n as f64, n);
                let ics: Vec<Vec<f64>> = (0..2).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let targets: Vec<_> = ics.iter().map(|y0| {
                    let mut s: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                    s[..d].copy_from_slice(y0);
                    Trajectory::from_flat(times.clone(), d, s).unwrap()
                }).collect();
                let (_, g) = rollout_loss_grad(&net, &ics, &times, &targets, 1).unwrap();
                let base = net.flatten();
                let fd: Vec<f64> = (0..base.len()).map(|i| {
                    let mut p = base.clone();
                    p[i] += 1e-6;
                    let up = loss_of(&net, &p, &ics, &times, &targets);
                    p[i] -= 2e-6;
                    let dn = loss_of(&net, &p, &ics, &times, &targets);
                    (up - dn) / 2e-6
                }).collect();
                let num: f64 = g.as_slice().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(num < 1e-4 * den, "rel {}", num / den);
            }
        }
    }
}
