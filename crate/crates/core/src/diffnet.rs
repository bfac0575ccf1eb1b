//! Small fully connected networks with hand-written reverse mode.
//!
//! A network maps a state of dimension `d` to a state derivative of the same
//! dimension. Hidden layers apply an elementwise activation, the output layer
//! is affine. Parameters have a flat view used by optimizers and finite
//! differences: layer by layer, the weight matrix in row-major order
//! (`out x in`) followed by the bias vector.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{all_finite, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector has length {got}, network expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                // log(1 + e^z) without overflow for large z
                if z > S::zero() {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative<S: Scalar>(self, z: S, a: S) -> S {
        match self {
            Activation::Tanh => S::one() - a * a,
            Activation::Softplus => S::one() / (S::one() + (-z).exp()),
            Activation::Identity => S::one(),
        }
    }
}

/// Flat gradient with respect to the parameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<S: Scalar> {
    values: Vec<S>,
}

impl<S: Scalar> GradientVector<S> {
    /// Wraps `values` after checking length against `expected_len` and
    /// rejecting NaN/Inf entries.
    pub fn new(values: Vec<S>, expected_len: usize) -> Result<Self, NetError> {
        if values.len() != expected_len {
            return Err(NetError::LengthMismatch {
                expected: expected_len,
                got: values.len(),
            });
        }
        if !all_finite(&values) {
            return Err(NetError::NonFinite("gradient"));
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![S::zero(); len],
        }
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<S> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> S {
        crate::scalar::norm(&self.values)
    }
}

/// Weights and biases of a feed-forward right-hand-side network.
///
/// JSON layout: `{"layer_sizes": [...], "weights": [[row-major], ...],
/// "biases": [[...], ...], "activation": "tanh"}`; `activation` is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr<S>", bound = "S: Scalar")]
pub struct Mlp<S: Scalar> {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<S>>,
    biases: Vec<Vec<S>>,
    #[serde(default)]
    activation: Activation,
}

#[derive(Deserialize)]
#[serde(bound = "S: Scalar")]
struct MlpRepr<S: Scalar> {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<S>>,
    biases: Vec<Vec<S>>,
    #[serde(default)]
    activation: Activation,
}

impl<S: Scalar> TryFrom<MlpRepr<S>> for Mlp<S> {
    type Error = NetError;

    fn try_from(r: MlpRepr<S>) -> Result<Self, NetError> {
        check_sizes(&r.layer_sizes)?;
        let layers = r.layer_sizes.len() - 1;
        if r.weights.len() != layers || r.biases.len() != layers {
            return Err(NetError::InvalidShape(format!(
                "expected {layers} weight and bias blocks"
            )));
        }
        for (l, (w, b)) in r.weights.iter().zip(&r.biases).enumerate() {
            let (inp, out) = (r.layer_sizes[l], r.layer_sizes[l + 1]);
            if w.len() != inp * out || b.len() != out {
                return Err(NetError::InvalidShape(format!(
                    "layer {l}: weights {} (want {}), biases {} (want {out})",
                    w.len(),
                    inp * out,
                    b.len()
                )));
            }
            if !all_finite(w) || !all_finite(b) {
                return Err(NetError::NonFinite("parameters"));
            }
        }
        Ok(Mlp {
            layer_sizes: r.layer_sizes,
            weights: r.weights,
            biases: r.biases,
            activation: r.activation,
        })
    }
}

fn check_sizes(sizes: &[usize]) -> Result<(), NetError> {
    if sizes.len() < 2 {
        return Err(NetError::InvalidShape(
            "need at least input and output sizes".into(),
        ));
    }
    if sizes.contains(&0) {
        return Err(NetError::InvalidShape("layer sizes must be positive".into()));
    }
    if sizes[0] != sizes[sizes.len() - 1] {
        return Err(NetError::InvalidShape(format!(
            "input size {} differs from output size {}",
            sizes[0],
            sizes[sizes.len() - 1]
        )));
    }
    Ok(())
}

/// Parameter count for a given shape: sum of `out * in + out` over layers.
pub fn param_count_for(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Reusable buffers for forward and reverse passes.
#[derive(Debug, Clone)]
pub struct Workspace<S: Scalar> {
    pre: Vec<Vec<S>>,
    post: Vec<Vec<S>>,
    delta: Vec<S>,
    delta_prev: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    pub fn for_net(net: &Mlp<S>) -> Self {
        let outs = &net.layer_sizes[1..];
        let widest = net.layer_sizes.iter().copied().max().unwrap_or(0);
        Self {
            pre: outs.iter().map(|&n| vec![S::zero(); n]).collect(),
            post: outs.iter().map(|&n| vec![S::zero(); n]).collect(),
            delta: vec![S::zero(); widest],
            delta_prev: vec![S::zero(); widest],
        }
    }
}

impl<S: Scalar> Mlp<S> {
    /// All-zero network of the given shape.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self, NetError> {
        check_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| vec![S::zero(); w[0] * w[1]])
            .collect();
        let biases = layer_sizes
            .windows(2)
            .map(|w| vec![S::zero(); w[1]])
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for
    /// weights and biases of each layer.
    pub fn init_uniform<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        for l in 0..net.weights.len() {
            let bound = 1.0 / (layer_sizes[l] as f64).sqrt();
            for w in net.weights[l].iter_mut().chain(net.biases[l].iter_mut()) {
                *w = S::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    /// Single affine layer `x -> W x + b` with `W` given row-major.
    pub fn linear(dim: usize, weight: Vec<S>, bias: Vec<S>) -> Result<Self, NetError> {
        Self::try_from(MlpRepr {
            layer_sizes: vec![dim, dim],
            weights: vec![weight],
            biases: vec![bias],
            activation: Activation::Identity,
        })
    }

    /// Builds a network from explicit per-layer blocks, validating shapes.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<S>>,
        biases: Vec<Vec<S>>,
        activation: Activation,
    ) -> Result<Self, NetError> {
        Self::try_from(MlpRepr {
            layer_sizes,
            weights,
            biases,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[Vec<S>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<S>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn state_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn param_count(&self) -> usize {
        param_count_for(&self.layer_sizes)
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// New network with this network's shape and the given flat parameters.
    pub fn unflatten(&self, flat: &[S]) -> Result<Self, NetError> {
        let mut net = self.clone();
        net.assign_flat(flat)?;
        Ok(net)
    }

    pub fn assign_flat(&mut self, flat: &[S]) -> Result<(), NetError> {
        if flat.len() != self.param_count() {
            return Err(NetError::LengthMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (wl, bl) = (w.len(), b.len());
            w.copy_from_slice(&flat[off..off + wl]);
            off += wl;
            b.copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        Ok(())
    }

    /// `self + alpha * direction` in the flat parameter space.
    pub fn offset(&self, alpha: S, direction: &[S]) -> Result<Self, NetError> {
        let mut flat = self.flatten();
        if direction.len() != flat.len() {
            return Err(NetError::LengthMismatch {
                expected: flat.len(),
                got: direction.len(),
            });
        }
        crate::scalar::axpy(alpha, direction, &mut flat);
        self.unflatten(&flat)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Evaluates the network at `x`.
    pub fn forward(&self, x: &[S]) -> Result<Vec<S>, NetError> {
        self.check_dim(x.len())?;
        let mut ws = Workspace::for_net(self);
        let mut out = vec![S::zero(); self.state_dim()];
        self.forward_into(x, &mut ws, &mut out);
        Ok(out)
    }

    /// Allocation-free forward pass; dimensions are the caller's contract.
    pub fn forward_into(&self, x: &[S], ws: &mut Workspace<S>, out: &mut [S]) {
        debug_assert_eq!(x.len(), self.state_dim());
        let last = self.weights.len() - 1;
        for l in 0..=last {
            let inp_len = self.layer_sizes[l];
            let (done, rest) = ws.post.split_at_mut(l);
            let input: &[S] = if l == 0 { x } else { &done[l - 1] };
            let w = &self.weights[l];
            let pre = &mut ws.pre[l];
            for (r, z) in pre.iter_mut().enumerate() {
                let row = &w[r * inp_len..(r + 1) * inp_len];
                let mut acc = self.biases[l][r];
                for (&wi, &xi) in row.iter().zip(input) {
                    acc = acc + wi * xi;
                }
                *z = acc;
            }
            let post = &mut rest[0];
            if l == last {
                post.copy_from_slice(pre);
            } else {
                for (a, &z) in post.iter_mut().zip(pre.iter()) {
                    *a = self.activation.apply(z);
                }
            }
        }
        out.copy_from_slice(&ws.post[last]);
    }

    /// Vector-Jacobian product at `x`:
    /// returns `cotangent^T d f/d params` and `cotangent^T d f/d x`.
    pub fn vjp(&self, x: &[S], cotangent: &[S]) -> Result<(GradientVector<S>, Vec<S>), NetError> {
        self.check_dim(x.len())?;
        self.check_dim(cotangent.len())?;
        let mut ws = Workspace::for_net(self);
        let mut gp = vec![S::zero(); self.param_count()];
        let mut gx = vec![S::zero(); self.state_dim()];
        self.vjp_accumulate(x, cotangent, &mut ws, &mut gp, &mut gx);
        if !all_finite(&gx) {
            return Err(NetError::NonFinite("input gradient"));
        }
        Ok((GradientVector::new(gp, self.param_count())?, gx))
    }

    /// Adds `cotangent^T d f/d params` into `grad_params` and writes
    /// `cotangent^T d f/d x` into `grad_x`. Recomputes the forward pass.
    pub fn vjp_accumulate(
        &self,
        x: &[S],
        cotangent: &[S],
        ws: &mut Workspace<S>,
        grad_params: &mut [S],
        grad_x: &mut [S],
    ) {
        let d = self.state_dim();
        // forward fills ws.pre / ws.post; the output copy lands in delta_prev
        {
            let mut out = std::mem::take(&mut ws.delta_prev);
            self.forward_into(x, ws, &mut out[..d]);
            ws.delta_prev = out;
        }
        let last = self.weights.len() - 1;
        ws.delta[..d].copy_from_slice(cotangent);

        let mut off = self.param_count();
        for l in (0..=last).rev() {
            let inp_len = self.layer_sizes[l];
            let out_len = self.layer_sizes[l + 1];
            let input: &[S] = if l == 0 { x } else { &ws.post[l - 1] };
            let w = &self.weights[l];
            off -= w.len() + out_len;
            let gw = &mut grad_params[off..off + w.len()];
            for r in 0..out_len {
                let dr = ws.delta[r];
                if dr == S::zero() {
                    continue;
                }
                let grow = &mut gw[r * inp_len..(r + 1) * inp_len];
                for (g, &xi) in grow.iter_mut().zip(input) {
                    *g = *g + dr * xi;
                }
            }
            let gb = &mut grad_params[off + w.len()..off + w.len() + out_len];
            for (g, &dr) in gb.iter_mut().zip(&ws.delta[..out_len]) {
                *g = *g + dr;
            }

            let back = &mut ws.delta_prev[..inp_len];
            back.iter_mut().for_each(|v| *v = S::zero());
            for r in 0..out_len {
                let dr = ws.delta[r];
                let row = &w[r * inp_len..(r + 1) * inp_len];
                for (b, &wi) in back.iter_mut().zip(row) {
                    *b = *b + wi * dr;
                }
            }
            if l == 0 {
                grad_x.copy_from_slice(back);
            } else {
                let (pre, post) = (&ws.pre[l - 1], &ws.post[l - 1]);
                for i in 0..inp_len {
                    ws.delta[i] = ws.delta_prev[i] * self.activation.derivative(pre[i], post[i]);
                }
            }
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), NetError> {
        if got != self.state_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.state_dim(),
                got,
            });
        }
        Ok(())
    }
}
