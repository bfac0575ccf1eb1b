use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AdamState<S: Scalar> {
    pub first_moment: Vec<S>,
    pub second_moment: Vec<S>,
    pub step_count: u64,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(param_count: usize) -> Self {
        Self {
            first_moment: vec![S::zero(); param_count],
            second_moment: vec![S::zero(); param_count],
            step_count: 0,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [S], grad: &[S], lr: S) {
        assert_eq!(params.len(), self.first_moment.len(), "parameter count");
        assert_eq!(grad.len(), self.first_moment.len(), "gradient length");
        self.step_count += 1;
        let t = self.step_count as i32;
        let one = S::one();
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            let m = self.beta1 * self.first_moment[i] + (one - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (one - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] = params[i] - lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = AdamState::<f64>::new(4);
        let mut p = vec![1.0, -2.0, 0.5, 3.0];
        let g = [0.3, -40.0, 0.0, 1e-3];
        adam.update(&mut p, &g, 0.002);
        let delta: Vec<f64> = p.iter().zip([1.0, -2.0, 0.5, 3.0]).map(|(a, b)| a - b).collect();
        assert!((delta[0] + 0.002).abs() < 1e-9);
        assert!((delta[1] - 0.002).abs() < 1e-9);
        assert_eq!(delta[2], 0.0);
        assert!((delta[3] + 0.002).abs() < 2e-8);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn repeated_gradient_steps_stay_bounded() {
        let mut adam = AdamState::<f64>::new(3);
        let mut p = vec![0.0; 3];
        let g = [1.0, -2.0, 0.5];
        adam.update(&mut p, &g, 0.01);
        let before = p.clone();
        adam.update(&mut p, &g, 0.01);
        let step: f64 = p.iter().zip(&before).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(step < 0.01 * 3f64.sqrt() + 1e-12, "{step}");
        assert_eq!(adam.step_count, 2);
    }
}
