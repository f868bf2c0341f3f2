//! Adam optimizer state and update rule.

use crate::numerics::NumericsError;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction; mutates `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NumericsError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NumericsError::LengthMismatch {
                expected: self.m.len(),
                got: grads.len().max(params.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params() {
        let mut st = AdamState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // Bias correction makes the first update m_hat/sqrt(v_hat) = sign(g),
        // so the parameter moves by ~lr (up to eps).
        let mut st = AdamState::new(1, 0.1);
        let mut p = vec![0.0];
        st.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6, "p {:?}", p);
    }

    #[test]
    fn identical_trajectories() {
        let mut s1 = AdamState::new(2, 0.05);
        let mut s2 = AdamState::new(2, 0.05);
        let mut p1 = vec![0.3, -0.7];
        let mut p2 = p1.clone();
        for k in 0..50 {
            let g = [0.1 * (k as f64).sin(), -0.2];
            s1.step(&mut p1, &g).unwrap();
            s2.step(&mut p2, &g).unwrap();
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut st = AdamState::new(2, 0.1);
        let mut p = vec![0.0, 0.0];
        assert!(st.step(&mut p, &[1.0]).is_err());
    }
}
