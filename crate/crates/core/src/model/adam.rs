use serde::{Deserialize, Serialize};

/// Adam with bias correction. Moment buffers are keyed by a slot index so one
/// optimizer can serve several parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of completed steps.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, sizes: &[usize]) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the step counter; call once before updating the slots of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert!(self.t >= 1, "begin_step must precede update");
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for (((p, &g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8, &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            adam.begin_step();
            adam.update(0, &mut p, &[0.0; 3]);
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 1e-3;
        let mut adam = Adam::new(lr, 0.9, 0.999, 1e-8, &[2]);
        let mut p = vec![0.0, 0.0];
        adam.begin_step();
        adam.update(0, &mut p, &[3.7, -0.02]);
        // m_hat = g, v_hat = g^2 after bias correction
        assert!((p[0] + lr * 3.7 / (3.7 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - lr * 0.02 / (0.02 + 1e-8)).abs() < 1e-15);
        assert!((p[0] + lr).abs() < 1e-9 && (p[1] - lr).abs() < 1e-8);
    }

    #[test]
    fn ten_steps_are_reproducible() {
        let run = || {
            let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8, &[4]);
            let mut p = vec![0.1, 0.2, 0.3, 0.4];
            for t in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * x - 0.05 * t as f64).collect();
                adam.begin_step();
                adam.update(0, &mut p, &g);
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
