use super::param::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter holding a gradient, then clears
    /// all gradients. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        if params.iter().all(|p| p.grad.is_none()) {
            return Err(Error::State("adam step without gradients".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params
            .params_mut()
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let Some(g) = p.grad.take() else { continue };
            for (((w, gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Tape, Tensor};

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = store(1.5);
        let mut adam = Adam::new(0.01, &params);
        for _ in 0..10 {
            params.params_mut()[0].grad = Some(vec![0.0]);
            adam.step(&mut params).unwrap();
        }
        assert_eq!(params.iter().next().unwrap().value.data(), &[1.5]);
    }

    #[test]
    fn missing_gradients_is_a_state_error() {
        let mut params = store(0.0);
        let mut adam = Adam::new(0.01, &params);
        assert!(matches!(adam.step(&mut params), Err(Error::State(_))));
    }

    #[test]
    fn constant_gradient_moves_by_lr_per_step() {
        let mut params = store(0.0);
        let mut adam = Adam::new(0.01, &params);
        let mut prev = 0.0;
        for _ in 0..50 {
            params.params_mut()[0].grad = Some(vec![3.7]);
            adam.step(&mut params).unwrap();
            let now = params.iter().next().unwrap().value.data()[0];
            assert!(((prev - now) - 0.01).abs() < 1e-8);
            prev = now;
        }
    }

    #[test]
    fn quadratic_converges_to_its_minimizer() {
        // loss = 2 (w - 3)^2 has its minimum at w = 3
        let mut params = store(0.0);
        let id = params.find("w").unwrap();
        let mut adam = Adam::new(0.1, &params);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let w = tape.param(&params, id).unwrap();
            let d = tape.add_scalar(w, -3.0).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.scale(sq, 2.0).unwrap();
            let loss = tape.sum(loss).unwrap();
            tape.backward(loss).unwrap();
            params.accumulate_grads(&tape);
            adam.step(&mut params).unwrap();
        }
        assert!((params.value(id).data()[0] - 3.0).abs() < 1e-3);
        assert!(params.grad(id).is_none());
    }
}
