use crate::error::{Error, Result};

use super::NetParams;

/// Adam moments and hyperparameters for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_params(params: &NetParams, learning_rate: f64) -> Self {
        Self::new(params.len(), learning_rate)
    }

    /// Bias-corrected Adam update on a raw slice. Rejects the whole update
    /// if any gradient entry is non-finite.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam step",
                self.first_moment.len(),
                format!("params {} / grads {}", params.len(), grads.len()),
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericFault("non-finite gradient passed to Adam".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// One Adam step on a network given gradients with the same layout.
pub fn adam_step(params: &mut NetParams, grads: &NetParams, state: &mut AdamState) -> Result<()> {
    if params.spec() != grads.spec() {
        return Err(Error::shape(
            "adam gradient spec",
            format!("{:?}", params.spec().layer_widths),
            format!("{:?}", grads.spec().layer_widths),
        ));
    }
    state.update(params.as_mut_slice(), grads.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{HiddenActivation, NetSpec, OutputActivation};

    fn net() -> NetParams {
        let spec = NetSpec::new(vec![1, 1], HiddenActivation::Relu, OutputActivation::Identity).unwrap();
        NetParams::from_vec(spec, vec![0.5, -0.25]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = net();
        let before = p.as_slice().to_vec();
        let g = p.zeros_like();
        let mut s = AdamState::for_params(&p, 1e-3);
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.as_slice(), before.as_slice());
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let lr = 5e-3;
        for g in [3.0, -0.02, 1e3] {
            let mut p = [1.0];
            let mut s = AdamState::new(1, lr);
            s.update(&mut p, &[g]).unwrap();
            let expected = lr * g / ((g * g).sqrt() + s.epsilon);
            assert!((1.0 - p[0] - expected).abs() < 1e-15);
            assert!(((1.0 - p[0]) - lr * g.signum()).abs() < lr * 1e-5);
        }
    }

    #[test]
    fn two_constant_steps_match_ema_closed_form() {
        let g = 0.4;
        let mut p = [0.0];
        let mut s = AdamState::new(1, 1e-2);
        s.update(&mut p, &[g]).unwrap();
        s.update(&mut p, &[g]).unwrap();
        assert_eq!(s.step_count, 2);
        // m_2 = (1 - b1^2) g, v_2 = (1 - b2^2) g^2
        let m2 = (1.0 - 0.9f64.powi(2)) * g;
        let v2 = (1.0 - 0.999f64.powi(2)) * g * g;
        assert!((s.first_moment[0] - m2).abs() < 1e-15);
        assert!((s.second_moment[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = net();
        let before = p.as_slice().to_vec();
        let mut g = p.zeros_like();
        g.as_mut_slice()[1] = f64::INFINITY;
        let mut s = AdamState::for_params(&p, 1e-3);
        let err = adam_step(&mut p, &g, &mut s).unwrap_err();
        assert!(matches!(err, Error::NumericFault(_)));
        assert_eq!(p.as_slice(), before.as_slice());
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn first_update_direction_is_scale_invariant() {
        let grads = [0.3, -2.0, 5.0, 0.01];
        let step = |scale: f64| {
            let mut p = [0.0; 4];
            let mut s = AdamState::new(4, 1e-3);
            let g: Vec<f64> = grads.iter().map(|g| g * scale).collect();
            s.update(&mut p, &g).unwrap();
            p
        };
        let a = step(1.0);
        let b = step(250.0);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999);
    }
}
