use super::{Result, TensorError};
use crate::params::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter. One per client
/// per round; never shared.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &ParameterSet,
        cfg: &AdamConfig,
    ) -> Result<()> {
        params.check_compatible(grads)?;
        params.check_compatible(&self.m).map_err(|e| {
            TensorError::KeyMismatch(format!("optimizer state does not match parameters: {e}"))
        })?;
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked").data();
            let m = self.m.get_mut(name).expect("checked").data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("checked").data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let m = self.m.get(name).expect("checked").data();
            let v = self.v.get(name).expect("checked").data();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(name: &str, vals: Vec<f64>) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(name, Tensor::vector(vals));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = single("w", vec![0.3, -1.2]);
        let before = params.clone();
        let mut st = AdamState::new(&params);
        st.step(
            &mut params,
            &single("w", vec![0.0, 0.0]),
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g^2 after bias correction, so the update is
        // lr * g / (|g| + eps).
        let cfg = AdamConfig::default();
        let g = [0.5, -2.0, 1e-3];
        let mut params = single("w", vec![0.0; 3]);
        let mut st = AdamState::new(&params);
        st.step(&mut params, &single("w", g.to_vec()), &cfg)
            .unwrap();
        for (p, gi) in params.get("w").unwrap().data().iter().zip(g) {
            let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((p - expected).abs() < 1e-18, "{p} vs {expected}");
            assert!((p + cfg.lr * gi.signum()).abs() < cfg.lr * 1e-4);
        }
    }

    #[test]
    fn repeated_calls_are_bitwise_identical() {
        let run = || {
            let mut params = single("w", vec![0.1, 0.2, 0.3]);
            let mut st = AdamState::new(&params);
            for k in 0..5 {
                let g = single("w", vec![0.1 * k as f64, -0.3, 0.05]);
                st.step(&mut params, &g, &AdamConfig::default()).unwrap();
            }
            (params, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn key_mismatch_is_an_error() {
        let mut params = single("w", vec![0.0]);
        let mut st = AdamState::new(&params);
        let err = st
            .step(
                &mut params,
                &single("other", vec![0.0]),
                &AdamConfig::default(),
            )
            .unwrap_err();
        assert!(matches!(err, TensorError::KeyMismatch(_)));
    }
}
