use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(field, format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam with bias correction over a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// One update. Rejects the whole step, leaving state untouched, if any
    /// gradient is non-finite.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        names: &[String],
    ) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: vec![params.len(), grads.len()],
                right: vec![self.first.len()],
            });
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                let name = names.get(k).cloned().unwrap_or_else(|| format!("param{k}"));
                return Err(Error::Numeric {
                    what: format!("gradient of {name}"),
                    index: i,
                });
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, (w, g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![0.5, -0.25])];
        let mut opt = AdamState::new(AdamConfig::with_lr(0.05), &p);
        opt.step(&mut p, &[Tensor::zeros(&[2])], &names(1)).unwrap();
        assert_eq!(p[0].data(), &[0.5, -0.25]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = AdamState::new(AdamConfig::with_lr(0.05), &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)], &names(1)).unwrap();
        assert!((p[0].item() + 0.05).abs() < 1e-6);
    }

    #[test]
    fn matches_recurrence_oracle() {
        let cfg = AdamConfig::with_lr(0.05);
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = AdamState::new(cfg, &p);
        let g = 0.3;
        for _ in 0..2 {
            opt.step(&mut p, &[Tensor::scalar(g)], &names(1)).unwrap();
        }
        // two-step recurrence written out by hand
        let (b1, b2, e, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let mut w = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + e);
        }
        assert!((p[0].item() - w).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![Tensor::scalar(0.0), Tensor::vector(vec![0.0, 0.0])];
        let mut opt = AdamState::new(AdamConfig::default(), &p);
        let err = opt
            .step(&mut p, &[Tensor::scalar(0.0), Tensor::vector(vec![1.0, f64::NAN])], &names(2))
            .unwrap_err();
        assert!(err.to_string().contains("p1"), "{err}");
        assert_eq!(opt.step, 0);
    }
}
