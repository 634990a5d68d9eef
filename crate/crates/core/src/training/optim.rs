//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "lr",
                format!("must be positive, got {}", self.lr),
            ));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::config("eps", "must be non-negative"));
        }
        Ok(())
    }
}

/// Moment estimates for every trainable tensor of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    pub step: u64,
    /// Parameters tracked, in store order; frozen tensors never appear.
    pub ids: Vec<ParamId>,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let ids: Vec<ParamId> = store.trainable().collect();
        let zeros: Vec<Vec<F>> = ids
            .iter()
            .map(|&id| vec![F::zero(); store.get(id).numel()])
            .collect();
        Ok(Self {
            cfg,
            step: 0,
            ids,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One update with learning rate `lr`. `grads` is indexed by parameter
    /// id; a missing gradient leaves that tensor and its moments untouched.
    /// Any non-finite gradient aborts the step before anything is written.
    ///
    /// The decay is applied as `θ·(1 − lr·wd)` followed by the Adam step,
    /// which is algebraically `θ − lr·(m̂/(√v̂+ε) + wd·θ)`.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[Option<Vec<F>>],
        lr: f64,
    ) -> Result<()> {
        for &id in &self.ids {
            if let Some(g) = grads.get(id.index()).and_then(Option::as_ref) {
                if g.len() != store.get(id).numel() {
                    return Err(Error::Shape {
                        op: "adamw_step",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: vec![g.len()],
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient for `{}`",
                        store.name(id)
                    )));
                }
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_m_b1, one_m_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let t = self.step as i32;
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let lr_f = F::lit(lr);
        let decay = F::lit(1.0 - lr * c.weight_decay);
        let eps = F::lit(c.eps);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id.index()).and_then(Option::as_ref) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] * decay - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add(
            "p",
            Tensor::from_vec(&[values.len()], values.to_vec())
                .unwrap()
                .with_grad(true),
        );
        s.add("frozen", Tensor::scalar(3.0));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut s = store(&[1.5, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &s).unwrap();
        opt.step(&mut s, &[Some(vec![0.0, 0.0]), None], cfg.lr)
            .unwrap();
        assert_eq!(s.get(s.find("p").unwrap()).data(), &[1.5, -2.0]);
    }

    #[test]
    fn zero_gradient_decays_exactly() {
        let mut s = store(&[1.5, -2.0]);
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(cfg, &s).unwrap();
        opt.step(&mut s, &[Some(vec![0.0, 0.0]), None], cfg.lr)
            .unwrap();
        let k = 1.0 - cfg.lr * cfg.weight_decay;
        assert_eq!(s.get(s.find("p").unwrap()).data(), &[1.5 * k, -2.0 * k]);
        assert_eq!(s.get(s.find("frozen").unwrap()).data(), &[3.0]);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        let mut s = store(&[0.25]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            eps: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &s).unwrap();
        opt.step(&mut s, &[Some(vec![1.0]), None], cfg.lr).unwrap();
        let moved = s.get(s.find("p").unwrap()).data()[0] - 0.25;
        assert!((moved + cfg.lr).abs() < 1e-15, "moved {moved}");
    }

    #[test]
    fn nan_gradient_aborts_without_writing() {
        let mut s = store(&[1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s).unwrap();
        let err = opt
            .step(&mut s, &[Some(vec![0.1, f64::NAN]), None], 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(opt.step, 0);
        assert_eq!(s.get(s.find("p").unwrap()).data(), &[1.0, 2.0]);
        assert!(opt.m[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_config() {
        let s = store(&[1.0]);
        let bad = AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        };
        assert!(
            matches!(AdamW::new(bad, &s), Err(Error::Config { field, .. }) if field == "beta1")
        );
        let bad = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        assert!(AdamW::new(bad, &s).is_err());
    }
}
