//! Bias-corrected Adam.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Moment buffers keyed by parameter name. Buffers are created as zeros the
/// first time a parameter is stepped.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: &OptimConfig) -> Self {
        AdamState {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Rebuilds a state from saved moments. `m` and `v` must cover the same names.
    pub fn restore(
        config: &OptimConfig,
        t: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        if m.len() != v.len()
            || m.iter()
                .zip(&v)
                .any(|((a, x), (b, y))| a != b || x.shape() != y.shape())
        {
            return Err(Error::State("Adam first and second moments do not line up".into()));
        }
        if v.values().any(|t| t.data().iter().any(|&x| !(x >= 0.0))) {
            return Err(Error::State("Adam second moment has a negative or NaN entry".into()));
        }
        Ok(AdamState {
            t,
            m,
            v,
            ..AdamState::new(config)
        })
    }

    /// Number of completed steps.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.m
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.v
    }

    /// One update of every parameter in `params` from `grads`. Fails before
    /// touching anything if a gradient is missing or misshapen.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for trainable parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim("adam_step", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - math::powi(self.beta1, self.t);
        let bc2 = 1.0 - math::powi(self.beta2, self.t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name.as_str()];
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((w, mi), vi), &gi) in iter {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }

    /// Names with moment buffers, in order.
    pub fn names(&self) -> Vec<&String> {
        self.m.keys().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn config(lr: f64) -> OptimConfig {
        OptimConfig {
            lr,
            ..OptimConfig::default()
        }
    }

    fn step_one(state: &mut AdamState, p: &mut Tensor, g: f64) {
        let mut grads = BTreeMap::new();
        grads.insert(String::from("w"), Tensor::full(p.shape(), g));
        state.step(&mut [(String::from("w"), p)], &grads).unwrap();
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = AdamState::new(&config(0.1));
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        for _ in 0..5 {
            step_one(&mut s, &mut p, 0.0);
        }
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert!(s.first_moments()["w"].data().iter().all(|&x| x == 0.0));
        assert!(s.second_moments()["w"].data().iter().all(|&x| x == 0.0));
        assert_eq!(s.t(), 5);
    }

    #[test]
    fn single_step_matches_straight_line_adam() {
        let (b1, b2, eps, lr, g) = (0.9f64, 0.9999f64, 1e-8f64, 0.1f64, 1.0f64);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expect = 0.0 - lr * m_hat / (v_hat.sqrt() + eps);

        let mut s = AdamState::new(&config(lr));
        let mut p = Tensor::scalar(0.0);
        step_one(&mut s, &mut p, g);
        assert!((p.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = AdamState::new(&config(0.1));
        let mut p = Tensor::scalar(0.0);
        let err = s
            .step(&mut [(String::from("enc.0.w"), &mut p)], &BTreeMap::new())
            .unwrap_err();
        assert!(matches!(&err, Error::Contract(m) if m.contains("enc.0.w")));
        assert_eq!(s.t(), 0);
    }

    #[test]
    fn deterministic_over_many_steps() {
        let run = || {
            let mut s = AdamState::new(&config(0.01));
            let mut p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
            for k in 0..100 {
                let mut grads = BTreeMap::new();
                let g = Tensor::new(vec![2], vec![math::sqrt(k as f64) - 3.0, 0.1 * k as f64]).unwrap();
                grads.insert(String::from("w"), g);
                s.step(&mut [(String::from("w"), &mut p)], &grads).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert_eq!(a.data()[1].to_bits(), b.data()[1].to_bits());
    }

    #[test]
    fn restore_round_trips() {
        let mut s = AdamState::new(&config(0.1));
        let mut p = Tensor::scalar(1.0);
        step_one(&mut s, &mut p, 0.5);
        let r = AdamState::restore(
            &config(0.1),
            s.t(),
            s.first_moments().clone(),
            s.second_moments().clone(),
        )
        .unwrap();
        assert_eq!(r, s);
    }
}
