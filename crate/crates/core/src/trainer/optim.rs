//! Momentum SGD with decoupled parameter groups and the step learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Element, Tensor};

/// `base · 0.5^h`, where `h` counts the halving epochs `<= epoch`.
pub fn lr_schedule(epoch: u64, base_lr: f64, halving_epochs: &[u64]) -> f64 {
    let h = halving_epochs.iter().filter(|&&e| e <= epoch).count();
    base_lr * 0.5f64.powi(h as i32)
}

/// Classical momentum: `v ← m·v + g + wd·w`, `w ← w − lr·v`, with weight decay only on
/// [`ParamKind::Weight`] parameters.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1) and weight decay be >= 0, got {momentum} and {weight_decay}"
            )));
        }
        Ok(Sgd {
            momentum,
            weight_decay,
            velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("momentum buffers do not match the parameters".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Fails without touching any parameter if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let params = store.params_mut();
        if grads.len() != params.len() {
            return Err(Error::invalid(
                "sgd",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        if !(lr > 0.0) {
            return Err(Error::invalid("sgd", format!("learning rate must be positive, got {lr}")));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("sgd", p.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let (m, lr) = (T::lit(self.momentum), T::lit(lr));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = match p.kind {
                ParamKind::Weight => T::lit(self.weight_decay),
                ParamKind::NoDecay => T::zero(),
            };
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = m * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store(w: f64, kind: ParamKind) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("w".into(), Tensor::scalar(w), kind);
        s
    }

    #[test]
    fn schedule_examples() {
        let h = [60, 70, 80, 90];
        assert_eq!(lr_schedule(0, 0.01, &h), 0.01);
        assert_eq!(lr_schedule(59, 0.01, &h), 0.01);
        assert_eq!(lr_schedule(60, 0.01, &h), 0.005);
        assert_eq!(lr_schedule(65, 0.01, &h), 0.005);
        assert_abs_diff_eq!(lr_schedule(95, 0.01, &h), 0.000625, epsilon = 1e-18);
        assert_eq!(lr_schedule(25, 0.01, &[15, 20, 25]), 0.00125);
    }

    #[test]
    fn plain_step_and_fixed_point() {
        let mut s = store(1.0, ParamKind::Weight);
        let mut opt = Sgd::new(&s, 0.0, 0.0).unwrap();
        opt.step(&mut s, &[Tensor::scalar(0.5)], 0.1).unwrap();
        assert_abs_diff_eq!(s.params()[0].value.item().unwrap(), 0.95, epsilon = 1e-15);

        let mut s = store(0.3, ParamKind::Weight);
        let mut opt = Sgd::new(&s, 0.9, 0.0).unwrap();
        opt.step(&mut s, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(s.params()[0].value.item().unwrap(), 0.3);
    }

    #[test]
    fn momentum_two_steps() {
        let mut s = store(0.0, ParamKind::Weight);
        let mut opt = Sgd::new(&s, 0.9, 0.0).unwrap();
        opt.step(&mut s, &[Tensor::scalar(1.0)], 0.1).unwrap();
        assert_abs_diff_eq!(s.params()[0].value.item().unwrap(), -0.1, epsilon = 1e-15);
        opt.step(&mut s, &[Tensor::scalar(1.0)], 0.1).unwrap();
        assert_abs_diff_eq!(s.params()[0].value.item().unwrap(), -0.29, epsilon = 1e-15);
        assert_abs_diff_eq!(opt.velocity()[0].item().unwrap(), 1.9, epsilon = 1e-15);
    }

    #[test]
    fn decay_respects_groups() {
        let mut s = ParamStore::<f64>::new();
        s.add_param("conv.weight".into(), Tensor::scalar(2.0), ParamKind::Weight);
        s.add_param("bn.gamma".into(), Tensor::scalar(2.0), ParamKind::NoDecay);
        let mut opt = Sgd::new(&s, 0.0, 0.5).unwrap();
        opt.step(&mut s, &[Tensor::scalar(0.0), Tensor::scalar(0.0)], 0.1).unwrap();
        assert_abs_diff_eq!(s.params()[0].value.item().unwrap(), 1.9, epsilon = 1e-15);
        assert_eq!(s.params()[1].value.item().unwrap(), 2.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = ParamStore::<f64>::new();
        s.add_param("a".into(), Tensor::scalar(1.0), ParamKind::Weight);
        s.add_param("pyramid.l1k1.reduce".into(), Tensor::scalar(1.0), ParamKind::Weight);
        let mut opt = Sgd::new(&s, 0.9, 0.0).unwrap();
        let err = opt
            .step(&mut s, &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("pyramid.l1k1.reduce"));
        assert_eq!(s.params()[0].value.item().unwrap(), 1.0);
        assert!(opt.step(&mut s, &[Tensor::scalar(1.0)], 0.1).is_err());
        assert!(Sgd::new(&s, 1.0, 0.0).is_err());
    }
}
