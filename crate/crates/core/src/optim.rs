//! SGD with classic momentum, L2 weight decay and a cosine learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor};

/// `lr₀ · ½(1 + cos(π·epoch/total))`.
pub fn cosine_anneal_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    let frac = epoch.min(total_epochs) as f64 / total_epochs as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One momentum update: `v ← μv + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_update<T: Scalar>(p: &mut Tensor<T>, v: &mut Tensor<T>, g: &Tensor<T>, lr: f64, momentum: f64, wd: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(wd));
    for ((p, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *v = mu * *v + (g + wd * *p);
        *p = *p - lr * *v;
    }
}

#[derive(Clone, Debug)]
pub struct SgdState<T: Scalar = f32> {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
    pub lr: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(lr0: f64, momentum: f64, weight_decay: f64, total_epochs: usize) -> Result<Self> {
        if !(lr0 > 0.0) || !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid SGD settings lr={lr0} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(SgdState {
            lr0,
            momentum,
            weight_decay,
            total_epochs,
            lr: lr0,
            velocity: Vec::new(),
        })
    }

    /// Moves the schedule to the start of `epoch`.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = cosine_anneal_lr(epoch, self.total_epochs, self.lr0);
    }

    pub fn velocity(&self, index: usize) -> Option<&Tensor<T>> {
        self.velocity.get(index).and_then(Option::as_ref)
    }

    /// Updates every learnable parameter from the gradients on `tape`.
    /// A learnable parameter without a gradient is an error.
    pub fn step(&mut self, store: &mut ParamStore<T>, tape: &Tape<T>) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        // check everything first so a failure leaves the model untouched
        let mut grads = Vec::new();
        for (id, p) in store.iter() {
            if !p.kind.learnable() {
                continue;
            }
            let g = tape
                .bound(id.index())
                .and_then(|v| tape.grad(v))
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            grads.push((id, g));
        }
        for (id, g) in grads {
            let p = store.get_mut(id);
            let wd = if p.kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            sgd_update(&mut p.value, v, g, self.lr, self.momentum, wd);
        }
        Ok(())
    }

    /// Like [`SgdState::step`] but silently skips parameters without a
    /// gradient (used when gates are pinned and their parameters are
    /// disconnected). Returns the number of tensors updated.
    pub fn step_available(&mut self, store: &mut ParamStore<T>, tape: &Tape<T>) -> usize {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mut updated = 0;
        for (id, p) in store.iter_mut() {
            let Some(g) = tape.bound(id.index()).and_then(|v| tape.grad(v)) else {
                continue;
            };
            if !p.kind.learnable() {
                continue;
            }
            let wd = if p.kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            sgd_update(&mut p.value, v, g, self.lr, self.momentum, wd);
            updated += 1;
        }
        updated
    }
}

/// Free-function form of [`SgdState::step`].
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, tape: &Tape<T>, state: &mut SgdState<T>) -> Result<()> {
    state.step(store, tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_step(p: f64, v: f64, g: f64, lr: f64, mu: f64, wd: f64) -> (f64, f64) {
        let mut pt = Tensor::scalar(p);
        let mut vt = Tensor::scalar(v);
        sgd_update(&mut pt, &mut vt, &Tensor::scalar(g), lr, mu, wd);
        (pt.item(), vt.item())
    }

    #[test]
    fn update_examples() {
        assert_eq!(scalar_step(2.0, 0.0, 0.5, 0.1, 0.0, 0.0).0, 2.0 - 0.05);
        assert_eq!(scalar_step(2.0, 0.0, 0.0, 0.1, 0.9, 0.0).0, 2.0);
        let (p, v) = scalar_step(1.0, 0.0, 1.0, 0.1, 0.9, 0.0);
        assert!((p - 0.9).abs() < 1e-12);
        let (p, v) = scalar_step(p, v, 1.0, 0.1, 0.9, 0.0);
        assert!((v - 1.9).abs() < 1e-12);
        assert!((p - 0.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_folds_into_gradient() {
        let (p, v) = scalar_step(2.0, 0.0, 0.0, 0.5, 0.0, 0.1);
        assert!((v - 0.2).abs() < 1e-12);
        assert!((p - 1.9).abs() < 1e-12);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(cosine_anneal_lr(0, 10, 0.1), 0.1);
        assert!(cosine_anneal_lr(10, 10, 0.1).abs() < 1e-15);
        assert!((cosine_anneal_lr(5, 10, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn gradient_descent_on_quadratic_follows_closed_form() {
        // f(p) = ½ a p², p_k = (1 - lr·a)^k p_0 with μ = wd = 0
        let (a, lr, p0) = (3.0, 0.1, 2.0);
        let mut p = Tensor::scalar(p0);
        let mut v = Tensor::scalar(0.0);
        for k in 1..=20 {
            let g = Tensor::scalar(a * p.item());
            sgd_update(&mut p, &mut v, &g, lr, 0.0, 0.0);
            assert!((p.item() - (1.0 - lr * a).powi(k) * p0).abs() < 1e-12);
        }
    }

    #[test]
    fn step_requires_gradients_and_skips_buffers() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64([2], &[1.0, -1.0]).unwrap(), ParamKind::Weight);
        let b = store.add("b", Tensor::scalar(0.5), ParamKind::NoDecay);
        let r = store.add("r", Tensor::from_f64([1], &[7.0]).unwrap(), ParamKind::Buffer);
        let mut opt = SgdState::new(0.1, 0.9, 0.5, 10).unwrap();

        let mut tape = Tape::new();
        let wv = store.bind(&mut tape, w);
        let l = tape.sum_all(wv);
        tape.backward(l).unwrap();
        let err = opt.step(&mut store, &tape).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "b"));
        assert_eq!(store.value(w).data(), &[1.0, -1.0]);

        let mut tape = Tape::new();
        let wv = store.bind(&mut tape, w);
        let bv = store.bind(&mut tape, b);
        let s = tape.sum_all(wv);
        let l = tape.add(s, bv).unwrap();
        tape.backward(l).unwrap();
        opt.step(&mut store, &tape).unwrap();
        // w: v = 1 + 0.5·p; b: no decay
        assert!((store.value(w).data()[0] - (1.0 - 0.1 * 1.5)).abs() < 1e-12);
        assert!((store.value(w).data()[1] - (-1.0 - 0.1 * 0.5)).abs() < 1e-12);
        assert!((store.value(b).item() - 0.4).abs() < 1e-12);
        assert_eq!(store.value(r).item(), 7.0);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(SgdState::<f32>::new(0.0, 0.9, 0.0, 1).is_err());
        assert!(SgdState::<f32>::new(0.1, 1.0, 0.0, 1).is_err());
        assert!(SgdState::<f32>::new(0.1, 0.9, -1.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn lr_is_non_increasing(total in 1usize..300, lr0 in 1e-4f64..1.0) {
            let mut prev = f64::INFINITY;
            for e in 0..=total {
                let lr = cosine_anneal_lr(e, total, lr0);
                prop_assert!(lr <= prev && lr >= 0.0 && lr <= lr0);
                prev = lr;
            }
        }
    }
}
