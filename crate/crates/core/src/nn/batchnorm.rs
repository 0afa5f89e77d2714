use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_input<T: Scalar>(tape: &Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
    let xs = tape.shape(x);
    if xs.len() < 2 {
        return Err(Error::shape("batchnorm2d", xs, tape.shape(gamma)));
    }
    let c = xs[1];
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::shape("batchnorm2d", xs, tape.shape(gamma)));
    }
    let spatial: usize = xs[2..].iter().product();
    Ok((xs[0], c, spatial))
}

/// Per-channel batch statistics (mean, biased variance) of `[B, C, ...]` data.
fn channel_stats<T: Scalar>(x: &[T], batch: usize, c: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
    let m = T::of((batch * spatial) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..batch {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
            mean[ch] = mean[ch] + plane.iter().copied().sum();
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    for b in 0..batch {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
            let mu = mean[ch];
            var[ch] = var[ch] + plane.iter().map(|&v| (v - mu) * (v - mu)).sum();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    (mean, var)
}

/// Train-mode batch normalization over axis 1. Returns the output and the
/// batch `(mean, biased variance)` per channel.
pub fn batch_norm_train<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, Vec<T>, Vec<T>)> {
    let (batch, c, spatial) = check_input(tape, x, gamma, beta)?;
    let xv = tape.value(x).data();
    let (mean, var) = channel_stats(xv, batch, c, spatial);
    let eps_t = T::of(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let gv = tape.value(gamma).data();
    let bv = tape.value(beta).data();

    let mut xhat = vec![T::zero(); xv.len()];
    let mut out = vec![T::zero(); xv.len()];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for s in 0..spatial {
                let h = (xv[base + s] - mean[ch]) * inv_std[ch];
                xhat[base + s] = h;
                out[base + s] = gv[ch] * h + bv[ch];
            }
        }
    }
    let shape = tape.shape(x).to_vec();
    let value = Tensor::new(shape.clone(), out)?;
    let m = T::of((batch * spatial) as f64);
    let inv_std_c = inv_std.clone();
    let y = tape.record(value, &[x, gamma, beta], move |ctx| {
        let g = ctx.grad.data();
        let gamma = ctx.inputs[1].data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    dbeta[ch] = dbeta[ch] + g[base + s];
                    dgamma[ch] = dgamma[ch] + g[base + s] * xhat[base + s];
                }
            }
        }
        let mut dx = vec![T::zero(); g.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                let k = gamma[ch] * inv_std_c[ch];
                let mean_g = dbeta[ch] / m;
                let mean_gx = dgamma[ch] / m;
                for s in 0..spatial {
                    dx[base + s] = k * (g[base + s] - mean_g - xhat[base + s] * mean_gx);
                }
            }
        }
        vec![
            Some(Tensor::new(shape.clone(), dx).expect("input shape")),
            Some(Tensor::new([c], dgamma).expect("channel shape")),
            Some(Tensor::new([c], dbeta).expect("channel shape")),
        ]
    });
    Ok((y, mean, var))
}

/// Eval-mode batch normalization with fixed running statistics.
pub fn batch_norm_eval<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Var> {
    let (batch, c, spatial) = check_input(tape, x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batchnorm2d running stats", &[c], &[running_mean.len()]));
    }
    let eps_t = T::of(eps);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mean = running_mean.to_vec();
    let xv = tape.value(x).data();
    let gv = tape.value(gamma).data();
    let bv = tape.value(beta).data();
    let mut out = vec![T::zero(); xv.len()];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for s in 0..spatial {
                out[base + s] = gv[ch] * (xv[base + s] - mean[ch]) * inv_std[ch] + bv[ch];
            }
        }
    }
    let shape = tape.shape(x).to_vec();
    let value = Tensor::new(shape.clone(), out)?;
    Ok(tape.record(value, &[x, gamma, beta], move |ctx| {
        let (g, xv, gamma) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.inputs[1].data());
        let mut dx = vec![T::zero(); g.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    let gi = g[base + s];
                    dx[base + s] = gi * gamma[ch] * inv_std[ch];
                    dgamma[ch] = dgamma[ch] + gi * (xv[base + s] - mean[ch]) * inv_std[ch];
                    dbeta[ch] = dbeta[ch] + gi;
                }
            }
        }
        vec![
            Some(Tensor::new(shape.clone(), dx).expect("input shape")),
            Some(Tensor::new([c], dgamma).expect("channel shape")),
            Some(Tensor::new([c], dbeta).expect("channel shape")),
        ]
    }))
}

/// Batch normalization over the channel axis with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), ParamKind::NoDecay),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), ParamKind::NoDecay),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones([channels]), ParamKind::Buffer),
            channels,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    /// Normalizes with batch statistics and folds them into the running
    /// averages (unbiased variance, as is conventional).
    pub fn forward_train<T: Scalar>(&self, store: &mut ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let gamma = store.bind(tape, self.gamma);
        let beta = store.bind(tape, self.beta);
        let (y, mean, var) = batch_norm_train(tape, x, gamma, beta, self.eps)?;
        let xs = tape.shape(x);
        let m = xs[0] * xs[2..].iter().product::<usize>();
        let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
        let mom = T::of(self.momentum);
        let keep = T::one() - mom;
        for (r, &v) in store.get_mut(self.running_mean).value.data_mut().iter_mut().zip(&mean) {
            *r = keep * *r + mom * v;
        }
        for (r, &v) in store.get_mut(self.running_var).value.data_mut().iter_mut().zip(&var) {
            *r = keep * *r + mom * v * T::of(unbias);
        }
        Ok(y)
    }

    pub fn forward_eval<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let gamma = store.bind(tape, self.gamma);
        let beta = store.bind(tape, self.beta);
        batch_norm_eval(
            tape,
            x,
            gamma,
            beta,
            store.value(self.running_mean).data(),
            store.value(self.running_var).data(),
            self.eps,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_out(x: Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Tensor<f64> {
        let c = gamma.len();
        let mut tape = Tape::inference();
        let x = tape.constant(x);
        let g = tape.constant(Tensor::from_f64([c], gamma).unwrap());
        let b = tape.constant(Tensor::from_f64([c], beta).unwrap());
        let (y, _, _) = batch_norm_train(&mut tape, x, g, b, DEFAULT_EPS).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn standardized_input_is_nearly_unchanged() {
        let x = Tensor::from_f64([4, 1, 1, 1], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = train_out(x.clone(), &[1.0], &[0.0]);
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::<f64>::from_fn([3, 2, 2, 2], |i| i as f64);
        let y = train_out(x, &[0.0, 0.0], &[5.0, 5.0]);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn two_sample_hand_statistics() {
        let x = Tensor::from_f64([2, 1], &[1.0, 3.0]).unwrap();
        let mut tape = Tape::<f64>::inference();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones([1]));
        let b = tape.constant(Tensor::zeros([1]));
        let (y, mean, var) = batch_norm_train(&mut tape, xv, g, b, DEFAULT_EPS).unwrap();
        assert_eq!(mean, vec![2.0]);
        assert_eq!(var, vec![1.0]);
        let expect = 1.0 / (1.0f64 + DEFAULT_EPS).sqrt();
        assert!((tape.value(y).data()[0] + expect).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn single_sample_constant_input_is_guarded() {
        let x = Tensor::from_f64([1, 1, 1, 1], &[4.0]).unwrap();
        let y = train_out(x, &[1.0], &[0.0]);
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let batch = 8;
        let x = Tensor::<f64>::from_fn([batch, 3, 4, 4], |i| ((i * 7919) % 101) as f64 * 0.13 - 4.0);
        let y = train_out(x, &[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0]);
        let (mean, var) = channel_stats(y.data(), batch, 3, 16);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-5);
            assert!((var[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn running_stats_follow_momentum_and_eval_uses_them() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64([2, 1, 1, 1], &[1.0, 3.0]).unwrap());
        bn.forward_train(&mut store, &mut tape, x).unwrap();
        assert!((store.value(bn.running_mean).item() - 0.2).abs() < 1e-12);
        // unbiased var of {1,3} is 2 -> 0.9 * 1 + 0.1 * 2
        assert!((store.value(bn.running_var).item() - 1.1).abs() < 1e-12);

        let before = store.clone();
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_f64([1, 1, 1, 1], &[0.2]).unwrap());
        let y = bn.forward_eval(&store, &mut tape, x).unwrap();
        assert!(tape.value(y).item().abs() < 1e-12);
        assert_eq!(store.value(bn.running_var), before.value(bn.running_var));
    }
}
