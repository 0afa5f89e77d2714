//! Cosine-incompatibility gating.
//!
//! A block's gate logit is `γ·(CIR + c(x))`, where CIR is one minus the
//! cosine between the (flattened) identity path and the residual, and `c` is
//! a two-layer MLP over pooled features. Training draws a two-class
//! Gumbel-softmax sample over `{identity: 0, residual: ℓ}`; inference
//! thresholds `σ(ℓ)` deterministically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{global_average_pool, Linear, ParamStore};
use crate::tensor::{sigmoid, Scalar, Tape, Tensor, Var};

/// Clamp for uniform draws before the double log.
pub const GUMBEL_U_MIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Initial gate scale γ₀.
    pub gamma0: f64,
    pub learnable_gamma: bool,
    /// Gumbel-softmax temperature τ.
    pub temperature: f64,
    /// When set, τ is annealed linearly to this value over training.
    pub temperature_final: Option<f64>,
    /// Inference threshold δ on `σ(ℓ)`.
    pub threshold: f64,
    /// Norm guard for the cosine.
    pub eps_norm: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            gamma0: -2.5,
            learnable_gamma: true,
            temperature: 1.0,
            temperature_final: None,
            threshold: 0.45,
            eps_norm: 1e-8,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || self.temperature_final.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config(format!("gate temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("gate threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.eps_norm > 0.0) {
            return Err(Error::Config(format!("eps_norm must be > 0, got {}", self.eps_norm)));
        }
        Ok(())
    }

    /// Temperature for `epoch` (0-based) of `total_epochs`.
    pub fn temperature_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        match self.temperature_final {
            None => self.temperature,
            Some(end) => {
                let frac = if total_epochs > 1 {
                    (epoch as f64 / (total_epochs - 1) as f64).min(1.0)
                } else {
                    1.0
                };
                self.temperature + (end - self.temperature) * frac
            }
        }
    }
}

/// Per-sample gate telemetry for one block.
#[derive(Clone, Debug, Default)]
pub struct GateDecision {
    pub cir: Vec<f64>,
    pub controller: Vec<f64>,
    pub logit: Vec<f64>,
    /// Relaxed gate `z`, present for training-mode forwards.
    pub relaxed: Option<Vec<f64>>,
    /// Hard gate `ĝ = [σ(ℓ) > δ]`.
    pub hard: Vec<f64>,
    /// Tape handle of `z` (train mode), used by the FLOPs loss.
    pub relaxed_var: Option<Var>,
}

impl GateDecision {
    /// The gate value that multiplied the residual: `z` in training, `ĝ` otherwise.
    pub fn applied(&self) -> &[f64] {
        self.relaxed.as_deref().unwrap_or(&self.hard)
    }
}

/// Per-sample cosine between flattened `x[b]` and `r[b]`; returns `[B]`.
///
/// When either norm falls below `eps` the similarity is defined as 0 and no
/// gradient flows through that sample.
pub fn cosine_similarity_batched<T: Scalar>(tape: &mut Tape<T>, x: Var, r: Var, eps: f64) -> Result<Var> {
    if tape.shape(x) != tape.shape(r) || tape.shape(x).is_empty() {
        return Err(Error::shape("cosine_similarity_batched", tape.shape(x), tape.shape(r)));
    }
    let batch = tape.shape(x)[0];
    let per = tape.value(x).numel().checked_div(batch).unwrap_or(0);
    let eps_t = T::of(eps);

    // (dot, |u|, |v|) per sample
    let stats: Vec<(T, T, T)> = tape
        .value(x)
        .data()
        .chunks(per.max(1))
        .zip(tape.value(r).data().chunks(per.max(1)))
        .take(batch)
        .map(|(u, v)| {
            let (mut dot, mut uu, mut vv) = (T::zero(), T::zero(), T::zero());
            for (&a, &b) in u.iter().zip(v) {
                dot = dot + a * b;
                uu = uu + a * a;
                vv = vv + b * b;
            }
            (dot, uu.sqrt(), vv.sqrt())
        })
        .collect();
    let guarded = move |nu: T, nv: T| nu < eps_t || nv < eps_t;
    let sims: Vec<T> = stats
        .iter()
        .map(|&(dot, nu, nv)| if guarded(nu, nv) { T::zero() } else { dot / (nu * nv) })
        .collect();
    let value = Tensor::new([batch], sims)?;
    let shape = tape.shape(x).to_vec();
    Ok(tape.record(value, &[x, r], move |ctx| {
        let (u, v, s, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.output.data(), ctx.grad.data());
        let mut du = vec![T::zero(); u.len()];
        let mut dv = vec![T::zero(); v.len()];
        for b in 0..batch {
            let (_, nu, nv) = stats[b];
            if guarded(nu, nv) {
                continue;
            }
            let range = b * per..(b + 1) * per;
            let inv = T::one() / (nu * nv);
            let su = s[b] / (nu * nu);
            let sv = s[b] / (nv * nv);
            for i in range {
                du[i] = g[b] * (v[i] * inv - su * u[i]);
                dv[i] = g[b] * (u[i] * inv - sv * v[i]);
            }
        }
        vec![
            Some(Tensor::new(shape.clone(), du).expect("input shape")),
            Some(Tensor::new(shape.clone(), dv).expect("input shape")),
        ]
    }))
}

/// Cosine incompatibility ratio `1 − cos(x, r)` per sample, in `[0, 2]`.
pub fn cir<T: Scalar>(tape: &mut Tape<T>, x: Var, r: Var, eps: f64) -> Result<Var> {
    let cos = cosine_similarity_batched(tape, x, r, eps)?;
    Ok(tape.affine(cos, -T::one(), T::one()))
}

/// Controller width for a block with `channels` input channels.
pub fn controller_hidden_width(channels: usize) -> usize {
    channels.div_ceil(8).max(1)
}

/// `c(x) = W₂ ReLU(W₁ GAP(x))`, one scalar per sample.
#[derive(Clone, Debug)]
pub struct Controller {
    pub w1: Linear,
    pub w2: Linear,
}

impl Controller {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self::with_hidden(store, name, channels, controller_hidden_width(channels), rng)
    }

    pub fn with_hidden<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Controller {
            w1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            w2: Linear::new(store, &format!("{name}.fc2"), hidden, 1, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.num_params() + self.w2.num_params()
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1] != self.w1.in_features {
            return Err(Error::shape("controller", xs, &[self.w1.out_features, self.w1.in_features]));
        }
        let batch = xs[0];
        let pooled = global_average_pool(tape, x)?;
        let h = self.w1.forward(store, tape, pooled)?;
        let h = tape.relu(h);
        let c = self.w2.forward(store, tape, h)?;
        tape.reshape(c, &[batch])
    }
}

/// Residual-class logit `ℓ = γ·(cir + ctrl)`; the identity-class logit is 0.
pub fn gate_logit<T: Scalar>(tape: &mut Tape<T>, cir: Var, ctrl: Var, gamma: Var) -> Result<Var> {
    let sum = tape.add(cir, ctrl)?;
    tape.scale_by(sum, gamma)
}

/// Standard Gumbel draw from a uniform `u`, clamped to `(u_min, 1 − u_min)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_U_MIN, 1.0 - GUMBEL_U_MIN);
    -(-u.ln()).ln()
}

/// I.i.d. standard Gumbel noise of the given shape.
pub fn gumbel_sample<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(gumbel_from_uniform(rng.random::<f64>())))
}

/// Residual coordinate of `softmax([g₀, ℓ + g₁] / τ)`, computed as a
/// two-class softmax.
pub fn two_class_softmax_residual(logit: f64, g0: f64, g1: f64, tau: f64) -> f64 {
    let a = g0 / tau;
    let b = (logit + g1) / tau;
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    eb / (ea + eb)
}

/// The same quantity through the sigmoid identity `σ((ℓ + g₁ − g₀)/τ)`.
pub fn relaxed_gate_sigmoid(logit: f64, g0: f64, g1: f64, tau: f64) -> f64 {
    sigmoid((logit + g1 - g0) / tau)
}

/// Gumbel-softmax relaxed gate `z[B]` from logits `[B]` and noise `[B, 2]`
/// (column 0 for the identity class, column 1 for the residual class).
pub fn relaxed_gate<T: Scalar>(tape: &mut Tape<T>, logit: Var, noise: &Tensor<T>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let batch = tape.shape(logit).first().copied().unwrap_or(0);
    if tape.shape(logit).len() != 1 || noise.shape() != [batch, 2] {
        return Err(Error::shape("relaxed_gate", tape.shape(logit), noise.shape()));
    }
    let z: Vec<T> = tape
        .value(logit)
        .data()
        .iter()
        .zip(noise.data().chunks(2))
        .map(|(&l, g)| T::of(two_class_softmax_residual(l.f64(), g[0].f64(), g[1].f64(), tau)))
        .collect();
    let value = Tensor::new([batch], z)?;
    let inv_tau = T::of(1.0 / tau);
    Ok(tape.record(value, &[logit], move |ctx| {
        let d = ctx
            .output
            .data()
            .iter()
            .zip(ctx.grad.data())
            .map(|(&z, &g)| g * z * (T::one() - z) * inv_tau)
            .collect();
        vec![Some(Tensor::new([batch], d).expect("batch shape"))]
    }))
}

/// `[p > δ]` with a strict inequality.
pub fn hard_gate_from_prob(p: f64, delta: f64) -> bool {
    p > delta
}

/// Deterministic inference gate: 1 where `σ(ℓ) > δ`, else 0.
pub fn hard_gate<T: Scalar>(logit: &Tensor<T>, delta: f64) -> Tensor<T> {
    logit.map(|l| {
        if hard_gate_from_prob(sigmoid(l.f64()), delta) {
            T::one()
        } else {
            T::zero()
        }
    })
}
