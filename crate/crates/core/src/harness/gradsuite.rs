//! Central-difference checks of every differentiable operation, run in
//! 64-bit on small random tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gating::{cir, cosine_similarity_batched, gate_logit, gumbel_sample, relaxed_gate, Controller, GateConfig};
use crate::losses::{consistency_loss, flops_loss, mean_gate};
use crate::model::{GateOverride, GatedBlock};
use crate::nn::{
    batch_norm_eval, batch_norm_train, conv2d, cross_entropy, global_average_pool, linear, ParamStore,
};
use crate::tensor::{finite_difference_check, GradCheckReport, Tape, Tensor, Var};

pub const SUITE_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.passed(SUITE_TOLERANCE)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// `Σ w ⊙ y` with fixed random weights, so every output element matters.
fn weighted(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(t.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    Ok(t.sum_all(p))
}

struct Suite {
    cases: Vec<GradCase>,
    rng: ChaCha8Rng,
}

impl Suite {
    fn check(
        &mut self,
        name: &'static str,
        x: &Tensor<f64>,
        f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    ) -> Result<()> {
        let report = finite_difference_check(f, x, STEP)?;
        self.cases.push(GradCase { name, report });
        Ok(())
    }

    fn rand(&mut self, shape: &[usize]) -> Tensor<f64> {
        random(shape, &mut self.rng)
    }
}

/// Runs every case; the caller decides pass/fail via [`GradCase::passed`].
pub fn run_gradient_suite() -> Result<Vec<GradCase>> {
    let mut s = Suite {
        cases: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(20),
    };

    // convolution
    let x = s.rand(&[2, 3, 5, 5]);
    let w = s.rand(&[4, 3, 3, 3]);
    let b = s.rand(&[4]);
    for (name, stride, pad) in [("conv2d input (stride 1, pad 1)", 1, 1), ("conv2d input (stride 2, pad 1)", 2, 1)] {
        let (wc, bc) = (w.clone(), b.clone());
        s.check(name, &x, move |t, xv| {
            let (wv, bv) = (t.constant(wc.clone()), t.constant(bc.clone()));
            let y = conv2d(t, xv, wv, Some(bv), stride, pad)?;
            weighted(t, y, 1)
        })?;
    }
    let (xc, bc) = (x.clone(), b.clone());
    s.check("conv2d weight", &w, move |t, wv| {
        let (xv, bv) = (t.constant(xc.clone()), t.constant(bc.clone()));
        let y = conv2d(t, xv, wv, Some(bv), 1, 0)?;
        weighted(t, y, 2)
    })?;
    let (xc, wc) = (x.clone(), w.clone());
    s.check("conv2d bias", &b, move |t, bv| {
        let (xv, wv) = (t.constant(xc.clone()), t.constant(wc.clone()));
        let y = conv2d(t, xv, wv, Some(bv), 1, 1)?;
        weighted(t, y, 3)
    })?;

    // batch normalization
    let x = s.rand(&[2, 4, 5, 5]);
    let gamma = s.rand(&[4]);
    let beta = s.rand(&[4]);
    let (gc, bc) = (gamma.clone(), beta.clone());
    s.check("batch_norm train input", &x, move |t, xv| {
        let (g, b) = (t.constant(gc.clone()), t.constant(bc.clone()));
        let (y, _, _) = batch_norm_train(t, xv, g, b, 1e-5)?;
        weighted(t, y, 4)
    })?;
    let (xc, bc) = (x.clone(), beta.clone());
    s.check("batch_norm train gamma", &gamma, move |t, g| {
        let (xv, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
        let (y, _, _) = batch_norm_train(t, xv, g, b, 1e-5)?;
        weighted(t, y, 5)
    })?;
    let (xc, gc) = (x.clone(), gamma.clone());
    s.check("batch_norm train beta", &beta, move |t, b| {
        let (xv, g) = (t.constant(xc.clone()), t.constant(gc.clone()));
        let (y, _, _) = batch_norm_train(t, xv, g, b, 1e-5)?;
        weighted(t, y, 6)
    })?;
    let (gc, bc) = (gamma.clone(), beta.clone());
    s.check("batch_norm eval input", &x, move |t, xv| {
        let (g, b) = (t.constant(gc.clone()), t.constant(bc.clone()));
        let y = batch_norm_eval(t, xv, g, b, &[0.1, -0.2, 0.3, 0.0], &[1.0, 0.5, 2.0, 1.5], 1e-5)?;
        weighted(t, y, 7)
    })?;

    // linear and pooling
    let x = s.rand(&[2, 4]);
    let w = s.rand(&[3, 4]);
    let b = s.rand(&[3]);
    let (wc, bc) = (w.clone(), b.clone());
    s.check("linear input", &x, move |t, xv| {
        let (wv, bv) = (t.constant(wc.clone()), t.constant(bc.clone()));
        let y = linear(t, xv, wv, bv)?;
        weighted(t, y, 8)
    })?;
    let (xc, bc) = (x.clone(), b.clone());
    s.check("linear weight", &w, move |t, wv| {
        let (xv, bv) = (t.constant(xc.clone()), t.constant(bc.clone()));
        let y = linear(t, xv, wv, bv)?;
        weighted(t, y, 9)
    })?;
    let (xc, wc) = (x.clone(), w.clone());
    s.check("linear bias", &b, move |t, bv| {
        let (xv, wv) = (t.constant(xc.clone()), t.constant(wc.clone()));
        let y = linear(t, xv, wv, bv)?;
        weighted(t, y, 10)
    })?;
    let x = s.rand(&[2, 4, 5, 5]);
    s.check("global average pool", &x, |t, xv| {
        let y = global_average_pool(t, xv)?;
        weighted(t, y, 11)
    })?;

    // cosine, CIR
    let x = s.rand(&[2, 4, 5, 5]);
    let r = s.rand(&[2, 4, 5, 5]);
    let rc = r.clone();
    s.check("cosine similarity x", &x, move |t, xv| {
        let rv = t.constant(rc.clone());
        let y = cosine_similarity_batched(t, xv, rv, 1e-8)?;
        weighted(t, y, 12)
    })?;
    let xc = x.clone();
    s.check("cosine similarity r", &r, move |t, rv| {
        let xv = t.constant(xc.clone());
        let y = cosine_similarity_batched(t, xv, rv, 1e-8)?;
        weighted(t, y, 13)
    })?;
    let rc = r.clone();
    s.check("cir x", &x, move |t, xv| {
        let rv = t.constant(rc.clone());
        let y = cir(t, xv, rv, 1e-8)?;
        weighted(t, y, 14)
    })?;
    let xc = x.clone();
    s.check("cir r", &r, move |t, rv| {
        let xv = t.constant(xc.clone());
        let y = cir(t, xv, rv, 1e-8)?;
        weighted(t, y, 15)
    })?;

    // controller
    let mut store = ParamStore::<f64>::new();
    let ctrl = Controller::new(&mut store, "ctrl", 4, &mut ChaCha8Rng::seed_from_u64(21));
    let st = store.clone();
    let c2 = ctrl.clone();
    s.check("controller input", &x, move |t, xv| {
        let y = c2.forward(&st, t, xv)?;
        weighted(t, y, 16)
    })?;
    let w1 = store.value(ctrl.w1.weight).clone();
    let (st, c2, xc) = (store.clone(), ctrl.clone(), x.clone());
    s.check("controller first layer", &w1, move |t, w1v| {
        let xv = t.constant(xc.clone());
        let pooled = global_average_pool(t, xv)?;
        let b1 = t.constant(st.value(c2.w1.bias).clone());
        let h = linear(t, pooled, w1v, b1)?;
        let h = t.relu(h);
        let y = c2.w2.forward(&st, t, h)?;
        weighted(t, y, 17)
    })?;

    // gate logit and relaxed gate with frozen noise
    let logits = s.rand(&[2]);
    let noise = gumbel_sample(&[2, 2], &mut ChaCha8Rng::seed_from_u64(22));
    let nc = noise.clone();
    s.check("relaxed gate (frozen noise)", &logits, move |t, l| {
        let z = relaxed_gate(t, l, &nc, 0.7)?;
        weighted(t, z, 18)
    })?;
    let cir_v = Tensor::from_f64([2], &[0.4, 1.3])?;
    let ctrl_v = Tensor::from_f64([2], &[-0.2, 0.5])?;
    s.check("gate logit gamma", &Tensor::from_f64([1], &[-2.5])?, move |t, g| {
        let (c, k) = (t.constant(cir_v.clone()), t.constant(ctrl_v.clone()));
        let l = gate_logit(t, c, k, g)?;
        weighted(t, l, 19)
    })?;

    // mean(z) through CIR, controller and the relaxed gate
    let (st, c2, rc) = (store.clone(), ctrl.clone(), r.clone());
    let nc = noise.clone();
    s.check("mean gate wrt block input", &x, move |t, xv| {
        let rv = t.constant(rc.clone());
        let z = composed_gate(t, &st, &c2, xv, rv, &nc)?;
        Ok(t.mean_all(z))
    })?;
    let (st, c2, xc) = (store.clone(), ctrl.clone(), x.clone());
    s.check("mean gate wrt residual", &r, move |t, rv| {
        let xv = t.constant(xc.clone());
        let z = composed_gate(t, &st, &c2, xv, rv, &noise)?;
        Ok(t.mean_all(z))
    })?;

    // a whole gated block in training mode, with a reseeded noise stream
    let mut bstore = ParamStore::<f64>::new();
    let gate = GateConfig::default();
    let block = GatedBlock::new(&mut bstore, "block0", 4, 4, 1, &gate, &mut ChaCha8Rng::seed_from_u64(23))?;
    s.check("gated block output", &x, move |t, xv| {
        let mut store = bstore.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let out = block.forward_train(&mut store, t, xv, &gate, 1.0, GateOverride::Sampled, &mut rng)?;
        weighted(t, out.out, 25)
    })?;

    // losses
    let logits = s.rand(&[3, 5]);
    s.check("cross entropy", &logits, |t, l| cross_entropy(t, l, &[0, 4, 2]))?;
    let full = s.rand(&[2, 4, 5, 5]);
    let gated = s.rand(&[2, 4, 5, 5]);
    let fc = full.clone();
    s.check("consistency gated", &gated, move |t, g| {
        let f = t.constant(fc.clone());
        consistency_loss(t, &[f], &[g], 1e-8)
    })?;
    s.check("consistency full", &full, move |t, f| {
        let g = t.constant(gated.clone());
        consistency_loss(t, &[f], &[g], 1e-8)
    })?;
    s.check("flops above target", &Tensor::scalar(0.82), |t, g| flops_loss(t, g, 0.6, 0.5))?;
    s.check("flops below target", &Tensor::scalar(0.41), |t, g| flops_loss(t, g, 0.6, 1.0))?;
    let z = Tensor::from_f64([3], &[0.2, 0.7, 0.9])?;
    s.check("mean gate and flops", &z, |t, zv| {
        let d = crate::gating::GateDecision {
            relaxed_var: Some(zv),
            ..Default::default()
        };
        let g = mean_gate(t, &[d])?;
        flops_loss(t, g, 0.3, 1.0)
    })?;

    Ok(s.cases)
}

fn composed_gate(
    t: &mut Tape<f64>,
    store: &ParamStore<f64>,
    ctrl: &Controller,
    x: Var,
    r: Var,
    noise: &Tensor<f64>,
) -> Result<Var> {
    let c = cir(t, x, r, 1e-8)?;
    let k = ctrl.forward(store, t, x)?;
    let g = t.constant(Tensor::full([1], -2.5));
    let l = gate_logit(t, c, k, g)?;
    relaxed_gate(t, l, noise, 1.0)
}
