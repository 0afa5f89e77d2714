//! Training objective: cross-entropy, representation consistency and the
//! hinged compute penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateDecision;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Scalar components of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cons: f64,
    pub flops: f64,
    pub total: f64,
    pub mean_gate: f64,
    pub prog: f64,
}

impl LossBreakdown {
    pub fn skip_pct(&self) -> f64 {
        skip_pct(self.mean_gate)
    }
}

/// Percentage of skipped residual computation for a mean gate activation.
pub fn skip_pct(mean_gate: f64) -> f64 {
    (1.0 - mean_gate) * 100.0
}

/// Scales each sample of `x[B, ...]` to unit ℓ₂ norm, dividing by
/// `max(‖x_b‖, eps)`.
pub fn l2_normalize_samples<T: Scalar>(tape: &mut Tape<T>, x: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let batch = *shape.first().ok_or_else(|| Error::shape("l2_normalize_samples", &shape, &[]))?;
    let per = tape.value(x).numel().checked_div(batch).unwrap_or(0).max(1);
    let eps = T::of(eps);
    let denoms: Vec<T> = tape
        .value(x)
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
        .collect();
    let mut value = tape.value(x).clone();
    for (c, &d) in value.data_mut().chunks_mut(per).zip(&denoms) {
        c.iter_mut().for_each(|v| *v = *v / d);
    }
    Ok(tape.record(value, &[x], move |ctx| {
        let mut dx = ctx.grad.clone();
        for ((dc, nc), &d) in dx.data_mut().chunks_mut(per).zip(ctx.output.data().chunks(per)).zip(&denoms) {
            if d > eps {
                // (I - n nᵀ) g / ‖x‖
                let dot: T = dc.iter().zip(nc).map(|(&g, &n)| g * n).sum();
                for (g, &n) in dc.iter_mut().zip(nc) {
                    *g = (*g - n * dot) / d;
                }
            } else {
                dc.iter_mut().for_each(|g| *g = *g / d);
            }
        }
        vec![Some(dx)]
    }))
}

/// `Σ_blocks mean_b ‖Norm(full_b) − Norm(gated_b)‖²`.
pub fn consistency_loss<T: Scalar>(tape: &mut Tape<T>, full: &[Var], gated: &[Var], eps: f64) -> Result<Var> {
    if full.len() != gated.len() {
        return Err(Error::Config(format!(
            "consistency loss needs paired outputs, got {} full and {} gated",
            full.len(),
            gated.len()
        )));
    }
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for (&f, &g) in full.iter().zip(gated) {
        if tape.shape(f) != tape.shape(g) {
            return Err(Error::shape("consistency_loss", tape.shape(f), tape.shape(g)));
        }
        let batch = tape.shape(f)[0].max(1);
        let nf = l2_normalize_samples(tape, f, eps)?;
        let ng = l2_normalize_samples(tape, g, eps)?;
        let d = tape.sub(nf, ng)?;
        let sq = tape.square(d);
        let s = tape.sum_all(sq);
        let block = tape.affine(s, T::of(1.0 / batch as f64), T::zero());
        total = tape.add(total, block)?;
    }
    Ok(total)
}

/// Mean relaxed gate `ḡ` over all blocks and samples (differentiable).
pub fn mean_gate<T: Scalar>(tape: &mut Tape<T>, decisions: &[GateDecision]) -> Result<Var> {
    if decisions.is_empty() {
        return Err(Error::Config("mean gate over an empty block list".into()));
    }
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for d in decisions {
        let z = d
            .relaxed_var
            .ok_or_else(|| Error::Config("mean gate needs training-mode decisions".into()))?;
        count += tape.value(z).numel();
        let s = tape.sum_all(z);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let sum = acc.expect("nonempty");
    Ok(tape.affine(sum, T::of(1.0 / count.max(1) as f64), T::zero()))
}

/// Mean of the applied gate values (relaxed in training, hard otherwise).
pub fn mean_gate_value(decisions: &[GateDecision]) -> f64 {
    let (sum, n) = decisions.iter().fold((0.0, 0usize), |(s, n), d| {
        let v = d.applied();
        (s + v.iter().sum::<f64>(), n + v.len())
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Warmup ramp `min(1, t / warmup)` on completed epochs; no warmup means 1.
pub fn prog_schedule(t: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (t as f64 / warmup as f64).min(1.0)
    }
}

/// `prog · max(0, ḡ − τ_target)²`.
pub fn flops_loss<T: Scalar>(tape: &mut Tape<T>, g_bar: Var, tau_target: f64, prog: f64) -> Result<Var> {
    if !(tau_target > 0.0 && tau_target <= 1.0) {
        return Err(Error::Config(format!("tau_target must lie in (0, 1], got {tau_target}")));
    }
    if !(0.0..=1.0).contains(&prog) {
        return Err(Error::Config(format!("prog must lie in [0, 1], got {prog}")));
    }
    if tape.value(g_bar).numel() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(g_bar).to_vec()));
    }
    let (target, p) = (T::of(tau_target), T::of(prog));
    let excess = (tape.value(g_bar).item() - target).max(T::zero());
    let value = Tensor::full(tape.shape(g_bar).to_vec(), p * excess * excess);
    let two = T::of(2.0);
    Ok(tape.record(value, &[g_bar], move |ctx| {
        let excess = (ctx.inputs[0].item() - target).max(T::zero());
        vec![Some(ctx.grad.map(|g| g * two * p * excess))]
    }))
}

/// `ce + λ_cons·cons + λ_flops·flops`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    ce: Var,
    cons: Var,
    flops: Var,
    lambda_cons: f64,
    lambda_flops: f64,
) -> Result<Var> {
    let c = tape.affine(cons, T::of(lambda_cons), T::zero());
    let f = tape.affine(flops, T::of(lambda_flops), T::zero());
    let s = tape.add(ce, c)?;
    tape.add(s, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::relaxed_gate;
    use crate::tensor::finite_difference_check;
    use proptest::prelude::*;

    fn cons_value(full: Tensor<f64>, gated: Tensor<f64>) -> f64 {
        let mut tape = Tape::inference();
        let f = tape.constant(full);
        let g = tape.constant(gated);
        let l = consistency_loss(&mut tape, &[f], &[g], 1e-8).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn consistency_examples() {
        let a = Tensor::<f64>::from_fn([3, 2, 2, 2], |i| (i as f64 * 0.37).sin());
        assert!(cons_value(a.clone(), a.clone()).abs() < 1e-15);
        assert!(cons_value(a.clone(), a.map(|v| 2.0 * v)).abs() < 1e-14);
        let e1 = Tensor::from_f64([1, 3], &[1.0, 0.0, 0.0]).unwrap();
        let e2 = Tensor::from_f64([1, 3], &[0.0, 1.0, 0.0]).unwrap();
        assert!((cons_value(e1, e2) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn consistency_sums_blocks_and_averages_batch() {
        let e1 = Tensor::from_f64([2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let e2 = Tensor::from_f64([2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::<f64>::inference();
        let a = tape.constant(e1);
        let b = tape.constant(e2);
        let l = consistency_loss(&mut tape, &[a, a], &[b, b], 1e-8).unwrap();
        // one of two samples differs by 2 -> 1 per block, two blocks
        assert!((tape.value(l).item() - 2.0).abs() < 1e-15);
        assert!(consistency_loss(&mut tape, &[a], &[a, b], 1e-8).is_err());
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let full = Tensor::<f64>::from_fn([2, 4, 5, 5], |i| ((i * 7) % 19) as f64 * 0.1 - 0.9);
        let gated = Tensor::<f64>::from_fn([2, 4, 5, 5], |i| ((i * 11) % 23) as f64 * 0.1 - 1.1);
        let fc = full.clone();
        let rep = finite_difference_check(
            move |t, g| {
                let f = t.constant(fc.clone());
                consistency_loss(t, &[f], &[g], 1e-8)
            },
            &gated,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(1e-5), "{rep:?}");
        let rep = finite_difference_check(
            move |t, f| {
                let g = t.constant(gated.clone());
                consistency_loss(t, &[f], &[g], 1e-8)
            },
            &full,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(1e-5), "{rep:?}");
    }

    fn decisions(tape: &mut Tape<f64>, blocks: &[&[f64]]) -> Vec<GateDecision> {
        blocks
            .iter()
            .map(|z| {
                let v = tape.leaf(Tensor::from_f64([z.len()], z).unwrap(), true);
                GateDecision {
                    relaxed: Some(z.to_vec()),
                    relaxed_var: Some(v),
                    ..GateDecision::default()
                }
            })
            .collect()
    }

    #[test]
    fn mean_gate_examples() {
        let mut tape = Tape::new();
        let d = decisions(&mut tape, &[&[1.0, 1.0], &[1.0, 1.0]]);
        let g = mean_gate(&mut tape, &d).unwrap();
        assert_eq!(tape.value(g).item(), 1.0);

        let d = decisions(&mut tape, &[&[0.0], &[1.0]]);
        let g = mean_gate(&mut tape, &d).unwrap();
        assert_eq!(tape.value(g).item(), 0.5);
        assert_eq!(mean_gate_value(&d), 0.5);

        assert!(mean_gate(&mut tape, &[]).is_err());
        assert!(mean_gate(&mut tape, &[GateDecision::default()]).is_err());
        assert!((skip_pct(0.715) - 28.5).abs() < 1e-9);
    }

    #[test]
    fn prog_examples() {
        assert_eq!(prog_schedule(20, 40), 0.5);
        assert_eq!(prog_schedule(0, 40), 0.0);
        assert_eq!(prog_schedule(400, 40), 1.0);
    }

    fn flops_at(g: f64, target: f64, prog: f64) -> (f64, f64) {
        let mut tape = Tape::<f64>::new();
        let gv = tape.leaf(Tensor::scalar(g), true);
        let l = flops_loss(&mut tape, gv, target, prog).unwrap();
        let v = tape.value(l).item();
        tape.backward(l).unwrap();
        (v, tape.grad(gv).unwrap().item())
    }

    #[test]
    fn flops_examples() {
        assert_eq!(flops_at(0.70, 0.70, 1.0), (0.0, 0.0));
        assert!((flops_at(0.80, 0.70, 1.0).0 - 0.01).abs() < 1e-12);
        assert!((flops_at(0.80, 0.60, 0.5).0 - 0.02).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let g = tape.leaf(Tensor::scalar(0.5), true);
        assert!(flops_loss(&mut tape, g, 0.0, 1.0).is_err());
        assert!(flops_loss(&mut tape, g, 0.5, 1.5).is_err());
    }

    #[test]
    fn total_examples() {
        let run = |ce: f64, cons: f64, flops: f64, lc: f64, lf: f64| {
            let mut tape = Tape::<f64>::inference();
            let a = tape.constant(Tensor::scalar(ce));
            let b = tape.constant(Tensor::scalar(cons));
            let c = tape.constant(Tensor::scalar(flops));
            let t = total_loss(&mut tape, a, b, c, lc, lf).unwrap();
            tape.value(t).item()
        };
        assert_eq!(run(0.7, 3.0, 2.0, 0.0, 0.0), 0.7);
        assert!((run(1.0, 2.0, 0.01, 0.01, 3.0) - 1.05).abs() < 1e-12);
        assert_eq!(run(0.0, 0.0, 0.0, 0.5, 0.5), 0.0);
    }

    #[test]
    fn flops_pressure_reaches_logits_only_through_the_mean() {
        // two blocks with equal logits and equal noise get equal gradients
        let mut tape = Tape::<f64>::new();
        let noise = Tensor::from_f64([2, 2], &[0.3, -0.1, 1.2, 0.4]).unwrap();
        let l1 = tape.leaf(Tensor::from_f64([2], &[0.8, -0.4]).unwrap(), true);
        let l2 = tape.leaf(Tensor::from_f64([2], &[0.8, -0.4]).unwrap(), true);
        let z1 = relaxed_gate(&mut tape, l1, &noise, 1.0).unwrap();
        let z2 = relaxed_gate(&mut tape, l2, &noise, 1.0).unwrap();
        let d: Vec<GateDecision> = [z1, z2]
            .into_iter()
            .map(|z| GateDecision {
                relaxed_var: Some(z),
                ..GateDecision::default()
            })
            .collect();
        let g = mean_gate(&mut tape, &d).unwrap();
        let f = flops_loss(&mut tape, g, 0.1, 1.0).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(l1), tape.grad(l2));
        assert!(tape.grad(l1).unwrap().data().iter().all(|&v| v > 0.0));
    }

    proptest! {
        #[test]
        fn hinge_is_flat_below_target(target in 0.05f64..1.0, frac in 0.0f64..1.0, prog in 0.0f64..1.0) {
            let g = target * frac;
            let (v, d) = flops_at(g, target, prog);
            prop_assert_eq!(v, 0.0);
            prop_assert_eq!(d, 0.0);
        }

        #[test]
        fn hinge_matches_closed_form_above_target(target in 0.05f64..0.95, over in 1e-3f64..0.5, prog in 0.0f64..1.0) {
            let g = (target + over).min(1.0);
            let (v, d) = flops_at(g, target, prog);
            prop_assert!((v - prog * (g - target).powi(2)).abs() < 1e-8);
            prop_assert!((d - 2.0 * prog * (g - target)).abs() < 1e-8);
        }

        #[test]
        fn consistency_is_nonnegative(data in prop::collection::vec(-5.0f64..5.0, 24)) {
            let a = Tensor::new([2, 12], data[..24].to_vec()).unwrap();
            let b = a.map(|v| (v * 1.7).cos());
            prop_assert!(cons_value(a, b) >= 0.0);
        }
    }
}
