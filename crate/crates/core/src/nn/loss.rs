use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Mean over the batch of `−log softmax(logits)[label]`, using log-sum-exp.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape("cross_entropy", s, &[labels.len()]));
    }
    let (batch, k) = (s[0], s[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, classes: k });
    }
    let lv = tape.value(logits).data();
    let mut probs = vec![T::zero(); batch * k];
    let mut total = T::zero();
    for (b, row) in lv.chunks(k).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total = total + lse - row[labels[b]];
        for (p, &v) in probs[b * k..(b + 1) * k].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    let inv_b = T::one() / T::of(batch as f64);
    let value = Tensor::scalar(total * inv_b);
    let labels = labels.to_vec();
    Ok(tape.record(value, &[logits], move |ctx| {
        let g = ctx.grad.item() * inv_b;
        let mut d = probs.clone();
        for (b, &l) in labels.iter().enumerate() {
            d[b * k + l] = d[b * k + l] - T::one();
        }
        d.iter_mut().for_each(|v| *v = *v * g);
        vec![Some(Tensor::new([batch, k], d).expect("logit shape"))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
        let mut tape = Tape::inference();
        let l = tape.constant(Tensor::from_f64([labels.len(), k], logits).unwrap());
        let v = cross_entropy(&mut tape, l, labels).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        assert!((ce(&[0.3; 10], 10, &[4]) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_true_class_is_near_zero() {
        assert!(ce(&[100.0, 0.0], 2, &[0]) < 1e-12);
    }

    #[test]
    fn two_class_direct_softmax() {
        let expected = -(2f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        assert!((ce(&[1.0, 2.0], 2, &[1]) - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label() {
        let mut tape = Tape::<f32>::inference();
        let l = tape.constant(Tensor::zeros([1, 3]));
        assert!(matches!(cross_entropy(&mut tape, l, &[3]), Err(Error::Label { label: 3, classes: 3 })));
    }
}
