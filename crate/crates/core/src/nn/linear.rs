use rand::Rng;

use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `y = x·Wᵀ + b` with `W[out×in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add_he_normal(format!("{name}.weight"), &[out_features, in_features], in_features, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([out_features]), ParamKind::NoDecay),
            in_features,
            out_features,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.in_features {
            return Err(Error::shape("linear", xs, &[self.out_features, self.in_features]));
        }
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        linear(tape, x, w, b)
    }
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let wt = tape.transpose(weight)?;
    let y = tape.matmul(x, wt)?;
    tape.add_row_bias(y, bias)
}
