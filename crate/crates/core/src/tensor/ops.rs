//! Differentiable primitives recorded on a [`Tape`].

use super::array::Tensor;
use super::scalar::{gemm, MatRef, Scalar};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Element-wise functions supported by [`Tape::map`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Neg,
    Log,
    Exp,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// `sqrt(sum of squares)` over the reduced axes.
    L2Norm,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Elementwise {
    fn forward<T: Scalar>(self, x: T) -> T {
        match self {
            Elementwise::Relu => x.max(T::zero()),
            Elementwise::Sigmoid => sigmoid(x),
            Elementwise::Neg => -x,
            Elementwise::Log => x.ln(),
            Elementwise::Exp => x.exp(),
            Elementwise::Square => x * x,
            Elementwise::Sqrt => x.sqrt(),
        }
    }

    /// d out / d in, given input and output values.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Elementwise::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Elementwise::Sigmoid => y * (T::one() - y),
            Elementwise::Neg => -T::one(),
            Elementwise::Log => T::one() / x,
            Elementwise::Exp => y,
            Elementwise::Square => T::of(2.0) * x,
            Elementwise::Sqrt => {
                if y > T::zero() {
                    T::of(0.5) / y
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Output shape of a reduction plus, for each input element, the flat index
/// of the output element it contributes to.
fn reduction_plan(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::Axis { axis: a, rank });
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| shape[d]).collect();

    // Stride of each input axis in the output buffer (0 for reduced axes).
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        if !reduced[d] {
            out_strides[d] = acc;
            acc *= shape[d];
        }
    }

    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut out = 0usize;
    for _ in 0..numel {
        map.push(out);
        for d in (0..rank).rev() {
            idx[d] += 1;
            out += out_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            out -= out_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    Ok((out_shape, map))
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        Ok(self.record(value, &[a, b], move |ctx| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            // dA = dC · Bᵀ
            let mut da = vec![T::zero(); m * k];
            gemm(T::one(), MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), T::zero(), &mut da);
            // dB = Aᵀ · dC
            let mut db = vec![T::zero(); k * n];
            gemm(T::one(), MatRef::new(av, m, k).t(), MatRef::new(g, m, n), T::zero(), &mut db);
            vec![
                Some(Tensor::new([m, k], da).expect("matmul grad shape")),
                Some(Tensor::new([k, n], db).expect("matmul grad shape")),
            ]
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.record(value, &[a], |ctx| vec![Some(ctx.grad.transpose().expect("rank 2"))]))
    }

    pub fn map(&mut self, a: Var, f: Elementwise) -> Result<Var> {
        let x = self.value(a);
        if f == Elementwise::Log {
            if let Some(bad) = x.data().iter().find(|v| **v <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        if f == Elementwise::Sqrt {
            if let Some(bad) = x.data().iter().find(|v| **v < T::zero()) {
                return Err(Error::Domain {
                    op: "sqrt",
                    detail: format!("negative input {bad}"),
                });
            }
        }
        let value = x.map(|v| f.forward(v));
        Ok(self.record(value, &[a], move |ctx| {
            let x = ctx.inputs[0];
            let data = x
                .data()
                .iter()
                .zip(ctx.output.data())
                .zip(ctx.grad.data())
                .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).expect("same shape"))]
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Elementwise::Relu).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Elementwise::Sigmoid).expect("sigmoid is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Elementwise::Square).expect("square is total")
    }

    /// Reduces over `axes`; the reduced axes are dropped from the shape.
    pub fn reduce(&mut self, a: Var, axes: &[usize], kind: Reduction) -> Result<Var> {
        let x = self.value(a);
        let in_shape = x.shape().to_vec();
        let (out_shape, plan) = reduction_plan(&in_shape, axes)?;
        let out_len: usize = out_shape.iter().product();
        let count = if out_len == 0 { 0 } else { x.numel() / out_len };
        let mut acc = vec![T::zero(); out_len];
        match kind {
            Reduction::Sum | Reduction::Mean => {
                for (&v, &o) in x.data().iter().zip(&plan) {
                    acc[o] = acc[o] + v;
                }
                if kind == Reduction::Mean {
                    let inv = T::one() / T::of(count as f64);
                    acc.iter_mut().for_each(|v| *v = *v * inv);
                }
            }
            Reduction::L2Norm => {
                for (&v, &o) in x.data().iter().zip(&plan) {
                    acc[o] = acc[o] + v * v;
                }
                acc.iter_mut().for_each(|v| *v = v.sqrt());
            }
        }
        let value = Tensor::new(out_shape, acc)?;
        Ok(self.record(value, &[a], move |ctx| {
            let (g, y) = (ctx.grad.data(), ctx.output.data());
            let x = ctx.inputs[0].data();
            let data = match kind {
                Reduction::Sum => plan.iter().map(|&o| g[o]).collect(),
                Reduction::Mean => {
                    let inv = T::one() / T::of(count as f64);
                    plan.iter().map(|&o| g[o] * inv).collect()
                }
                Reduction::L2Norm => plan
                    .iter()
                    .zip(x)
                    .map(|(&o, &xi)| if y[o] > T::zero() { g[o] * xi / y[o] } else { T::zero() })
                    .collect(),
            };
            vec![Some(Tensor::new(in_shape.clone(), data).expect("input shape"))]
        }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, Reduction::Sum).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, Reduction::Mean).expect("all axes are valid")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.record(value, &[a], move |ctx| {
            vec![Some(ctx.grad.clone().reshape(in_shape.clone()).expect("same numel"))]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(value, &[a, b], |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(value, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(value, &[a, b], |ctx| {
            let g = ctx.grad;
            vec![
                Some(g.zip_map(ctx.inputs[1], |g, y| g * y).expect("same shape")),
                Some(g.zip_map(ctx.inputs[0], |g, x| g * x).expect("same shape")),
            ]
        }))
    }

    /// `scale·a + shift` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let value = self.value(a).map(|v| scale * v + shift);
        self.record(value, &[a], move |ctx| vec![Some(ctx.grad.map(|g| g * scale))])
    }

    /// Adds `bias[N]` to every row of `x[..×N]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bi) in row.iter_mut().zip(&b) {
                *v = *v + bi;
            }
        }
        Ok(self.record(value, &[x, bias], move |ctx| {
            let mut db = vec![T::zero(); n];
            for row in ctx.grad.data().chunks(n) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d = *d + g;
                }
            }
            vec![Some(ctx.grad.clone()), Some(Tensor::new([n], db).expect("bias shape"))]
        }))
    }

    /// Multiplies each sample `x[b, ...]` by the per-sample scalar `s[b]`.
    pub fn scale_samples(&mut self, x: Var, s: Var) -> Result<Var> {
        let batch = self.shape(x).first().copied().unwrap_or(0);
        if self.shape(s) != [batch] {
            return Err(Error::shape("scale_samples", self.shape(x), self.shape(s)));
        }
        let per = self.value(x).numel().checked_div(batch).unwrap_or(0);
        let sv = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for (chunk, &k) in value.data_mut().chunks_mut(per.max(1)).zip(&sv) {
            chunk.iter_mut().for_each(|v| *v = *v * k);
        }
        Ok(self.record(value, &[x, s], move |ctx| {
            let (xv, sv, g) = (ctx.inputs[0], ctx.inputs[1].data(), ctx.grad);
            let mut dx = g.clone();
            let mut ds = vec![T::zero(); batch];
            for (b, (dchunk, xchunk)) in dx
                .data_mut()
                .chunks_mut(per.max(1))
                .zip(xv.data().chunks(per.max(1)))
                .enumerate()
            {
                let mut dot = T::zero();
                for (d, &xi) in dchunk.iter_mut().zip(xchunk) {
                    dot = dot + *d * xi;
                    *d = *d * sv[b];
                }
                ds[b] = dot;
            }
            vec![Some(dx), Some(Tensor::new([batch], ds).expect("scale shape"))]
        }))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let k = self.value(s).item();
        let value = self.value(x).map(|v| v * k);
        Ok(self.record(value, &[x, s], |ctx| {
            let k = ctx.inputs[1].item();
            let dot: T = ctx
                .grad
                .data()
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(&g, &x)| g * x)
                .sum();
            vec![
                Some(ctx.grad.map(|g| g * k)),
                Some(Tensor::full(ctx.inputs[1].shape().to_vec(), dot)),
            ]
        }))
    }
}
