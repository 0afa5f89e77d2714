//! 2-D convolution (cross-correlation) lowered to GEMM via im2col.

use rand::Rng;

use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    /// `(in + 2·pad − k) / stride + 1`, rounded down.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::Config(format!(
                    "kernel {} larger than padded input {padded}",
                    self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds one `[C, H, W]` sample into `[C·k·k, Ho·Wo]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let k = g.kernel;
    let hw_out = ho * wo;
    for c in 0..g.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *v = if iw < 0 || iw >= w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C·k·k, Ho·Wo]` back into `[C, H, W]`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let k = g.kernel;
    let hw_out = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < w as isize {
                            let d = &mut plane[ih as usize * w + iw as usize];
                            *d = *d + src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x[B×Cin×H×W]` with `weight[Cout×Cin×k×k]`, zero
/// padding, optional `bias[Cout]`.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
        return Err(Error::shape("conv2d", &xs, &ws));
    }
    if let Some(b) = bias {
        if tape.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d bias", &ws, tape.shape(b)));
        }
    }
    let g = ConvGeometry {
        in_channels: ws[1],
        out_channels: ws[0],
        kernel: ws[2],
        stride,
        padding,
    };
    g.validate()?;
    let (batch, h, w) = (xs[0], xs[2], xs[3]);
    let (ho, wo) = g.output_size(h, w)?;
    let (kdim, hw_out, in_len) = (g.patch_len(), ho * wo, g.in_channels * h * w);
    let out_len = g.out_channels * hw_out;

    let xv = tape.value(x).data();
    let wv = tape.value(weight).data();
    let mut cols = vec![T::zero(); batch * kdim * hw_out];
    let mut out = vec![T::zero(); batch * out_len];
    for b in 0..batch {
        let c = &mut cols[b * kdim * hw_out..(b + 1) * kdim * hw_out];
        im2col(&xv[b * in_len..(b + 1) * in_len], &g, h, w, ho, wo, c);
        gemm(
            T::one(),
            MatRef::new(wv, g.out_channels, kdim),
            MatRef::new(c, kdim, hw_out),
            T::zero(),
            &mut out[b * out_len..(b + 1) * out_len],
        );
    }
    if let Some(bv) = bias {
        let bv = tape.value(bv).data();
        for sample in out.chunks_mut(out_len) {
            for (plane, &bc) in sample.chunks_mut(hw_out).zip(bv) {
                plane.iter_mut().for_each(|v| *v = *v + bc);
            }
        }
    }
    let value = Tensor::new([batch, g.out_channels, ho, wo], out)?;

    let mut parents = vec![x, weight];
    parents.extend(bias);
    let has_bias = bias.is_some();
    let keep_cols = tape.grad_enabled();
    let cols = if keep_cols { cols } else { Vec::new() };
    Ok(tape.record(value, &parents, move |ctx| {
        let wv = ctx.inputs[1].data();
        let gy = ctx.grad.data();
        let mut dx = vec![T::zero(); batch * in_len];
        let mut dw = vec![T::zero(); g.out_channels * kdim];
        let mut dcols = vec![T::zero(); kdim * hw_out];
        for b in 0..batch {
            let gyb = MatRef::new(&gy[b * out_len..(b + 1) * out_len], g.out_channels, hw_out);
            let cb = MatRef::new(&cols[b * kdim * hw_out..(b + 1) * kdim * hw_out], kdim, hw_out);
            gemm(T::one(), gyb, cb.t(), T::one(), &mut dw);
            gemm(T::one(), MatRef::new(wv, g.out_channels, kdim).t(), gyb, T::zero(), &mut dcols);
            col2im(&dcols, &g, h, w, ho, wo, &mut dx[b * in_len..(b + 1) * in_len]);
        }
        let mut grads = vec![
            Some(Tensor::new([batch, g.in_channels, h, w], dx).expect("input shape")),
            Some(Tensor::new([g.out_channels, g.in_channels, g.kernel, g.kernel], dw).expect("weight shape")),
        ];
        if has_bias {
            let mut db = vec![T::zero(); g.out_channels];
            for sample in gy.chunks(out_len) {
                for (d, plane) in db.iter_mut().zip(sample.chunks(hw_out)) {
                    *d = *d + plane.iter().copied().sum();
                }
            }
            grads.push(Some(Tensor::new([g.out_channels], db).expect("bias shape")));
        }
        grads
    }))
}

/// A convolution layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let geometry = ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        };
        geometry.validate()?;
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_he_normal(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_channels]), ParamKind::NoDecay));
        Ok(Conv2d { weight, bias, geometry })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = self.bias.map(|id| store.bind(tape, id));
        conv2d(tape, x, w, b, self.geometry.stride, self.geometry.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, w: Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let mut tape = Tape::inference();
        let x = tape.constant(x);
        let w = tape.constant(w);
        let y = conv2d(&mut tape, x, w, None, stride, pad).unwrap();
        tape.value(y).clone()
    }

    /// Direct nested-loop cross-correlation, independent of im2col.
    fn direct(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([b, co, ho, wo]);
        for n in 0..b {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for a in 0..k {
                                for bb in 0..k {
                                    let ih = (i * stride + a) as isize - pad as isize;
                                    let iw = (j * stride + bb) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x.data()[((n * c + ci) * h + ih as usize) * wd + iw as usize]
                                            * w.data()[((o * c + ci) * k + a) * k + bb];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * co + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let x = Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_f64([1, 1, 1, 1], &[2.0]).unwrap();
        assert_eq!(run(x, w, 1, 0).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn centre_one_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 1, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        assert_eq!(run(x.clone(), w, 1, 1), x);
    }

    #[test]
    fn all_ones_two_by_two() {
        let x = Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::ones([1, 1, 2, 2]);
        assert_eq!(run(x, w, 1, 0).data(), &[10.0]);
    }

    #[test]
    fn matches_direct_loops_with_stride_and_padding() {
        let x = Tensor::<f64>::from_fn([2, 3, 7, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Tensor::<f64>::from_fn([4, 3, 3, 3], |i| ((i * 13) % 7) as f64 * 0.25 - 0.75);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let got = run(x.clone(), w.clone(), s, p);
            let want = direct(&x, &w, s, p);
            assert!(got.max_abs_diff(&want) < 1e-12, "stride {s} pad {p}");
        }
    }

    #[test]
    fn bias_gradient_sums_upstream() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([2, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones([2, 1, 1, 1]), true);
        let b = tape.leaf(Tensor::zeros([2]), true);
        let y = conv2d(&mut tape, x, w, Some(b), 1, 0).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[18.0, 18.0]);
    }

    #[test]
    fn kernel_larger_than_input_is_a_config_error() {
        let g = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            kernel: 5,
            stride: 1,
            padding: 0,
        };
        assert!(matches!(g.output_size(3, 3), Err(Error::Config(_))));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(conv2d(&mut tape, x, w, None, 1, 1), Err(Error::Shape { .. })));
    }
}
