//! 2-D cross-correlation with zero padding, lowered to GEMM through im2col.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{Shape, Tensor4};
use crate::error::{Error, Result};

/// Weights `(out_c, in_c, kh, kw)`, one bias per output channel, square stride and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Tensor4,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(weight: Tensor4, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        let p = ConvParams { weight, bias, stride, padding };
        p.validate()?;
        Ok(p)
    }

    /// Zero weights and bias.
    pub fn zeros(out_c: usize, in_c: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(Tensor4::zeros(Shape::new(out_c, in_c, k, k)), vec![0.0; out_c], stride, padding)
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero bias, "same" padding.
    pub fn he_uniform<R: Rng + ?Sized>(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_c * k * k) as f64;
        let bound = libm::sqrt(6.0 / fan_in);
        let weight = Tensor4::random_uniform(Shape::new(out_c, in_c, k, k), -bound, bound, rng);
        Self::new(weight, vec![0.0; out_c], stride, (k - 1) / 2)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("ConvParams", format!("kernel {kh}x{kw} must be odd")));
        }
        if self.stride == 0 {
            return Err(Error::invalid("ConvParams", "stride must be >= 1"));
        }
        if self.bias.len() != self.out_channels() {
            return Err(Error::shape(
                "ConvParams",
                format!("{} biases for {} output channels", self.bias.len(), self.out_channels()),
            ));
        }
        Ok(())
    }

    /// Spatial output size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", input.c, self.in_channels()),
            ));
        }
        let (oh, ow) = self.output_size(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels(), oh, ow))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == (1, 1) && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `[lo, hi)` whose tap `k` lands inside `[0, extent)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if extent + pad <= k {
        return (0, 0);
    }
    let hi = ((extent - 1 + pad - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

struct Geometry {
    in_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &Geometry, item: &[f64], col: &mut [f64]) {
    let p = g.cols();
    let (xlo_hi, ylo_hi): (Vec<_>, Vec<_>) = (
        (0..g.kw).map(|kx| valid_range(kx, g.pad, g.stride, g.w, g.ow)).collect(),
        (0..g.kh).map(|ky| valid_range(ky, g.pad, g.stride, g.h, g.oh)).collect(),
    );
    for c in 0..g.in_c {
        let plane = &item[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = ylo_hi[ky];
            for kx in 0..g.kw {
                let (xlo, xhi) = xlo_hi[kx];
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                row.fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let start = xlo + kx - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, col: &[f64], item: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.in_c {
        let plane = &mut item[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                let row = &col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        plane[iy * g.w + ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, strides given per operand.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() as isize > (m as isize - 1) * rsa + (k as isize - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() as isize > (k as isize - 1) * rsb + (n as isize - 1) * csb);
    // SAFETY: the asserted slice lengths cover every element addressed through
    // the given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn geometry(input: Shape, params: &ConvParams, out: Shape) -> Geometry {
    let (kh, kw) = params.kernel();
    Geometry {
        in_c: input.c,
        h: input.h,
        w: input.w,
        kh,
        kw,
        oh: out.h,
        ow: out.w,
        stride: params.stride,
        pad: params.padding,
    }
}

pub fn conv2d_forward(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    let out_shape = params.output_shape(input.shape())?;
    let g = geometry(input.shape(), params, out_shape);
    let (k, p, oc) = (g.rows(), g.cols(), out_shape.c);
    let mut out = Tensor4::zeros(out_shape);
    let mut col = if params.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..input.shape().n {
        let cols: &[f64] = if params.is_pointwise() {
            input.item(n)
        } else {
            im2col(&g, input.item(n), &mut col);
            &col
        };
        let dst = out.item_mut(n);
        for (o, &b) in params.bias.iter().enumerate() {
            dst[o * p..(o + 1) * p].fill(b);
        }
        gemm(oc, k, p, params.weight.data(), (k as isize, 1), cols, (p as isize, 1), 1.0, dst);
    }
    Ok(out)
}

pub fn conv2d_backward(input: &Tensor4, params: &ConvParams, grad_out: &Tensor4) -> Result<ConvGrads> {
    let out_shape = params.output_shape(input.shape())?;
    grad_out.expect_shape("conv2d_backward", out_shape)?;
    let g = geometry(input.shape(), params, out_shape);
    let (k, p, oc) = (g.rows(), g.cols(), out_shape.c);
    let mut grad_input = Tensor4::zeros(input.shape());
    let mut grad_weight = Tensor4::zeros(params.weight.shape());
    let mut grad_bias = vec![0.0; oc];
    let pointwise = params.is_pointwise();
    let mut col = vec![0.0; k * p];
    for n in 0..input.shape().n {
        let gout = grad_out.item(n);
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += gout[o * p..(o + 1) * p].iter().sum::<f64>();
        }
        let cols: &[f64] = if pointwise {
            input.item(n)
        } else {
            im2col(&g, input.item(n), &mut col);
            &col
        };
        // dW (oc x k) += dY (oc x p) * cols^T (p x k)
        gemm(oc, p, k, gout, (p as isize, 1), cols, (1, p as isize), 1.0, grad_weight.data_mut());
        // dcols (k x p) = W^T (k x oc) * dY (oc x p)
        if pointwise {
            gemm(k, oc, p, params.weight.data(), (1, k as isize), gout, (p as isize, 1), 0.0, grad_input.item_mut(n));
        } else {
            gemm(k, oc, p, params.weight.data(), (1, k as isize), gout, (p as isize, 1), 0.0, &mut col);
            col2im(&g, &col, grad_input.item_mut(n));
        }
    }
    Ok(ConvGrads { input: grad_input, weight: grad_weight, bias: grad_bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, numeric_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, independent of the im2col path.
    fn direct_conv(input: &Tensor4, p: &ConvParams) -> Tensor4 {
        let s = input.shape();
        let (kh, kw) = p.kernel();
        let (oh, ow) = p.output_size(s.h, s.w).unwrap();
        let mut out = Tensor4::zeros(Shape::new(s.n, p.out_channels(), oh, ow));
        for n in 0..s.n {
            for o in 0..p.out_channels() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias[o];
                        for c in 0..s.c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                        acc += p.weight.at(o, c, ky, kx) * input.at(n, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(n, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn assert_rel_eq(a: &Tensor4, b: &Tensor4, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn identity_scaling_kernel() {
        let input = Tensor4::filled(Shape::new(1, 1, 3, 3), 1.0);
        let p = ConvParams::new(Tensor4::filled(Shape::new(1, 1, 1, 1), 2.0), vec![0.0], 1, 0).unwrap();
        assert_eq!(conv2d_forward(&input, &p).unwrap(), Tensor4::filled(Shape::new(1, 1, 3, 3), 2.0));
    }

    #[test]
    fn even_kernels_are_rejected() {
        let w = Tensor4::filled(Shape::new(1, 1, 2, 2), 1.0);
        assert!(matches!(ConvParams::new(w, vec![0.0], 1, 0), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let p = ConvParams::zeros(2, 3, 3, 1, 1).unwrap();
        let err = conv2d_forward(&Tensor4::zeros(Shape::new(1, 2, 4, 4)), &p).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn matches_direct_loops_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, ic, oc, h, w, k, stride, pad) in &[
            (1, 2, 3, 5, 5, 3, 1, 0),
            (2, 3, 4, 7, 6, 3, 2, 1),
            (1, 1, 2, 7, 7, 5, 1, 2),
            (1, 4, 2, 4, 5, 1, 1, 0),
            (2, 2, 2, 6, 7, 3, 3, 1),
            (1, 3, 1, 1, 1, 3, 1, 1),
        ] {
            let input = Tensor4::random_uniform(Shape::new(n, ic, h, w), -2.0, 2.0, &mut rng);
            let weight = Tensor4::random_uniform(Shape::new(oc, ic, k, k), -1.0, 1.0, &mut rng);
            let bias = (0..oc).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = ConvParams::new(weight, bias, stride, pad).unwrap();
            assert_rel_eq(&conv2d_forward(&input, &p).unwrap(), &direct_conv(&input, &p), 1e-10);
        }
    }

    #[test]
    fn scalar_backward_is_the_chain_rule() {
        let x = Tensor4::filled(Shape::new(1, 1, 1, 1), 3.0);
        let p = ConvParams::new(Tensor4::filled(Shape::new(1, 1, 1, 1), -2.0), vec![0.5], 1, 0).unwrap();
        let g = Tensor4::filled(Shape::new(1, 1, 1, 1), 0.25);
        let grads = conv2d_backward(&x, &p, &g).unwrap();
        assert_eq!(grads.input.data(), &[-0.5]);
        assert_eq!(grads.weight.data(), &[0.75]);
        assert_eq!(grads.bias, vec![0.25]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::random_uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
        let p = ConvParams::he_uniform(3, 2, 3, 2, &mut rng).unwrap();
        let grads = conv2d_backward(&x, &p, &Tensor4::zeros(Shape::new(1, 3, 3, 3))).unwrap();
        assert!(grads.input.data().iter().chain(grads.weight.data()).chain(&grads.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
            let x = Tensor4::random_uniform(Shape::new(2, 2, 6, 5), -2.0, 2.0, &mut rng);
            let w = Tensor4::random_uniform(Shape::new(3, 2, k, k), -1.0, 1.0, &mut rng);
            let p = ConvParams::new(w, vec![0.1, -0.2, 0.3], stride, pad).unwrap();
            let y = conv2d_forward(&x, &p).unwrap();
            let probe = Tensor4::random_uniform(y.shape(), -1.0, 1.0, &mut rng);
            let objective = |x: &Tensor4, p: &ConvParams| -> f64 {
                conv2d_forward(x, p).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let grads = conv2d_backward(&x, &p, &probe).unwrap();

            let num_x = numeric_grad(x.data(), 1e-4, |v| {
                objective(&Tensor4::from_vec(x.shape(), v.to_vec()).unwrap(), &p)
            });
            assert_close(grads.input.data(), &num_x, 1e-5, "grad_input");
            let num_w = numeric_grad(p.weight.data(), 1e-4, |v| {
                let mut q = p.clone();
                q.weight = Tensor4::from_vec(p.weight.shape(), v.to_vec()).unwrap();
                objective(&x, &q)
            });
            assert_close(grads.weight.data(), &num_w, 1e-5, "grad_weight");
            let num_b = numeric_grad(&p.bias, 1e-4, |v| {
                let mut q = p.clone();
                q.bias = v.to_vec();
                objective(&x, &q)
            });
            assert_close(&grads.bias, &num_b, 1e-5, "grad_bias");
        }
    }
}
