//! Forward and adjoint kernels on raw tensors. The tape in `graph` calls into these.

use super::Tensor;
use crate::error::{Error, Result};

/// Spatial bookkeeping for a 2D convolution over an `H×W×Cin` input.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad: isize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::Invalid(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let [h, w, cin] = *input.shape() else {
            return Err(Error::shape("conv2d", format!("input must be H×W×C, got {:?}", input.shape())));
        };
        let [k, k2, kcin, cout] = *kernel.shape() else {
            return Err(Error::shape("conv2d", format!("kernel must be k×k×Cin×Cout, got {:?}", kernel.shape())));
        };
        if k != k2 {
            return Err(Error::shape("conv2d", format!("non-square kernel {k}×{k2}")));
        }
        if kcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        // stride 1: zero same-padding; stride 2: no leading padding, ceil(H/2) outputs
        // with out-of-range taps reading zero.
        let (oh, ow, pad) = if stride == 1 {
            (h, w, ((k - 1) / 2) as isize)
        } else {
            (h.div_ceil(2), w.div_ceil(2), 0)
        };
        Ok(ConvGeom { h, w, cin, k, cout, stride, oh, ow, pad })
    }

    #[inline]
    fn tap(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d_output_extent(extent: usize, stride: usize) -> usize {
    if stride == 1 {
        extent
    } else {
        extent.div_ceil(2)
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, stride)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} output channels", b.shape(), g.cout)));
        }
    }
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oh in 0..g.oh {
        for ow in 0..g.ow {
            let o = &mut out[(oh * g.ow + ow) * g.cout..][..g.cout];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for kh in 0..g.k {
                let Some(ih) = g.tap(oh, kh, g.h) else { continue };
                for kw in 0..g.k {
                    let Some(iw) = g.tap(ow, kw, g.w) else { continue };
                    let xs = &x[(ih * g.w + iw) * g.cin..][..g.cin];
                    let kbase = (kh * g.k + kw) * g.cin * g.cout;
                    for (ci, &xv) in xs.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ci * g.cout..][..g.cout];
                        for (ov, kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.oh, g.ow, g.cout], out)
}

/// Adjoints of [`conv2d`]: `(d_input, d_kernel, d_bias)`. Unrequested adjoints are `None`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    grad_out: &Tensor,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
    let g = ConvGeom::new(input, kernel, stride)?;
    let x = input.data();
    let kd = kernel.data();
    let go = grad_out.data();
    let mut gi = want_input.then(|| vec![0.0; x.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kd.len()]);
    let mut gb = vec![0.0; g.cout];
    for oh in 0..g.oh {
        for ow in 0..g.ow {
            let gos = &go[(oh * g.ow + ow) * g.cout..][..g.cout];
            for (b, v) in gb.iter_mut().zip(gos) {
                *b += v;
            }
            for kh in 0..g.k {
                let Some(ih) = g.tap(oh, kh, g.h) else { continue };
                for kw in 0..g.k {
                    let Some(iw) = g.tap(ow, kw, g.w) else { continue };
                    let xoff = (ih * g.w + iw) * g.cin;
                    let kbase = (kh * g.k + kw) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let koff = kbase + ci * g.cout;
                        if let Some(gi) = gi.as_mut() {
                            let krow = &kd[koff..][..g.cout];
                            gi[xoff + ci] += dot(krow, gos);
                        }
                        if let Some(gk) = gk.as_mut() {
                            let xv = x[xoff + ci];
                            if xv != 0.0 {
                                for (kv, gv) in gk[koff..][..g.cout].iter_mut().zip(gos) {
                                    *kv += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gi = gi.map(|v| Tensor::new(input.shape(), v)).transpose()?;
    let gk = gk.map(|v| Tensor::new(kernel.shape(), v)).transpose()?;
    Ok((gi, gk, Tensor::new(&[g.cout], gb)?))
}

pub fn dense(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let n = input.len();
    let [wn, m] = *weights.shape() else {
        return Err(Error::shape("dense", format!("weights must be n×m, got {:?}", weights.shape())));
    };
    if input.rank() != 1 || wn != n {
        return Err(Error::shape("dense", format!("input {:?} against weights {:?}", input.shape(), weights.shape())));
    }
    let mut out = match bias {
        Some(b) if b.shape() == [m] => b.data().to_vec(),
        Some(b) => return Err(Error::shape("dense", format!("bias {:?} for {m} outputs", b.shape()))),
        None => vec![0.0; m],
    };
    let w = weights.data();
    for (i, &xv) in input.data().iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[i * m..][..m]) {
            *o += xv * wv;
        }
    }
    Tensor::new(&[m], out)
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_weights: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let m = grad_out.len();
    let w = weights.data();
    let go = grad_out.data();
    let gi = want_input.then(|| {
        let v = (0..input.len())
            .map(|i| dot(&w[i * m..][..m], go))
            .collect();
        Tensor::new(input.shape(), v).expect("dense input shape")
    });
    let gw = want_weights.then(|| {
        let mut v = vec![0.0; w.len()];
        for (i, &xv) in input.data().iter().enumerate() {
            if xv != 0.0 {
                for (a, b) in v[i * m..][..m].iter_mut().zip(go) {
                    *a = xv * b;
                }
            }
        }
        Tensor::new(weights.shape(), v).expect("dense weight shape")
    });
    (gi, gw)
}

/// `max(x) + ln Σ exp(x − max(x))`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("logsumexp of empty input".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_and_sum_kernels() {
        let x = Tensor::new(&[1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::vector(vec![0.0]);
        assert_eq!(conv2d(&x, &k, Some(&b), 1).unwrap().data(), &[3.0]);

        let x = Tensor::filled(&[2, 2, 1], 1.0);
        let k = Tensor::filled(&[2, 2, 1, 1], 1.0);
        let y = conv2d(&x, &k, Some(&b), 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn conv_stride_two_rounds_up() {
        let x = Tensor::filled(&[5, 7, 2], 1.0);
        let k = Tensor::filled(&[2, 2, 2, 3], 1.0);
        let y = conv2d(&x, &k, None, 2).unwrap();
        assert_eq!(y.shape(), &[3, 4, 3]);
        // bottom-right window hangs off both edges: only one tap is in range
        assert_eq!(y.data()[(2 * 4 + 3) * 3], 2.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[4, 4, 3]);
        let k = Tensor::zeros(&[3, 3, 2, 5]);
        assert!(matches!(conv2d(&x, &k, None, 1), Err(Error::Shape { .. })));
        let k = Tensor::zeros(&[3, 3, 3, 5]);
        assert!(conv2d(&x, &k, None, 3).is_err());
        assert!(conv2d(&x, &k, Some(&Tensor::zeros(&[4])), 1).is_err());
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(dense(&x, &eye, Some(&zero)).unwrap().data(), &[1.0, 2.0]);

        let x = Tensor::vector(vec![1.0, 1.0]);
        let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(dense(&x, &w, Some(&b)).unwrap().data(), &[5.0, 7.0]);

        assert!(dense(&Tensor::zeros(&[3]), &w, None).is_err());
    }

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[-7.25]).unwrap(), -7.25);
        let c = 1.5;
        assert!((logsumexp(&[c; 4]).unwrap() - (c + 4f64.ln())).abs() < 1e-15);
        // exact value is ln(1 + e^-1000), below f64 resolution around 0
        assert!(logsumexp(&[-1000.0, 0.0]).unwrap().abs() < 1e-12);
        assert!(logsumexp(&[-1e6, -1e6 - 1.0]).unwrap().is_finite());
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn softmax_symmetric() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }
}
