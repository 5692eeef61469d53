//! Convolution and pooling on (N, C, H, W) tensors.
//!
//! conv2d lowers to im2col + one matrix product. The column matrix is
//! rebuilt in the backward pass instead of being cached, trading compute for
//! tape memory.

use super::graph::{Graph, NodeId};
use ndarray::{ArrayD, Axis, IxDyn};

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Graph {
    /// 2-d convolution: input (N,C,H,W), kernel (F,C,kh,kw) -> (N,F,oh,ow).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.ndim(), 4, "conv2d input must be (N,C,H,W)");
        assert_eq!(wv.ndim(), 4, "conv2d kernel must be (F,C,kh,kw)");
        let (n, c, h, width) = dims4(xv);
        let (f, ck, kh, kw) = dims4(wv);
        assert_eq!(c, ck, "channel mismatch: input {c}, kernel {ck}");
        let oh = out_len(h, kh, spec);
        let ow = out_len(width, kw, spec);

        let cols = im2col(xv, kh, kw, spec); // (C*kh*kw, N*oh*ow)
        let wmat = flatten_kernel(wv); // (F, C*kh*kw)
        let out_mat = wmat.dot(&cols); // (F, N*oh*ow)
        let value = unflatten_output(&out_mat, n, f, oh, ow);

        let tx = self.tracked(x);
        let tw = self.tracked(w);
        if !tx && !tw {
            return self.constant(value);
        }
        let backward = move |g: &Graph, grad: &ArrayD<f64>| {
            let grad_mat = flatten_output(grad, n, f, oh, ow); // (F, N*oh*ow)
            let mut out = Vec::with_capacity(2);
            if tw {
                let cols = im2col(g.value(x), kh, kw, spec);
                let dw = grad_mat.dot(&cols.t()); // (F, C*kh*kw)
                out.push((w, dw.into_shape_with_order(IxDyn(&[f, c, kh, kw])).unwrap()));
            }
            if tx {
                let wmat = flatten_kernel(g.value(w));
                let dcols = wmat.t().dot(&grad_mat); // (C*kh*kw, N*oh*ow)
                out.push((x, col2im(&dcols, n, c, h, width, kh, kw, spec)));
            }
            out
        };
        self.push_custom(value, Box::new(backward))
    }

    /// Max pooling with square kernel. Ties break toward the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4);
        let (n, c, h, w) = dims4(xv);
        let spec = ConvSpec { stride, pad };
        let oh = out_len(h, kernel, spec);
        let ow = out_len(w, kernel, spec);
        let mut value = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
        let mut argmax = vec![0usize; n * c * oh * ow];
        let mut slot = 0;
        for in_ in 0..n {
            for ic in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = xv[[in_, ic, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = (iy as usize) * w + ix as usize;
                                }
                            }
                        }
                        value[[in_, ic, oy, ox]] = best;
                        argmax[slot] = best_idx;
                        slot += 1;
                    }
                }
            }
        }
        if !self.tracked(x) {
            return self.constant(value);
        }
        let backward = move |g: &Graph, grad: &ArrayD<f64>| {
            let mut out = ArrayD::zeros(g.value(x).raw_dim());
            let mut slot = 0;
            for in_ in 0..n {
                for ic in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = argmax[slot];
                            out[[in_, ic, idx / w, idx % w]] += grad[[in_, ic, oy, ox]];
                            slot += 1;
                        }
                    }
                }
            }
            vec![(x, out)]
        };
        self.push_custom(value, Box::new(backward))
    }

    /// Batch normalization over (N,H,W) per channel, fused forward/backward.
    /// `mean`/`var` are the statistics to normalize with (batch stats during
    /// training, running stats at evaluation).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        use_batch_grad: bool,
    ) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4);
        let (n, c, h, w) = dims4(xv);
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for ic in 0..c {
            let m = mean[ic];
            let is = inv_std[ic];
            xhat.index_axis_mut(Axis(1), ic).mapv_inplace(|v| (v - m) * is);
        }
        let mut value = xhat.clone();
        for ic in 0..c {
            let ga = gv.as_slice().unwrap()[ic];
            let be = bv.as_slice().unwrap()[ic];
            value.index_axis_mut(Axis(1), ic).mapv_inplace(|v| v * ga + be);
        }

        let tx = self.tracked(x);
        let tg = self.tracked(gamma);
        let tb = self.tracked(beta);
        if !tx && !tg && !tb {
            return self.constant(value);
        }
        let m_count = (n * h * w) as f64;
        let backward = move |g: &Graph, grad: &ArrayD<f64>| {
            let mut out = Vec::new();
            let gv = g.value(gamma).as_slice().unwrap().to_vec();
            let mut dgamma = vec![0.0f64; c];
            let mut dbeta = vec![0.0f64; c];
            for ic in 0..c {
                let gslice = grad.index_axis(Axis(1), ic);
                let xslice = xhat.index_axis(Axis(1), ic);
                dbeta[ic] = gslice.sum();
                dgamma[ic] = (&gslice * &xslice).sum();
            }
            if tx {
                let mut dx = ArrayD::zeros(grad.raw_dim());
                for ic in 0..c {
                    let scale = gv[ic] * inv_std[ic];
                    let mean_dy = dbeta[ic] / m_count;
                    let mean_dy_xhat = dgamma[ic] / m_count;
                    let gslice = grad.index_axis(Axis(1), ic);
                    let xslice = xhat.index_axis(Axis(1), ic);
                    let mut dslice = dx.index_axis_mut(Axis(1), ic);
                    if use_batch_grad {
                        // Statistics depend on x: full batch-norm gradient.
                        ndarray::Zip::from(&mut dslice)
                            .and(&gslice)
                            .and(&xslice)
                            .for_each(|d, &dy, &xh| {
                                *d = scale * (dy - mean_dy - xh * mean_dy_xhat)
                            });
                    } else {
                        // Statistics are constants (eval mode).
                        ndarray::Zip::from(&mut dslice)
                            .and(&gslice)
                            .for_each(|d, &dy| *d = scale * dy);
                    }
                }
                out.push((x, dx));
            }
            if tg {
                out.push((
                    gamma,
                    ArrayD::from_shape_vec(g.value(gamma).raw_dim(), dgamma.clone()).unwrap(),
                ));
            }
            if tb {
                out.push((
                    beta,
                    ArrayD::from_shape_vec(g.value(beta).raw_dim(), dbeta.clone()).unwrap(),
                ));
            }
            out
        };
        self.push_custom(value, Box::new(backward))
    }
}

fn dims4(v: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3])
}

fn out_len(input: usize, kernel: usize, spec: ConvSpec) -> usize {
    assert!(
        input + 2 * spec.pad >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{}",
        spec.pad
    );
    (input + 2 * spec.pad - kernel) / spec.stride + 1
}

fn im2col(x: &ArrayD<f64>, kh: usize, kw: usize, spec: ConvSpec) -> ndarray::Array2<f64> {
    let (n, c, h, w) = dims4(x);
    let oh = out_len(h, kh, spec);
    let ow = out_len(w, kw, spec);
    let mut cols = ndarray::Array2::zeros((c * kh * kw, n * oh * ow));
    for in_ in 0..n {
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ic * kh * kw + ky * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, in_ * oh * ow + oy * ow + ox]] =
                                x[[in_, ic, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &ndarray::Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> ArrayD<f64> {
    let oh = out_len(h, kh, spec);
    let ow = out_len(w, kw, spec);
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    for in_ in 0..n {
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ic * kh * kw + ky * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[[in_, ic, iy as usize, ix as usize]] +=
                                cols[[row, in_ * oh * ow + oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn flatten_kernel(w: &ArrayD<f64>) -> ndarray::Array2<f64> {
    let (f, c, kh, kw) = dims4(w);
    w.to_owned()
        .into_shape_with_order(IxDyn(&[f, c * kh * kw]))
        .unwrap()
        .into_dimensionality()
        .unwrap()
}

/// (F, N*oh*ow) column layout -> (N,F,oh,ow) tensor.
fn unflatten_output(m: &ndarray::Array2<f64>, n: usize, f: usize, oh: usize, ow: usize) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[n, f, oh, ow]));
    for of in 0..f {
        for in_ in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[in_, of, oy, ox]] = m[[of, in_ * oh * ow + oy * ow + ox]];
                }
            }
        }
    }
    out
}

fn flatten_output(t: &ArrayD<f64>, n: usize, f: usize, oh: usize, ow: usize) -> ndarray::Array2<f64> {
    let mut out = ndarray::Array2::zeros((f, n * oh * ow));
    for of in 0..f {
        for in_ in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[of, in_ * oh * ow + oy * ow + ox]] = t[[in_, of, oy, ox]];
                }
            }
        }
    }
    out
}
