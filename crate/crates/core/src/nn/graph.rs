//! Reverse-mode autodiff on a flat tape of f64 tensors.
//!
//! Nodes are appended in construction order, which is already a topological
//! order, so backward is a single reverse sweep. Each op stores its value
//! eagerly plus a closure that maps the incoming gradient to per-parent
//! contributions. Graphs are built per training step and dropped afterwards.

use ndarray::{ArrayD, Axis, IxDyn, Slice};
use std::collections::HashMap;

pub type NodeId = usize;

pub(crate) type BackwardFn = Box<dyn Fn(&Graph, &ArrayD<f64>) -> Vec<(NodeId, ArrayD<f64>)>>;

pub struct Graph {
    values: Vec<ArrayD<f64>>,
    backwards: Vec<Option<BackwardFn>>,
    grad_tracked: Vec<bool>,
    param_nodes: HashMap<crate::nn::params::ParamId, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            backwards: Vec::new(),
            grad_tracked: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.values[id]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id].len(), 1);
        *self.values[id].iter().next().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<f64>, tracked: bool, backward: Option<BackwardFn>) -> NodeId {
        self.values.push(value);
        self.grad_tracked.push(tracked);
        self.backwards.push(backward);
        self.values.len() - 1
    }

    pub(crate) fn tracked(&self, id: NodeId) -> bool {
        self.grad_tracked[id]
    }

    /// Install an op with a hand-written backward (used by the fused ops in
    /// sibling modules).
    pub(crate) fn push_custom(&mut self, value: ArrayD<f64>, backward: BackwardFn) -> NodeId {
        self.push(value, true, Some(backward))
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, false, None)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Leaf that receives a gradient (parameters, gradient-check probes).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, true, None)
    }

    /// Bind a parameter into this graph. Binding the same parameter twice
    /// returns the same node, so gradients from every use accumulate.
    pub fn param(&mut self, ps: &crate::nn::params::ParamStore, id: crate::nn::params::ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.leaf(ps.value(id).clone());
        self.param_nodes.insert(id, n);
        n
    }

    pub fn param_bindings(&self) -> impl Iterator<Item = (crate::nn::params::ParamId, NodeId)> + '_ {
        self.param_nodes.iter().map(|(&p, &n)| (p, n))
    }

    fn unary(
        &mut self,
        a: NodeId,
        value: ArrayD<f64>,
        back: impl Fn(&Graph, &ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> NodeId {
        let tracked = self.grad_tracked[a];
        let backward: Option<BackwardFn> = if tracked {
            Some(Box::new(move |g, grad| vec![(a, back(g, grad))]))
        } else {
            None
        };
        self.push(value, tracked, backward)
    }

    /// Gradient of `root` (a single-element node) with respect to every
    /// tracked node. Consumes the tape's backward closures.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert_eq!(
            self.values[root].len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            self.values[root].shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[root] = Some(ArrayD::from_elem(self.values[root].raw_dim(), 1.0));
        for i in (0..=root).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(f) = self.backwards[i].take() else { continue };
            let seed = grads[i].as_ref().unwrap().clone();
            for (parent, contrib) in f(self, &seed) {
                debug_assert_eq!(
                    contrib.shape(),
                    self.values[parent].shape(),
                    "gradient shape mismatch for node {parent}"
                );
                match &mut grads[parent] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
        }
        Gradients { by_node: grads }
    }

    // ---- broadcast arithmetic ----

    fn binary_broadcast(
        &mut self,
        a: NodeId,
        b: NodeId,
        value: ArrayD<f64>,
        back_a: impl Fn(&Graph, &ArrayD<f64>) -> ArrayD<f64> + 'static,
        back_b: impl Fn(&Graph, &ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> NodeId {
        let ta = self.grad_tracked[a];
        let tb = self.grad_tracked[b];
        if !ta && !tb {
            return self.constant(value);
        }
        let backward: BackwardFn = Box::new(move |g, grad| {
            let mut out = Vec::with_capacity(2);
            if ta {
                let full = back_a(g, grad);
                out.push((a, reduce_to_shape(&full, g.values[a].shape())));
            }
            if tb {
                let full = back_b(g, grad);
                out.push((b, reduce_to_shape(&full, g.values[b].shape())));
            }
            out
        });
        self.push(value, true, Some(backward))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = broadcast_apply(&self.values[a], &self.values[b], |x, y| x + y);
        self.binary_broadcast(a, b, value, |_, grad| grad.clone(), |_, grad| grad.clone())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = broadcast_apply(&self.values[a], &self.values[b], |x, y| x - y);
        self.binary_broadcast(a, b, value, |_, grad| grad.clone(), |_, grad| -grad)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = broadcast_apply(&self.values[a], &self.values[b], |x, y| x * y);
        self.binary_broadcast(
            a,
            b,
            value,
            move |g, grad| broadcast_apply(grad, &g.values[b], |d, y| d * y),
            move |g, grad| broadcast_apply(grad, &g.values[a], |d, x| d * x),
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = broadcast_apply(&self.values[a], &self.values[b], |x, y| x / y);
        self.binary_broadcast(
            a,
            b,
            value,
            move |g, grad| broadcast_apply(grad, &g.values[b], |d, y| d / y),
            move |g, grad| {
                let num = broadcast_apply(grad, &g.values[a], |d, x| d * x);
                broadcast_apply(&num, &g.values[b], |n, y| -n / (y * y))
            },
        )
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = -&self.values[a];
        self.unary(a, value, |_, grad| -grad)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = &self.values[a] * c;
        self.unary(a, value, move |_, grad| grad * c)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = &self.values[a] + c;
        self.unary(a, value, |_, grad| grad.clone())
    }

    // ---- pointwise nonlinearities ----

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(|v| v.max(0.0));
        self.unary(a, value, move |g, grad| {
            let mut out = grad.clone();
            out.zip_mut_with(&g.values[a], |d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            out
        })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let value = self.values[a].mapv(|v| if v > 0.0 { v } else { slope * v });
        self.unary(a, value, move |g, grad| {
            let mut out = grad.clone();
            out.zip_mut_with(&g.values[a], |d, &x| {
                if x <= 0.0 {
                    *d *= slope;
                }
            });
            out
        })
    }

    pub fn elu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let value = self.values[a].mapv(|v| if v > 0.0 { v } else { alpha * (v.exp() - 1.0) });
        self.unary(a, value, move |g, grad| {
            let mut out = grad.clone();
            out.zip_mut_with(&g.values[a], |d, &x| {
                if x <= 0.0 {
                    *d *= alpha * x.exp();
                }
            });
            out
        })
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let f = |x: f64| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh());
        let value = self.values[a].mapv(f);
        self.unary(a, value, move |g, grad| {
            let mut out = grad.clone();
            out.zip_mut_with(&g.values[a], |d, &x| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            });
            out
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let id_holder = self.unary(a, value, |_, _| unreachable!());
        // Rebuild the closure so it can read this node's own output.
        let me = id_holder;
        if self.grad_tracked[a] {
            self.backwards[me] = Some(Box::new(move |g, grad| {
                let y = &g.values[me];
                let mut out = grad.clone();
                out.zip_mut_with(y, |d, &yv| *d *= yv * (1.0 - yv));
                vec![(a, out)]
            }));
        }
        me
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(f64::tanh);
        let me = self.unary(a, value, |_, _| unreachable!());
        if self.grad_tracked[a] {
            self.backwards[me] = Some(Box::new(move |g, grad| {
                let y = &g.values[me];
                let mut out = grad.clone();
                out.zip_mut_with(y, |d, &yv| *d *= 1.0 - yv * yv);
                vec![(a, out)]
            }));
        }
        me
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(f64::exp);
        let me = self.unary(a, value, |_, _| unreachable!());
        if self.grad_tracked[a] {
            self.backwards[me] = Some(Box::new(move |g, grad| {
                let mut out = grad.clone();
                out.zip_mut_with(&g.values[me], |d, &yv| *d *= yv);
                vec![(a, out)]
            }));
        }
        me
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(f64::ln);
        self.unary(a, value, move |g, grad| {
            let mut out = grad.clone();
            out.zip_mut_with(&g.values[a], |d, &x| *d /= x);
            out
        })
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(f64::sqrt);
        let me = self.unary(a, value, |_, _| unreachable!());
        if self.grad_tracked[a] {
            self.backwards[me] = Some(Box::new(move |g, grad| {
                let mut out = grad.clone();
                out.zip_mut_with(&g.values[me], |d, &yv| *d *= 0.5 / yv);
                vec![(a, out)]
            }));
        }
        me
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(|v| v * v);
        self.unary(a, value, move |g, grad| {
            let mut out = grad.clone();
            out.zip_mut_with(&g.values[a], |d, &x| *d *= 2.0 * x);
            out
        })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        // ln(1 + e^x), computed stably.
        let value = self.values[a].mapv(|v| {
            if v > 30.0 {
                v
            } else {
                v.exp().ln_1p()
            }
        });
        self.unary(a, value, move |g, grad| {
            let mut out = grad.clone();
            out.zip_mut_with(&g.values[a], |d, &x| *d *= 1.0 / (1.0 + (-x).exp()));
            out
        })
    }

    /// Value copy with no gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].clone();
        self.constant(value)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = ArrayD::from_elem(IxDyn(&[]), self.values[a].sum());
        self.unary(a, value, move |g, grad| {
            let d = *grad.iter().next().unwrap();
            ArrayD::from_elem(g.values[a].raw_dim(), d)
        })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let mut value = self.values[a].clone();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter().rev() {
            value = value.sum_axis(Axis(ax));
        }
        for &ax in sorted.iter() {
            value = value.insert_axis(Axis(ax));
        }
        self.unary(a, value, move |g, grad| {
            grad.broadcast(g.values[a].raw_dim())
                .expect("keepdim gradient broadcasts to input")
                .to_owned()
        })
    }

    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let shape = self.values[a].shape().to_vec();
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- shape ops ----

    /// Reshape with logical (row-major) element order.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.values[a].len(), "reshape cannot change element count");
        let value = reorder(&self.values[a], shape);
        let in_shape = self.values[a].shape().to_vec();
        self.unary(a, value, move |_, grad| reorder(grad, &in_shape))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let value = self.values[a].clone().permuted_axes(IxDyn(perm));
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.unary(a, value, move |_, grad| {
            grad.clone().permuted_axes(IxDyn(&inverse))
        })
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.values[p].view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes agree");
        let tracked = parts.iter().any(|&p| self.grad_tracked[p]);
        if !tracked {
            return self.constant(value);
        }
        let parts: Vec<NodeId> = parts.to_vec();
        let backward: BackwardFn = Box::new(move |g, grad| {
            let mut out = Vec::new();
            let mut offset = 0isize;
            for &p in &parts {
                let len = g.values[p].shape()[axis] as isize;
                let piece = grad
                    .slice_axis(Axis(axis), Slice::new(offset, Some(offset + len), 1))
                    .to_owned();
                offset += len;
                if g.grad_tracked[p] {
                    out.push((p, piece));
                }
            }
            out
        });
        self.push(value, true, Some(backward))
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let value = self.values[a]
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        self.unary(a, value, move |g, grad| {
            let mut out = ArrayD::zeros(g.values[a].raw_dim());
            out.slice_axis_mut(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .assign(grad);
            out
        })
    }

    /// Select rows along `axis` by index; repeated indices accumulate in the
    /// backward pass.
    pub fn index_select(&mut self, a: NodeId, axis: usize, indices: &[usize]) -> NodeId {
        let value = self.values[a].select(Axis(axis), indices);
        let indices: Vec<usize> = indices.to_vec();
        self.unary(a, value, move |g, grad| {
            let mut out = ArrayD::zeros(g.values[a].raw_dim());
            for (slot, &src) in indices.iter().enumerate() {
                let mut dst = out.index_axis_mut(Axis(axis), src);
                dst += &grad.index_axis(Axis(axis), slot);
            }
            out
        })
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = as2(&self.values[a]);
        let vb = as2(&self.values[b]);
        let value = va.dot(&vb).into_dyn();
        let ta = self.grad_tracked[a];
        let tb = self.grad_tracked[b];
        if !ta && !tb {
            return self.constant(value);
        }
        let backward: BackwardFn = Box::new(move |g, grad| {
            let dy = as2(grad);
            let mut out = Vec::with_capacity(2);
            if ta {
                let vb = as2(&g.values[b]);
                out.push((a, dy.dot(&vb.t()).into_dyn()));
            }
            if tb {
                let va = as2(&g.values[a]);
                out.push((b, va.t().dot(&dy).into_dyn()));
            }
            out
        });
        self.push(value, true, Some(backward))
    }

    /// Batched matmul over the leading axis: (B,m,k) x (B,k,n) -> (B,m,n).
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = bmm_values(&self.values[a], &self.values[b], false, false);
        let ta = self.grad_tracked[a];
        let tb = self.grad_tracked[b];
        if !ta && !tb {
            return self.constant(value);
        }
        let backward: BackwardFn = Box::new(move |g, grad| {
            let mut out = Vec::with_capacity(2);
            if ta {
                out.push((a, bmm_values(grad, &g.values[b], false, true)));
            }
            if tb {
                out.push((b, bmm_values(&g.values[a], grad, true, false)));
            }
            out
        });
        self.push(value, true, Some(backward))
    }

    // ---- softmax family ----

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let mut value = self.values[a].clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        let me = self.unary(a, value, |_, _| unreachable!());
        if self.grad_tracked[a] {
            self.backwards[me] = Some(Box::new(move |g, grad| {
                let y = &g.values[me];
                let mut out = grad * y;
                for (mut o_lane, y_lane) in
                    out.lanes_mut(Axis(axis)).into_iter().zip(y.lanes(Axis(axis)))
                {
                    let dot: f64 = o_lane.sum();
                    o_lane
                        .iter_mut()
                        .zip(y_lane.iter())
                        .for_each(|(o, &yv)| *o -= dot * yv);
                }
                vec![(a, out)]
            }));
        }
        me
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let mut value = self.values[a].clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = lane.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            lane.mapv_inplace(|v| v - log_sum);
        }
        let me = self.unary(a, value, |_, _| unreachable!());
        if self.grad_tracked[a] {
            self.backwards[me] = Some(Box::new(move |g, grad| {
                let y = &g.values[me];
                let mut out = grad.clone();
                for (mut o_lane, y_lane) in
                    out.lanes_mut(Axis(axis)).into_iter().zip(y.lanes(Axis(axis)))
                {
                    let dsum: f64 = o_lane.sum();
                    o_lane
                        .iter_mut()
                        .zip(y_lane.iter())
                        .for_each(|(o, &yv)| *o -= dsum * yv.exp());
                }
                vec![(a, out)]
            }));
        }
        me
    }

    /// Mean negative log-likelihood: picks `logp[i, targets[i]]` from a (N,C)
    /// log-probability matrix.
    pub fn nll_loss(&mut self, logp: NodeId, targets: &[usize]) -> NodeId {
        let v = &self.values[logp];
        assert_eq!(v.ndim(), 2, "nll_loss expects (N, C) log-probabilities");
        let n = v.shape()[0];
        assert_eq!(n, targets.len());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total -= v[[i, t]];
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / n as f64);
        let targets: Vec<usize> = targets.to_vec();
        self.unary(logp, value, move |g, grad| {
            let d = *grad.iter().next().unwrap();
            let mut out = ArrayD::zeros(g.values[logp].raw_dim());
            let scale = d / targets.len() as f64;
            for (i, &t) in targets.iter().enumerate() {
                out[[i, t]] = -scale;
            }
            out
        })
    }

    /// Nearest-neighbor upsampling by an integer factor on (N,C,H,W).
    pub fn upsample_nearest(&mut self, a: NodeId, factor: usize) -> NodeId {
        let v = &self.values[a];
        assert_eq!(v.ndim(), 4);
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h * factor, w * factor]));
        for in_ in 0..n {
            for ic in 0..c {
                for y in 0..h * factor {
                    for x in 0..w * factor {
                        out[[in_, ic, y, x]] = v[[in_, ic, y / factor, x / factor]];
                    }
                }
            }
        }
        self.unary(a, out, move |g, grad| {
            let vi = &g.values[a];
            let (n, c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2], vi.shape()[3]);
            let mut out = ArrayD::zeros(vi.raw_dim());
            for in_ in 0..n {
                for ic in 0..c {
                    for y in 0..h * factor {
                        for x in 0..w * factor {
                            out[[in_, ic, y / factor, x / factor]] += grad[[in_, ic, y, x]];
                        }
                    }
                }
            }
            out
        })
    }
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("2-d tensor required")
}

fn bmm_values(a: &ArrayD<f64>, b: &ArrayD<f64>, ta: bool, tb: bool) -> ArrayD<f64> {
    assert_eq!(a.ndim(), 3);
    assert_eq!(b.ndim(), 3);
    let batch = a.shape()[0];
    assert_eq!(batch, b.shape()[0]);
    let mut out: Option<ArrayD<f64>> = None;
    for i in 0..batch {
        let av = a.index_axis(Axis(0), i);
        let bv = b.index_axis(Axis(0), i);
        let am: ndarray::ArrayView2<f64> = av.into_dimensionality().unwrap();
        let bm: ndarray::ArrayView2<f64> = bv.into_dimensionality().unwrap();
        let prod = match (ta, tb) {
            (false, false) => am.dot(&bm),
            (false, true) => am.dot(&bm.t()),
            (true, false) => am.t().dot(&bm),
            (true, true) => am.t().dot(&bm.t()),
        };
        let (m, n) = prod.dim();
        let slot =
            out.get_or_insert_with(|| ArrayD::zeros(IxDyn(&[batch, m, n])));
        slot.index_axis_mut(Axis(0), i)
            .assign(&prod.into_dyn());
    }
    out.expect("batch must be non-empty")
}

/// Row-major reorder into a new shape regardless of the source layout.
fn reorder(v: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let flat: Vec<f64> = v.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("element counts agree")
}

/// NumPy-style broadcast of a binary op.
pub(crate) fn broadcast_apply(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcasts");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcasts");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} do not broadcast"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum a broadcast gradient back down to the original operand shape.
pub(crate) fn reduce_to_shape(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in g.shape().to_vec().iter().zip(shape).enumerate() {
        if want == 1 && have != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use ndarray::{arr1, arr2};

    #[test]
    fn add_broadcasts_and_reduces() {
        let mut g = Graph::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.leaf(arr1(&[10.0, 20.0]).into_dyn());
        let c = g.add(a, b);
        assert_eq!(g.value(c), &arr2(&[[11.0, 22.0], [13.0, 24.0]]).into_dyn());
        let s = g.sum_all(c);
        let grads = g.backward(s);
        assert_eq!(grads.get(b).unwrap(), &arr1(&[2.0, 2.0]).into_dyn());
        assert_eq!(
            grads.get(a).unwrap(),
            &arr2(&[[1.0, 1.0], [1.0, 1.0]]).into_dyn()
        );
    }

    #[test]
    fn matmul_gradients_match_central_differences() {
        check_gradients(
            &[&[3, 4], &[4, 2]],
            |g, xs| {
                let y = g.matmul(xs[0], xs[1]);
                let y2 = g.square(y);
                g.mean_all(y2)
            },
            1,
            1e-5,
        );
    }

    #[test]
    fn pointwise_chain_gradients_match() {
        check_gradients(
            &[&[4, 5]],
            |g, xs| {
                let a = g.tanh(xs[0]);
                let b = g.gelu(a);
                let c = g.sigmoid(b);
                let d = g.softplus(c);
                let e = g.elu(d, 1.0);
                g.mean_all(e)
            },
            2,
            1e-5,
        );
    }

    #[test]
    fn softmax_and_nll_gradients_match() {
        check_gradients(
            &[&[5, 3]],
            |g, xs| {
                let lp = g.log_softmax(xs[0], 1);
                g.nll_loss(lp, &[0, 2, 1, 1, 0])
            },
            3,
            1e-5,
        );
        check_gradients(
            &[&[2, 6]],
            |g, xs| {
                let s = g.softmax(xs[0], 1);
                let sq = g.square(s);
                g.sum_all(sq)
            },
            4,
            1e-5,
        );
    }

    #[test]
    fn shape_ops_round_trip_gradients() {
        check_gradients(
            &[&[2, 3, 4]],
            |g, xs| {
                let p = g.permute(xs[0], &[2, 0, 1]);
                let r = g.reshape(p, &[4, 6]);
                let s = g.slice_axis(r, 0, 1, 2);
                let sq = g.square(s);
                g.mean_all(sq)
            },
            5,
            1e-5,
        );
    }

    #[test]
    fn index_select_accumulates_repeats() {
        let mut g = Graph::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let sel = g.index_select(a, 0, &[0, 0, 1]);
        assert_eq!(g.value(sel).shape(), &[3, 2]);
        let s = g.sum_all(sel);
        let grads = g.backward(s);
        assert_eq!(
            grads.get(a).unwrap(),
            &arr2(&[[2.0, 2.0], [1.0, 1.0]]).into_dyn()
        );
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        check_gradients(
            &[&[2, 3, 4], &[2, 4, 2]],
            |g, xs| {
                let y = g.bmm(xs[0], xs[1]);
                let sq = g.square(y);
                g.mean_all(sq)
            },
            6,
            1e-5,
        );
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut g = Graph::new();
        let a = g.leaf(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        let d = g.detach(a);
        let b = g.mul(a, d);
        let s = g.sum_all(b);
        let grads = g.backward(s);
        // d(a * const)/da = const, with nothing flowing through the detach.
        assert_eq!(grads.get(a).unwrap(), &arr1(&[1.0, 2.0, 3.0]).into_dyn());
    }

    #[test]
    fn param_rebinding_accumulates_gradients() {
        use crate::nn::params::ParamStore;
        let mut ps = ParamStore::new();
        let w = ps.add("w", arr1(&[2.0]).into_dyn());
        let mut g = Graph::new();
        let n1 = g.param(&ps, w);
        let n2 = g.param(&ps, w);
        assert_eq!(n1, n2, "same param must bind to the same node");
        let prod = g.mul(n1, n2); // w^2
        let s = g.sum_all(prod);
        let grads = g.backward(s);
        // d(w^2)/dw = 2w = 4.
        assert_eq!(grads.get(n1).unwrap(), &arr1(&[4.0]).into_dyn());
    }

    #[test]
    fn upsample_and_reductions_check_out() {
        check_gradients(
            &[&[1, 2, 3, 3]],
            |g, xs| {
                let u = g.upsample_nearest(xs[0], 2);
                let m = g.mean_axes(u, &[2, 3]);
                let sq = g.square(m);
                g.sum_all(sq)
            },
            7,
            1e-5,
        );
    }

    #[test]
    fn broadcast_div_gradients_match() {
        check_gradients(
            &[&[3, 4], &[1, 4]],
            |g, xs| {
                // Keep the denominator away from zero.
                let sq = g.square(xs[1]);
                let denom = g.add_scalar(sq, 1.0);
                let y = g.div(xs[0], denom);
                g.mean_all(y)
            },
            8,
            1e-5,
        );
    }
}
