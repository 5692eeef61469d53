//! Reusable layers over the tape graph. Construction registers parameters
//! under a caller-chosen name prefix; forward binds them into the graph.

use super::conv::ConvSpec;
use super::graph::{Graph, NodeId};
use super::params::{self, ParamId, ParamStore};
use ndarray::Axis;
use rand_chacha::ChaCha12Rng;

pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            params::xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
        );
        let b = bias.then(|| ps.add(&format!("{name}.b"), params::zeros(&[d_out])));
        Self { w, b, d_in, d_out }
    }

    /// Kaiming-initialized variant for layers feeding a ReLU family.
    pub fn new_relu(
        ps: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(
            &format!("{name}.w"),
            params::kaiming_normal(rng, &[d_in, d_out], d_in),
        );
        let b = bias.then(|| ps.add(&format!("{name}.b"), params::zeros(&[d_out])));
        Self { w, b, d_in, d_out }
    }

    /// Input (N, d_in) or (N, T, d_in); the last axis is transformed.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(*shape.last().unwrap(), self.d_in, "linear input dim");
        let w = g.param(ps, self.w);
        let flat = if shape.len() == 2 {
            x
        } else {
            let rows: usize = shape[..shape.len() - 1].iter().product();
            g.reshape(x, &[rows, self.d_in])
        };
        let mut y = g.matmul(flat, w);
        if let Some(b) = self.b {
            let bn = g.param(ps, b);
            y = g.add(y, bn);
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.d_out;
            g.reshape(y, &out_shape)
        }
    }
}

pub struct Conv2dLayer {
    w: ParamId,
    b: Option<ParamId>,
    pub spec: ConvSpec,
    out_channels: usize,
}

impl Conv2dLayer {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = ps.add(
            &format!("{name}.w"),
            params::kaiming_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
        );
        let b = bias.then(|| ps.add(&format!("{name}.b"), params::zeros(&[out_ch])));
        Self { w, b, spec, out_channels: out_ch }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(ps, self.w);
        let mut y = g.conv2d(x, w, self.spec);
        if let Some(b) = self.b {
            let bn = g.param(ps, b);
            let bshaped = g.reshape(bn, &[1, self.out_channels, 1, 1]);
            y = g.add(y, bshaped);
        }
        y
    }
}

pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(&format!("{name}.gamma"), params::ones(&[channels])),
            beta: ps.add(&format!("{name}.beta"), params::zeros(&[channels])),
            running_mean: ps.add_buffer(&format!("{name}.running_mean"), params::zeros(&[channels])),
            running_var: ps.add_buffer(&format!("{name}.running_var"), params::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &mut ParamStore, x: NodeId, train: bool) -> NodeId {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        if train {
            let (mean, var) = channel_stats(g.value(x));
            let mom = self.momentum;
            update_running(ps.value_mut(self.running_mean), &mean, mom);
            update_running(ps.value_mut(self.running_var), &var, mom);
            g.batch_norm(x, gamma, beta, &mean, &var, self.eps, true)
        } else {
            let mean = ps.value(self.running_mean).as_slice().unwrap().to_vec();
            let var = ps.value(self.running_var).as_slice().unwrap().to_vec();
            g.batch_norm(x, gamma, beta, &mean, &var, self.eps, false)
        }
    }
}

fn channel_stats(x: &ndarray::ArrayD<f64>) -> (Vec<f64>, Vec<f64>) {
    let c = x.shape()[1];
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ic in 0..c {
        let slice = x.index_axis(Axis(1), ic);
        let m = slice.mean().unwrap();
        mean[ic] = m;
        var[ic] = slice.mapv(|v| (v - m) * (v - m)).mean().unwrap();
    }
    (mean, var)
}

fn update_running(running: &mut ndarray::ArrayD<f64>, batch: &[f64], momentum: f64) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Layer normalization over the last axis, composed from graph primitives.
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    pub eps: f64,
    dim: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(&format!("{name}.gamma"), params::ones(&[dim])),
            beta: ps.add(&format!("{name}.beta"), params::zeros(&[dim])),
            eps: 1e-6,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let last = g.value(x).ndim() - 1;
        assert_eq!(g.value(x).shape()[last], self.dim, "layer norm dim");
        let mu = g.mean_axes(x, &[last]);
        let centered = g.sub(x, mu);
        let sq = g.square(centered);
        let var = g.mean_axes(sq, &[last]);
        let var_eps = g.add_scalar(var, self.eps);
        let std = g.sqrt(var_eps);
        let xhat = g.div(centered, std);
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        let scaled = g.mul(xhat, gamma);
        g.add(scaled, beta)
    }
}

/// Mean over the two spatial axes of (N,C,H,W), flattened to (N,C).
pub fn global_avg_pool(g: &mut Graph, x: NodeId) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(shape.len(), 4);
    let m = g.mean_axes(x, &[2, 3]);
    g.reshape(m, &[shape[0], shape[1]])
}
