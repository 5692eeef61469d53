//! Optimizers operating on a [`ParamStore`] with gradients from a tape.

use super::graph::{Gradients, Graph};
use super::params::{ParamId, ParamStore};
use ndarray::ArrayD;
use std::collections::HashMap;

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: HashMap<ParamId, ArrayD<f64>>,
    v: HashMap<ParamId, ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore, graph: &Graph, grads: &Gradients) {
        self.step_where(ps, graph, grads, |_| true);
    }

    /// Update only parameters whose name satisfies `keep`. Lets two
    /// optimizers share a store when a graph carries gradients for both
    /// groups (adversarial training).
    pub fn step_where(
        &mut self,
        ps: &mut ParamStore,
        graph: &Graph,
        grads: &Gradients,
        keep: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (pid, node) in graph.param_bindings() {
            if !ps.is_trainable(pid) || !keep(ps.name(pid)) {
                continue;
            }
            let Some(grad) = grads.get(node) else { continue };
            let value = ps.value_mut(pid);
            let mut grad = grad.clone();
            if wd != 0.0 {
                grad.zip_mut_with(value, |g, &w| *g += wd * w);
            }
            let m = self
                .m
                .entry(pid)
                .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
            let v = self
                .v
                .entry(pid)
                .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
            m.zip_mut_with(&grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(&grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| {
                    *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
        }
    }
}

/// SGD with classical momentum and decoupled weight decay added to the
/// gradient (the convention contrastive recipes use).
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: HashMap::new() }
    }

    pub fn step(&mut self, ps: &mut ParamStore, graph: &Graph, grads: &Gradients) {
        let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
        for (pid, node) in graph.param_bindings() {
            if !ps.is_trainable(pid) {
                continue;
            }
            let Some(grad) = grads.get(node) else { continue };
            let value = ps.value_mut(pid);
            let mut grad = grad.clone();
            if wd != 0.0 {
                grad.zip_mut_with(value, |g, &w| *g += wd * w);
            }
            let vel = self
                .velocity
                .entry(pid)
                .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
            vel.zip_mut_with(&grad, |v, &g| *v = mom * *v + g);
            value.zip_mut_with(&*vel, |w, &v| *w -= lr * v);
        }
    }
}

/// Half-cosine decay from `base_lr` to zero over `total_steps`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    assert!(total_steps > 0);
    let t = (step as f64 / total_steps as f64).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params;

    /// Minimize ||w - target||^2 and expect convergence.
    fn converges(mut step_fn: impl FnMut(&mut ParamStore, &Graph, &Gradients), ps: &mut ParamStore) -> f64 {
        let w = ps.id("w").unwrap();
        let target = ndarray::arr1(&[1.0, -2.0, 3.0]).into_dyn();
        for _ in 0..400 {
            let mut g = Graph::new();
            let wn = g.param(ps, w);
            let t = g.constant(target.clone());
            let d = g.sub(wn, t);
            let sq = g.square(d);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            step_fn(ps, &g, &grads);
        }
        (ps.value(w) - &target).mapv(f64::abs).sum()
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut ps = ParamStore::new();
        ps.add("w", params::zeros(&[3]));
        let mut opt = Adam::new(0.05);
        let err = converges(|ps, g, gr| opt.step(ps, g, gr), &mut ps);
        assert!(err < 1e-3, "residual {err}");
    }

    #[test]
    fn sgd_momentum_converges_on_a_quadratic() {
        let mut ps = ParamStore::new();
        ps.add("w", params::zeros(&[3]));
        let mut opt = SgdMomentum::new(0.05, 0.9, 0.0);
        let err = converges(|ps, g, gr| opt.step(ps, g, gr), &mut ps);
        assert!(err < 1e-3, "residual {err}");
    }

    #[test]
    fn buffers_are_never_updated() {
        let mut ps = ParamStore::new();
        ps.add("w", params::zeros(&[2]));
        let q = ps.add_buffer("queue", params::ones(&[2]));
        let mut opt = Adam::new(0.1);
        let mut g = Graph::new();
        let wn = g.param(&ps, ps.id("w").unwrap());
        let qn = g.param(&ps, q);
        let s = g.add(wn, qn);
        let sq = g.square(s);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        opt.step(&mut ps, &g, &grads);
        assert_eq!(ps.value(q), &params::ones(&[2]), "buffer moved");
        assert_ne!(ps.value(ps.id("w").unwrap()), &params::zeros(&[2]));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0.1, 0, 100) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-12);
        assert!(cosine_lr(0.1, 150, 100).abs() < 1e-12, "clamps past the end");
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut ps = ParamStore::new();
        ps.add("w", params::full(&[1], 5.0));
        let mut opt = SgdMomentum::new(0.1, 0.0, 0.5);
        for _ in 0..200 {
            let mut g = Graph::new();
            let wn = g.param(&ps, ps.id("w").unwrap());
            // Loss is identically zero; only decay acts.
            let z = g.scale(wn, 0.0);
            let loss = g.sum_all(z);
            let grads = g.backward(loss);
            opt.step(&mut ps, &g, &grads);
        }
        let w = ps.value(ps.id("w").unwrap()).iter().copied().next().unwrap();
        assert!(w.abs() < 0.01, "w = {w}");
    }
}
