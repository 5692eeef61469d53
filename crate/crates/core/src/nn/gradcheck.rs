//! Central-difference gradient verification.

use super::graph::{Graph, NodeId};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const STEP: f64 = 1e-5;

/// Compare the analytic gradient of `f` (a scalar-valued graph builder over
/// leaves of the given shapes) against central differences at every element.
/// Panics if any relative error reaches `tol`; returns the worst error seen.
pub fn check_gradients(
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    seed: u64,
    tol: f64,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let base: Vec<ArrayD<f64>> = shapes
        .iter()
        .map(|s| ArrayD::from_shape_simple_fn(IxDyn(s), || rng.gen_range(-1.0..1.0)))
        .collect();
    check_gradients_at(&base, f, tol)
}

/// Same as [`check_gradients`] but at caller-chosen input values.
pub fn check_gradients_at(
    base: &[ArrayD<f64>],
    f: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    tol: f64,
) -> f64 {
    let eval = |vals: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.leaf(v.clone())).collect();
        let root = f(&mut g, &ids);
        g.scalar_value(root)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = base.iter().map(|v| g.leaf(v.clone())).collect();
    let root = f(&mut g, &ids);
    let grads = g.backward(root);

    let mut worst = 0.0f64;
    for (i, value) in base.iter().enumerate() {
        let analytic = grads.get(ids[i]);
        for j in 0..value.len() {
            let mut plus = base.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += STEP;
            let mut minus = base.to_vec();
            minus[i].as_slice_mut().unwrap()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            // Logical-order lookup: analytic grads may be non-contiguous
            // (e.g. out of a permute backward).
            let a = analytic
                .map(|arr| arr.iter().nth(j).copied().unwrap())
                .unwrap_or(0.0);
            let rel = (a - numeric).abs() / f64::max(1.0, f64::max(a.abs(), numeric.abs()));
            assert!(
                rel < tol,
                "input {i} element {j}: analytic {a} vs numeric {numeric} (rel {rel:.3e} >= {tol:.1e})"
            );
            worst = worst.max(rel);
        }
    }
    worst
}
