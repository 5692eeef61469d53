//! Vision transformer building blocks: patch embedding, multi-head
//! attention with an optional causal mask, and pre-norm encoder blocks.

use super::graph::{Graph, NodeId};
use super::layers::{LayerNorm, Linear};
use super::params::{self, ParamId, ParamStore};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

/// (N,C,H,W) -> (N, P, C*patch*patch) with P = (H/patch)*(W/patch), patches
/// in row-major grid order.
pub fn patchify(g: &mut Graph, x: NodeId, patch: usize) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(h % patch == 0 && w % patch == 0, "side not divisible by patch");
    let (gh, gw) = (h / patch, w / patch);
    let r = g.reshape(x, &[n, c, gh, patch, gw, patch]);
    let p = g.permute(r, &[0, 2, 4, 1, 3, 5]);
    g.reshape(p, &[n, gh * gw, c * patch * patch])
}

/// Inverse of [`patchify`] for square images.
pub fn unpatchify(g: &mut Graph, x: NodeId, patch: usize, channels: usize, side: usize) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let (n, p) = (shape[0], shape[1]);
    let grid = side / patch;
    assert_eq!(p, grid * grid, "patch count mismatch");
    assert_eq!(shape[2], channels * patch * patch);
    let r = g.reshape(x, &[n, grid, grid, channels, patch, patch]);
    let pm = g.permute(r, &[0, 3, 1, 4, 2, 5]);
    g.reshape(pm, &[n, channels, side, side])
}

/// Additive attention mask forbidding token t from seeing tokens > t.
pub fn causal_mask(t: usize) -> ArrayD<f64> {
    let mut m = ArrayD::zeros(IxDyn(&[t, t]));
    for i in 0..t {
        for j in i + 1..t {
            m[[i, j]] = -1e9;
        }
    }
    m
}

pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide by heads");
        Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(ps, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(ps, rng, &format!("{name}.v"), dim, dim, true),
            proj: Linear::new(ps, rng, &format!("{name}.proj"), dim, dim, true),
            heads,
            dim,
        }
    }

    /// x: (N, T, D); `mask` is an additive (T, T) bias, e.g. [`causal_mask`].
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: NodeId,
        mask: Option<&ArrayD<f64>>,
    ) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.dim);
        let dh = d / self.heads;

        let to_heads = |g: &mut Graph, v: NodeId| -> NodeId {
            let r = g.reshape(v, &[n, t, self.heads, dh]);
            let p = g.permute(r, &[0, 2, 1, 3]);
            g.reshape(p, &[n * self.heads, t, dh])
        };
        let q = self.q.forward(g, ps, x);
        let k = self.k.forward(g, ps, x);
        let v = self.v.forward(g, ps, x);
        let qh = to_heads(g, q);
        let kh = to_heads(g, k);
        let vh = to_heads(g, v);

        let kt = g.permute(kh, &[0, 2, 1]);
        let scores = g.bmm(qh, kt);
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let biased = match mask {
            Some(m) => {
                assert_eq!(m.shape(), &[t, t]);
                let mn = g.constant(m.clone());
                g.add(scaled, mn)
            }
            None => scaled,
        };
        let attn = g.softmax(biased, 2);
        let ctx = g.bmm(attn, vh);
        let r = g.reshape(ctx, &[n, self.heads, t, dh]);
        let p = g.permute(r, &[0, 2, 1, 3]);
        let merged = g.reshape(p, &[n, t, d]);
        self.proj.forward(g, ps, merged)
    }
}

/// Pre-norm transformer block: LN -> MHA -> residual, LN -> MLP -> residual.
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), dim, dim * mlp_ratio, true),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), dim * mlp_ratio, dim, true),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: NodeId,
        mask: Option<&ArrayD<f64>>,
    ) -> NodeId {
        let h = self.ln1.forward(g, ps, x);
        let a = self.attn.forward(g, ps, h, mask);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, ps, x);
        let m = self.fc1.forward(g, ps, h);
        let m = g.gelu(m);
        let m = self.fc2.forward(g, ps, m);
        g.add(x, m)
    }
}

/// Patch projection plus a learned positional table.
pub struct PatchEmbed {
    proj: Linear,
    pos: ParamId,
    pub patch: usize,
    pub seq_len: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        patch: usize,
        in_channels: usize,
        side: usize,
        dim: usize,
    ) -> Self {
        assert_eq!(side % patch, 0);
        let grid = side / patch;
        let seq_len = grid * grid;
        let proj = Linear::new(
            ps,
            rng,
            &format!("{name}.proj"),
            in_channels * patch * patch,
            dim,
            true,
        );
        let pos = ps.add(
            &format!("{name}.pos"),
            params::normal(rng, &[1, seq_len, dim], 0.02),
        );
        Self { proj, pos, patch, seq_len, dim }
    }

    /// (N,C,H,W) -> (N, P, dim) with positions added.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let patches = patchify(g, x, self.patch);
        let tokens = self.proj.forward(g, ps, patches);
        let pos = g.param(ps, self.pos);
        g.add(tokens, pos)
    }
}

/// Trainable-parameter count of an encoder assembled from these parts; used
/// as an oracle against actually built models.
pub fn encoder_param_count(
    patch: usize,
    in_channels: usize,
    side: usize,
    dim: usize,
    depth: usize,
    heads: usize,
    mlp_ratio: usize,
) -> usize {
    let _ = heads; // head count does not change the parameter count
    let grid = side / patch;
    let seq = grid * grid;
    let patch_in = in_channels * patch * patch;
    let embed = patch_in * dim + dim + seq * dim;
    let per_block = {
        let ln = 2 * dim;
        let attn = 4 * (dim * dim + dim);
        let mlp = dim * (dim * mlp_ratio) + dim * mlp_ratio + (dim * mlp_ratio) * dim + dim;
        2 * ln + attn + mlp
    };
    embed + depth * per_block
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn patchify_round_trips() {
        let mut g = Graph::new();
        let mut arr = ArrayD::zeros(IxDyn(&[2, 3, 8, 8]));
        let mut k = 0.0;
        arr.mapv_inplace(|_| {
            k += 1.0;
            k
        });
        let x = g.constant(arr.clone());
        let p = patchify(&mut g, x, 4);
        assert_eq!(g.value(p).shape(), &[2, 4, 48]);
        let back = unpatchify(&mut g, p, 4, 3, 8);
        assert_eq!(g.value(back), &arr);
    }

    #[test]
    fn patch_order_is_row_major() {
        let mut g = Graph::new();
        let mut arr = ArrayD::zeros(IxDyn(&[1, 1, 4, 4]));
        // Mark the top-right 2x2 patch.
        arr[[0, 0, 0, 2]] = 1.0;
        let x = g.constant(arr);
        let p = patchify(&mut g, x, 2);
        let v = g.value(p);
        assert_eq!(v[[0, 1, 0]], 1.0, "patch 1 should hold the mark");
        assert_eq!(v[[0, 0, 0]], 0.0);
    }

    #[test]
    fn causal_mask_blocks_the_future() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let attn = MultiHeadAttention::new(&mut ps, &mut rng, "a", 8, 2);
        let mask = causal_mask(5);

        let forward = |x: &ArrayD<f64>, ps: &ParamStore| -> ArrayD<f64> {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let y = attn.forward(&mut g, ps, xn, Some(&mask));
            g.value(y).clone()
        };
        use rand::Rng;
        let mut data_rng = ChaCha12Rng::seed_from_u64(4);
        let mut x = ArrayD::from_shape_simple_fn(IxDyn(&[1, 5, 8]), || {
            data_rng.gen_range(-1.0..1.0)
        });
        let base = forward(&x, &ps);
        // Perturb the last token; earlier outputs must not move.
        for d in 0..8 {
            x[[0, 4, d]] += 1.0;
        }
        let moved = forward(&x, &ps);
        for tok in 0..4 {
            for d in 0..8 {
                assert_eq!(
                    base[[0, tok, d]],
                    moved[[0, tok, d]],
                    "token {tok} saw the future"
                );
            }
        }
        assert_ne!(base[[0, 4, 0]], moved[[0, 4, 0]]);
    }

    #[test]
    fn attention_gradients_match_central_differences() {
        use crate::nn::gradcheck::check_gradients_at;
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let base = vec![ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 4]), || {
            rng.gen_range(-0.5..0.5)
        })];
        check_gradients_at(
            &base,
            |g, xs| {
                let mut ps = ParamStore::new();
                let mut rng = ChaCha12Rng::seed_from_u64(7);
                let attn = MultiHeadAttention::new(&mut ps, &mut rng, "a", 4, 2);
                let y = attn.forward(g, &ps, xs[0], None);
                let sq = g.square(y);
                g.mean_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn block_and_embed_shapes() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let embed = PatchEmbed::new(&mut ps, &mut rng, "pe", 8, 1, 32, 16);
        let block = TransformerBlock::new(&mut ps, &mut rng, "b0", 16, 4, 2);
        let mut g = Graph::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[2, 1, 32, 32])));
        let tokens = embed.forward(&mut g, &ps, x);
        assert_eq!(g.value(tokens).shape(), &[2, 16, 16]);
        let y = block.forward(&mut g, &ps, tokens, None);
        assert_eq!(g.value(y).shape(), &[2, 16, 16]);
    }

    #[test]
    fn param_count_oracle_matches_built_model() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let _embed = PatchEmbed::new(&mut ps, &mut rng, "pe", 8, 1, 32, 16);
        for i in 0..3 {
            let _ = TransformerBlock::new(&mut ps, &mut rng, &format!("b{i}"), 16, 4, 2);
        }
        assert_eq!(
            ps.num_trainable(),
            encoder_param_count(8, 1, 32, 16, 3, 4, 2)
        );
    }
}
