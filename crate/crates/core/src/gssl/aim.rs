//! Autoregressive image modeling: a causal transformer predicts each patch
//! from the patches before it under a per-batch random ordering. Targets
//! are per-patch standardized pixels; the downstream embedding mean-pools
//! the final-layer patch features.

use super::{
    adapt_for_embedding, epoch_order, patches_nd, prepare_corpus, stack, DivergenceGuard,
    GenerativeTrainConfig,
};
use crate::checkpoint::{CheckpointMeta, EncoderCheckpoint, MetricRecord};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::imageops::ProcessedImage;
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::transformer::{causal_mask, PatchEmbed, TransformerBlock};
use crate::nn::{params, Adam, Graph, NodeId, ParamId, ParamStore};
use crate::seeds;
use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AimConfig {
    pub side: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
}

impl Default for AimConfig {
    fn default() -> Self {
        Self { side: 224, patch: 32, dim: 768, depth: 12, heads: 12, mlp_ratio: 4, in_channels: 1 }
    }
}

impl AimConfig {
    pub fn seq_len(&self) -> usize {
        let grid = self.side / self.patch;
        grid * grid
    }

    pub fn patch_pixels(&self) -> usize {
        self.in_channels * self.patch * self.patch
    }

    fn validate_geometry(&self) -> Result<()> {
        if self.patch == 0 || self.side % self.patch != 0 {
            return Err(Error::Config(format!(
                "side {} not divisible by patch {}",
                self.side, self.patch
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must divide by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        if self.side != 64 && self.side != 224 {
            return Err(Error::Config(format!("side must be 64 or 224, got {}", self.side)));
        }
        Ok(())
    }
}

/// Standardize each patch row to zero mean, unit variance (population
/// statistics, small epsilon for flat patches).
fn normalize_rows_nd(patches: &mut Array3<f64>) {
    let pix = patches.dim().2 as f64;
    for mut row in patches.rows_mut() {
        let mean = row.sum() / pix;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / pix;
        let sd = (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / sd);
    }
}

/// MSE between predictions and per-patch standardized targets, averaged
/// over every predicted position.
pub fn aim_loss(patch_sequence: &Array2<f64>, predictions: &Array2<f64>) -> Result<f64> {
    if patch_sequence.dim() != predictions.dim() {
        return Err(Error::ShapeMismatch(format!(
            "targets {:?} vs predictions {:?}",
            patch_sequence.dim(),
            predictions.dim()
        )));
    }
    if patch_sequence.is_empty() {
        return Err(Error::InvalidArgument("empty patch sequence".into()));
    }
    let (seq, pix) = patch_sequence.dim();
    let mut targets =
        Array3::from_shape_vec((1, seq, pix), patch_sequence.iter().cloned().collect())
            .expect("shape");
    normalize_rows_nd(&mut targets);
    let mse = targets
        .iter()
        .zip(predictions.iter())
        .map(|(&t, &p)| (t - p) * (t - p))
        .sum::<f64>()
        / (seq * pix) as f64;
    if !mse.is_finite() {
        return Err(Error::InvalidArgument("non-finite loss".into()));
    }
    Ok(mse)
}

pub(crate) struct Aim {
    embed: PatchEmbed,
    start: ParamId,
    qpos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    head: Linear,
    config: AimConfig,
}

impl Aim {
    pub(crate) fn new(ps: &mut ParamStore, seed: u64, config: AimConfig) -> Result<Self> {
        config.validate_geometry()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "aim-init", &[]));
        let embed = PatchEmbed::new(
            ps,
            &mut rng,
            "aim.embed",
            config.patch,
            config.in_channels,
            config.side,
            config.dim,
        );
        let start = ps.add("aim.start", params::normal(&mut rng, &[1, 1, config.dim], 0.02));
        let qpos = ps.add(
            "aim.qpos",
            params::normal(&mut rng, &[1, config.seq_len(), config.dim], 0.02),
        );
        let blocks = (0..config.depth)
            .map(|i| {
                TransformerBlock::new(
                    ps,
                    &mut rng,
                    &format!("aim.b{i}"),
                    config.dim,
                    config.heads,
                    config.mlp_ratio,
                )
            })
            .collect();
        let ln = LayerNorm::new(ps, "aim.ln", config.dim);
        let head = Linear::new(ps, &mut rng, "aim.head", config.dim, config.patch_pixels(), true);
        Ok(Self { embed, start, qpos, blocks, ln, head, config })
    }

    /// Causal pass under `order`: position t reads the start token plus
    /// patches order[..t] and predicts patch order[t] (queried by its
    /// position embedding). Returns predictions and standardized targets,
    /// both ordered by `order`.
    fn forward_train(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: NodeId,
        order: &[usize],
    ) -> (NodeId, ArrayD<f64>) {
        let seq = self.config.seq_len();
        assert_eq!(order.len(), seq, "order must cover every patch");
        let n = g.value(x).shape()[0];

        let mut targets = patches_nd(g.value(x), self.config.patch);
        normalize_rows_nd(&mut targets);
        let targets = targets.select(Axis(1), order).into_dyn();

        let emb = self.embed.forward(g, ps, x);
        let prefix = g.index_select(emb, 1, &order[..seq - 1]);
        let zeros = g.constant(ArrayD::zeros(ndarray::IxDyn(&[n, 1, self.config.dim])));
        let start = g.param(ps, self.start);
        let start = g.add(zeros, start);
        let tokens = g.concat(1, &[start, prefix]);

        let mask = causal_mask(seq);
        let mut h = tokens;
        for block in &self.blocks {
            h = block.forward(g, ps, h, Some(&mask));
        }
        let h = self.ln.forward(g, ps, h);

        let qpos = g.param(ps, self.qpos);
        let queries = g.index_select(qpos, 1, order);
        let hq = g.add(h, queries);
        let preds = self.head.forward(g, ps, hq);
        (preds, targets)
    }

    /// Mean-pooled final-layer patch features, raster order.
    fn forward_embed(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let seq = self.config.seq_len();
        let emb = self.embed.forward(g, ps, x);
        let mask = causal_mask(seq);
        let mut h = emb;
        for block in &self.blocks {
            h = block.forward(g, ps, h, Some(&mask));
        }
        let h = self.ln.forward(g, ps, h);
        let pooled = g.mean_axes(h, &[1]);
        let n = g.value(x).shape()[0];
        g.reshape(pooled, &[n, self.config.dim])
    }
}

fn mse_to_targets(g: &mut Graph, preds: NodeId, targets: ArrayD<f64>) -> NodeId {
    let t = g.constant(targets);
    let d = g.sub(preds, t);
    let sq = g.square(d);
    g.mean_all(sq)
}

pub fn pretrain_aim(
    corpus: &Corpus,
    config: &AimConfig,
    train: &GenerativeTrainConfig,
) -> Result<EncoderCheckpoint> {
    config.validate()?;
    train.validate()?;
    let images = prepare_corpus(corpus, config.side, config.in_channels, false)?;
    let mut ps = ParamStore::new();
    let model = Aim::new(&mut ps, train.seed, config.clone())?;
    let mut opt = Adam::new(train.lr);
    let mut guard = DivergenceGuard::new();
    let mut history = Vec::new();
    let n = images.len();
    let seq = config.seq_len();
    let mut diverged: Option<usize> = None;
    let mut final_epoch = train.epochs;

    {
        let idx: Vec<usize> = (0..n.min(train.batch_size)).collect();
        let x = stack(&images, &idx);
        let order = sample_order(seq, train.seed, 0, 0);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let (preds, targets) = model.forward_train(&mut g, &ps, xn, &order);
        let loss = mse_to_targets(&mut g, preds, targets);
        history.push(MetricRecord { epoch: 0, name: "loss".into(), value: g.scalar_value(loss) });
    }

    'outer: for epoch in 1..=train.epochs {
        let order_idx = epoch_order(n, train.seed, epoch);
        let limit = train.max_batches_per_epoch.unwrap_or(usize::MAX);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for (batch_idx, chunk) in order_idx.chunks(train.batch_size).enumerate() {
            if batch_idx >= limit {
                break;
            }
            let x = stack(&images, chunk);
            let order = sample_order(seq, train.seed, epoch, batch_idx);
            let mut g = Graph::new();
            let xn = g.constant(x);
            let (preds, targets) = model.forward_train(&mut g, &ps, xn, &order);
            let loss = mse_to_targets(&mut g, preds, targets);
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                diverged = Some(epoch);
                let (snap_ps, snap_epoch, snap_len) = guard.recover("aim", epoch, lv)?;
                ps = snap_ps;
                history.truncate(snap_len);
                final_epoch = snap_epoch;
                break 'outer;
            }
            sum += lv;
            steps += 1;
            let grads = g.backward(loss);
            opt.step(&mut ps, &g, &grads);
        }
        if steps == 0 {
            return Err(Error::Config("corpus too small for one batch".into()));
        }
        history.push(MetricRecord { epoch, name: "loss".into(), value: sum / steps as f64 });
        guard.keep(&ps, epoch, history.len());
    }

    let mut tc = BTreeMap::new();
    tc.insert("family".into(), "generative".into());
    tc.insert("side".into(), config.side.to_string());
    tc.insert("patch".into(), config.patch.to_string());
    tc.insert("dim".into(), config.dim.to_string());
    tc.insert("depth".into(), config.depth.to_string());
    tc.insert("heads".into(), config.heads.to_string());
    tc.insert("mlp_ratio".into(), config.mlp_ratio.to_string());
    tc.insert("in_channels".into(), config.in_channels.to_string());
    if let Some(e) = diverged {
        tc.insert("diverged_at_epoch".into(), e.to_string());
    }
    let meta = CheckpointMeta {
        method: "aim".into(),
        embed_dim: config.dim,
        epoch: final_epoch,
        train_config: tc,
        metric_history: history,
    };
    EncoderCheckpoint::new(meta, ps)
}

fn sample_order(seq: usize, seed: u64, epoch: usize, batch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..seq).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(
        seed,
        "aim-order",
        &[epoch as u64, batch as u64],
    ));
    order.shuffle(&mut rng);
    order
}

pub(crate) fn config_from_meta(meta: &CheckpointMeta) -> Result<AimConfig> {
    Ok(AimConfig {
        side: meta.config_usize("side")?,
        patch: meta.config_usize("patch")?,
        dim: meta.config_usize("dim")?,
        depth: meta.config_usize("depth")?,
        heads: meta.config_usize("heads")?,
        mlp_ratio: meta.config_usize("mlp_ratio")?,
        in_channels: meta.config_usize("in_channels")?,
    })
}

pub(crate) fn embed_from_checkpoint(
    ckpt: &EncoderCheckpoint,
    images: &[ProcessedImage],
) -> Result<Array2<f64>> {
    let config = config_from_meta(&ckpt.meta)?;
    let arrays = adapt_for_embedding(images, config.side, config.in_channels, false)?;
    let mut ps = ParamStore::new();
    let model = Aim::new(&mut ps, 0, config)?;
    ckpt.apply_to(&mut ps)?;
    let mut out = Array2::zeros((0, model.config.dim));
    let idx_all: Vec<usize> = (0..arrays.len()).collect();
    for chunk in idx_all.chunks(32) {
        let x = stack(&arrays, chunk);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let e = model.forward_embed(&mut g, &ps, xn);
        let v = g.value(e);
        let shape = v.shape();
        let rows = Array2::from_shape_vec((shape[0], shape[1]), v.iter().cloned().collect())
            .expect("2d");
        out.append(Axis(0), rows.view()).expect("same width");
    }
    Ok(out)
}
