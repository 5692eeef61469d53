//! Variational autoencoder over a residual encoder: FC heads produce the
//! posterior (mu, log-var), the decoder mirrors the encoder's width
//! schedule back up to pixels, and the downstream embedding is mu.

use super::{
    adapt_for_embedding, epoch_order, prepare_corpus, stack, DivergenceGuard,
    GenerativeTrainConfig,
};
use crate::checkpoint::{CheckpointMeta, EncoderCheckpoint, MetricRecord};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::imageops::ProcessedImage;
use crate::nn::layers::{BatchNorm2d, Conv2dLayer, Linear};
use crate::nn::resnet::{ResNet18, ResNetConfig};
use crate::nn::{Adam, ConvSpec, Graph, NodeId, ParamStore};
use crate::seeds;
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub side: usize,
    pub in_channels: usize,
    /// Residual encoder base width; the encoder output is 8x this.
    pub encoder_width: usize,
    pub latent: usize,
    pub beta: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { side: 64, in_channels: 3, encoder_width: 64, latent: 256, beta: 1.0 }
    }
}

impl VaeConfig {
    pub fn encoder_out(&self) -> usize {
        8 * self.encoder_width
    }

    fn validate(&self) -> Result<()> {
        if self.side != 64 && self.side != 224 {
            return Err(Error::Config(format!("side must be 64 or 224, got {}", self.side)));
        }
        if self.latent == 0 || self.encoder_width == 0 {
            return Err(Error::Config("latent and encoder_width must be positive".into()));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config("in_channels must be 1 or 3".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// One encode/decode pass for a single image.
#[derive(Debug, Clone)]
pub struct VaeOutput {
    pub reconstruction: ProcessedImage,
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
}

impl VaeOutput {
    pub fn new(
        reconstruction: ProcessedImage,
        mu: Vec<f64>,
        log_var: Vec<f64>,
        z: Vec<f64>,
    ) -> Result<Self> {
        if mu.len() != log_var.len() || mu.len() != z.len() {
            return Err(Error::ShapeMismatch(format!(
                "latent vectors disagree: mu {}, log_var {}, z {}",
                mu.len(),
                log_var.len(),
                z.len()
            )));
        }
        if mu.is_empty() {
            return Err(Error::InvalidArgument("empty latent".into()));
        }
        for v in mu.iter().chain(&log_var).chain(&z) {
            if !v.is_finite() {
                return Err(Error::InvalidArgument("non-finite latent value".into()));
            }
        }
        Ok(Self { reconstruction, mu, log_var, z })
    }
}

/// (reconstruction MSE, KL to the unit Gaussian, total) for one sample.
pub fn vae_loss(x: &ProcessedImage, output: &VaeOutput, beta: f64) -> Result<(f64, f64, f64)> {
    if x.pixels().dim() != output.reconstruction.pixels().dim() {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} vs reconstruction {:?}",
            x.pixels().dim(),
            output.reconstruction.pixels().dim()
        )));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    if x.pixels().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite input pixel".into()));
    }
    let n = x.pixels().len() as f64;
    let recon = x
        .pixels()
        .iter()
        .zip(output.reconstruction.pixels().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let kl = output
        .mu
        .iter()
        .zip(&output.log_var)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>();
    if !recon.is_finite() || !kl.is_finite() {
        return Err(Error::InvalidArgument("loss is not finite".into()));
    }
    Ok((recon, kl, recon + beta * kl))
}

/// Batched in-graph loss: `x`/`recon` are (N,...) pixels, `mu`/`logvar` are
/// (N, latent). KL is summed per sample and averaged over the batch.
pub(crate) fn vae_loss_graph(
    g: &mut Graph,
    x: NodeId,
    recon: NodeId,
    mu: NodeId,
    logvar: NodeId,
    beta: f64,
) -> (NodeId, NodeId, NodeId) {
    let diff = g.sub(x, recon);
    let sq = g.square(diff);
    let recon_l = g.mean_all(sq);

    let mu_sq = g.square(mu);
    let ev = g.exp(logvar);
    let s = g.add(mu_sq, ev);
    let s = g.add_scalar(s, -1.0);
    let s = g.sub(s, logvar);
    let per_sample = g.sum_axes(s, &[1]);
    let mean = g.mean_all(per_sample);
    let kl = g.scale(mean, 0.5);

    let weighted = g.scale(kl, beta);
    let total = g.add(recon_l, weighted);
    (recon_l, kl, total)
}

struct UpBlock {
    conv: Conv2dLayer,
    bn: BatchNorm2d,
}

pub(crate) struct Vae {
    encoder: ResNet18,
    fc_mu: Linear,
    fc_logvar: Linear,
    dec_fc: Linear,
    up: Vec<UpBlock>,
    out_conv: Conv2dLayer,
    config: VaeConfig,
}

impl Vae {
    pub(crate) fn new(ps: &mut ParamStore, seed: u64, config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let encoder = ResNet18::new(
            ps,
            seeds::derive(seed, "vae-encoder", &[]),
            ResNetConfig { in_channels: config.in_channels, base_width: config.encoder_width },
        );
        let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "vae-heads", &[]));
        let d = config.encoder_out();
        let w = config.encoder_width;
        let bottom = config.side / 32;
        let fc_mu = Linear::new(ps, &mut rng, "vae.fc_mu", d, config.latent, true);
        let fc_logvar = Linear::new(ps, &mut rng, "vae.fc_logvar", d, config.latent, true);
        let dec_fc = Linear::new_relu(ps, &mut rng, "vae.dec.fc", config.latent, d * bottom * bottom, true);
        let spec = ConvSpec { stride: 1, pad: 1 };
        let widths = [(8 * w, 4 * w), (4 * w, 2 * w), (2 * w, w), (w, w)];
        let up = widths
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| UpBlock {
                conv: Conv2dLayer::new(ps, &mut rng, &format!("vae.dec.up{i}.conv"), ci, co, 3, spec, false),
                bn: BatchNorm2d::new(ps, &format!("vae.dec.up{i}.bn"), co),
            })
            .collect();
        let out_conv =
            Conv2dLayer::new(ps, &mut rng, "vae.dec.out", w, config.in_channels, 3, spec, true);
        Ok(Self { encoder, fc_mu, fc_logvar, dec_fc, up, out_conv, config })
    }

    /// Posterior parameters for a batch: (mu, logvar), each (N, latent).
    fn posterior(&self, g: &mut Graph, ps: &mut ParamStore, x: NodeId, train: bool) -> (NodeId, NodeId) {
        let h = self.encoder.forward(g, ps, x, train);
        (self.fc_mu.forward(g, ps, h), self.fc_logvar.forward(g, ps, h))
    }

    fn decode(&self, g: &mut Graph, ps: &mut ParamStore, z: NodeId, train: bool) -> NodeId {
        let n = g.value(z).shape()[0];
        let bottom = self.config.side / 32;
        let d = self.config.encoder_out();
        let h = self.dec_fc.forward(g, ps, z);
        let h = g.relu(h);
        let mut h = g.reshape(h, &[n, d, bottom, bottom]);
        for block in &self.up {
            h = g.upsample_nearest(h, 2);
            h = block.conv.forward(g, ps, h);
            h = block.bn.forward(g, ps, h, train);
            h = g.relu(h);
        }
        let h = g.upsample_nearest(h, 2);
        let h = self.out_conv.forward(g, ps, h);
        g.sigmoid(h)
    }

    /// Full training pass with reparameterized sampling.
    fn forward_train(
        &self,
        g: &mut Graph,
        ps: &mut ParamStore,
        x: NodeId,
        eps: &Array2<f64>,
    ) -> (NodeId, NodeId, NodeId) {
        let (mu, logvar) = self.posterior(g, ps, x, true);
        let half = g.scale(logvar, 0.5);
        let sd = g.exp(half);
        let e = g.constant(eps.clone().into_dyn());
        let noise = g.mul(sd, e);
        let z = g.add(mu, noise);
        let recon = self.decode(g, ps, z, true);
        (recon, mu, logvar)
    }
}

pub fn pretrain_vae(
    corpus: &Corpus,
    config: &VaeConfig,
    train: &GenerativeTrainConfig,
) -> Result<EncoderCheckpoint> {
    config.validate()?;
    train.validate()?;
    let images = prepare_corpus(corpus, config.side, config.in_channels, true)?;
    let mut ps = ParamStore::new();
    let model = Vae::new(&mut ps, train.seed, config.clone())?;
    let mut opt = Adam::new(train.lr);
    let mut guard = DivergenceGuard::new();
    let mut history = Vec::new();
    let n = images.len();
    let mut diverged: Option<usize> = None;
    let mut final_epoch = train.epochs;

    // Pre-training loss on the first batch, the baseline for "training
    // lowered the loss" checks.
    {
        let idx: Vec<usize> = (0..n.min(train.batch_size)).collect();
        let (_, _, total) = batch_losses(&model, &mut ps, &images, &idx, train.seed, 0, 0)?;
        history.push(MetricRecord { epoch: 0, name: "total".into(), value: total });
    }

    'outer: for epoch in 1..=train.epochs {
        let order = epoch_order(n, train.seed, epoch);
        let limit = train.max_batches_per_epoch.unwrap_or(usize::MAX);
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (batch_idx, chunk) in order.chunks(train.batch_size).enumerate() {
            if batch_idx >= limit {
                break;
            }
            let x = stack(&images, chunk);
            let eps = sample_eps(chunk.len(), model.config.latent, train.seed, epoch, batch_idx);
            let mut g = Graph::new();
            let xn = g.constant(x);
            let (recon, mu, logvar) = model.forward_train(&mut g, &mut ps, xn, &eps);
            let (rl, kl, total) = vae_loss_graph(&mut g, xn, recon, mu, logvar, model.config.beta);
            let tv = g.scalar_value(total);
            if !tv.is_finite() {
                diverged = Some(epoch);
                let (snap_ps, snap_epoch, snap_len) = guard.recover("vae", epoch, tv)?;
                ps = snap_ps;
                history.truncate(snap_len);
                final_epoch = snap_epoch;
                break 'outer;
            }
            sums.0 += g.scalar_value(rl);
            sums.1 += g.scalar_value(kl);
            sums.2 += tv;
            steps += 1;
            let grads = g.backward(total);
            opt.step(&mut ps, &g, &grads);
        }
        if steps == 0 {
            return Err(Error::Config("corpus too small for one batch".into()));
        }
        let k = steps as f64;
        history.push(MetricRecord { epoch, name: "recon".into(), value: sums.0 / k });
        history.push(MetricRecord { epoch, name: "kl".into(), value: sums.1 / k });
        history.push(MetricRecord { epoch, name: "total".into(), value: sums.2 / k });
        guard.keep(&ps, epoch, history.len());
    }

    let mut tc = BTreeMap::new();
    tc.insert("family".into(), "generative".into());
    tc.insert("side".into(), config.side.to_string());
    tc.insert("in_channels".into(), config.in_channels.to_string());
    tc.insert("encoder_width".into(), config.encoder_width.to_string());
    tc.insert("latent".into(), config.latent.to_string());
    tc.insert("beta".into(), config.beta.to_string());
    if let Some(e) = diverged {
        tc.insert("diverged_at_epoch".into(), e.to_string());
    }
    let meta = CheckpointMeta {
        method: "vae".into(),
        embed_dim: config.latent,
        epoch: final_epoch,
        train_config: tc,
        metric_history: history,
    };
    EncoderCheckpoint::new(meta, ps)
}

fn sample_eps(b: usize, latent: usize, seed: u64, epoch: usize, batch: usize) -> Array2<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(
        seed,
        "vae-eps",
        &[epoch as u64, batch as u64],
    ));
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    Array2::from_shape_simple_fn((b, latent), || normal.sample(&mut rng))
}

fn batch_losses(
    model: &Vae,
    ps: &mut ParamStore,
    images: &[Array3<f64>],
    idx: &[usize],
    seed: u64,
    epoch: usize,
    batch: usize,
) -> Result<(f64, f64, f64)> {
    let x = stack(images, idx);
    let eps = sample_eps(idx.len(), model.config.latent, seed, epoch, batch);
    let mut g = Graph::new();
    let xn = g.constant(x);
    let (recon, mu, logvar) = model.forward_train(&mut g, ps, xn, &eps);
    let (rl, kl, total) = vae_loss_graph(&mut g, xn, recon, mu, logvar, model.config.beta);
    Ok((g.scalar_value(rl), g.scalar_value(kl), g.scalar_value(total)))
}

fn config_from_meta(meta: &CheckpointMeta) -> Result<VaeConfig> {
    Ok(VaeConfig {
        side: meta.config_usize("side")?,
        in_channels: meta.config_usize("in_channels")?,
        encoder_width: meta.config_usize("encoder_width")?,
        latent: meta.config_usize("latent")?,
        beta: 1.0,
    })
}

pub(crate) fn embed_from_checkpoint(
    ckpt: &EncoderCheckpoint,
    images: &[ProcessedImage],
) -> Result<Array2<f64>> {
    let config = config_from_meta(&ckpt.meta)?;
    let arrays = adapt_for_embedding(images, config.side, config.in_channels, true)?;
    let mut ps = ParamStore::new();
    let model = Vae::new(&mut ps, 0, config)?;
    ckpt.apply_to(&mut ps)?;
    let mut out = Array2::zeros((0, model.config.latent));
    let idx_all: Vec<usize> = (0..arrays.len()).collect();
    for chunk in idx_all.chunks(32) {
        let x = stack(&arrays, chunk);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let (mu, _) = model.posterior(&mut g, &mut ps, xn, false);
        let v = g.value(mu);
        let shape = v.shape();
        let rows = Array2::from_shape_vec((shape[0], shape[1]), v.iter().cloned().collect())
            .expect("2d");
        out.append(Axis(0), rows.view()).expect("same width");
    }
    Ok(out)
}
