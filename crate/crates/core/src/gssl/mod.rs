//! Generative pretraining: five objectives (autoregressive patch
//! prediction, normalizing flow, masked autoencoding, variational
//! autoencoding, adversarial feature learning) that each leave behind an
//! encoder checkpoint usable for embedding extraction.

mod aim;
mod bigan;
mod flow;
mod mae;
mod vae;

pub use aim::{aim_loss, pretrain_aim, AimConfig};
pub use bigan::{bigan_losses, pretrain_bigan, BiganConfig};
pub use flow::{flow_bpd, pretrain_flow, Flow, FlowConfig};
pub use mae::{mae_loss, masked_count, pretrain_mae, MaeConfig};
pub use vae::{pretrain_vae, vae_loss, VaeConfig, VaeOutput};

use crate::checkpoint::EncoderCheckpoint;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::imageops::{invert, resize_pad, ProcessedImage, Provenance};
use crate::nn::ParamStore;
use crate::seeds;
use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GsslMethod {
    Aim,
    Flow,
    Mae,
    Vae,
    Bigan,
}

impl GsslMethod {
    pub const ALL: [GsslMethod; 5] =
        [GsslMethod::Aim, GsslMethod::Flow, GsslMethod::Mae, GsslMethod::Vae, GsslMethod::Bigan];

    pub fn id(self) -> &'static str {
        match self {
            GsslMethod::Aim => "aim",
            GsslMethod::Flow => "flow",
            GsslMethod::Mae => "mae",
            GsslMethod::Vae => "vae",
            GsslMethod::Bigan => "bigan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown generative method `{s}`")))
    }
}

/// Architecture choice plus its knobs, one variant per method.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum GenerativeSpec {
    Aim(AimConfig),
    Flow(FlowConfig),
    Mae(MaeConfig),
    Vae(VaeConfig),
    Bigan(BiganConfig),
}

impl GenerativeSpec {
    pub fn method(&self) -> GsslMethod {
        match self {
            GenerativeSpec::Aim(_) => GsslMethod::Aim,
            GenerativeSpec::Flow(_) => GsslMethod::Flow,
            GenerativeSpec::Mae(_) => GsslMethod::Mae,
            GenerativeSpec::Vae(_) => GsslMethod::Vae,
            GenerativeSpec::Bigan(_) => GsslMethod::Bigan,
        }
    }

    pub fn default_for(method: GsslMethod) -> Self {
        match method {
            GsslMethod::Aim => GenerativeSpec::Aim(AimConfig::default()),
            GsslMethod::Flow => GenerativeSpec::Flow(FlowConfig::default()),
            GsslMethod::Mae => GenerativeSpec::Mae(MaeConfig::default()),
            GsslMethod::Vae => GenerativeSpec::Vae(VaeConfig::default()),
            GsslMethod::Bigan => GenerativeSpec::Bigan(BiganConfig::default()),
        }
    }
}

/// Shared loop knobs; the adaptive-moment learning rate 1e-3 is the default
/// for every generative objective.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenerativeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for GenerativeTrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 256, seed: 0, lr: 1e-3, max_batches_per_epoch: None }
    }
}

impl GenerativeTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("need epochs >= 1 and batch_size >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

pub fn pretrain_generative(
    corpus: &Corpus,
    spec: &GenerativeSpec,
    train: &GenerativeTrainConfig,
) -> Result<EncoderCheckpoint> {
    match spec {
        GenerativeSpec::Aim(c) => pretrain_aim(corpus, c, train),
        GenerativeSpec::Flow(c) => pretrain_flow(corpus, c, train),
        GenerativeSpec::Mae(c) => pretrain_mae(corpus, c, train),
        GenerativeSpec::Vae(c) => pretrain_vae(corpus, c, train),
        GenerativeSpec::Bigan(c) => pretrain_bigan(corpus, c, train),
    }
}

/// Embeddings from any generative checkpoint. Images must already be at the
/// side length recorded in the checkpoint; ink inversion and channel
/// replication are re-applied to match training.
pub fn embed_generative(
    ckpt: &EncoderCheckpoint,
    images: &[ProcessedImage],
) -> Result<Array2<f64>> {
    match GsslMethod::parse(&ckpt.meta.method)? {
        GsslMethod::Aim => aim::embed_from_checkpoint(ckpt, images),
        GsslMethod::Flow => flow::embed_from_checkpoint(ckpt, images),
        GsslMethod::Mae => mae::embed_from_checkpoint(ckpt, images),
        GsslMethod::Vae => vae::embed_from_checkpoint(ckpt, images),
        GsslMethod::Bigan => bigan::embed_from_checkpoint(ckpt, images),
    }
}

/// Ink-bright single image at a fixed channel count. 1-channel inputs are
/// replicated up; anything else must match exactly.
pub(crate) fn adapt_image(
    image: &ProcessedImage,
    in_channels: usize,
    invert_ink: bool,
) -> Result<Array3<f64>> {
    let owned;
    let img = if invert_ink && image.provenance() != Provenance::Inverted {
        owned = invert(image);
        &owned
    } else {
        image
    };
    let px = img.pixels();
    let c = px.dim().0;
    if c == in_channels {
        return Ok(px.clone());
    }
    if c == 1 {
        let (_, h, w) = px.dim();
        let mut out = Array3::zeros((in_channels, h, w));
        for ch in 0..in_channels {
            out.index_axis_mut(Axis(0), ch).assign(&px.index_axis(Axis(0), 0));
        }
        return Ok(out);
    }
    Err(Error::ShapeMismatch(format!("cannot adapt {c}-channel image to {in_channels} channels")))
}

pub(crate) fn prepare_corpus(
    corpus: &Corpus,
    side: usize,
    in_channels: usize,
    invert_ink: bool,
) -> Result<Vec<Array3<f64>>> {
    corpus
        .samples()
        .iter()
        .map(|s| {
            let img = resize_pad(&s.image, side)?;
            adapt_image(&img, in_channels, invert_ink)
        })
        .collect()
}

pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "batch-order", &[epoch as u64]));
    order.shuffle(&mut rng);
    order
}

pub(crate) fn stack(images: &[Array3<f64>], idx: &[usize]) -> ArrayD<f64> {
    let (c, h, w) = images[idx[0]].dim();
    let mut out = Array4::zeros((idx.len(), c, h, w));
    for (slot, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), slot).assign(&images[i]);
    }
    out.into_dyn()
}

/// Validate + adapt images handed to an embed function against the geometry
/// a checkpoint was trained with.
pub(crate) fn adapt_for_embedding(
    images: &[ProcessedImage],
    side: usize,
    in_channels: usize,
    invert_ink: bool,
) -> Result<Vec<Array3<f64>>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to embed".into()));
    }
    images
        .iter()
        .map(|img| {
            if img.side() != side {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint expects {side}px images, got {}px",
                    img.side()
                )));
            }
            adapt_image(img, in_channels, invert_ink)
        })
        .collect()
}

/// (N,C,H,W) pixels to (N, P, C*patch*patch) patch rows, matching the graph
/// patchify layout: row-major grid, channel-major pixels inside a patch.
pub(crate) fn patches_nd(x: &ArrayD<f64>, patch: usize) -> ndarray::Array3<f64> {
    let shape = x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(h % patch == 0 && w % patch == 0, "side not divisible by patch");
    let (gh, gw) = (h / patch, w / patch);
    let mut out = ndarray::Array3::zeros((n, gh * gw, c * patch * patch));
    for i in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let p = gy * gw + gx;
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            out[[i, p, (ch * patch + py) * patch + px]] =
                                x[[i, ch, gy * patch + py, gx * patch + px]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Last parameter state that produced only finite losses, used to honor the
/// abort-with-last-good-checkpoint contract on divergence.
pub(crate) struct DivergenceGuard {
    snapshot: Option<(ParamStore, usize, usize)>,
}

impl DivergenceGuard {
    pub(crate) fn new() -> Self {
        Self { snapshot: None }
    }

    pub(crate) fn keep(&mut self, ps: &ParamStore, epoch: usize, history_len: usize) {
        self.snapshot = Some((ps.clone(), epoch, history_len));
    }

    /// On a non-finite loss: recover the last good state or fail if none
    /// exists yet.
    pub(crate) fn recover(
        self,
        method: &str,
        bad_epoch: usize,
        value: f64,
    ) -> Result<(ParamStore, usize, usize)> {
        match self.snapshot {
            Some(snap) => Ok(snap),
            None => Err(Error::Diverged(format!(
                "{method} loss became {value} at epoch {bad_epoch} before any completed epoch"
            ))),
        }
    }
}
