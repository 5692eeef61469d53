//! The contrastive pretraining loop: one update sequence over the residual
//! backbone plus method-specific heads, queues, and momentum targets.

use super::losses::{
    barlow_graph, dino_student_graph, nce_graph, negcos_graph, normalize_rows, vicreg_graph,
};
use super::{momentum_update, CsslMethod, MethodSpec};
use crate::augment::{make_views, AugmentationPolicy};
use crate::checkpoint::{subset_by_prefix, CheckpointMeta, EncoderCheckpoint, MetricRecord};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::imageops::{resize_pad, ProcessedImage};
use crate::nn::layers::Linear;
use crate::nn::resnet::{ResNet18, ResNetConfig};
use crate::nn::{cosine_lr, Graph, NodeId, ParamStore, SgdMomentum};
use crate::seeds;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// View side length; must match the augmentation policy's output size.
    pub input_size: usize,
    pub in_channels: usize,
    pub backbone_width: usize,
    pub seed: u64,
    /// Base learning rate; default is the linear scaling 0.06 * batch / 256.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub max_batches_per_epoch: Option<usize>,
    pub collapse_std_floor: f64,
    pub collapse_patience: usize,
    /// Number of held-in images probed for the collapse statistic.
    pub probe_limit: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            input_size: 224,
            in_channels: 3,
            backbone_width: 64,
            seed: 0,
            lr: None,
            weight_decay: 0.0,
            max_batches_per_epoch: None,
            collapse_std_floor: 1e-4,
            collapse_patience: 3,
            probe_limit: 64,
        }
    }
}

impl ContrastiveConfig {
    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or(0.06 * self.batch_size as f64 / 256.0)
    }

    fn validate(&self, policy: &AugmentationPolicy) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("need epochs >= 1 and batch_size >= 2".into()));
        }
        if policy.output_size != self.input_size {
            return Err(Error::Config(format!(
                "policy emits {}px views but the encoder expects {}px",
                policy.output_size, self.input_size
            )));
        }
        Ok(())
    }
}

/// Fires after `patience` consecutive observations below `floor`.
#[derive(Debug, Clone)]
pub struct CollapseDetector {
    floor: f64,
    patience: usize,
    run: usize,
}

impl CollapseDetector {
    pub fn new(floor: f64, patience: usize) -> Self {
        Self { floor, patience, run: 0 }
    }

    pub fn observe(&mut self, mean_dim_std: f64) -> bool {
        if mean_dim_std < self.floor {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= self.patience
    }
}

struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str, widths: &[usize]) -> Self {
        let mut layers = Vec::new();
        for i in 0..widths.len() - 1 {
            let name = format!("{prefix}.l{i}");
            let layer = if i + 2 < widths.len() {
                Linear::new_relu(ps, rng, &name, widths[i], widths[i + 1], true)
            } else {
                Linear::new(ps, rng, &name, widths[i], widths[i + 1], true)
            };
            layers.push(layer);
        }
        Self { layers }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, mut x: NodeId) -> NodeId {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, ps, x);
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        x
    }
}

struct ContrastiveNet {
    backbone: ResNet18,
    proj: Mlp,
    pred: Option<Mlp>,
}

impl ContrastiveNet {
    fn build(ps: &mut ParamStore, spec: &MethodSpec, config: &ContrastiveConfig) -> Result<Self> {
        let backbone = ResNet18::new(
            ps,
            seeds::derive(config.seed, "backbone-init", &[]),
            ResNetConfig { in_channels: config.in_channels, base_width: config.backbone_width },
        );
        if spec.projection_head[0] != backbone.embed_dim() {
            return Err(Error::Config(format!(
                "projection head expects {} inputs but the backbone emits {}",
                spec.projection_head[0],
                backbone.embed_dim()
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(config.seed, "head-init", &[]));
        let proj = Mlp::new(ps, &mut rng, "proj", &spec.projection_head);
        let pred = spec
            .prediction_head
            .as_ref()
            .map(|widths| Mlp::new(ps, &mut rng, "pred", widths));
        Ok(Self { backbone, proj, pred })
    }

    fn project(&self, g: &mut Graph, ps: &mut ParamStore, x: NodeId, train: bool) -> NodeId {
        let e = self.backbone.forward(g, ps, x, train);
        self.proj.forward(g, ps, e)
    }
}

/// Forward a view batch through a (target) network without building
/// gradients, returning the projection output.
fn project_constant(
    net: &ContrastiveNet,
    ps: &mut ParamStore,
    x: &ArrayD<f64>,
    normalize: bool,
) -> Array2<f64> {
    let mut g = Graph::new();
    let xid = g.constant(x.clone());
    let mut z = net.project(&mut g, ps, xid, false);
    if normalize {
        z = normalize_rows(&mut g, z);
    }
    let v = g.value(z);
    let shape = v.shape();
    Array2::from_shape_vec((shape[0], shape[1]), v.iter().cloned().collect()).expect("2d")
}

fn view_batch(views: &[Vec<ProcessedImage>], view_idx: usize) -> ArrayD<f64> {
    let b = views.len();
    let first = views[0][view_idx].pixels();
    let (c, h, w) = first.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for (i, sample_views) in views.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(sample_views[view_idx].pixels());
    }
    out.into_dyn()
}

fn mean_dim_std(embeddings: &Array2<f64>) -> f64 {
    let b = embeddings.nrows() as f64;
    let mut total = 0.0;
    for col in embeddings.columns() {
        let mean = col.sum() / b;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / b;
        total += var.sqrt();
    }
    total / embeddings.ncols() as f64
}

/// Pretrain the backbone with the given method and return a backbone-only
/// checkpoint. The downstream embedding is the backbone output (before any
/// projection head), whatever the method.
pub fn pretrain_contrastive(
    corpus: &Corpus,
    spec: &MethodSpec,
    policy: &AugmentationPolicy,
    config: &ContrastiveConfig,
) -> Result<EncoderCheckpoint> {
    spec.validate()?;
    policy.validate()?;
    config.validate(policy)?;

    let preprocessed: Vec<ProcessedImage> = corpus
        .samples()
        .iter()
        .map(|s| resize_pad(&s.image, config.input_size))
        .collect::<Result<_>>()?;
    for img in &preprocessed {
        if img.channels() != config.in_channels {
            return Err(Error::Config(format!(
                "corpus images have {} channels, encoder expects {}",
                img.channels(),
                config.in_channels
            )));
        }
    }

    let mut online = ParamStore::new();
    let net = ContrastiveNet::build(&mut online, spec, config)?;
    let mut target = spec.method.uses_momentum_target().then(|| online.clone());
    let momentum = spec.momentum.unwrap_or(0.0);

    let n_views = policy.expected_views().unwrap_or(spec.n_views);
    if policy.expected_views().is_none() && spec.method == CsslMethod::Fastsiam && n_views != 4 {
        return Err(Error::Config("fastsiam needs 4 views".into()));
    }
    let proj_out = *spec.projection_head.last().unwrap();
    let tau = spec.loss_param("temperature", 0.1);

    // MoCo's negative store: a seeded ring of normalized past keys.
    let mut queue: Option<(Array2<f64>, usize)> = (spec.method == CsslMethod::Moco).then(|| {
        let size = spec.loss_param("queue_size", 4096.0) as usize;
        let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(config.seed, "queue-init", &[]));
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let mut q = Array2::<f64>::zeros((size, proj_out));
        for mut row in q.rows_mut() {
            for v in row.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            let norm: f64 = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        (q, 0usize)
    });
    let mut center: Option<Array1<f64>> =
        (spec.method == CsslMethod::Dino).then(|| Array1::zeros(proj_out));

    let n = preprocessed.len();
    let full_batches = n / config.batch_size + usize::from(n % config.batch_size >= 2);
    let batches_per_epoch = config
        .max_batches_per_epoch
        .map_or(full_batches, |m| m.min(full_batches))
        .max(1);
    let total_steps = config.epochs * batches_per_epoch;
    let base_lr = config.base_lr();
    let mut optimizer = SgdMomentum::new(base_lr, 0.9, config.weight_decay);
    let mut detector = CollapseDetector::new(config.collapse_std_floor, config.collapse_patience);
    let mut history = Vec::new();
    let mut global_step = 0usize;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha12Rng::seed_from_u64(seeds::derive(config.seed, "batch-order", &[epoch as u64]));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            if batch_idx >= batches_per_epoch || chunk.len() < 2 {
                break;
            }
            let views: Vec<Vec<ProcessedImage>> = chunk
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let state = seeds::derive(
                        config.seed,
                        "views",
                        &[epoch as u64, batch_idx as u64, slot as u64],
                    );
                    make_views(&preprocessed[i], policy, state, n_views)
                })
                .collect::<Result<_>>()?;

            let mut g = Graph::new();
            let loss = build_step_loss(
                &mut g,
                &net,
                &mut online,
                target.as_mut(),
                spec,
                &views,
                tau,
                &mut queue,
                &mut center,
            )?;
            let loss_value = g.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} loss became {loss_value} at epoch {epoch}",
                    spec.method.id()
                )));
            }
            let grads = g.backward(loss);
            optimizer.lr = cosine_lr(base_lr, global_step, total_steps);
            optimizer.step(&mut online, &g, &grads);
            if let Some(t) = target.as_mut() {
                momentum_update(&online, t, momentum)?;
            }
            epoch_loss += loss_value;
            steps += 1;
            global_step += 1;
        }
        if steps == 0 {
            return Err(Error::Config("corpus too small for one batch".into()));
        }

        let probe = probe_embeddings(&net, &mut online, &preprocessed, config.probe_limit);
        let std = mean_dim_std(&probe);
        history.push(MetricRecord {
            epoch,
            name: "loss".into(),
            value: epoch_loss / steps as f64,
        });
        history.push(MetricRecord { epoch, name: "embed_std".into(), value: std });
        if detector.observe(std) {
            return Err(Error::Collapse(format!(
                "mean per-dimension embedding std {std:.2e} below {:.0e} for {} epochs",
                config.collapse_std_floor, config.collapse_patience
            )));
        }
    }

    let mut train_config = BTreeMap::new();
    train_config.insert("backbone_width".into(), config.backbone_width.to_string());
    train_config.insert("in_channels".into(), config.in_channels.to_string());
    train_config.insert("input_size".into(), config.input_size.to_string());
    train_config.insert("batch_size".into(), config.batch_size.to_string());
    train_config.insert("base_lr".into(), base_lr.to_string());
    train_config.insert("family".into(), "contrastive".into());
    let meta = CheckpointMeta {
        method: spec.method.id().to_string(),
        embed_dim: net.backbone.embed_dim(),
        epoch: config.epochs,
        train_config,
        metric_history: history,
    };
    EncoderCheckpoint::new(meta, subset_by_prefix(&online, "resnet."))
}

#[allow(clippy::too_many_arguments)]
fn build_step_loss(
    g: &mut Graph,
    net: &ContrastiveNet,
    online: &mut ParamStore,
    target: Option<&mut ParamStore>,
    spec: &MethodSpec,
    views: &[Vec<ProcessedImage>],
    tau: f64,
    queue: &mut Option<(Array2<f64>, usize)>,
    center: &mut Option<Array1<f64>>,
) -> Result<NodeId> {
    let loss = match spec.method {
        CsslMethod::Simclr => {
            let x1 = view_batch(views, 0);
            let x2 = view_batch(views, 1);
            let x1 = g.constant(x1);
            let x2 = g.constant(x2);
            let z1 = net.project(g, online, x1, true);
            let z1 = normalize_rows(g, z1);
            let z2 = net.project(g, online, x2, true);
            let z2 = normalize_rows(g, z2);
            let l12 = nce_graph(g, z1, z2, None, tau);
            let l21 = nce_graph(g, z2, z1, None, tau);
            let sum = g.add(l12, l21);
            g.scale(sum, 0.5)
        }
        CsslMethod::Moco => {
            let target = target.expect("moco keeps a momentum encoder");
            let (q_store, ptr) = queue.as_mut().expect("moco keeps a queue");
            let keys = project_constant(net, target, &view_batch(views, 1), true);
            let x1 = view_batch(views, 0);
            let x1 = g.constant(x1);
            let q = net.project(g, online, x1, true);
            let q = normalize_rows(g, q);
            let k_const = g.constant(keys.clone().into_dyn());
            let negs = g.constant(q_store.clone().into_dyn());
            let loss = nce_graph(g, q, k_const, Some(negs), tau);
            for row in keys.rows() {
                q_store.row_mut(*ptr).assign(&row);
                *ptr = (*ptr + 1) % q_store.nrows();
            }
            loss
        }
        CsslMethod::Byol => {
            let target = target.expect("byol keeps a momentum encoder");
            let t1 = project_constant(net, target, &view_batch(views, 0), false);
            let t2 = project_constant(net, target, &view_batch(views, 1), false);
            let pred = net.pred.as_ref().expect("byol has a predictor");
            let x1 = view_batch(views, 0);
            let x1 = g.constant(x1);
            let z1 = net.project(g, online, x1, true);
            let p1 = pred.forward(g, online, z1);
            let x2 = view_batch(views, 1);
            let x2 = g.constant(x2);
            let z2 = net.project(g, online, x2, true);
            let p2 = pred.forward(g, online, z2);
            let t1 = g.constant(t1.into_dyn());
            let t2 = g.constant(t2.into_dyn());
            let l1 = negcos_graph(g, p1, t2);
            let l2 = negcos_graph(g, p2, t1);
            let sum = g.add(l1, l2);
            g.scale(sum, 0.5)
        }
        CsslMethod::Simsiam => {
            let pred = net.pred.as_ref().expect("simsiam has a predictor");
            let x1 = view_batch(views, 0);
            let x1 = g.constant(x1);
            let z1 = net.project(g, online, x1, true);
            let p1 = pred.forward(g, online, z1);
            let x2 = view_batch(views, 1);
            let x2 = g.constant(x2);
            let z2 = net.project(g, online, x2, true);
            let p2 = pred.forward(g, online, z2);
            let l1 = negcos_graph(g, p1, z2);
            let l2 = negcos_graph(g, p2, z1);
            let sum = g.add(l1, l2);
            g.scale(sum, 0.5)
        }
        CsslMethod::Fastsiam => {
            let pred = net.pred.as_ref().expect("fastsiam has a predictor");
            let count = views[0].len();
            let mut zs = Vec::with_capacity(count);
            let mut ps_nodes = Vec::with_capacity(count);
            for v in 0..count {
                let x = view_batch(views, v);
                let x = g.constant(x);
                let z = net.project(g, online, x, true);
                ps_nodes.push(pred.forward(g, online, z));
                zs.push(z);
            }
            // Each view's prediction chases the average of the other views.
            let mut terms = Vec::with_capacity(count);
            for i in 0..count {
                let others: Vec<NodeId> =
                    (0..count).filter(|&j| j != i).map(|j| zs[j]).collect();
                let mut acc = others[0];
                for &o in &others[1..] {
                    acc = g.add(acc, o);
                }
                let mean = g.scale(acc, 1.0 / others.len() as f64);
                terms.push(negcos_graph(g, ps_nodes[i], mean));
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t);
            }
            g.scale(acc, 1.0 / terms.len() as f64)
        }
        CsslMethod::Dino => {
            let target = target.expect("dino keeps a teacher");
            let center_vec = center.as_mut().expect("dino keeps a center");
            let t_temp = spec.loss_param("teacher_temp", 0.04);
            let s_temp = spec.loss_param("student_temp", 0.1);
            let c_momentum = spec.loss_param("center_momentum", 0.9);
            let count = views[0].len();
            let global = 2.min(count);

            let mut teacher_logits = Vec::with_capacity(global);
            for v in 0..global {
                teacher_logits.push(project_constant(net, target, &view_batch(views, v), false));
            }
            let teacher_probs: Vec<Array2<f64>> = teacher_logits
                .iter()
                .map(|logits| {
                    let mut probs = logits.clone();
                    for mut row in probs.rows_mut() {
                        let mut shifted: Vec<f64> = row
                            .iter()
                            .zip(center_vec.iter())
                            .map(|(&l, &c)| (l - c) / t_temp)
                            .collect();
                        let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in shifted.iter_mut() {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                        for (slot, v) in row.iter_mut().zip(shifted) {
                            *slot = v / sum;
                        }
                    }
                    probs
                })
                .collect();

            let mut student_logits = Vec::with_capacity(count);
            for v in 0..count {
                let x = view_batch(views, v);
                let x = g.constant(x);
                student_logits.push(net.project(g, online, x, true));
            }

            let mut terms = Vec::new();
            for (t_idx, probs) in teacher_probs.iter().enumerate() {
                for (s_idx, &logits) in student_logits.iter().enumerate() {
                    if s_idx == t_idx {
                        continue;
                    }
                    terms.push(dino_student_graph(g, logits, probs, s_temp));
                }
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t);
            }
            let loss = g.scale(acc, 1.0 / terms.len() as f64);

            let mut all_logits =
                Array2::zeros((0, teacher_logits[0].ncols()));
            for logits in &teacher_logits {
                all_logits.append(Axis(0), logits.view()).expect("same width");
            }
            super::update_center(center_vec, &all_logits, c_momentum)?;
            loss
        }
        CsslMethod::Barlowtwins => {
            let lambda = spec.loss_param("lambda", 5e-3);
            let x1 = view_batch(views, 0);
            let x1 = g.constant(x1);
            let z1 = net.project(g, online, x1, true);
            let x2 = view_batch(views, 1);
            let x2 = g.constant(x2);
            let z2 = net.project(g, online, x2, true);
            barlow_graph(g, z1, z2, lambda)
        }
        CsslMethod::Vicreg => {
            let lambda = spec.loss_param("lambda", 25.0);
            let mu = spec.loss_param("mu", 25.0);
            let nu = spec.loss_param("nu", 1.0);
            let gamma = spec.loss_param("gamma", 1.0);
            let x1 = view_batch(views, 0);
            let x1 = g.constant(x1);
            let z1 = net.project(g, online, x1, true);
            let x2 = view_batch(views, 1);
            let x2 = g.constant(x2);
            let z2 = net.project(g, online, x2, true);
            vicreg_graph(g, z1, z2, lambda, mu, nu, gamma)
        }
    };
    Ok(loss)
}

fn probe_embeddings(
    net: &ContrastiveNet,
    ps: &mut ParamStore,
    images: &[ProcessedImage],
    limit: usize,
) -> Array2<f64> {
    let take = images.len().min(limit.max(2));
    let mut rows: Vec<Array2<f64>> = Vec::new();
    for chunk in images[..take].chunks(32) {
        let (c, h, w) = chunk[0].pixels().dim();
        let mut x = Array4::zeros((chunk.len(), c, h, w));
        for (i, img) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(img.pixels());
        }
        let mut g = Graph::new();
        let xid = g.constant(x.into_dyn());
        let e = net.backbone.forward(&mut g, ps, xid, false);
        let v = g.value(e);
        let shape = v.shape();
        rows.push(
            Array2::from_shape_vec((shape[0], shape[1]), v.iter().cloned().collect())
                .expect("2d"),
        );
    }
    let dim = rows[0].ncols();
    let mut out = Array2::zeros((0, dim));
    for r in rows {
        out.append(Axis(0), r.view()).expect("same width");
    }
    out
}

/// Rebuild the backbone recorded in a contrastive checkpoint.
pub fn load_backbone(ckpt: &EncoderCheckpoint) -> Result<(ResNet18, ParamStore)> {
    let width = ckpt.meta.config_usize("backbone_width")?;
    let in_channels = ckpt.meta.config_usize("in_channels")?;
    let mut ps = ParamStore::new();
    let net = ResNet18::new(&mut ps, 0, ResNetConfig { in_channels, base_width: width });
    ckpt.apply_to(&mut ps)?;
    Ok((net, ps))
}

/// Backbone embeddings for raw (preprocessed) images, eval mode.
pub fn embed_images(
    net: &ResNet18,
    ps: &mut ParamStore,
    images: &[ProcessedImage],
) -> Result<Array2<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to embed".into()));
    }
    let mut out = Array2::zeros((0, net.embed_dim()));
    for chunk in images.chunks(32) {
        let (c, h, w) = chunk[0].pixels().dim();
        let mut x = Array4::zeros((chunk.len(), c, h, w));
        for (i, img) in chunk.iter().enumerate() {
            if img.pixels().dim() != (c, h, w) {
                return Err(Error::ShapeMismatch("mixed image shapes in batch".into()));
            }
            x.index_axis_mut(Axis(0), i).assign(img.pixels());
        }
        let mut g = Graph::new();
        let xid = g.constant(x.into_dyn());
        let e = net.forward(&mut g, ps, xid, false);
        let v = g.value(e);
        let shape = v.shape();
        let rows = Array2::from_shape_vec((shape[0], shape[1]), v.iter().cloned().collect())
            .expect("2d");
        out.append(Axis(0), rows.view()).expect("same width");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::build_policy;
    use crate::corpus::synth::synthesize_corpus;

    fn tiny_setup(method: CsslMethod) -> (Corpus, MethodSpec, AugmentationPolicy, ContrastiveConfig) {
        let corpus = synthesize_corpus(11, 4, 4, 64).unwrap();
        let mut spec = MethodSpec::scaled_to(method, 32);
        if method == CsslMethod::Moco {
            spec.loss_params.insert("queue_size".into(), 64.0);
        }
        let mut overrides = BTreeMap::new();
        overrides.insert("output_size".to_string(), 64.0);
        let policy = build_policy(method.id(), &overrides).unwrap();
        let config = ContrastiveConfig {
            epochs: 1,
            batch_size: 4,
            input_size: 64,
            in_channels: 1,
            backbone_width: 4,
            seed: 3,
            max_batches_per_epoch: Some(1),
            probe_limit: 8,
            ..ContrastiveConfig::default()
        };
        (corpus, spec, policy, config)
    }

    #[test]
    fn every_method_runs_one_update_and_checkpoints() {
        for method in CsslMethod::ALL {
            let (corpus, spec, policy, config) = tiny_setup(method);
            let ckpt = pretrain_contrastive(&corpus, &spec, &policy, &config)
                .unwrap_or_else(|e| panic!("{} failed: {e}", method.id()));
            assert_eq!(ckpt.meta.method, method.id());
            assert_eq!(ckpt.meta.embed_dim, 32);
            let std = ckpt
                .meta
                .metric_history
                .iter()
                .find(|r| r.name == "embed_std")
                .expect("std metric")
                .value;
            assert!(std > 1e-3, "{}: embedding std {std} too low", method.id());
            // Backbone-only: no head parameters leak into the checkpoint.
            for id in ckpt.params.ids() {
                assert!(ckpt.params.name(id).starts_with("resnet."));
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_reloadable() {
        let (corpus, spec, policy, config) = tiny_setup(CsslMethod::Simclr);
        let a = pretrain_contrastive(&corpus, &spec, &policy, &config).unwrap();
        let b = pretrain_contrastive(&corpus, &spec, &policy, &config).unwrap();
        assert_eq!(a.meta.metric_history, b.meta.metric_history);
        for id in a.params.ids() {
            let name = a.params.name(id).to_string();
            let other = b.params.id(&name).unwrap();
            assert_eq!(a.params.value(id), b.params.value(other), "{name} differs");
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("simclr.ckpt");
        a.save(&path).unwrap();
        let loaded = EncoderCheckpoint::load(&path).unwrap();
        let (net, mut ps) = load_backbone(&loaded).unwrap();
        let image = resize_pad(&corpus.samples()[0].image, 64).unwrap();
        let e1 = embed_images(&net, &mut ps, &[image.clone()]).unwrap();
        let (net2, mut ps2) = load_backbone(&loaded).unwrap();
        let e2 = embed_images(&net2, &mut ps2, &[image]).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.ncols(), 32);
    }

    #[test]
    fn config_mismatches_are_rejected() {
        let (corpus, spec, policy, mut config) = tiny_setup(CsslMethod::Simclr);
        config.input_size = 224; // policy still emits 64
        assert!(pretrain_contrastive(&corpus, &spec, &policy, &config).is_err());

        let (corpus, mut spec, policy, config) = tiny_setup(CsslMethod::Simclr);
        spec.projection_head[0] = 512; // backbone emits 32
        assert!(pretrain_contrastive(&corpus, &spec, &policy, &config).is_err());
    }

    #[test]
    fn collapse_detector_needs_consecutive_hits() {
        let mut d = CollapseDetector::new(1e-4, 3);
        assert!(!d.observe(1e-5));
        assert!(!d.observe(1e-5));
        assert!(!d.observe(1.0)); // recovery resets the run
        assert!(!d.observe(1e-5));
        assert!(!d.observe(1e-5));
        assert!(d.observe(1e-5));
    }
}
