//! Contrastive and non-contrastive pretraining over the residual backbone:
//! MoCo, SimCLR, BYOL, SimSiam, FastSiam, DINO, Barlow Twins, and VICReg.
//!
//! Whatever the method and projection-head shape, the downstream embedding
//! is always the backbone output before any head.

mod losses;
mod train;

pub use losses::{
    barlow_twins_loss, dino_loss, nce_loss, negative_cosine_loss, update_center, vicreg_loss,
    VicregTerms,
};
pub use train::{
    embed_images, load_backbone, pretrain_contrastive, CollapseDetector, ContrastiveConfig,
};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use ndarray::Array2;
use std::collections::BTreeMap;

/// One step's worth of paired embeddings. With `negatives` absent, the other
/// positives in the batch act as negatives (so B must be at least 2); with
/// explicit negatives, every anchor shares the same negative set.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchors: Array2<f64>,
    pub positives: Array2<f64>,
    pub negatives: Option<Array2<f64>>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        let (b, d) = self.anchors.dim();
        if self.positives.dim() != (b, d) {
            return Err(Error::ShapeMismatch(format!(
                "anchors {:?} vs positives {:?}",
                self.anchors.dim(),
                self.positives.dim()
            )));
        }
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        match &self.negatives {
            Some(neg) => {
                if neg.ncols() != d || neg.nrows() == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "negatives {:?} incompatible with dim {d}",
                        neg.dim()
                    )));
                }
            }
            None => {
                if b < 2 {
                    return Err(Error::InvalidArgument(
                        "batch negatives need at least 2 anchors".into(),
                    ));
                }
            }
        }
        let finite = |m: &Array2<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&self.anchors)
            || !finite(&self.positives)
            || !self.negatives.as_ref().map_or(true, finite)
        {
            return Err(Error::InvalidArgument("non-finite embedding".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsslMethod {
    Moco,
    Simclr,
    Byol,
    Simsiam,
    Fastsiam,
    Dino,
    Barlowtwins,
    Vicreg,
}

impl CsslMethod {
    pub const ALL: [CsslMethod; 8] = [
        CsslMethod::Moco,
        CsslMethod::Simclr,
        CsslMethod::Byol,
        CsslMethod::Simsiam,
        CsslMethod::Fastsiam,
        CsslMethod::Dino,
        CsslMethod::Barlowtwins,
        CsslMethod::Vicreg,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            CsslMethod::Moco => "moco",
            CsslMethod::Simclr => "simclr",
            CsslMethod::Byol => "byol",
            CsslMethod::Simsiam => "simsiam",
            CsslMethod::Fastsiam => "fastsiam",
            CsslMethod::Dino => "dino",
            CsslMethod::Barlowtwins => "barlowtwins",
            CsslMethod::Vicreg => "vicreg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown contrastive method '{s}'")))
    }

    pub fn uses_momentum_target(&self) -> bool {
        matches!(self, CsslMethod::Moco | CsslMethod::Byol | CsslMethod::Dino)
    }

    pub fn uses_predictor(&self) -> bool {
        matches!(self, CsslMethod::Byol | CsslMethod::Simsiam | CsslMethod::Fastsiam)
    }
}

/// Head shapes, update-rule parameters, and view count for one method.
/// `projection_head` / `prediction_head` list full layer widths including
/// input and output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MethodSpec {
    pub method: CsslMethod,
    pub projection_head: Vec<usize>,
    pub prediction_head: Option<Vec<usize>>,
    pub momentum: Option<f64>,
    pub loss_params: BTreeMap<String, f64>,
    pub n_views: usize,
}

impl MethodSpec {
    /// Registry defaults for a 512-d backbone.
    pub fn default_for(method: CsslMethod) -> Self {
        let mut loss_params = BTreeMap::new();
        let mut set = |k: &str, v: f64| {
            loss_params.insert(k.to_string(), v);
        };
        let (projection_head, prediction_head, momentum, n_views) = match method {
            CsslMethod::Simclr => {
                set("temperature", 0.1);
                (vec![512, 512, 128], None, None, 2)
            }
            CsslMethod::Moco => {
                set("temperature", 0.1);
                set("queue_size", 4096.0);
                (vec![512, 512, 128], None, Some(0.99), 2)
            }
            CsslMethod::Byol => {
                (vec![512, 1024, 256], Some(vec![256, 512, 256]), Some(0.99), 2)
            }
            CsslMethod::Simsiam => (vec![512, 1024, 256], Some(vec![256, 512, 256]), None, 2),
            CsslMethod::Fastsiam => (vec![512, 1024, 256], Some(vec![256, 512, 256]), None, 4),
            CsslMethod::Dino => {
                set("teacher_temp", 0.04);
                set("student_temp", 0.1);
                set("center_momentum", 0.9);
                (vec![512, 2048, 4096], None, Some(0.99), 2)
            }
            CsslMethod::Barlowtwins => {
                set("lambda", 5e-3);
                (vec![512, 2048, 2048], None, None, 2)
            }
            CsslMethod::Vicreg => {
                set("lambda", 25.0);
                set("mu", 25.0);
                set("nu", 1.0);
                set("gamma", 1.0);
                (vec![512, 2048, 2048], None, None, 2)
            }
        };
        MethodSpec { method, projection_head, prediction_head, momentum, loss_params, n_views }
    }

    /// Same registry entry with every head width rescaled for a backbone of
    /// `embed_dim` outputs (small test models).
    pub fn scaled_to(method: CsslMethod, embed_dim: usize) -> Self {
        let mut spec = Self::default_for(method);
        let rescale = |w: usize| ((w * embed_dim).div_ceil(512)).max(4);
        spec.projection_head = spec.projection_head.iter().map(|&w| rescale(w)).collect();
        spec.projection_head[0] = embed_dim;
        if let Some(pred) = &mut spec.prediction_head {
            let proj_out = *spec.projection_head.last().expect("non-empty head");
            let mut widths: Vec<usize> = pred.iter().map(|&w| rescale(w)).collect();
            widths[0] = proj_out;
            let last = widths.len() - 1;
            widths[last] = proj_out;
            *pred = widths;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.momentum.is_some() != self.method.uses_momentum_target() {
            return bad(format!(
                "momentum must be present exactly for momentum-target methods; {} violates that",
                self.method.id()
            ));
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) || m == 0.0 {
                return bad(format!("momentum {m} outside (0,1)"));
            }
        }
        if self.prediction_head.is_some() != self.method.uses_predictor() {
            return bad(format!(
                "prediction head must be present exactly for predictor methods; {} violates that",
                self.method.id()
            ));
        }
        let expected_views = if self.method == CsslMethod::Fastsiam { 4 } else { 2 };
        if self.n_views != expected_views {
            return bad(format!(
                "{} takes {expected_views} views, spec says {}",
                self.method.id(),
                self.n_views
            ));
        }
        if self.projection_head.len() < 2 {
            return bad("projection head needs at least input and output widths".into());
        }
        if self.projection_head.iter().any(|&w| w == 0) {
            return bad("zero-width projection layer".into());
        }
        if let Some(pred) = &self.prediction_head {
            if pred.len() < 2 || pred.iter().any(|&w| w == 0) {
                return bad("invalid prediction head shape".into());
            }
            if pred[0] != *self.projection_head.last().unwrap() {
                return bad("prediction head input must match projection output".into());
            }
        }
        if let Some(&t) = self.loss_params.get("temperature") {
            if t <= 0.0 {
                return bad(format!("temperature {t} must be positive"));
            }
        }
        Ok(())
    }

    pub fn loss_param(&self, key: &str, default: f64) -> f64 {
        self.loss_params.get(key).copied().unwrap_or(default)
    }
}

/// `target <- m * target + (1 - m) * online`, elementwise over identically
/// structured parameter sets (buffers included).
pub fn momentum_update(online: &ParamStore, target: &mut ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("momentum {m} outside [0,1]")));
    }
    let target_ids: Vec<_> = target.ids().collect();
    if target_ids.len() != online.ids().count() {
        return Err(Error::ShapeMismatch(format!(
            "parameter sets differ: target has {}, online has {}",
            target_ids.len(),
            online.ids().count()
        )));
    }
    for id in target_ids {
        let name = target.name(id).to_string();
        let online_id = online
            .id(&name)
            .ok_or_else(|| Error::ShapeMismatch(format!("online side missing '{name}'")))?;
        let online_value = online.value(online_id);
        let target_value = target.value_mut(id);
        if target_value.shape() != online_value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "'{name}' shapes differ: {:?} vs {:?}",
                target_value.shape(),
                online_value.shape()
            )));
        }
        target_value.zip_mut_with(online_value, |t, &o| *t = m * *t + (1.0 - m) * o);
    }
    Ok(())
}
