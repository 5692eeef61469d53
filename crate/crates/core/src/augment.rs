//! Stochastic view generation for contrastive pretraining.
//!
//! Augmentations are bounded so writer characteristics survive: crops keep at
//! least half the original area, rotation stays within +/-15 degrees, and the
//! defaults exclude vertical flips and perspective warps (overrides may add
//! them back). Multi-crop policies emit extra small "local" views; those
//! intentionally cover a smaller area and are the one documented exception to
//! the crop-area floor.

use crate::error::{Error, Result};
use crate::imageops::{
    self, crop_resize, gaussian_blur, hflip, resize_bilinear, rotate, vflip, warp_perspective,
    ProcessedImage, Provenance,
};
use crate::seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

pub const MAX_ROTATE_DEGREES: f64 = 15.0;
pub const MIN_CROP_AREA: f64 = 0.5;
const MAX_BLUR_SIGMA: f64 = 4.0;
const MAX_PERSPECTIVE_SHIFT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    /// Random crop of `area` fraction in `[min_area, max_area]` with aspect
    /// ratio in [3/4, 4/3], resized to the policy output size.
    CropResize { min_area: f64, max_area: f64 },
    /// Deterministic center crop keeping `fraction` of each side.
    CenterCrop { fraction: f64 },
    VFlip,
    HFlip,
    Rotate { max_degrees: f64 },
    /// Random corner displacement up to `max_shift` of the side length.
    Perspective { max_shift: f64 },
    Blur { sigma_min: f64, sigma_max: f64 },
    /// Brightness shift in +/-`brightness`, contrast scale in 1 +/-`contrast`.
    Jitter { brightness: f64, contrast: f64 },
    Invert,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolicyOp {
    pub probability: f64,
    #[serde(flatten)]
    pub op: AugOp,
}

/// Extra multi-crop views: `global_views` full-policy views plus
/// `local_views` crops of `local_fraction` of the side, all resized to the
/// policy output size.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MultiCrop {
    pub global_views: usize,
    pub local_views: usize,
    pub local_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentationPolicy {
    pub ops: Vec<PolicyOp>,
    pub output_size: usize,
    pub seed_stream: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_crop: Option<MultiCrop>,
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.output_size != 64 && self.output_size != 224 {
            return bad(format!("output_size must be 64 or 224, got {}", self.output_size));
        }
        for entry in &self.ops {
            if !(0.0..=1.0).contains(&entry.probability) {
                return bad(format!("probability {} outside [0,1]", entry.probability));
            }
            match entry.op {
                AugOp::CropResize { min_area, max_area } => {
                    if !(MIN_CROP_AREA..=1.0).contains(&min_area)
                        || max_area > 1.0
                        || min_area > max_area
                    {
                        return bad(format!(
                            "crop area range [{min_area}, {max_area}] must sit inside \
                             [{MIN_CROP_AREA}, 1]"
                        ));
                    }
                }
                AugOp::CenterCrop { fraction } => {
                    // fraction is linear; the retained area is its square.
                    if fraction > 1.0 || fraction * fraction < MIN_CROP_AREA {
                        return bad(format!(
                            "center crop fraction {fraction} keeps less than half the area"
                        ));
                    }
                }
                AugOp::Rotate { max_degrees } => {
                    if !(0.0..=MAX_ROTATE_DEGREES).contains(&max_degrees) {
                        return bad(format!(
                            "rotation bound {max_degrees} exceeds +/-{MAX_ROTATE_DEGREES} degrees"
                        ));
                    }
                }
                AugOp::Perspective { max_shift } => {
                    if !(0.0..=MAX_PERSPECTIVE_SHIFT).contains(&max_shift) {
                        return bad(format!("perspective shift {max_shift} too aggressive"));
                    }
                }
                AugOp::Blur { sigma_min, sigma_max } => {
                    if sigma_min <= 0.0 || sigma_min > sigma_max || sigma_max > MAX_BLUR_SIGMA {
                        return bad(format!("blur sigma range [{sigma_min}, {sigma_max}] invalid"));
                    }
                }
                AugOp::Jitter { brightness, contrast } => {
                    if !(0.0..=1.0).contains(&brightness) || !(0.0..=1.0).contains(&contrast) {
                        return bad(format!(
                            "jitter strengths ({brightness}, {contrast}) outside [0,1]"
                        ));
                    }
                }
                AugOp::VFlip | AugOp::HFlip | AugOp::Invert => {}
            }
        }
        if let Some(mc) = &self.multi_crop {
            if mc.global_views < 2 || mc.local_views == 0 {
                return bad("multi-crop needs >= 2 global and >= 1 local views".into());
            }
            if !(0.0..1.0).contains(&mc.local_fraction) || mc.local_fraction <= 0.0 {
                return bad(format!("local crop fraction {} invalid", mc.local_fraction));
            }
        }
        Ok(())
    }

    pub fn expected_views(&self) -> Option<usize> {
        self.multi_crop.as_ref().map(|mc| mc.global_views + mc.local_views)
    }
}

pub const CONTRASTIVE_METHODS: [&str; 8] = [
    "simclr", "moco", "byol", "simsiam", "fastsiam", "dino", "barlowtwins", "vicreg",
];

/// Default policy for a registered contrastive method, with `overrides`
/// applied afterwards. Override keys: `output_size`, `seed_stream`,
/// `rotate_degrees`, `rotate_probability`, `crop_min_area`, `crop_max_area`,
/// `hflip_probability`, `vflip_probability`, `jitter_probability`,
/// `jitter_brightness`, `jitter_contrast`, `blur_probability`,
/// `blur_sigma_min`, `blur_sigma_max`, `perspective_probability`,
/// `perspective_max_shift`, `invert_probability`. Probability keys insert the
/// op if the default policy lacks it.
pub fn build_policy(
    method_id: &str,
    overrides: &BTreeMap<String, f64>,
) -> Result<AugmentationPolicy> {
    if !CONTRASTIVE_METHODS.contains(&method_id) {
        return Err(Error::InvalidArgument(format!(
            "unknown contrastive method '{method_id}'"
        )));
    }
    let mut ops = vec![
        PolicyOp { probability: 1.0, op: AugOp::CropResize { min_area: 0.5, max_area: 1.0 } },
        PolicyOp { probability: 0.5, op: AugOp::HFlip },
        PolicyOp { probability: 0.8, op: AugOp::Jitter { brightness: 0.4, contrast: 0.4 } },
        PolicyOp { probability: 0.5, op: AugOp::Blur { sigma_min: 0.1, sigma_max: 2.0 } },
    ];
    if method_id == "simsiam" || method_id == "fastsiam" {
        ops.push(PolicyOp { probability: 0.5, op: AugOp::Rotate { max_degrees: 10.0 } });
    }
    let multi_crop = (method_id == "dino").then(|| MultiCrop {
        global_views: 2,
        local_views: 4,
        local_fraction: 96.0 / 224.0,
    });
    let mut policy = AugmentationPolicy { ops, output_size: 224, seed_stream: 0, multi_crop };

    for (key, &value) in overrides {
        apply_override(&mut policy, key, value)?;
    }
    policy.validate()?;
    Ok(policy)
}

fn apply_override(policy: &mut AugmentationPolicy, key: &str, value: f64) -> Result<()> {
    let mut set_probability = |matches: fn(&AugOp) -> bool, fresh: AugOp, p: f64| {
        if let Some(entry) = policy.ops.iter_mut().find(|e| matches(&e.op)) {
            entry.probability = p;
        } else {
            policy.ops.push(PolicyOp { probability: p, op: fresh });
        }
    };
    match key {
        "output_size" => policy.output_size = value as usize,
        "seed_stream" => policy.seed_stream = value as u64,
        "rotate_degrees" => {
            set_probability(
                |op| matches!(op, AugOp::Rotate { .. }),
                AugOp::Rotate { max_degrees: value },
                0.5,
            );
            for entry in &mut policy.ops {
                if let AugOp::Rotate { max_degrees } = &mut entry.op {
                    *max_degrees = value;
                }
            }
        }
        "rotate_probability" => set_probability(
            |op| matches!(op, AugOp::Rotate { .. }),
            AugOp::Rotate { max_degrees: 10.0 },
            value,
        ),
        "crop_min_area" | "crop_max_area" => {
            for entry in &mut policy.ops {
                if let AugOp::CropResize { min_area, max_area } = &mut entry.op {
                    if key == "crop_min_area" {
                        *min_area = value;
                    } else {
                        *max_area = value;
                    }
                }
            }
        }
        "hflip_probability" => set_probability(|op| matches!(op, AugOp::HFlip), AugOp::HFlip, value),
        "vflip_probability" => set_probability(|op| matches!(op, AugOp::VFlip), AugOp::VFlip, value),
        "invert_probability" => {
            set_probability(|op| matches!(op, AugOp::Invert), AugOp::Invert, value)
        }
        "jitter_probability" => set_probability(
            |op| matches!(op, AugOp::Jitter { .. }),
            AugOp::Jitter { brightness: 0.4, contrast: 0.4 },
            value,
        ),
        "jitter_brightness" | "jitter_contrast" => {
            for entry in &mut policy.ops {
                if let AugOp::Jitter { brightness, contrast } = &mut entry.op {
                    if key == "jitter_brightness" {
                        *brightness = value;
                    } else {
                        *contrast = value;
                    }
                }
            }
        }
        "blur_probability" => set_probability(
            |op| matches!(op, AugOp::Blur { .. }),
            AugOp::Blur { sigma_min: 0.1, sigma_max: 2.0 },
            value,
        ),
        "blur_sigma_min" | "blur_sigma_max" => {
            for entry in &mut policy.ops {
                if let AugOp::Blur { sigma_min, sigma_max } = &mut entry.op {
                    if key == "blur_sigma_min" {
                        *sigma_min = value;
                    } else {
                        *sigma_max = value;
                    }
                }
            }
        }
        "perspective_probability" => set_probability(
            |op| matches!(op, AugOp::Perspective { .. }),
            AugOp::Perspective { max_shift: 0.05 },
            value,
        ),
        "perspective_max_shift" => {
            let mut found = false;
            for entry in &mut policy.ops {
                if let AugOp::Perspective { max_shift } = &mut entry.op {
                    *max_shift = value;
                    found = true;
                }
            }
            if !found {
                policy.ops.push(PolicyOp {
                    probability: 0.5,
                    op: AugOp::Perspective { max_shift: value },
                });
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!("unknown policy override '{other}'")))
        }
    }
    Ok(())
}

/// Generate `n_views` independently augmented views of `image`. Pure in
/// `(image, policy, rng_state)`: the same inputs always produce the same
/// views. With a multi-crop policy, `n_views` must equal its total view
/// count and views beyond the global ones are local crops.
pub fn make_views(
    image: &ProcessedImage,
    policy: &AugmentationPolicy,
    rng_state: u64,
    n_views: usize,
) -> Result<Vec<ProcessedImage>> {
    if n_views < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least an anchor and a positive, got n_views = {n_views}"
        )));
    }
    policy.validate()?;
    if let Some(expected) = policy.expected_views() {
        if n_views != expected {
            return Err(Error::InvalidArgument(format!(
                "multi-crop policy emits {expected} views, caller asked for {n_views}"
            )));
        }
    }
    let background = match image.provenance() {
        Provenance::Binarized | Provenance::Inverted => 0.0,
        _ => 1.0,
    };
    let global_views = policy.multi_crop.as_ref().map_or(n_views, |mc| mc.global_views);

    let mut views = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let seed = seeds::derive(rng_state, "aug-view", &[policy.seed_stream, v as u64]);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let pixels = if v < global_views {
            render_view(image, policy, background, &mut rng)
        } else {
            let mc = policy.multi_crop.as_ref().expect("local views imply multi-crop");
            render_local_view(image, policy, mc.local_fraction, &mut rng)
        };
        let provenance = if policy.output_size == 64 {
            Provenance::Resized64
        } else {
            Provenance::Resized224
        };
        views.push(ProcessedImage::from_array(pixels, provenance)?);
    }
    Ok(views)
}

fn render_view(
    image: &ProcessedImage,
    policy: &AugmentationPolicy,
    background: f64,
    rng: &mut ChaCha12Rng,
) -> ndarray::Array3<f64> {
    let out = policy.output_size;
    let mut pixels = image.pixels().clone();
    let mut resized = false;
    for entry in &policy.ops {
        if rng.gen::<f64>() >= entry.probability {
            continue;
        }
        match entry.op {
            AugOp::CropResize { min_area, max_area } => {
                let side = pixels.dim().1;
                let area = rng.gen_range(min_area..=max_area);
                debug_assert!(area >= MIN_CROP_AREA);
                let aspect = rng.gen_range(0.75..=4.0 / 3.0);
                let cw = ((side as f64) * (area * aspect).sqrt()).round() as usize;
                let ch = ((side as f64) * (area / aspect).sqrt()).round() as usize;
                let (cw, ch) = (cw.clamp(1, side), ch.clamp(1, side));
                let top = rng.gen_range(0..=side - ch);
                let left = rng.gen_range(0..=side - cw);
                pixels = crop_resize(&pixels, top, left, ch, cw, out);
                resized = true;
            }
            AugOp::CenterCrop { fraction } => {
                let side = pixels.dim().1;
                let keep = ((side as f64) * fraction).round().clamp(1.0, side as f64) as usize;
                let offset = (side - keep) / 2;
                pixels = crop_resize(&pixels, offset, offset, keep, keep, out);
                resized = true;
            }
            AugOp::VFlip => pixels = vflip(&pixels),
            AugOp::HFlip => pixels = hflip(&pixels),
            AugOp::Rotate { max_degrees } => {
                let degrees = rng.gen_range(-max_degrees..=max_degrees);
                pixels = rotate(&pixels, degrees, background);
            }
            AugOp::Perspective { max_shift } => {
                let side = pixels.dim().1 as f64;
                let s = max_shift * side;
                let mut corners = [(0.0, 0.0), (side - 1.0, 0.0), (side - 1.0, side - 1.0), (0.0, side - 1.0)];
                for corner in &mut corners {
                    corner.0 += rng.gen_range(-s..=s);
                    corner.1 += rng.gen_range(-s..=s);
                }
                pixels = warp_perspective(&pixels, corners, background);
            }
            AugOp::Blur { sigma_min, sigma_max } => {
                let sigma = rng.gen_range(sigma_min..=sigma_max);
                pixels = gaussian_blur(&pixels, sigma);
            }
            AugOp::Jitter { brightness, contrast } => {
                let shift = rng.gen_range(-brightness..=brightness);
                let scale = rng.gen_range(1.0 - contrast..=1.0 + contrast);
                let mean = pixels.mean().unwrap_or(0.5);
                pixels.mapv_inplace(|p| (((p - mean) * scale + mean) + shift).clamp(0.0, 1.0));
            }
            AugOp::Invert => pixels.mapv_inplace(|p| 1.0 - p),
        }
    }
    if !resized || pixels.dim().1 != out {
        pixels = resize_bilinear(&pixels, out, out);
    }
    pixels.mapv_inplace(|p| p.clamp(0.0, 1.0));
    pixels
}

/// A local view: small random window, resized up, then the policy's
/// photometric ops (flips and geometry are skipped; the crop is the
/// geometry).
fn render_local_view(
    image: &ProcessedImage,
    policy: &AugmentationPolicy,
    local_fraction: f64,
    rng: &mut ChaCha12Rng,
) -> ndarray::Array3<f64> {
    let side = image.side();
    let keep = ((side as f64) * local_fraction).round().max(1.0) as usize;
    let top = rng.gen_range(0..=side - keep);
    let left = rng.gen_range(0..=side - keep);
    let mut pixels =
        crop_resize(image.pixels(), top, left, keep, keep, policy.output_size);
    for entry in &policy.ops {
        let photometric = matches!(entry.op, AugOp::Blur { .. } | AugOp::Jitter { .. });
        if !photometric || rng.gen::<f64>() >= entry.probability {
            continue;
        }
        match entry.op {
            AugOp::Blur { sigma_min, sigma_max } => {
                let sigma = rng.gen_range(sigma_min..=sigma_max);
                pixels = gaussian_blur(&pixels, sigma);
            }
            AugOp::Jitter { brightness, contrast } => {
                let shift = rng.gen_range(-brightness..=brightness);
                let scale = rng.gen_range(1.0 - contrast..=1.0 + contrast);
                let mean = pixels.mean().unwrap_or(0.5);
                pixels.mapv_inplace(|p| (((p - mean) * scale + mean) + shift).clamp(0.0, 1.0));
            }
            _ => unreachable!("filtered to photometric ops"),
        }
    }
    pixels.mapv_inplace(|p| p.clamp(0.0, 1.0));
    pixels
}

/// Resize without any stochastic transform, for the no-augmentation path.
pub fn plain_resize(image: &ProcessedImage, output_size: usize) -> Result<ProcessedImage> {
    let pixels = resize_bilinear(image.pixels(), output_size, output_size);
    let provenance = if output_size == 64 {
        Provenance::Resized64
    } else if output_size == 224 {
        Provenance::Resized224
    } else {
        return Err(Error::InvalidArgument(format!(
            "output size must be 64 or 224, got {output_size}"
        )));
    };
    ProcessedImage::from_array(pixels, provenance)
}

pub use imageops::resize_pad as ingest_resize;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::render_sample;
    use crate::imageops::resize_pad;

    fn sample_image() -> ProcessedImage {
        let (raw, _) = render_sample(9, 3, 1, 64);
        resize_pad(&raw, 64).unwrap()
    }

    fn policy_64(ops: Vec<PolicyOp>) -> AugmentationPolicy {
        AugmentationPolicy { ops, output_size: 64, seed_stream: 0, multi_crop: None }
    }

    #[test]
    fn registry_defaults_match_documented_policies() {
        let simclr = build_policy("simclr", &BTreeMap::new()).unwrap();
        assert_eq!(simclr.output_size, 224);
        assert!(simclr.ops.iter().any(|e| matches!(e.op, AugOp::CropResize { .. })));
        assert!(simclr.ops.iter().any(|e| matches!(e.op, AugOp::HFlip)));
        assert!(simclr.ops.iter().any(|e| matches!(e.op, AugOp::Jitter { .. })));
        assert!(simclr.ops.iter().any(|e| matches!(e.op, AugOp::Blur { .. })));
        assert!(!simclr.ops.iter().any(|e| matches!(e.op, AugOp::Rotate { .. })));
        assert!(simclr.multi_crop.is_none());

        let vicreg = build_policy("vicreg", &BTreeMap::new()).unwrap();
        assert_eq!(vicreg.output_size, 224);

        for method in ["simsiam", "fastsiam"] {
            let p = build_policy(method, &BTreeMap::new()).unwrap();
            let rot = p
                .ops
                .iter()
                .find_map(|e| match e.op {
                    AugOp::Rotate { max_degrees } => Some(max_degrees),
                    _ => None,
                })
                .expect("rotation op");
            assert!(rot <= 10.0);
        }

        let dino = build_policy("dino", &BTreeMap::new()).unwrap();
        let mc = dino.multi_crop.as_ref().expect("multi-crop");
        assert_eq!((mc.global_views, mc.local_views), (2, 4));
        assert_eq!(dino.expected_views(), Some(6));

        assert!(build_policy("rotnet", &BTreeMap::new()).is_err());
    }

    #[test]
    fn overrides_merge_and_bounds_are_enforced() {
        let mut over = BTreeMap::new();
        over.insert("output_size".to_string(), 64.0);
        over.insert("rotate_degrees".to_string(), 5.0);
        let p = build_policy("moco", &over).unwrap();
        assert_eq!(p.output_size, 64);
        assert!(p.ops.iter().any(|e| matches!(e.op, AugOp::Rotate { max_degrees } if max_degrees == 5.0)));

        let mut bad = BTreeMap::new();
        bad.insert("rotate_degrees".to_string(), 90.0);
        assert!(build_policy("simclr", &bad).is_err());

        let mut bad = BTreeMap::new();
        bad.insert("crop_min_area".to_string(), 0.3);
        assert!(build_policy("simclr", &bad).is_err());

        let mut bad = BTreeMap::new();
        bad.insert("output_size".to_string(), 128.0);
        assert!(build_policy("simclr", &bad).is_err());

        let mut bad = BTreeMap::new();
        bad.insert("warp_speed".to_string(), 1.0);
        assert!(build_policy("simclr", &bad).is_err());
    }

    #[test]
    fn identity_policy_yields_plain_resizes() {
        let image = sample_image();
        let policy = policy_64(vec![
            PolicyOp { probability: 0.0, op: AugOp::HFlip },
            PolicyOp { probability: 0.0, op: AugOp::Rotate { max_degrees: 10.0 } },
        ]);
        let views = make_views(&image, &policy, 4, 3).unwrap();
        assert_eq!(views.len(), 3);
        for view in &views {
            assert_eq!(view.pixels(), image.pixels());
        }
    }

    #[test]
    fn views_are_deterministic_in_rng_state() {
        let image = sample_image();
        let mut over = BTreeMap::new();
        over.insert("output_size".to_string(), 64.0);
        let policy = build_policy("simclr", &over).unwrap();
        let a = make_views(&image, &policy, 123, 2).unwrap();
        let b = make_views(&image, &policy, 123, 2).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels(), y.pixels());
        }
        let c = make_views(&image, &policy, 124, 2).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.pixels() != y.pixels()));
        // The two views differ from each other too.
        assert_ne!(a[0].pixels(), a[1].pixels());
    }

    #[test]
    fn certain_hflip_matches_mirror_oracle() {
        let image = sample_image();
        let policy = policy_64(vec![PolicyOp { probability: 1.0, op: AugOp::HFlip }]);
        let views = make_views(&image, &policy, 0, 2).unwrap();
        let src = image.pixels();
        let (c, h, w) = src.dim();
        for view in views {
            let got = view.pixels();
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        assert_eq!(got[[ci, y, x]], src[[ci, y, w - 1 - x]]);
                    }
                }
            }
        }
    }

    #[test]
    fn polarity_is_preserved_without_invert() {
        let image = sample_image(); // dark ink on white: mean well above 0.5
        let mut over = BTreeMap::new();
        over.insert("output_size".to_string(), 64.0);
        let policy = build_policy("simclr", &over).unwrap();
        for state in 0..5 {
            for view in make_views(&image, &policy, state, 2).unwrap() {
                let mean = view.pixels().mean().unwrap();
                assert!(mean > 0.5, "background flipped: mean {mean}");
                assert!(view.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
        let inverted = policy_64(vec![PolicyOp { probability: 1.0, op: AugOp::Invert }]);
        let views = make_views(&image, &inverted, 0, 2).unwrap();
        assert!(views[0].pixels().mean().unwrap() < 0.5);
    }

    #[test]
    fn multi_crop_emits_global_plus_local() {
        let image = sample_image();
        let mut over = BTreeMap::new();
        over.insert("output_size".to_string(), 64.0);
        let policy = build_policy("dino", &over).unwrap();
        let views = make_views(&image, &policy, 7, 6).unwrap();
        assert_eq!(views.len(), 6);
        for v in &views {
            assert_eq!(v.side(), 64);
        }
        assert!(make_views(&image, &policy, 7, 2).is_err());
    }

    #[test]
    fn rejects_fewer_than_two_views() {
        let image = sample_image();
        let policy = policy_64(vec![]);
        assert!(make_views(&image, &policy, 0, 1).is_err());
        assert!(make_views(&image, &policy, 0, 4).is_ok());
    }

    #[test]
    fn policy_round_trips_through_toml() {
        let policy = build_policy("fastsiam", &BTreeMap::new()).unwrap();
        let text = toml::to_string(&policy).unwrap();
        let back: AugmentationPolicy = toml::from_str(&text).unwrap();
        assert_eq!(back, policy);

        let dino = build_policy("dino", &BTreeMap::new()).unwrap();
        let text = toml::to_string(&dino).unwrap();
        let back: AugmentationPolicy = toml::from_str(&text).unwrap();
        assert_eq!(back, dino);
    }
}
