//! Synthetic handwriting-like corpus.
//!
//! Each writer gets a persistent style: three glyph shapes built from
//! quadratic Bezier strokes, plus slant, stroke width, curvature, baseline
//! offset, and ink darkness. Samples from the same writer redraw the same
//! glyphs with small control-point perturbations and a global translation
//! jitter, so writer identity is carried by shape rather than by pixel
//! position.

use super::{Corpus, HandwritingSample, SampleRef};
use crate::error::{Error, Result};
use crate::imageops::RawImage;
use crate::seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

const GLYPHS_PER_SAMPLE: usize = 3;
const STEPS_PER_STROKE: usize = 64;

#[derive(Debug, Clone)]
struct Glyph {
    // Control points in the unit square: [start, control, end] per stroke.
    strokes: Vec<[(f64, f64); 3]>,
}

#[derive(Debug, Clone)]
struct WriterStyle {
    slant: f64,
    stroke_width: f64,
    baseline: f64,
    ink: f64,
    wobble: f64,
    glyphs: Vec<Glyph>,
}

fn sample_style(seed: u64, writer_id: u32) -> WriterStyle {
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "writer-style", &[writer_id as u64]));
    let curvature = rng.gen_range(0.10..0.45);
    let glyphs = (0..GLYPHS_PER_SAMPLE)
        .map(|_| {
            let n_strokes = rng.gen_range(2..=3);
            let strokes = (0..n_strokes)
                .map(|_| {
                    let p0 = (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
                    let p2 = (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
                    let mid = ((p0.0 + p2.0) / 2.0, (p0.1 + p2.1) / 2.0);
                    let p1 = (
                        mid.0 + rng.gen_range(-curvature..curvature),
                        mid.1 + rng.gen_range(-curvature..curvature),
                    );
                    [p0, p1, p2]
                })
                .collect();
            Glyph { strokes }
        })
        .collect();
    WriterStyle {
        slant: rng.gen_range(-0.35..0.35),
        stroke_width: rng.gen_range(0.8..2.0),
        baseline: rng.gen_range(-0.05..0.05),
        ink: rng.gen_range(0.70..0.95),
        wobble: rng.gen_range(0.008..0.020),
        glyphs,
    }
}

/// Render one sample for a writer. Returns the grayscale image (ink on white)
/// and the ground-truth ink mask (true where ink was deposited).
pub fn render_sample(seed: u64, writer_id: u32, sample_index: u32, side: usize) -> (RawImage, Vec<bool>) {
    let style = sample_style(seed, writer_id);
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(
        seed,
        "sample-jitter",
        &[writer_id as u64, sample_index as u64],
    ));

    let s = side as f64;
    let mut ink = vec![0.0f64; side * side];
    let radius = style.stroke_width * s / 64.0;

    // Global translation jitter decouples pixel position from writer identity.
    let dx = rng.gen_range(-0.08..0.08) * s;
    let dy = rng.gen_range(-0.08..0.08) * s;
    let ink_level = (style.ink + rng.gen_range(-0.05..0.05)).clamp(0.5, 1.0);

    let cell_w = s / GLYPHS_PER_SAMPLE as f64;
    for (gi, glyph) in style.glyphs.iter().enumerate() {
        let x0 = gi as f64 * cell_w + 0.12 * cell_w;
        let gw = 0.76 * cell_w;
        let y0 = (0.28 + style.baseline) * s;
        let gh = 0.44 * s;
        for stroke in &glyph.strokes {
            let jitter = |rng: &mut ChaCha12Rng| -> f64 { rng.gen_range(-style.wobble..style.wobble) };
            let p: Vec<(f64, f64)> = stroke
                .iter()
                .map(|&(x, y)| (x + jitter(&mut rng), y + jitter(&mut rng)))
                .collect();
            for step in 0..=STEPS_PER_STROKE {
                let t = step as f64 / STEPS_PER_STROKE as f64;
                let u = 1.0 - t;
                let bx = u * u * p[0].0 + 2.0 * u * t * p[1].0 + t * t * p[2].0;
                let by = u * u * p[0].1 + 2.0 * u * t * p[1].1 + t * t * p[2].1;
                // Shear about the glyph's vertical midline.
                let sx = bx + style.slant * (by - 0.5);
                let px = x0 + sx * gw + dx;
                let py = y0 + by * gh + dy;
                stamp_disk(&mut ink, side, px, py, radius, ink_level);
            }
        }
    }

    let mask: Vec<bool> = ink.iter().map(|&v| v >= 0.5 * ink_level).collect();
    let data: Vec<u8> = ink
        .iter()
        .map(|&v| (255.0 * (1.0 - v.min(1.0))).round() as u8)
        .collect();
    let image = RawImage::new(side, side, 1, data).expect("synthetic image dimensions are valid");
    (image, mask)
}

fn stamp_disk(ink: &mut [f64], side: usize, cx: f64, cy: f64, radius: f64, level: f64) {
    let r = radius.max(0.6);
    let lo_y = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let hi_y = ((cy + r + 1.0).ceil().min(side as f64 - 1.0)) as usize;
    let lo_x = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let hi_x = ((cx + r + 1.0).ceil().min(side as f64 - 1.0)) as usize;
    if cy + r < 0.0 || cx + r < 0.0 {
        return;
    }
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let a = (r + 0.5 - d).clamp(0.0, 1.0);
            if a > 0.0 {
                let v = a * level;
                let cell = &mut ink[y * side + x];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
}

/// Generate `writers * samples_per_writer` grayscale samples at `side x side`.
pub fn synthesize_corpus(
    seed: u64,
    writers: usize,
    samples_per_writer: usize,
    side: usize,
) -> Result<Corpus> {
    let (corpus, _) = synthesize_with_masks(seed, writers, samples_per_writer, side)?;
    Ok(corpus)
}

/// Like [`synthesize_corpus`], but also returns the ground-truth ink mask for
/// every sample, keyed by corpus reference.
pub fn synthesize_with_masks(
    seed: u64,
    writers: usize,
    samples_per_writer: usize,
    side: usize,
) -> Result<(Corpus, BTreeMap<SampleRef, Vec<bool>>)> {
    if writers == 0 || samples_per_writer == 0 {
        return Err(Error::InvalidArgument(
            "synthetic corpus needs at least one writer and one sample".into(),
        ));
    }
    if side < 16 {
        return Err(Error::InvalidArgument(format!(
            "synthetic side must be >= 16, got {side}"
        )));
    }
    let mut samples = Vec::with_capacity(writers * samples_per_writer);
    let mut masks = BTreeMap::new();
    for w in 1..=writers as u32 {
        for i in 0..samples_per_writer as u32 {
            let (image, mask) = render_sample(seed, w, i, side);
            masks.insert(SampleRef { writer_id: w, sample_index: i }, mask);
            samples.push(HandwritingSample {
                writer_id: w,
                sample_index: i,
                image,
                source_path: None,
            });
        }
    }
    let corpus = Corpus::new(samples, format!("synthetic-{seed}"))?;
    Ok((corpus, masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let (a, _) = render_sample(5, 3, 1, 64);
        let (b, _) = render_sample(5, 3, 1, 64);
        assert_eq!(a.data, b.data);
        let (c, _) = render_sample(6, 3, 1, 64);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn writers_and_samples_differ() {
        let (w1s0, _) = render_sample(0, 1, 0, 64);
        let (w1s1, _) = render_sample(0, 1, 1, 64);
        let (w2s0, _) = render_sample(0, 2, 0, 64);
        assert_ne!(w1s0.data, w1s1.data, "sample jitter missing");
        assert_ne!(w1s0.data, w2s0.data, "writer styles collide");
    }

    #[test]
    fn ink_on_white_with_true_mask() {
        let (img, mask) = render_sample(7, 2, 0, 64);
        assert_eq!(img.data[0], 255, "corner should be background");
        let dark = img.data.iter().filter(|&&v| v < 128).count();
        assert!(dark > 50, "expected visible ink, found {dark} dark pixels");
        let masked = mask.iter().filter(|&&m| m).count();
        assert!(masked > 50);
        for (v, m) in img.data.iter().zip(&mask) {
            if *m {
                assert!(*v < 160, "mask marks a light pixel ({v})");
            }
        }
    }

    #[test]
    fn corpus_shape_and_keys() {
        let corpus = synthesize_corpus(1, 4, 3, 32).unwrap();
        assert_eq!(corpus.len(), 12);
        assert_eq!(corpus.writer_ids(), (1..=4).collect());
        assert!(corpus
            .get(SampleRef { writer_id: 2, sample_index: 2 })
            .is_some());
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(synthesize_corpus(0, 0, 3, 32).is_err());
        assert!(synthesize_corpus(0, 3, 0, 32).is_err());
        assert!(synthesize_corpus(0, 3, 3, 8).is_err());
    }
}
