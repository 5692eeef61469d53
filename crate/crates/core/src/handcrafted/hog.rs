//! Histogram of oriented gradients on a 64x64 window.
//!
//! Configuration is forced by the 1764-dimensional target: 9 unsigned
//! orientation bins, 8x8 cells, 16x16 blocks (2x2 cells) at 8x8 stride give
//! 7x7 blocks * 4 cells * 9 bins = 1764.
//!
//! Frozen conventions:
//! - central differences; border pixels get zero gradient
//! - unsigned angles in [0, 180), hard-assigned to 20-degree bins (no
//!   orientation interpolation)
//! - cell histograms accumulate raw magnitudes in row-major pixel order
//! - blocks are normalized with L2-Hys (clip 0.2, epsilon-guarded), so an
//!   all-zero block stays zero
//! - output order: blocks row-major, cells row-major within a block, then bin

use super::{Embedding, FeatureMethod};
use crate::corpus::SampleRef;
use crate::error::{Error, Result};
use crate::imageops::ProcessedImage;

pub(super) const SIDE: usize = 64;
pub(super) const CELL: usize = 8;
pub(super) const BINS: usize = 9;
pub(super) const CELLS: usize = SIDE / CELL;
pub(super) const BLOCKS: usize = CELLS - 1;
const EPS: f64 = 1e-10;
const CLIP: f64 = 0.2;

pub fn hog_features(image: &ProcessedImage, sample_ref: SampleRef) -> Result<Embedding> {
    if image.channels() != 1 || image.side() != SIDE {
        return Err(Error::ShapeMismatch(format!(
            "hog features need 1x{SIDE}x{SIDE} input, got {}x{}x{}",
            image.channels(),
            image.side(),
            image.side()
        )));
    }
    let px = image.pixels();
    let at = |y: usize, x: usize| px[[0, y, x]];

    let mut cells = vec![[0.0f64; BINS]; CELLS * CELLS];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (gx, gy) = if x == 0 || x == SIDE - 1 || y == 0 || y == SIDE - 1 {
                (0.0, 0.0)
            } else {
                (at(y, x + 1) - at(y, x - 1), at(y + 1, x) - at(y - 1, x))
            };
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let bin = orientation_bin(gx, gy);
            cells[(y / CELL) * CELLS + x / CELL][bin] += mag;
        }
    }

    let mut values = Vec::with_capacity(BLOCKS * BLOCKS * 4 * BINS);
    for by in 0..BLOCKS {
        for bx in 0..BLOCKS {
            let mut block = [0.0f64; 4 * BINS];
            for (ci, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                let cell = &cells[(by + dy) * CELLS + bx + dx];
                block[ci * BINS..(ci + 1) * BINS].copy_from_slice(cell);
            }
            values.extend_from_slice(&l2_hys(&block));
        }
    }
    Embedding::new(values, FeatureMethod::Hog, sample_ref)
}

pub(super) fn orientation_bin(gx: f64, gy: f64) -> usize {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if angle >= 180.0 {
        angle -= 180.0;
    }
    ((angle / 20.0) as usize).min(BINS - 1)
}

pub(super) fn l2_hys(block: &[f64; 4 * BINS]) -> [f64; 4 * BINS] {
    let norm = (block.iter().map(|v| v * v).sum::<f64>() + EPS * EPS).sqrt();
    let mut out = [0.0; 4 * BINS];
    for (o, v) in out.iter_mut().zip(block) {
        *o = (v / norm).min(CLIP);
    }
    let norm2 = (out.iter().map(|v| v * v).sum::<f64>() + EPS * EPS).sqrt();
    for o in out.iter_mut() {
        *o /= norm2;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handcrafted::{testutil, HOG_DIM};
    use crate::imageops::Provenance;
    use ndarray::Array3;

    fn sref() -> SampleRef {
        SampleRef { writer_id: 1, sample_index: 0 }
    }

    // Straightforward recomputation, kept deliberately separate from the
    // implementation above: naive per-pixel loops, no shared helpers.
    fn oracle(px: &ndarray::Array3<f64>) -> Vec<f64> {
        let mut hist = vec![vec![0.0f64; 9]; 64];
        for y in 0..64usize {
            for x in 0..64usize {
                if x == 0 || y == 0 || x == 63 || y == 63 {
                    continue;
                }
                let gx = px[[0, y, x + 1]] - px[[0, y, x - 1]];
                let gy = px[[0, y + 1, x]] - px[[0, y - 1, x]];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let mut a = gy.atan2(gx).to_degrees();
                while a < 0.0 {
                    a += 180.0;
                }
                while a >= 180.0 {
                    a -= 180.0;
                }
                let bin = ((a / 20.0) as usize).min(8);
                hist[(y / 8) * 8 + x / 8][bin] += mag;
            }
        }
        let mut out = Vec::new();
        for by in 0..7usize {
            for bx in 0..7usize {
                let mut v = Vec::new();
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    v.extend_from_slice(&hist[(by + dy) * 8 + bx + dx]);
                }
                let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-20).sqrt();
                let mut c: Vec<f64> = v.iter().map(|x| (x / n).min(0.2)).collect();
                let n2 = (c.iter().map(|x| x * x).sum::<f64>() + 1e-20).sqrt();
                for x in c.iter_mut() {
                    *x /= n2;
                }
                out.extend(c);
            }
        }
        out
    }

    #[test]
    fn dimension_is_1764() {
        let img = testutil::synth_processed(3, 1, 0);
        let e = hog_features(&img, sref()).unwrap();
        assert_eq!(e.dim(), HOG_DIM);
        assert!(e.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_image_gives_zero_vector() {
        let img = ProcessedImage::from_array(
            Array3::from_elem((1, 64, 64), 0.7),
            Provenance::Resized64,
        )
        .unwrap();
        let e = hog_features(&img, sref()).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_lands_in_the_zero_degree_bin() {
        let mut arr = Array3::zeros((1, 64, 64));
        for y in 0..64 {
            for x in 32..64 {
                arr[[0, y, x]] = 1.0;
            }
        }
        let img = ProcessedImage::from_array(arr, Provenance::Resized64).unwrap();
        let e = hog_features(&img, sref()).unwrap();
        let mut per_bin = [0.0f64; 9];
        for (i, v) in e.values().iter().enumerate() {
            per_bin[i % 9] += v;
        }
        let total: f64 = per_bin.iter().sum();
        assert!(total > 0.0);
        assert!(
            per_bin[0] / total > 0.99,
            "expected bin 0 to dominate, got {per_bin:?}"
        );
    }

    #[test]
    fn matches_brute_force_oracle_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(414);
        for _ in 0..20 {
            let arr = Array3::from_shape_fn((1, 64, 64), |_| rng.gen_range(0.0..1.0));
            let img = ProcessedImage::from_array(arr.clone(), Provenance::Resized64).unwrap();
            let e = hog_features(&img, sref()).unwrap();
            assert_eq!(e.values(), oracle(&arr).as_slice());
        }
    }

    #[test]
    fn shifting_by_one_cell_changes_the_descriptor() {
        let mut a = Array3::zeros((1, 64, 64));
        let mut b = Array3::zeros((1, 64, 64));
        for y in 20..28 {
            for x in 8..24 {
                a[[0, y, x]] = 1.0;
                b[[0, y, x + 8]] = 1.0;
            }
        }
        let ea = hog_features(
            &ProcessedImage::from_array(a, Provenance::Resized64).unwrap(),
            sref(),
        )
        .unwrap();
        let eb = hog_features(
            &ProcessedImage::from_array(b, Provenance::Resized64).unwrap(),
            sref(),
        )
        .unwrap();
        assert_ne!(ea.values(), eb.values());
    }

    #[test]
    fn rejects_wrong_input_size() {
        let img = ProcessedImage::from_array(
            Array3::from_elem((1, 224, 224), 0.2),
            Provenance::Resized224,
        )
        .unwrap();
        assert!(hog_features(&img, sref()).is_err());
    }
}
