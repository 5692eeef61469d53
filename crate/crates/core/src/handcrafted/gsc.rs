//! Gradient / structural / concavity descriptor over a 4x4 grid of a
//! binarized 64x64 image (ink = 1). Per cell: 12 gradient-direction bits,
//! 12 stroke-configuration bits, 8 concavity bits; 16 cells give
//! 192 + 192 + 128 = 512 binary components.
//!
//! The original per-bit predicates shipped as C code that is not available,
//! so the rules below are this crate's fixed definition, frozen by the
//! golden-vector tests:
//!
//! - gradient bit d: at least 2 ink pixels in the cell whose Sobel gradient
//!   (background = 0 outside the image) is nonzero and points into the
//!   30-degree sector d of [0, 360)
//! - structural bit p: at least 2 ink pixels whose 8-neighborhood matches
//!   pattern p; patterns 0-3 are line continuations (horizontal, vertical,
//!   and the two diagonals), 4-7 are corners (NE, SE, SW, NW), 8-11 are
//!   one-sided edges (ink east only, west only, north only, south only)
//! - concavity bits 0-3: at least 2 background pixels in the cell that see
//!   ink along three of the four axis rays and are open in exactly
//!   direction k (up, down, left, right)
//! - concavity bit 4: at least 2 background pixels enclosed on all four rays
//! - concavity bit 5: cell ink density is at least 0.25
//! - concavity bit 6 / 7: some row / column of the cell contains a run of at
//!   least 8 consecutive ink pixels
//!
//! Output layout: all gradient bits (cells row-major, 12 bits each), then
//! all structural bits, then all concavity bits.

use super::{Embedding, FeatureMethod};
use crate::corpus::SampleRef;
use crate::error::{Error, Result};
use crate::imageops::ProcessedImage;

const SIDE: usize = 64;
const GRID: usize = 4;
const CELL: usize = SIDE / GRID;
const FIRE_THRESHOLD: usize = 2;

pub fn gsc_features(image: &ProcessedImage, sample_ref: SampleRef) -> Result<Embedding> {
    if image.channels() != 1 || image.side() != SIDE {
        return Err(Error::ShapeMismatch(format!(
            "gsc features need 1x{SIDE}x{SIDE} input, got {}x{}x{}",
            image.channels(),
            image.side(),
            image.side()
        )));
    }
    let px = image.pixels();
    if px.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(
            "gsc features need a binarized input (values in {0,1})".into(),
        ));
    }
    let ink = |y: isize, x: isize| -> bool {
        if y < 0 || x < 0 || y >= SIDE as isize || x >= SIDE as isize {
            false
        } else {
            px[[0, y as usize, x as usize]] == 1.0
        }
    };

    let mut gradient = [[false; 12]; GRID * GRID];
    let mut structural = [[false; 12]; GRID * GRID];
    let mut concavity = [[false; 8]; GRID * GRID];
    let mut grad_counts = [[0usize; 12]; GRID * GRID];
    let mut struct_counts = [[0usize; 12]; GRID * GRID];
    let mut conc_counts = [[0usize; 5]; GRID * GRID];

    for y in 0..SIDE as isize {
        for x in 0..SIDE as isize {
            let cell = (y as usize / CELL) * GRID + x as usize / CELL;
            if ink(y, x) {
                if let Some(d) = sobel_direction(&ink, y, x) {
                    grad_counts[cell][d] += 1;
                }
                for p in neighborhood_patterns(&ink, y, x) {
                    struct_counts[cell][p] += 1;
                }
            } else if let Some(c) = ray_class(&ink, y, x) {
                conc_counts[cell][c] += 1;
            }
        }
    }

    for c in 0..GRID * GRID {
        for d in 0..12 {
            gradient[c][d] = grad_counts[c][d] >= FIRE_THRESHOLD;
            structural[c][d] = struct_counts[c][d] >= FIRE_THRESHOLD;
        }
        for k in 0..5 {
            concavity[c][k] = conc_counts[c][k] >= FIRE_THRESHOLD;
        }
        let (cy, cx) = (c / GRID * CELL, c % GRID * CELL);
        let mut ink_count = 0;
        let mut row_run = false;
        let mut col_run = false;
        for dy in 0..CELL {
            let mut run = 0;
            for dx in 0..CELL {
                if ink((cy + dy) as isize, (cx + dx) as isize) {
                    ink_count += 1;
                    run += 1;
                    if run >= 8 {
                        row_run = true;
                    }
                } else {
                    run = 0;
                }
            }
        }
        for dx in 0..CELL {
            let mut run = 0;
            for dy in 0..CELL {
                if ink((cy + dy) as isize, (cx + dx) as isize) {
                    run += 1;
                    if run >= 8 {
                        col_run = true;
                    }
                } else {
                    run = 0;
                }
            }
        }
        concavity[c][5] = ink_count as f64 / (CELL * CELL) as f64 >= 0.25;
        concavity[c][6] = row_run;
        concavity[c][7] = col_run;
    }

    let mut values = Vec::with_capacity(512);
    for family in [&gradient[..], &structural[..]] {
        for cell in family {
            values.extend(cell.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
    }
    for cell in &concavity {
        values.extend(cell.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Embedding::new(values, FeatureMethod::Gsc, sample_ref)
}

/// Sobel direction sector (12 sectors of 30 degrees) at an ink pixel, or
/// `None` when the gradient vanishes.
fn sobel_direction(ink: &dyn Fn(isize, isize) -> bool, y: isize, x: isize) -> Option<usize> {
    let v = |dy: isize, dx: isize| -> f64 {
        if ink(y + dy, x + dx) {
            1.0
        } else {
            0.0
        }
    };
    let gx = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
    let gy = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
    if gx == 0.0 && gy == 0.0 {
        return None;
    }
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 360.0;
    }
    Some(((angle / 30.0) as usize).min(11))
}

/// Which of the 12 stroke patterns the 8-neighborhood of an ink pixel
/// matches. N/S follow image coordinates (N = smaller y).
fn neighborhood_patterns(ink: &dyn Fn(isize, isize) -> bool, y: isize, x: isize) -> Vec<usize> {
    let n = ink(y - 1, x);
    let s = ink(y + 1, x);
    let e = ink(y, x + 1);
    let w = ink(y, x - 1);
    let ne = ink(y - 1, x + 1);
    let nw = ink(y - 1, x - 1);
    let se = ink(y + 1, x + 1);
    let sw = ink(y + 1, x - 1);
    let checks = [
        w && e,
        n && s,
        ne && sw,
        nw && se,
        n && e,
        s && e,
        s && w,
        n && w,
        e && !w,
        w && !e,
        n && !s,
        s && !n,
    ];
    checks
        .iter()
        .enumerate()
        .filter_map(|(i, &hit)| hit.then_some(i))
        .collect()
}

/// Concavity class of a background pixel from its four axis rays:
/// 0..=3 mean open in exactly that direction (up, down, left, right),
/// 4 means enclosed on all four rays, `None` otherwise.
fn ray_class(ink: &dyn Fn(isize, isize) -> bool, y: isize, x: isize) -> Option<usize> {
    let up = (0..y).any(|yy| ink(yy, x));
    let down = (y + 1..SIDE as isize).any(|yy| ink(yy, x));
    let left = (0..x).any(|xx| ink(y, xx));
    let right = (x + 1..SIDE as isize).any(|xx| ink(y, xx));
    match (up, down, left, right) {
        (true, true, true, true) => Some(4),
        (false, true, true, true) => Some(0),
        (true, false, true, true) => Some(1),
        (true, true, false, true) => Some(2),
        (true, true, true, false) => Some(3),
        _ => None,
    }
}
