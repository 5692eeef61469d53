//! Deterministic image preprocessing: aspect-preserving resize with padding,
//! grayscale, inversion, Otsu binarization, and the warp/blur primitives the
//! augmentation policies are built from.
//!
//! Pixel convention: arrays are `(channels, height, width)` with values in
//! `[0, 1]`; raw corpus images are 8-bit ink-on-white scans.

use crate::error::{Error, Result};
use ndarray::{Array3, Axis};

/// Luminance weights for RGB -> gray conversion.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Square sizes accepted by the preprocessing pipeline.
pub const TARGET_SIZES: [usize; 2] = [64, 224];

/// A decoded 8-bit image as it comes out of the corpus loader.
///
/// Row-major `height x width x channels` storage, `channels` is 1 or 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "image buffer has {} bytes, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Convert to a float `(C, H, W)` array in `[0, 1]`.
    pub fn to_float(&self) -> Array3<f64> {
        let mut out = Array3::zeros((self.channels, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[[c, y, x]] = self.pixel(y, x, c) as f64 / 255.0;
                }
            }
        }
        out
    }
}

/// How an image reached its current form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Resized64,
    Resized224,
    Binarized,
    Inverted,
    Grayscale,
}

/// A preprocessed square image: `(C, H, W)` floats in `[0, 1]`, `H = W` in
/// `{64, 224}`, one or three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedImage {
    pixels: Array3<f64>,
    provenance: Provenance,
}

impl ProcessedImage {
    /// Wrap a pixel array, enforcing the shape and range invariants.
    pub fn from_array(pixels: Array3<f64>, provenance: Provenance) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 1 && c != 3 {
            return Err(Error::ShapeMismatch(format!("channels must be 1 or 3, got {c}")));
        }
        if h != w || !TARGET_SIZES.contains(&h) {
            return Err(Error::ShapeMismatch(format!(
                "image must be square 64 or 224, got {h}x{w}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument("pixel values must lie in [0,1]".into()));
        }
        Ok(Self { pixels, provenance })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Scale the longest side to `target`, keep aspect ratio, pad the short side
/// symmetrically with background white.
pub fn resize_pad(image: &RawImage, target: usize) -> Result<ProcessedImage> {
    if !TARGET_SIZES.contains(&target) {
        return Err(Error::InvalidArgument(format!("target must be 64 or 224, got {target}")));
    }
    let float = image.to_float();
    let (h, w) = (image.height, image.width);
    let long = h.max(w);
    let scale = target as f64 / long as f64;
    let (mut new_h, mut new_w) = if h >= w {
        (target, ((w as f64 * scale).round() as usize).max(1))
    } else {
        (((h as f64 * scale).round() as usize).max(1), target)
    };
    new_h = new_h.min(target);
    new_w = new_w.min(target);

    let scaled = resize_bilinear(&float, new_h, new_w);
    let pad_top = (target - new_h) / 2;
    let pad_left = (target - new_w) / 2;
    let mut out = Array3::from_elem((image.channels, target, target), 1.0);
    for c in 0..image.channels {
        for y in 0..new_h {
            for x in 0..new_w {
                out[[c, pad_top + y, pad_left + x]] = scaled[[c, y, x]].clamp(0.0, 1.0);
            }
        }
    }
    let provenance = if target == 64 { Provenance::Resized64 } else { Provenance::Resized224 };
    ProcessedImage::from_array(out, provenance)
}

/// Pixelwise `1 - v`. Applying it twice gives back the input.
pub fn invert(image: &ProcessedImage) -> ProcessedImage {
    let pixels = image.pixels.mapv(|v| 1.0 - v);
    ProcessedImage { pixels, provenance: Provenance::Inverted }
}

/// Collapse to a single luminance channel.
pub fn grayscale(image: &ProcessedImage) -> ProcessedImage {
    if image.channels() == 1 {
        return ProcessedImage { pixels: image.pixels.clone(), provenance: Provenance::Grayscale };
    }
    let (_, h, w) = image.pixels.dim();
    let mut out = Array3::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for c in 0..3 {
                v += LUMA[c] * image.pixels[[c, y, x]];
            }
            out[[0, y, x]] = v;
        }
    }
    ProcessedImage { pixels: out, provenance: Provenance::Grayscale }
}

/// Result of [`binarize`]: a `{0, 1}` image where 1 marks ink, plus a flag
/// set when the input was constant and no threshold exists.
#[derive(Debug, Clone)]
pub struct Binarized {
    pub image: ProcessedImage,
    pub constant_input: bool,
}

/// Global Otsu threshold on the grayscale image; pixels darker than the
/// threshold become ink (1.0), the rest background (0.0).
///
/// A constant input has no threshold: the result is all zeros with
/// `constant_input` set.
pub fn binarize(image: &ProcessedImage) -> Binarized {
    // A binarized image already encodes ink as 1; re-thresholding would flip
    // its polarity, so pass it through.
    if image.provenance() == Provenance::Binarized {
        let constant_input = {
            let mut it = image.pixels().iter();
            let first = it.next().copied().unwrap_or(0.0);
            it.all(|&v| v == first)
        };
        return Binarized { image: image.clone(), constant_input };
    }
    let gray = grayscale(image);
    let (_, h, w) = gray.pixels.dim();

    let mut hist = [0usize; 256];
    for v in gray.pixels.iter() {
        let bin = (v * 255.0).round().clamp(0.0, 255.0) as usize;
        hist[bin] += 1;
    }
    let total = (h * w) as f64;
    let constant = hist.iter().filter(|&&n| n > 0).count() <= 1;
    if constant {
        let zeros = Array3::zeros((1, h, w));
        return Binarized {
            image: ProcessedImage { pixels: zeros, provenance: Provenance::Binarized },
            constant_input: true,
        };
    }

    // Otsu: maximize inter-class variance over all split points.
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let mut best_t = 0usize;
    let mut best_var = -1.0;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..255 {
        w0 += hist[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }

    let threshold = best_t as f64 / 255.0;
    let pixels = gray.pixels.mapv(|v| if v <= threshold { 1.0 } else { 0.0 });
    Binarized {
        image: ProcessedImage { pixels, provenance: Provenance::Binarized },
        constant_input: false,
    }
}

// ---------------------------------------------------------------------------
// Geometry and filtering primitives (used by resize_pad and the augmenter).
// ---------------------------------------------------------------------------

fn sample_bilinear(src: &Array3<f64>, c: usize, y: f64, x: f64, background: f64) -> f64 {
    let (_, h, w) = src.dim();
    if y < -1.0 || x < -1.0 || y > h as f64 || x > w as f64 {
        return background;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let mut acc = 0.0;
    for (iy, wy) in [(y0 as i64, 1.0 - dy), (y0 as i64 + 1, dy)] {
        for (ix, wx) in [(x0 as i64, 1.0 - dx), (x0 as i64 + 1, dx)] {
            let v = if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                background
            } else {
                src[[c, iy as usize, ix as usize]]
            };
            acc += wy * wx * v;
        }
    }
    acc
}

/// Bilinear resize of a `(C, H, W)` array to `(C, out_h, out_w)`.
pub fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ch in 0..c {
        for oy in 0..out_h {
            // Align pixel centers so identity-size resize is the identity.
            let yf = (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let xf = (ox as f64 + 0.5) * sx - 0.5;
                let yc = yf.clamp(0.0, (h - 1) as f64);
                let xc = xf.clamp(0.0, (w - 1) as f64);
                out[[ch, oy, ox]] = sample_bilinear(src, ch, yc, xc, 0.0);
            }
        }
    }
    out
}

/// Crop a rectangle (top, left, height, width) and resize it to a square side.
pub fn crop_resize(src: &Array3<f64>, top: usize, left: usize, ch: usize, cw: usize, side: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let bottom = (top + ch).min(h);
    let right = (left + cw).min(w);
    let crop = src
        .slice(ndarray::s![.., top..bottom, left..right])
        .to_owned();
    let _ = c;
    resize_bilinear(&crop, side, side)
}

/// Rotate around the image center by `degrees`, bilinear sampling, filling
/// uncovered corners with `background`.
pub fn rotate(src: &Array3<f64>, degrees: f64, background: f64) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for oy in 0..h {
            for ox in 0..w {
                let ry = oy as f64 - cy;
                let rx = ox as f64 - cx;
                // Inverse rotation maps output pixels back into the source.
                let sy = cy + rx * sin + ry * cos;
                let sx = cx + rx * cos - ry * sin;
                out[[ch, oy, ox]] = sample_bilinear(src, ch, sy, sx, background).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Horizontal mirror.
pub fn hflip(src: &Array3<f64>) -> Array3<f64> {
    let mut out = src.clone();
    out.invert_axis(Axis(2));
    out
}

/// Vertical mirror.
pub fn vflip(src: &Array3<f64>) -> Array3<f64> {
    let mut out = src.clone();
    out.invert_axis(Axis(1));
    out
}

/// Perspective warp defined by displaced unit-square corners.
///
/// `corners` are the source-space positions (y, x) that the four output
/// corners (tl, tr, bl, br) map back to, in output pixel coordinates.
pub fn warp_perspective(src: &Array3<f64>, corners: [(f64, f64); 4], background: f64) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let hm = homography_from_corners(h, w, corners);
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for oy in 0..h {
            for ox in 0..w {
                let denom = hm[6] * ox as f64 + hm[7] * oy as f64 + 1.0;
                let sx = (hm[0] * ox as f64 + hm[1] * oy as f64 + hm[2]) / denom;
                let sy = (hm[3] * ox as f64 + hm[4] * oy as f64 + hm[5]) / denom;
                out[[ch, oy, ox]] = sample_bilinear(src, ch, sy, sx, background).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Solve for the 8-parameter homography sending output corners to `corners`.
fn homography_from_corners(h: usize, w: usize, corners: [(f64, f64); 4]) -> [f64; 8] {
    let dst = [
        (0.0, 0.0),
        (0.0, (w - 1) as f64),
        ((h - 1) as f64, 0.0),
        ((h - 1) as f64, (w - 1) as f64),
    ];
    // Rows of the linear system A x = b with x = [a,b,c,d,e,f,g,h].
    let mut a = [[0.0f64; 8]; 8];
    let mut b = [0.0f64; 8];
    for i in 0..4 {
        let (dy, dx) = dst[i];
        let (sy, sx) = corners[i];
        a[2 * i] = [dx, dy, 1.0, 0.0, 0.0, 0.0, -dx * sx, -dy * sx];
        b[2 * i] = sx;
        a[2 * i + 1] = [0.0, 0.0, 0.0, dx, dy, 1.0, -dx * sy, -dy * sy];
        b[2 * i + 1] = sy;
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..8 {
        let mut pivot = col;
        for row in col + 1..8 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        if diag.abs() < 1e-12 {
            continue;
        }
        for row in col + 1..8 {
            let f = a[row][col] / diag;
            for k in col..8 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 8];
    for col in (0..8).rev() {
        let mut acc = b[col];
        for k in col + 1..8 {
            acc -= a[col][k] * x[k];
        }
        x[col] = if a[col][col].abs() < 1e-12 { 0.0 } else { acc / a[col][col] };
    }
    x
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(src: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let (c, h, w) = src.dim();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };

    let mut tmp = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sxi = reflect(x as i64 + k as i64 - radius, w);
                    acc += kv * src[[ch, y, sxi]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let syi = reflect(y as i64 + k as i64 - radius, h);
                    acc += kv * tmp[[ch, syi, x]];
                }
                out[[ch, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn raw_gradient(h: usize, w: usize) -> RawImage {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(((x + y) % 256) as u8);
            }
        }
        RawImage::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn resize_pad_scales_and_pads_symmetrically() {
        // 128 tall x 64 wide -> content 64x32, 16 white columns each side.
        let img = RawImage::new(128, 64, 1, vec![0u8; 128 * 64]).unwrap();
        let out = resize_pad(&img, 64).unwrap();
        assert_eq!(out.side(), 64);
        let px = out.pixels();
        for y in 0..64 {
            for x in 0..16 {
                assert_eq!(px[[0, y, x]], 1.0, "left pad must be white");
                assert_eq!(px[[0, y, 63 - x]], 1.0, "right pad must be white");
            }
            for x in 16..48 {
                assert!(px[[0, y, x]] < 0.5, "content must be dark");
            }
        }
    }

    #[test]
    fn resize_pad_identity_size_keeps_content() {
        let img = raw_gradient(64, 64);
        let out = resize_pad(&img, 64).unwrap();
        let expect = img.to_float();
        let max_err = out
            .pixels()
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-9, "identity resize changed pixels by {max_err}");
    }

    #[test]
    fn resize_pad_supports_224() {
        let img = raw_gradient(100, 50);
        let out = resize_pad(&img, 224).unwrap();
        assert_eq!(out.side(), 224);
        assert_eq!(out.provenance(), Provenance::Resized224);
    }

    #[test]
    fn resize_pad_preserves_content_aspect() {
        // A black 40x20 rectangle: after resize_pad its bounding box must
        // keep the 2:1 aspect within a pixel of rounding.
        let mut data = vec![255u8; 80 * 80];
        for y in 20..60 {
            for x in 30..50 {
                data[y * 80 + x] = 0;
            }
        }
        let img = RawImage::new(80, 80, 1, data).unwrap();
        let out = resize_pad(&img, 64).unwrap();
        let px = out.pixels();
        let (mut y0, mut y1, mut x0, mut x1) = (64usize, 0usize, 64usize, 0usize);
        for y in 0..64 {
            for x in 0..64 {
                if px[[0, y, x]] < 0.5 {
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
        let h = (y1 - y0 + 1) as f64;
        let w = (x1 - x0 + 1) as f64;
        assert!((h / w - 2.0).abs() < 0.2, "content aspect drifted: {h}x{w}");
    }

    #[test]
    fn invert_is_involution() {
        let img = raw_gradient(64, 64);
        let p = resize_pad(&img, 64).unwrap();
        let back = invert(&invert(&p));
        let max_err = back
            .pixels()
            .iter()
            .zip(p.pixels().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12);
    }

    #[test]
    fn invert_white_page_is_zero() {
        let page = ProcessedImage::from_array(
            Array3::from_elem((1, 64, 64), 1.0),
            Provenance::Resized64,
        )
        .unwrap();
        let inv = invert(&page);
        assert!(inv.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binarize_constant_image_flags_degenerate() {
        let page = ProcessedImage::from_array(
            Array3::from_elem((1, 64, 64), 0.5),
            Provenance::Resized64,
        )
        .unwrap();
        let out = binarize(&page);
        assert!(out.constant_input);
        assert!(out.image.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binarize_is_idempotent() {
        let img = raw_gradient(64, 64);
        let p = resize_pad(&img, 64).unwrap();
        let once = binarize(&p);
        let twice = binarize(&once.image);
        assert_eq!(once.image.pixels(), twice.image.pixels());
        assert!(once.image.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn binarize_bimodal_marks_dark_side_as_ink() {
        let mut data = vec![230u8; 64 * 64];
        for i in 0..500 {
            data[i] = 20;
        }
        let img = RawImage::new(64, 64, 1, data).unwrap();
        let p = resize_pad(&img, 64).unwrap();
        let out = binarize(&p);
        let ink: f64 = out.image.pixels().sum();
        assert!((ink - 500.0).abs() < 1.0, "ink count {ink} != 500");
    }

    #[test]
    fn processed_image_rejects_bad_shapes() {
        assert!(ProcessedImage::from_array(Array3::zeros((1, 32, 32)), Provenance::Resized64).is_err());
        assert!(ProcessedImage::from_array(Array3::zeros((2, 64, 64)), Provenance::Resized64).is_err());
        assert!(ProcessedImage::from_array(Array3::zeros((1, 64, 32)), Provenance::Resized64).is_err());
    }

    #[test]
    fn hflip_mirrors_columns() {
        let img = raw_gradient(8, 8).to_float();
        let f = hflip(&img);
        assert_eq!(f[[0, 0, 0]], img[[0, 0, 7]]);
        assert_eq!(f[[0, 3, 2]], img[[0, 3, 5]]);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = raw_gradient(16, 16).to_float();
        let r = rotate(&img, 0.0, 1.0);
        let max_err = r
            .iter()
            .zip(img.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12);
    }

    #[test]
    fn blur_preserves_mean_roughly() {
        let img = raw_gradient(32, 32).to_float();
        let b = gaussian_blur(&img, 1.5);
        let m0 = img.mean().unwrap();
        let m1 = b.mean().unwrap();
        assert!((m0 - m1).abs() < 0.02);
    }
}
