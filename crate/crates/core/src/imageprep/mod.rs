//! Image normalization, bilinear resizing and random affine augmentation.
//!
//! Augmentation composes rotation, x-shear and zoom about the image center,
//! followed by a translation, into a single affine map. Every output pixel is
//! inverse-mapped into the source and sampled bilinearly; coordinates outside
//! the frame are mirrored back in (`-1 -> 0`, `h -> h-1`). Brightness is a
//! final multiplicative factor, clamped to `[0, 1]`.

pub mod pnm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Side length images are resized to before augmentation.
pub const TARGET_SIZE: usize = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(domain(format!("image dimensions {height}x{width} must be positive")));
        }
        if channels != 1 && channels != 3 {
            return Err(domain(format!("{channels} channels; expected 1 or 3")));
        }
        if pixels.len() != height * width * channels {
            return Err(domain(format!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    fn is_normalized(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }
}

/// Scales 8-bit intensities into `[0, 1]`.
pub fn normalize(raw: &ImageBuffer) -> Result<ImageBuffer> {
    if let Some(p) = raw.pixels.iter().find(|p| !(0.0..=255.0).contains(*p)) {
        return Err(domain(format!("raw pixel value {p} outside [0, 255]")));
    }
    Ok(ImageBuffer {
        pixels: raw.pixels.iter().map(|p| p / 255.0).collect(),
        ..*raw
    })
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear resize with pixel-center alignment, clamping at the border.
pub fn resize_bilinear(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(domain(format!("target size {out_h}x{out_w} must be positive")));
    }
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let source = |dst: usize, scale: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(len - 1), s - i0 as f64)
    };
    let mut pixels = Vec::with_capacity(out_h * out_w * img.channels);
    for y in 0..out_h {
        let (y0, y1, fy) = source(y, sy, img.height);
        for x in 0..out_w {
            let (x0, x1, fx) = source(x, sx, img.width);
            for c in 0..img.channels {
                let top = lerp(img.get(y0, x0, c), img.get(y0, x1, c), fx);
                let bottom = lerp(img.get(y1, x0, c), img.get(y1, x1, c), fx);
                pixels.push(lerp(top, bottom, fy));
            }
        }
    }
    ImageBuffer::new(out_h, out_w, img.channels, pixels)
}

/// Mirror an out-of-range index back into `[0, len)`: `-1-k -> k`, `len+k -> len-1-k`.
#[inline]
pub fn reflect_index(i: i64, len: usize) -> usize {
    let n = len as i64;
    let r = i.rem_euclid(2 * n);
    if r < n {
        r as usize
    } else {
        (2 * n - 1 - r) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    #[default]
    Reflect,
}

/// Ranges for random augmentation. Defaults follow the training recipe:
/// ±5° rotation, 5% shifts, 0.05° shear, 5% zoom, brightness in [0.9, 1.1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    /// Fraction of the width (x) and height (y) to shift by at most.
    pub shift_frac: f64,
    /// Maximum shear angle, degrees.
    pub shear: f64,
    pub zoom_frac: f64,
    pub brightness: (f64, f64),
    pub fill: FillMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 5.0,
            shift_frac: 0.05,
            shear: 0.05,
            zoom_frac: 0.05,
            brightness: (0.9, 1.1),
            fill: FillMode::Reflect,
        }
    }
}

impl AugmentConfig {
    /// A config whose every draw is the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shift_frac: 0.0,
            shear: 0.0,
            zoom_frac: 0.0,
            brightness: (1.0, 1.0),
            fill: FillMode::Reflect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_deg", self.rotation_deg),
            ("shift_frac", self.shift_frac),
            ("shear", self.shear),
            ("zoom_frac", self.zoom_frac),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(domain(format!("{name} = {v} must be a finite nonnegative number")));
            }
        }
        if self.zoom_frac >= 1.0 {
            return Err(domain("zoom_frac must be below 1"));
        }
        if self.shear >= 90.0 {
            return Err(domain("shear must be below 90 degrees"));
        }
        let (lo, hi) = self.brightness;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(domain(format!("brightness range [{lo}, {hi}] must be positive and ordered")));
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub dx: f64,
    pub dy: f64,
    pub shear: f64,
    pub zoom: f64,
    pub brightness: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            dx: 0.0,
            dy: 0.0,
            shear: 0.0,
            zoom: 1.0,
            brightness: 1.0,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws augmentation parameters for an image of the given size.
pub fn sample_params<R: Rng + ?Sized>(
    cfg: &AugmentConfig,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<AugmentParams> {
    cfg.validate()?;
    let sym = |rng: &mut R, r: f64| uniform(rng, -r, r);
    Ok(AugmentParams {
        angle_deg: sym(rng, cfg.rotation_deg),
        dx: sym(rng, cfg.shift_frac * width as f64),
        dy: sym(rng, cfg.shift_frac * height as f64),
        shear: sym(rng, cfg.shear),
        zoom: uniform(rng, 1.0 - cfg.zoom_frac, 1.0 + cfg.zoom_frac),
        brightness: uniform(rng, cfg.brightness.0, cfg.brightness.1),
    })
}

/// Row-major 2x2 forward matrix: zoom * shear * rotation.
fn forward_matrix(p: &AugmentParams) -> [f64; 4] {
    let (s, c) = p.angle_deg.to_radians().sin_cos();
    let k = p.shear.to_radians().tan();
    let z = p.zoom;
    // shear [[1, k], [0, 1]] applied after rotation [[c, -s], [s, c]]
    let sr = [c + k * s, -s + k * c, s, c];
    [z * sr[0], z * sr[1], z * sr[2], z * sr[3]]
}

/// Bilinear sample at a fractional source position with mirrored borders.
#[inline]
fn sample_reflect(img: &ImageBuffer, sy: f64, sx: f64, c: usize) -> f64 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let (fy, fx) = (sy - y0, sx - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    let ya = reflect_index(y0, img.height);
    let yb = reflect_index(y0 + 1, img.height);
    let xa = reflect_index(x0, img.width);
    let xb = reflect_index(x0 + 1, img.width);
    let top = lerp(img.get(ya, xa, c), img.get(ya, xb, c), fx);
    let bottom = lerp(img.get(yb, xa, c), img.get(yb, xb, c), fx);
    lerp(top, bottom, fy)
}

/// Applies one augmentation draw. Output has the input's dimensions.
pub fn apply_augment(img: &ImageBuffer, p: &AugmentParams) -> Result<ImageBuffer> {
    if !img.is_normalized() {
        return Err(domain("augmentation expects pixels normalized to [0, 1]"));
    }
    let [a, b, c, d] = forward_matrix(p);
    let det = a * d - b * c;
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(domain("augmentation parameters give a singular transform"));
    }
    let inv = [d / det, -b / det, -c / det, a / det];
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;

    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in 0..img.width {
            let ux = x as f64 - cx - p.dx;
            let uy = y as f64 - cy - p.dy;
            let sx = inv[0] * ux + inv[1] * uy + cx;
            let sy = inv[2] * ux + inv[3] * uy + cy;
            for ch in 0..img.channels {
                let v = sample_reflect(img, sy, sx, ch) * p.brightness;
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(img.height, img.width, img.channels, pixels)
}

/// Deterministic generator for variant `variant` of image `image`.
pub fn substream(seed: u64, image: usize, variant: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((image as u64) << 32) | variant as u64);
    rng
}

/// `count_per_image` augmented variants of each input, image-major.
pub fn augment_batch(
    images: &[ImageBuffer],
    cfg: &AugmentConfig,
    seed: u64,
    count_per_image: usize,
) -> Result<Vec<ImageBuffer>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..images.len())
        .flat_map(|i| (0..count_per_image).map(move |k| (i, k)))
        .collect();
    jobs.into_par_iter()
        .map(|(i, k)| {
            let img = &images[i];
            let params = sample_params(cfg, img.height, img.width, &mut substream(seed, i, k))?;
            apply_augment(img, &params)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pattern(h: usize, w: usize) -> ImageBuffer {
        let px = (0..h * w).map(|i| ((i * 37) % 17) as f64 / 16.0).collect();
        ImageBuffer::new(h, w, 1, px).unwrap()
    }

    #[test]
    fn normalize_endpoints() {
        let raw = ImageBuffer::new(1, 3, 1, vec![255.0, 0.0, 51.0]).unwrap();
        assert_eq!(normalize(&raw).unwrap().pixels(), [1.0, 0.0, 0.2]);
        let bad = ImageBuffer::new(1, 1, 1, vec![256.0]).unwrap();
        assert!(normalize(&bad).is_err());
    }

    #[test]
    fn buffer_validation() {
        assert!(ImageBuffer::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn resize_cases() {
        let img = pattern(5, 7);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);

        let flat = ImageBuffer::filled(3, 4, 3, 0.3).unwrap();
        let r = resize_bilinear(&flat, 11, 2).unwrap();
        assert!(r.pixels().iter().all(|&p| p == 0.3));

        let checker = ImageBuffer::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(resize_bilinear(&checker, 1, 1).unwrap().pixels(), [0.5]);
        assert!(resize_bilinear(&checker, 0, 1).is_err());
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect_index(-1, 4), 0);
        assert_eq!(reflect_index(-2, 4), 1);
        assert_eq!(reflect_index(4, 4), 3);
        assert_eq!(reflect_index(5, 4), 2);
        assert_eq!(reflect_index(2, 4), 2);
        assert_eq!(reflect_index(-9, 1), 0);
    }

    #[test]
    fn identity_config_draws_identity() {
        let mut rng = substream(3, 0, 0);
        let p = sample_params(&AugmentConfig::identity(), 10, 10, &mut rng).unwrap();
        assert_eq!(p.angle_deg, 0.0);
        assert_eq!((p.dx, p.dy, p.shear), (0.0, 0.0, 0.0));
        assert_eq!((p.zoom, p.brightness), (1.0, 1.0));
    }

    #[test]
    fn fixed_seed_is_repeatable() {
        let cfg = AugmentConfig::default();
        let a = sample_params(&cfg, 224, 224, &mut substream(42, 1, 2)).unwrap();
        let b = sample_params(&cfg, 224, 224, &mut substream(42, 1, 2)).unwrap();
        assert_eq!(a, b);
        let c = sample_params(&cfg, 224, 224, &mut substream(42, 1, 3)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_augment_is_exact() {
        let img = pattern(9, 6);
        assert_eq!(apply_augment(&img, &AugmentParams::identity()).unwrap(), img);
    }

    #[test]
    fn brightness_only() {
        let img = ImageBuffer::filled(4, 4, 1, 0.5).unwrap();
        let p = AugmentParams {
            brightness: 1.1,
            ..AugmentParams::identity()
        };
        let out = apply_augment(&img, &p).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.55).abs() < 1e-15));
    }

    #[test]
    fn rejects_unnormalized() {
        let img = ImageBuffer::filled(2, 2, 1, 3.0).unwrap();
        assert!(apply_augment(&img, &AugmentParams::identity()).is_err());
    }

    #[test]
    fn integer_shift_reflects_edges() {
        // Shifting right by one pixel duplicates the first column (index -1 -> 0).
        let img = ImageBuffer::new(1, 4, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = AugmentParams {
            dx: 1.0,
            ..AugmentParams::identity()
        };
        assert_eq!(apply_augment(&img, &p).unwrap().pixels(), [0.1, 0.1, 0.2, 0.3]);
        let p = AugmentParams {
            dx: -2.0,
            ..AugmentParams::identity()
        };
        assert_eq!(apply_augment(&img, &p).unwrap().pixels(), [0.3, 0.4, 0.4, 0.3]);
    }

    #[test]
    fn batch_counts_and_config_checks() {
        let imgs = vec![pattern(6, 6), pattern(4, 5)];
        assert!(augment_batch(&imgs, &AugmentConfig::default(), 1, 0).unwrap().is_empty());
        let out = augment_batch(&imgs, &AugmentConfig::identity(), 1, 3).unwrap();
        assert_eq!(out.len(), 6);
        for (k, o) in out.iter().enumerate() {
            assert_eq!(o, &imgs[k / 3]);
        }
        let bad = AugmentConfig {
            brightness: (1.2, 0.8),
            ..AugmentConfig::default()
        };
        assert!(augment_batch(&imgs, &bad, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn reflect_is_idempotent(len in 1usize..50, k in 0i64..150) {
            let n = len as i64;
            let i = -n + k % (3 * n);
            let r = reflect_index(i, len);
            prop_assert!(r < len);
            prop_assert_eq!(reflect_index(r as i64, len), r);
        }

        #[test]
        fn outputs_stay_in_range(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
            let img = pattern(h, w);
            let cfg = AugmentConfig { rotation_deg: 30.0, shift_frac: 0.3, shear: 10.0, zoom_frac: 0.3, brightness: (0.5, 1.8), ..AugmentConfig::default() };
            let p = sample_params(&cfg, h, w, &mut substream(seed, 0, 0)).unwrap();
            let out = apply_augment(&img, &p).unwrap();
            prop_assert_eq!((out.height(), out.width(), out.channels()), (h, w, 1));
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
