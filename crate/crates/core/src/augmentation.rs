//! On-line deformation of training images: one affine warp (scale, shear,
//! rotation, translation) combined with an elastic displacement field, applied
//! in a single bilinear resampling pass.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

/// Elastic smoothing width used when a config does not give one.
pub const DEFAULT_ELASTIC_SIGMA: f64 = 6.0;
/// Elastic displacement scale used when a config does not give one.
pub const DEFAULT_ELASTIC_ALPHA: f64 = 36.0;

/// Concrete deformation of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationParams {
    /// Fractions of the image width and height.
    pub translate: (f64, f64),
    /// Degrees, counter-clockwise.
    pub rotate: f64,
    pub scale: (f64, f64),
    /// Horizontal shear angle in degrees.
    pub shear_h: f64,
    pub elastic_sigma: f64,
    pub elastic_alpha: f64,
    /// Seed of the elastic displacement field.
    pub seed: u64,
}

impl Default for DeformationParams {
    fn default() -> Self {
        DeformationParams {
            translate: (0.0, 0.0),
            rotate: 0.0,
            scale: (1.0, 1.0),
            shear_h: 0.0,
            elastic_sigma: 0.0,
            elastic_alpha: 0.0,
            seed: 0,
        }
    }
}

impl DeformationParams {
    pub fn is_identity(&self) -> bool {
        self.translate == (0.0, 0.0)
            && self.rotate == 0.0
            && self.scale == (1.0, 1.0)
            && self.shear_h == 0.0
            && self.elastic_alpha == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let values = [
            self.translate.0,
            self.translate.1,
            self.rotate,
            self.scale.0,
            self.scale.1,
            self.shear_h,
            self.elastic_sigma,
            self.elastic_alpha,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("deformation parameters must be finite".into()));
        }
        if self.scale.0 == 0.0 || self.scale.1 == 0.0 {
            return Err(Error::Config("deformation scale must be nonzero".into()));
        }
        if self.elastic_alpha != 0.0 && self.elastic_sigma <= 0.0 {
            return Err(Error::Config("elastic sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Maximum magnitudes from which per-sample parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationConfig {
    /// Percent of the image size.
    pub translate_pct: f64,
    pub rotate_deg: f64,
    /// Percent change of each axis.
    pub scale_pct: f64,
    pub shear_deg: f64,
    pub elastic_sigma: f64,
    pub elastic_alpha: f64,
    pub translate: bool,
    pub rotate: bool,
    pub scale: bool,
    pub shear: bool,
    pub elastic: bool,
}

impl Default for DeformationConfig {
    /// Every transform disabled.
    fn default() -> Self {
        DeformationConfig {
            translate_pct: 0.0,
            rotate_deg: 0.0,
            scale_pct: 0.0,
            shear_deg: 0.0,
            elastic_sigma: DEFAULT_ELASTIC_SIGMA,
            elastic_alpha: DEFAULT_ELASTIC_ALPHA,
            translate: false,
            rotate: false,
            scale: false,
            shear: false,
            elastic: false,
        }
    }
}

impl DeformationConfig {
    /// Only translations of at most `pct` percent.
    pub fn translation(pct: f64) -> Self {
        DeformationConfig {
            translate_pct: pct,
            translate: pct > 0.0,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.translate || self.rotate || self.scale || self.shear || self.elastic
    }

    pub fn validate(&self) -> Result<()> {
        let maxima = [
            self.translate_pct,
            self.rotate_deg,
            self.scale_pct,
            self.shear_deg,
            self.elastic_alpha,
        ];
        if maxima.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Config("deformation maxima must be finite and non-negative".into()));
        }
        if self.scale && self.scale_pct >= 100.0 {
            return Err(Error::Config("scale change must stay below 100%".into()));
        }
        if self.elastic && self.elastic_alpha > 0.0 && !(self.elastic_sigma > 0.0) {
            return Err(Error::Config("elastic sigma must be positive".into()));
        }
        Ok(())
    }
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        Uniform::new_inclusive(-max, max).sample(rng)
    } else {
        0.0
    }
}

/// Draws each enabled parameter uniformly from `[-max, max]`.
pub fn sample_params(config: &DeformationConfig, seed: u64) -> DeformationParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DeformationParams::default();
    if config.translate {
        p.translate = (
            symmetric(&mut rng, config.translate_pct) / 100.0,
            symmetric(&mut rng, config.translate_pct) / 100.0,
        );
    }
    if config.rotate {
        p.rotate = symmetric(&mut rng, config.rotate_deg);
    }
    if config.scale {
        p.scale = (
            1.0 + symmetric(&mut rng, config.scale_pct) / 100.0,
            1.0 + symmetric(&mut rng, config.scale_pct) / 100.0,
        );
    }
    if config.shear {
        p.shear_h = symmetric(&mut rng, config.shear_deg);
    }
    if config.elastic && config.elastic_alpha > 0.0 {
        p.elastic_sigma = config.elastic_sigma;
        p.elastic_alpha = config.elastic_alpha;
        p.seed = rng.gen();
    }
    p
}

/// Inverse of the forward map `translate * rotate * shear * scale`, as a
/// 2x2 matrix plus the translation in pixels.
fn inverse_affine(p: &DeformationParams, width: usize, height: usize) -> ([f64; 4], (f64, f64)) {
    let (sx, sy) = p.scale;
    let k = p.shear_h.to_radians().tan();
    let (sin, cos) = p.rotate.to_radians().sin_cos();
    // forward = R * H * S with H = [[1, k], [0, 1]]
    let hs = [sx, k * sy, 0.0, sy];
    let fwd = [
        cos * hs[0] - sin * hs[2],
        cos * hs[1] - sin * hs[3],
        sin * hs[0] + cos * hs[2],
        sin * hs[1] + cos * hs[3],
    ];
    let det = fwd[0] * fwd[3] - fwd[1] * fwd[2];
    let inv = [fwd[3] / det, -fwd[1] / det, -fwd[2] / det, fwd[0] / det];
    (inv, (p.translate.0 * width as f64, p.translate.1 * height as f64))
}

/// Bilinear sample at real coordinates; cells outside the map read as
/// `background`.
pub fn bilinear<T: Real>(image: &FeatureMap<T>, x: f64, y: f64, background: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let cell = |cx: i64, cy: i64| -> f64 {
        if cx >= 0 && cy >= 0 && cx < w && cy < h {
            image.get(cx as usize, cy as usize).as_f64()
        } else {
            background
        }
    };
    let (ix, iy) = (x0 as i64, y0 as i64);
    let top = if fx == 0.0 { cell(ix, iy) } else { cell(ix, iy) * (1.0 - fx) + cell(ix + 1, iy) * fx };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 {
        cell(ix, iy + 1)
    } else {
        cell(ix, iy + 1) * (1.0 - fx) + cell(ix + 1, iy + 1) * fx
    };
    top * (1.0 - fy) + bottom * fy
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian blur; taps falling outside the grid are dropped and
/// the remaining weights renormalized.
fn smooth(field: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &k) in kernel.iter().enumerate() {
                    let o = t as i64 - radius;
                    let (sx, sy) = if horizontal { (x + o, y) } else { (x, y + o) };
                    if sx >= 0 && sy >= 0 && sx < width as i64 && sy < height as i64 {
                        acc += k * src[(sy * width as i64 + sx) as usize];
                        norm += k;
                    }
                }
                out[(y * width as i64 + x) as usize] = acc / norm;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Elastic displacement field `(dx, dy)`, row-major: uniform noise in
/// `[-1, 1]` per cell, Gaussian-smoothed with std `sigma`, scaled by `alpha`.
pub fn displacement_field(width: usize, height: usize, sigma: f64, alpha: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("elastic sigma must be positive, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Uniform::new_inclusive(-1.0, 1.0);
    let n = width * height;
    let raw_x: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
    let raw_y: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
    let dx = smooth(&raw_x, width, height, sigma).into_iter().map(|v| v * alpha).collect();
    let dy = smooth(&raw_y, width, height, sigma).into_iter().map(|v| v * alpha).collect();
    Ok((dx, dy))
}

/// Applies `params` to one map. Output cell `p` reads the input at the
/// inverse affine image of `p + d(p)`, where `d` is the elastic field.
pub fn deform<T: Real>(image: &FeatureMap<T>, params: &DeformationParams, background: f64) -> Result<FeatureMap<T>> {
    params.validate()?;
    if params.is_identity() {
        return Ok(image.clone());
    }
    let (w, h) = (image.width(), image.height());
    let field = if params.elastic_alpha != 0.0 {
        Some(displacement_field(w, h, params.elastic_sigma, params.elastic_alpha, params.seed)?)
    } else {
        None
    };
    let (inv, (tx, ty)) = inverse_affine(params, w, h);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = image.zeros_like();
    for y in 0..h {
        for x in 0..w {
            let (mut px, mut py) = (x as f64, y as f64);
            if let Some((dx, dy)) = &field {
                px += dx[y * w + x];
                py += dy[y * w + x];
            }
            let (rx, ry) = (px - cx - tx, py - cy - ty);
            let sx = inv[0] * rx + inv[1] * ry + cx;
            let sy = inv[2] * rx + inv[3] * ry + cy;
            out.set(x, y, T::of(bilinear(image, sx, sy, background)));
        }
    }
    Ok(out)
}

/// Affine part only.
pub fn affine_deform<T: Real>(image: &FeatureMap<T>, params: &DeformationParams, background: f64) -> Result<FeatureMap<T>> {
    let affine = DeformationParams {
        elastic_alpha: 0.0,
        ..*params
    };
    deform(image, &affine, background)
}

/// Elastic part only.
pub fn elastic_deform<T: Real>(image: &FeatureMap<T>, sigma: f64, alpha: f64, seed: u64, background: f64) -> Result<FeatureMap<T>> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("elastic sigma must be positive, got {sigma}")));
    }
    let params = DeformationParams {
        elastic_sigma: sigma,
        elastic_alpha: alpha,
        seed,
        ..DeformationParams::default()
    };
    deform(image, &params, background)
}

/// Deforms every channel of a sample with the same parameters.
pub fn deform_channels<T: Real>(channels: &[FeatureMap<T>], params: &DeformationParams, background: f64) -> Result<Vec<FeatureMap<T>>> {
    channels.iter().map(|c| deform(c, params, background)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> FeatureMap<f64> {
        let v: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 11) as f64 / 10.0 - 0.5).collect();
        FeatureMap::from_rows(w, h, 32, &v).unwrap()
    }

    fn spike(w: usize, h: usize, x: usize, y: usize) -> FeatureMap<f64> {
        let mut m = FeatureMap::new(w, h, 32).unwrap();
        m.set(x, y, 1.0);
        m
    }

    #[test]
    fn zero_config_gives_identity() {
        let p = sample_params(&DeformationConfig::default(), 42);
        assert!(p.is_identity());
        let all_zero_but_enabled = DeformationConfig {
            translate: true,
            rotate: true,
            scale: true,
            shear: true,
            elastic: true,
            elastic_alpha: 0.0,
            ..DeformationConfig::default()
        };
        let p = sample_params(&all_zero_but_enabled, 7);
        assert!(p.is_identity());
        let img = ramp(9, 7);
        assert_eq!(deform(&img, &p, -1.0).unwrap(), img);
    }

    #[test]
    fn translation_bounded_by_percent() {
        let config = DeformationConfig::translation(5.0);
        for seed in 0..200 {
            let p = sample_params(&config, seed);
            assert!((p.translate.0 * 32.0).abs() <= 1.6 + 1e-12);
            assert!((p.translate.1 * 32.0).abs() <= 1.6 + 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let config = DeformationConfig {
            translate_pct: 10.0,
            rotate_deg: 15.0,
            scale_pct: 15.0,
            shear_deg: 10.0,
            translate: true,
            rotate: true,
            scale: true,
            shear: true,
            elastic: true,
            ..DeformationConfig::default()
        };
        assert_eq!(sample_params(&config, 3), sample_params(&config, 3));
        assert_ne!(sample_params(&config, 3), sample_params(&config, 4));
    }

    #[test]
    fn full_turn_is_identity() {
        let img = ramp(12, 10);
        let p = DeformationParams {
            rotate: 360.0,
            ..DeformationParams::default()
        };
        let out = affine_deform(&img, &p, 0.0).unwrap();
        for (a, b) in out.values().zip(img.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn integer_translation_shifts_indices() {
        let img = spike(8, 8, 3, 4);
        let p = DeformationParams {
            translate: (1.0 / 8.0, 0.0),
            ..DeformationParams::default()
        };
        let out = affine_deform(&img, &p, 0.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if x >= 1 { img.get(x - 1, y) } else { 0.0 };
                assert!((out.get(x, y) - expected).abs() < 1e-12, "({x},{y})");
            }
        }
    }

    #[test]
    fn background_fills_uncovered_cells() {
        let img = ramp(6, 6);
        let p = DeformationParams {
            translate: (0.5, 0.0),
            ..DeformationParams::default()
        };
        let out = affine_deform(&img, &p, -1.0).unwrap();
        assert_eq!(out.get(0, 0), -1.0);
        assert_eq!(out.get(2, 5), -1.0);
        assert_eq!(out.get(3, 2), img.get(0, 2));
    }

    #[test]
    fn half_turn_flips_both_axes() {
        let img = ramp(5, 7);
        let p = DeformationParams {
            rotate: 180.0,
            ..DeformationParams::default()
        };
        let out = affine_deform(&img, &p, 0.0).unwrap();
        for y in 0..7 {
            for x in 0..5 {
                assert!((out.get(x, y) - img.get(4 - x, 6 - y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn upscaling_by_two_samples_halfway() {
        // Forward scale 2 about the center maps output x to input (x - c) / 2 + c.
        let v: Vec<f64> = (0..9).map(|x| x as f64).collect();
        let img = FeatureMap::from_rows(9, 1, 32, &v).unwrap();
        let p = DeformationParams {
            scale: (2.0, 1.0),
            ..DeformationParams::default()
        };
        let out = affine_deform(&img, &p, 0.0).unwrap();
        for x in 0..9 {
            assert!((out.get(x, 0) - ((x as f64 - 4.0) / 2.0 + 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn shear_moves_rows_sideways() {
        let img = spike(9, 9, 4, 6);
        let p = DeformationParams {
            shear_h: 45.0,
            ..DeformationParams::default()
        };
        let out = affine_deform(&img, &p, 0.0).unwrap();
        // Row 6 is two rows below the center; tan(45 deg) = 1 shifts it by two columns.
        assert!((out.get(6, 6) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_scale_rejected() {
        let p = DeformationParams {
            scale: (0.0, 1.0),
            ..DeformationParams::default()
        };
        assert!(matches!(affine_deform(&ramp(4, 4), &p, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn elastic_alpha_zero_is_identity_and_seeded() {
        let img = ramp(10, 10);
        assert_eq!(elastic_deform(&img, 4.0, 0.0, 1, 0.0).unwrap(), img);
        let a = elastic_deform(&img, 4.0, 8.0, 1, 0.0).unwrap();
        let b = elastic_deform(&img, 4.0, 8.0, 1, 0.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, img);
        assert!(matches!(elastic_deform(&img, 0.0, 8.0, 1, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn displacement_grows_linearly_in_alpha() {
        let mean = |alpha: f64| {
            let (dx, dy) = displacement_field(28, 28, 6.0, alpha, 11).unwrap();
            dx.iter().zip(&dy).map(|(a, b)| a.hypot(*b)).sum::<f64>() / dx.len() as f64
        };
        let base = mean(1.0);
        assert!(base > 0.0);
        for alpha in [2.0, 4.0] {
            let slope = mean(alpha) / alpha;
            assert!((slope - base).abs() <= 0.05 * base);
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let field = vec![0.25; 6 * 5];
        for v in smooth(&field, 6, 5, 2.0) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
