//! Seeded synthesis of scanner-style degradations.
//!
//! Five generators fabricate a "scanned" image from an original: a global
//! HSV color transition, verso bleed-through, Gaussian noise standing in for
//! halftone and texture distortion, dot-shaped external noise, and linear
//! internal noise bands. Each is applied independently with a configured
//! probability, in a fixed order, from its own derived random stream, so a
//! sample is fully determined by `(original, back, config, sample_seed)` and
//! can be replayed from its record.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{hsv_to_rgb, rgb_to_hsv, Image};
use crate::rng::{derive_key, stream};

/// Blend weight of a stamped dot against the underlying pixel.
pub const DOT_BLEND: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "range lo > hi");
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }

    fn sample_count(&self, rng: &mut impl Rng) -> usize {
        let lo = self.lo.round() as i64;
        let hi = self.hi.round() as i64;
        if lo >= hi {
            lo.max(0) as usize
        } else {
            rng.gen_range(lo..=hi).max(0) as usize
        }
    }
}

/// Application probabilities and uniform strength ranges for all five
/// degradations, plus the master seed of the stream hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub master_seed: u64,

    pub color_prob: f64,
    pub hue_shift: Range,
    pub sat_scale: Range,
    pub val_scale: Range,

    pub bleed_prob: f64,
    pub bleed_alpha: Range,

    pub gaussian_prob: f64,
    pub noise_sigma: Range,

    pub dots_prob: f64,
    pub dot_count: Range,
    pub dot_radius: Range,
    pub dot_intensity: Range,

    pub lines_prob: f64,
    pub line_count: Range,
    pub line_width: Range,
    pub line_intensity: Range,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            master_seed: 0,
            color_prob: 0.9,
            hue_shift: Range::new(-15.0, 15.0),
            sat_scale: Range::new(0.7, 1.1),
            val_scale: Range::new(0.7, 1.1),
            bleed_prob: 0.3,
            bleed_alpha: Range::new(0.05, 0.2),
            gaussian_prob: 0.8,
            noise_sigma: Range::new(0.01, 0.06),
            dots_prob: 0.6,
            dot_count: Range::new(0.0, 20.0),
            dot_radius: Range::new(1.0, 4.0),
            dot_intensity: Range::new(0.0, 0.35),
            lines_prob: 0.5,
            line_count: Range::new(0.0, 3.0),
            line_width: Range::new(1.0, 3.0),
            line_intensity: Range::new(-0.25, 0.25),
        }
    }
}

impl DegradationConfig {
    /// Config that applies nothing; synthesize becomes the identity map.
    pub fn disabled(master_seed: u64) -> Self {
        DegradationConfig {
            master_seed,
            color_prob: 0.0,
            bleed_prob: 0.0,
            gaussian_prob: 0.0,
            dots_prob: 0.0,
            lines_prob: 0.0,
            ..DegradationConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("color_prob", self.color_prob),
            ("bleed_prob", self.bleed_prob),
            ("gaussian_prob", self.gaussian_prob),
            ("dots_prob", self.dots_prob),
            ("lines_prob", self.lines_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(crate::error::Error::Config(format!(
                    "{name} = {p} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub y: usize,
    pub x: usize,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineBand {
    pub horizontal: bool,
    pub position: usize,
    pub width: usize,
    pub intensity: f64,
}

/// One degradation actually applied to a sample, with its exact parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AppliedDegradation {
    ColorTransition {
        hue_shift: f64,
        sat_scale: f64,
        val_scale: f64,
    },
    BleedThrough {
        alpha: f64,
    },
    GaussianNoise {
        sigma: f64,
        noise_key: u64,
    },
    ExternalNoise {
        dots: Vec<Dot>,
    },
    InternalNoise {
        lines: Vec<LineBand>,
    },
}

/// Replayable log of what [`synthesize_scanned`] did to one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub master_seed: u64,
    pub sample_seed: u64,
    pub applied: Vec<AppliedDegradation>,
}

/// Global HSV shift/scale: H rotates by `hue_shift` degrees, S and V are
/// scaled and clamped to [0,1].
pub fn apply_color_transition(
    image: &Image,
    hue_shift: f64,
    sat_scale: f64,
    val_scale: f64,
) -> Image {
    assert!(sat_scale > 0.0 && val_scale > 0.0, "scales must be positive");
    let mut out = image.clone();
    for p in out.pixels_mut().chunks_exact_mut(3) {
        let [h, s, v] = rgb_to_hsv([p[0], p[1], p[2]]);
        let rgb = hsv_to_rgb([
            (h + hue_shift).rem_euclid(360.0),
            (s * sat_scale).clamp(0.0, 1.0),
            (v * val_scale).clamp(0.0, 1.0),
        ]);
        p.copy_from_slice(&rgb);
    }
    out
}

/// Verso show-through: alpha-blend the horizontally mirrored back page.
pub fn apply_bleed_through(front: &Image, back: &Image, alpha: f64) -> Result<Image> {
    front.same_dims(back)?;
    let (h, w) = (front.height(), front.width());
    let mut out = front.clone();
    for y in 0..h {
        for x in 0..w {
            let f = front.get(y, x);
            let b = back.get(y, w - 1 - x);
            out.set(y, x, [
                (1.0 - alpha) * f[0] + alpha * b[0],
                (1.0 - alpha) * f[1] + alpha * b[1],
                (1.0 - alpha) * f[2] + alpha * b[2],
            ]);
        }
    }
    Ok(out)
}

/// I.i.d. additive Gaussian noise per component, left unclamped.
pub fn apply_gaussian_noise(image: &Image, sigma: f64, rng: &mut impl Rng) -> Image {
    assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = image.clone();
    for v in out.pixels_mut() {
        *v += normal.sample(rng);
    }
    out
}

/// Sample dot parameters: uniform centers, radii and gray intensities.
pub fn sample_dots(
    h: usize,
    w: usize,
    dot_count: usize,
    radius_range: Range,
    intensity_range: Range,
    rng: &mut impl Rng,
) -> Vec<Dot> {
    (0..dot_count)
        .map(|_| Dot {
            y: rng.gen_range(0..h),
            x: rng.gen_range(0..w),
            radius: radius_range.sample(rng),
            intensity: intensity_range.sample(rng),
        })
        .collect()
}

/// Stamp filled discs, blending each against the image at [`DOT_BLEND`].
pub fn stamp_dots(image: &Image, dots: &[Dot]) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for dot in dots {
        let r = dot.radius;
        let ri = r.ceil() as isize;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if (dy * dy + dx * dx) as f64 > r * r {
                    continue;
                }
                let y = dot.y as isize + dy;
                let x = dot.x as isize + dx;
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let p = out.get(y as usize, x as usize);
                out.set(y as usize, x as usize, [
                    (1.0 - DOT_BLEND) * p[0] + DOT_BLEND * dot.intensity,
                    (1.0 - DOT_BLEND) * p[1] + DOT_BLEND * dot.intensity,
                    (1.0 - DOT_BLEND) * p[2] + DOT_BLEND * dot.intensity,
                ]);
            }
        }
    }
    out
}

/// Dot-shaped external noise: `dot_count` filled discs at uniform positions.
pub fn apply_external_noise(
    image: &Image,
    dot_count: usize,
    radius_range: Range,
    intensity_range: Range,
    rng: &mut impl Rng,
) -> (Image, Vec<Dot>) {
    let dots = sample_dots(
        image.height(),
        image.width(),
        dot_count,
        radius_range,
        intensity_range,
        rng,
    );
    (stamp_dots(image, &dots), dots)
}

/// Sample full-width/full-height band parameters.
pub fn sample_lines(
    h: usize,
    w: usize,
    line_count: usize,
    width_range: Range,
    intensity_range: Range,
    rng: &mut impl Rng,
) -> Vec<LineBand> {
    (0..line_count)
        .map(|_| {
            let horizontal = rng.gen::<bool>();
            let extent = if horizontal { h } else { w };
            let width = (width_range.sample_count(rng)).clamp(1, extent);
            LineBand {
                horizontal,
                position: rng.gen_range(0..=(extent - width)),
                width,
                intensity: intensity_range.sample(rng),
            }
        })
        .collect()
}

/// Additively blend straight bands across the full image extent.
pub fn stamp_lines(image: &Image, lines: &[LineBand]) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for band in lines {
        for offset in 0..band.width {
            let pos = band.position + offset;
            if band.horizontal {
                for x in 0..w {
                    let p = out.get(pos, x);
                    out.set(pos, x, [
                        p[0] + band.intensity,
                        p[1] + band.intensity,
                        p[2] + band.intensity,
                    ]);
                }
            } else {
                for y in 0..h {
                    let p = out.get(y, pos);
                    out.set(y, pos, [
                        p[0] + band.intensity,
                        p[1] + band.intensity,
                        p[2] + band.intensity,
                    ]);
                }
            }
        }
    }
    out
}

/// Linear internal noise: `line_count` straight bands, additively blended.
pub fn apply_internal_noise(
    image: &Image,
    line_count: usize,
    width_range: Range,
    intensity_range: Range,
    rng: &mut impl Rng,
) -> (Image, Vec<LineBand>) {
    let lines = sample_lines(
        image.height(),
        image.width(),
        line_count,
        width_range,
        intensity_range,
        rng,
    );
    (stamp_lines(image, &lines), lines)
}

// Stream tags per degradation; tag 1 under gaussian keys its draw stream.
const DEG_COLOR: u64 = 0;
const DEG_BLEED: u64 = 1;
const DEG_GAUSSIAN: u64 = 2;
const DEG_DOTS: u64 = 3;
const DEG_LINES: u64 = 4;

/// Fabricate a scanned-looking image from an original.
///
/// Each degradation independently decides apply/skip from its configured
/// probability, samples parameters uniformly from its ranges, and is applied
/// in the fixed order color -> bleed -> gaussian -> dots -> lines. The
/// returned record replays to the identical image.
pub fn synthesize_scanned(
    original: &Image,
    back: &Image,
    config: &DegradationConfig,
    sample_seed: u64,
) -> Result<(Image, DegradationRecord)> {
    config.validate()?;
    let mut img = original.clone();
    let mut applied = Vec::new();
    let gate = |rng: &mut ChaCha8Rng, p: f64| -> bool {
        // Sample unconditionally so parameter draws stay aligned.
        let u = rng.gen::<f64>();
        p > 0.0 && u < p
    };

    let mut rng = stream(config.master_seed, &[sample_seed, DEG_COLOR]);
    if gate(&mut rng, config.color_prob) {
        let hue_shift = config.hue_shift.sample(&mut rng);
        let sat_scale = config.sat_scale.sample(&mut rng);
        let val_scale = config.val_scale.sample(&mut rng);
        img = apply_color_transition(&img, hue_shift, sat_scale, val_scale);
        applied.push(AppliedDegradation::ColorTransition {
            hue_shift,
            sat_scale,
            val_scale,
        });
    }

    let mut rng = stream(config.master_seed, &[sample_seed, DEG_BLEED]);
    if gate(&mut rng, config.bleed_prob) {
        let alpha = config.bleed_alpha.sample(&mut rng);
        img = apply_bleed_through(&img, back, alpha)?;
        applied.push(AppliedDegradation::BleedThrough { alpha });
    }

    let mut rng = stream(config.master_seed, &[sample_seed, DEG_GAUSSIAN]);
    if gate(&mut rng, config.gaussian_prob) {
        let sigma = config.noise_sigma.sample(&mut rng);
        let noise_key = derive_key(config.master_seed, &[sample_seed, DEG_GAUSSIAN, 1]);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_key);
        img = apply_gaussian_noise(&img, sigma, &mut noise_rng);
        applied.push(AppliedDegradation::GaussianNoise { sigma, noise_key });
    }

    let mut rng = stream(config.master_seed, &[sample_seed, DEG_DOTS]);
    if gate(&mut rng, config.dots_prob) {
        let count = config.dot_count.sample_count(&mut rng);
        let dots = sample_dots(
            img.height(),
            img.width(),
            count,
            config.dot_radius,
            config.dot_intensity,
            &mut rng,
        );
        img = stamp_dots(&img, &dots);
        applied.push(AppliedDegradation::ExternalNoise { dots });
    }

    let mut rng = stream(config.master_seed, &[sample_seed, DEG_LINES]);
    if gate(&mut rng, config.lines_prob) {
        let count = config.line_count.sample_count(&mut rng);
        let lines = sample_lines(
            img.height(),
            img.width(),
            count,
            config.line_width,
            config.line_intensity,
            &mut rng,
        );
        img = stamp_lines(&img, &lines);
        applied.push(AppliedDegradation::InternalNoise { lines });
    }

    Ok((
        img,
        DegradationRecord {
            master_seed: config.master_seed,
            sample_seed,
            applied,
        },
    ))
}

/// Re-apply a record to the same original; reproduces the synthetic image
/// bit for bit.
pub fn replay_record(original: &Image, back: &Image, record: &DegradationRecord) -> Result<Image> {
    let mut img = original.clone();
    for step in &record.applied {
        img = match step {
            AppliedDegradation::ColorTransition {
                hue_shift,
                sat_scale,
                val_scale,
            } => apply_color_transition(&img, *hue_shift, *sat_scale, *val_scale),
            AppliedDegradation::BleedThrough { alpha } => {
                apply_bleed_through(&img, back, *alpha)?
            }
            AppliedDegradation::GaussianNoise { sigma, noise_key } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*noise_key);
                apply_gaussian_noise(&img, *sigma, &mut rng)
            }
            AppliedDegradation::ExternalNoise { dots } => stamp_dots(&img, dots),
            AppliedDegradation::InternalNoise { lines } => stamp_lines(&img, lines),
        };
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream(seed, &[0xde]);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn color_transition_neutral_is_identity() {
        let img = random_image(6, 6, 1);
        let out = apply_color_transition(&img, 0.0, 1.0, 1.0);
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn color_transition_red_to_green() {
        let img = Image::filled(2, 2, 0.0);
        let mut red = img.clone();
        for p in red.pixels_mut().chunks_exact_mut(3) {
            p[0] = 1.0;
        }
        let out = apply_color_transition(&red, 120.0, 1.0, 1.0);
        let p = out.get(0, 0);
        assert!((p[0] - 0.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn color_transition_value_scale_oracle() {
        let mut img = Image::filled(1, 1, 0.0);
        img.set(0, 0, [0.2, 0.4, 0.6]);
        let out = apply_color_transition(&img, 0.0, 1.0, 0.5);
        let p = out.get(0, 0);
        for (got, want) in p.iter().zip([0.1, 0.2, 0.3]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn bleed_through_extremes() {
        let front = random_image(4, 6, 2);
        let back = random_image(4, 6, 3);
        let zero = apply_bleed_through(&front, &back, 0.0).unwrap();
        assert_eq!(zero, front);
        let full = apply_bleed_through(&front, &back, 1.0).unwrap();
        assert_eq!(full.get(1, 0), back.get(1, 5)); // mirrored column
    }

    #[test]
    fn bleed_through_scalar_blend() {
        let front = Image::filled(3, 3, 0.2);
        let back = Image::filled(3, 3, 0.6);
        let out = apply_bleed_through(&front, &back, 0.25).unwrap();
        for v in out.pixels() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_zero_sigma_identity() {
        let img = random_image(4, 4, 4);
        let mut rng = stream(9, &[0]);
        assert_eq!(apply_gaussian_noise(&img, 0.0, &mut rng), img);
    }

    #[test]
    fn gaussian_moments() {
        // CLT bound on the mean and 1% tolerance on the variance over 1e6 draws.
        let sigma = 0.05;
        let n = 1_000_000;
        let img = Image::filled(500, 667, 0.0); // 500*667*3 > 1e6 components
        let mut rng = stream(5, &[1]);
        let noisy = apply_gaussian_noise(&img, sigma, &mut rng);
        let deltas = &noisy.pixels()[..n];
        let mean = deltas.iter().sum::<f64>() / n as f64;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * sigma / 1e3, "mean {mean}");
        assert!((var - sigma * sigma).abs() < 0.01 * sigma * sigma, "var {var}");
    }

    #[test]
    fn dots_zero_count_identity() {
        let img = random_image(5, 5, 6);
        let mut rng = stream(7, &[0]);
        let (out, dots) = apply_external_noise(&img, 0, Range::new(1.0, 2.0), Range::new(0.0, 0.3), &mut rng);
        assert_eq!(out, img);
        assert!(dots.is_empty());
    }

    #[test]
    fn dots_locality() {
        let img = Image::filled(11, 11, 1.0);
        let dots = [Dot { y: 5, x: 5, radius: 2.0, intensity: 0.0 }];
        let out = stamp_dots(&img, &dots);
        for y in 0..11usize {
            for x in 0..11usize {
                let d2 = (y as isize - 5).pow(2) + (x as isize - 5).pow(2);
                let changed = out.get(y, x) != img.get(y, x);
                if d2 as f64 > 4.0 {
                    assert!(!changed, "pixel ({y},{x}) outside radius changed");
                } else {
                    assert!(changed, "pixel ({y},{x}) inside radius untouched");
                }
            }
        }
    }

    #[test]
    fn dots_area_fraction() {
        // Sparse discs on a big canvas: changed fraction ~ count*pi*r^2/(H*W).
        let img = Image::filled(256, 256, 1.0);
        let mut rng = stream(8, &[2]);
        let count = 24;
        let r = 3.0;
        let (out, _) = apply_external_noise(
            &img,
            count,
            Range::new(r, r),
            Range::new(0.0, 0.0),
            &mut rng,
        );
        let changed = out
            .pixels()
            .chunks_exact(3)
            .zip(img.pixels().chunks_exact(3))
            .filter(|(a, b)| a != b)
            .count();
        let expect = count as f64 * std::f64::consts::PI * r * r;
        let ratio = changed as f64 / expect;
        assert!((0.8..1.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn lines_zero_count_identity() {
        let img = random_image(5, 5, 9);
        let mut rng = stream(10, &[0]);
        let (out, lines) = apply_internal_noise(&img, 0, Range::new(1.0, 2.0), Range::new(0.1, 0.2), &mut rng);
        assert_eq!(out, img);
        assert!(lines.is_empty());
    }

    #[test]
    fn lines_band_locality() {
        let img = Image::filled(8, 8, 0.5);
        let band = [LineBand { horizontal: true, position: 3, width: 2, intensity: 0.2 }];
        let out = stamp_lines(&img, &band);
        for y in 0..8 {
            let expect = if y == 3 || y == 4 { 0.7 } else { 0.5 };
            for x in 0..8 {
                assert!((out.get(y, x)[0] - expect).abs() < 1e-12, "row {y}");
            }
        }
    }

    #[test]
    fn lines_non_overlapping_widths_sum() {
        let img = Image::filled(16, 16, 0.5);
        let bands = [
            LineBand { horizontal: true, position: 1, width: 2, intensity: 0.1 },
            LineBand { horizontal: true, position: 6, width: 3, intensity: 0.1 },
            LineBand { horizontal: true, position: 12, width: 1, intensity: 0.1 },
        ];
        let out = stamp_lines(&img, &bands);
        let changed_rows = (0..16)
            .filter(|&y| (0..16).any(|x| out.get(y, x) != img.get(y, x)))
            .count();
        assert_eq!(changed_rows, 2 + 3 + 1);
    }

    #[test]
    fn synthesize_zero_probability_identity() {
        let img = random_image(8, 8, 11);
        let back = random_image(8, 8, 12);
        let cfg = DegradationConfig::disabled(42);
        let (out, record) = synthesize_scanned(&img, &back, &cfg, 7).unwrap();
        assert_eq!(out, img);
        assert!(record.applied.is_empty());
    }

    #[test]
    fn synthesize_deterministic() {
        let img = random_image(12, 12, 13);
        let back = random_image(12, 12, 14);
        let cfg = DegradationConfig { master_seed: 5, ..DegradationConfig::default() };
        let (a, ra) = synthesize_scanned(&img, &back, &cfg, 3).unwrap();
        let (b, rb) = synthesize_scanned(&img, &back, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (c, _) = synthesize_scanned(&img, &back, &cfg, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthesize_point_ranges_match_manual_composition() {
        let img = random_image(10, 10, 15);
        let back = random_image(10, 10, 16);
        let point = |v: f64| Range::new(v, v);
        let cfg = DegradationConfig {
            master_seed: 21,
            color_prob: 1.0,
            hue_shift: point(10.0),
            sat_scale: point(0.9),
            val_scale: point(0.8),
            bleed_prob: 1.0,
            bleed_alpha: point(0.1),
            gaussian_prob: 1.0,
            noise_sigma: point(0.02),
            dots_prob: 1.0,
            dot_count: point(3.0),
            dot_radius: point(2.0),
            dot_intensity: point(0.1),
            lines_prob: 1.0,
            line_count: point(2.0),
            line_width: point(1.0),
            line_intensity: point(0.15),
        };
        let sample_seed = 99;
        let (out, record) = synthesize_scanned(&img, &back, &cfg, sample_seed).unwrap();
        assert_eq!(record.applied.len(), 5);

        // Manual pipeline with the same parameters and the same draw streams.
        let step1 = apply_color_transition(&img, 10.0, 0.9, 0.8);
        let step2 = apply_bleed_through(&step1, &back, 0.1).unwrap();
        let key = derive_key(21, &[sample_seed, 2, 1]);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(key);
        let step3 = apply_gaussian_noise(&step2, 0.02, &mut noise_rng);
        let (dots, lines) = match (&record.applied[3], &record.applied[4]) {
            (
                AppliedDegradation::ExternalNoise { dots },
                AppliedDegradation::InternalNoise { lines },
            ) => (dots.clone(), lines.clone()),
            other => panic!("unexpected record tail {other:?}"),
        };
        assert_eq!(dots.len(), 3);
        assert_eq!(lines.len(), 2);
        let step4 = stamp_dots(&step3, &dots);
        let step5 = stamp_lines(&step4, &lines);
        assert_eq!(out, step5);
    }

    #[test]
    fn record_replays_exactly() {
        let img = random_image(14, 9, 17);
        let back = random_image(14, 9, 18);
        let cfg = DegradationConfig { master_seed: 77, ..DegradationConfig::default() };
        for sample in 0..6 {
            let (out, record) = synthesize_scanned(&img, &back, &cfg, sample).unwrap();
            let replayed = replay_record(&img, &back, &record).unwrap();
            assert_eq!(out, replayed, "sample {sample}");
        }
    }

    #[test]
    fn application_rates_match_probabilities() {
        let img = Image::filled(4, 4, 0.5);
        let back = Image::filled(4, 4, 0.5);
        let cfg = DegradationConfig { master_seed: 31, ..DegradationConfig::default() };
        let n = 1500usize;
        let mut counts = [0usize; 5];
        for s in 0..n {
            let (_, record) = synthesize_scanned(&img, &back, &cfg, s as u64).unwrap();
            for step in &record.applied {
                let idx = match step {
                    AppliedDegradation::ColorTransition { .. } => 0,
                    AppliedDegradation::BleedThrough { .. } => 1,
                    AppliedDegradation::GaussianNoise { .. } => 2,
                    AppliedDegradation::ExternalNoise { .. } => 3,
                    AppliedDegradation::InternalNoise { .. } => 4,
                };
                counts[idx] += 1;
            }
        }
        let probs = [
            cfg.color_prob,
            cfg.bleed_prob,
            cfg.gaussian_prob,
            cfg.dots_prob,
            cfg.lines_prob,
        ];
        for (i, (&count, &p)) in counts.iter().zip(&probs).enumerate() {
            let rate = count as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (rate - p).abs() <= 3.0 * se,
                "degradation {i}: rate {rate} vs p {p} (3se {})",
                3.0 * se
            );
        }
    }
}
