//! Pixel container, color statistics, HSV conversion, and binary PPM I/O.
//!
//! Pixels are `f64` in nominal range `[0,1]` but are allowed to leave that
//! range inside the pipeline; clamping happens only when a file is written.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// An H x W RGB raster, row-major, 3 interleaved channels per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert!(height >= 1 && width >= 1, "empty image");
        assert_eq!(pixels.len(), height * width * 3, "pixel buffer length");
        Image {
            height,
            width,
            pixels,
        }
    }

    /// Constant-valued image.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb[0];
        self.pixels[i + 1] = rgb[1];
        self.pixels[i + 2] = rgb[2];
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::DimensionMismatch {
                left_h: self.height,
                left_w: self.width,
                right_h: other.height,
                right_w: other.width,
            });
        }
        Ok(())
    }

    /// Crop a `ph x pw` window with top-left corner at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, ph: usize, pw: usize) -> Image {
        assert!(y + ph <= self.height && x + pw <= self.width, "crop out of bounds");
        let mut out = Vec::with_capacity(ph * pw * 3);
        for row in y..y + ph {
            let start = (row * self.width + x) * 3;
            out.extend_from_slice(&self.pixels[start..start + pw * 3]);
        }
        Image::new(ph, pw, out)
    }

    /// Luma channel (BT.601 weights), one value per pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Quantize like a save/load round trip would: clamp then snap to k/255.
    pub fn quantized(&self) -> Image {
        let px = self.pixels.iter().map(|&v| quantize_u8(v) as f64 / 255.0).collect();
        Image::new(self.height, self.width, px)
    }
}

/// Per-channel means and standard deviations, ordered
/// `[mu_r, mu_g, mu_b, sigma_r, sigma_g, sigma_b]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColorStats(pub [f64; 6]);

impl ColorStats {
    pub fn mean(&self, channel: usize) -> f64 {
        self.0[channel]
    }

    pub fn std(&self, channel: usize) -> f64 {
        self.0[3 + channel]
    }

    pub fn values(&self) -> [f64; 6] {
        self.0
    }
}

/// Population mean and standard deviation per channel (N divisor, not N-1).
/// Two-pass so constant channels come out with sigma exactly zero.
pub fn channel_stats(image: &Image) -> ColorStats {
    let n = (image.height() * image.width()) as f64;
    let mut sum = [0.0f64; 3];
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in image.pixels().chunks_exact(3) {
        for c in 0..3 {
            sum[c] += p[c];
            min[c] = min[c].min(p[c]);
            max[c] = max[c].max(p[c]);
        }
    }
    let mean = [sum[0] / n, sum[1] / n, sum[2] / n];
    let mut sq = [0.0f64; 3];
    for p in image.pixels().chunks_exact(3) {
        for c in 0..3 {
            let d = p[c] - mean[c];
            sq[c] += d * d;
        }
    }
    let mut out = [0.0f64; 6];
    for c in 0..3 {
        // Constant channels are exact: mean is the value, sigma is zero.
        if min[c] == max[c] {
            out[c] = min[c];
            out[3 + c] = 0.0;
        } else {
            out[c] = mean[c];
            out[3 + c] = (sq[c] / n).sqrt();
        }
    }
    ColorStats(out)
}

/// Hexcone RGB -> HSV. H in degrees `[0, 360)`, S and V in `[0, 1]`.
/// Achromatic pixels get H = 0.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    [h.rem_euclid(360.0), s, v]
}

/// Hexcone HSV -> RGB, inverse of [`rgb_to_hsv`] for chromatic pixels.
pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r1 + m, g1 + m, b1 + m]
}

/// Round-half-up quantization of a unit-range value to a byte.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Encode as binary PPM (P6, maxval 255).
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", image.width(), image.height());
    let mut out = Vec::with_capacity(header.len() + image.pixels().len());
    out.extend_from_slice(header.as_bytes());
    out.extend(image.pixels().iter().map(|&v| quantize_u8(v)));
    out
}

/// Decode a binary PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |reason: &str| Error::PpmFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(bad("missing P6 magic"));
    }
    pos += 2;

    // Header tokens may be separated by any whitespace; '#' starts a comment.
    let mut next_token = |pos: &mut usize| -> Option<usize> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (*pos > start).then_some(start)
    };

    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        let start = next_token(&mut pos).ok_or_else(|| bad("truncated header"))?;
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?;
        *field = text.parse().map_err(|_| bad("non-numeric header field"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }

    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing header terminator"));
    }
    pos += 1;

    let need = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(bad(&format!(
            "truncated payload: have {} bytes, need {need}",
            payload.len()
        )));
    }
    let pixels = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::new(height, width, pixels))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}
