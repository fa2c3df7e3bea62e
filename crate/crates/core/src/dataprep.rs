//! Pair alignment, patch extraction, and train/val/test manifests with an
//! optional synthetic mix.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{synthesize_scanned, DegradationConfig};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, Image};
use crate::rng::stream;

/// Where the scanned content sits relative to original coordinates:
/// `scanned(y + dy, x + dx)` aligns with `original(y, x)`.
pub type Offset = (isize, isize);

/// Integer-shift registration by exhaustive zero-normalized cross-correlation
/// on luma. Returns the best `(dx, dy, score)` over the search window.
pub fn register_translation(
    scanned: &Image,
    original: &Image,
    max_shift: usize,
) -> Result<(isize, isize, f64)> {
    scanned.same_dims(original)?;
    let (h, w) = (scanned.height(), scanned.width());
    if max_shift >= h.min(w) / 4 {
        return Err(Error::InvalidArgument(format!(
            "max_shift {max_shift} must be below min(H,W)/4 = {}",
            h.min(w) / 4
        )));
    }
    let ls = scanned.luma();
    let lo = original.luma();
    let constant = |l: &[f64]| l.iter().all(|&v| v == l[0]);
    if constant(&ls) || constant(&lo) {
        return Err(Error::Unregisterable);
    }

    let m = max_shift as isize;
    let mut best: Option<(isize, isize, f64)> = None;
    let mut any_defined = false;
    for dy in -m..=m {
        for dx in -m..=m {
            let y0 = 0.max(-dy) as usize;
            let y1 = (h as isize - 0.max(dy)) as usize;
            let x0 = 0.max(-dx) as usize;
            let x1 = (w as isize - 0.max(dx)) as usize;
            let n = ((y1 - y0) * (x1 - x0)) as f64;

            let mut sum_a = 0.0;
            let mut sum_b = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum_a += ls[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    sum_b += lo[y * w + x];
                }
            }
            let mean_a = sum_a / n;
            let mean_b = sum_b / n;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let a = ls[(y as isize + dy) as usize * w + (x as isize + dx) as usize] - mean_a;
                    let b = lo[y * w + x] - mean_b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            if saa <= 0.0 || sbb <= 0.0 {
                continue;
            }
            any_defined = true;
            let score = sab / (saa * sbb).sqrt();
            if best.map_or(true, |(_, _, s)| score > s) {
                best = Some((dx, dy, score));
            }
        }
    }
    match best {
        Some(hit) if any_defined => Ok(hit),
        _ => Err(Error::Unregisterable),
    }
}

/// One aligned scanned/original pair held in memory.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub scanned: Image,
    pub original: Image,
    pub offset: Offset,
}

/// A patch pair plus the original-space coordinate it was cut at.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub scanned: Image,
    pub original: Image,
    pub y: usize,
    pub x: usize,
}

fn patch_bounds(pair: &AlignedPair, patch: usize) -> Result<(usize, usize, usize, usize)> {
    let (h, w) = (pair.original.height(), pair.original.width());
    let (dx, dy) = pair.offset;
    let y_lo = 0.max(-dy) as usize;
    let y_hi = (h as isize - patch as isize - 0.max(dy)) as i64;
    let x_lo = 0.max(-dx) as usize;
    let x_hi = (w as isize - patch as isize - 0.max(dx)) as i64;
    if y_hi < y_lo as i64 || x_hi < x_lo as i64 {
        return Err(Error::PatchTooLarge {
            patch,
            usable_h: h.saturating_sub(dy.unsigned_abs()),
            usable_w: w.saturating_sub(dx.unsigned_abs()),
        });
    }
    Ok((y_lo, y_hi as usize, x_lo, x_hi as usize))
}

/// Cut one offset-compensated patch pair at original-space `(y, x)`.
pub fn patch_at(pair: &AlignedPair, patch: usize, y: usize, x: usize) -> PatchPair {
    let (dx, dy) = pair.offset;
    let sy = (y as isize + dy) as usize;
    let sx = (x as isize + dx) as usize;
    PatchPair {
        scanned: pair.scanned.crop(sy, sx, patch, patch),
        original: pair.original.crop(y, x, patch, patch),
        y,
        x,
    }
}

/// `count` aligned patch pairs at seeded uniform positions.
pub fn extract_patches(
    pair: &AlignedPair,
    patch: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PatchPair>> {
    let (y_lo, y_hi, x_lo, x_hi) = patch_bounds(pair, patch)?;
    Ok((0..count)
        .map(|_| {
            let y = rng.gen_range(y_lo..=y_hi);
            let x = rng.gen_range(x_lo..=x_hi);
            patch_at(pair, patch, y, x)
        })
        .collect())
}

/// Sample a single training patch pair; convenience over [`extract_patches`].
pub fn sample_patch(pair: &AlignedPair, patch: usize, rng: &mut impl Rng) -> Result<PatchPair> {
    let (y_lo, y_hi, x_lo, x_hi) = patch_bounds(pair, patch)?;
    let y = rng.gen_range(y_lo..=y_hi);
    let x = rng.gen_range(x_lo..=x_hi);
    Ok(patch_at(pair, patch, y, x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Whether synthetic pairs are added on top of the real ones or replace a
/// share of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticMode {
    Augment,
    Replace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Paths are relative to the manifest file's directory.
    pub scanned: String,
    pub original: String,
    pub origin: Origin,
    pub split: Split,
    pub offset: (i32, i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub seed: u64,
    pub synthetic_ratio: f64,
    pub synthetic_mode: SyntheticMode,
    pub entries: Vec<ManifestEntry>,
}

impl PairManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ManifestOptions {
    pub split_fractions: (f64, f64, f64),
    pub synthetic_ratio: f64,
    pub synthetic_mode: SyntheticMode,
    pub seed: u64,
    pub max_shift: usize,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        ManifestOptions {
            split_fractions: (0.8, 0.1, 0.1),
            synthetic_ratio: 0.25,
            synthetic_mode: SyntheticMode::Augment,
            seed: 0,
            max_shift: 4,
        }
    }
}

const SCAN_SUFFIX: &str = "_scan.ppm";
const ORIG_SUFFIX: &str = "_orig.ppm";

/// Pair `<stem>_scan.ppm` with `<stem>_orig.ppm` under `dir`. Stems with only
/// one side present are an error listing every offender.
pub fn collect_pair_stems(dir: &Path) -> Result<Vec<String>> {
    let mut scans = BTreeMap::new();
    let mut origs = BTreeMap::new();
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(SCAN_SUFFIX) {
            scans.insert(stem.to_string(), ());
        } else if let Some(stem) = name.strip_suffix(ORIG_SUFFIX) {
            origs.insert(stem.to_string(), ());
        }
    }
    let mut unmatched: Vec<String> = scans
        .keys()
        .filter(|s| !origs.contains_key(*s))
        .chain(origs.keys().filter(|s| !scans.contains_key(*s)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::UnmatchedStems { stems: unmatched });
    }
    if scans.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no `*_scan.ppm` / `*_orig.ppm` pairs in {}",
            dir.display()
        )));
    }
    Ok(scans.into_keys().collect())
}

/// Register every pair under `pairs_dir`, split deterministically, generate
/// the synthetic share from train-split originals, and write the manifest
/// (plus synthetic images and their records) next to `manifest_path`.
pub fn build_manifest(
    pairs_dir: &Path,
    manifest_path: &Path,
    degradation: &DegradationConfig,
    opts: &ManifestOptions,
) -> Result<PairManifest> {
    let (ft, fv, fs_) = opts.split_fractions;
    if !(ft >= 0.0 && fv >= 0.0 && fs_ >= 0.0 && (ft + fv + fs_ - 1.0).abs() < 1e-9) {
        return Err(Error::Config(format!(
            "split fractions {:?} must be non-negative and sum to 1",
            opts.split_fractions
        )));
    }
    if !(0.0..1.0).contains(&opts.synthetic_ratio) {
        return Err(Error::Config(format!(
            "synthetic ratio {} outside [0,1)",
            opts.synthetic_ratio
        )));
    }

    let stems = collect_pair_stems(pairs_dir)?;
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));

    // Deterministic shuffle, then slice val/test off the end.
    let mut order: Vec<usize> = (0..stems.len()).collect();
    let mut rng = stream(opts.seed, &[0x51]);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n = stems.len();
    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fs_).floor() as usize;
    let n_train = n - n_val - n_test;

    let rel = |stem: &str, suffix: &str| format!("{}{}", stem, suffix);
    let mut entries = Vec::new();
    let mut train_stems = Vec::new();
    for (pos, &idx) in order.iter().enumerate() {
        let stem = &stems[idx];
        let split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        if split == Split::Train {
            train_stems.push(stem.clone());
        }
        let scanned_path = pairs_dir.join(rel(stem, SCAN_SUFFIX));
        let original_path = pairs_dir.join(rel(stem, ORIG_SUFFIX));
        let scanned = load_image(&scanned_path)?;
        let original = load_image(&original_path)?;
        let (dx, dy, _score) = register_translation(&scanned, &original, opts.max_shift)?;
        entries.push(ManifestEntry {
            scanned: relative_to(&scanned_path, manifest_dir),
            original: relative_to(&original_path, manifest_dir),
            origin: Origin::Real,
            split,
            offset: (dx as i32, dy as i32),
        });
    }
    if n_train == 0 {
        return Err(Error::EmptySplit {
            split: "train".into(),
        });
    }

    // Synthetic share from train originals only.
    let r = opts.synthetic_ratio;
    let n_real_train = train_stems.len();
    let n_syn = match opts.synthetic_mode {
        SyntheticMode::Augment => (n_real_train as f64 * r / (1.0 - r)).round() as usize,
        SyntheticMode::Replace => (n_real_train as f64 * r).round() as usize,
    };
    if n_syn > 0 {
        let syn_dir = manifest_dir.join(format!(
            "{}_synth",
            manifest_path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "manifest".into())
        ));
        fs::create_dir_all(&syn_dir).map_err(|e| Error::io(&syn_dir, e))?;
        let cfg = DegradationConfig {
            master_seed: crate::rng::derive_key(opts.seed, &[0x5d]),
            ..degradation.clone()
        };
        for i in 0..n_syn {
            let stem = &train_stems[i % n_real_train];
            let back_stem = &train_stems[(i + 1) % n_real_train];
            let original = load_image(pairs_dir.join(rel(stem, ORIG_SUFFIX)))?;
            let back = load_image(pairs_dir.join(rel(back_stem, ORIG_SUFFIX)))?;
            let (synthetic, record) = synthesize_scanned(&original, &back, &cfg, i as u64)?;
            let syn_name = format!("{stem}_syn{i:04}_scan.ppm");
            let syn_path = syn_dir.join(&syn_name);
            save_image(&synthetic, &syn_path)?;
            let record_path = syn_dir.join(format!("{stem}_syn{i:04}_record.json"));
            let json = serde_json::to_string_pretty(&record)
                .map_err(|e| Error::Config(format!("record serialization: {e}")))?;
            fs::write(&record_path, json).map_err(|e| Error::io(&record_path, e))?;

            let entry = ManifestEntry {
                scanned: relative_to(&syn_path, manifest_dir),
                original: relative_to(&pairs_dir.join(rel(stem, ORIG_SUFFIX)), manifest_dir),
                origin: Origin::Synthetic,
                split: Split::Train,
                offset: (0, 0),
            };
            if opts.synthetic_mode == SyntheticMode::Replace {
                // Swap out the i-th train entry.
                let slot = entries
                    .iter()
                    .position(|e| e.split == Split::Train && e.origin == Origin::Real)
                    .expect("replace mode needs a real train entry");
                entries[slot] = entry;
            } else {
                entries.push(entry);
            }
        }
    }

    let manifest = PairManifest {
        seed: opts.seed,
        synthetic_ratio: opts.synthetic_ratio,
        synthetic_mode: opts.synthetic_mode,
        entries,
    };
    write_manifest(&manifest, manifest_path)?;
    Ok(manifest)
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .map(|p| p.to_string_lossy().to_string())
        .unwrap_or_else(|_| path.to_string_lossy().to_string())
}

pub fn write_manifest(manifest: &PairManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<PairManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
}

/// Load the images of one split into memory. `manifest_path` anchors the
/// relative entry paths.
pub fn load_split(
    manifest: &PairManifest,
    manifest_path: &Path,
    split: Split,
) -> Result<Vec<AlignedPair>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for entry in manifest.split(split) {
        out.push(AlignedPair {
            scanned: load_image(base.join(&entry.scanned))?,
            original: load_image(base.join(&entry.original))?,
            offset: (entry.offset.0 as isize, entry.offset.1 as isize),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptySplit {
            split: format!("{split:?}").to_lowercase(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn textured_image(h: usize, w: usize, seed: u64) -> Image {
        // Smooth gradient plus seeded noise so correlation peaks are sharp.
        let mut rng = stream(seed, &[0xaa]);
        let mut px = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let base = 0.3 + 0.4 * (y as f64 / h as f64) * (x as f64 / w as f64);
                for _ in 0..3 {
                    px.push((base + 0.3 * rng.gen::<f64>()).clamp(0.0, 1.0));
                }
            }
        }
        Image::new(h, w, px)
    }

    /// Move content by (dx, dy), wrapping at the borders.
    fn shift_wrap(img: &Image, dx: isize, dy: isize) -> Image {
        let (h, w) = (img.height(), img.width());
        let mut out = img.clone();
        for y in 0..h {
            for x in 0..w {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                out.set(y, x, img.get(sy, sx));
            }
        }
        out
    }

    #[test]
    fn identical_images_register_at_zero() {
        let img = textured_image(32, 32, 1);
        let (dx, dy, score) = register_translation(&img, &img, 4).unwrap();
        assert_eq!((dx, dy), (0, 0));
        assert!((score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constructed_shift_recovered_with_sign_convention() {
        let img = textured_image(48, 48, 2);
        for (dx, dy) in [(3isize, -2isize), (-5, 4), (0, 6)] {
            let shifted = shift_wrap(&img, dx, dy);
            // register(x, shift(x, d)) == -d
            let (rx, ry, _) = register_translation(&img, &shifted, 8).unwrap();
            assert_eq!((rx, ry), (-dx, -dy), "shift ({dx},{dy})");
        }
    }

    #[test]
    fn decorrelated_noise_scores_low() {
        let noise = |seed: u64| {
            let mut rng = stream(seed, &[0xab]);
            Image::new(40, 40, (0..40 * 40 * 3).map(|_| rng.gen::<f64>()).collect())
        };
        let (_, _, score) = register_translation(&noise(3), &noise(4), 4).unwrap();
        assert!(score < 0.2, "score {score}");
    }

    #[test]
    fn zero_variance_unregisterable() {
        let a = Image::filled(24, 24, 0.5);
        let b = Image::filled(24, 24, 0.7);
        assert!(matches!(
            register_translation(&a, &b, 4),
            Err(Error::Unregisterable)
        ));
    }

    #[test]
    fn extract_zero_count_empty() {
        let img = textured_image(16, 16, 5);
        let pair = AlignedPair {
            scanned: img.clone(),
            original: img,
            offset: (0, 0),
        };
        let mut rng = stream(1, &[1]);
        assert!(extract_patches(&pair, 8, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn extract_full_size_patch_is_pair() {
        let img = textured_image(16, 16, 6);
        let pair = AlignedPair {
            scanned: img.clone(),
            original: img.clone(),
            offset: (0, 0),
        };
        let mut rng = stream(2, &[1]);
        let got = extract_patches(&pair, 16, 1, &mut rng).unwrap();
        assert_eq!(got[0].scanned, img);
        assert_eq!(got[0].original, img);
    }

    #[test]
    fn extract_coordinates_are_faithful() {
        let scanned = textured_image(32, 32, 7);
        let original = textured_image(32, 32, 8);
        let pair = AlignedPair {
            scanned: scanned.clone(),
            original: original.clone(),
            offset: (2, -1),
        };
        let mut rng = stream(3, &[1]);
        for p in extract_patches(&pair, 8, 12, &mut rng).unwrap() {
            let sy = (p.y as isize + (-1)) as usize;
            let sx = (p.x as isize + 2) as usize;
            assert_eq!(p.scanned, scanned.crop(sy, sx, 8, 8));
            assert_eq!(p.original, original.crop(p.y, p.x, 8, 8));
        }
    }

    #[test]
    fn extract_patch_too_large() {
        let img = textured_image(16, 16, 9);
        let pair = AlignedPair {
            scanned: img.clone(),
            original: img,
            offset: (3, 0),
        };
        let mut rng = stream(4, &[1]);
        assert!(matches!(
            extract_patches(&pair, 16, 1, &mut rng),
            Err(Error::PatchTooLarge { .. })
        ));
    }
}
