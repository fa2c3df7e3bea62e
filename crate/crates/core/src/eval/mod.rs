//! Batch evaluation, baseline comparators, and comparison-grid rendering.

pub mod toybench;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::image::{load_image, Image};
use crate::metrics::{psnr, ssim};

/// One method's aggregate scores over a fixed pair set.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub method: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub samples: usize,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub seed: u64,
    /// Free-form echo of the configuration that produced the report.
    pub config_echo: String,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>7} {:>9}\n",
            "method", "psnr_db", "ssim", "n", "wall_s"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>10.3} {:>8.4} {:>7} {:>9.2}\n",
                r.method,
                r.mean_psnr,
                r.mean_ssim,
                r.samples,
                r.wall_time.as_secs_f64()
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,psnr_db,ssim,samples,wall_s\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method,
                r.mean_psnr,
                r.mean_ssim,
                r.samples,
                r.wall_time.as_secs_f64()
            ));
        }
        out
    }
}

/// Mean PSNR/SSIM over an in-memory pair list, in the given order.
pub fn evaluate_image_pairs(
    method: &str,
    pairs: &[(&Image, &Image)],
) -> Result<EvalRow> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let start = Instant::now();
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for (restored, original) in pairs {
        sum_psnr += psnr(restored, original)?;
        sum_ssim += ssim(restored, original)?;
    }
    Ok(EvalRow {
        method: method.to_string(),
        mean_psnr: sum_psnr / pairs.len() as f64,
        mean_ssim: sum_ssim / pairs.len() as f64,
        samples: pairs.len(),
        wall_time: start.elapsed(),
    })
}

/// Canonical matching key for a pair file: the stem with the pipeline's
/// role suffixes stripped.
fn stem_key(name: &str) -> Option<String> {
    let stem = name.strip_suffix(".ppm")?;
    for suffix in ["_scan", "_orig", "_restored"] {
        if let Some(s) = stem.strip_suffix(suffix) {
            return Some(s.to_string());
        }
    }
    Some(stem.to_string())
}

fn list_ppm(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(key) = stem_key(&name) {
            out.insert(key, entry.path());
        }
    }
    Ok(out)
}

/// Evaluate every restored/original file pair matched by stem, in stem
/// order. Stems present on only one side abort the run.
pub fn evaluate_pairs(restored_dir: &Path, original_dir: &Path) -> Result<EvalRow> {
    let restored = list_ppm(restored_dir)?;
    let originals = list_ppm(original_dir)?;
    let unmatched: Vec<String> = restored
        .keys()
        .filter(|k| !originals.contains_key(*k))
        .chain(originals.keys().filter(|k| !restored.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedStems { stems: unmatched });
    }
    if restored.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no ppm pairs between {} and {}",
            restored_dir.display(),
            original_dir.display()
        )));
    }

    let mut images = Vec::new();
    for (key, rpath) in &restored {
        images.push((load_image(rpath)?, load_image(&originals[key])?));
    }
    let refs: Vec<(&Image, &Image)> = images.iter().map(|(a, b)| (a, b)).collect();
    evaluate_image_pairs("restored", &refs)
}

/// Border width of [`render_grid`], in pixels.
pub const GRID_BORDER: usize = 4;
const GRID_GRAY: f64 = 0.5;

/// Tile equally-sized images into one canvas with 4-px separators, row-major
/// with `columns` tiles per row. Labels ride along only as layout metadata;
/// callers persist them next to the grid.
pub fn render_grid(images: &[Image], columns: usize) -> Result<Image> {
    if images.is_empty() || columns == 0 {
        return Err(Error::InvalidArgument("grid needs images and columns >= 1".into()));
    }
    let (h, w) = (images[0].height(), images[0].width());
    for img in images {
        images[0].same_dims(img)?;
    }
    let rows = images.len().div_ceil(columns);
    let out_h = rows * h + (rows + 1) * GRID_BORDER;
    let out_w = columns * w + (columns + 1) * GRID_BORDER;
    let mut canvas = Image::filled(out_h, out_w, GRID_GRAY);
    for (i, img) in images.iter().enumerate() {
        let r = i / columns;
        let c = i % columns;
        let y0 = GRID_BORDER + r * (h + GRID_BORDER);
        let x0 = GRID_BORDER + c * (w + GRID_BORDER);
        for y in 0..h {
            for x in 0..w {
                canvas.set(y0 + y, x0 + x, img.get(y, x));
            }
        }
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_image;
    use crate::metrics::PSNR_CAP_DB;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = crate::rng::stream(seed, &[0xe5]);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn identical_pairs_hit_caps() {
        let img = random_image(16, 16, 1);
        let row = evaluate_image_pairs("id", &[(&img, &img), (&img, &img)]).unwrap();
        assert_eq!(row.mean_psnr, PSNR_CAP_DB);
        assert!((row.mean_ssim - 1.0).abs() < 1e-12);
        assert_eq!(row.samples, 2);
    }

    #[test]
    fn single_pair_mean_is_the_pair_metric() {
        let a = random_image(16, 16, 2);
        let b = random_image(16, 16, 3);
        let row = evaluate_image_pairs("one", &[(&a, &b)]).unwrap();
        assert_eq!(row.mean_psnr, psnr(&a, &b).unwrap());
        assert_eq!(row.mean_ssim, ssim(&a, &b).unwrap());
    }

    #[test]
    fn means_match_brute_force_recompute() {
        let imgs: Vec<(Image, Image)> = (0..5)
            .map(|i| (random_image(16, 16, 10 + i), random_image(16, 16, 20 + i)))
            .collect();
        let refs: Vec<(&Image, &Image)> = imgs.iter().map(|(a, b)| (a, b)).collect();
        let row = evaluate_image_pairs("m", &refs).unwrap();
        let mut acc_p = 0.0;
        let mut acc_s = 0.0;
        for (a, b) in &imgs {
            acc_p += psnr(a, b).unwrap();
            acc_s += ssim(a, b).unwrap();
        }
        assert!((row.mean_psnr - acc_p / 5.0).abs() < 1e-12);
        assert!((row.mean_ssim - acc_s / 5.0).abs() < 1e-12);
    }

    #[test]
    fn dir_evaluation_matches_stems_and_rejects_orphans() {
        let tmp = tempfile::tempdir().unwrap();
        let restored = tmp.path().join("restored");
        let originals = tmp.path().join("orig");
        std::fs::create_dir_all(&restored).unwrap();
        std::fs::create_dir_all(&originals).unwrap();
        let img = random_image(16, 16, 30);
        save_image(&img, restored.join("a_restored.ppm")).unwrap();
        save_image(&img, originals.join("a_orig.ppm")).unwrap();
        let row = evaluate_pairs(&restored, &originals).unwrap();
        assert_eq!(row.samples, 1);
        assert_eq!(row.mean_psnr, PSNR_CAP_DB);

        save_image(&img, originals.join("b_orig.ppm")).unwrap();
        let err = evaluate_pairs(&restored, &originals).unwrap_err();
        assert!(matches!(err, Error::UnmatchedStems { .. }));
    }

    #[test]
    fn grid_single_image_is_itself_plus_border() {
        let img = random_image(6, 5, 40);
        let grid = render_grid(std::slice::from_ref(&img), 1).unwrap();
        assert_eq!(grid.height(), 6 + 2 * GRID_BORDER);
        assert_eq!(grid.width(), 5 + 2 * GRID_BORDER);
        assert_eq!(grid.get(GRID_BORDER, GRID_BORDER), img.get(0, 0));
    }

    #[test]
    fn grid_two_by_two_dimensions() {
        let imgs: Vec<Image> = (0..4).map(|i| random_image(8, 8, 50 + i)).collect();
        let grid = render_grid(&imgs, 2).unwrap();
        assert_eq!(grid.height(), 2 * 8 + 3 * GRID_BORDER);
        assert_eq!(grid.width(), 2 * 8 + 3 * GRID_BORDER);
        // Tile origins carry the source pixel (0,0).
        assert_eq!(grid.get(4, 4), imgs[0].get(0, 0));
        assert_eq!(grid.get(4, 4 + 8 + 4), imgs[1].get(0, 0));
        assert_eq!(grid.get(4 + 8 + 4, 4), imgs[2].get(0, 0));
    }

    #[test]
    fn grid_size_mismatch_rejected() {
        let a = random_image(8, 8, 60);
        let b = random_image(8, 9, 61);
        assert!(render_grid(&[a, b], 2).is_err());
    }

    #[test]
    fn report_rendering() {
        let report = EvalReport {
            rows: vec![EvalRow {
                method: "identity".into(),
                mean_psnr: 21.5,
                mean_ssim: 0.91,
                samples: 3,
                wall_time: Duration::from_millis(120),
            }],
            seed: 7,
            config_echo: String::new(),
        };
        assert!(report.to_table().contains("identity"));
        assert!(report.to_csv().starts_with("method,psnr_db"));
        assert!(report.row("identity").is_some());
        assert!(report.row("nope").is_none());
    }
}
