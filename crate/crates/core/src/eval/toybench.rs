//! Self-contained descanning benchmark on procedurally generated pairs.
//!
//! Originals are synthesized (smooth color fields plus rectangles and
//! text-like strokes), degraded into "scanned" counterparts from disjoint
//! seed namespaces, and used to train and score the pipeline variants of the
//! ablation: vanilla conditioning on the raw scan, conditioning on the
//! color-corrected image (CIC), adding the color-vector embedding (CVC), and
//! mixing extra synthetic training pairs (SDG). Baseline rows (identity,
//! histogram matching, oracle re-normalization, encoder-only correction)
//! bracket the learned variants.

use rand::Rng;

use crate::colorcorrect::{
    correct, correct_with_target, histogram_match, train_color_encoder, ColorTrainHyper,
};
use crate::dataprep::AlignedPair;
use crate::degrade::{synthesize_scanned, DegradationConfig, Range};
use crate::diffusion::{
    default_schedule, descan, train_lgrdm, ColorSource, DescanOptions, DiffusionTrainHyper,
    LgrdmOptions,
};
use crate::error::Result;
use crate::eval::{evaluate_image_pairs, EvalReport, EvalRow};
use crate::image::{channel_stats, Image};
use crate::nn::{ColorEncoderNet, DenoiserConfig, DenoiserNet};
use crate::rng::{derive_key, stream};

/// Seed namespaces separating the degradations of the training pairs, the
/// extra synthetic (SDG) pairs, and the held-out evaluation pairs.
pub const NS_TRAIN: u64 = 1;
pub const NS_SDG: u64 = 2;
pub const NS_EVAL: u64 = 3;

/// Procedural original: low-frequency color field, a few filled rectangles,
/// and rows of dark text-like strokes.
pub fn toy_original(seed: u64, index: u64, h: usize, w: usize) -> Image {
    let mut rng = stream(seed, &[0x70, index]);
    let fy: [f64; 3] = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
    let fx: [f64; 3] = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
    let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let amp: [f64; 3] = [rng.gen_range(0.1..0.25), rng.gen_range(0.1..0.25), rng.gen_range(0.1..0.25)];

    let mut img = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0; 3];
            for c in 0..3 {
                let wave = (fy[c] * std::f64::consts::PI * y as f64 / h as f64).sin()
                    * (fx[c] * std::f64::consts::PI * x as f64 / w as f64).cos();
                px[c] = (base[c] + amp[c] * wave).clamp(0.05, 0.95);
            }
            img.set(y, x, px);
        }
    }

    for _ in 0..rng.gen_range(2..=4) {
        let rh = rng.gen_range(h / 8..h / 2);
        let rw = rng.gen_range(w / 8..w / 2);
        let y0 = rng.gen_range(0..h - rh);
        let x0 = rng.gen_range(0..w - rw);
        let color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                img.set(y, x, color);
            }
        }
    }

    // Text-like strokes: short dark dashes along a few rows.
    for _ in 0..rng.gen_range(1..=3) {
        let row = rng.gen_range(0..h.saturating_sub(2)).max(0);
        let mut x = rng.gen_range(0..w / 4);
        while x + 2 < w {
            let len = rng.gen_range(1..=3).min(w - x - 1);
            if rng.gen::<f64>() < 0.7 {
                for dx in 0..len {
                    img.set(row, x + dx, [0.08, 0.08, 0.08]);
                    if row + 1 < h {
                        img.set(row + 1, x + dx, [0.08, 0.08, 0.08]);
                    }
                }
            }
            x += len + rng.gen_range(1..=2);
        }
    }
    img
}

/// `count` aligned pairs whose degradations come from the given namespace.
pub fn toy_pairs(
    count: usize,
    size: usize,
    degrade: &DegradationConfig,
    seed: u64,
    namespace: u64,
) -> Result<Vec<AlignedPair>> {
    let originals: Vec<Image> = (0..count)
        .map(|i| toy_original(seed, i as u64, size, size))
        .collect();
    let cfg = DegradationConfig {
        master_seed: derive_key(seed, &[namespace]),
        ..degrade.clone()
    };
    let mut out = Vec::with_capacity(count);
    for (i, original) in originals.iter().enumerate() {
        let back = &originals[(i + 1) % count.max(1)];
        let (scanned, _) = synthesize_scanned(original, back, &cfg, i as u64)?;
        out.push(AlignedPair {
            scanned,
            original: original.clone(),
            offset: (0, 0),
        });
    }
    Ok(out)
}

/// Pure value-fade color transitions (a per-channel affine map, the regime
/// where re-normalization is exact); used for the baseline ordering check.
pub fn color_only_degradations() -> DegradationConfig {
    DegradationConfig {
        color_prob: 1.0,
        hue_shift: Range::new(0.0, 0.0),
        sat_scale: Range::new(1.0, 1.0),
        val_scale: Range::new(0.55, 0.9),
        bleed_prob: 0.0,
        gaussian_prob: 0.0,
        dots_prob: 0.0,
        lines_prob: 0.0,
        ..DegradationConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: &'static str,
    /// Condition the denoiser on the color-corrected image.
    pub cic: bool,
    /// Feed the color vector through a trainable projection.
    pub cvc: bool,
    /// Mix extra synthetic pairs into the training set.
    pub sdg: bool,
}

/// The four rows of the ablation, in presentation order.
pub const ABLATION_VARIANTS: [AblationVariant; 4] = [
    AblationVariant { name: "vanilla", cic: false, cvc: false, sdg: false },
    AblationVariant { name: "cic", cic: true, cvc: false, sdg: false },
    AblationVariant { name: "cic_cvc", cic: true, cvc: true, sdg: false },
    AblationVariant { name: "cic_cvc_sdg", cic: true, cvc: true, sdg: true },
];

#[derive(Debug, Clone)]
pub struct ToyBenchConfig {
    pub pairs: usize,
    pub eval_pairs: usize,
    pub size: usize,
    pub degrade: DegradationConfig,
    pub schedule_t: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub t_o: usize,
    pub color_train: ColorTrainHyper,
    pub train: DiffusionTrainHyper,
    /// Synthetic share mixed in for the SDG variant (additions on top of the
    /// base pairs, `round(n * r / (1 - r))`).
    pub sdg_ratio: f64,
    pub variants: Vec<AblationVariant>,
}

impl Default for ToyBenchConfig {
    fn default() -> Self {
        ToyBenchConfig {
            pairs: 64,
            eval_pairs: 16,
            size: 32,
            degrade: DegradationConfig::default(),
            schedule_t: 200,
            t_o: 10,
            color_train: ColorTrainHyper {
                steps: 600,
                batch: 8,
                patch: 32,
                ..ColorTrainHyper::default()
            },
            train: DiffusionTrainHyper {
                steps: 900,
                batch: 4,
                patch: 32,
                ..DiffusionTrainHyper::default()
            },
            sdg_ratio: 0.25,
            variants: ABLATION_VARIANTS.to_vec(),
        }
    }
}

impl ToyBenchConfig {
    /// Minutes-to-seconds shrink for functional tests.
    pub fn smoke() -> Self {
        ToyBenchConfig {
            pairs: 6,
            eval_pairs: 4,
            schedule_t: 12,
            t_o: 4,
            color_train: ColorTrainHyper {
                steps: 50,
                batch: 4,
                ..ColorTrainHyper::default()
            },
            train: DiffusionTrainHyper {
                steps: 30,
                batch: 2,
                ..DiffusionTrainHyper::default()
            },
            ..ToyBenchConfig::default()
        }
    }
}

/// Per-variant scores on the benchmark pairs and on the held-out namespace.
#[derive(Debug, Clone)]
pub struct ToyAblationResult {
    pub in_sample: EvalReport,
    pub held_out: EvalReport,
}

struct RowAccumulator {
    name: String,
    psnr: f64,
    ssim: f64,
    samples: usize,
    wall: std::time::Duration,
}

fn accumulate(rows: &mut Vec<RowAccumulator>, row: EvalRow) {
    if let Some(acc) = rows.iter_mut().find(|r| r.name == row.method) {
        acc.psnr += row.mean_psnr;
        acc.ssim += row.mean_ssim;
        acc.samples = row.samples;
        acc.wall += row.wall_time;
    } else {
        rows.push(RowAccumulator {
            name: row.method.clone(),
            psnr: row.mean_psnr,
            ssim: row.mean_ssim,
            samples: row.samples,
            wall: row.wall_time,
        });
    }
}

fn finish(rows: Vec<RowAccumulator>, seeds: usize, seed: u64, echo: String) -> EvalReport {
    EvalReport {
        rows: rows
            .into_iter()
            .map(|r| EvalRow {
                method: r.name,
                mean_psnr: r.psnr / seeds as f64,
                mean_ssim: r.ssim / seeds as f64,
                samples: r.samples,
                wall_time: r.wall,
            })
            .collect(),
        seed,
        config_echo: echo,
    }
}

fn eval_restored(
    name: &str,
    restored: &[Image],
    pairs: &[AlignedPair],
) -> Result<EvalRow> {
    let refs: Vec<(&Image, &Image)> = restored
        .iter()
        .zip(pairs)
        .map(|(r, p)| (r, &p.original))
        .collect();
    evaluate_image_pairs(name, &refs)
}

fn descan_all(
    pairs: &[AlignedPair],
    encoder: Option<&ColorEncoderNet<f32>>,
    net: &DenoiserNet<f32>,
    schedule: &crate::diffusion::NoiseSchedule,
    t_o: usize,
    cic: bool,
    seed: u64,
) -> Result<Vec<Image>> {
    let one = |i: usize, p: &AlignedPair| -> Result<Image> {
        let opts = DescanOptions {
            t_o,
            noise_init: false,
            color: if cic {
                ColorSource::Encoder
            } else {
                ColorSource::RawScanned
            },
            seed: derive_key(seed, &[0xde5c, i as u64]),
        };
        Ok(descan(&p.scanned, encoder, net, schedule, &opts)?.restored)
    };

    // Per-image work is independent and individually seeded; chunk it over
    // the worker budget with results kept in index order.
    let workers = crate::runtime::worker_threads().min(pairs.len()).max(1);
    if workers == 1 {
        return pairs.iter().enumerate().map(|(i, p)| one(i, p)).collect();
    }
    let chunk = pairs.len().div_ceil(workers);
    let chunks: Vec<Result<Vec<Image>>> = std::thread::scope(|scope| {
        let one = &one;
        let handles: Vec<_> = (0..workers)
            .map(|wi| {
                let lo = wi * chunk;
                let hi = ((wi + 1) * chunk).min(pairs.len());
                scope.spawn(move || (lo..hi).map(|i| one(i, &pairs[i])).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut out = Vec::with_capacity(pairs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Run baselines plus every configured variant over the seeds, averaging
/// per-seed means. Baseline rows: `identity`, `histogram_match` (oracle
/// reference), `color_only` (trained encoder), `oracle_renorm`.
pub fn run_toy_ablation(cfg: &ToyBenchConfig, seeds: &[u64]) -> Result<ToyAblationResult> {
    let mut in_rows: Vec<RowAccumulator> = Vec::new();
    let mut out_rows: Vec<RowAccumulator> = Vec::new();
    let schedule = default_schedule(cfg.schedule_t)?;

    for &seed in seeds {
        let train_pairs = toy_pairs(cfg.pairs, cfg.size, &cfg.degrade, seed, NS_TRAIN)?;
        let eval_pairs = toy_pairs(cfg.eval_pairs, cfg.size, &cfg.degrade, seed, NS_EVAL)?;

        let (encoder, _) = train_color_encoder(
            &train_pairs,
            &ColorTrainHyper {
                seed: derive_key(seed, &[0xce]),
                ..cfg.color_train
            },
        )?;

        // Baselines on both pair sets.
        for (rows, pairs) in [(&mut in_rows, &train_pairs), (&mut out_rows, &eval_pairs)] {
            let identity: Vec<Image> = pairs.iter().map(|p| p.scanned.clone()).collect();
            accumulate(rows, eval_restored("identity", &identity, pairs)?);

            let hist: Vec<Image> = pairs
                .iter()
                .map(|p| histogram_match(&p.scanned, &p.original))
                .collect();
            accumulate(rows, eval_restored("histogram_match", &hist, pairs)?);

            let color_only: Result<Vec<Image>> = pairs
                .iter()
                .map(|p| Ok(correct(&encoder, &p.scanned)?.corrected))
                .collect();
            accumulate(rows, eval_restored("color_only", &color_only?, pairs)?);

            let oracle: Vec<Image> = pairs
                .iter()
                .map(|p| correct_with_target(&p.scanned, channel_stats(&p.original)).corrected)
                .collect();
            accumulate(rows, eval_restored("oracle_renorm", &oracle, pairs)?);
        }

        // SDG extras share the originals but draw degradations from their
        // own namespace.
        let n_extra = (cfg.pairs as f64 * cfg.sdg_ratio / (1.0 - cfg.sdg_ratio)).round() as usize;
        let sdg_extra = toy_pairs(n_extra, cfg.size, &cfg.degrade, seed, NS_SDG)?;

        for variant in &cfg.variants {
            let mut pairs = train_pairs.clone();
            if variant.sdg {
                pairs.extend(sdg_extra.iter().cloned());
            }
            let opts = LgrdmOptions {
                hyper: DiffusionTrainHyper {
                    seed: derive_key(seed, &[0xd7, variant.cic as u64, variant.cvc as u64, variant.sdg as u64]),
                    ..cfg.train
                },
                net: DenoiserConfig {
                    color_projection: variant.cvc,
                    ..DenoiserConfig::default()
                },
                corrected_condition: variant.cic,
            };
            let (net, _) = train_lgrdm(&pairs, &encoder, &schedule, &opts)?;

            for (rows, eval_set) in [(&mut in_rows, &train_pairs), (&mut out_rows, &eval_pairs)] {
                let restored = descan_all(
                    eval_set,
                    variant.cic.then_some(&encoder),
                    &net,
                    &schedule,
                    cfg.t_o,
                    variant.cic,
                    seed,
                )?;
                accumulate(rows, eval_restored(variant.name, &restored, eval_set)?);
            }
        }
    }

    let echo = format!(
        "pairs={} eval_pairs={} size={} T={} T_o={} train_steps={} batch={} sdg_ratio={}",
        cfg.pairs,
        cfg.eval_pairs,
        cfg.size,
        cfg.schedule_t,
        cfg.t_o,
        cfg.train.steps,
        cfg.train.batch,
        cfg.sdg_ratio
    );
    Ok(ToyAblationResult {
        in_sample: finish(in_rows, seeds.len(), seeds[0], echo.clone()),
        held_out: finish(out_rows, seeds.len(), seeds[0], echo),
    })
}
