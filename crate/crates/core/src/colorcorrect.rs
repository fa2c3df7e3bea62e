//! Global color correction.
//!
//! The color encoder regresses the original image's per-channel statistics
//! from the scanned image; re-normalization then standardizes each scanned
//! channel and rescales it to the predicted statistics. A histogram-matching
//! baseline is included for comparison.

use rand::Rng;

use crate::dataprep::{sample_patch, AlignedPair};
use crate::error::{Error, Result};
use crate::image::{channel_stats, ColorStats, Image};
use crate::nn::{
    adam_step, batch_to_planar, image_to_planar, AdamConfig, AdamState, ColorEncoderNet,
    EncoderConfig, Scalar, Tape,
};
use crate::rng::stream;

/// Stabilizer added to the source standard deviation before dividing.
pub const RENORM_EPSILON: f64 = 1.0 / 65536.0; // 2^-16

/// Per-channel re-normalization toward `target` statistics:
/// `out = (p - mu_s) / (sigma_s + eps) * sigma_t + mu_t`. Output unclamped.
pub fn renormalize(scanned: &Image, target: &ColorStats) -> Image {
    let source = channel_stats(scanned);
    let mut gain = [0.0; 3];
    let mut mu_s = [0.0; 3];
    let mut mu_t = [0.0; 3];
    for c in 0..3 {
        gain[c] = target.std(c) / (source.std(c) + RENORM_EPSILON);
        mu_s[c] = source.mean(c);
        mu_t[c] = target.mean(c);
    }
    let mut out = scanned.clone();
    for p in out.pixels_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            p[c] = (p[c] - mu_s[c]) * gain[c] + mu_t[c];
        }
    }
    out
}

/// A corrected image along with the statistics that produced it.
#[derive(Debug, Clone)]
pub struct CorrectionResult {
    pub corrected: Image,
    /// Target statistics used for re-normalization (predicted or oracle).
    pub predicted: ColorStats,
    /// Statistics of the scanned input.
    pub source: ColorStats,
}

/// Re-normalize toward explicitly given target statistics. This is the
/// oracle-mode entry point: pass `channel_stats` of the true original to
/// isolate re-normalization quality from encoder quality.
pub fn correct_with_target(scanned: &Image, target: ColorStats) -> CorrectionResult {
    CorrectionResult {
        corrected: renormalize(scanned, &target),
        predicted: target,
        source: channel_stats(scanned),
    }
}

/// Run the encoder on one image.
pub fn predict_color_vector<F: Scalar>(
    encoder: &ColorEncoderNet<F>,
    scanned: &Image,
) -> Result<ColorStats> {
    let mut tape = Tape::new();
    let data = image_to_planar::<F>(scanned, 1.0, 0.0);
    let x = tape.leaf(data, &[1, 3, scanned.height(), scanned.width()]);
    let fwd = encoder.forward(&mut tape, x)?;
    let out = tape.data(fwd.output);
    let mut v = [0.0; 6];
    for (slot, val) in v.iter_mut().zip(out) {
        *slot = val.to_double();
    }
    Ok(ColorStats(v))
}

/// Predict the color vector and re-normalize toward it.
pub fn correct<F: Scalar>(
    encoder: &ColorEncoderNet<F>,
    scanned: &Image,
) -> Result<CorrectionResult> {
    let target = predict_color_vector(encoder, scanned)?;
    Ok(correct_with_target(scanned, target))
}

#[derive(Debug, Clone, Copy)]
pub struct ColorTrainHyper {
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    /// Cosine-decay floor as a fraction of `lr`.
    pub lr_floor_frac: f64,
    pub seed: u64,
}

impl Default for ColorTrainHyper {
    fn default() -> Self {
        ColorTrainHyper {
            steps: 600,
            batch: 8,
            patch: 32,
            lr: 8e-3,
            lr_floor_frac: 0.01,
            seed: 0,
        }
    }
}

/// Cosine decay from `lr` to `lr * floor_frac` over the step budget.
pub fn cosine_lr(lr: f64, floor_frac: f64, step: usize, steps: usize) -> f64 {
    let floor = lr * floor_frac;
    if steps <= 1 {
        return lr;
    }
    let t = step as f64 / (steps - 1) as f64;
    floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Train the color encoder to regress `channel_stats(original)` from the
/// scanned patch, minimizing the mean per-sample L2 norm of the error.
/// Returns the trained encoder and the per-step loss log.
pub fn train_color_encoder(
    pairs: &[AlignedPair],
    hyper: &ColorTrainHyper,
) -> Result<(ColorEncoderNet<f32>, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit {
            split: "train".into(),
        });
    }
    let mut net = ColorEncoderNet::<f32>::new(EncoderConfig::default(), hyper.seed);
    let mut state = AdamState::new(&net.params);
    let adam = AdamConfig {
        lr: hyper.lr,
        ..AdamConfig::default()
    };
    let mut log = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let mut rng = stream(hyper.seed, &[0xc0, step as u64]);
        let mut scanned_patches = Vec::with_capacity(hyper.batch);
        let mut targets = Vec::with_capacity(hyper.batch * 6);
        for _ in 0..hyper.batch {
            let pair = &pairs[rng.gen_range(0..pairs.len())];
            let patch = sample_patch(pair, hyper.patch, &mut rng)?;
            targets.extend(channel_stats(&patch.original).values().map(|v| v as f32));
            scanned_patches.push(patch.scanned);
        }

        let mut tape: Tape<f32> = Tape::new();
        let refs: Vec<&Image> = scanned_patches.iter().collect();
        let x = tape.leaf(
            batch_to_planar(&refs, 1.0, 0.0),
            &[hyper.batch, 3, hyper.patch, hyper.patch],
        );
        let target = tape.leaf(targets, &[hyper.batch, 6]);
        let fwd = net.forward(&mut tape, x)?;
        let diff = tape.sub(fwd.output, target)?;
        let sq = tape.square(diff);
        let rows = tape.sum_rows(sq);
        let norms = tape.sqrt_op(rows);
        let loss = tape.mean_all(norms);

        let loss_val = tape.data(loss)[0] as f64;
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: Some("color encoder".into()),
            });
        }
        log.push(loss_val);

        tape.backward(loss)?;
        let grads = net.params.gradients(&tape, &fwd.param_leaves);
        let lr = cosine_lr(hyper.lr, hyper.lr_floor_frac, step, hyper.steps);
        adam_step(&mut net.params, &grads, &mut state, &adam, lr)?;
    }
    Ok((net, log))
}

/// Per-channel monotone CDF matching on 256 bins; output values are bin
/// centers `k/255` of the matched reference bins.
pub fn histogram_match(source: &Image, reference: &Image) -> Image {
    const BINS: usize = 256;
    let bin_of = |v: f64| -> usize { (v.clamp(0.0, 1.0) * 255.0).round() as usize };

    let mut out = source.clone();
    for c in 0..3 {
        let mut src_hist = [0u64; BINS];
        let mut ref_hist = [0u64; BINS];
        for p in source.pixels().chunks_exact(3) {
            src_hist[bin_of(p[c])] += 1;
        }
        for p in reference.pixels().chunks_exact(3) {
            ref_hist[bin_of(p[c])] += 1;
        }
        let src_n = (source.height() * source.width()) as f64;
        let ref_n = (reference.height() * reference.width()) as f64;

        let mut src_cdf = [0.0f64; BINS];
        let mut ref_cdf = [0.0f64; BINS];
        let mut acc = 0u64;
        for k in 0..BINS {
            acc += src_hist[k];
            src_cdf[k] = acc as f64 / src_n;
        }
        acc = 0;
        for k in 0..BINS {
            acc += ref_hist[k];
            ref_cdf[k] = acc as f64 / ref_n;
        }

        // Monotone map: first reference bin whose CDF reaches the source CDF.
        let mut map = [0usize; BINS];
        let mut j = 0usize;
        for k in 0..BINS {
            while j < BINS - 1 && ref_cdf[j] < src_cdf[k] {
                j += 1;
            }
            map[k] = j;
        }

        for p in out.pixels_mut().chunks_exact_mut(3) {
            p[c] = map[bin_of(p[c])] as f64 / 255.0;
        }
    }
    out
}
