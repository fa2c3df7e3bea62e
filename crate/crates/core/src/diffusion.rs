//! Conditional denoising diffusion: schedule construction, the closed-form
//! forward process, noise-prediction training, and truncated reverse
//! sampling that starts from the color-corrected image instead of pure
//! noise.
//!
//! Latents live in `[-1,1]` coordinates via `x = 2 p - 1`.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::colorcorrect::{correct_with_target, predict_color_vector, CorrectionResult};
use crate::dataprep::{sample_patch, AlignedPair};
use crate::error::{Error, Result};
use crate::image::{channel_stats, ColorStats, Image};
use crate::nn::{
    adam_step, batch_to_planar, image_to_planar, planar_to_image, AdamConfig, AdamState,
    ColorEncoderNet, DenoiserConfig, DenoiserNet, Scalar, Tape,
};
use crate::rng::stream;

/// Per-step noise tables: beta, alpha = 1 - beta, their running product
/// alpha_bar, and sigma = sqrt(beta).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Tables are 1-indexed by timestep, matching the process definition.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Linearly interpolated beta between `beta_1` and `beta_t_max`.
pub fn make_linear_schedule(t_max: usize, beta_1: f64, beta_t_max: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t_max && beta_t_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_1 <= beta_T < 1, got {beta_1} and {beta_t_max}"
        )));
    }
    let mut beta = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            t as f64 / (t_max - 1) as f64
        };
        beta.push(beta_1 + frac * (beta_t_max - beta_1));
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

/// Canonical 1000-step linear range rescaled to `t_max` steps so the total
/// noise budget is preserved. Both endpoints are capped at 0.5 so very short
/// schedules stay valid.
pub fn default_schedule(t_max: usize) -> Result<NoiseSchedule> {
    let scale = 1000.0 / t_max as f64;
    let hi = (0.02 * scale).min(0.5);
    make_linear_schedule(t_max, (1e-4 * scale).min(hi), hi)
}

/// Closed-form forward sample `x_t = sqrt(a_bar) x0 + sqrt(1 - a_bar) eps`.
pub fn forward_sample<F: Scalar>(
    x0: &[F],
    t: usize,
    eps: &[F],
    schedule: &NoiseSchedule,
) -> Result<Vec<F>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "forward_sample",
            lhs: vec![x0.len()],
            rhs: vec![eps.len()],
        });
    }
    let ab = schedule.alpha_bar(t);
    let c0 = F::from_double(ab.sqrt());
    let c1 = F::from_double((1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| c0 * x + c1 * e)
        .collect())
}

/// One reverse update
/// `x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-a_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z`.
/// `z` must be absent (deterministic) at `t = 1`.
pub fn reverse_step<F: Scalar>(
    x_t: &[F],
    t: usize,
    eps_hat: &[F],
    schedule: &NoiseSchedule,
    z: Option<&[F]>,
) -> Result<Vec<F>> {
    schedule.check_t(t)?;
    if x_t.len() != eps_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "reverse_step",
            lhs: vec![x_t.len()],
            rhs: vec![eps_hat.len()],
        });
    }
    if t == 1 && z.map_or(false, |z| z.iter().any(|v| *v != F::zero())) {
        return Err(Error::InvalidArgument(
            "reverse_step at t=1 must not add noise (z != 0)".into(),
        ));
    }
    let alpha = schedule.alpha(t);
    let coef = F::from_double((1.0 - alpha) / (1.0 - schedule.alpha_bar(t)).sqrt());
    let inv_sqrt_alpha = F::from_double(1.0 / alpha.sqrt());
    let sigma = F::from_double(schedule.sigma(t));
    let mut out: Vec<F> = x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| (x - coef * e) * inv_sqrt_alpha)
        .collect();
    if t > 1 {
        if let Some(z) = z {
            if z.len() != out.len() {
                return Err(Error::ShapeMismatch {
                    op: "reverse_step",
                    lhs: vec![out.len()],
                    rhs: vec![z.len()],
                });
            }
            for (o, &n) in out.iter_mut().zip(z) {
                *o = *o + sigma * n;
            }
        }
    }
    Ok(out)
}

/// Norm used for the noise-prediction objective. The unsquared norm is the
/// default; squared error is available behind the same interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    MeanAbs,
    MeanSquare,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossMode::MeanAbs),
            "l2" => Ok(LossMode::MeanSquare),
            other => Err(Error::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

pub struct TrainingStepOutcome<F: Scalar> {
    pub loss: f64,
    pub grads: Vec<Vec<F>>,
    pub ts: Vec<usize>,
}

fn draw_standard_normal<F: Scalar>(len: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
    (0..len)
        .map(|_| F::from_double(<StandardNormal as Distribution<f64>>::sample(
            &StandardNormal,
            rng,
        )))
        .collect()
}

/// Noise-prediction loss and gradients with every stochastic choice forced:
/// the backbone of [`training_step`], exposed so tests can pin `t` and `eps`.
pub fn training_step_forced<F: Scalar>(
    denoiser: &DenoiserNet<F>,
    originals: &[&Image],
    conditions: &[&Image],
    v_cs: &[ColorStats],
    ts: &[usize],
    eps: &[F],
    schedule: &NoiseSchedule,
    loss_mode: LossMode,
) -> Result<TrainingStepOutcome<F>> {
    let n = originals.len();
    if n == 0 || conditions.len() != n || v_cs.len() != n || ts.len() != n {
        return Err(Error::InvalidArgument(
            "training step needs equal-length, non-empty batch slices".into(),
        ));
    }
    let (h, w) = (originals[0].height(), originals[0].width());
    let plane = 3 * h * w;
    if eps.len() != n * plane {
        return Err(Error::ShapeMismatch {
            op: "training_step",
            lhs: vec![n, 3, h, w],
            rhs: vec![eps.len()],
        });
    }
    for t in ts {
        schedule.check_t(*t)?;
    }

    // x_t per sample from the closed form, in latent coordinates.
    let mut x_t = Vec::with_capacity(n * plane);
    for (i, img) in originals.iter().enumerate() {
        let x0 = image_to_planar::<F>(img, 2.0, -1.0);
        x_t.extend(forward_sample(&x0, ts[i], &eps[i * plane..(i + 1) * plane], schedule)?);
    }
    let cond_lat = batch_to_planar::<F>(conditions, 2.0, -1.0);
    let mut vc_data = Vec::with_capacity(n * 6);
    for v in v_cs {
        vc_data.extend(v.values().map(F::from_double));
    }

    // One forward/backward over a contiguous sample range. Sub-batch results
    // are bit-identical to the full batch because every op treats samples
    // independently.
    let eval_chunk = |lo: usize, hi: usize| -> Result<(f64, Vec<Vec<F>>)> {
        let m = hi - lo;
        let mut tape: Tape<F> = Tape::new();
        let x_var = tape.leaf(x_t[lo * plane..hi * plane].to_vec(), &[m, 3, h, w]);
        let c_var = tape.leaf(cond_lat[lo * plane..hi * plane].to_vec(), &[m, 3, h, w]);
        let v_var = tape.leaf(vc_data[lo * 6..hi * 6].to_vec(), &[m, 6]);
        let e_var = tape.leaf(eps[lo * plane..hi * plane].to_vec(), &[m, 3, h, w]);
        let fwd = denoiser.forward(&mut tape, x_var, c_var, v_var, &ts[lo..hi])?;
        let diff = tape.sub(e_var, fwd.output)?;
        let loss = match loss_mode {
            LossMode::MeanAbs => {
                let a = tape.abs(diff);
                tape.mean_all(a)
            }
            LossMode::MeanSquare => {
                let s = tape.square(diff);
                tape.mean_all(s)
            }
        };
        let loss_val = tape.data(loss)[0].to_double();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: 0,
                detail: Some(format!("t = {:?}", &ts[lo..hi])),
            });
        }
        tape.backward(loss)?;
        Ok((loss_val, denoiser.params.gradients(&tape, &fwd.param_leaves)))
    };

    let workers = crate::runtime::worker_threads().min(n).max(1);
    let results: Vec<(usize, f64, Vec<Vec<F>>)> = if workers == 1 {
        let (loss, grads) = eval_chunk(0, n)?;
        vec![(n, loss, grads)]
    } else {
        // Data-parallel workers over contiguous chunks, reduced in worker
        // order so the accumulation is reproducible at a fixed thread count.
        let chunk = n.div_ceil(workers);
        let ranges: Vec<(usize, usize)> = (0..workers)
            .map(|wi| (wi * chunk, ((wi + 1) * chunk).min(n)))
            .filter(|(lo, hi)| lo < hi)
            .collect();
        let outputs: Vec<Result<(f64, Vec<Vec<F>>)>> = std::thread::scope(|scope| {
            let eval_chunk = &eval_chunk;
            let handles: Vec<_> = ranges
                .iter()
                .map(|&(lo, hi)| scope.spawn(move || eval_chunk(lo, hi)))
                .collect();
            handles.into_iter().map(|hd| hd.join().unwrap()).collect()
        });
        let mut combined = Vec::with_capacity(ranges.len());
        for (range, out) in ranges.iter().zip(outputs) {
            let (loss, grads) = out?;
            combined.push((range.1 - range.0, loss, grads));
        }
        combined
    };

    let mut loss_val = 0.0;
    let mut grads: Vec<Vec<F>> = denoiser
        .params
        .iter()
        .map(|p| vec![F::zero(); p.data.len()])
        .collect();
    for (m, loss_w, grads_w) in results {
        let weight = m as f64 / n as f64;
        loss_val += weight * loss_w;
        let wf = F::from_double(weight);
        for (acc, part) in grads.iter_mut().zip(grads_w) {
            for (a, v) in acc.iter_mut().zip(part) {
                *a = *a + wf * v;
            }
        }
    }
    Ok(TrainingStepOutcome {
        loss: loss_val,
        grads,
        ts: ts.to_vec(),
    })
}

/// One training step: sample `t ~ U{1..T}` and `eps ~ N(0, I)` per batch
/// element, then evaluate the noise-prediction loss and its gradients.
pub fn training_step<F: Scalar>(
    denoiser: &DenoiserNet<F>,
    originals: &[&Image],
    conditions: &[&Image],
    v_cs: &[ColorStats],
    schedule: &NoiseSchedule,
    loss_mode: LossMode,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingStepOutcome<F>> {
    let n = originals.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let (h, w) = (originals[0].height(), originals[0].width());
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=schedule.len())).collect();
    let eps = draw_standard_normal::<F>(n * 3 * h * w, rng);
    training_step_forced(
        denoiser, originals, conditions, v_cs, &ts, &eps, schedule, loss_mode,
    )
}

/// How the sampler obtains its conditioning image and color vector.
#[derive(Debug, Clone)]
pub enum ColorSource {
    /// Predict the color vector with the encoder (the trained pipeline).
    Encoder,
    /// Re-normalize toward explicitly supplied statistics (oracle mode).
    Oracle(ColorStats),
    /// No color correction: condition on the scanned image itself.
    RawScanned,
}

#[derive(Debug, Clone)]
pub struct DescanOptions {
    /// Number of reverse steps; sampling starts at `x_{T_o}`.
    pub t_o: usize,
    /// Apply the closed-form forward noising to the start image instead of
    /// using it verbatim.
    pub noise_init: bool,
    pub color: ColorSource,
    pub seed: u64,
}

impl Default for DescanOptions {
    fn default() -> Self {
        DescanOptions {
            t_o: 10,
            noise_init: false,
            color: ColorSource::Encoder,
            seed: 0,
        }
    }
}

/// Everything a descan run produced, with the reverse loop instrumented.
#[derive(Debug, Clone)]
pub struct DescanOutcome {
    pub restored: Image,
    pub correction: CorrectionResult,
    pub reverse_steps: usize,
    pub reverse_loop_time: Duration,
}

/// Restore one scanned image: color-correct, set `x_{T_o}` to the corrected
/// image, then walk the reverse chain down to `t = 1` conditioned on the
/// corrected image and its color vector.
pub fn descan<F: Scalar>(
    scanned: &Image,
    encoder: Option<&ColorEncoderNet<F>>,
    denoiser: &DenoiserNet<F>,
    schedule: &NoiseSchedule,
    opts: &DescanOptions,
) -> Result<DescanOutcome> {
    if opts.t_o < 1 || opts.t_o > schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "T_o = {} outside 1..={}",
            opts.t_o,
            schedule.len()
        )));
    }
    let correction = match &opts.color {
        ColorSource::Encoder => {
            let encoder = encoder.ok_or_else(|| {
                Error::InvalidArgument("descan with ColorSource::Encoder needs an encoder".into())
            })?;
            let v = predict_color_vector(encoder, scanned)?;
            correct_with_target(scanned, v)
        }
        ColorSource::Oracle(v) => correct_with_target(scanned, *v),
        ColorSource::RawScanned => CorrectionResult {
            corrected: scanned.clone(),
            predicted: channel_stats(scanned),
            source: channel_stats(scanned),
        },
    };

    let (h, w) = (scanned.height(), scanned.width());
    let plane = 3 * h * w;
    let cond_lat = image_to_planar::<F>(&correction.corrected, 2.0, -1.0);
    let mut x = cond_lat.clone();
    let mut rng = stream(opts.seed, &[0xd5]);
    if opts.noise_init {
        let eps = draw_standard_normal::<F>(plane, &mut rng);
        x = forward_sample(&x, opts.t_o, &eps, schedule)?;
    }

    let vc_vec: Vec<F> = correction.predicted.values().map(F::from_double).to_vec();

    let mut reverse_steps = 0usize;
    let loop_start = Instant::now();
    for t in (1..=opts.t_o).rev() {
        let mut tape: Tape<F> = Tape::new();
        let x_var = tape.leaf(x.clone(), &[1, 3, h, w]);
        let cond_var = tape.leaf(cond_lat.clone(), &[1, 3, h, w]);
        let v_var = tape.leaf(vc_vec.clone(), &[1, 6]);
        let fwd = denoiser.forward(&mut tape, x_var, cond_var, v_var, &[t])?;
        let eps_hat = tape.data(fwd.output);

        let z: Option<Vec<F>> = if t > 1 {
            Some(draw_standard_normal::<F>(plane, &mut rng))
        } else {
            None
        };
        x = reverse_step(&x, t, eps_hat, schedule, z.as_deref())?;
        reverse_steps += 1;
        if x.iter().any(|v| !v.to_double().is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: t,
                detail: Some("non-finite latent during reverse sampling".into()),
            });
        }
    }
    let reverse_loop_time = loop_start.elapsed();

    let mut restored = planar_to_image(&x, h, w, 0.5, 0.5);
    for v in restored.pixels_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(DescanOutcome {
        restored,
        correction,
        reverse_steps,
        reverse_loop_time,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DiffusionTrainHyper {
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    pub lr_floor_frac: f64,
    pub loss: LossMode,
    pub seed: u64,
}

impl Default for DiffusionTrainHyper {
    fn default() -> Self {
        DiffusionTrainHyper {
            steps: 1200,
            batch: 4,
            patch: 32,
            lr: 2e-3,
            lr_floor_frac: 0.05,
            loss: LossMode::MeanAbs,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LgrdmOptions {
    pub hyper: DiffusionTrainHyper,
    pub net: DenoiserConfig,
    /// Condition on the color-corrected patch (the CIC component). When
    /// false the raw scanned patch is used instead.
    pub corrected_condition: bool,
}

impl Default for LgrdmOptions {
    fn default() -> Self {
        LgrdmOptions {
            hyper: DiffusionTrainHyper::default(),
            net: DenoiserConfig::default(),
            corrected_condition: true,
        }
    }
}

/// Divergence abort threshold: loss above 10x the initial value for this
/// many consecutive steps.
const DIVERGENCE_WINDOW: usize = 100;

/// Train the denoiser against a frozen color encoder. Per step: sample patch
/// pairs, predict `v_c` and re-normalize each scanned patch, then take one
/// noise-prediction gradient step. Returns the net and the loss log.
pub fn train_lgrdm(
    pairs: &[AlignedPair],
    encoder: &ColorEncoderNet<f32>,
    schedule: &NoiseSchedule,
    opts: &LgrdmOptions,
) -> Result<(DenoiserNet<f32>, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit {
            split: "train".into(),
        });
    }
    let hyper = &hyper_checked(&opts.hyper)?;
    let mut net = DenoiserNet::<f32>::new(opts.net, hyper.seed);
    let mut state = AdamState::new(&net.params);
    let adam = AdamConfig {
        lr: hyper.lr,
        ..AdamConfig::default()
    };
    let mut log = Vec::with_capacity(hyper.steps);
    let mut above_initial = 0usize;

    for step in 0..hyper.steps {
        let mut rng = stream(hyper.seed, &[0xdd, step as u64]);
        let mut originals = Vec::with_capacity(hyper.batch);
        let mut conditions = Vec::with_capacity(hyper.batch);
        let mut v_cs = Vec::with_capacity(hyper.batch);
        for _ in 0..hyper.batch {
            let pair = &pairs[rng.gen_range(0..pairs.len())];
            let patch = sample_patch(pair, hyper.patch, &mut rng)?;
            if opts.corrected_condition {
                let v = predict_color_vector(encoder, &patch.scanned)?;
                let corr = correct_with_target(&patch.scanned, v);
                v_cs.push(corr.predicted);
                conditions.push(corr.corrected);
            } else {
                v_cs.push(channel_stats(&patch.scanned));
                conditions.push(patch.scanned);
            }
            originals.push(patch.original);
        }
        let orig_refs: Vec<&Image> = originals.iter().collect();
        let cond_refs: Vec<&Image> = conditions.iter().collect();
        let out = training_step(
            &net, &orig_refs, &cond_refs, &v_cs, schedule, hyper.loss, &mut rng,
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
            other => other,
        })?;

        log.push(out.loss);
        if out.loss > 10.0 * log[0] {
            above_initial += 1;
            if above_initial >= DIVERGENCE_WINDOW {
                return Err(Error::Divergence {
                    step,
                    window: DIVERGENCE_WINDOW,
                });
            }
        } else {
            above_initial = 0;
        }

        let lr = crate::colorcorrect::cosine_lr(hyper.lr, hyper.lr_floor_frac, step, hyper.steps);
        adam_step(&mut net.params, &out.grads, &mut state, &adam, lr)?;
    }
    Ok((net, log))
}

fn hyper_checked(h: &DiffusionTrainHyper) -> Result<DiffusionTrainHyper> {
    if h.steps == 0 || h.batch == 0 || h.patch == 0 {
        return Err(Error::Config(
            "diffusion training needs positive steps, batch, and patch".into(),
        ));
    }
    Ok(*h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream(seed, &[0xdf]);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn schedule_single_step() {
        let s = make_linear_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.beta(1), 0.1);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_two_step_product() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn schedule_monotone_and_consistent() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        for t in 2..=1000 {
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let recurrence = s.alpha(t) * s.alpha_bar(t - 1);
            assert!((recurrence - s.alpha_bar(t)).abs() < 1e-15);
        }
        assert!(s.alpha_bar(1000) < s.alpha_bar(1));
        assert!(s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_sample_zero_noise() {
        let s = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let x0 = vec![0.2f64, -0.5, 0.9];
        let eps = vec![0.0; 3];
        let xt = forward_sample(&x0, 4, &eps, &s).unwrap();
        let c = s.alpha_bar(4).sqrt();
        for (a, b) in x0.iter().zip(&xt) {
            assert!((a * c - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_sample_no_noise_limit() {
        // A hypothetical all-alpha-bar-one table keeps x_t = x0.
        let s = NoiseSchedule {
            beta: vec![0.0; 3],
            alpha: vec![1.0; 3],
            alpha_bar: vec![1.0; 3],
            sigma: vec![0.0; 3],
        };
        let x0 = vec![0.3f64, 0.7];
        let eps = vec![0.5, -0.5];
        assert_eq!(forward_sample(&x0, 3, &eps, &s).unwrap(), x0);
    }

    #[test]
    fn forward_sample_hand_value() {
        // alpha_bar = 0.25: x_t = 0.5 * 1 + sqrt(0.75) * 0.5.
        let s = NoiseSchedule {
            beta: vec![0.5],
            alpha: vec![0.5],
            alpha_bar: vec![0.25],
            sigma: vec![0.5f64.sqrt()],
        };
        let xt = forward_sample(&[1.0f64], 1, &[0.5], &s).unwrap();
        assert!((xt[0] - 0.9330127018922193).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_zero_prediction() {
        let s = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let x = vec![0.4f64, -0.2];
        let out = reverse_step(&x, 5, &[0.0, 0.0], &s, None).unwrap();
        let inv = 1.0 / s.alpha(5).sqrt();
        for (a, b) in x.iter().zip(&out) {
            assert!((a * inv - b).abs() < 1e-15);
        }
    }

    #[test]
    fn reverse_step_rejects_noise_at_t1() {
        let s = make_linear_schedule(4, 0.01, 0.1).unwrap();
        let x = vec![0.1f64];
        assert!(reverse_step(&x, 1, &[0.0], &s, Some(&[1.0])).is_err());
        // All-zero z at t=1 is the documented deterministic form.
        assert!(reverse_step(&x, 1, &[0.0], &s, Some(&[0.0])).is_ok());
    }

    #[test]
    fn reverse_step_hand_value_chained_from_forward() {
        let s = NoiseSchedule {
            beta: vec![0.5],
            alpha: vec![0.5],
            alpha_bar: vec![0.25],
            sigma: vec![0.5f64.sqrt()],
        };
        let x_t = 0.9330127018922193;
        let out = reverse_step(&[x_t], 1, &[0.5f64], &s, None).unwrap();
        let coef = 0.5 / 0.75f64.sqrt();
        let expect = (x_t - coef * 0.5) / 0.5f64.sqrt();
        assert!((out[0] - expect).abs() < 1e-12);
        assert!((expect - 0.9112).abs() < 2e-4);
    }

    #[test]
    fn single_step_inversion_recovers_x0() {
        // At t=1 alpha_bar = alpha, so forward then reverse with the true
        // noise is an exact algebraic inversion.
        let s = make_linear_schedule(6, 0.02, 0.3).unwrap();
        let x0 = vec![0.8f64, -0.3, 0.1];
        let eps = vec![0.7, -1.1, 0.4];
        let x1 = forward_sample(&x0, 1, &eps, &s).unwrap();
        let back = reverse_step(&x1, 1, &eps, &s, None).unwrap();
        for (a, b) in x0.iter().zip(&back) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_moments_match_closed_form() {
        let s = default_schedule(50).unwrap();
        let x0 = 0.37f64;
        let n = 100_000usize;
        let mut rng = stream(21, &[1]);
        for t in [1usize, 25, 50] {
            let ab = s.alpha_bar(t);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let e: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
                sum += xt;
                sumsq += xt * xt;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            let se_mean = (1.0 - ab).sqrt() / (n as f64).sqrt();
            let se_var = (1.0 - ab) * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((mean - ab.sqrt() * x0).abs() < 3.0 * se_mean, "t={t}");
            assert!((var - (1.0 - ab)).abs() < 3.0 * se_var, "t={t}");
        }
    }

    #[test]
    fn iterated_chain_matches_closed_form_variance() {
        // Iterating q(x_t | x_{t-1}) step by step lands on the closed-form
        // marginal of the one-shot formula.
        let s = default_schedule(20).unwrap();
        let x0 = -0.2f64;
        let n = 100_000usize;
        let mut rng = stream(22, &[1]);
        let t = 20;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut x = x0;
            for step in 1..=t {
                let z: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                x = (1.0 - s.beta(step)).sqrt() * x + s.beta(step).sqrt() * z;
            }
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let ab = s.alpha_bar(t);
        let se_var = (1.0 - ab) * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - (1.0 - ab)).abs() < 3.0 * se_var, "var {var} vs {}", 1.0 - ab);
        let se_mean = (1.0 - ab).sqrt() / (n as f64).sqrt();
        assert!((mean - ab.sqrt() * x0).abs() < 3.0 * se_mean);
    }

    #[test]
    fn zero_output_denoiser_loss_is_half_normal_mean() {
        // Fresh nets predict exactly zero, so the L1 loss is E|N(0,1)|.
        let net = DenoiserNet::<f32>::new(DenoiserConfig::default(), 1);
        let s = default_schedule(50).unwrap();
        let original = random_image(32, 32, 31);
        let cond = random_image(32, 32, 32);
        let v = channel_stats(&cond);
        let mut rng = stream(33, &[1]);
        let out = training_step(
            &net,
            &[&original, &original],
            &[&cond, &cond],
            &[v, v],
            &s,
            LossMode::MeanAbs,
            &mut rng,
        )
        .unwrap();
        let expect = (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (out.loss - expect).abs() < 0.02 * expect * 2.0,
            "loss {} vs {expect}",
            out.loss
        );
    }

    #[test]
    fn forced_zero_eps_zero_net_gives_zero_loss() {
        let net = DenoiserNet::<f32>::new(DenoiserConfig::default(), 2);
        let s = default_schedule(10).unwrap();
        let original = random_image(16, 16, 41);
        let cond = random_image(16, 16, 42);
        let v = channel_stats(&cond);
        let eps = vec![0.0f32; 3 * 16 * 16];
        let out = training_step_forced(
            &net,
            &[&original],
            &[&cond],
            &[v],
            &[5],
            &eps,
            &s,
            LossMode::MeanAbs,
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn training_step_deterministic_under_seed() {
        let net = DenoiserNet::<f32>::new(DenoiserConfig::default(), 3);
        let s = default_schedule(30).unwrap();
        let original = random_image(16, 16, 51);
        let cond = random_image(16, 16, 52);
        let v = channel_stats(&cond);
        let run = || {
            let mut rng = stream(53, &[7]);
            training_step(
                &net,
                &[&original],
                &[&cond],
                &[v],
                &s,
                LossMode::MeanAbs,
                &mut rng,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.ts, b.ts);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn descan_runs_exactly_t_o_reverse_steps() {
        let net = DenoiserNet::<f32>::new(DenoiserConfig::default(), 4);
        let s = default_schedule(40).unwrap();
        let scanned = random_image(16, 16, 61);
        for t_o in [1usize, 7, 40] {
            let out = descan(
                &scanned,
                None,
                &net,
                &s,
                &DescanOptions {
                    t_o,
                    color: ColorSource::Oracle(channel_stats(&scanned)),
                    ..DescanOptions::default()
                },
            )
            .unwrap();
            assert_eq!(out.reverse_steps, t_o);
        }
    }

    #[test]
    fn descan_degenerate_chain_is_correction_only() {
        // T_o = 1 with a zero-output net and vanishing beta: the single
        // reverse step divides by sqrt(alpha) ~ 1, so output ~ I_c.
        let net = DenoiserNet::<f32>::new(DenoiserConfig::default(), 5);
        let s = make_linear_schedule(4, 1e-9, 1e-8).unwrap();
        let scanned = random_image(16, 16, 62);
        let target = channel_stats(&random_image(16, 16, 63));
        let out = descan(
            &scanned,
            None,
            &net,
            &s,
            &DescanOptions {
                t_o: 1,
                color: ColorSource::Oracle(target),
                ..DescanOptions::default()
            },
        )
        .unwrap();
        let ic = correct_with_target(&scanned, target).corrected;
        for (a, b) in out.restored.pixels().iter().zip(ic.pixels()) {
            assert!((a - b.clamp(0.0, 1.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn descan_deterministic_under_seed() {
        let net = DenoiserNet::<f32>::new(DenoiserConfig::default(), 6);
        let s = default_schedule(20).unwrap();
        let scanned = random_image(16, 16, 64);
        let opts = DescanOptions {
            t_o: 10,
            color: ColorSource::Oracle(channel_stats(&scanned)),
            seed: 9,
            ..DescanOptions::default()
        };
        let a = descan(&scanned, None, &net, &s, &opts).unwrap();
        let b = descan(&scanned, None, &net, &s, &opts).unwrap();
        assert_eq!(a.restored, b.restored);
    }

    #[test]
    fn train_lgrdm_freezes_encoder_and_logs_every_step() {
        let encoder = ColorEncoderNet::<f32>::new(EncoderConfig::default(), 7);
        let fingerprint_before = encoder.params.fingerprint();
        let pairs: Vec<AlignedPair> = (0..2)
            .map(|i| {
                let original = random_image(32, 32, 70 + i);
                AlignedPair {
                    scanned: random_image(32, 32, 80 + i),
                    original,
                    offset: (0, 0),
                }
            })
            .collect();
        let s = default_schedule(20).unwrap();
        let opts = LgrdmOptions {
            hyper: DiffusionTrainHyper {
                steps: 30,
                batch: 2,
                ..DiffusionTrainHyper::default()
            },
            ..LgrdmOptions::default()
        };
        let (_, log) = train_lgrdm(&pairs, &encoder, &s, &opts).unwrap();
        assert_eq!(log.len(), 30);
        assert!(log.iter().all(|l| l.is_finite()));
        assert_eq!(encoder.params.fingerprint(), fingerprint_before);
    }

    #[test]
    fn train_lgrdm_empty_split_rejected() {
        let encoder = ColorEncoderNet::<f32>::new(EncoderConfig::default(), 8);
        let s = default_schedule(10).unwrap();
        assert!(matches!(
            train_lgrdm(&[], &encoder, &s, &LgrdmOptions::default()),
            Err(Error::EmptySplit { .. })
        ));
    }
}
