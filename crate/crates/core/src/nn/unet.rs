//! Conditional denoiser: a two-level UNet over 6 input channels (the noisy
//! latent concatenated with the conditioning image), with a sinusoidal
//! timestep embedding plus a single-layer color projection summed into every
//! block.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::embed::timestep_embedding;
use crate::nn::params::{kaiming_uniform, zeros, ParamSet};
use crate::nn::tensor::{Scalar, Tape, Var};
use crate::nn::weights;
use crate::rng::stream;

#[derive(Debug, Clone, Copy)]
pub struct DenoiserConfig {
    /// Channels at full resolution; doubled at the downsampled level.
    pub base_width: usize,
    /// Timestep/color embedding width.
    pub emb_dim: usize,
    /// When false the color projection is zero-initialized and frozen, which
    /// makes the output exactly independent of the color vector.
    pub color_projection: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_width: 16,
            emb_dim: 32,
            color_projection: true,
        }
    }
}

/// The trainable noise predictor.
#[derive(Debug, Clone)]
pub struct DenoiserNet<F: Scalar> {
    pub config: DenoiserConfig,
    pub params: ParamSet<F>,
}

/// Handle to one forward evaluation, keeping parameter leaves for gradient
/// extraction after `tape.backward`.
pub struct DenoiserForward {
    pub output: Var,
    pub param_leaves: Vec<Var>,
}

impl<F: Scalar> DenoiserNet<F> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = stream(seed, &[0x0d]);
        let params = build_params(&config, &mut rng);
        DenoiserNet { config, params }
    }

    /// Reconstruct from a DSCW file; widths are inferred from tensor shapes
    /// and the color projection counts as disabled when stored all-zero.
    pub fn from_weights(tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::WeightsFormat(format!("missing tensor {name}")))
        };
        let base_width = find("stem.w")?.1[0];
        let emb_dim = find("cproj.w")?.1[0];
        let cproj_zero = find("cproj.w")?.2.iter().all(|&v| v == 0.0)
            && find("cproj.b")?.2.iter().all(|&v| v == 0.0);
        let config = DenoiserConfig {
            base_width,
            emb_dim,
            color_projection: !cproj_zero,
        };
        let mut rng = stream(0, &[0x0d]);
        let mut params = build_params(&config, &mut rng);
        weights::apply(&mut params, tensors)?;
        Ok(DenoiserNet { config, params })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        weights::save(&self.params, path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_weights(&weights::load(path)?)
    }

    /// Run the net on `[N,3,H,W]` latents. `cond` is the conditioning image
    /// in the same latent coordinates, `v_c` is `[N,6]`, `ts` one timestep
    /// per sample. H and W must be even for the down/up pair.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        x_t: Var,
        cond: Var,
        v_c: Var,
        ts: &[usize],
    ) -> Result<DenoiserForward> {
        let shape = tape.shape(x_t).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::InvalidArgument(format!(
                "denoiser expects [N,3,H,W], got {shape:?}"
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "denoiser needs even spatial dims, got {h}x{w}"
            )));
        }
        if ts.len() != n {
            return Err(Error::InvalidArgument(format!(
                "got {} timesteps for batch of {n}",
                ts.len()
            )));
        }

        let leaves = self.params.leaves(tape);
        let p = |name: &str| leaves[self.params.index_of(name).expect(name)];

        // Embedding: MLP over the sinusoidal code, plus the color projection.
        let e = self.config.emb_dim;
        let mut sin_data = Vec::with_capacity(n * e);
        for &t in ts {
            sin_data.extend(timestep_embedding(t, e).into_iter().map(F::from_double));
        }
        let sin = tape.leaf(sin_data, &[n, e]);
        let t1 = tape.linear(sin, p("temb.fc1.w"))?;
        let t1 = tape.bias_add(t1, p("temb.fc1.b"))?;
        let t1 = tape.silu(t1);
        let t2 = tape.linear(t1, p("temb.fc2.w"))?;
        let temb = tape.bias_add(t2, p("temb.fc2.b"))?;
        let cemb = tape.linear(v_c, p("cproj.w"))?;
        let cemb = tape.bias_add(cemb, p("cproj.b"))?;
        let emb = tape.add(temb, cemb)?;

        let block = |tape: &mut Tape<F>, x: Var, prefix: &str| -> Result<Var> {
            let h = tape.conv2d(x, p(&format!("{prefix}.w")), 1)?;
            let h = tape.bias_add(h, p(&format!("{prefix}.b")))?;
            let eproj = tape.linear(emb, p(&format!("{prefix}.emb.w")))?;
            let eproj = tape.bias_add(eproj, p(&format!("{prefix}.emb.b")))?;
            let h = tape.channel_embed(h, eproj)?;
            Ok(tape.silu(h))
        };

        let x = tape.concat_channels(x_t, cond)?;
        let h0 = tape.conv2d(x, p("stem.w"), 1)?;
        let h0 = tape.bias_add(h0, p("stem.b"))?;
        let h0 = tape.silu(h0);

        let h0 = block(tape, h0, "enc0a")?;
        let skip = block(tape, h0, "enc0b")?;

        let d = tape.conv2d(skip, p("down.w"), 2)?;
        let d = tape.bias_add(d, p("down.b"))?;
        let d = tape.silu(d);

        let h1 = block(tape, d, "enc1a")?;
        let h1 = block(tape, h1, "enc1b")?;

        let u = tape.upsample2(h1);
        let u = tape.conv2d(u, p("up.w"), 1)?;
        let u = tape.bias_add(u, p("up.b"))?;
        let u = tape.silu(u);

        let merged = tape.concat_channels(u, skip)?;
        let h2 = block(tape, merged, "dec0a")?;
        let h2 = block(tape, h2, "dec0b")?;

        let out = tape.conv2d(h2, p("out.w"), 1)?;
        let out = tape.bias_add(out, p("out.b"))?;

        Ok(DenoiserForward {
            output: out,
            param_leaves: leaves,
        })
    }
}

fn build_params<F: Scalar>(config: &DenoiserConfig, rng: &mut ChaCha8Rng) -> ParamSet<F> {
    let wd = config.base_width;
    let e = config.emb_dim;
    let mut params = ParamSet::new();

    let conv = |params: &mut ParamSet<F>, name: &str, cout: usize, cin: usize, rng: &mut ChaCha8Rng| {
        let shape = vec![cout, cin, 3, 3];
        let data = kaiming_uniform(rng, &shape);
        params.push(&format!("{name}.w"), shape, data, true);
        params.push(&format!("{name}.b"), vec![cout], zeros(&[cout]), true);
    };
    let lin = |params: &mut ParamSet<F>, name: &str, dout: usize, din: usize, rng: &mut ChaCha8Rng| {
        let shape = vec![dout, din];
        let data = kaiming_uniform(rng, &shape);
        params.push(&format!("{name}.w"), shape, data, true);
        params.push(&format!("{name}.b"), vec![dout], zeros(&[dout]), true);
    };
    let block = |params: &mut ParamSet<F>, name: &str, cout: usize, cin: usize, rng: &mut ChaCha8Rng| {
        conv(params, name, cout, cin, rng);
        lin(params, &format!("{name}.emb"), cout, e, rng);
    };

    conv(&mut params, "stem", wd, 6, rng);
    lin(&mut params, "temb.fc1", e, e, rng);
    lin(&mut params, "temb.fc2", e, e, rng);

    if config.color_projection {
        lin(&mut params, "cproj", e, 6, rng);
    } else {
        params.push("cproj.w", vec![e, 6], zeros(&[e, 6]), false);
        params.push("cproj.b", vec![e], zeros(&[e]), false);
    }

    block(&mut params, "enc0a", wd, wd, rng);
    block(&mut params, "enc0b", wd, wd, rng);
    conv(&mut params, "down", 2 * wd, wd, rng);
    block(&mut params, "enc1a", 2 * wd, 2 * wd, rng);
    block(&mut params, "enc1b", 2 * wd, 2 * wd, rng);
    conv(&mut params, "up", wd, 2 * wd, rng);
    block(&mut params, "dec0a", wd, 2 * wd, rng);
    block(&mut params, "dec0b", wd, wd, rng);

    // Zero-initialized head: the net starts by predicting zero noise.
    params.push("out.w", vec![3, wd, 3, 3], zeros(&[3, wd, 3, 3]), true);
    params.push("out.b", vec![3], zeros(&[3]), true);

    params
}
