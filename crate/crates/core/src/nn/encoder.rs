//! Color encoder: a small strided conv stack regressing the 6 per-channel
//! color statistics of the original image from the scanned one. Means pass
//! through a sigmoid and standard deviations through a softplus so the
//! output is always a valid statistics vector.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::{kaiming_uniform, zeros, ParamSet};
use crate::nn::tensor::{Scalar, Tape, Var};
use crate::nn::weights;
use crate::rng::stream;

/// Smallest input side the four stride-2 stages accept.
pub const MIN_INPUT_SIDE: usize = 16;

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    /// Channels of the first stage; doubled twice, then held.
    pub base_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { base_width: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct ColorEncoderNet<F: Scalar> {
    pub config: EncoderConfig,
    pub params: ParamSet<F>,
}

pub struct EncoderForward {
    pub output: Var,
    pub param_leaves: Vec<Var>,
}

impl<F: Scalar> ColorEncoderNet<F> {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = stream(seed, &[0x0e]);
        let params = build_params(&config, &mut rng);
        ColorEncoderNet { config, params }
    }

    pub fn from_weights(tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<Self> {
        let base_width = tensors
            .iter()
            .find(|(n, _, _)| n == "c0.w")
            .map(|(_, shape, _)| shape[0])
            .ok_or_else(|| Error::WeightsFormat("missing tensor c0.w".into()))?;
        let config = EncoderConfig { base_width };
        let mut rng = stream(0, &[0x0e]);
        let mut params = build_params(&config, &mut rng);
        weights::apply(&mut params, tensors)?;
        Ok(ColorEncoderNet { config, params })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        weights::save(&self.params, path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_weights(&weights::load(path)?)
    }

    /// `[N,3,H,W] -> [N,6]`, min side [`MIN_INPUT_SIDE`].
    pub fn forward(&self, tape: &mut Tape<F>, image: Var) -> Result<EncoderForward> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::InvalidArgument(format!(
                "encoder expects [N,3,H,W], got {shape:?}"
            )));
        }
        if shape[2] < MIN_INPUT_SIDE || shape[3] < MIN_INPUT_SIDE {
            return Err(Error::ImageTooSmall {
                h: shape[2],
                w: shape[3],
                min_side: MIN_INPUT_SIDE,
            });
        }

        let leaves = self.params.leaves(tape);
        let p = |name: &str| leaves[self.params.index_of(name).expect(name)];

        let mut h = image;
        for stage in ["c0", "c1", "c2", "c3"] {
            h = tape.conv2d(h, p(&format!("{stage}.w")), 2)?;
            h = tape.bias_add(h, p(&format!("{stage}.b")))?;
            h = tape.silu(h);
        }
        let pooled = tape.global_avg_pool(h);
        let raw = tape.linear(pooled, p("head.w"))?;
        let raw = tape.bias_add(raw, p("head.b"))?;

        let means_raw = tape.narrow_cols(raw, 0, 3)?;
        let stds_raw = tape.narrow_cols(raw, 3, 3)?;
        let means = tape.sigmoid_op(means_raw);
        let stds = tape.softplus(stds_raw);
        let output = tape.concat_cols(means, stds)?;

        Ok(EncoderForward {
            output,
            param_leaves: leaves,
        })
    }
}

fn build_params<F: Scalar>(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> ParamSet<F> {
    let b = config.base_width;
    let widths = [(b, 3), (2 * b, b), (4 * b, 2 * b), (4 * b, 4 * b)];
    let mut params = ParamSet::new();
    for (i, (cout, cin)) in widths.into_iter().enumerate() {
        let shape = vec![cout, cin, 3, 3];
        let data = kaiming_uniform(rng, &shape);
        params.push(&format!("c{i}.w"), shape, data, true);
        params.push(&format!("c{i}.b"), vec![cout], zeros(&[cout]), true);
    }
    let head_shape = vec![6, 4 * b];
    let head = kaiming_uniform(rng, &head_shape);
    params.push("head.w", head_shape, head, true);
    params.push("head.b", vec![6], zeros(&[6]), true);
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input<F: Scalar>(tape: &mut Tape<F>, n: usize, side: usize, seed: u64) -> Var {
        let mut rng = stream(seed, &[0xe1]);
        let data: Vec<F> = (0..n * 3 * side * side)
            .map(|_| F::from_double(rng.gen::<f64>()))
            .collect();
        tape.leaf(data, &[n, 3, side, side])
    }

    #[test]
    fn outputs_valid_stats_any_size() {
        let net: ColorEncoderNet<f32> = ColorEncoderNet::new(EncoderConfig::default(), 1);
        for side in [16usize, 32, 48] {
            let mut tape = Tape::new();
            let x = random_input(&mut tape, 2, side, 2);
            let fwd = net.forward(&mut tape, x).unwrap();
            let out = tape.data(fwd.output);
            assert_eq!(tape.shape(fwd.output), &[2, 6]);
            for row in out.chunks_exact(6) {
                for c in 0..3 {
                    assert!(row[c] > 0.0 && row[c] < 1.0, "mean out of (0,1)");
                    assert!(row[3 + c] >= 0.0, "negative sigma");
                }
            }
        }
    }

    #[test]
    fn deterministic_on_identical_inputs() {
        let net: ColorEncoderNet<f32> = ColorEncoderNet::new(EncoderConfig::default(), 3);
        let run = || {
            let mut tape = Tape::new();
            let x = random_input(&mut tape, 1, 16, 4);
            let fwd = net.forward(&mut tape, x).unwrap();
            tape.data(fwd.output).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn too_small_input_rejected() {
        let net: ColorEncoderNet<f32> = ColorEncoderNet::new(EncoderConfig::default(), 5);
        let mut tape = Tape::new();
        let x = random_input(&mut tape, 1, 8, 6);
        assert!(matches!(
            net.forward(&mut tape, x),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn weights_round_trip() {
        let net: ColorEncoderNet<f32> = ColorEncoderNet::new(EncoderConfig::default(), 7);
        let bytes = weights::encode(&net.params);
        let loaded =
            ColorEncoderNet::<f32>::from_weights(&weights::decode(&bytes).unwrap()).unwrap();
        let run = |n: &ColorEncoderNet<f32>| {
            let mut tape = Tape::new();
            let x = random_input(&mut tape, 1, 16, 8);
            let fwd = n.forward(&mut tape, x).unwrap();
            tape.data(fwd.output).to_vec()
        };
        assert_eq!(run(&net), run(&loaded));
    }
}
