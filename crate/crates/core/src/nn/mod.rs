//! Minimal tensor autodiff substrate and the two trainable networks.

pub mod embed;
pub mod encoder;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod unet;
pub mod weights;

pub use embed::timestep_embedding;
pub use encoder::{ColorEncoderNet, EncoderConfig};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::ParamSet;
pub use tensor::{Scalar, Tape, Var};
pub use unet::{DenoiserConfig, DenoiserNet};

use crate::image::Image;

/// Interleaved HxWx3 image to planar `[3,H,W]` tensor data, `x = a*p + b`.
pub fn image_to_planar<F: Scalar>(image: &Image, a: f64, b: f64) -> Vec<F> {
    let plane = image.height() * image.width();
    let mut out = vec![F::zero(); 3 * plane];
    for (i, p) in image.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = F::from_double(a * p[c] + b);
        }
    }
    out
}

/// Planar `[3,H,W]` tensor data back to an image, `p = a*x + b`.
pub fn planar_to_image<F: Scalar>(data: &[F], h: usize, w: usize, a: f64, b: f64) -> Image {
    let plane = h * w;
    assert_eq!(data.len(), 3 * plane, "planar buffer length");
    let mut px = vec![0.0; plane * 3];
    for i in 0..plane {
        for c in 0..3 {
            px[i * 3 + c] = a * data[c * plane + i].to_double() + b;
        }
    }
    Image::new(h, w, px)
}

/// Stack images into one `[N,3,H,W]` buffer with the same affine map.
pub fn batch_to_planar<F: Scalar>(images: &[&Image], a: f64, b: f64) -> Vec<F> {
    let mut out = Vec::new();
    for img in images {
        out.extend(image_to_planar::<F>(img, a, b));
    }
    out
}
