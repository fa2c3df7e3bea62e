//! Sinusoidal timestep embedding.

/// Interleaved sin/cos of `t` at geometric frequencies `10000^(-2i/dim)`:
/// `emb[2i] = sin(t * f_i)`, `emb[2i+1] = cos(t * f_i)`. `dim` must be even.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    out
}
