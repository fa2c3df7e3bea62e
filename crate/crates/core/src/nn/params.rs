//! Named parameter storage shared by the two networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub trainable: bool,
}

/// Ordered collection of named tensors. Order is fixed at construction and
/// shared with optimizer state and gradient vectors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F: Scalar> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<F>, trainable: bool) -> usize {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param {name}");
        self.params.push(Param {
            name: name.to_string(),
            shape,
            data,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Param<F> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<F> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Insert every parameter as a leaf on `tape`; result is index-aligned.
    pub fn leaves(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), &p.shape))
            .collect()
    }

    /// Collect per-parameter gradients after a backward pass (zeros for
    /// parameters the loss does not reach).
    pub fn gradients(&self, tape: &Tape<F>, leaves: &[Var]) -> Vec<Vec<F>> {
        leaves
            .iter()
            .zip(&self.params)
            .map(|(v, p)| {
                tape.grad(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![F::zero(); p.data.len()])
            })
            .collect()
    }

    /// FNV-1a over the little-endian f32 image of every parameter, in order.
    /// Cheap fingerprint for freeze contracts.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for p in &self.params {
            for b in p.name.as_bytes() {
                eat(*b);
            }
            for v in &p.data {
                for b in (v.to_double() as f32).to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        hash
    }
}

/// Kaiming-uniform fill: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<F> {
    let fan_in: usize = match shape.len() {
        2 => shape[1],
        4 => shape[1] * shape[2] * shape[3],
        other => panic!("kaiming init expects rank 2 or 4, got {other}"),
    };
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..shape.iter().product::<usize>())
        .map(|_| F::from_double(rng.gen_range(-bound..bound)))
        .collect()
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> Vec<F> {
    vec![F::zero(); shape.iter().product()]
}
