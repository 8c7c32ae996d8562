//! Minimal CPU training engine for the two estimation networks.
//!
//! Feature maps are stored channel-major (`[C][N][H][W]`) so that a
//! convolution over a whole batch is a single matrix product. Layers keep
//! their own gradient buffers; networks run forward passes that record what
//! their backward pass needs and then call each layer's `backward` in
//! reverse order.

mod act;
mod block;
mod conv;
mod gemm;
mod norm;
mod optim;
mod tensor;

pub use act::Activation;
pub use block::{Block, Layer, Trace};
pub use conv::{Conv2d, ConvTranspose2d, Padding};
pub use norm::{InstanceNorm, NormCache};
pub use optim::{Adam, Optimizer, RmsProp};
pub use tensor::FeatureMap;


use rand::Rng;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(len: usize) -> Self {
        Self {
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn filled(len: usize, v: f32) -> Self {
        Self {
            value: vec![v; len],
            grad: vec![0.0; len],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(len: usize, bound: f32, rng: &mut R) -> Self {
        let value = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            value,
            grad: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything holding trainable parameters, visited in a fixed order.
pub trait Parameters {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.collect_params_mut(&mut out);
        out
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Order-sensitive fingerprint of every parameter value.
    fn param_checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for (_, p) in self.named_params() {
            for v in &p.value {
                hasher.update(&v.to_le_bytes());
            }
        }
        hasher.finalize()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
