//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! `Tensor` is a plain value (shape + row-major data). Differentiable
//! computation runs on a [`tape::Tape`]: leaves are copied in, ops append
//! nodes in topological order, and `backward` replays adjoints once per node.
//! Everything is f64 so finite-difference checks can run at tight tolerances.

pub mod gradcheck;
pub mod optim;
pub mod tape;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// How to fill a freshly allocated tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Zeros,
    Ones,
    /// Uniform on [0, 1), seeded.
    Uniform { seed: u64 },
    /// Zero-mean gaussian with the given standard deviation, seeded.
    Normal { seed: u64, std: f64 },
}

/// n-dimensional f64 array, row-major. `grad`, when present, matches `shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(default)]
    pub grad: Option<Vec<f64>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one dimension"));
    }
    if let Some(&d) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::shape(format!("invalid dimension {d} in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Allocate and fill a tensor. Deterministic for identical (shape, mode).
    pub fn init(shape: &[usize], mode: InitMode) -> Result<Tensor> {
        let n = check_shape(shape)?;
        let data = match mode {
            InitMode::Zeros => vec![0.0; n],
            InitMode::Ones => vec![1.0; n],
            InitMode::Uniform { seed } => {
                let mut rng = rng_from_seed(seed);
                (0..n).map(|_| rng.gen::<f64>()).collect()
            }
            InitMode::Normal { seed, std } => {
                let mut rng = rng_from_seed(seed);
                (0..n).map(|_| gaussian(&mut rng) * std).collect()
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::init(shape, InitMode::Zeros).expect("static shape")
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape:?} (numel {n})",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar extraction; panics if numel != 1.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulate into the grad buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.numel(), "grad length mismatch");
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Box-Muller gaussian; two uniforms per draw keeps the stream simple
/// and bit-stable across library versions.
fn gaussian(rng: &mut crate::rng::Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
