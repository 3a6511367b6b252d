//! Dense tensors and the deterministic PRNG everything else builds on.
//!
//! Tensors are contiguous row-major buffers with an explicit shape. Training
//! runs in `f32`; the same kernels can be instantiated with `f64` for tight
//! gradient checks, so the element type is a parameter.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Element type the kernels are generic over. `f32` for training, `f64` for
/// the high-precision check mode used by gradient tests.
pub trait Real:
    Float + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shape violation: carries both sides so the message names the shapes.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{context}: expected shape {expected:?}, got {actual:?}")]
pub struct ShapeError {
    pub context: String,
    pub expected: Vec<usize>,
    pub actual: Vec<usize>,
}

impl ShapeError {
    pub fn new(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        ShapeError {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

/// N-dimensional array with explicit extents and contiguous row-major data.
#[derive(Clone, PartialEq)]
pub struct TensorOf<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// The tensor type used everywhere outside the f64 check mode.
pub type Tensor = TensorOf<f32>;

impl<S: Real> TensorOf<S> {
    /// Build from shape and data; every extent must be ≥ 1 and the product
    /// must match the data length.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, ShapeError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != data.len() {
            return Err(ShapeError::new(
                format!("tensor of {} elements", data.len()),
                &shape,
                &[data.len()],
            ));
        }
        Ok(TensorOf { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        TensorOf {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        TensorOf {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        TensorOf {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Same data, different extents. Element count must be preserved.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, ShapeError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(ShapeError::new("reshape", shape, &self.shape));
        }
        Ok(TensorOf {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Panics (debug builds only) if any element is NaN/Inf. Kernels call this
    /// on their outputs so a non-finite value is caught where it appears.
    pub fn debug_assert_finite(&self, context: &str) {
        if cfg!(debug_assertions) {
            debug_assert!(
                self.data.iter().all(|v| v.is_finite()),
                "non-finite value after {context}"
            );
        }
    }

    pub fn require_shape(&self, expected: &[usize], context: &str) -> Result<(), ShapeError> {
        if self.shape != expected {
            return Err(ShapeError::new(context, expected, &self.shape));
        }
        Ok(())
    }
}

impl Tensor {
    /// Widen to f64 for the check mode.
    pub fn to_f64(&self) -> TensorOf<f64> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

impl<S: Real> fmt::Debug for TensorOf<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TensorOf{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer of SplitMix64 (Steele, Lea, Flood 2014). Also used to derive
/// sub-seeds.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; used to turn stream labels into seed perturbations.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// SplitMix64 generator. The algorithm is fixed: the state advances by the
/// golden-ratio increment and each output is the mix64 finalizer of the new
/// state, so the same seed produces the same stream on every platform.
///
/// Independent sub-streams are derived by label ([`Rng::derive`]) or index
/// ([`Rng::derive_index`]); init, shuffling, and decoder init each pull from
/// their own stream so adding draws to one cannot shift another.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX_GAMMA);
        mix64(self.state)
    }

    /// Child generator for a named purpose, independent of draws made on self.
    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(mix64(self.seed ^ fnv1a64(label.as_bytes())))
    }

    /// Child generator for an index (layer number, epoch, client id).
    pub fn derive_index(&self, index: u64) -> Rng {
        Rng::new(mix64(self.seed ^ index.wrapping_mul(SPLITMIX_GAMMA) ^ 0x5851_F42D_4C95_7F2D))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-bound, bound).
    pub fn next_symmetric(&mut self, bound: f64) -> f64 {
        (self.next_f64() * 2.0 - 1.0) * bound
    }

    /// Unbiased uniform integer in [0, n) by rejection sampling.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
