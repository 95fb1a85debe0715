//! Element type abstraction over f32 (training) and f64 (testing).

use num_traits::{Float, FromPrimitive};
use std::fmt::Debug;
use std::iter::Sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Real32,
    Real64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::Real32 => 0,
            Dtype::Real64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::Real32),
            1 => Some(Dtype::Real64),
            _ => None,
        }
    }
}

pub trait Scalar: Float + FromPrimitive + Sum + Debug + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant conversion")
    }

    fn f64(self) -> f64;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::Real32;

    fn f64(self) -> f64 {
        self as f64
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn byte_width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::Real64;

    fn f64(self) -> f64 {
        self
    }

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn byte_width() -> usize {
        8
    }
}
