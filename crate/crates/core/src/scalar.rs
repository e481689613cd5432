use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating point scalar the math core is generic over: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + std::iter::Sum + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64_(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }
    fn from_usize_(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).unwrap()
    }
    fn to_f64_(self) -> f64;
    fn to_f32_(self) -> f32 {
        self.to_f64_() as f32
    }
}

impl Scalar for f32 {
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_(self) -> f64 {
        self
    }
}
