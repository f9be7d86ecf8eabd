use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point element type the networks are generic over.
///
/// Training and inference run at `f32`; gradient checks instantiate the same
/// code at `f64`.
pub trait Real: NdFloat + FromPrimitive + Default {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
