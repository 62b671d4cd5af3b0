use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for the numeric core: f32 or f64.
///
/// The tensor and tape machinery is generic over this trait. The concrete
/// aliases at the crate root pin f64 for the training/verification path and
/// f32 for bank storage.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// Convert a literal; panics only for values unrepresentable as Self.
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
