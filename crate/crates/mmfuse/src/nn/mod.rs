//! Minimal reverse-mode autodiff and layers for the bag classifiers.
//!
//! The training workloads here are small (bags of a few dozen 224x224
//! instances through a mostly frozen backbone), single-threaded, and must
//! be bit-reproducible, so the engine is a plain tape over `ndarray`
//! buffers: values are computed eagerly, `backward` walks the tape once.
//! Everything is generic over `f32`/`f64`; training runs in `f32`,
//! gradient checks in `f64`.

pub mod adam;
pub mod layers;
pub mod params;
pub mod tape;

pub use adam::Adam;
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};

/// Element type for tensors: `f32` or `f64`.
pub trait Scalar:
    ndarray::NdFloat + num_traits::FromPrimitive + num_traits::ToPrimitive + std::iter::Sum
{
    fn of_f64(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite literal")
    }

    fn into_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
