use std::fmt::{Display, LowerExp};
use std::iter::Sum;

/// Scalar type for all numerics: `f32` and `f64` qualify.
///
/// `of` converts literals and grid parameters that the parser and the
/// builtins carry as `f64`.
pub trait Real:
    nalgebra::RealField + Copy + num_traits::NumCast + Sum + Default + Display + LowerExp + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("literal out of range for scalar type")
    }
}

impl<T> Real for T where
    T: nalgebra::RealField
        + Copy
        + num_traits::NumCast
        + Sum
        + Default
        + Display
        + LowerExp
        + 'static
{
}
