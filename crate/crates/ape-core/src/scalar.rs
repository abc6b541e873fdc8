//! Floating-point scalar abstraction.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! code runs in single precision for training and in double precision for
//! gradient checking.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type the tensor and model code is generic over.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Type tag recorded in serialized tensor headers.
    const DTYPE: &'static str;

    /// Serialized width in bytes.
    const BYTES: usize;

    /// Appends the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one value from exactly `BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// Converts from `f64`, which is always representable (possibly with
    /// rounding) for the implementing types.
    fn of_f64(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("f64 conversion")
    }

    /// Widens to `f64`.
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }

    /// Gauss error function, evaluated in double precision.
    fn erf(self) -> Self {
        Self::of_f64(libm::erf(self.as_f64()))
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("exactly four bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("exactly eight bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_known_values() {
        assert!(Scalar::erf(0.0f64).abs() < 1e-15, "erf(0) must be 0");
        assert!(
            (Scalar::erf(1.0f64) - 0.8427007929497149).abs() < 1e-12,
            "erf(1) off: {}",
            Scalar::erf(1.0f64)
        );
        assert!(
            (Scalar::erf(-1.0f64) + 0.8427007929497149).abs() < 1e-12,
            "erf must be odd"
        );
        let single: f32 = Scalar::erf(0.5f32);
        assert!((single as f64 - 0.5204998778130465).abs() < 1e-6);
    }

    #[test]
    fn f64_round_trip_is_exact_for_f32_values() {
        let xs: [f32; 4] = [1.5, -0.1, 3.0e-8, 12345.678];
        for x in xs {
            assert_eq!(f32::of_f64(x.as_f64()), x);
        }
    }

    #[test]
    fn byte_encoding_round_trips_bitwise() {
        let mut buf = Vec::new();
        for x in [0.0f32, -1.5, f32::MIN_POSITIVE, 7.25e-3] {
            buf.clear();
            x.write_le(&mut buf);
            assert_eq!(buf.len(), f32::BYTES);
            assert_eq!(f32::read_le(&buf).to_bits(), x.to_bits());
        }
        for x in [0.0f64, -2.25, f64::MIN_POSITIVE, 1.0e-300] {
            buf.clear();
            x.write_le(&mut buf);
            assert_eq!(buf.len(), f64::BYTES);
            assert_eq!(f64::read_le(&buf).to_bits(), x.to_bits());
        }
    }
}
