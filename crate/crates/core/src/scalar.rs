//! Scalar abstraction and deterministic transcendental functions.
//!
//! All transcendentals route through `libm`'s f64 implementations so that
//! probability tables built on different platforms are bit-identical. The
//! std equivalents may differ between libc versions, which would silently
//! desynchronize encoder and decoder.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type the tensor math is generic over: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}

const LN_2: f64 = std::f64::consts::LN_2;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn exp<T: Real>(x: T) -> T {
    T::from_f64_lossy(libm::exp(x.into_f64()))
}

#[inline]
pub fn ln<T: Real>(x: T) -> T {
    T::from_f64_lossy(libm::log(x.into_f64()))
}

#[inline]
pub fn log2<T: Real>(x: T) -> T {
    T::from_f64_lossy(libm::log2(x.into_f64()))
}

#[inline]
pub fn tanh<T: Real>(x: T) -> T {
    T::from_f64_lossy(libm::tanh(x.into_f64()))
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // 0.5*(1+tanh(x/2)) avoids overflow for large |x|.
    T::from_f64_lossy(0.5 * (1.0 + libm::tanh(0.5 * x.into_f64())))
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    let x = x.into_f64();
    let y = if x > 30.0 {
        x
    } else if x < -30.0 {
        libm::exp(x)
    } else {
        libm::log1p(libm::exp(x))
    };
    T::from_f64_lossy(y)
}

/// Inverse of `softplus` on positive inputs.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        libm::log(libm::expm1(y))
    }
}

/// Standard normal CDF Φ(x).
#[inline]
pub fn std_normal_cdf<T: Real>(x: T) -> T {
    T::from_f64_lossy(0.5 * libm::erfc(-x.into_f64() * FRAC_1_SQRT_2))
}

/// Standard normal survival function 1 − Φ(x), accurate in the right tail.
#[inline]
pub fn std_normal_sf<T: Real>(x: T) -> T {
    T::from_f64_lossy(0.5 * libm::erfc(x.into_f64() * FRAC_1_SQRT_2))
}

/// Standard normal density φ(x).
#[inline]
pub fn std_normal_pdf<T: Real>(x: T) -> T {
    let x = x.into_f64();
    T::from_f64_lossy(INV_SQRT_2PI * libm::exp(-0.5 * x * x))
}

/// Mass of a standard normal on the interval `[lo, hi]`.
///
/// Mirrored onto the tail with the smaller magnitude so the subtraction
/// happens between survival-function values, which keeps small masses
/// accurate and makes the result exactly symmetric under negation.
pub fn std_normal_interval<T: Real>(lo: T, hi: T) -> T {
    let (lo, hi) = (lo.into_f64(), hi.into_f64());
    debug_assert!(lo <= hi);
    let p = if lo + hi >= 0.0 {
        0.5 * (libm::erfc(lo * FRAC_1_SQRT_2) - libm::erfc(hi * FRAC_1_SQRT_2))
    } else {
        0.5 * (libm::erfc(-hi * FRAC_1_SQRT_2) - libm::erfc(-lo * FRAC_1_SQRT_2))
    };
    T::from_f64_lossy(p.max(0.0))
}

#[inline]
pub fn neg_log2(p: f64) -> f64 {
    -libm::log2(p)
}

#[inline]
pub fn ln_2() -> f64 {
    LN_2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_values() {
        // Known table values of Φ.
        assert!((std_normal_cdf(0.0f64) - 0.5).abs() < 1e-15);
        assert!((std_normal_cdf(0.5f64) - 0.691_462_461_274_013_1).abs() < 1e-12);
        assert!((std_normal_cdf(-1.0f64) - 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn interval_mass_is_symmetric() {
        let a = std_normal_interval(0.5f64, 1.5f64);
        let b = std_normal_interval(-1.5f64, -0.5f64);
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for &y in &[0.05, 0.7, 3.0, 40.0] {
            let x = softplus_inv(y);
            assert!((softplus::<f64>(x) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn works_at_f32() {
        let p: f32 = std_normal_interval(-0.5f32, 0.5f32);
        assert!((p - 0.382_92).abs() < 1e-4);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-6);
    }
}
