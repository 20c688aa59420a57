//! Scalar transcendental functions: the platform implementations when `std`
//! is available, `libm` otherwise.

#[cfg(feature = "std")]
mod imp {
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    pub fn tanh(x: f64) -> f64 {
        // 1 - 2 / (e^{2x} + 1), saturating cleanly for large |x|.
        if x > 20.0 {
            1.0
        } else if x < -20.0 {
            -1.0
        } else {
            1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
        }
    }
    pub fn sqrt(x: f64) -> f64 {
        x.sqrt()
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn tanh(x: f64) -> f64 {
        libm::tanh(x)
    }
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
}

pub use imp::*;
