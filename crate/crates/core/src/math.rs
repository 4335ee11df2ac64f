//! Scalar math shims.
//!
//! The crate is `no_std`, so transcendentals come from `libm` rather than
//! the std float methods. Routing everything through this module also keeps
//! results bit-identical across platforms, which the determinism contract
//! relies on.

use crate::tensor::Real;

#[cfg(not(feature = "f32"))]
mod imp {
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    pub fn floor(x: f64) -> f64 {
        libm::floor(x)
    }
    pub fn round(x: f64) -> f64 {
        libm::round(x)
    }
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    pub fn abs(x: f64) -> f64 {
        libm::fabs(x)
    }
}

#[cfg(feature = "f32")]
mod imp {
    pub fn exp(x: f32) -> f32 {
        libm::expf(x)
    }
    pub fn ln(x: f32) -> f32 {
        libm::logf(x)
    }
    pub fn sqrt(x: f32) -> f32 {
        libm::sqrtf(x)
    }
    pub fn floor(x: f32) -> f32 {
        libm::floorf(x)
    }
    pub fn round(x: f32) -> f32 {
        libm::roundf(x)
    }
    pub fn cos(x: f32) -> f32 {
        libm::cosf(x)
    }
    pub fn sin(x: f32) -> f32 {
        libm::sinf(x)
    }
    pub fn abs(x: f32) -> f32 {
        libm::fabsf(x)
    }
}

pub fn exp(x: Real) -> Real {
    imp::exp(x)
}

pub fn ln(x: Real) -> Real {
    imp::ln(x)
}

pub fn sqrt(x: Real) -> Real {
    imp::sqrt(x)
}

pub fn floor(x: Real) -> Real {
    imp::floor(x)
}

pub fn round(x: Real) -> Real {
    imp::round(x)
}

pub fn cos(x: Real) -> Real {
    imp::cos(x)
}

pub fn sin(x: Real) -> Real {
    imp::sin(x)
}

pub fn abs(x: Real) -> Real {
    imp::abs(x)
}

/// Logistic function with saturation-safe evaluation on both tails.
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}
