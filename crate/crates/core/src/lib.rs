//! Dynamic multi-branch (DMB) transformer layers for sequence-to-sequence
//! translation, together with the sparsely-gated mixture-of-experts baseline.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense rank-≤3 tensors with tape-based reverse-mode
//!   autodiff and an instrumented multiply-accumulate counter.
//! - [`gating`] — the DMB top-1 gating unit, the noisy top-k MoE gate,
//!   and the diversity/entropy auxiliary losses.
//! - [`layers`] — plain/DMB/MoE feed-forward and multi-head attention
//!   sub-layers, shared-private reparameterization, and folding.
//! - [`model`] — encoder/decoder assembly, presets, and the combined
//!   training loss.
//! - [`corpus`] — toy task generation, vocabularies, and batching.
//! - [`train`] — Adam with inverse-square-root warmup, the training loop,
//!   and checkpoint averaging.
//! - [`decode`] — greedy and beam search with length penalty, plus BLEU.
//! - [`costs`] — analytic parameter / Mult-Adds / PTR accounting and
//!   int8 weight quantization.
//!
//! The crate is `no_std` (with `alloc`); everything that touches files,
//! clocks, or a terminal lives in the companion `dmb-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corpus;
pub mod costs;
pub mod decode;
pub mod gating;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

/// Scalar type used for all numerics. `f32` by default; the `f64` feature
/// switches the whole crate to double precision for gradient checking.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

/// Math shims that work in `no_std` (dispatching to `libm`).
pub(crate) mod math {
    use super::Real;

    #[cfg(not(feature = "f64"))]
    mod imp {
        pub use libm::{cosf as cos, expf as exp, logf as log, powf as pow, sinf as sin,
                       sqrtf as sqrt};
    }
    #[cfg(feature = "f64")]
    mod imp {
        pub use libm::{cos, exp, log, pow, sin, sqrt};
    }

    #[inline]
    pub fn exp(x: Real) -> Real {
        imp::exp(x)
    }
    #[inline]
    pub fn ln(x: Real) -> Real {
        imp::log(x)
    }
    #[inline]
    pub fn sqrt(x: Real) -> Real {
        imp::sqrt(x)
    }
    #[inline]
    pub fn powf(x: Real, y: Real) -> Real {
        imp::pow(x, y)
    }
    #[inline]
    pub fn sin(x: Real) -> Real {
        imp::sin(x)
    }
    #[inline]
    pub fn cos(x: Real) -> Real {
        imp::cos(x)
    }
}
