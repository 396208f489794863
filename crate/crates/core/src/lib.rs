//! Non-rigid image registration for accelerated dynamic MRI, plus the
//! surrounding MR physics and motion-compensated reconstruction.
//!
//! The crate is organized around a small define-by-run tensor engine
//! ([`tensor`]), the acquisition model ([`mri`]), the registration network
//! ([`regnet`]), its self-supervised objective ([`losses`]), iterative
//! motion-compensated SENSE ([`moco`]), evaluation metrics ([`metrics`]),
//! synthetic dynamic phantoms ([`phantom`]) and the training/IO drivers
//! ([`pipeline`]).

pub mod error;
pub mod losses;
pub mod metrics;
pub mod moco;
pub mod mri;
pub mod phantom;
pub mod pipeline;
pub mod regnet;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    /// Asserts `|a - b| <= tol * max(1, |a|, |b|)`.
    pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        let scale = 1.0_f64.max(a.abs()).max(b.abs());
        assert!(
            (a - b).abs() <= tol * scale,
            "{what}: {a} vs {b} (tol {tol})"
        );
    }

    pub fn assert_slices_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        assert_eq!(a.len(), b.len(), "{what}: length mismatch");
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = 1.0_f64.max(x.abs()).max(y.abs());
            assert!(
                (x - y).abs() <= tol * scale,
                "{what}[{i}]: {x} vs {y} (tol {tol})"
            );
        }
    }
}
