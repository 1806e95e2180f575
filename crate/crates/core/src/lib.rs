//! Minimum Hellinger distance estimation for parametric superpopulation
//! models observed through complex survey designs.
//!
//! The estimator smooths the sample with a Horvitz–Thompson weighted kernel
//! density estimate and picks the parametric density with the largest
//! Hellinger affinity to it. The crate also carries the design machinery,
//! asymptotic inference, influence diagnostics and a Monte-Carlo laboratory.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Reference constants are quoted with all the digits of their source.
#![allow(clippy::excessive_precision)]

pub mod designs;
pub mod error;
pub mod families;
pub mod inference;
pub mod kde;
pub mod linalg;
pub mod mhde;
pub mod quadrature;
pub mod robustness;
pub mod simlab;
pub mod special;

pub use designs::{DesignKind, DesignSpec, Population, SurveySample};
pub use error::{Error, Result};
pub use families::{Family, Theta};
pub use kde::{BandwidthRule, HtKde, Kernel, KernelKind};
pub use mhde::{MhdeFit, MhdeOptions};
pub use quadrature::{Integral, QuadGrid};
