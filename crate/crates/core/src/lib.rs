// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod params;
pub mod quadrature;
pub mod sdm;
pub mod simulate;
pub mod parallel;
pub mod sld;
pub mod estimator;
pub mod roughness;
pub mod controller;
pub mod atomic;
pub mod closed_loop;
