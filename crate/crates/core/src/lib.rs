//! Correctly aligned windows for diffusion along a normally hyperbolic
//! cylinder.
//!
//! The crate builds chains of windows near a cylinder with a twist map,
//! certifies their alignment under iterates of a benchmark normal form,
//! schedules the iterate counts that make the chain work, and extracts an
//! orbit that drifts in the action variable.

// `!(x > 0.0)` guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod config;
pub mod interval;
pub mod maps;
pub mod model;
pub mod orbit;
pub mod schedule;
pub mod sweep;
pub mod twist;
pub mod window;

pub use alignment::{
    alignment_margin_stability, check_alignment, check_block_alignment, check_product_alignment,
    AlignError, AlignMode, AlignmentReport, Witness,
};
pub use maps::{AffineMap, AlignMap, Compose, Iterate, MapError, Step};
pub use model::{transit_maps, Excursion, ExtendedMap, GlueMatrices, HomoclinicJump, ModelError, NormalForm, Transit};
pub use twist::{measure_shear, shear_bounds, ShearBounds, ShearMeasurement, ShearParams, TwistMap};
pub use window::{AffineChart, Axis, Membership, Rectangle, Window, WindowError};
