//! Fully dynamic bin packing with bounded per-event repacking.
//!
//! The engine keeps, under online insertions and deletions, a packing within
//! `(1 + O(eps))` of optimal while moving only a bounded total size of items
//! per event. Large items are handled by a dynamic rounding structure plus a
//! configuration LP; small items flow through an ordered queue structure; the
//! mixed setting couples the two through a potential function over buffer
//! bins. A verification harness re-checks every structural invariant after
//! every event and a strategy registry exposes baseline packers for
//! comparison runs.

pub mod large;
pub mod lp;
pub mod mixed;
pub mod model;
pub mod oracle;

pub mod params;
pub mod rational;
pub mod rounding;
pub mod small;
