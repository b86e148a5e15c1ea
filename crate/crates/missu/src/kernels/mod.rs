//! Hand-written numerical kernels behind the autodiff tape.
//!
//! Every kernel is a pure function of its inputs with a fixed summation
//! order; parallel kernels split over disjoint output regions only, so
//! results are bit-identical regardless of thread count.

pub mod conv;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod resample;
