// `!(x > 0.0)` is used on purpose so NaN is rejected; dense numeric kernels
// read more clearly with explicit indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod certify;
pub mod control;
pub mod dynamics;
pub mod poly;
pub mod qp;
pub mod scenario;
pub mod sdp;
pub mod sim;
pub mod sos;
pub mod synth;
