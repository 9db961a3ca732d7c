#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::result_large_err, clippy::too_many_arguments)]

pub mod diminishing;
pub mod linalg;
pub mod model;
pub mod norm;
pub mod ode;
pub mod output;
pub mod quad;
pub mod scenario;
pub mod signal;
pub mod simulate;
pub mod synthesis;
pub mod verify;
