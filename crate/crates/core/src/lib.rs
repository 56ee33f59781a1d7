// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod quat;
pub mod skeleton;
pub mod graph;
pub mod qgcn;
pub mod smoother;
pub mod dsi;
pub mod io;
pub mod cli;
