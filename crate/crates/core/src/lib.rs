#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(a > b)` also rejects NaN

pub mod config;
pub mod geometry;
pub mod lowlevel;
pub mod numeric;
pub mod oracle;
pub mod protocol;
pub mod sim;
pub mod trajectory;
pub mod upperlevel;
