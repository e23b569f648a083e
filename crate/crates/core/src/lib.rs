// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clinical;
pub mod data_io;
pub mod metrics;
mod numfmt;
pub mod phantom;
pub mod preprocess;
pub mod reconstruct;
pub mod tensor;
pub mod training;
pub mod unet;
