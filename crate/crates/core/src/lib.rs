pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod metrics;
pub mod netgrid;
pub mod numcore;
pub mod par;
pub mod pretrain;
pub mod rewardirl;
pub mod rmft;
pub mod synthgen;
pub mod tokenizer;
pub mod trajmodel;

pub use error::{Error, Result};
