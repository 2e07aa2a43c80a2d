pub mod data;
pub mod error;
pub mod explain;
pub mod inference;
pub mod model;
pub mod novelty;
pub mod numerics;
pub mod objective;
pub mod taxonomy;
pub mod training;

pub use error::{HpnetError, Result};
