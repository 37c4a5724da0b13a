pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval_select;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
