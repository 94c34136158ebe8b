pub mod autodiff;
pub mod cli;
pub mod error;
pub mod flow;
pub mod ipa;
pub mod lie;
pub mod net;
pub mod policy;
pub mod tasks;

pub use error::{Error, Result};
