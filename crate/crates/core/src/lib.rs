pub mod basetx;
pub mod encoder;
pub mod episodes;
pub mod evalrig;
pub mod error;
pub mod losses;
pub mod membank;
pub mod ndkernel;
pub mod query;
pub mod trainer;

pub use error::{Error, Result};
