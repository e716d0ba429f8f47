pub mod alloc;
pub mod alp;
pub mod corpus;
pub mod error;
pub mod mlm;
pub mod pipeline;
pub mod softmax;
pub mod synthetic;
pub mod unigram;

pub use error::{Error, Result};
