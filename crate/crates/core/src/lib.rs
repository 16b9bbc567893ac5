//! Named-entity dictionary detection and contextual biasing for direct
//! speech-to-text translation, on a synthetic desk-scale corpus.

pub mod biasdec;
pub mod checkpoint;
pub mod corpus;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod rescore;

pub use error::{Error, Result};
