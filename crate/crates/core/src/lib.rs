//! Text-based voice editing: a masked-infilling acoustic model with
//! utterance-level conditioning, the feature pipeline around it, and the
//! edit/splice machinery that puts synthesized words back into a recording.

pub mod audio;
pub mod conditioning;
pub mod corpus;
pub mod editing;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod frontend;
pub mod fsutil;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
