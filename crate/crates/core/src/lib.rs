//! Factual-consistency rewards and a memory-driven report generator for
//! radiology report generation.

pub mod diffmath;
pub mod error;

pub use error::{Error, Result};
pub mod simscore;
pub mod textproc;
pub mod nli;
pub mod rewards;
pub mod corpus;
pub mod cliniceval;
pub mod nlipairs;
pub mod m2trans;
pub mod trainer;
pub mod cli;
