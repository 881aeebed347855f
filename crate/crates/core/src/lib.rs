//! A learning-by-asking laboratory: a synthetic scene universe, a typed
//! question-program oracle and the interactive asking loop.

pub mod cli;
pub mod features;
pub mod harness;
pub mod learners;
pub mod oracle;
pub mod program;
pub mod proposal;
pub mod selection;
pub mod universe;
