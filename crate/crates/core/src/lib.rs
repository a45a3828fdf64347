//! Synthesis of finite-memory randomized moving strategies for recurrent
//! reachability objectives on weighted directed graphs.

pub mod chain;
pub mod error;
pub mod eval;
pub mod expr;
pub mod io;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod optimizer;
pub mod relax;
pub mod tape;

pub use error::{Error, Result};
