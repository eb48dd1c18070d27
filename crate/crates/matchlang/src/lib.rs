//! A small, loop-free expression language for subscriber matching functions.
//!
//! Subscribers submit a program as a plain string; the broker parses it once
//! at subscribe time and evaluates it against each publication payload,
//! expecting a boolean verdict. The language is total by construction: there
//! are no loops, no recursion, and no user-defined functions, so every
//! evaluation terminates. A step budget additionally bounds builtin cost on
//! large payloads, and evaluation has no access to clocks, randomness, or
//! I/O of any kind.
//!
//! A program is zero or more `let` bindings followed by a single expression.
//! The publication payload is bound to the variable `publication`:
//!
//! ```
//! let program = matchlang::parse(
//!     "let populations = {\"new zealand\": 4693000, \"germany\": 8267000}; \
//!      let places = find_keys(publication, populations); \
//!      lookup(populations, places[0], 0) > 4000000",
//! )
//! .unwrap();
//! let verdict = matchlang::evaluate(
//!     &program,
//!     "DEBS2018 will be held at the University of Waikato in New Zealand.",
//!     &matchlang::EvalLimits::default(),
//! );
//! assert_eq!(verdict, Ok(true));
//! ```
//!
//! Builtins: `lowercase(s)`, `contains(s, sub)`, `length(x)`, `split(s, sep)`,
//! `find_keys(s, map)` (map keys appearing as case-insensitive substrings of
//! `s`, in map-key sorted order), `lookup(map, key, default)`, and
//! `to_number(s, default)`.

mod ast;
mod eval;
mod parser;
mod token;

pub use ast::{BinOp, Builtin, Expr, Program, UnaryOp};
pub use eval::{evaluate, evaluate_counted, step_count, Value};
pub use parser::{parse, PUBLICATION_VAR};
pub use token::Pos;

/// Parse failure with a 1-based source position.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at line {}, column {}: {message}", pos.line, pos.col)]
pub struct ParseError {
    pub message: String,
    pub pos: Pos,
}

impl ParseError {
    pub(crate) fn new(message: impl Into<String>, pos: Pos) -> Self {
        Self { message: message.into(), pos }
    }
}

/// Evaluation failure. All variants are deterministic for a given
/// (program, payload, limits) triple.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("type error: {0}")]
    Type(String),
    #[error("step budget exceeded")]
    StepBudgetExceeded,
    #[error("index {index} out of range for list of length {len}")]
    IndexOutOfRange { index: f64, len: usize },
    #[error("constructed string of {bytes} bytes exceeds limit of {limit}")]
    StringTooLarge { bytes: usize, limit: usize },
}

/// Resource bounds for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalLimits {
    pub max_steps: u64,
    pub max_string_bytes: usize,
}

impl Default for EvalLimits {
    fn default() -> Self {
        Self { max_steps: 100_000, max_string_bytes: 1024 * 1024 }
    }
}
