//! The coordination-logic language: device-independent service descriptions
//! made of roles, request/event handlers, guards, and table lookups.
//!
//! ```text
//! service station_nav {
//!   role disp requires capability visual.display near user
//!   on request(destination) {
//!     disp.show(route(destination))
//!   }
//! }
//! ```
//!
//! Statements address roles, never devices; binding a role to a concrete
//! device happens later, in the planner.

mod ast;
mod lexer;
mod parser;
mod pretty;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ast::*;
pub use parser::parse;
pub use pretty::pretty_print;
pub use validate::{validate, Finding, Severity, ValidationReport};

/// The first offending position in the source; parsing does not recover.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub struct ParseError {
    pub line: u32,
    pub column: u32,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

impl ParseError {
    pub(crate) fn at(span: Span, message: impl Into<String>) -> Self {
        Self {
            line: span.line,
            column: span.column,
            message: message.into(),
        }
    }
}

/// Parses raw bytes, reporting invalid UTF-8 as a parse error at the first
/// bad byte.
pub fn parse_bytes(source: &[u8]) -> Result<CoordinationLogic, ParseError> {
    match std::str::from_utf8(source) {
        Ok(s) => parse(s),
        Err(e) => {
            let valid = std::str::from_utf8(&source[..e.valid_up_to()]).unwrap_or_default();
            let line = valid.matches('\n').count() as u32 + 1;
            let column = valid.rsplit('\n').next().map_or(0, |l| l.chars().count()) as u32 + 1;
            Err(ParseError {
                line,
                column,
                message: "invalid UTF-8".into(),
            })
        }
    }
}
