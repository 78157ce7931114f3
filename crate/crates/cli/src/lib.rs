//! Library side of the `edgegrad` command-line tool: configs and the four
//! subcommands, callable from tests without spawning a process.

pub mod commands;
pub mod config;

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    /// Bad or unreadable config, unknown loss or parameter.
    Config,
    /// IO while writing results, divergence, non-finite numbers.
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: FailureKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Config => 1,
            FailureKind::Runtime => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) trait Classify<T> {
    fn config(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            kind: FailureKind::Config,
            error: e.into(),
        })
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError {
            kind: FailureKind::Runtime,
            error: e.into(),
        })
    }
}
