use std::fmt;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INPUT: i32 = 2;
    pub const BACKEND: i32 = 3;
    pub const USAGE: i32 = 64;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: exit::INPUT, message: message.into() }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self { code: exit::BACKEND, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: exit::USAGE, message: message.into() }
    }

    pub fn io(path: &std::path::Path, err: impl fmt::Display) -> Self {
        Self::input(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<regionedit::Error> for CliError {
    fn from(e: regionedit::Error) -> Self {
        use regionedit::Error as E;
        match e {
            E::Backend { .. } | E::AllStepsSkipped | E::AllCandidatesFailed => Self::backend(e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
