use std::fmt;

use nngp::ErrorKind;

/// Exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Validation,
    Numerical,
    Io,
}

impl Class {
    pub fn code(self) -> i32 {
        match self {
            Class::Validation => 2,
            Class::Numerical => 3,
            Class::Io => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: Class,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { class: Class::Validation, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { class: Class::Io, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Walks the error chain for the first recognizable cause.
pub fn classify(err: &anyhow::Error) -> Class {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.class;
        }
        if let Some(e) = cause.downcast_ref::<nngp::Error>() {
            return match e.kind() {
                ErrorKind::Validation => Class::Validation,
                ErrorKind::Numerical => Class::Numerical,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Class::Io;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() { Class::Io } else { Class::Validation };
        }
    }
    Class::Validation
}
