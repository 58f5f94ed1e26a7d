//! Mapping from failures to process exit codes.

use std::fmt;

/// Nonzero exit classes. Success is `0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    /// I/O or any other unexpected failure.
    Failure,
    /// Malformed config, tensor file, weights file or argument.
    Parse,
    /// Well-formed inputs whose shapes disagree with each other or the config.
    Shape,
    /// A check the command exists to perform did not pass.
    Check,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        match self {
            ExitClass::Failure => 1,
            ExitClass::Parse => 2,
            ExitClass::Shape => 3,
            ExitClass::Check => 4,
        }
    }
}

/// An error that carries its exit class explicitly.
#[derive(Debug)]
pub struct Classified {
    pub class: ExitClass,
    pub message: String,
}

impl fmt::Display for Classified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Classified {}

pub fn fail(class: ExitClass, message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Classified {
        class,
        message: message.into(),
    })
}

/// The first classifiable cause in the chain decides the class.
pub fn classify(err: &anyhow::Error) -> ExitClass {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Classified>() {
            return c.class;
        }
        if let Some(e) = cause.downcast_ref::<agfusion::Error>() {
            return match e {
                agfusion::Error::Format { .. } => ExitClass::Parse,
                agfusion::Error::Contract { .. } | agfusion::Error::WindowSize { .. } => ExitClass::Shape,
                agfusion::Error::Io(_) => ExitClass::Failure,
            };
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return ExitClass::Parse;
        }
    }
    ExitClass::Failure
}
