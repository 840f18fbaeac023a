use std::fmt;

/// Crate-wide error type.
///
/// Variants map onto process exit codes in the CLI: `Config` → 2,
/// `Contract` and `Degenerate` → 3, `Numerical` → 4, `Io` → 2.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value; the message names the offending field.
    Config(String),
    /// A runtime precondition was violated (shape mismatch, missing input, ordering).
    Contract(String),
    /// Input is degenerate for the requested operation (zero norm, zero variance).
    Degenerate(String),
    /// Numerical failure (non-finite loss or gradient).
    Numerical(String),
    /// File IO failure with path context.
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code the CLI reports for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } => 2,
            Error::Contract(_) | Error::Degenerate(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Contract("x".into()).exit_code(), 3);
        assert_eq!(Error::Degenerate("x".into()).exit_code(), 3);
        assert_eq!(Error::Numerical("x".into()).exit_code(), 4);
        let io = Error::io("f", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(io.exit_code(), 2);
        assert!(format!("{io}").contains("f"));
    }
}
