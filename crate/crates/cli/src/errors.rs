use std::io::Write;

use tyrist_core::Error;

/// Failure classes and their exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    MissingFile,
    Config,
    Runtime,
}

impl ErrorClass {
    pub fn code(self) -> u8 {
        match self {
            ErrorClass::MissingFile => 2,
            ErrorClass::Config => 3,
            ErrorClass::Runtime => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::MissingFile => "missing_file",
            ErrorClass::Config => "config",
            ErrorClass::Runtime => "runtime",
        }
    }
}

pub fn classify(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorClass::MissingFile,
                Error::Config(_)
                | Error::Parse { .. }
                | Error::Validation(_)
                | Error::InvalidArgument(_)
                | Error::MissingParams(_)
                | Error::CorruptCheckpoint(_) => ErrorClass::Config,
                _ => ErrorClass::Runtime,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return ErrorClass::MissingFile;
            }
        }
    }
    ErrorClass::Runtime
}

/// The error chain joined with `: `, skipping causes whose text the
/// previous message already contains.
fn message(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if parts.last().is_none_or(|prev| !prev.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

/// One JSON line on stderr describing the failure.
pub fn report(err: &anyhow::Error, class: ErrorClass) {
    let line = serde_json::json!({
        "level": "ERROR",
        "class": class.name(),
        "exit_code": class.code(),
        "message": message(err),
    });
    let _ = writeln!(std::io::stderr(), "{line}");
}
