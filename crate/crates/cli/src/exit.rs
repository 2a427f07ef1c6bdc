//! Exit codes and the one-line error report written to stderr.
//!
//! | code | kind                                   |
//! |------|----------------------------------------|
//! | 0    | success                                |
//! | 1    | invalid-config, invalid-input, usage   |
//! | 2    | missing-artifact                       |
//! | 3    | numerical, gradcheck-failed            |
//! | 4    | port-busy, io, internal                |

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub kind: &'static str,
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, code: i32, message: impl Into<String>) -> Self {
        Self {
            kind,
            code,
            message: message.into(),
        }
    }

    pub fn invalid_config(message: impl Into<String>) -> Self {
        Self::new("invalid-config", 1, message)
    }

    /// `{"error":kind,"code":n,"message":...}` on one line.
    pub fn line(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "code": self.code,
            "message": self.message.replace('\n', " "),
        })
        .to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for Failure {}

fn from_core(e: &pbarl::Error, message: String) -> Failure {
    use pbarl::Error as E;
    if e.is_missing_artifact() {
        return Failure::new("missing-artifact", 2, message);
    }
    if e.is_numerical() {
        return Failure::new("numerical", 3, message);
    }
    match e {
        E::InvalidConfig(_) | E::Env(_) => Failure::new("invalid-config", 1, message),
        E::Format { .. } => Failure::new("invalid-input", 1, message),
        E::Io { .. } => Failure::new("io", 4, message),
        _ => Failure::new("internal", 4, message),
    }
}

pub fn classify(err: &anyhow::Error) -> Failure {
    let message = format!("{err:#}");
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.clone();
        }
        if let Some(e) = cause.downcast_ref::<pbarl::Error>() {
            return from_core(e, message);
        }
    }
    Failure::new("internal", 4, message)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_codes() {
        let cases = [
            (pbarl::Error::InvalidConfig("x".into()), 1),
            (pbarl::Error::MissingArtifact("f".into()), 2),
            (pbarl::Error::Numerical("nan".into()), 3),
            (
                pbarl::Error::Format {
                    path: "p".into(),
                    line: 3,
                    message: "bad".into(),
                },
                1,
            ),
        ];
        for (e, code) in cases {
            assert_eq!(classify(&anyhow::Error::new(e)).code, code);
        }
        let wrapped = anyhow::Error::new(pbarl::Error::MissingArtifact("f".into())).context("loading");
        assert_eq!(classify(&wrapped).kind, "missing-artifact");
        assert_eq!(classify(&anyhow::anyhow!("boom")).code, 4);
    }

    #[test]
    fn error_line_is_single_line_json() {
        let f = Failure::new("invalid-input", 1, "line 1\nline 2");
        let line = f.line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "invalid-input");
        assert_eq!(v["code"], 1);
    }
}
