use std::fmt::Display;

use serde::Serialize;

/// A failure reported as one JSON line on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    #[serde(rename = "error")]
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn internal(e: impl Display) -> Self {
        Self::new("internal", e.to_string())
    }

    pub fn missing(flag: &str) -> Self {
        Self::new("usage", format!("missing required option --{flag}"))
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.kind))
    }

    pub fn exit_code(&self) -> i32 {
        if matches!(self.kind, "usage" | "config") {
            2
        } else {
            1
        }
    }
}

impl From<handmesh::Error> for CliError {
    fn from(e: handmesh::Error) -> Self {
        use handmesh::Error as E;
        let kind = match &e {
            E::Io { .. } => "io",
            E::Format { .. } => "format",
            E::Dimension { .. } => "dimension",
            E::InvalidAssets(_) => "invalid-assets",
            E::NonFinite(_) => "non-finite",
            E::BehindCamera { .. } => "behind-camera",
            E::DegenerateNormalization(_) => "degenerate-normalization",
            E::Diverged { .. } => "diverged",
            E::InvalidArgument(_) => "invalid-argument",
            E::Json(_) => "json",
        };
        Self::new(kind, e.to_string())
    }
}
