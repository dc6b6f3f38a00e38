//! External surfaces: scene files, images, metrics and sweeps.

pub mod image;
pub mod metrics;
pub mod scene;
pub mod sweep;

use std::path::Path;

use crate::error::Error;

/// TOML error with the offending line quoted, so the key is visible.
pub(crate) fn toml_error(text: &str, path: &Path, e: &toml::de::Error) -> Error {
    let message = match e.span() {
        Some(span) => {
            let lines: Vec<&str> = text.lines().collect();
            let mut line_no = text[..span.start.min(text.len())].matches('\n').count() + 1;
            // errors at end of input point past the last line; quote the last non-blank one
            while line_no > 1 && lines.get(line_no - 1).is_none_or(|l| l.trim().is_empty()) {
                line_no -= 1;
            }
            let line = lines.get(line_no - 1).map_or("", |l| l.trim());
            format!("line {line_no} `{line}`: {}", e.message())
        }
        None => e.message().to_string(),
    };
    Error::Format {
        path: path.to_path_buf(),
        message,
    }
}
