//! SHA-256 content digests used to pin artifacts.

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a text document after canonicalization: `\r\n` folded to `\n`,
/// trailing whitespace removed from every line, blank and `#` comment lines dropped.
pub fn canonical_text_digest(text: &str) -> String {
    sha256_hex(canonicalize_text(text).as_bytes())
}

pub fn canonicalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let line = line.trim_end();
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}
