//! Small text utilities shared across modules.

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

/// Dedup key normalization: NFC, whitespace runs collapsed to one space, ends trimmed.
///
/// Only used for hashing. Stored paragraph text is never rewritten.
pub fn normalize_text(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for word in nfc.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Number of maximal non-whitespace runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Hex SHA-256 prefix of `bytes`, `hex_len` characters long (at most 64).
pub fn short_hash(bytes: &[u8], hex_len: usize) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s.truncate(hex_len.min(64));
    s
}

/// Stable 64-bit value derived from a string, used to seed per-item RNG streams.
pub fn stable_u64(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(buf)
}
