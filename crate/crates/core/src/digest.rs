//! Stable configuration digests for provenance lines in reports.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Hex SHA-256 of a value's canonical JSON form. Struct fields serialize in
/// declaration order, so the digest is stable across runs.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let hash = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in hash {
        out.push_str(&format!("{:02x}", byte));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Probe {
        a: u32,
        b: f64,
    }

    #[test]
    fn digest_is_stable_and_value_sensitive() {
        let d1 = config_digest(&Probe { a: 1, b: 0.5 }).unwrap();
        let d2 = config_digest(&Probe { a: 1, b: 0.5 }).unwrap();
        let d3 = config_digest(&Probe { a: 2, b: 0.5 }).unwrap();
        assert_eq!(d1, d2);
        assert_ne!(d1, d3);
        assert_eq!(d1.len(), 64);
    }
}
