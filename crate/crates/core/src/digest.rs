use sha2::{Digest, Sha256};

/// Full lowercase hex SHA-256 of `data`.
pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Short digest used to tag generated code in attempt records and fix prompts.
pub fn code_digest(code: &str) -> String {
    let mut full = sha256_hex(code.as_bytes());
    full.truncate(16);
    full
}
