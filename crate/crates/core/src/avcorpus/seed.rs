use sha2::{Digest, Sha256};

/// Order-independent item seed: the first 8 bytes of
/// `SHA-256("{global_seed}:{a}:{b}")`, read little-endian.
pub fn stable_seed(global_seed: u64, a: &str, b: &str) -> u64 {
    let digest = Sha256::digest(format!("{global_seed}:{a}:{b}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
