//! IO, file formats, corpus construction, evaluation suites and the CLI
//! glue around `attredit-core`.

pub mod captioner;
pub mod checkpoint;
pub mod corpus;
pub mod evalsuite;
pub mod pngio;
pub mod report;
pub mod runconfig;
pub mod trainer;

/// FNV-1a over a byte slice; used for manifest/content hashes in logs and
/// determinism checks.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
