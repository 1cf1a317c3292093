//! Stable feature hashing.
//!
//! 64-bit FNV-1a over the UTF-8 feature name, a `0xff` separator byte, and
//! the raw value's 8 little-endian bytes. Offset basis `0xcbf29ce484222325`,
//! prime `0x100000001b3`. The result is reduced modulo the vocabulary size.

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(FNV_OFFSET_BASIS, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub(crate) fn feature_hash(feature: &str, raw: u64) -> u64 {
    fnv1a(feature.bytes().chain(std::iter::once(0xff)).chain(raw.to_le_bytes()))
}

/// Maps `(feature, raw)` to a row in `[0, vocab_size)`. A vocabulary of size
/// zero is treated as size one.
pub fn hash_index(feature: &str, raw: u64, vocab_size: u64) -> u64 {
    feature_hash(feature, raw) % vocab_size.max(1)
}
