//! FNV-1a hashing over token sequences.
//!
//! Token sequences are serialized as 4-byte little-endian ids, concatenated.
//! The 32-bit variant seeds the sampler; the 64-bit variant keys caches and
//! prefill groups.

use crate::Token;

pub const FNV32_OFFSET: u32 = 2_166_136_261;
pub const FNV32_PRIME: u32 = 16_777_619;
pub const FNV64_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV64_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming 64-bit FNV-1a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self(FNV64_OFFSET)
    }
}

impl Fnv64 {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV64_PRIME);
        }
    }

    #[inline]
    pub fn write_token(&mut self, token: Token) {
        self.write(&token.0.to_le_bytes());
    }

    pub fn write_tokens(&mut self, tokens: &[Token]) {
        for &t in tokens {
            self.write_token(t);
        }
    }

    /// Length-prefixed write, so adjacent fields cannot alias each other.
    pub fn write_field(&mut self, bytes: &[u8]) {
        self.write(&(bytes.len() as u64).to_le_bytes());
        self.write(bytes);
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// Streaming 32-bit FNV-1a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fnv32(u32);

impl Default for Fnv32 {
    fn default() -> Self {
        Self(FNV32_OFFSET)
    }
}

impl Fnv32 {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u32::from(b);
            self.0 = self.0.wrapping_mul(FNV32_PRIME);
        }
    }

    pub fn write_tokens(&mut self, tokens: &[Token]) {
        for &t in tokens {
            self.write(&t.0.to_le_bytes());
        }
    }

    pub fn finish(&self) -> u32 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv64::new();
    h.write(bytes);
    h.finish()
}

pub fn fnv1a64_tokens(tokens: &[Token]) -> u64 {
    let mut h = Fnv64::new();
    h.write_tokens(tokens);
    h.finish()
}

pub fn fnv1a32_tokens(tokens: &[Token]) -> u32 {
    let mut h = Fnv32::new();
    h.write_tokens(tokens);
    h.finish()
}

/// Sampler seed for a prompt: 32-bit FNV-1a of the serialized tokens.
pub fn prompt_seed(tokens: &[Token]) -> u32 {
    fnv1a32_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Byte-at-a-time reference written straight from the FNV-1a definition,
    // kept separate from the streaming implementation above.
    fn reference32(bytes: &[u8]) -> u32 {
        let mut h: u32 = 0x811c_9dc5;
        for b in bytes {
            h = (h ^ *b as u32).wrapping_mul(0x0100_0193);
        }
        h
    }

    fn reference64(bytes: &[u8]) -> u64 {
        let mut h: u64 = 14_695_981_039_346_656_037;
        for b in bytes {
            h = (h ^ *b as u64).wrapping_mul(1_099_511_628_211);
        }
        h
    }

    fn serialize(tokens: &[u32]) -> Vec<u8> {
        tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
    }

    #[test]
    fn known_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
        let mut h = Fnv32::new();
        h.write(b"a");
        assert_eq!(h.finish(), 0xe40c292c);
    }

    #[test]
    fn empty_prompt_seed_is_offset_basis() {
        assert_eq!(prompt_seed(&[]), 2_166_136_261);
    }

    #[test]
    fn single_token_seed_matches_reference() {
        assert_eq!(prompt_seed(&[Token(1)]), reference32(&[1, 0, 0, 0]));
    }

    #[test]
    fn permuted_tokens_give_different_seed() {
        let a = [Token(5), Token(9), Token(1234)];
        let b = [Token(1234), Token(9), Token(5)];
        assert_eq!(prompt_seed(&a), reference32(&serialize(&[5, 9, 1234])));
        assert_eq!(prompt_seed(&b), reference32(&serialize(&[1234, 9, 5])));
        assert_ne!(prompt_seed(&a), prompt_seed(&b));
    }

    #[test]
    fn token_hash_matches_reference() {
        let toks = [Token(7), Token(8), Token(9), Token(70_000)];
        assert_eq!(
            fnv1a64_tokens(&toks),
            reference64(&serialize(&[7, 8, 9, 70_000]))
        );
    }
}
