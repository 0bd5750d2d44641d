//! Stable 64-bit hashing for seeds and configuration fingerprints.
//!
//! FNV-1a over an explicit byte encoding; the output never depends on the
//! platform or the compiler version.

const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy)]
pub struct StableHasher(u64);

impl Default for StableHasher {
    fn default() -> Self {
        StableHasher(OFFSET)
    }
}

impl StableHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(mut self, bytes: &[u8]) -> Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(PRIME);
        }
        self
    }

    pub fn u64(self, v: u64) -> Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(self, v: f64) -> Self {
        self.u64(v.to_bits())
    }

    pub fn str(self, s: &str) -> Self {
        self.u64(s.len() as u64).bytes(s.as_bytes())
    }

    /// Finishes with a splitmix64 avalanche so nearby inputs give unrelated
    /// seeds.
    pub fn finish(self) -> u64 {
        mix64(self.0)
    }
}

pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_across_calls_and_sensitive_to_input() {
        let a = StableHasher::new().u64(7).str("mtl").finish();
        let b = StableHasher::new().u64(7).str("mtl").finish();
        let c = StableHasher::new().u64(8).str("mtl").finish();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Pinned so that seeds in persisted CSVs stay valid across releases.
        assert_eq!(StableHasher::new().finish(), mix64(OFFSET));
    }
}
