//! Seeded hash family mapping weight addresses to sketch columns.
//!
//! Each sketch row owns one member of the family. A member is a SplitMix-style
//! avalanche finalizer keyed by a per-row seed; the 64-bit output is reduced
//! to `[0, columns)` with a multiply-shift, avoiding modulo bias. Everything
//! is stateless and reproducible across platforms: the same master seed
//! always yields the same index streams.

/// SplitMix64 finalizer (Stafford's Mix13 constants).
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// One independent hash function per sketch row, derived from a master seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashFamily {
    seeds: Vec<u64>,
    /// Identity-mod mapping for tests: `addr % columns`, ignoring seeds.
    test_mode: bool,
}

impl HashFamily {
    /// Derives `rows` per-row seeds by walking the SplitMix64 stream from
    /// `master_seed`. Distinct rows always get distinct stream positions.
    pub fn new(master_seed: u64, rows: usize, test_mode: bool) -> Self {
        let seeds = (1..=rows as u64)
            .map(|i| mix64(master_seed.wrapping_add(i.wrapping_mul(GOLDEN_GAMMA))))
            .collect();
        HashFamily { seeds, test_mode }
    }

    pub fn rows(&self) -> usize {
        self.seeds.len()
    }

    /// Column index for `addr` in `row`, in `[0, columns)`.
    ///
    /// The per-row seed offsets the SplitMix64 stream, so rows behave as
    /// independent hash functions over the same address space. The final
    /// multiply-shift keeps the high (well-mixed) bits.
    #[inline]
    pub fn index(&self, row: usize, addr: u64, columns: u32) -> u32 {
        debug_assert!(row < self.seeds.len());
        debug_assert!(columns >= 1);
        if self.test_mode {
            return (addr % u64::from(columns)) as u32;
        }
        let h = mix64(self.seeds[row].wrapping_add(addr.wrapping_mul(GOLDEN_GAMMA)));
        (((u128::from(h)) * u128::from(columns)) >> 64) as u32
    }
}
