use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere a seed is accepted. ChaCha output is stable
/// across platforms and crate releases, which keeps artifacts reproducible.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from `(seed, stream, index)` with a
/// splitmix64 finalizer.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child(seed: u64, stream: u64, index: u64) -> Rng {
    seeded(derive_seed(seed, stream, index))
}

// Stream tags keep derived seeds for different purposes apart.
pub(crate) mod stream {
    pub const EXAMPLE: u64 = 1;
    pub const SPARSIFY: u64 = 2;
    pub const PERMUTE: u64 = 3;
    pub const ORACLE_BASIS: u64 = 10;
    pub const ORACLE_ROW: u64 = 11;
    pub const ORACLE_RESPONSE: u64 = 12;
    pub const SHUFFLE: u64 = 20;
    pub const SPLIT: u64 = 21;
    pub const FOLDS: u64 = 22;
    pub const PROBE_INIT: u64 = 23;
    pub const MINIBATCH: u64 = 24;
    pub const RANDOM_BASIS: u64 = 30;
    pub const NULL_MODEL: u64 = 31;
}
