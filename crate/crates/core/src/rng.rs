use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for one named purpose under a run seed.
///
/// Streams keep independent consumers (shuffling, dropout, negatives, ...)
/// from perturbing each other when one of them draws more numbers.
pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes several integers into one seed (splitmix64 finalizer).
pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub(crate) mod streams {
    pub const SPLIT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const SGNS_INIT: u64 = 3;
    pub const SGNS_TRAIN: u64 = 4;
    pub const PARAM_INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const NEGATIVES: u64 = 7;
    pub const DROPOUT: u64 = 8;
    pub const TELEMETRY: u64 = 9;
    pub const BASELINE: u64 = 10;
    pub const EVAL_PAIRING: u64 = 11;
}
