//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`stream`], which derives an
//! independent ChaCha8 stream from a root seed, a [`Purpose`] and an index
//! (usually a user id or a level). ChaCha8 output and the stream derivation
//! are platform independent, so a seed pins every artifact bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    ClusterCenters = 1,
    ItemSemantic = 2,
    ItemRanking = 3,
    UserPermutation = 4,
    UserHistory = 5,
    Codebook = 6,
    KMeans = 7,
    Lsh = 8,
    Attention = 9,
    Replay = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(((purpose as u64) << 56) ^ splitmix64(index)));
    rng
}
