//! Counter-based seeding.
//!
//! A [`SeedSpec`] keys a ChaCha8 keystream: the master seed selects the key,
//! the stream id selects the 64-bit ChaCha stream, and draws within a stream
//! advance the block counter. Every increment is therefore a pure function of
//! `(master_seed, stream_id, position)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

/// splitmix64 finaliser.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    pub fn with_stream(self, stream_id: u64) -> Self {
        Self { stream_id, ..self }
    }

    /// A sub-seed with an independent key. The stream id is kept, so an
    /// ensemble can derive per-role seeds and still index members by stream.
    pub fn derive(self, tag: u64) -> Self {
        Self {
            master_seed: mix64(self.master_seed ^ mix64(tag.wrapping_add(0x5eed))),
            stream_id: self.stream_id,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}
