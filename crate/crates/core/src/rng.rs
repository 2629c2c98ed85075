//! Deterministic random streams.
//!
//! Every randomized routine receives an [`RngStream`]: a `(master_seed,
//! stream_id)` pair that expands to a ChaCha8 generator. Nested work (trees
//! inside a forest, replications inside a sweep) derives child streams with
//! [`RngStream::child`], so results never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

pub fn derive_stream(master_seed: u64, stream_id: u64) -> RngStream {
    RngStream {
        master_seed,
        stream_id,
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        derive_stream(master_seed, stream_id)
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Child stream `id` of this stream. The child's master seed mixes both
    /// parent coordinates, so children of different parents do not collide.
    pub fn child(&self, id: u64) -> RngStream {
        let mixed = splitmix64(self.master_seed ^ splitmix64(self.stream_id.wrapping_add(1)));
        RngStream::new(mixed, id)
    }
}
