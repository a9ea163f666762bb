//! Counter-based random streams for trials.
//!
//! A trial owns one stream; each factor inside a trial starts at its own block
//! of the keystream, so adding factors or trials never shifts the draws of
//! the others.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Generator positioned at the start of the whole stream.
    pub fn rng(&self) -> ChaCha20Rng {
        self.substream(0)
    }

    /// Generator for sub-block `block` (2³² words each).
    pub fn substream(&self, block: u32) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(u128::from(block) << 32);
        rng
    }
}
