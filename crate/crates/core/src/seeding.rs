//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! run seed, so switching one component off never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

pub mod streams {
    pub const DATASET: u64 = 0;
    pub const TEACHER_INIT: u64 = 1;
    pub const STUDENT_INIT: u64 = 2;
    pub const LABELED_BATCHES: u64 = 3;
    pub const PSEUDO_ICS: u64 = 4;
    pub const TEACHER_NOISE: u64 = 5;
    pub const AUGMENTATION: u64 = 6;
    pub const ORACLE: u64 = 7;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Serializable position of a stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPos {
    pub seed: u64,
    pub stream: u64,
    /// Word position as a decimal string; it is a 68-bit counter.
    pub word_pos: String,
}

impl StreamPos {
    pub fn capture(seed: u64, rng: &Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<Rng> {
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut rng = stream(self.seed, self.stream);
        rng.set_word_pos(pos);
        Some(rng)
    }
}
