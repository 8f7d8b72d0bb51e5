//! Seeded random streams.
//!
//! Every source of randomness is a ChaCha8 stream keyed by the experiment
//! seed plus a [`StreamKey`]. Two different keys never share a stream, so a
//! run can be replayed piecewise (data only, compression only) and parallel
//! tasks never contend for a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for inside a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Data = 1,
    Compression = 2,
    Problem = 3,
    MonteCarlo = 4,
    Split = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub run: u32,
    pub client: u32,
    pub role: Role,
}

impl StreamKey {
    pub fn new(run: u32, client: u32, role: Role) -> Self {
        Self { run, client, role }
    }

    fn stream_id(self) -> u64 {
        ((self.run as u64) << 32) | ((self.client as u64) << 8) | self.role as u64
    }
}

pub fn stream(seed: u64, key: StreamKey) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key.stream_id());
    rng
}

/// Convenience for tests and one-off draws.
pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
