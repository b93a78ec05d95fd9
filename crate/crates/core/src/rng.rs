//! Seed derivation. Every random draw in a run comes from a ChaCha stream
//! derived from the master seed and a purpose tag, so that runs are
//! reproducible and independent of event interleaving.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Purpose tags for derived RNG streams.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Arrivals(u32),
    KernelSynth(u32, u32),
    InstanceNoise(u32),
    SyncCost,
    TightSelection,
    UrgencyNoise(u32),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Arrivals(c) => 0x01_0000_0000 | c as u64,
            Stream::KernelSynth(c, t) => 0x02_0000_0000 | (c as u64) << 16 | t as u64,
            Stream::InstanceNoise(c) => 0x03_0000_0000 | c as u64,
            Stream::SyncCost => 0x04_0000_0000,
            Stream::TightSelection => 0x05_0000_0000,
            Stream::UrgencyNoise(c) => 0x06_0000_0000 | c as u64,
        }
    }
}

/// splitmix64, the standard seed mixer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: Stream) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix(master ^ mix(stream.tag())))
}
