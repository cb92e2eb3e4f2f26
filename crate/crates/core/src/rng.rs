//! Counter-based random streams.
//!
//! Every draw is addressed by `(master seed, stream, index)`, so work items can
//! be generated in any order (or in parallel) and still reproduce bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    WorldParams,
    PromptNoise,
    Prior,
    TrainSet,
    HeldOutSet,
    Trainer,
    Probe,
    Diagnosis,
    KeypointTargets,
    CtRound(u32),
    CtMonitor,
    CtEvaluation,
    Custom(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::WorldParams => 1,
            Stream::PromptNoise => 2,
            Stream::Prior => 3,
            Stream::TrainSet => 4,
            Stream::HeldOutSet => 5,
            Stream::Trainer => 6,
            Stream::Probe => 7,
            Stream::Diagnosis => 8,
            Stream::KeypointTargets => 9,
            Stream::CtMonitor => 10,
            Stream::CtEvaluation => 11,
            Stream::CtRound(r) => 0x1000_0000 + r as u64,
            Stream::Custom(c) => 0x8000_0000_0000_0000 | c,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, stream, index)` cell.
pub fn derive(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ stream.id()) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}

pub fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
