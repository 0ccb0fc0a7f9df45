//! Deterministic random streams.
//!
//! A single root seed fans out into named streams indexed by an integer
//! (typically the optimizer step or an example offset), so changing how
//! one stream is consumed never shifts another. Because every stream is a
//! pure function of `(root, name, index...)`, resuming from a step counter
//! reproduces the exact randomness of an uninterrupted run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named randomness domains used by the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    DataOrder,
    Timestep,
    Rho,
    Masking,
    Selection,
    Regime,
    Dropout,
    Init,
    Decode,
    Analysis,
    Corpus,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::DataOrder => 0x6461_7461,
            Stream::Timestep => 0x7469_6d65,
            Stream::Rho => 0x0072_686f,
            Stream::Masking => 0x6d61_736b,
            Stream::Selection => 0x0073_656c,
            Stream::Regime => 0x7265_6769,
            Stream::Dropout => 0x6472_6f70,
            Stream::Init => 0x696e_6974,
            Stream::Decode => 0x6465_636f,
            Stream::Analysis => 0x616e_616c,
            Stream::Corpus => 0x636f_7270,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for `stream` at the given index path below `root`.
pub fn stream(root: u64, which: Stream, path: &[u64]) -> StreamRng {
    let mut h = splitmix(root ^ splitmix(which.tag()));
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x5151)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
