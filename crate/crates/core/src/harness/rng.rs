//! Independent random streams derived from one master seed.
//!
//! Each consumer gets its own ChaCha stream so that, for a fixed seed, every
//! method sees the same model init, the same minibatch order and the same δ⁰
//! draws regardless of how many numbers another consumer used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Dataset,
    ModelInit,
    DataOrder,
    Perturbation,
}

impl Stream {
    fn label(self) -> u64 {
        match self {
            Stream::Dataset => 1,
            Stream::ModelInit => 2,
            Stream::DataOrder => 3,
            Stream::Perturbation => 4,
        }
    }
}

pub fn stream_rng(master_seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream.label());
    rng
}
