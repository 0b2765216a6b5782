//! Per-replica random streams.
//!
//! Every replica draws from its own ChaCha8 stream: the experiment seed keys
//! the cipher and the replica index selects the stream, so replicas are
//! independent, order-free and reproducible without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ReplicaRng = ChaCha8Rng;

pub fn replica_rng(seed: u64, replica: u64) -> ReplicaRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}
