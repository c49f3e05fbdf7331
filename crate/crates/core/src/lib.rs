//! Deterministic federated-learning simulator for per-client distribution
//! offsets on a double-input-channel network.
//!
//! Clients jointly learn an input offset and a model by alternating SGD; the
//! server averages models and, depending on how much the clients' label sets
//! overlap, leaves offsets alone, averages them, or maps them through a small
//! learned regressor.

pub mod client;
pub mod datagen;
pub mod dualnet;
pub mod error;
pub mod exec;
pub mod harness;
pub mod server;
pub mod tape;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Mixes a base seed with a purpose tag so independent streams never share
/// state (splitmix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
