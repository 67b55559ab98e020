//! Stereo visual odometry for scenes with several independently moving rigid
//! bodies.
//!
//! The crate is organised bottom-up: `geometry` holds SE(3) poses and the
//! rectified stereo camera model, `sim` generates synthetic multi-body scenes,
//! `seg` splits frame-to-frame correspondences into rigid motion models,
//! `labels` keeps those models attached to persistent object identities over
//! time, `vo` chains per-object relative poses, `world` converts object
//! trajectories into the ground frame, `pipeline` wires everything into a
//! streaming frontend, and `eval` provides trajectory I/O and error metrics.

pub mod eval;
pub mod geometry;
pub mod labels;
pub mod pipeline;
pub mod seg;
pub mod sim;
pub mod vo;
pub mod world;

/// Persistent feature track identifier, stable across frames.
pub type TrackId = u64;
/// Simulated rigid body identifier (0 is the robot / static background).
pub type BodyId = u32;
/// Persistent object label maintained by the label tracker.
pub type Label = u32;

/// Derives an independent RNG stream seed from a base seed and a salt
/// (SplitMix64 finalizer). Every randomized stage seeds its own generator
/// through this, so stages stay decoupled and runs reproduce bit-for-bit.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
