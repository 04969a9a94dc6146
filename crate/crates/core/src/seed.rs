//! Deterministic random streams for parallel replication.
//!
//! Every random draw in a simulation comes from a ChaCha8 keystream. The key is
//! the master seed expanded with SplitMix64; the 64-bit stream id packs
//!
//! ```text
//!  bits 63..52  hr_exp grid index   (12 bits)
//!  bits 51..40  hr_rwd grid index   (12 bits)
//!  bits 39..32  purpose tag         ( 8 bits)
//!  bits 31..0   replicate index     (32 bits)
//! ```
//!
//! so each (cell, replicate, purpose) tuple owns a disjoint stream whose
//! contents do not depend on scheduling or on how many workers ran.

use rand::SeedableRng;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamTag {
    Data = 0,
    PowerPrior = 1,
    Commensurate = 2,
    TrialOnlyBayes = 3,
    Audit = 4,
}

/// Coordinates of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub hr_exp_index: u16,
    pub hr_rwd_index: u16,
    pub replicate: u32,
    pub tag: StreamTag,
}

impl StreamKey {
    pub fn stream_id(&self) -> u64 {
        assert!(self.hr_exp_index < 1 << 12 && self.hr_rwd_index < 1 << 12);
        (u64::from(self.hr_exp_index) << 52)
            | (u64::from(self.hr_rwd_index) << 40)
            | (u64::from(self.tag as u8) << 32)
            | u64::from(self.replicate)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(expand_key(self.master_seed));
        rng.set_stream(self.stream_id());
        rng
    }

    /// A single 64-bit seed drawn from the start of this stream.
    pub fn derive_seed(&self) -> u64 {
        self.rng().next_u64()
    }
}

/// SplitMix64 step; used for key expansion and small seed mixing.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn expand_key(seed: u64) -> [u8; 32] {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Mix an extra word into a seed, e.g. to give a nested fit its own stream.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut state = seed ^ salt.rotate_left(17);
    splitmix64(&mut state)
}
