//! Seed derivation. Every random stream in a scenario is keyed by its purpose so
//! that, for example, re-drawing attack variations never shifts measurement noise.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// What a derived random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPurpose {
    MeasurementNoise,
    Calibration,
    AttackVariation,
    Network,
    Scenario,
    AnnInit,
    AnnData,
    AnnShuffle,
}

impl SeedPurpose {
    pub fn tag(self) -> &'static str {
        match self {
            SeedPurpose::MeasurementNoise => "measurement-noise",
            SeedPurpose::Calibration => "calibration",
            SeedPurpose::AttackVariation => "attack-variation",
            SeedPurpose::Network => "network",
            SeedPurpose::Scenario => "scenario",
            SeedPurpose::AnnInit => "ann-init",
            SeedPurpose::AnnData => "ann-data",
            SeedPurpose::AnnShuffle => "ann-shuffle",
        }
    }
}

/// Stable 64-bit hash of `(master_seed, purpose, node, index)`.
pub fn derive_seed(master_seed: u64, purpose: SeedPurpose, node: u64, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(purpose.tag().as_bytes());
    hasher.update([0u8]);
    hasher.update(node.to_le_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master_seed: u64, purpose: SeedPurpose, node: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master_seed, purpose, node, index))
}
