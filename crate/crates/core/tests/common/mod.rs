#![allow(dead_code)]

use diffcore::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trajcl::model::{Mode, ModelConfig, Variant};
use trajcl::trajdata::Sample;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sample<R: Rng>(rng: &mut R, n: usize, f: usize, m: usize, label: usize) -> Sample {
    Sample {
        id: format!("s{}", rng.gen::<u32>()),
        label,
        traj: Tensor::randn(&[n, f], 1.0, rng),
        env: Tensor::randn(&[n, m], 1.0, rng),
    }
}

pub fn small_cfg(mode: Mode, variant: Variant) -> ModelConfig {
    ModelConfig {
        traj_dim: 3,
        env_dim: 4,
        d: 5,
        k: 3,
        classes: 3,
        kernel: 3,
        tau: 1.0,
        share_heads: true,
        detach_intervention: false,
        mode,
        variant,
    }
}
