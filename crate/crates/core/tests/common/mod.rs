//! Small fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uvatar::assets::{AssetConfig, AvatarAssets};
use uvatar::body_model::{generate_toy_model, ParametricBodyModel};
use uvatar::dataset::SubjectDataset;
use uvatar::gaussian::{DecoderConfig, DecoderParams, UvFeaturePlane};
use uvatar::synth::{synthetic_subject, SyntheticConfig};

/// Coarsest toy mesh without subdivision and a small skinning volume.
pub fn toy() -> (ParametricBodyModel, AvatarAssets) {
    let model = generate_toy_model(0, 1);
    let assets = AvatarAssets::build(
        &model,
        &AssetConfig {
            subdivision: 0,
            volume_resolution: 16,
            volume_k: 8,
        },
    )
    .unwrap();
    (model, assets)
}

/// `n` synthetic subjects with three 24² training views each.
pub fn subjects(assets: &AvatarAssets, n: usize, seed: u64) -> Vec<SubjectDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SyntheticConfig {
        views: 3,
        heldout_views: 0,
        size: 24,
        ..Default::default()
    };
    (0..n)
        .map(|i| synthetic_subject(&format!("s{i}"), assets, &cfg, &mut rng).unwrap().train)
        .collect()
}

/// Random planes (16², 8 channels) and matching decoders.
pub fn planes_and_decoders(n: usize, seed: u64) -> (Vec<UvFeaturePlane>, DecoderParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = (0..n).map(|_| UvFeaturePlane::random(16, 8, 0.1, &mut rng).unwrap()).collect();
    let decoders = DecoderParams::init(8, &DecoderConfig::default(), &mut rng).unwrap();
    (planes, decoders)
}

pub fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}
