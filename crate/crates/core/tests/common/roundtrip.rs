use std::path::Path;

use emev_core::bundle::{Model, ModelBundle, ModelType};
use emev_core::channel::{ChannelProfile, Dims};
use emev_core::checkpoint::Checkpoint;
use emev_core::classify::ClassifierConfig;
use emev_core::config::Config;
use emev_core::dataset::{make_dataset, Dataset};
use emev_core::emevnet::Prepared;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Saves and reloads a dataset; true when the file bytes and the values are
/// identical.
pub fn dataset_round_trips(ds: &Dataset, dir: &Path) -> bool {
    let path = dir.join("rt.ds");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    back == *ds && back.to_bytes().unwrap() == bytes && ds.to_bytes().unwrap() == bytes
}

pub fn toy_bundle(kind: ModelType, seed: u64) -> ModelBundle {
    let mut cfg = Config::parse("l_eps = 16\ns_scale = 3.25\nprofile = cdl-b-like").unwrap();
    ClassifierConfig::new(Dims::toy()).write_into(&mut cfg);
    ModelBundle::new(Model::from_config(kind, &cfg, seed).unwrap(), cfg)
}

/// Model outputs on the given samples, as raw bits.
pub fn forward_bits(bundle: &ModelBundle, data: &Prepared, idx: &[usize]) -> Vec<u32> {
    let v: Vec<&[f32]> = idx.iter().map(|&i| data.v[i].as_slice()).collect();
    let s: Vec<&[f32]> = idx.iter().map(|&i| data.s[i].as_slice()).collect();
    let u: Vec<&[f32]> = idx.iter().map(|&i| data.u_mag[i].as_slice()).collect();
    let h: Vec<&[f32]> = idx.iter().map(|&i| data.h[i].as_slice()).collect();
    let out: Vec<f32> = match &bundle.model {
        Model::Emev(m) => m
            .reconstruct_batch(&v, &s)
            .unwrap()
            .into_iter()
            .flat_map(|(a, b)| a.into_iter().chain(b))
            .collect(),
        Model::Baseline(m) => m
            .reconstruct_batch(&h)
            .unwrap()
            .into_iter()
            .flat_map(|(a, b)| a.into_iter().chain(b))
            .collect(),
        Model::Classifier(m) => m
            .classify_batch(&u, &s)
            .unwrap()
            .into_iter()
            .flat_map(|c| c.probs)
            .collect(),
    };
    out.into_iter().map(f32::to_bits).collect()
}

/// Ten random channels, decomposed.
pub fn random_inputs(seed: u64) -> Prepared {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ChannelProfile::preset(
        emev_core::channel::PRESET_NAMES[rng.gen_range(0..5)],
        Dims::toy(),
    )
    .unwrap();
    Prepared::from_dataset(&make_dataset(&p, 10, rng.gen()).unwrap()).unwrap()
}

/// Saves and reloads a bundle; true when the file bytes are identical and
/// the reloaded model reproduces `forward_bits` on ten random inputs.
pub fn checkpoint_round_trips(bundle: &ModelBundle, dir: &Path, seed: u64) -> bool {
    let path = dir.join("rt.ck");
    bundle.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    let same_bytes = back.to_checkpoint().to_bytes() == bytes
        && Checkpoint::load(&path).unwrap().to_bytes() == bytes;
    let data = random_inputs(seed);
    let idx: Vec<usize> = (0..10).collect();
    same_bytes && forward_bits(bundle, &data, &idx) == forward_bits(&back, &data, &idx)
}
