#![allow(dead_code)]

use kite_core::model::ModelConfig;
use kite_smiles::{TokenSequence, PAD, SEP};
use kite_tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough for finite differences over every parameter.
pub fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 6,
        max_len: 6,
        kg_dim: 4,
        kg_heads: 2,
        conv_blocks: 2,
        mlp1_hidden: 3,
        mlp1_out: 3,
        mlp2_hidden: 4,
        n_classes: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// `real` random tokens with a SEP in the middle, padded to `len`.
pub fn random_seq(rng: &mut impl Rng, real: usize, len: usize, vocab: usize) -> TokenSequence {
    let sep = real / 2;
    let mut ids: Vec<usize> = (0..real)
        .map(|i| if i == sep { SEP } else { rng.gen_range(4..vocab) })
        .collect();
    let mut segments: Vec<u8> = (0..real).map(|i| u8::from(i > sep)).collect();
    ids.resize(len, PAD);
    segments.resize(len, segments.last().copied().unwrap_or(0));
    let mut mask = vec![true; real];
    mask.resize(len, false);
    TokenSequence {
        ids,
        segments,
        mask,
        full_len: real,
    }
}

/// Replaces every value in `store` (parameters and running statistics)
/// with seeded draws; running variances stay positive.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let v = store.value_mut(id);
        for x in v.data_mut() {
            *x = if name.ends_with("running_var") {
                rng.gen_range(0.5..1.5)
            } else {
                rng.gen_range(-0.8..0.8)
            };
        }
    }
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}
