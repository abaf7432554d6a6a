#![allow(dead_code)]

use editlab::factworld::{filter_neighbors, generate_world, make_edit_batch, EditBatch, World, WorldConfig};
use editlab::toylm::{AdamConfig, ModelConfig, ToyLm};

pub fn tiny_world() -> World {
    generate_world(&WorldConfig {
        seed: 3,
        n_subjects: 36,
        n_relations: 3,
        pool_size: 3,
        n_paraphrases: 2,
        name_parts: 2,
        suffix_fraction: 0.0,
        prefixed_per_fact: 1,
        n_filler_train: 30,
        n_probes: 8,
        max_prefix_len: 3,
    })
    .unwrap()
}

pub fn tiny_model(world: &World, epochs: usize) -> ToyLm {
    let mut m = ToyLm::new(ModelConfig {
        vocab_size: world.vocab.len(),
        d_model: 16,
        n_layers: 3,
        n_heads: 2,
        d_mlp: 32,
        max_seq_len: world.max_seq_len,
        seed: 5,
    })
    .unwrap();
    let adam = AdamConfig {
        learning_rate: 1e-2,
        ..AdamConfig::default()
    };
    m.pretrain(&world.pretrain_corpus, epochs, &adam, 1).unwrap();
    m
}

pub fn tiny_batch(world: &World, model: &ToyLm, m: usize, seed: u64) -> EditBatch {
    let (batch, _) = make_edit_batch(world, m, 2, seed).unwrap();
    filter_neighbors(model, &batch).unwrap().0
}
