//! Shared helpers for the integration tests.

#![allow(dead_code)]

pub mod grad;

use std::path::PathBuf;

use onetok::config::RunConfig;
use onetok::data::{self, Dataset};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// The 16×16 digits set: (train, held-out) at 90/10 in file order.
pub fn digits() -> (Dataset, Dataset) {
    let (images, labels) = data::ingest_mnist_idx(
        &fixture("digits16-images.idx3-ubyte"),
        &fixture("digits16-labels.idx1-ubyte"),
    )
    .expect("digits fixture");
    Dataset::new(images, labels).expect("dataset").split(0.9)
}

/// Desk-scale model for single-core runs on 16×16 digits.
pub fn desk_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.image_size = 16;
    c.encoder.embed_dim = 32;
    c.encoder.depth = 2;
    c.encoder.heads = 2;
    c.encoder.mlp_ratio = 2;
    c.decoder.image_size = 16;
    c.decoder.embed_dim = 64;
    c.decoder.depth = 2;
    c.decoder.heads = 2;
    c.decoder.time_embed_dim = 32;
    c.decoder.mlp_ratio = 2;
    c.mixer.token_dim = 32;
    c.mixer.hidden_dim = 64;
    c.mixer.depth = 2;
    c.mixer.class_embed_dim = 16;
    c.batch_size = 32;
    c.optim.lr = 1e-3;
    c.optim.warmup_steps = 200;
    c.eval_every = 0;
    c.eval_images = 128;
    c.validate().expect("desk config is valid");
    c
}
