//! Training phases, inference and checkpointing.
//!
//! The phases run in order: contrastive pretraining of the encoder, joint
//! tuning of the pooled token with the pixel decoder (Stage A), then the
//! latent generator on cached tokens (Stage B).

mod checkpoint;
mod inference;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use inference::{
    eval_generation, eval_reconstruction, generate, interpolate_images, reconstruct_images,
    generate_classes, reconstruction_metrics, run_lambda_sweep, token_alignment, write_sweep_csv,
    FeatureExtractor, ReconMetrics,
    SweepRow, SWEEP_HEADER,
};
pub use train::{
    build_latent_cache, pretrain_ssl, random_encoder, train_stage_a, train_stage_b, LatentCache,
    TrainOutput,
};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// `shadow ← decay·shadow + (1−decay)·live`, element-wise.
pub fn ema_update(shadow: &mut ParamStore, live: &ParamStore, decay: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("ema decay {} outside [0, 1]", decay)));
    }
    if shadow.len() != live.len() {
        return Err(Error::invalid("ema shadow and live stores differ"));
    }
    for (name, src) in live.iter() {
        let dst = shadow
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("ema shadow lacks `{}`", name)))?;
        if dst.shape() != src.shape() {
            return Err(Error::invalid(format!("ema shape mismatch for `{}`", name)));
        }
        if decay == 1.0 {
            continue;
        }
        if decay == 0.0 {
            dst.data_mut().copy_from_slice(src.data());
            continue;
        }
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = decay * *d + (1.0 - decay) * s;
        }
    }
    Ok(())
}

/// Epoch-wise shuffled mini-batches; the order depends only on the rng.
#[derive(Debug, Clone)]
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub(crate) fn next<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[3], v));
        s
    }

    #[test]
    fn ema_endpoints() {
        let live = store(2.0);
        let mut sh = store(-0.0);
        ema_update(&mut sh, &live, 1.0).unwrap();
        assert!(sh.get("w").unwrap().bits_eq(&store(-0.0).get("w").unwrap().clone()));
        ema_update(&mut sh, &live, 0.0).unwrap();
        assert_eq!(sh, live);
    }

    #[test]
    fn ema_converges_geometrically() {
        let live = store(1.0);
        let mut sh = store(0.0);
        let d = 0.9f32;
        for k in 1..=20 {
            ema_update(&mut sh, &live, d).unwrap();
            let expect = 1.0 - d.powi(k);
            assert!((sh.get("w").unwrap().data()[0] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn ema_rejects_mismatch() {
        let mut a = store(0.0);
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(&[2]));
        assert!(ema_update(&mut a, &b, 0.5).is_err());
        assert!(ema_update(&mut a, &store(0.0), 1.5).is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = s.next(10, &mut rng);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
