use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ema_update, BatchSampler, Checkpoint};
use crate::config::{Phase, RunConfig};
use crate::data::Dataset;
use crate::decoder::{self, StageAModel};
use crate::encoder;
use crate::error::{Error, Result};
use crate::eval::{self, MetricRow};
use crate::latent_generator::{self, ConditionToken, LatentStats};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Tensor;

// Independent rng streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_EVAL: u64 = 3;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Result of a training phase.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
    /// Training objective per step.
    pub losses: Vec<f32>,
}

/// Encoder tokens of a whole dataset with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache {
    pub tokens: Tensor,
    pub labels: Vec<usize>,
    pub stats: LatentStats,
    /// `ema` or `raw`.
    pub source: String,
}

impl LatentCache {
    /// Package as a checkpoint: group `cache` holds `tokens` and `labels`.
    pub fn to_checkpoint(&self, config: &RunConfig) -> Result<Checkpoint> {
        let mut store = ParamStore::new();
        store.insert("tokens", self.tokens.clone());
        let labels = self.labels.iter().map(|&l| l as f32).collect();
        store.insert("labels", Tensor::from_vec(&[self.labels.len()], labels)?);
        store.set_trainable(Vec::new())?;
        let mut ck = Checkpoint::new(Phase::StageA, 0, config.clone());
        ck.groups.insert("cache".into(), store);
        ck.latent_stats = Some(self.stats.clone());
        ck.latent_source = Some(self.source.clone());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let store = ck.group("cache")?;
        let tokens = store.require("tokens")?.clone();
        let labels = store
            .require("labels")?
            .data()
            .iter()
            .map(|&l| {
                if l >= 0.0 && l.fract() == 0.0 {
                    Ok(l as usize)
                } else {
                    Err(Error::format(0, format!("invalid cached label {}", l)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = ck
            .latent_stats
            .clone()
            .ok_or_else(|| Error::format(0, "latent cache lacks statistics"))?;
        Ok(Self {
            tokens,
            labels,
            stats,
            source: ck.latent_source.clone().unwrap_or_else(|| "raw".into()),
        })
    }
}

fn check_like(store: &ParamStore, reference: &ParamStore, what: &str) -> Result<()> {
    for (name, t) in reference.iter() {
        let got = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("{} checkpoint lacks `{}`", what, name)))?;
        if got.shape() != t.shape() {
            return Err(Error::Config(format!(
                "{} `{}` has shape {:?}, config implies {:?}",
                what,
                name,
                got.shape(),
                t.shape()
            )));
        }
    }
    if store.len() != reference.len() {
        return Err(Error::Config(format!(
            "{} checkpoint has {} tensors, config implies {}",
            what,
            store.len(),
            reference.len()
        )));
    }
    Ok(())
}

fn is_eval_step(cfg: &RunConfig, step: u64) -> bool {
    step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0)
}

/// A randomly initialized encoder packaged like a pretraining result.
pub fn random_encoder(cfg: &RunConfig) -> Result<Checkpoint> {
    let enc = encoder::init_encoder(&cfg.encoder, &mut stream(cfg.seed, STREAM_INIT))?;
    let mut ck = Checkpoint::new(Phase::Ssl, 0, cfg.clone());
    ck.groups.insert("encoder".into(), enc);
    Ok(ck)
}

/// Contrastive pretraining of a fresh encoder on two augmented views per image.
pub fn pretrain_ssl(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::invalid("pretraining needs at least two images"));
    }
    let mut enc = encoder::init_encoder(&cfg.encoder, &mut stream(cfg.seed, STREAM_INIT))?;
    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut aug_rng = stream(cfg.seed, STREAM_NOISE);
    let mut sampler = BatchSampler::new(data.len());
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut metrics = Vec::new();
    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size.max(2), &mut data_rng);
        let batch = data.images.select_rows(&idx);
        let loss = encoder::ssl_pretrain_step(
            &mut enc,
            &cfg.encoder,
            &batch,
            cfg.temperature as f32,
            &mut aug_rng,
            &mut opt,
        )?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("contrastive loss diverged at step {}", step)));
        }
        losses.push(loss);
        metrics.push(MetricRow::new(step, "nt_xent", loss as f64, "train"));
    }
    let mut ck = Checkpoint::new(Phase::Ssl, cfg.steps, cfg.clone());
    ck.groups.insert("encoder".into(), enc);
    Ok(TrainOutput {
        checkpoint: ck,
        metrics,
        losses,
    })
}

/// Joint tuning of the encoder partition and the decoder.
///
/// `encoder_ckpt` supplies the starting encoder; its weights are also
/// snapshotted as the frozen reference for the cosine term.
pub fn train_stage_a(
    cfg: &RunConfig,
    encoder_ckpt: Option<&Checkpoint>,
    train: &Dataset,
    held_out: &Dataset,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let source = encoder_ckpt
        .ok_or_else(|| Error::Config("stage A needs a pretrained encoder checkpoint".into()))?;
    let mut enc = source.group("encoder")?.clone();
    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    {
        let reference = encoder::init_encoder(&cfg.encoder, &mut stream(0, 0))?;
        check_like(&enc, &reference, "encoder")?;
    }
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut frozen = enc.clone();
    frozen.set_trainable(Vec::new())?;
    encoder::partition_params(&mut enc, cfg.partition_mode())?;
    let mut dec = decoder::init_decoder(&cfg.decoder, cfg.encoder.embed_dim, &mut init_rng)?;
    let ema = cfg.ema_decay.map(|d| d as f32);
    let mut ema_enc = ema.map(|_| enc.clone());
    let mut ema_dec = ema.map(|_| dec.clone());

    let eval_n = cfg.eval_images.min(held_out.len());
    let eval_images = held_out.images.select_rows(&(0..eval_n).collect::<Vec<_>>());
    let frozen_eval = if eval_n > 0 {
        Some(encoder::encode(&frozen, &cfg.encoder, &eval_images, cfg.token_index)?)
    } else {
        None
    };

    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut sampler = BatchSampler::new(train.len());
    let mut opt = AdamW::new(cfg.optim.clone());
    let lambda = cfg.lambda as f32;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut metrics = Vec::new();
    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size, &mut data_rng);
        let batch = train.images.select_rows(&idx);
        let fwd = {
            let model = StageAModel {
                enc_cfg: &cfg.encoder,
                encoder: &enc,
                frozen: &frozen,
                dec_cfg: &cfg.decoder,
                decoder: &dec,
                token_index: cfg.token_index,
            };
            decoder::stage_a_forward(&model, &batch, lambda, &mut noise_rng)?
        };
        if !fwd.parts.total.is_finite() {
            return Err(Error::Numerical(format!("stage A loss diverged at step {}", step)));
        }
        let mut grads = fwd.graph.backward(fwd.total)?;
        let ge = fwd.encoder.collect_grads(&mut grads);
        let gd = fwd.decoder.collect_grads(&mut grads);
        opt.update("encoder.", &mut enc, &ge)?;
        opt.update("decoder.", &mut dec, &gd)?;
        opt.finish_step();
        if let (Some(d), Some(se), Some(sd)) = (ema, ema_enc.as_mut(), ema_dec.as_mut()) {
            ema_update(se, &enc, d)?;
            ema_update(sd, &dec, d)?;
        }
        losses.push(fwd.parts.total);
        metrics.push(MetricRow::new(step, "loss_fm", fwd.parts.fm as f64, "train"));
        metrics.push(MetricRow::new(step, "loss_cos", fwd.parts.cos as f64, "train"));
        metrics.push(MetricRow::new(step, "loss_total", fwd.parts.total as f64, "train"));

        if let (true, Some(zf)) = (is_eval_step(cfg, step), frozen_eval.as_ref()) {
            let (e, d) = (ema_enc.as_ref().unwrap_or(&enc), ema_dec.as_ref().unwrap_or(&dec));
            let (psnr, cos) = held_out_metrics(cfg, e, d, &eval_images, zf)?;
            metrics.push(MetricRow::new(step, "psnr", psnr as f64, "heldout"));
            metrics.push(MetricRow::new(step, "mean_cos", cos as f64, "heldout"));
        }
    }

    let mut ck = Checkpoint::new(Phase::StageA, cfg.steps, cfg.clone());
    ck.groups.insert("encoder".into(), enc);
    ck.groups.insert("frozen".into(), frozen);
    ck.groups.insert("decoder".into(), dec);
    if let (Some(e), Some(d)) = (ema_enc, ema_dec) {
        ck.groups.insert("ema.encoder".into(), e);
        ck.groups.insert("ema.decoder".into(), d);
    }
    Ok(TrainOutput {
        checkpoint: ck,
        metrics,
        losses,
    })
}

/// Held-out PSNR of reconstructions and mean cosine to the frozen tokens.
fn held_out_metrics(
    cfg: &RunConfig,
    enc: &ParamStore,
    dec: &ParamStore,
    images: &Tensor,
    frozen_tokens: &Tensor,
) -> Result<(f32, f32)> {
    let z = encoder::encode_chunked(enc, &cfg.encoder, images, cfg.token_index, 256)?;
    let cos = encoder::mean_cosine(&z, frozen_tokens)?;
    let mut rng = stream(cfg.seed, STREAM_EVAL);
    let recon = decoder::decode_tokens(dec, &cfg.decoder, &z, cfg.eval_nfe, &mut rng)?;
    Ok((eval::psnr(images, &recon)?, cos))
}

/// Encode every image with the Stage-A encoder (its EMA shadow when
/// present) and record per-dimension statistics.
pub fn build_latent_cache(ckpt: &Checkpoint, data: &Dataset) -> Result<LatentCache> {
    let cfg = &ckpt.config;
    let enc = ckpt.eval_group("encoder")?;
    let source = if ckpt.has_ema("encoder") { "ema" } else { "raw" };
    let shape = data.images.shape();
    let want = [cfg.encoder.channels, cfg.encoder.image_size, cfg.encoder.image_size];
    if shape.len() != 4 || shape[1..] != want {
        return Err(Error::Config(format!(
            "dataset images {:?} do not match encoder input {:?}",
            &shape[1.min(shape.len())..],
            want
        )));
    }
    let tokens = encoder::encode_chunked(enc, &cfg.encoder, &data.images, cfg.token_index, 256)?;
    let stats = LatentStats::from_latents(&tokens)?;
    Ok(LatentCache {
        tokens,
        labels: data.labels.clone(),
        stats,
        source: source.into(),
    })
}

/// Train the class-conditional latent generator on standardized tokens.
pub fn train_stage_b(cfg: &RunConfig, cache: &LatentCache) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = cache.tokens.dim0();
    if n == 0 || cache.labels.len() != n {
        return Err(Error::invalid(format!(
            "latent cache has {} rows and {} labels",
            n,
            cache.labels.len()
        )));
    }
    if cache.tokens.row_len() != cfg.mixer.token_dim {
        return Err(Error::Config(format!(
            "cached tokens have {} dims, mixer.token_dim is {}",
            cache.tokens.row_len(),
            cfg.mixer.token_dim
        )));
    }
    if let Some(&bad) = cache.labels.iter().find(|&&l| l >= cfg.mixer.num_classes) {
        return Err(Error::Config(format!(
            "label {} outside mixer.num_classes {}",
            bad, cfg.mixer.num_classes
        )));
    }
    let z = cache.stats.normalize(&cache.tokens)?;
    let mut mixer = latent_generator::init_mixer(&cfg.mixer, &mut stream(cfg.seed, STREAM_INIT))?;
    let ema = cfg.ema_decay.map(|d| d as f32);
    let mut shadow = ema.map(|_| mixer.clone());
    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut sampler = BatchSampler::new(n);
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut metrics = Vec::new();
    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size, &mut data_rng);
        let zb = z.select_rows(&idx);
        let cond: Vec<ConditionToken> = idx.iter().map(|&i| ConditionToken::class(cache.labels[i])).collect();
        let fwd = latent_generator::stage_b_forward(&mixer, &cfg.mixer, &zb, &cond, &mut noise_rng)?;
        let loss = fwd.graph.value(fwd.loss).item();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("stage B loss diverged at step {}", step)));
        }
        let mut grads = fwd.graph.backward(fwd.loss)?;
        let g = fwd.params.collect_grads(&mut grads);
        opt.update("mixer.", &mut mixer, &g)?;
        opt.finish_step();
        if let (Some(d), Some(s)) = (ema, shadow.as_mut()) {
            ema_update(s, &mixer, d)?;
        }
        losses.push(loss);
        metrics.push(MetricRow::new(step, "loss_fm", loss as f64, "train"));
    }
    let mut ck = Checkpoint::new(Phase::StageB, cfg.steps, cfg.clone());
    ck.groups.insert("mixer".into(), mixer);
    if let Some(s) = shadow {
        ck.groups.insert("ema.mixer".into(), s);
    }
    ck.latent_stats = Some(cache.stats.clone());
    ck.latent_source = Some(cache.source.clone());
    Ok(TrainOutput {
        checkpoint: ck,
        metrics,
        losses,
    })
}

