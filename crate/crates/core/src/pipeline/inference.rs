use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::{build_latent_cache, train_stage_a, train_stage_b};
use super::Checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::decoder::{self, standard_normal};
use crate::encoder::{self, VitConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::latent_generator;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const CHUNK: usize = 128;

/// Pooled-token features from a fixed encoder, used for Fréchet distances.
#[derive(Debug, Clone, Copy)]
pub struct FeatureExtractor<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a VitConfig,
    pub token_index: usize,
}

impl<'a> FeatureExtractor<'a> {
    /// The frozen reference encoder of a Stage-A checkpoint.
    pub fn frozen_of(ckpt: &'a Checkpoint) -> Result<Self> {
        Ok(Self {
            params: ckpt.group("frozen")?,
            cfg: &ckpt.config.encoder,
            token_index: ckpt.config.token_index,
        })
    }

    /// The `encoder` group of any checkpoint (e.g. a pretraining result).
    pub fn encoder_of(ckpt: &'a Checkpoint) -> Result<Self> {
        Ok(Self {
            params: ckpt.group("encoder")?,
            cfg: &ckpt.config.encoder,
            token_index: 0,
        })
    }

    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        encoder::encode_chunked(self.params, self.cfg, images, self.token_index, 256)
    }

    pub fn stats(&self, images: &Tensor) -> Result<eval::GaussianStats> {
        eval::gaussian_stats(&self.features(images)?)
    }
}

fn decode_chunked(
    dec: &ParamStore,
    cfg: &RunConfig,
    z: &Tensor,
    nfe: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let b = z.dim0();
    if b == 0 {
        return Ok(Tensor::zeros(&cfg.decoder.image_shape(0)));
    }
    let mut parts = Vec::new();
    for start in (0..b).step_by(CHUNK) {
        let rows: Vec<usize> = (start..(start + CHUNK).min(b)).collect();
        parts.push(decoder::decode_tokens(dec, &cfg.decoder, &z.select_rows(&rows), nfe, rng)?);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Encode and decode `images` with the Stage-A weights (EMA when present),
/// noise drawn from `seed`.
pub fn reconstruct_images(ckpt: &Checkpoint, images: &Tensor, nfe: usize, seed: u64) -> Result<Tensor> {
    if nfe == 0 {
        return Err(Error::invalid("nfe must be >= 1"));
    }
    let cfg = &ckpt.config;
    let enc = ckpt.eval_group("encoder")?;
    let dec = ckpt.eval_group("decoder")?;
    let z = encoder::encode_chunked(enc, &cfg.encoder, images, cfg.token_index, 256)?;
    decode_chunked(dec, cfg, &z, nfe, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Sample tokens for `classes` with the latent generator, then decode them.
pub fn generate_classes(
    stage_a: &Checkpoint,
    stage_b: &Checkpoint,
    classes: &[Option<usize>],
    cfg_scale: f32,
    nfe_latent: usize,
    nfe_decode: usize,
    seed: u64,
) -> Result<Tensor> {
    let a = &stage_a.config;
    let b = &stage_b.config;
    if a.encoder.embed_dim != b.mixer.token_dim {
        return Err(Error::Config(format!(
            "stage A tokens have {} dims, stage B mixer expects {}",
            a.encoder.embed_dim, b.mixer.token_dim
        )));
    }
    let dec = stage_a.eval_group("decoder")?;
    if classes.is_empty() {
        return Ok(Tensor::zeros(&a.decoder.image_shape(0)));
    }
    if nfe_decode == 0 {
        return Err(Error::invalid("nfe must be >= 1"));
    }
    let mixer = stage_b.eval_group("mixer")?;
    let stats = stage_b
        .latent_stats
        .as_ref()
        .ok_or_else(|| Error::Config("stage B checkpoint has no latent statistics".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = latent_generator::sample_latents(mixer, &b.mixer, stats, classes, nfe_latent, cfg_scale, &mut rng)?;
    decode_chunked(dec, a, &z, nfe_decode, &mut rng)
}

/// `count` images of one class (`None` for unconditional).
#[allow(clippy::too_many_arguments)]
pub fn generate(
    stage_a: &Checkpoint,
    stage_b: &Checkpoint,
    class_id: Option<usize>,
    count: usize,
    cfg_scale: f32,
    nfe_latent: usize,
    nfe_decode: usize,
    seed: u64,
) -> Result<Tensor> {
    generate_classes(
        stage_a,
        stage_b,
        &vec![class_id; count],
        cfg_scale,
        nfe_latent,
        nfe_decode,
        seed,
    )
}

/// Decode `frames` tokens on the segment between the tokens of two images,
/// every frame from the same noise.
pub fn interpolate_images(
    ckpt: &Checkpoint,
    image_a: &Tensor,
    image_b: &Tensor,
    frames: usize,
    nfe: usize,
    seed: u64,
) -> Result<Tensor> {
    if frames < 2 {
        return Err(Error::invalid("interpolation needs at least two frames"));
    }
    if image_a.dim0() != 1 || image_b.dim0() != 1 {
        return Err(Error::invalid("interpolate one image pair at a time"));
    }
    let cfg = &ckpt.config;
    let enc = ckpt.eval_group("encoder")?;
    let dec = ckpt.eval_group("decoder")?;
    let za = encoder::encode(enc, &cfg.encoder, image_a, cfg.token_index)?;
    let zb = encoder::encode(enc, &cfg.encoder, image_b, cfg.token_index)?;
    let x0 = standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), &cfg.decoder.image_shape(1));
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let z = if k == 0 {
            za.clone()
        } else if k == frames - 1 {
            zb.clone()
        } else {
            let a = k as f32 / (frames - 1) as f32;
            za.zip_map(&zb, |p, q| (1.0 - a) * p + a * q)?
        };
        out.push(decoder::decode_from_noise(dec, &cfg.decoder, &z, &x0, nfe)?);
    }
    Tensor::concat_rows(&out.iter().collect::<Vec<_>>())
}

/// Reconstruction quality summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconMetrics {
    pub psnr: f32,
    pub ssim: f32,
    pub encoder_frechet: f64,
}

pub fn reconstruction_metrics(
    originals: &Tensor,
    recons: &Tensor,
    extractor: &FeatureExtractor<'_>,
) -> Result<ReconMetrics> {
    let psnr = eval::psnr(originals, recons)?;
    let ssim = eval::ssim(originals, recons)?;
    let p = extractor.stats(originals)?;
    let q = extractor.stats(recons)?;
    Ok(ReconMetrics {
        psnr,
        ssim,
        encoder_frechet: eval::frechet_distance(&p, &q)?,
    })
}

/// Reconstruct `data` and score against the originals; features come from
/// the frozen reference encoder.
pub fn eval_reconstruction(ckpt: &Checkpoint, data: &Dataset, nfe: usize, seed: u64) -> Result<ReconMetrics> {
    let recons = reconstruct_images(ckpt, &data.images, nfe, seed)?;
    reconstruction_metrics(&data.images, &recons, &FeatureExtractor::frozen_of(ckpt)?)
}

/// Fréchet distance between features of `count` class-balanced generations
/// and of the real images in `real`.
#[allow(clippy::too_many_arguments)]
pub fn eval_generation(
    stage_a: &Checkpoint,
    stage_b: &Checkpoint,
    real: &Dataset,
    count: usize,
    cfg_scale: f32,
    seed: u64,
    extractor: Option<&FeatureExtractor<'_>>,
) -> Result<f64> {
    let k = stage_b.config.mixer.num_classes;
    if count == 0 || count % k != 0 {
        return Err(Error::invalid(format!(
            "generation count {} must be a positive multiple of {} classes",
            count, k
        )));
    }
    let classes: Vec<Option<usize>> = (0..count).map(|i| Some(i % k)).collect();
    let s = &stage_b.config.sample;
    let images = generate_classes(stage_a, stage_b, &classes, cfg_scale, s.nfe_latent, s.nfe_decode, seed)?;
    let own;
    let fx = match extractor {
        Some(f) => f,
        None => {
            own = FeatureExtractor::frozen_of(stage_a)?;
            &own
        }
    };
    eval::frechet_distance(&fx.stats(&real.images)?, &fx.stats(&images)?)
}

/// Mean cosine between the tuned and frozen tokens of `images`.
pub fn token_alignment(ckpt: &Checkpoint, images: &Tensor) -> Result<f32> {
    let cfg = &ckpt.config;
    let z = encoder::encode_chunked(ckpt.eval_group("encoder")?, &cfg.encoder, images, cfg.token_index, 256)?;
    let zf = FeatureExtractor::frozen_of(ckpt)?.features(images)?;
    encoder::mean_cosine(&z, &zf)
}

/// One line of a λ sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub psnr: f32,
    pub mean_cos: f32,
    pub encoder_frechet_gen: Option<f64>,
}

pub const SWEEP_HEADER: &str = "lambda,psnr,mean_cos,encoder_frechet_gen";

/// Stage A (and optionally Stage B plus generation scoring) for each λ with
/// the same seed and data; scores on the first `eval_images` held-out images.
pub fn run_lambda_sweep(
    base: &RunConfig,
    lambdas: &[f64],
    encoder_ckpt: &Checkpoint,
    train: &Dataset,
    held_out: &Dataset,
    with_stage_b: bool,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one value".into()));
    }
    let n = base.eval_images.min(held_out.len());
    let eval_set = held_out.take(n);
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = RunConfig {
            lambda,
            ..base.clone()
        };
        let a = train_stage_a(&cfg, Some(encoder_ckpt), train, held_out)?.checkpoint;
        let recon = reconstruct_images(&a, &eval_set.images, cfg.eval_nfe, cfg.seed)?;
        let psnr = eval::psnr(&eval_set.images, &recon)?;
        let mean_cos = token_alignment(&a, &eval_set.images)?;
        let encoder_frechet_gen = if with_stage_b {
            let cache = build_latent_cache(&a, train)?;
            let b = train_stage_b(&cfg, &cache)?.checkpoint;
            Some(eval_generation(
                &a,
                &b,
                &eval_set,
                cfg.sample.count,
                cfg.sample.cfg_scale as f32,
                cfg.seed,
                None,
            )?)
        } else {
            None
        };
        rows.push(SweepRow {
            lambda,
            psnr,
            mean_cos,
            encoder_frechet_gen,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{}", SWEEP_HEADER)?;
    for r in rows {
        let gen = r.encoder_frechet_gen.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.lambda, r.psnr, r.mean_cos, gen)?;
    }
    Ok(())
}
