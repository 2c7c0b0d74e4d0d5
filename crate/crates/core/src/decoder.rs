//! Flow-matching decoder conditioned on the single latent token by
//! concatenating it with the noisy image patch tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, patch_index, VitConfig};
use crate::error::{Error, Result};
use crate::flowmatch::{self, euler_integrate, VelocityField};
use crate::graph::{Broadcast, Graph, Var};
use crate::nn;
use crate::params::{init_normal, Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 4,
            embed_dim: 192,
            depth: 6,
            heads: 6,
            time_embed_dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be even and >= 2"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self, b: usize) -> [usize; 4] {
        [b, self.channels, self.image_size, self.image_size]
    }
}

/// Loss terms of one joint encoder/decoder step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageALossParts {
    pub fm: f32,
    pub cos: f32,
    pub total: f32,
}

pub fn init_decoder<R: Rng + ?Sized>(
    cfg: &DecoderConfig,
    latent_dim: usize,
    rng: &mut R,
) -> Result<ParamStore> {
    cfg.validate()?;
    let e = cfg.embed_dim;
    let mut s = ParamStore::new();
    nn::add_linear(&mut s, "patch", cfg.patch_dim(), e, rng);
    s.insert("pos", init_normal(rng, &[cfg.num_patches(), e], 0.02));
    nn::add_linear(&mut s, "z", latent_dim, e, rng);
    nn::add_linear(&mut s, "time.fc1", cfg.time_embed_dim, e, rng);
    nn::add_linear(&mut s, "time.fc2", e, e, rng);
    for l in 0..cfg.depth {
        nn::add_block(&mut s, &format!("blocks.{l}"), e, cfg.mlp_ratio, rng);
    }
    nn::add_layer_norm(&mut s, "norm", e);
    nn::add_linear(&mut s, "out", e, cfg.patch_dim(), rng);
    Ok(s)
}

/// Record the decoder forward; returns the velocity with the shape of `x_t`.
pub fn decode_velocity_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &DecoderConfig,
    x_t: &Tensor,
    t: &[f32],
    z: Var,
) -> Result<Var> {
    cfg.validate()?;
    let b = x_t.dim0();
    if x_t.shape() != cfg.image_shape(b) {
        return Err(Error::invalid(format!(
            "decoder expects {:?}, got {:?}",
            cfg.image_shape(b),
            x_t.shape()
        )));
    }
    if t.len() != b {
        return Err(Error::invalid(format!("{} times for batch {}", t.len(), b)));
    }
    let zr = g.value(z).dim0();
    if zr != b {
        return Err(Error::invalid(format!(
            "latent batch {} does not match image batch {}",
            zr, b
        )));
    }
    let n = cfg.num_patches();
    let pd = cfg.patch_dim();
    let patches = encoder::patchify(x_t, cfg.patch_size)?.reshape(&[b * n, pd])?;
    let patches = g.constant(patches);
    let x = nn::linear(g, p, "patch", patches)?;
    let x = g.add_broadcast(x, p.var("pos")?, Broadcast::Tile)?;

    let temb = g.constant(nn::sinusoidal_embedding(t, cfg.time_embed_dim));
    let temb = nn::linear(g, p, "time.fc1", temb)?;
    let temb = g.gelu(temb);
    let temb = nn::linear(g, p, "time.fc2", temb)?;

    let ztok = nn::linear(g, p, "z", z)?;
    let x = g.concat_tokens(&[(ztok, 1), (x, n)], b)?;
    let mut x = g.add_broadcast(x, temb, Broadcast::Repeat(n + 1))?;
    for l in 0..cfg.depth {
        x = nn::block(g, p, &format!("blocks.{l}"), x, b, cfg.heads)?;
    }
    let x = nn::layer_norm(g, p, "norm", x)?;
    let rows = (0..b).flat_map(|i| (0..n).map(move |j| i * (n + 1) + 1 + j)).collect();
    let x = g.gather_rows(x, rows)?;
    let out = nn::linear(g, p, "out", x)?;
    // patch space -> image space
    let (c, s) = (cfg.channels, cfg.image_size);
    let fwd = patch_index(c, s, s, cfg.patch_size);
    let per = c * s * s;
    let mut inv = vec![0usize; per];
    for (k, &j) in fwd.iter().enumerate() {
        inv[j] = k;
    }
    let index = (0..b).flat_map(|i| inv.iter().map(move |&k| i * per + k)).collect();
    debug_assert_eq!(n * pd, per);
    g.permute(out, index, &cfg.image_shape(b))
}

/// Decoder velocity `v(x_t, t, z)` with one time per image.
pub fn decode_velocity_batch(
    params: &ParamStore,
    cfg: &DecoderConfig,
    x_t: &Tensor,
    t: &[f32],
    z: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let zv = g.constant(z.clone());
    let v = decode_velocity_graph(&mut g, &p, cfg, x_t, t, zv)?;
    Ok(g.value(v).clone())
}

/// Decoder velocity at a shared time `t`.
pub fn decode_velocity(
    params: &ParamStore,
    cfg: &DecoderConfig,
    x_t: &Tensor,
    t: f32,
    z: &Tensor,
) -> Result<Tensor> {
    decode_velocity_batch(params, cfg, x_t, &vec![t; x_t.dim0()], z)
}

/// The decoder as an image-space velocity field conditioned on fixed tokens.
pub struct DecoderField<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a DecoderConfig,
    pub z: &'a Tensor,
}

impl VelocityField for DecoderField<'_> {
    type Cond = ();

    fn velocity(&self, x: &Tensor, t: f32, _cond: Option<&()>) -> Result<Tensor> {
        decode_velocity(self.params, self.cfg, x, t, self.z)
    }
}

/// Everything needed to run the joint Stage-A objective.
pub struct StageAModel<'a> {
    pub enc_cfg: &'a VitConfig,
    pub encoder: &'a ParamStore,
    pub frozen: &'a ParamStore,
    pub dec_cfg: &'a DecoderConfig,
    pub decoder: &'a ParamStore,
    pub token_index: usize,
}

/// A recorded Stage-A forward, ready for [`Graph::backward`].
pub struct StageAForward {
    pub graph: Graph,
    pub encoder: Bound,
    pub decoder: Bound,
    pub total: Var,
    pub parts: StageALossParts,
    pub z: Tensor,
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    init_normal(rng, shape, 1.0)
}

/// Build the Stage-A graph: flow-matching loss of the decoder conditioned on
/// `z = E(x)` plus the cosine tether of `z` to the frozen encoder.
///
/// Draws noise for the whole batch first, then one time per image.
pub fn stage_a_forward<R: Rng + ?Sized>(
    model: &StageAModel<'_>,
    batch: &Tensor,
    lambda: f32,
    rng: &mut R,
) -> Result<StageAForward> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be >= 0"));
    }
    let b = batch.dim0();
    let x0 = standard_normal(rng, batch.shape());
    let ts: Vec<f32> = (0..b).map(|_| flowmatch::sample_time(rng)).collect();
    let interp = flowmatch::interpolate_batch(&x0, batch, &ts)?;

    let mut g = Graph::new();
    let enc = model.encoder.bind(&mut g);
    let dec = model.decoder.bind(&mut g);
    let z = encoder::encode_graph(&mut g, &enc, model.enc_cfg, batch, model.token_index)?;
    let v = decode_velocity_graph(&mut g, &dec, model.dec_cfg, &interp.x_t, &ts, z)?;
    let fm = g.mse_loss(v, &interp.u_target)?;
    let (total, cos) = if lambda > 0.0 {
        let zf = encoder::encode(model.frozen, model.enc_cfg, batch, model.token_index)?;
        let cos = g.cosine_align_loss(z, &zf, lambda)?;
        (g.add(fm, cos)?, g.value(cos).item())
    } else {
        (fm, 0.0)
    };
    let fm_v = g.value(fm).item();
    let parts = StageALossParts {
        fm: fm_v,
        cos,
        total: fm_v + cos,
    };
    let zval = g.value(z).clone();
    Ok(StageAForward {
        graph: g,
        encoder: enc,
        decoder: dec,
        total,
        parts,
        z: zval,
    })
}

/// Loss parts of the Stage-A objective on one batch.
pub fn stage_a_loss<R: Rng + ?Sized>(
    model: &StageAModel<'_>,
    batch: &Tensor,
    lambda: f32,
    rng: &mut R,
) -> Result<StageALossParts> {
    Ok(stage_a_forward(model, batch, lambda, rng)?.parts)
}

/// Decode tokens `z` from noise drawn from `rng`, clamped to `[−1, 1]`.
pub fn decode_tokens<R: Rng + ?Sized>(
    dec: &ParamStore,
    cfg: &DecoderConfig,
    z: &Tensor,
    nfe: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let x0 = standard_normal(rng, &cfg.image_shape(z.dim0()));
    decode_from_noise(dec, cfg, z, &x0, nfe)
}

/// Decode tokens `z` starting from the given noise.
pub fn decode_from_noise(
    dec: &ParamStore,
    cfg: &DecoderConfig,
    z: &Tensor,
    x0: &Tensor,
    nfe: usize,
) -> Result<Tensor> {
    if nfe == 0 {
        return Err(Error::invalid("nfe must be >= 1"));
    }
    let field = DecoderField {
        params: dec,
        cfg,
        z,
    };
    let x = euler_integrate(&field, x0, nfe, None, None)?;
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Encode then decode `image` with `nfe` Euler steps.
pub fn reconstruct<R: Rng + ?Sized>(
    model: &StageAModel<'_>,
    image: &Tensor,
    nfe: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if nfe == 0 {
        return Err(Error::invalid("nfe must be >= 1"));
    }
    let z = encoder::encode(model.encoder, model.enc_cfg, image, model.token_index)?;
    decode_tokens(model.decoder, model.dec_cfg, &z, nfe, rng)
}
