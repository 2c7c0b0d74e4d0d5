//! Attention-free MLP-Mixer flow-matching generator over single latent tokens.
//!
//! Each sample is a three-token sequence `[z_t, class, time]`. Blocks
//! alternate a token-mixing MLP (across the three tokens) and a
//! channel-mixing MLP (across the hidden width).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::{self, euler_integrate, GuidanceSpec, VelocityField};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{init_normal, Bound, ParamStore};
use crate::tensor::Tensor;

const SEQ: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub token_mlp_expansion: usize,
    pub channel_mlp_expansion: usize,
    pub num_classes: usize,
    pub class_embed_dim: usize,
    pub p_drop: f64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            token_dim: 128,
            hidden_dim: 256,
            depth: 8,
            token_mlp_expansion: 2,
            channel_mlp_expansion: 4,
            num_classes: 10,
            class_embed_dim: 64,
            p_drop: 0.1,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("mixer depth must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::invalid(format!("p_drop {} outside [0, 1]", self.p_drop)));
        }
        if self.hidden_dim < 2 || self.hidden_dim % 2 != 0 {
            return Err(Error::invalid("hidden_dim must be even and >= 2"));
        }
        if self.token_dim == 0 || self.class_embed_dim == 0 {
            return Err(Error::invalid("token_dim and class_embed_dim must be positive"));
        }
        Ok(())
    }
}

/// Optional class label; `None` is the null (dropped) condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConditionToken {
    pub class_id: Option<usize>,
}

impl ConditionToken {
    pub const NULL: ConditionToken = ConditionToken { class_id: None };

    pub fn class(k: usize) -> Self {
        Self { class_id: Some(k) }
    }

    pub fn is_null(&self) -> bool {
        self.class_id.is_none()
    }
}

/// Replace `cond` by the null condition with probability `p_drop`.
/// Consumes exactly one uniform draw.
pub fn drop_condition<R: Rng + ?Sized>(
    cond: ConditionToken,
    p_drop: f64,
    rng: &mut R,
) -> ConditionToken {
    let u: f64 = rng.random();
    if u < p_drop {
        ConditionToken::NULL
    } else {
        cond
    }
}

/// Per-dimension standardization statistics of the latent tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    /// Column mean and population standard deviation.
    pub fn from_latents(z: &Tensor) -> Result<Self> {
        let n = z.dim0();
        if n == 0 {
            return Err(Error::invalid("no latents"));
        }
        let d = z.row_len();
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(z.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; d];
        for i in 0..n {
            for ((s, &v), m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
                let dv = v as f64 - m;
                *s += dv * dv;
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&s| (s / n as f64).sqrt() as f32).collect(),
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.row_len() != self.mean.len() {
            return Err(Error::invalid(format!(
                "latent width {} does not match stats width {}",
                z.row_len(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let d = self.mean.len();
        let mut out = z.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s.max(f32::MIN_POSITIVE);
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let d = self.mean.len();
        let mut out = z.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }
}

pub fn init_mixer<R: Rng + ?Sized>(cfg: &MixerConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let h = cfg.hidden_dim;
    let mut s = ParamStore::new();
    nn::add_linear(&mut s, "in", cfg.token_dim, h, rng);
    // row `num_classes` is the learned null condition
    s.insert(
        "class_embed",
        init_normal(rng, &[cfg.num_classes + 1, cfg.class_embed_dim], 1.0),
    );
    nn::add_linear(&mut s, "class_proj", cfg.class_embed_dim, h, rng);
    nn::add_linear(&mut s, "time", h, h, rng);
    for l in 0..cfg.depth {
        let pre = format!("blocks.{l}");
        nn::add_layer_norm(&mut s, &format!("{pre}.ln1"), h);
        nn::add_mlp(&mut s, &format!("{pre}.token"), SEQ, SEQ * cfg.token_mlp_expansion, rng);
        nn::add_layer_norm(&mut s, &format!("{pre}.ln2"), h);
        nn::add_mlp(&mut s, &format!("{pre}.channel"), h, h * cfg.channel_mlp_expansion, rng);
    }
    nn::add_layer_norm(&mut s, "norm", h);
    nn::add_linear(&mut s, "out", h, cfg.token_dim, rng);
    Ok(s)
}

fn class_rows(cfg: &MixerConfig, cond: &[ConditionToken]) -> Result<Vec<usize>> {
    cond.iter()
        .map(|c| match c.class_id {
            None => Ok(cfg.num_classes),
            Some(k) if k < cfg.num_classes => Ok(k),
            Some(k) => Err(Error::invalid(format!(
                "class id {} out of range for {} classes",
                k, cfg.num_classes
            ))),
        })
        .collect()
}

/// `[B·3, H] ↔ [B·H, 3]` per-sample transpose index.
fn transpose_index(b: usize, rows: usize, cols: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * rows * cols);
    for s in 0..b {
        for c in 0..cols {
            for r in 0..rows {
                idx.push(s * rows * cols + r * cols + c);
            }
        }
    }
    idx
}

/// Record the mixer forward; returns the `B×D` velocity.
pub fn mixer_velocity_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &MixerConfig,
    z_t: Var,
    t: &[f32],
    cond: &[ConditionToken],
) -> Result<Var> {
    cfg.validate()?;
    let zv = g.value(z_t);
    let b = zv.dim0();
    if zv.shape() != [b, cfg.token_dim] {
        return Err(Error::invalid(format!(
            "mixer expects B×{} tokens, got {:?}",
            cfg.token_dim,
            zv.shape()
        )));
    }
    if t.len() != b || cond.len() != b {
        return Err(Error::invalid("time/condition count does not match batch"));
    }
    let h = cfg.hidden_dim;
    let rows = class_rows(cfg, cond)?;
    let ztok = nn::linear(g, p, "in", z_t)?;
    let ce = g.gather_rows(p.var("class_embed")?, rows)?;
    let ctok = nn::linear(g, p, "class_proj", ce)?;
    let temb = g.constant(nn::sinusoidal_embedding(t, h));
    let ttok = nn::linear(g, p, "time", temb)?;
    let mut x = g.concat_tokens(&[(ztok, 1), (ctok, 1), (ttok, 1)], b)?;
    let to_channels = transpose_index(b, SEQ, h);
    let to_tokens = transpose_index(b, h, SEQ);
    for l in 0..cfg.depth {
        let pre = format!("blocks.{l}");
        let y = nn::layer_norm(g, p, &format!("{pre}.ln1"), x)?;
        let y = g.permute(y, to_channels.clone(), &[b * h, SEQ])?;
        let y = nn::mlp(g, p, &format!("{pre}.token"), y)?;
        let y = g.permute(y, to_tokens.clone(), &[b * SEQ, h])?;
        x = g.add(x, y)?;
        let y = nn::layer_norm(g, p, &format!("{pre}.ln2"), x)?;
        let y = nn::mlp(g, p, &format!("{pre}.channel"), y)?;
        x = g.add(x, y)?;
    }
    let x = g.gather_rows(x, (0..b).map(|i| i * SEQ).collect())?;
    let x = nn::layer_norm(g, p, "norm", x)?;
    nn::linear(g, p, "out", x)
}

/// Mixer velocity with one time per row.
pub fn mixer_velocity_batch(
    params: &ParamStore,
    cfg: &MixerConfig,
    z_t: &Tensor,
    t: &[f32],
    cond: &[ConditionToken],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let z = g.constant(z_t.clone());
    let v = mixer_velocity_graph(&mut g, &p, cfg, z, t, cond)?;
    Ok(g.value(v).clone())
}

pub fn mixer_velocity(
    params: &ParamStore,
    cfg: &MixerConfig,
    z_t: &Tensor,
    t: f32,
    cond: &[ConditionToken],
) -> Result<Tensor> {
    mixer_velocity_batch(params, cfg, z_t, &vec![t; z_t.dim0()], cond)
}

/// The mixer as a latent-space velocity field.
pub struct MixerField<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a MixerConfig,
}

impl VelocityField for MixerField<'_> {
    type Cond = Vec<ConditionToken>;

    fn velocity(&self, x: &Tensor, t: f32, cond: Option<&Self::Cond>) -> Result<Tensor> {
        let null;
        let cond = match cond {
            Some(c) => c,
            None => {
                null = vec![ConditionToken::NULL; x.dim0()];
                &null
            }
        };
        mixer_velocity(self.params, self.cfg, x, t, cond)
    }
}

/// Recorded Stage-B forward.
pub struct StageBForward {
    pub graph: Graph,
    pub params: Bound,
    pub loss: Var,
}

/// Build the Stage-B flow-matching graph on (already standardized) tokens.
///
/// Draw order: one condition-drop draw per row, the noise batch, one time
/// per row.
pub fn stage_b_forward<R: Rng + ?Sized>(
    params: &ParamStore,
    cfg: &MixerConfig,
    z_batch: &Tensor,
    cond: &[ConditionToken],
    rng: &mut R,
) -> Result<StageBForward> {
    let b = z_batch.dim0();
    if cond.len() != b {
        return Err(Error::invalid("condition count does not match batch"));
    }
    let dropped: Vec<ConditionToken> = cond
        .iter()
        .map(|&c| drop_condition(c, cfg.p_drop, rng))
        .collect();
    let z0 = init_normal(rng, z_batch.shape(), 1.0);
    let ts: Vec<f32> = (0..b).map(|_| flowmatch::sample_time(rng)).collect();
    let interp = flowmatch::interpolate_batch(&z0, z_batch, &ts)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.constant(interp.x_t);
    let v = mixer_velocity_graph(&mut g, &p, cfg, x, &ts, &dropped)?;
    let loss = g.mse_loss(v, &interp.u_target)?;
    Ok(StageBForward {
        graph: g,
        params: p,
        loss,
    })
}

pub fn stage_b_loss<R: Rng + ?Sized>(
    params: &ParamStore,
    cfg: &MixerConfig,
    z_batch: &Tensor,
    cond: &[ConditionToken],
    rng: &mut R,
) -> Result<f32> {
    let f = stage_b_forward(params, cfg, z_batch, cond, rng)?;
    Ok(f.graph.value(f.loss).item())
}

/// Sample `class_ids.len()` latent tokens with guided Euler integration,
/// returned in de-normalized (encoder) space.
pub fn sample_latents<R: Rng + ?Sized>(
    params: &ParamStore,
    cfg: &MixerConfig,
    stats: &LatentStats,
    class_ids: &[Option<usize>],
    nfe: usize,
    cfg_scale: f32,
    rng: &mut R,
) -> Result<Tensor> {
    if nfe == 0 {
        return Err(Error::invalid("nfe must be >= 1"));
    }
    let b = class_ids.len();
    let cond: Vec<ConditionToken> = class_ids
        .iter()
        .map(|&c| ConditionToken { class_id: c })
        .collect();
    class_rows(cfg, &cond)?;
    let z0 = init_normal(rng, &[b, cfg.token_dim], 1.0);
    if b == 0 {
        return Ok(z0);
    }
    let field = MixerField { params, cfg };
    let guidance = GuidanceSpec {
        scale: cfg_scale,
        null_cond: vec![ConditionToken::NULL; b],
    };
    let z = euler_integrate(&field, &z0, nfe, Some(&cond), Some(&guidance))?;
    stats.denormalize(&z)
}

/// One `1×D` latent token.
pub fn sample_latent<R: Rng + ?Sized>(
    params: &ParamStore,
    cfg: &MixerConfig,
    stats: &LatentStats,
    class_id: Option<usize>,
    nfe: usize,
    cfg_scale: f32,
    rng: &mut R,
) -> Result<Tensor> {
    sample_latents(params, cfg, stats, &[class_id], nfe, cfg_scale, rng)
}
