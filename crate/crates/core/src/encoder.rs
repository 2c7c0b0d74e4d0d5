//! ViT-style image encoder whose pooled extra token is the latent `z`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Broadcast, Graph, Var};
use crate::kernels;
use crate::nn;
use crate::optim::AdamW;
use crate::params::{init_normal, Bound, ParamStore, PartitionMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub extra_tokens: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 4,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            extra_tokens: 1,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
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
        if self.extra_tokens == 0 {
            return Err(Error::invalid("encoder needs at least one extra token"));
        }
        if self.channels == 0 || self.depth == 0 {
            return Err(Error::invalid("channels and depth must be positive"));
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
}

/// Name of extra token `i`; token 0 is the pooled token.
pub fn token_name(i: usize) -> String {
    format!("token.{i}")
}

/// For one `C×H×W` image, the source index of every element of its
/// `N×(C·p²)` patch matrix (row-major patches, channel-then-pixel inside).
pub fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(ch * h * w + (py * p + dy) * w + px * p + dx);
                    }
                }
            }
        }
    }
    idx
}

fn image_dims(images: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *images.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::invalid(format!(
            "expected a B×C×H×W batch, got {:?}",
            images.shape()
        ))),
    }
}

/// `B×C×H×W → B×N×(C·p²)`.
pub fn patchify(images: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = image_dims(images)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "spatial dims {}×{} not divisible by patch size {}",
            h, w, p
        )));
    }
    let idx = patch_index(c, h, w, p);
    let per = c * h * w;
    let mut out = Vec::with_capacity(images.numel());
    for i in 0..b {
        let img = &images.data()[i * per..(i + 1) * per];
        out.extend(idx.iter().map(|&j| img[j]));
    }
    Tensor::from_vec(&[b, (h / p) * (w / p), c * p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let per = c * h * w;
    if p == 0 || h % p != 0 || w % p != 0 || per == 0 || tokens.numel() % per != 0 {
        return Err(Error::invalid(format!(
            "cannot unpatchify {:?} into {}×{}×{} with patch {}",
            tokens.shape(),
            c,
            h,
            w,
            p
        )));
    }
    let b = tokens.numel() / per;
    let idx = patch_index(c, h, w, p);
    let mut out = vec![0.0f32; tokens.numel()];
    for i in 0..b {
        let src = &tokens.data()[i * per..(i + 1) * per];
        let dst = &mut out[i * per..(i + 1) * per];
        for (k, &j) in idx.iter().enumerate() {
            dst[j] = src[k];
        }
    }
    Tensor::from_vec(&[b, c, h, w], out)
}

pub fn init_encoder<R: Rng + ?Sized>(cfg: &VitConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut s = ParamStore::new();
    nn::add_linear(&mut s, "patch", cfg.patch_dim(), d, rng);
    s.insert("pos", init_normal(rng, &[cfg.num_patches(), d], 0.02));
    for i in 0..cfg.extra_tokens {
        s.insert(token_name(i), init_normal(rng, &[1, d], 0.02));
    }
    for l in 0..cfg.depth {
        nn::add_block(&mut s, &format!("blocks.{l}"), d, cfg.mlp_ratio, rng);
    }
    nn::add_layer_norm(&mut s, "norm", d);
    Ok(s)
}

/// Set the trainable partition of encoder parameters.
pub fn partition_params(params: &mut ParamStore, mode: PartitionMode) -> Result<()> {
    let names: Vec<String> = match mode {
        PartitionMode::ClsOnly => {
            params.require(&token_name(0))?;
            vec![token_name(0)]
        }
        PartitionMode::All => params.names().cloned().collect(),
        PartitionMode::None => Vec::new(),
    };
    params.set_trainable(names)
}

/// Record the encoder forward on `g`; returns the `B×D` pooled tokens.
pub fn encode_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &VitConfig,
    images: &Tensor,
    token_index: usize,
) -> Result<Var> {
    cfg.validate()?;
    if token_index >= cfg.extra_tokens {
        return Err(Error::invalid(format!(
            "token index {} out of range for {} extra tokens",
            token_index, cfg.extra_tokens
        )));
    }
    let (b, c, h, w) = image_dims(images)?;
    if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::invalid(format!(
            "encoder expects {}×{}×{} images, got {:?}",
            cfg.channels,
            cfg.image_size,
            cfg.image_size,
            images.shape()
        )));
    }
    if b == 0 {
        return Err(Error::invalid("empty image batch"));
    }
    let n = cfg.num_patches();
    let patches = patchify(images, cfg.patch_size)?.reshape(&[b * n, cfg.patch_dim()])?;
    let patches = g.constant(patches);
    let x = nn::linear(g, p, "patch", patches)?;
    let x = g.add_broadcast(x, p.var("pos")?, Broadcast::Tile)?;
    let mut parts = Vec::with_capacity(cfg.extra_tokens + 1);
    for i in 0..cfg.extra_tokens {
        let tok = g.gather_rows(p.var(&token_name(i))?, vec![0; b])?;
        parts.push((tok, 1));
    }
    parts.push((x, n));
    let mut x = g.concat_tokens(&parts, b)?;
    let t = cfg.extra_tokens + n;
    for l in 0..cfg.depth {
        x = nn::block(g, p, &format!("blocks.{l}"), x, b, cfg.heads)?;
    }
    let pooled = g.gather_rows(x, (0..b).map(|i| i * t + token_index).collect())?;
    nn::layer_norm(g, p, "norm", pooled)
}

/// Pooled tokens `B×D` for a batch of images (no gradients).
pub fn encode(
    params: &ParamStore,
    cfg: &VitConfig,
    images: &Tensor,
    token_index: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let z = encode_graph(&mut g, &p, cfg, images, token_index)?;
    Ok(g.value(z).clone())
}

/// [`encode`] in chunks of `chunk` images; identical to a single call.
pub fn encode_chunked(
    params: &ParamStore,
    cfg: &VitConfig,
    images: &Tensor,
    token_index: usize,
    chunk: usize,
) -> Result<Tensor> {
    let b = images.dim0();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < b {
        let end = (start + chunk.max(1)).min(b);
        let rows: Vec<usize> = (start..end).collect();
        parts.push(encode(params, cfg, &images.select_rows(&rows), token_index)?);
        start = end;
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, cfg.embed_dim]));
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// `lambda · mean_i (1 − cos(z_i, z_frozen_i))`.
pub fn cosine_alignment_loss(z: &Tensor, z_frozen: &Tensor, lambda: f32) -> Result<f32> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be >= 0"));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let l = g.cosine_align_loss(zv, z_frozen, lambda)?;
    Ok(g.value(l).item())
}

/// Mean row-wise cosine similarity.
pub fn mean_cosine(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.expect_same_shape(b)?;
    let n = a.dim0();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut s = 0.0f64;
    for i in 0..n {
        let (x, y) = (a.row(i), b.row(i));
        let den = (kernels::dot64(x, x) * kernels::dot64(y, y)).sqrt();
        if den == 0.0 {
            return Err(Error::Numerical(format!("zero-norm row {}", i)));
        }
        s += kernels::dot64(x, y) / den;
    }
    Ok((s / n as f64) as f32)
}

/// Random view parameters for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Crop side as a fraction of the image side, in `[0.6, 1.0]`.
    pub scale: f32,
    /// Crop offsets in pixels.
    pub off_y: f32,
    pub off_x: f32,
    pub flip: bool,
    /// Additive per-channel brightness shift in `[−0.2, 0.2]`.
    pub jitter: Vec<f32>,
}

impl AugmentParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: 1.0,
            off_y: 0.0,
            off_x: 0.0,
            flip: false,
            jitter: vec![0.0; channels],
        }
    }

    /// Draws, in order: scale, y offset, x offset, flip, one jitter per channel.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, channels: usize, h: usize, w: usize) -> Self {
        let scale = 1.0 - 0.4 * rng.random::<f32>();
        let off_y = rng.random::<f32>() * (h as f32 * (1.0 - scale));
        let off_x = rng.random::<f32>() * (w as f32 * (1.0 - scale));
        let flip = rng.random::<f32>() >= 0.5;
        let jitter = (0..channels)
            .map(|_| 0.2 * (2.0 * rng.random::<f32>() - 1.0))
            .collect();
        Self {
            scale,
            off_y,
            off_x,
            flip,
            jitter,
        }
    }

    /// Apply to one `C×H×W` image.
    pub fn apply(&self, image: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; c * h * w];
        let (sy, sx) = (self.scale, self.scale);
        for ch in 0..c {
            let src = &image[ch * h * w..(ch + 1) * h * w];
            let shift = self.jitter.get(ch).copied().unwrap_or(0.0);
            for i in 0..h {
                let fy = self.off_y + (i as f32 + 0.5) * sy - 0.5;
                for j in 0..w {
                    let jj = if self.flip { w - 1 - j } else { j };
                    let fx = self.off_x + (jj as f32 + 0.5) * sx - 0.5;
                    let v = bilinear(src, h, w, fy, fx) + shift;
                    out[ch * h * w + i * w + j] = v.clamp(-1.0, 1.0);
                }
            }
        }
        out
    }
}

fn bilinear(src: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    if fy == 0.0 && fx == 0.0 {
        return src[y0 * w + x0];
    }
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Random crop-and-resize, horizontal flip and brightness jitter of a
/// single `C×H×W` (or `1×C×H×W`) image. Output stays in `[−1, 1]`.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => return Err(Error::invalid(format!("cannot augment shape {:?}", image.shape()))),
    };
    let params = AugmentParams::sample(rng, c, h, w);
    Tensor::from_vec(image.shape(), params.apply(image.data(), c, h, w))
}

/// Two augmented views of every image: `[view1 batch ∥ view2 batch]`.
pub fn two_views<R: Rng + ?Sized>(batch: &Tensor, rng: &mut R) -> Result<Tensor> {
    let (b, c, h, w) = image_dims(batch)?;
    let params: Vec<AugmentParams> = (0..2 * b)
        .map(|_| AugmentParams::sample(rng, c, h, w))
        .collect();
    let per = c * h * w;
    let views = kernels::map_collect(2 * b, |k| params[k].apply(&batch.data()[(k % b) * per..(k % b + 1) * per], c, h, w));
    Tensor::from_vec(&[2 * b, c, h, w], views.concat())
}

/// One contrastive pretraining step on `batch`; returns the loss.
pub fn ssl_pretrain_step<R: Rng + ?Sized>(
    params: &mut ParamStore,
    cfg: &VitConfig,
    batch: &Tensor,
    temperature: f32,
    rng: &mut R,
    opt: &mut AdamW,
) -> Result<f32> {
    if batch.dim0() < 2 {
        return Err(Error::invalid("contrastive pretraining needs batch size >= 2"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let views = two_views(batch, rng)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let z = encode_graph(&mut g, &p, cfg, &views, 0)?;
    let loss = g.nt_xent_loss(z, temperature)?;
    let mut grads = g.backward(loss)?;
    let grads = p.collect_grads(&mut grads);
    opt.update("encoder.", params, &grads)?;
    opt.finish_step();
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> VitConfig {
        VitConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            extra_tokens: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn patchify_examples() {
        let z = Tensor::zeros(&[1, 1, 4, 4]);
        let p = patchify(&z, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert!(p.data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(patchify(&x, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(patchify(&Tensor::zeros(&[1, 1, 5, 4]), 2).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = init_normal(&mut rng, &[1, 3, 8, 8], 1.0);
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 4, 48]);
        assert!(unpatchify(&p, 3, 8, 8, 4).unwrap().bits_eq(&x));
    }

    #[test]
    fn partition_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = init_encoder(&tiny(), &mut rng).unwrap();
        partition_params(&mut s, PartitionMode::ClsOnly).unwrap();
        assert_eq!(s.trainable_names().collect::<Vec<_>>(), vec!["token.0"]);
        partition_params(&mut s, PartitionMode::None).unwrap();
        assert_eq!(s.trainable_names().count(), 0);
        partition_params(&mut s, PartitionMode::All).unwrap();
        assert_eq!(s.trainable_names().count(), s.len());
    }

    #[test]
    fn encode_shape_and_batch_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny();
        let s = init_encoder(&cfg, &mut rng).unwrap();
        let a = init_normal(&mut rng, &[1, 1, 8, 8], 0.5);
        let b = init_normal(&mut rng, &[1, 1, 8, 8], 0.5);
        let batch = Tensor::concat_rows(&[&a, &b, &a]).unwrap();
        let z = encode(&s, &cfg, &batch, 0).unwrap();
        assert_eq!(z.shape(), &[3, 8]);
        assert!(z.row(0).iter().zip(z.row(2)).all(|(x, y)| x.to_bits() == y.to_bits()));
        let za = encode(&s, &cfg, &a, 0).unwrap();
        assert!(za.row(0).iter().zip(z.row(0)).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(encode(&s, &cfg, &a, 2).is_err());
        let z1 = encode(&s, &cfg, &a, 1).unwrap();
        assert_ne!(z1.data(), za.data());
    }

    #[test]
    fn cosine_loss_examples() {
        let z = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        assert_eq!(cosine_alignment_loss(&z, &z, 1.0).unwrap(), 0.0);
        let neg = z.map(|v| -v);
        assert!((cosine_alignment_loss(&z, &neg, 1.0).unwrap() - 2.0).abs() < 1e-6);
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![0.0, 3.0]).unwrap();
        assert!((cosine_alignment_loss(&a, &b, 0.5).unwrap() - 0.5).abs() < 1e-7);
        let zero = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            cosine_alignment_loss(&zero, &b, 1.0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn augment_identity_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = init_normal(&mut rng, &[3, 8, 8], 0.5).map(|v| v.clamp(-1.0, 1.0));
        let id = AugmentParams::identity(3).apply(x.data(), 3, 8, 8);
        assert_eq!(id, x.data());
        for s in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let y = augment(&x, &mut r).unwrap();
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let y1 = augment(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y2 = augment(&x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(y1.data(), y2.data());
    }

    #[test]
    fn ssl_step_rejects_single_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = tiny();
        let mut s = init_encoder(&cfg, &mut rng).unwrap();
        let mut opt = AdamW::new(Default::default());
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(ssl_pretrain_step(&mut s, &cfg, &x, 0.5, &mut rng, &mut opt).is_err());
    }
}
