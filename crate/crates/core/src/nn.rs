//! Parameter layouts and forward builders shared by the three networks.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{init_linear, Bound, ParamStore};
use crate::tensor::Tensor;

pub fn add_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    store.insert(format!("{prefix}.w"), init_linear(rng, fan_in, fan_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn add_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
}

pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{prefix}.g"))?;
    let bias = p.var(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias)
}

/// Two-layer GELU MLP `fc2(gelu(fc1(x)))`.
pub fn mlp(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

pub fn add_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut R,
) {
    add_linear(store, &format!("{prefix}.fc1"), dim, hidden, rng);
    add_linear(store, &format!("{prefix}.fc2"), hidden, dim, rng);
}

/// Pre-norm transformer block parameters.
pub fn add_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
    rng: &mut R,
) {
    add_layer_norm(store, &format!("{prefix}.ln1"), dim);
    for name in ["q", "k", "v", "proj"] {
        add_linear(store, &format!("{prefix}.attn.{name}"), dim, dim, rng);
    }
    add_layer_norm(store, &format!("{prefix}.ln2"), dim);
    add_mlp(store, &format!("{prefix}.mlp"), dim, dim * mlp_ratio, rng);
}

/// `x + attn(ln1(x))`, then `x + mlp(ln2(x))`, over `[batch·tokens, dim]`.
pub fn block(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let q = linear(g, p, &format!("{prefix}.attn.q"), h)?;
    let k = linear(g, p, &format!("{prefix}.attn.k"), h)?;
    let v = linear(g, p, &format!("{prefix}.attn.v"), h)?;
    let a = g.attention(q, k, v, batch, heads)?;
    let a = linear(g, p, &format!("{prefix}.attn.proj"), a)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let h = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    g.add(x, h)
}

/// Sinusoidal features of `t ∈ [0, 1]` (scaled by 1000), `[len(ts), dim]`.
pub fn sinusoidal_embedding(ts: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; ts.len() * dim];
    for (r, &t) in ts.iter().enumerate() {
        let t = t as f64 * 1000.0;
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out[r * dim + i] = (t * freq).sin() as f32;
            out[r * dim + half + i] = (t * freq).cos() as f32;
        }
    }
    Tensor::from_vec(&[ts.len(), dim], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero() {
        let e = sinusoidal_embedding(&[0.0], 4);
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sinusoid_distinguishes_times() {
        let e = sinusoidal_embedding(&[0.0, 0.9], 16);
        assert_ne!(e.row(0), e.row(1));
    }
}
