//! Finite-difference gradient checks on toy models.

#![allow(dead_code)]

use std::collections::BTreeMap;

use onetok::decoder::{self, DecoderConfig};
use onetok::encoder::{self, VitConfig};
use onetok::flowmatch;
use onetok::graph::{Graph, Var};
use onetok::latent_generator::{self, ConditionToken, MixerConfig};
use onetok::params::{init_normal, ParamStore};
use onetok::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-3;
/// Step size relative to a tensor's RMS.
const REL_STEP: f32 = 0.05;

/// Step for a tensor: proportional to its RMS, so tiny embeddings are not
/// pushed through the curved region of layer norm.
pub fn step_for(t: &Tensor) -> f32 {
    let rms = (t.sq_norm() / t.numel().max(1) as f64).sqrt() as f32;
    REL_STEP * rms.max(1e-2)
}

/// Fourth-order central difference with step `h`, evaluated through `at`.
pub fn stencil(x0: f32, h: f32, at: &mut dyn FnMut(f32) -> f64) -> f64 {
    let (p1, m1) = (at(x0 + h), at(x0 - h));
    let (p2, m2) = (at(x0 + 2.0 * h), at(x0 - 2.0 * h));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h as f64)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over the concatenation of all entries.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-12)
}

/// Finite-difference gradient of `f` with respect to `names` in `store`.
pub fn fd_store(store: &ParamStore, names: &[String], f: &dyn Fn(&ParamStore) -> f32) -> Vec<f64> {
    let mut out = Vec::new();
    let mut s = store.clone();
    for n in names {
        let h = step_for(store.get(n).unwrap());
        for i in 0..store.get(n).unwrap().numel() {
            let orig = s.get(n).unwrap().data()[i];
            let d = stencil(orig, h, &mut |v| {
                s.get_mut(n).unwrap().data_mut()[i] = v;
                f(&s) as f64
            });
            s.get_mut(n).unwrap().data_mut()[i] = orig;
            out.push(d);
        }
    }
    out
}

pub fn fd_tensor(x: &Tensor, f: &dyn Fn(&Tensor) -> f32) -> Vec<f64> {
    let mut t = x.clone();
    let h = step_for(x);
    (0..x.numel())
        .map(|i| {
            let orig = t.data()[i];
            let d = stencil(orig, h, &mut |v| {
                t.data_mut()[i] = v;
                f(&t) as f64
            });
            t.data_mut()[i] = orig;
            d
        })
        .collect()
}

pub fn flat(grads: &BTreeMap<String, Tensor>, names: &[String]) -> Vec<f64> {
    names
        .iter()
        .flat_map(|n| grads[n].data().iter().map(|&v| v as f64))
        .collect()
}

/// `sum(out ⊙ proj)`: a linear read-out with well-scaled gradients.
pub fn project(g: &mut Graph, out: Var, proj: &Tensor) -> Var {
    let p = g.constant(proj.clone());
    let m = g.mul(out, p).unwrap();
    g.sum(m)
}

pub fn vit() -> VitConfig {
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

pub fn dec_cfg() -> DecoderConfig {
    DecoderConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        time_embed_dim: 4,
        mlp_ratio: 2,
    }
}

pub fn mixer_cfg() -> MixerConfig {
    MixerConfig {
        token_dim: 6,
        hidden_dim: 8,
        depth: 1,
        token_mlp_expansion: 2,
        channel_mlp_expansion: 2,
        num_classes: 3,
        class_embed_dim: 4,
        p_drop: 0.0,
    }
}

pub fn encoder_cls_embedding_gradient() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let cfg = vit();
    let mut p = encoder::init_encoder(&cfg, &mut rng(1)).unwrap();
    encoder::partition_params(&mut p, onetok::params::PartitionMode::ClsOnly).unwrap();
    let x = init_normal(&mut rng(2), &[3, 1, 8, 8], 1.0);
    let proj = init_normal(&mut rng(3), &[3, 8], 1.0);
    let loss = |s: &ParamStore| {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let z = encoder::encode_graph(&mut g, &b, &cfg, &x, 0).unwrap();
        let l = project(&mut g, z, &proj);
        (g, b, l)
    };
    let (g, b, l) = loss(&p);
    let mut grads = g.backward(l).unwrap();
    let grads = b.collect_grads(&mut grads);
    let names = vec!["token.0".to_string()];
    assert_eq!(grads.keys().cloned().collect::<Vec<_>>(), names);
    let fd = fd_store(&p, &names, &|s| {
        let (g, _, l) = loss(s);
        g.value(l).item()
    });
    let e = rel_err(&flat(&grads, &names), &fd);
    errs.push(("encoder token.0".to_string(), e));
    errs
}

pub fn encoder_all_parameters_gradient() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let cfg = vit();
    let p = encoder::init_encoder(&cfg, &mut rng(4)).unwrap();
    let x = init_normal(&mut rng(5), &[2, 1, 8, 8], 1.0);
    let proj = init_normal(&mut rng(6), &[2, 8], 1.0);
    let run = |s: &ParamStore| {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let z = encoder::encode_graph(&mut g, &b, &cfg, &x, 1).unwrap();
        let l = project(&mut g, z, &proj);
        (g, b, l)
    };
    let (g, b, l) = run(&p);
    let mut gr = g.backward(l).unwrap();
    let grads = b.collect_grads(&mut gr);
    let names: Vec<String> = p.names().filter(|n| n.as_str() != "token.0").cloned().collect();
    let fd = fd_store(&p, &names, &|s| {
        let (g, _, l) = run(s);
        g.value(l).item()
    });
    let e = rel_err(&flat(&grads, &names), &fd);
    errs.push(("encoder other parameters".to_string(), e));
    errs
}

pub fn decoder_gradients_for_latent_and_parameters() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let cfg = dec_cfg();
    let p = decoder::init_decoder(&cfg, 5, &mut rng(7)).unwrap();
    let x_t = init_normal(&mut rng(8), &[2, 1, 8, 8], 1.0);
    let z = init_normal(&mut rng(9), &[2, 5], 1.0);
    let target = init_normal(&mut rng(10), &[2, 1, 8, 8], 1.0);
    let ts = [0.3f32, 0.8];
    let run = |s: &ParamStore, z: &Tensor| {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let zv = g.leaf(z.clone(), true);
        let v = decoder::decode_velocity_graph(&mut g, &b, &cfg, &x_t, &ts, zv).unwrap();
        let l = g.mse_loss(v, &target).unwrap();
        (g, b, zv, l)
    };
    let (g, b, zv, l) = run(&p, &z);
    let mut gr = g.backward(l).unwrap();
    let gz: Vec<f64> = gr.take(zv).unwrap().data().iter().map(|&v| v as f64).collect();
    let grads = b.collect_grads(&mut gr);

    let fdz = fd_tensor(&z, &|zz| {
        let (g, _, _, l) = run(&p, zz);
        g.value(l).item()
    });
    let e = rel_err(&gz, &fdz);
    errs.push(("decoder latent".to_string(), e));

    let groups: [&[&str]; 4] = [
        &["z.w", "z.b", "patch.w", "patch.b", "pos"],
        &["time.fc1.w", "time.fc1.b", "time.fc2.w", "time.fc2.b"],
        &[
            "blocks.0.attn.q.w",
            "blocks.0.attn.k.w",
            "blocks.0.attn.v.w",
            "blocks.0.attn.proj.w",
            "blocks.0.ln1.g",
            "blocks.0.mlp.fc1.w",
        ],
        &["norm.g", "norm.b", "out.w", "out.b"],
    ];
    for names in groups {
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let fd = fd_store(&p, &names, &|s| {
            let (g, _, _, l) = run(s, &z);
            g.value(l).item()
        });
        let e = rel_err(&flat(&grads, &names), &fd);
        errs.push((format!("decoder {:?}", names), e));
    }
    errs
}

pub fn mixer_gradients() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let cfg = mixer_cfg();
    let p = latent_generator::init_mixer(&cfg, &mut rng(11)).unwrap();
    let z = init_normal(&mut rng(12), &[3, 6], 1.0);
    let target = init_normal(&mut rng(13), &[3, 6], 1.0);
    let ts = [0.1f32, 0.5, 0.9];
    let cond = [ConditionToken::class(0), ConditionToken::NULL, ConditionToken::class(2)];
    let run = |s: &ParamStore, z: &Tensor| {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let zv = g.leaf(z.clone(), true);
        let v = latent_generator::mixer_velocity_graph(&mut g, &b, &cfg, zv, &ts, &cond).unwrap();
        let l = g.mse_loss(v, &target).unwrap();
        (g, b, zv, l)
    };
    let (g, b, zv, l) = run(&p, &z);
    let mut gr = g.backward(l).unwrap();
    let gz: Vec<f64> = gr.take(zv).unwrap().data().iter().map(|&v| v as f64).collect();
    let grads = b.collect_grads(&mut gr);
    let fdz = fd_tensor(&z, &|zz| {
        let (g, _, _, l) = run(&p, zz);
        g.value(l).item()
    });
    let e = rel_err(&gz, &fdz);
    errs.push(("mixer input".to_string(), e));
    let names: Vec<String> = p.names().cloned().collect();
    let fd = fd_store(&p, &names, &|s| {
        let (g, _, _, l) = run(s, &z);
        g.value(l).item()
    });
    let e = rel_err(&flat(&grads, &names), &fd);
    errs.push(("mixer parameters".to_string(), e));
    errs
}

pub fn flow_matching_loss_gradient() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let v = init_normal(&mut rng(14), &[4, 5], 1.0);
    let u = init_normal(&mut rng(15), &[4, 5], 1.0);
    let (_, grad) = flowmatch::fm_loss_with_grad(&v, &u).unwrap();
    let an: Vec<f64> = grad.data().iter().map(|&x| x as f64).collect();
    let fd = fd_tensor(&v, &|vv| flowmatch::fm_loss(vv, &u).unwrap());
    let e = rel_err(&an, &fd);
    errs.push(("flow-matching loss".to_string(), e));
    errs
}

pub fn contrastive_loss_gradient() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let z = init_normal(&mut rng(16), &[6, 4], 1.0);
    let run = |zz: &Tensor| {
        let mut g = Graph::new();
        let v = g.leaf(zz.clone(), true);
        let l = g.nt_xent_loss(v, 0.5).unwrap();
        (g, v, l)
    };
    let (g, v, l) = run(&z);
    let an: Vec<f64> = g.backward(l).unwrap().take(v).unwrap().data().iter().map(|&x| x as f64).collect();
    let fd = fd_tensor(&z, &|zz| {
        let (g, _, l) = run(zz);
        g.value(l).item()
    });
    let e = rel_err(&an, &fd);
    errs.push(("contrastive loss".to_string(), e));
    errs
}

pub fn cosine_alignment_gradient() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let z = init_normal(&mut rng(17), &[3, 4], 1.0);
    let zf = init_normal(&mut rng(18), &[3, 4], 1.0);
    let run = |zz: &Tensor| {
        let mut g = Graph::new();
        let v = g.leaf(zz.clone(), true);
        let l = g.cosine_align_loss(v, &zf, 0.7).unwrap();
        (g, v, l)
    };
    let (g, v, l) = run(&z);
    let an: Vec<f64> = g.backward(l).unwrap().take(v).unwrap().data().iter().map(|&x| x as f64).collect();
    let fd = fd_tensor(&z, &|zz| {
        let (g, _, l) = run(zz);
        g.value(l).item()
    });
    let e = rel_err(&an, &fd);
    errs.push(("cosine alignment".to_string(), e));
    errs
}

/// Every gradient check, labelled.
pub fn all_gradient_checks() -> Vec<(String, f64)> {
    let mut v = encoder_cls_embedding_gradient();
    v.extend(encoder_all_parameters_gradient());
    v.extend(decoder_gradients_for_latent_and_parameters());
    v.extend(mixer_gradients());
    v.extend(flow_matching_loss_gradient());
    v.extend(contrastive_loss_gradient());
    v.extend(cosine_alignment_gradient());
    v
}
