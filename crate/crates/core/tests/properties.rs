//! Property tests over the numerical and serialization invariants.

use nalgebra::DMatrix;
use onetok::config::{parse_config_str, RunConfig};
use onetok::encoder::{patchify, unpatchify};
use onetok::eval::{self, GaussianStats};
use onetok::flowmatch::{cfg_velocity, interpolate};
use onetok::kernels;
use onetok::optim::OptimConfig;
use onetok::params::{init_normal, ParamStore};
use onetok::pipeline::{ema_update, Checkpoint};
use onetok::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    init_normal(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

fn random_spd(seed: u64, n: usize) -> DMatrix<f64> {
    let a = normal(seed, &[n, n]);
    let m = DMatrix::from_row_slice(n, n, &a.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    &m * m.transpose() + DMatrix::identity(n, n) * 1e-3
}

fn stats(seed: u64, n: usize, d: usize) -> GaussianStats {
    eval::gaussian_stats(&normal(seed, &[n, d]).map(|v| v * 1.5 + 0.2)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn patchify_inverts(seed in 0u64..1000, c in 1usize..4, k in 1usize..4) {
        let p = 2;
        let s = p * k;
        let x = normal(seed, &[2, c, s, s]);
        let back = unpatchify(&patchify(&x, p).unwrap(), c, s, s, p).unwrap();
        prop_assert!(back.bits_eq(&x));
    }

    #[test]
    fn interpolant_endpoints_are_exact(seed in 0u64..1000, n in 1usize..20) {
        let x0 = normal(seed, &[n]);
        let x1 = normal(seed + 1, &[n]);
        prop_assert!(interpolate(&x0, &x1, 0.0).unwrap().x_t.bits_eq(&x0));
        prop_assert!(interpolate(&x0, &x1, 1.0).unwrap().x_t.bits_eq(&x1));
    }

    #[test]
    fn guidance_reductions_are_exact(seed in 0u64..1000, n in 1usize..20) {
        let c = normal(seed, &[n]);
        let u = normal(seed + 7, &[n]);
        prop_assert!(cfg_velocity(&c, &u, 1.0).unwrap().bits_eq(&c));
        prop_assert!(cfg_velocity(&c, &u, 0.0).unwrap().bits_eq(&u));
    }

    #[test]
    fn parallel_gemm_matches_sequential(seed in 0u64..1000, m in 1usize..40, k in 1usize..40, n in 1usize..40) {
        let a = normal(seed, &[m, k]);
        let b = normal(seed + 1, &[k, n]);
        let x = kernels::gemm(a.data(), b.data(), m, k, n);
        let y = kernels::gemm_seq(a.data(), b.data(), m, k, n);
        prop_assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn frechet_self_zero_and_symmetric(s1 in 0u64..1000, s2 in 0u64..1000, d in 1usize..6) {
        let p = stats(s1, 40, d);
        let q = stats(s2 + 5000, 40, d);
        prop_assert!(eval::frechet_distance(&p, &p).unwrap() <= 1e-6);
        let a = eval::frechet_distance(&p, &q).unwrap();
        let b = eval::frechet_distance(&q, &p).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn matrix_sqrt_squares_back(seed in 0u64..1000, n in 1usize..24) {
        let a = random_spd(seed, n);
        let r = eval::matrix_sqrt_psd(&a).unwrap();
        let err = (&r * &r - &a).norm() / a.norm();
        prop_assert!(err <= 1e-5, "{}", err);
    }

    #[test]
    fn ssim_identity_and_symmetry(seed in 0u64..1000) {
        let a = normal(seed, &[1, 1, 9, 9]).map(|v| v.clamp(-1.0, 1.0));
        let b = normal(seed + 3, &[1, 1, 9, 9]).map(|v| v.clamp(-1.0, 1.0));
        prop_assert_eq!(eval::ssim(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(eval::ssim(&a, &b).unwrap(), eval::ssim(&b, &a).unwrap());
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in 0u64..1000) {
        let x = normal(seed, &[4, 1, 8, 8]).map(|v| v.clamp(-0.5, 0.5));
        let noise = normal(seed + 11, &[4, 1, 8, 8]);
        let mut last = f32::INFINITY;
        for sigma in [0.01f32, 0.05, 0.1] {
            let y = x.zip_map(&noise, |a, n| a + sigma * n).unwrap();
            let p = eval::psnr(&x, &y).unwrap();
            prop_assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ema_tracks_geometric_series(decay in 0.05f32..0.95, k in 1i32..30) {
        let mut live = ParamStore::new();
        live.insert("w", Tensor::full(&[2], 1.0));
        let mut shadow = ParamStore::new();
        shadow.insert("w", Tensor::zeros(&[2]));
        for _ in 0..k {
            ema_update(&mut shadow, &live, decay).unwrap();
        }
        let expect = 1.0 - (decay as f64).powi(k);
        prop_assert!((shadow.get("w").unwrap().data()[0] as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn warmup_schedule_is_exact(base in 1e-6f64..1e-2, warm in 1u64..5000, s in 0u64..10000) {
        let c = OptimConfig { lr: base, warmup_steps: warm, ..OptimConfig::default() };
        let expect = if s < warm { base * s as f64 / warm as f64 } else { base };
        prop_assert_eq!(c.lr_at(s), expect);
    }

    #[test]
    fn config_text_round_trips(lambda in 0.0f64..10.0, seed in 0..=i64::MAX as u64, steps in 0u64..100000, ema in proptest::option::of(0.01f64..0.99)) {
        let c = RunConfig { lambda, seed, steps, ema_decay: ema, ..RunConfig::default() };
        let back = parse_config_str(&c.to_toml(), &[]).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn seeds_beyond_toml_range_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let c = RunConfig { seed, ..RunConfig::default() };
        prop_assert!(matches!(c.validate(), Err(onetok::Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000, shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 0..4), 1..6)) {
        let mut c = Checkpoint::new(onetok::config::Phase::StageA, seed, RunConfig::default());
        let mut s = ParamStore::new();
        for (i, sh) in shapes.iter().enumerate() {
            s.insert(format!("t{i}"), normal(seed + i as u64, sh));
        }
        c.groups.insert("decoder".into(), s);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        for (n, t) in c.groups["decoder"].iter() {
            prop_assert!(back.groups["decoder"].get(n).unwrap().bits_eq(t));
        }
    }
}

#[test]
fn matrix_sqrt_squares_back_at_128() {
    let a = random_spd(99, 128);
    let r = eval::matrix_sqrt_psd(&a).unwrap();
    let err = (&r * &r - &a).norm() / a.norm();
    assert!(err <= 1e-5, "{err}");
}
