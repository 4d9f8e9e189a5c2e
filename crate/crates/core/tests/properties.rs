use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use serde_json::json;

use spinn::autodiff::{Jet, Tape, Tensor};
use spinn::config::{self, preset};
use spinn::diagnostics::{error_spectrum, modal_tangent, relative_l2, ModalVariant, ProbeKind};
use spinn::fft::{dft_at_point, fft, ifft_real, signed_mode, ComplexSpectrum, RealGrid};
use spinn::format::{decode, encode};
use spinn::problems::{residual_allen_cahn, residual_ginzburg_landau, residual_gray_scott, residual_kdv, FieldPair};
use spinn::pyramid::{grid_points, time_bin, FeatureRequest, Query, Slice};
use spinn::training::{causal_weights, grad_norm_targets};
use spinn::{BeignetModel, DomainMap, FourierPyramid, PyramidConfig};

fn pow2(max_log: u32) -> impl Strategy<Value = usize> {
    (1..=max_log).prop_map(|l| 1usize << l)
}

fn grid_1d() -> impl Strategy<Value = Vec<f64>> {
    pow2(7).prop_flat_map(|n| prop::collection::vec(-10.0..10.0f64, n))
}

fn pyramid(dims: usize, sizes: Vec<usize>, channels: usize, anchors: usize, seed: u64) -> FourierPyramid {
    let mut cfg = PyramidConfig::dyadic(dims, 1, 2, channels, anchors);
    cfg.sizes = sizes;
    cfg.init_noise = 1.0;
    cfg.global_precond = 1.3;
    cfg.per_level_precond = 0.7;
    FourierPyramid::init(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_parseval(x in grid_1d()) {
        let n = x.len();
        let s = fft(&RealGrid::new(vec![n], x.clone()).unwrap(), &[0]).unwrap();
        let lhs: f64 = x.iter().map(|v| v * v).sum();
        let rhs: f64 = s.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1.0));
    }

    #[test]
    fn fft_linear(x in grid_1d(), seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let n = x.len();
        let y: Vec<f64> = (0..n).map(|j| ((j as u64).wrapping_mul(seed | 1) % 1000) as f64 / 100.0 - 5.0).collect();
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let f = |v: &Vec<f64>| fft(&RealGrid::new(vec![n], v.clone()).unwrap(), &[0]).unwrap();
        let (fx, fy, fz) = (f(&x), f(&y), f(&z));
        for i in 0..n {
            let want = fx.data[i] * a + fy.data[i] * b;
            prop_assert!((fz.data[i] - want).norm() <= 1e-12 * n as f64 * (1.0 + want.norm()));
        }
    }

    #[test]
    fn fft_of_real_grid_is_hermitian(nx in pow2(5), ny in pow2(5), seed in any::<u64>()) {
        let data: Vec<f64> = (0..nx * ny).map(|j| (((j as u64 + 1).wrapping_mul(seed | 1) >> 11) % 997) as f64 / 997.0).collect();
        let s = fft(&RealGrid::new(vec![nx, ny], data).unwrap(), &[0, 1]).unwrap();
        prop_assert!(s.hermitian_defect(&[0, 1]) <= 1e-10);
        let back = ifft_real(&s, &[0, 1]).unwrap();
        prop_assert_eq!(back.shape, vec![nx, ny]);
    }

    #[test]
    fn interpolant_is_periodic(x in grid_1d(), p in -2.0..2.0f64, shift in -3i32..3) {
        let n = x.len();
        let s = fft(&RealGrid::new(vec![n], x).unwrap(), &[0]).unwrap();
        let a = dft_at_point(&s, &[p]).unwrap()[0];
        let b = dft_at_point(&s, &[p + shift as f64]).unwrap()[0];
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn order_zero_jet_is_the_plain_float(v in -20.0..20.0f64) {
        let j = Jet::constant(0, v);
        prop_assert_eq!(j.tanh().value().to_bits(), v.tanh().to_bits());
        prop_assert_eq!(j.exp().value().to_bits(), v.exp().to_bits());
        prop_assert_eq!(j.sin().value().to_bits(), v.sin().to_bits());
        prop_assert_eq!((j * j).value().to_bits(), (v * v).to_bits());
        prop_assert_eq!((j + Jet::constant(0, 1.5)).value().to_bits(), (v + 1.5).to_bits());
    }

    #[test]
    fn taped_gradient_matches_finite_differences(w in prop::collection::vec(-1.0..1.0f64, 6), seed in 0u64..1000) {
        let x: Vec<f64> = (0..12).map(|i| (((i as u64 + 3) * (seed + 7)) % 19) as f64 / 9.5 - 1.0).collect();
        let loss = |w: &[f64], grad: bool| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(4, 3, x.clone()));
            let wv = tape.param(Tensor::new(2, 3, w.to_vec()));
            let h = tape.matmul_t(xv, wv);
            let a = tape.tanh(h);
            let sq = tape.square(a);
            let l = tape.mean(sq);
            let g = if grad { tape.grad(l).unwrap().remove(0) } else { vec![] };
            (tape.value(l).data[0], g)
        };
        let (_, g) = loss(&w, true);
        let h = 1e-5;
        for i in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, false).0 - loss(&m, false).0) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-4 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn grid_and_pointwise_features_agree(
        seed in any::<u64>(),
        dims in 1usize..=2,
        levels in 1usize..=3,
        m_log in 2u32..=5,
        order in 0usize..=3,
        time in any::<bool>(),
        shift in -0.2..0.2f64,
        t in 0.0..=1.0f64,
    ) {
        let sizes: Vec<usize> = (0..levels).map(|l| 2 << l).collect();
        let p = pyramid(dims, sizes, 2, 3, seed);
        let m = vec![1usize << m_log; dims];
        let req = FeatureRequest::new(vec![order; dims], time);
        let sl = Slice { t, shift: vec![shift; dims] };
        let f = p.spectral_features(&m, std::slice::from_ref(&sl), &req).unwrap();
        let q: Vec<Query> = grid_points(&m, &sl.shift).into_iter().map(|x| Query { x, t }).collect();
        let g = p.pointwise_features(&q, &req).unwrap();
        prop_assert_eq!(f.data.len(), g.data.len());
        for (a, b) in f.data.iter().zip(&g.data) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn fine_residual_grid_is_bandlimited(seed in any::<u64>(), levels in 1usize..=3, extra in 1u32..=3, order in 0usize..=3) {
        let sizes: Vec<usize> = (0..levels).map(|l| 2 << l).collect();
        let finest = *sizes.last().unwrap();
        let p = pyramid(1, sizes, 1, 1, seed);
        let m = finest << extra;
        let f = p.spectral_features(&[m], &[Slice { t: 0.0, shift: vec![0.01] }], &FeatureRequest::new(vec![order], false)).unwrap();
        let cols = f.cols;
        for ch in 0..=order {
            for c in 0..cols {
                let col: Vec<f64> = (0..m).map(|j| f.get(ch * m + j, c)).collect();
                let s = fft(&RealGrid::new(vec![m], col).unwrap(), &[0]).unwrap();
                let total: f64 = s.data.iter().map(|z| z.norm_sqr()).sum();
                let high: f64 = (0..m).filter(|&i| signed_mode(i, m).unsigned_abs() as usize > finest / 2).map(|i| s.data[i].norm_sqr()).sum();
                prop_assert!(high <= 1e-20 * total.max(1.0));
            }
        }
    }

    #[test]
    fn temporal_blend_is_linear(seed in any::<u64>(), anchors in 2usize..=9, t in 0.0..=1.0f64) {
        let p = pyramid(1, vec![4, 8], 2, anchors, seed);
        let (i, w) = time_bin(t, anchors).unwrap();
        let blend = p.blend_temporal(t).unwrap();
        for (l, (v, _)) in blend.iter().enumerate() {
            let (a, b) = (p.anchor(l, i), p.anchor(l, i + 1));
            for j in 0..v.len() {
                let want = (1.0 - w) * a[j] + w * b[j];
                prop_assert!((v[j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn residuals_are_deterministic(u in -2.0..2.0f64, v in -2.0..2.0f64, ut in -5.0..5.0f64, ux in -5.0..5.0f64, d2 in -5.0..5.0f64, d3 in -5.0..5.0f64) {
        prop_assert_eq!(residual_allen_cahn(u, ut, d2).to_bits(), residual_allen_cahn(u, ut, d2).to_bits());
        prop_assert_eq!(residual_kdv(u, ut, ux, d3).to_bits(), residual_kdv(u, ut, ux, d3).to_bits());
        let f = FieldPair { u, v, u_t: ut, v_t: ux, lap_u: d2, lap_v: d3 };
        prop_assert_eq!(residual_ginzburg_landau(f), residual_ginzburg_landau(f));
        prop_assert_eq!(residual_gray_scott(f), residual_gray_scott(f));
    }

    #[test]
    fn grad_norm_weights_are_scale_invariant(norms in prop::collection::vec(1e-6..1e6f64, 1..6), s in 1e-3..1e3f64) {
        let a = grad_norm_targets(&norms);
        let scaled: Vec<f64> = norms.iter().map(|n| n * s).collect();
        let b = grad_norm_targets(&scaled);
        for (x, y) in a.iter().zip(&b) {
            let (x, y) = (x.unwrap(), y.unwrap());
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn causal_weights_are_non_increasing(losses in prop::collection::vec(0.0..10.0f64, 1..40), tol in 0.0..100.0f64) {
        let w = causal_weights(&losses, tol);
        prop_assert_eq!(w[0], 1.0);
        for p in w.windows(2) {
            prop_assert!(p[1] <= p[0]);
        }
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn relative_l2_is_scale_equivariant(r in prop::collection::vec(-5.0..5.0f64, 2..50), e in -1.0..1.0f64, s in 1e-3..1e3f64) {
        prop_assume!(r.iter().any(|v| v.abs() > 1e-3));
        let p: Vec<f64> = r.iter().enumerate().map(|(i, v)| v + e * (i as f64).sin()).collect();
        let a = relative_l2(&p, &r).unwrap();
        let ps: Vec<f64> = p.iter().map(|v| v * s).collect();
        let rs: Vec<f64> = r.iter().map(|v| v * s).collect();
        let b = relative_l2(&ps, &rs).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn error_spectrum_obeys_parseval(n in pow2(6), times in 1usize..4, seed in any::<u64>()) {
        let gen = |k: u64| -> Vec<f64> {
            (0..n * times).map(|j| ((((j as u64 + k).wrapping_mul(seed | 1)) >> 13) % 1009) as f64 / 1009.0 - 0.5).collect()
        };
        let (p, r) = (gen(1), gen(2));
        let s = error_spectrum(&p, &r, n).unwrap();
        let grid: f64 = p.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (n * times) as f64;
        let spec: f64 = s.magnitude.iter().map(|m| m * m).sum();
        prop_assert!((grid - spec).abs() <= 1e-10 * grid.max(1.0));
    }

    #[test]
    fn format_rejects_any_single_byte_corruption(block in prop::collection::vec(-1e3..1e3f64, 0..20), pos in any::<prop::sample::Index>(), mask in 1u8..=255) {
        let bytes = encode("TEST-1", json!({}), &[&block, &[1.0, 2.0]]).unwrap();
        let (_, blocks) = decode("TEST-1", &bytes).unwrap();
        prop_assert_eq!(&blocks[0], &block);
        let mut bad = bytes.clone();
        let i = pos.index(bad.len());
        bad[i] ^= mask;
        prop_assert!(decode("TEST-1", &bad).is_err(), "flip at {} of {}", i, bad.len());
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), lr in 1e-6..1e-1f64, steps in 1usize..1_000_000, name in prop::sample::select(config::PRESETS.to_vec())) {
        let mut cfg = preset(name).unwrap();
        cfg.seed = seed;
        cfg.optim.lr = lr;
        cfg.optim.max_steps = steps;
        let back = config::parse(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn profile_is_odd(eta in prop::collection::vec(0.01..30.0f64, 1..8), seed in 0u64..100) {
        for name in ["burgers_beignet", "burgers_mlp"] {
            let mut cfg = preset(name).unwrap();
            cfg.seed = seed;
            let a = cfg.profile_ansatz().unwrap();
            let both: Vec<f64> = eta.iter().flat_map(|&e| [e, -e]).collect();
            let mut tape = Tape::new();
            let vars = a.tape_params(&mut tape);
            let pv = a.points_on_tape(&mut tape, &vars, &both).unwrap();
            for pair in tape.value(pv.u).data.chunks(2) {
                let (x, y) = (pair[0], pair[1]);
                prop_assert!((x + y).abs() <= 1e-12 * (1.0 + x.abs()), "{}: {} vs {}", name, x, y);
            }
        }
    }

    #[test]
    fn modal_output_tangent_ignores_added_constants(seed in 0u64..1000, k in 1usize..8, c in -5.0..5.0f64) {
        let mut cfg = preset("smoke").unwrap();
        cfg.seed = seed;
        let mut model: BeignetModel = cfg.init_model().unwrap();
        let base = modal_tangent(&model, k, ProbeKind::Cos, ModalVariant::Output, 16, 0.0).unwrap();
        model.decoder.layers.last_mut().unwrap().b.iter_mut().for_each(|b| *b += c);
        let moved = modal_tangent(&model, k, ProbeKind::Cos, ModalVariant::Output, 16, 0.0).unwrap();
        prop_assert!((base - moved).abs() <= 1e-10 * (1.0 + base));
    }
}

#[test]
fn interpolant_reproduces_samples() {
    let n = 16;
    let x: Vec<f64> = (0..n).map(|j| (2.0 * PI * 3.0 * j as f64 / n as f64).sin() + 0.1 * j as f64).collect();
    let s: ComplexSpectrum = fft(&RealGrid::new(vec![n], x.clone()).unwrap(), &[0]).unwrap();
    for (j, v) in x.iter().enumerate() {
        let got = dft_at_point(&s, &[j as f64 / n as f64]).unwrap()[0];
        assert!((got - v).abs() < 1e-12);
    }
    assert!((s.data[0] - Complex64::new(x.iter().sum(), 0.0)).norm() < 1e-12);
}

#[test]
fn unit_domain_is_identity() {
    let d = DomainMap::unit(2);
    assert_eq!(d.to_torus(&[0.25, 0.75]), vec![0.25, 0.75]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn image_pyramid_derivatives_match_finite_differences(seed in any::<u64>(), x in 0.0..1.0f64, y in 0.0..1.0f64) {
        let p = pyramid(2, vec![2, 4, 8], 2, 1, seed);
        let req = FeatureRequest::new(vec![1, 1], false);
        let d = p.pointwise_features(&[Query { x: vec![x, y], t: 0.0 }], &req).unwrap();
        let h = 1e-6;
        let at = |x: f64, y: f64| p.pointwise_features(&[Query { x: vec![x, y], t: 0.0 }], &FeatureRequest::values(2)).unwrap();
        let (xp, xm, yp, ym) = (at(x + h, y), at(x - h, y), at(x, y + h), at(x, y - h));
        for c in 0..d.cols {
            let fx = (xp.get(0, c) - xm.get(0, c)) / (2.0 * h);
            let fy = (yp.get(0, c) - ym.get(0, c)) / (2.0 * h);
            prop_assert!((d.get(1, c) - fx).abs() <= 1e-5 * (1.0 + fx.abs()));
            prop_assert!((d.get(2, c) - fy).abs() <= 1e-5 * (1.0 + fy.abs()));
        }
    }
}
