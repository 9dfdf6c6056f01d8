use super::*;
use crate::error::Error;
use crate::linalg::{dot, Rng, Stream};
use proptest::prelude::*;

fn base(d: usize, k: usize, seed: u64) -> (Matrix, Vector) {
    let mut rng = Rng::new(seed, Stream::Data);
    let w0 = rng.normal_matrix(d, k, 1.0 / (k as f64).sqrt());
    let beta0 = Vector::new(rng.normal_vec(d));
    (w0, beta0)
}

fn fresh(method: Method, w0: &Matrix, seed: u64) -> AdapterState {
    make_adapter(AdapterKind::new(method), w0, &mut InitStreams::new(seed)).unwrap()
}

fn perturbed(method: Method, w0: &Matrix, seed: u64) -> AdapterState {
    let mut a = fresh(method, w0, seed);
    a.perturb(&mut Rng::new(seed, Stream::Perturb), 0.5);
    a
}

#[test]
fn one_lora_starts_at_zero() {
    let a = fresh(Method::OneLora, &Matrix::zeros(2, 3), 0);
    let t = a.trainables();
    assert_eq!(t.len(), 1);
    assert_eq!(t[0].name, "b");
    assert_eq!(t[0].data, &[0.0, 0.0]);
}

#[test]
fn vera_initial_state() {
    let a = fresh(Method::Vera, &Matrix::identity(4), 3);
    let t = a.trainables();
    assert_eq!(t[0].name, "dvec");
    assert_eq!(t[0].data, &[VERA_DVEC_INIT]);
    assert_eq!(t[1].data, &[0.0; 4]);
    let frozen = a.frozen_constants();
    assert_eq!(frozen[0].shape, (1, 4));
    assert_eq!(frozen[1].shape, (4, 1));
    assert!(frozen[0].data.iter().any(|v| *v != 0.0));
}

#[test]
fn lora_initial_state() {
    let a = fresh(Method::Lora, &Matrix::zeros(3, 5), 1);
    let t = a.trainables();
    assert_eq!(t[0].shape, (1, 5));
    assert!(t[0].data.iter().all(|v| *v != 0.0));
    assert_eq!(t[1].shape, (3, 1));
    assert!(t[1].data.iter().all(|v| *v == 0.0));
}

#[test]
fn dora_magnitude_is_row_norm() {
    let (w0, _) = base(3, 4, 2);
    let a = fresh(Method::Dora, &w0, 0);
    assert_eq!(a.trainables()[2].data, w0.row_norms().as_slice());
}

#[test]
fn empty_layer_rejected() {
    let err = make_adapter(
        AdapterKind::new(Method::OneLora),
        &Matrix::zeros(0, 3),
        &mut InitStreams::new(0),
    );
    assert!(matches!(err, Err(Error::Argument(_))));
    let err = make_adapter(
        AdapterKind::new(Method::Lora).with_rank(0),
        &Matrix::zeros(2, 3),
        &mut InitStreams::new(0),
    );
    assert!(matches!(err, Err(Error::Argument(_))));
}

#[test]
fn one_lora_hand_example() {
    let mut a = fresh(Method::OneLora, &Matrix::identity(2), 0);
    a.set_flat(&[1.0, -1.0]).unwrap();
    let out = a.forward(&Matrix::identity(2), &[0.0, 0.0], &[2.0, 3.0]).unwrap();
    assert_eq!(out.as_slice(), &[7.0, -2.0]);
}

#[test]
fn bitfit_is_input_independent() {
    let w0 = Matrix::zeros(2, 3);
    let mut a = fresh(Method::BitFit, &w0, 0);
    a.set_flat(&[1.0, 1.0]).unwrap();
    for x in [[0.0, 0.0, 0.0], [5.0, -3.0, 1.0]] {
        assert_eq!(a.forward(&w0, &[0.0, 0.0], &x).unwrap().as_slice(), &[1.0, 1.0]);
    }
}

#[test]
fn one_lora_backward_hand_example() {
    let w0 = Matrix::identity(2);
    let a = fresh(Method::OneLora, &w0, 0);
    let g = a.backward(&w0, &[0.0, 0.0], &[2.0, 3.0], &[1.0, 0.0]).unwrap();
    assert_eq!(g.get("b").unwrap().data, vec![5.0, 0.0]);
}

#[test]
fn lora_with_zero_b_has_no_a_gradient() {
    let (w0, beta0) = base(3, 5, 4);
    let a = fresh(Method::Lora, &w0, 4);
    let x = [1.0, -2.0, 0.5, 3.0, 0.1];
    let g_out = [0.3, -1.0, 2.0];
    let g = a.backward(&w0, &beta0, &x, &g_out).unwrap();
    assert!(g.get("A").unwrap().data.iter().all(|v| *v == 0.0));
    let av = a.trainables()[0].data;
    let ax = dot(av, &x);
    let expect: Vec<f64> = g_out.iter().map(|gi| gi * ax).collect();
    assert_eq!(g.get("B").unwrap().data, expect);
}

#[test]
fn shape_errors() {
    let (w0, beta0) = base(3, 4, 0);
    let a = fresh(Method::OneLora, &w0, 0);
    assert!(matches!(a.forward(&w0, &beta0, &[1.0; 3]), Err(Error::Shape { .. })));
    assert!(matches!(
        a.backward(&w0, &beta0, &[1.0; 4], &[1.0; 2]),
        Err(Error::Shape { .. })
    ));
    assert!(a.forward(&Matrix::zeros(4, 4), &beta0, &[1.0; 4]).is_err());
    assert!(a.merge(&w0, &[0.0; 2]).is_err());
}

#[test]
fn one_lora_merge_is_b_times_ones() {
    let w0 = Matrix::zeros(2, 3);
    let mut a = fresh(Method::OneLora, &w0, 0);
    a.set_flat(&[1.0, 2.0]).unwrap();
    let (w, b) = a.merge(&w0, &[0.0, 0.0]).unwrap();
    assert_eq!(w.row(0), &[1.0, 1.0, 1.0]);
    assert_eq!(w.row(1), &[2.0, 2.0, 2.0]);
    assert_eq!(b.as_slice(), &[0.0, 0.0]);
}

#[test]
fn fresh_merge_is_identity() {
    let (w0, beta0) = base(5, 6, 9);
    for m in Method::ALL {
        let a = fresh(m, &w0, 1);
        let (w, b) = a.merge(&w0, &beta0).unwrap();
        let dw = w.sub(&w0).unwrap().frobenius();
        let db = b.axpy(-1.0, &beta0).unwrap().norm();
        assert!(dw < 1e-12 && db < 1e-12, "{m}: {dw} {db}");
    }
}

#[test]
fn one_lora_shift_is_permutation_invariant() {
    let w0 = Matrix::zeros(3, 6);
    let mut a = make_adapter(Method::OneLora.into(), &w0, &mut InitStreams::new(0)).unwrap();
    a.set_flat(&[0.5, -1.0, 2.0]).unwrap();
    let mut rng = Rng::new(0, Stream::Perturb);
    let x: Vec<f64> = rng.normal_vec(6);
    let shift = a.forward(&w0, &[0.0; 3], &x).unwrap();
    for _ in 0..10 {
        let p = rng.permutation(6);
        let xp: Vec<f64> = p.iter().map(|&i| x[i]).collect();
        let sp = a.forward(&w0, &[0.0; 3], &xp).unwrap();
        for (u, v) in shift.iter().zip(sp.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn trainable_count_matches_param_count() {
    for (k, d) in [(1, 1), (2, 9), (9, 2), (7, 4), (16, 16), (5, 30)] {
        let (w0, _) = base(d, k, 0);
        for m in Method::ALL {
            for r in [1, 2] {
                let kind = AdapterKind::new(m).with_rank(r);
                let a = make_adapter(kind, &w0, &mut InitStreams::new(0)).unwrap();
                assert_eq!(a.trainable_count(), param_count(&kind, k, d), "{m} r={r} k={k} d={d}");
            }
        }
    }
}

#[test]
fn mora1_forward_by_hand() {
    // k = 4, d = 4: r̂ = 2, groups {0,1}, {2,3}; output i reads h[i mod 2].
    let w0 = Matrix::zeros(4, 4);
    let mut a = fresh(Method::Mora1, &w0, 0);
    a.set_flat(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = a.forward(&w0, &[0.0; 4], &[1.0, 1.0, 0.0, 1.0]).unwrap();
    // c = (2, 1); h = (1*2 + 2*1, 3*2 + 4*1) = (4, 10)
    assert_eq!(out.as_slice(), &[4.0, 10.0, 4.0, 10.0]);
}

#[test]
fn mora6_first_chunk_unrotated() {
    // k = 2, d = 4: r̂ = 2, one chunk at position 0, so no rotation.
    let w0 = Matrix::zeros(4, 2);
    let mut a = fresh(Method::Mora6, &w0, 0);
    a.set_flat(&[1.0, 0.0, 0.0, 2.0]).unwrap();
    let out = a.forward(&w0, &[0.0; 4], &[3.0, 5.0]).unwrap();
    assert_eq!(out.as_slice(), &[3.0, 10.0, 3.0, 10.0]);
}

#[test]
fn dora_detached_differs_only_in_direction_terms() {
    let (w0, beta0) = base(4, 5, 1);
    let mut full = fresh(Method::Dora, &w0, 1);
    full.perturb(&mut Rng::new(2, Stream::Perturb), 0.5);
    let mut det = make_adapter(
        AdapterKind::new(Method::Dora).with_dora_norm(NormGradient::Detached),
        &w0,
        &mut InitStreams::new(1),
    )
    .unwrap();
    det.set_flat(&full.flat()).unwrap();
    let x = [0.3, -0.2, 1.0, 0.5, -1.5];
    let g = [1.0, 0.5, -0.5, 2.0];
    let gf = full.backward(&w0, &beta0, &x, &g).unwrap();
    let gd = det.backward(&w0, &beta0, &x, &g).unwrap();
    assert_eq!(gf.get("m"), gd.get("m"));
    assert_eq!(gf.g_in, gd.g_in);
    assert_ne!(gf.get("A"), gd.get("A"));
}

/// Central differences of `g · f(θ)` against the analytic gradients, both in
/// the trainables and in the input.
fn fd_max_rel_err(a: &AdapterState, w0: &Matrix, beta0: &Vector, x: &[f64], g: &[f64]) -> f64 {
    let h = 1e-6;
    let obj = |s: &AdapterState, x: &[f64]| dot(&s.forward(w0, beta0, x).unwrap(), g);
    let analytic = a.backward(w0, beta0, x, g).unwrap();
    let flat_grad: Vec<f64> = analytic.grads.iter().flat_map(|g| g.data.clone()).collect();
    let theta = a.flat();
    let mut worst = 0.0f64;
    let rel = |an: f64, nu: f64| (an - nu).abs() / (an.abs() + nu.abs()).max(1e-8);
    let mut s = a.clone();
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] += h;
        s.set_flat(&t).unwrap();
        let fp = obj(&s, x);
        t[i] -= 2.0 * h;
        s.set_flat(&t).unwrap();
        let fm = obj(&s, x);
        worst = worst.max(rel(flat_grad[i], (fp - fm) / (2.0 * h)));
    }
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        xp[j] += h;
        let fp = obj(a, &xp);
        xp[j] -= 2.0 * h;
        let fm = obj(a, &xp);
        worst = worst.max(rel(analytic.g_in[j], (fp - fm) / (2.0 * h)));
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for (k, d) in [(1, 1), (3, 2), (7, 4), (5, 9), (16, 16), (16, 3)] {
        let (w0, beta0) = base(d, k, (k * 31 + d) as u64);
        let mut rng = Rng::new(k as u64, Stream::Perturb);
        for m in Method::ALL {
            if m == Method::Dora && k == 1 {
                // direction of a 1-wide row is ±1: the A/B gradient is identically zero
                continue;
            }
            let a = perturbed(m, &w0, 7);
            let x = rng.normal_vec(k);
            let g = rng.normal_vec(d);
            let err = fd_max_rel_err(&a, &w0, &beta0, &x, &g);
            assert!(err <= 1e-6, "{m} k={k} d={d}: {err}");
        }
    }
}

#[test]
fn lora_rank_two_and_scale() {
    let (w0, beta0) = base(5, 6, 2);
    let kind = AdapterKind::new(Method::Lora).with_rank(2).with_scale(0.5);
    let mut a = make_adapter(kind, &w0, &mut InitStreams::new(2)).unwrap();
    a.perturb(&mut Rng::new(1, Stream::Perturb), 0.3);
    let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
    assert!(fd_max_rel_err(&a, &w0, &beta0, &x, &[1.0, -1.0, 0.5, 0.2, 2.0]) <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fresh_adapter_is_zero_shift(k in 1usize..=20, d in 1usize..=20, seed in 0u64..500) {
        let (w0, beta0) = base(d, k, seed);
        let x = Rng::new(seed, Stream::Perturb).normal_vec(k);
        let expect: Vec<f64> = w0.matvec(&x).unwrap().iter().zip(beta0.iter()).map(|(a, b)| a + b).collect();
        for m in Method::ALL {
            let a = fresh(m, &w0, seed);
            let out = a.forward(&w0, &beta0, &x).unwrap();
            for (o, e) in out.iter().zip(&expect) {
                prop_assert_eq!(o, e, "{}", m);
            }
        }
    }

    #[test]
    fn merged_layer_matches_adapter(k in 1usize..=64, d in 1usize..=64, seed in 0u64..500) {
        let (w0, beta0) = base(d, k, seed);
        let mut rng = Rng::new(seed, Stream::Perturb);
        for m in Method::ALL {
            let a = perturbed(m, &w0, seed);
            let (w, b) = a.merge(&w0, &beta0).unwrap();
            for _ in 0..4 {
                let x = rng.normal_vec(k);
                let ada = a.forward(&w0, &beta0, &x).unwrap();
                let mer = w.matvec(&x).unwrap().axpy(1.0, &b).unwrap();
                for (u, v) in ada.iter().zip(mer.iter()) {
                    prop_assert!((u - v).abs() <= 1e-10, "{} {} vs {}", m, u, v);
                }
            }
        }
    }

    #[test]
    fn one_lora_uses_fewer_mults_than_lora(k in 1usize..2000, d in 1usize..2000) {
        let one = flop_count(&Method::OneLora.into(), k, d).mults;
        let lora = flop_count(&Method::Lora.into(), k, d).mults;
        prop_assert!(one < lora);
    }
}

#[test]
fn delta_is_forward_minus_base() {
    for (k, d) in [(1, 1), (5, 3), (8, 12)] {
        let (w0, beta0) = base(d, k, 11);
        let x = Rng::new(5, Stream::Data).normal_vec(k);
        let frozen = w0.matvec(&x).unwrap().axpy(1.0, &beta0).unwrap();
        for m in Method::ALL {
            let a = perturbed(m, &w0, 3);
            let full = a.forward(&w0, &beta0, &x).unwrap();
            let delta = a.delta(&w0, &beta0, &x).unwrap();
            for i in 0..d {
                assert!((full[i] - frozen[i] - delta[i]).abs() < 1e-12, "{m}");
            }
        }
    }
}
