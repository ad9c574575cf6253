use std::collections::BTreeSet;

use num_bigint::BigUint;
use proptest::prelude::*;

use picard_mc::allocation::{
    allocate_exact, allocate_paper, allocate_uniform, budget_total, group_coefficients, objective_Z, Allocation,
    ObjectiveParams,
};
use picard_mc::combinatorics::{catalan, d_bounds_check, poly_iterate, CoefficientTable};
use picard_mc::heat::{forced_mc, heat_exact, heat_kernel, semigroup_mc, FieldKind, TestField};
use picard_mc::iteration::{expand_terms, variance_aggregate};
use picard_mc::quadrature::gauss_legendre;
use picard_mc::riesz::{hw_symbol, riesz_truncated_mc, Annulus};
use picard_mc::sampling::{pb_half_sample, uniform_simplex_sample, unit_ball_volume};
use picard_mc::RandomStream;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streams_replay(seed in any::<u64>(), path in prop::collection::vec(0u64..1000, 0..4)) {
        let mut a = RandomStream::with_path(seed, path.clone());
        let mut b = RandomStream::new(seed).descend(&path);
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn simplex_draws_are_ordered(seed in any::<u64>(), m in 1usize..9) {
        let mut s = RandomStream::new(seed);
        for _ in 0..50 {
            for p in [uniform_simplex_sample(m, &mut s), pb_half_sample(m, &mut s)] {
                prop_assert!(p.is_valid());
                let c = p.coords();
                prop_assert!(c[0] < 1.0 && c[m - 1] > 0.0);
                prop_assert!(c.windows(2).all(|w| w[0] > w[1]));
                let total: f64 = p.gaps().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn projection_symbol(xi in prop::collection::vec(-5.0f64..5.0, 2..6)) {
        prop_assume!(xi.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let p = hw_symbol(&xi).unwrap();
        let d = xi.len();
        for i in 0..d {
            for j in 0..d {
                prop_assert!((p.get(i, j) - p.get(j, i)).abs() <= 1e-12);
                let sq: f64 = (0..d).map(|k| p.get(i, k) * p.get(k, j)).sum();
                prop_assert!((sq - p.get(i, j)).abs() <= 1e-12);
            }
        }
        prop_assert!(p.apply(&xi).iter().all(|v| v.abs() <= 1e-12 * 5.0 * d as f64));
    }

    #[test]
    fn exact_allocation_is_best(n in 1usize..4, d in 3usize..6, bi in 0usize..3, doubling in 0u32..4) {
        let b = [0.1, 1.0, 2.0][bi];
        let p = ObjectiveParams { n, d, b, t: 1.0, budget: 50_000 << doubling, with_t: false };
        let exact = allocate_exact(&p).unwrap();
        let z = objective_Z(&exact, &p).unwrap();
        prop_assert!(z <= objective_Z(&allocate_uniform(&p).unwrap(), &p).unwrap());
        prop_assert!(z <= objective_Z(&allocate_paper(&p).unwrap(), &p).unwrap());
        let used = budget_total(&exact, n, d).unwrap();
        let slack = group_coefficients(&p).unwrap().cost.iter().cloned().fold(0.0, f64::max) as u64;
        prop_assert!(used <= BigUint::from(p.budget));
        prop_assert!(used >= BigUint::from(p.budget - slack));
    }

    #[test]
    fn aggregate_falls_with_samples(n in 0usize..4, k_pick in 0usize..16, base in 1u64..1000, extra in 1u64..1000) {
        let groups = 1usize << n;
        let k = k_pick % groups;
        let counts = vec![base; groups];
        let mut more = counts.clone();
        more[k] += extra;
        let a = variance_aggregate(&Allocation::new(n, counts).unwrap(), 0.8, 1.3, n).unwrap();
        let b = variance_aggregate(&Allocation::new(n, more).unwrap(), 0.8, 1.3, n).unwrap();
        prop_assert!(b < a);
    }
}

#[test]
fn polynomial_degrees_and_unit_substitution() {
    let mut tilde = BigUint::from(1u32);
    for n in 0..=12 {
        let p = poly_iterate(n);
        assert_eq!(p.degree(), Some(1 << n));
        assert!(p.terms().all(|(_, c)| c > &BigUint::from(0u32)));
        if n <= 10 {
            assert_eq!(p.sum_coeffs(), tilde);
            tilde = BigUint::from(1u32) + &tilde * &tilde;
        }
    }
}

#[test]
fn coefficients_grow_to_their_limit() {
    let table = CoefficientTable::new();
    for m in 1..=8usize {
        let mut prev = BigUint::from(0u32);
        for n in 0..=12 {
            let a = table.poly(n).coeff(m);
            assert!(a >= prev);
            assert!(a <= catalan(m as u64));
            prev = a;
        }
    }
}

#[test]
fn bilateral_bounds() {
    for k in 1..=5 {
        for l in 1..=5 {
            assert!(d_bounds_check(k, l, 3).unwrap().holds, "k = {k}, l = {l}");
        }
    }
}

#[test]
fn ball_volume_vanishes() {
    for m in 6..40 {
        assert!(unit_ball_volume(m + 1) < unit_ball_volume(m));
    }
}

#[test]
fn uniform_simplex_is_flat() {
    // ten equal-area cells of S(2): five strips in τ_1 split at the median of τ_2
    let mut s = RandomStream::new(17);
    let draws = 100_000;
    let mut cells = [0usize; 10];
    for _ in 0..draws {
        let p = uniform_simplex_sample(2, &mut s);
        let (a, b) = (p.coords()[0], p.coords()[1]);
        // τ_1² is uniform on (0, 1); given τ_1, τ_2/τ_1 is uniform
        let strip = ((a * a * 5.0) as usize).min(4);
        let half = usize::from(b / a >= 0.5);
        cells[2 * strip + half] += 1;
    }
    let expect = draws as f64 / 10.0;
    let chi2: f64 = cells.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 0.999 quantile of chi-square with 9 degrees of freedom
    assert!(chi2 < 27.88, "chi2 = {chi2}");
}

#[test]
fn heat_estimates_cover_closed_forms() {
    let fields = [
        TestField::gaussian_bump(1.2, 0.7, vec![0.2, -0.1]),
        TestField::new(2, FieldKind::Linear { offset: 0.5, coeffs: vec![1.0, -2.0] }).unwrap(),
        TestField::constant(2, 3.0),
    ];
    let (x, t) = ([0.4, 0.3], 0.6);
    for (i, f) in fields.iter().enumerate() {
        let exact = heat_exact(f, &x, t).unwrap();
        let hits = (0..100)
            .filter(|&r| {
                let e = semigroup_mc(f, &x, t, 10_000, &RandomStream::new(31).descend(&[i as u64, r])).unwrap();
                (e.value - exact).abs() <= 4.0 * e.stderr
            })
            .count();
        assert!(hits >= 95, "field {i}: {hits}/100");
    }
}

#[test]
fn forced_time_integrand() {
    let f = TestField::new(
        1,
        FieldKind::ProductTime { amplitude: 2.0, time_power: 1.5, offset: 0.7, coeffs: vec![0.0] },
    )
    .unwrap();
    let t: f64 = 0.9;
    let exact = 2.0 * 0.7 * t.powf(2.5) / 2.5;
    let e = forced_mc(&f, &[0.3], t, 100_000, &RandomStream::new(5)).unwrap();
    assert!((e.value - exact).abs() <= 4.0 * e.stderr, "{} vs {exact}", e.value);
}

#[test]
fn heat_kernel_semigroup() {
    let (nodes, weights) = gauss_legendre(400);
    let (s, t, x) = (0.3, 0.5, 0.4);
    let half = 12.0;
    let conv: f64 = nodes
        .iter()
        .zip(&weights)
        .map(|(u, w)| {
            let y = half * u;
            half * w * heat_kernel(&[x - y], s).unwrap() * heat_kernel(&[y], t).unwrap()
        })
        .sum();
    assert!((conv - heat_kernel(&[x], s + t).unwrap()).abs() < 1e-6);
}

#[test]
fn riesz_truncation_is_stable() {
    let f = TestField::gaussian_bump(1.0, 0.6, vec![0.5, 0.0, 0.2]);
    let x = [0.0, 0.0, 0.0];
    let eval = |y: &[f64]| f.eval(y, 0.0);
    let inner = riesz_truncated_mc(eval, 0, &x, Annulus::new(0.02, 6.0).unwrap(), 50_000, &RandomStream::new(8))
        .unwrap();
    let outer = riesz_truncated_mc(eval, 0, &x, Annulus::new(0.01, 12.0).unwrap(), 50_000, &RandomStream::new(9))
        .unwrap();
    let pooled = (inner.stderr.powi(2) + outer.stderr.powi(2)).sqrt();
    assert!((inner.value - outer.value).abs() <= 5.0 * pooled);
}

#[test]
fn low_degree_groups_stabilize() {
    let names = |n: usize, k: usize| -> BTreeSet<String> {
        expand_terms(n, 1).unwrap().group(k).map(|t| t.to_string()).collect()
    };
    for n in 1..=3 {
        for k in 1..n {
            assert_eq!(names(n, k), names(n + 1, k), "n = {n}, k = {k}");
        }
    }
}
