mod common;

use picard_mc::heat::{GridPoint, SpaceTimeGrid, TestField};
use picard_mc::iteration::{
    evaluate_term_mc, expand_terms, nested_on_grid, iterate_on_grid, EvalOptions, Evaluator, Problem,
    TermTree, U0Mode,
};
use picard_mc::allocation::Allocation;
use picard_mc::riesz::{BilinearMode, RieszParams};
use picard_mc::{Error, RandomStream};

use common::{oracle, Rule};

fn bumps(d: usize) -> Problem {
    let initial = (0..d)
        .map(|i| {
            let center: Vec<f64> = (0..d).map(|k| if k == i { 0.4 } else { -0.2 * k as f64 }).collect();
            TestField::gaussian_bump(1.0 - 0.3 * i as f64, 0.9 + 0.2 * i as f64, center)
        })
        .collect();
    Problem::new(initial, None).unwrap()
}

fn within(est: f64, stderr: f64, truth: f64, slack: f64) -> bool {
    (est - truth).abs() <= 4.0 * stderr + slack
}

#[test]
fn second_iterate_terms_match_quadrature() {
    for d in [1usize, 2] {
        let p = bumps(d);
        let rule = if d == 1 { Rule::new(1, 24, 24) } else { Rule::new(2, 14, 10) };
        let eval = Evaluator::new(&p, EvalOptions::default()).unwrap();
        let plan = expand_terms(2, d).unwrap();
        let x: Vec<f64> = (0..d).map(|k| 0.3 - 0.5 * k as f64).collect();
        let t = 0.8;
        for (r, term) in plan.terms.iter().enumerate().skip(1) {
            let (ov, oj) = oracle(&p, &rule, term, &x, t);
            let est = evaluate_term_mc(term, &eval, &x, t, 200_000, &RandomStream::new(5).child(r as u64)).unwrap();
            for i in 0..d {
                let e = &est.value[i];
                assert!(within(e.value, e.stderr, ov[i], 1e-6), "d={d} {term} value[{i}]: {} ± {} vs {}", e.value, e.stderr, ov[i]);
            }
            for i in 0..d * d {
                let e = &est.grad[i];
                assert!(within(e.value, e.stderr, oj[i], 1e-6), "d={d} {term} grad[{i}]: {} ± {} vs {}", e.value, e.stderr, oj[i]);
            }
        }
    }
}

#[test]
fn first_iterate_matches_quadrature_in_three_dimensions() {
    let p = bumps(3);
    let rule = Rule::new(3, 20, 12);
    let points = vec![
        GridPoint { x: vec![0.0, 0.0, 0.0], t: 0.5 },
        GridPoint { x: vec![0.5, -0.3, 0.2], t: 1.0 },
        GridPoint { x: vec![-0.4, 0.6, 1.0], t: 0.25 },
    ];
    let grid = SpaceTimeGrid::new(points.clone()).unwrap();
    let alloc = Allocation::new(1, vec![10_000, 10_000]).unwrap();
    let sol = iterate_on_grid(&p, &grid, 1, &alloc, EvalOptions::default(), &RandomStream::new(21)).unwrap();
    let term = &expand_terms(1, 3).unwrap().terms[1];
    for (pi, pt) in points.iter().enumerate() {
        let (u0, j0) = oracle(&p, &rule, &TermTree::U0, &pt.x, pt.t);
        let (v, j) = oracle(&p, &rule, term, &pt.x, pt.t);
        for i in 0..3 {
            let e = &sol.values[pi][i];
            assert!(within(e.value, e.stderr, u0[i] + v[i], 1e-6), "point {pi} comp {i}");
        }
        for i in 0..9 {
            let e = &sol.grad_values[pi][i];
            assert!(within(e.value, e.stderr, j0[i] + j[i], 1e-6), "point {pi} grad {i}");
        }
    }
}

#[test]
fn zero_data_gives_zero() {
    let p = Problem::new(vec![TestField::constant(2, 0.0), TestField::constant(2, 0.0)], None).unwrap();
    let grid = SpaceTimeGrid::tensor_box(2, -1.0, 1.0, 3, &[0.5]).unwrap();
    let alloc = Allocation::uniform(2, 50).unwrap();
    let sol = iterate_on_grid(&p, &grid, 2, &alloc, EvalOptions::default(), &RandomStream::new(1)).unwrap();
    for v in sol.values.iter().chain(&sol.grad_values).flatten() {
        assert_eq!(v.value, 0.0);
        assert_eq!(v.stderr, 0.0);
    }
    let nested = nested_on_grid(&p, &grid, &[5, 5, 5], U0Mode::Exact, &RandomStream::new(1)).unwrap();
    for v in nested.values.iter().flatten() {
        assert_eq!(v.value, 0.0);
    }
}

#[test]
fn terms_scale_with_their_degree() {
    let p = bumps(2);
    let lambda = 1.7;
    let scaled = p.scaled(lambda);
    let plan = expand_terms(2, 2).unwrap();
    let e1 = Evaluator::new(&p, EvalOptions::default()).unwrap();
    let e2 = Evaluator::new(&scaled, EvalOptions::default()).unwrap();
    for term in &plan.terms {
        let s = RandomStream::new(8);
        let a = evaluate_term_mc(term, &e1, &[0.1, 0.2], 0.6, 500, &s).unwrap();
        let b = evaluate_term_mc(term, &e2, &[0.1, 0.2], 0.6, 500, &s).unwrap();
        let f = lambda.powi(term.degree() as i32);
        for (x, y) in a.value.iter().chain(&a.grad).zip(b.value.iter().chain(&b.grad)) {
            assert!((y.value - f * x.value).abs() <= 1e-10 * (1.0 + y.value.abs()), "{term}");
        }
    }
}

#[test]
fn leaf_monte_carlo_agrees_with_closed_form() {
    let p = bumps(2);
    let grid = SpaceTimeGrid::new(vec![GridPoint { x: vec![0.2, -0.1], t: 0.7 }]).unwrap();
    let alloc = Allocation::new(1, vec![40_000, 40_000]).unwrap();
    let s = RandomStream::new(3);
    let exact = iterate_on_grid(&p, &grid, 1, &alloc, EvalOptions::default(), &s).unwrap();
    let opts = EvalOptions { u0: U0Mode::MonteCarlo { n0: 4 }, ..EvalOptions::default() };
    let mc = iterate_on_grid(&p, &grid, 1, &alloc, opts, &s.child(1)).unwrap();
    for (a, b) in exact.values[0].iter().chain(&exact.grad_values[0]).zip(mc.values[0].iter().chain(&mc.grad_values[0])) {
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.value - b.value).abs() <= 4.0 * se, "{} vs {} ± {}", a.value, b.value, se);
    }
}

#[test]
fn nested_first_level_agrees_with_expansion() {
    let p = bumps(2);
    let grid = SpaceTimeGrid::new(vec![GridPoint { x: vec![0.0, 0.3], t: 0.9 }]).unwrap();
    let alloc = Allocation::new(1, vec![40_000, 40_000]).unwrap();
    let expanded = iterate_on_grid(&p, &grid, 1, &alloc, EvalOptions::default(), &RandomStream::new(4)).unwrap();
    let nested = nested_on_grid(&p, &grid, &[1, 40_000], U0Mode::Exact, &RandomStream::new(9)).unwrap();
    assert_eq!(nested.budget_used, 2 + 2 * 40_000);
    for (a, b) in expanded.values[0].iter().chain(&expanded.grad_values[0]).zip(nested.values[0].iter().chain(&nested.grad_values[0])) {
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.value - b.value).abs() <= 4.0 * se, "{} vs {} ± {}", a.value, b.value, se);
    }
}

#[test]
fn nested_level_zero_is_the_heat_estimator() {
    let p = bumps(1);
    let grid = SpaceTimeGrid::new(vec![GridPoint { x: vec![0.1], t: 0.5 }]).unwrap();
    let s = RandomStream::new(6);
    let nested = nested_on_grid(&p, &grid, &[1000], U0Mode::MonteCarlo { n0: 1000 }, &s).unwrap();
    let direct = picard_mc::heat::semigroup_mc(&p.initial[0], &[0.1], 0.5, 1000, &s.child(0).child(0).descend(&[0, 0])).unwrap();
    assert_eq!(nested.values[0][0].value, direct.value);
    assert_eq!(nested.budget_used, 2000);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let p = bumps(2);
    let grid = SpaceTimeGrid::tensor_box(2, -0.5, 0.5, 2, &[0.4]).unwrap();
    let alloc = Allocation::uniform(2, 3000).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            iterate_on_grid(&p, &grid, 2, &alloc, EvalOptions::default(), &RandomStream::new(17)).unwrap()
        })
    };
    let a = run(1);
    let b = run(4);
    for (x, y) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
        assert_eq!(x.value.to_bits(), y.value.to_bits());
        assert_eq!(x.stderr.to_bits(), y.stderr.to_bits());
    }
}

#[test]
fn full_mode_needs_closed_form_leaves() {
    let p = bumps(3);
    let opts = EvalOptions {
        u0: U0Mode::MonteCarlo { n0: 4 },
        bilinear: BilinearMode::Full,
        riesz: Some(RieszParams { eps: 1e-3, r_max: 10.0, n: 1, fd_step: 1e-4 }),
    };
    assert!(matches!(Evaluator::new(&p, opts), Err(Error::Unsupported(_))));
    let opts = EvalOptions { bilinear: BilinearMode::Full, ..EvalOptions::default() };
    assert!(matches!(Evaluator::new(&p, opts), Err(Error::Config { .. })));
}

#[test]
fn full_mode_produces_finite_estimates() {
    let p = bumps(3);
    let grid = SpaceTimeGrid::new(vec![GridPoint { x: vec![0.1, 0.0, -0.1], t: 0.5 }]).unwrap();
    let alloc = Allocation::new(1, vec![2000, 2000]).unwrap();
    let opts = EvalOptions {
        bilinear: BilinearMode::Full,
        riesz: Some(RieszParams { eps: 1e-3, r_max: 12.0, n: 1, fd_step: 1e-4 }),
        ..EvalOptions::default()
    };
    let sol = iterate_on_grid(&p, &grid, 1, &alloc, opts, &RandomStream::new(2)).unwrap();
    for e in sol.values[0].iter().chain(&sol.grad_values[0]) {
        assert!(e.value.is_finite() && e.stderr.is_finite());
    }
}
