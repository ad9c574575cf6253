//! Shared test oracles.
#![allow(dead_code)]

use picard_mc::iteration::{Problem, TermTree};
use picard_mc::quadrature::{gauss_hermite_prob, gauss_legendre_unit};

/// Tensor Gauss rule: Legendre on (0, 1) in the time variable, Hermite in
/// each space coordinate.
pub struct Rule {
    gl: (Vec<f64>, Vec<f64>),
    nodes: Vec<(Vec<f64>, f64)>,
}

impl Rule {
    pub fn new(d: usize, n_time: usize, n_space: usize) -> Self {
        let (hx, hw) = gauss_hermite_prob(n_space);
        let mut nodes = vec![(Vec::new(), 1.0)];
        for _ in 0..d {
            let mut next = Vec::new();
            for (z, w) in &nodes {
                for (x, v) in hx.iter().zip(&hw) {
                    let mut z2 = z.clone();
                    z2.push(*x);
                    next.push((z2, w * v));
                }
            }
            nodes = next;
        }
        Self { gl: gauss_legendre_unit(n_time), nodes }
    }
}

fn contract(a: &[f64], g: &[f64]) -> Vec<f64> {
    let d = a.len();
    (0..d).map(|i| (0..d).map(|j| a[j] * g[i * d + j]).sum()).collect()
}

/// Deterministic value and Jacobian of a term by nested quadrature.
pub fn oracle(p: &Problem, rule: &Rule, term: &TermTree, x: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let d = p.d;
    match term {
        TermTree::U0 | TermTree::DU0 => {
            let mut v = vec![0.0; d];
            let mut j = vec![0.0; d * d];
            p.u0_exact(x, t, &mut v, &mut j).unwrap();
            (v, j)
        }
        TermTree::ConvPlain(c) | TermTree::ConvGrad(c) => {
            let TermTree::Product(a, g) = &**c else { panic!() };
            let product = |y: &[f64], s: f64| {
                let (av, _) = oracle(p, rule, a, y, s);
                let (_, gj) = oracle(p, rule, g, y, s);
                contract(&av, &gj)
            };
            let mut val = vec![0.0; d];
            let mut jac = vec![0.0; d * d];
            for (u, wu) in rule.gl.0.iter().zip(&rule.gl.1) {
                for (z, wz) in &rule.nodes {
                    // value: s = t u, lag t(1 − u)
                    let lag = (t * (1.0 - u)).sqrt();
                    let y: Vec<f64> = (0..d).map(|k| x[k] + z[k] * lag).collect();
                    let f = product(&y, t * u);
                    for i in 0..d {
                        val[i] += t * wu * wz * f[i];
                    }
                    // gradient: lag t v², singularity absorbed
                    let y: Vec<f64> = (0..d).map(|k| x[k] + z[k] * u * t.sqrt()).collect();
                    let f = product(&y, t * (1.0 - u * u));
                    for i in 0..d {
                        for k in 0..d {
                            jac[i * d + k] += 2.0 * t.sqrt() * wu * wz * f[i] * z[k];
                        }
                    }
                }
            }
            (val, jac)
        }
        TermTree::Product(..) => panic!("not a term"),
    }
}
