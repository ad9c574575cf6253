//! Pressure term of the bilinear form against a Newton-potential oracle.
//!
//! With the standard Riesz normalization `Σ R_j R_k (u_j u_k) = (−Δ)^{-1} g`,
//! `g = Σ ∂_j u_k ∂_k u_j` for divergence-free `u`. The transform used here
//! carries the constant `c(d)` instead of the standard one, so the pressure is
//! scaled by `(c(d) / c_std(d))²`.

use std::f64::consts::PI;

use picard_mc::quadrature::gauss_legendre;
use picard_mc::riesz::{
    bilinear_B, convective, riesz_constant, sphere_rule, BilinearMode, RieszParams, VectorField,
};
use picard_mc::RandomStream;

/// `(x_2, −x_1, 0) exp(−|x|²/2)`, divergence-free.
struct Swirl;

impl VectorField for Swirl {
    fn dim(&self) -> usize {
        3
    }

    fn value(&self, x: &[f64], out: &mut [f64]) {
        let e = (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp();
        out.copy_from_slice(&[x[1] * e, -x[0] * e, 0.0]);
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let e = (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp();
        let v = [x[1], -x[0], 0.0];
        let dv = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0; 3]];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = (dv[i][j] - v[i] * x[j]) * e;
            }
        }
    }
}

fn source(x: &[f64]) -> f64 {
    let mut jac = [0.0; 9];
    Swirl.jacobian(x, &mut jac);
    (0..3)
        .flat_map(|j| (0..3).map(move |k| (j, k)))
        .map(|(j, k)| jac[j * 3 + k] * jac[k * 3 + j])
        .sum()
}

/// `∂_i (−Δ)^{-1} g (x) = −(1/4π) ∫_0^∞ ∫_S θ_i g(x − rθ) dθ dr`.
fn newton_gradient(x: &[f64], i: usize) -> f64 {
    let dirs = sphere_rule(3, 40).unwrap();
    let (gx, gw) = gauss_legendre(120);
    let r_max = 10.0;
    let mut total = 0.0;
    let mut y = [0.0; 3];
    for (u, w) in gx.iter().zip(&gw) {
        let r = 0.5 * r_max * (u + 1.0);
        let mut ang = 0.0;
        for (th, wt) in &dirs {
            for k in 0..3 {
                y[k] = x[k] - r * th[k];
            }
            ang += wt * th[i] * source(&y);
        }
        total += 0.5 * r_max * w * ang;
    }
    -total / (4.0 * PI)
}

#[test]
fn divergence_free_swirl_has_zero_divergence() {
    let mut jac = [0.0; 9];
    Swirl.jacobian(&[0.3, -0.7, 0.4], &mut jac);
    assert!((jac[0] + jac[4] + jac[8]).abs() < 1e-15);
}

#[test]
fn full_mode_matches_newton_potential() {
    let x = [0.5, 0.3, 0.2];
    let c_std = 1.0 / (PI * PI); // Γ(2) / π²
    let scale = (riesz_constant(3) / c_std).powi(2);
    let params = RieszParams { eps: 1e-3, r_max: 12.0, n: 400_000, fd_step: 1e-4 };
    let b = bilinear_B(&Swirl, &x, BilinearMode::Full, Some(&params), &RandomStream::new(11)).unwrap();
    let conv = convective(&Swirl, &x);
    for i in 0..3 {
        let oracle = conv[i] + scale * newton_gradient(&x, i);
        let e = &b[i];
        assert!(
            (e.value - oracle).abs() <= 4.0 * e.stderr,
            "component {i}: {} ± {} vs {oracle}",
            e.value,
            e.stderr
        );
    }
}
