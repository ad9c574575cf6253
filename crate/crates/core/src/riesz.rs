//! Helmholtz–Weyl projection symbol, a truncated Monte Carlo Riesz transform,
//! and the bilinear convective form with an optional pressure term.
//!
//! The Riesz transform is taken as the principal value
//! `c(d) ∫_{eps<|y|<R} |y|^{-d} (y_k/|y|) f(x − y) dy` with
//! `c(d) = −π^{(d+1)/2} / Γ((d+1)/2)`. In polar coordinates the radial
//! measure is `dr / r`, so a log-uniform radius and a uniform direction make
//! every sample weight constant. Directions are used in antithetic pairs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::heat::TestField;
use crate::quadrature::gauss_legendre;
use crate::stats::{sample_moments, sample_moments_vec, EstimateWithError};
use crate::stream::RandomStream;

/// Projection onto the orthogonal complement of a frequency vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSymbol {
    pub xi: Vec<f64>,
    /// Row-major `d × d`.
    pub matrix: Vec<f64>,
}

impl ProjectionSymbol {
    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim() + j]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|j| self.get(i, j) * v[j]).sum()).collect()
    }
}

/// `δ_ij − ξ_i ξ_j / |ξ|²`.
pub fn hw_symbol(xi: &[f64]) -> Result<ProjectionSymbol> {
    let n2: f64 = xi.iter().map(|v| v * v).sum();
    if !(n2 > 0.0) || !n2.is_finite() {
        return Err(Error::domain("projection symbol needs a nonzero finite frequency"));
    }
    let d = xi.len();
    let mut matrix = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let delta = if i == j { 1.0 } else { 0.0 };
            matrix[i * d + j] = delta - xi[i] * xi[j] / n2;
        }
    }
    Ok(ProjectionSymbol { xi: xi.to_vec(), matrix })
}

/// `−π^{(d+1)/2} / Γ((d+1)/2)`.
pub fn riesz_constant(d: usize) -> f64 {
    let a = (d as f64 + 1.0) / 2.0;
    -PI.powf(a) / gamma(a)
}

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0)
}

/// Truncation annulus `eps < |y| < r_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annulus {
    pub eps: f64,
    pub r_max: f64,
}

impl Annulus {
    pub fn new(eps: f64, r_max: f64) -> Result<Self> {
        if !(eps > 0.0) || !(r_max > eps) || !r_max.is_finite() {
            return Err(Error::domain(format!(
                "need 0 < eps < R, got eps = {eps}, R = {r_max}"
            )));
        }
        Ok(Self { eps, r_max })
    }

    /// Default outer radius: ten times the field's support radius.
    pub fn for_field(f: &TestField, eps: f64) -> Result<Self> {
        let r = f.support_radius().ok_or_else(|| {
            Error::domain("field has no finite support radius; give R explicitly")
        })?;
        Self::new(eps, 10.0 * r.max(eps))
    }

    fn log_ratio(&self) -> f64 {
        (self.r_max / self.eps).ln()
    }

    fn sample_radius(&self, s: &mut RandomStream) -> f64 {
        self.eps * (s.uniform() * self.log_ratio()).exp()
    }

    /// Constant per-sample weight `c(d) ln(R/eps) |S^{d-1}|`.
    fn weight(&self, d: usize) -> f64 {
        riesz_constant(d) * self.log_ratio() * sphere_area(d)
    }
}

fn sample_direction(d: usize, s: &mut RandomStream, out: &mut [f64]) {
    loop {
        let mut n2 = 0.0;
        for v in out.iter_mut().take(d) {
            *v = s.normal();
            n2 += *v * *v;
        }
        if n2 > 0.0 {
            let inv = n2.sqrt().recip();
            out.iter_mut().for_each(|v| *v *= inv);
            return;
        }
    }
}

/// Monte Carlo truncated Riesz transform `R_k f(x)` (`k` 0-based).
pub fn riesz_truncated_mc<F>(
    f: F,
    k: usize,
    x: &[f64],
    annulus: Annulus,
    n: u64,
    stream: &RandomStream,
) -> Result<EstimateWithError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = x.len();
    if k >= d {
        return Err(Error::domain(format!("coordinate {} exceeds dimension {d}", k + 1)));
    }
    Annulus::new(annulus.eps, annulus.r_max)?;
    let m = sample_moments(n, stream, |s, _| {
        let r = annulus.sample_radius(s);
        let mut theta = vec![0.0; d];
        sample_direction(d, s, &mut theta);
        let mut minus = vec![0.0; d];
        let mut plus = vec![0.0; d];
        for i in 0..d {
            minus[i] = x[i] - r * theta[i];
            plus[i] = x[i] + r * theta[i];
        }
        Ok(0.5 * theta[k] * (f(&minus) - f(&plus)))
    })?;
    Ok(EstimateWithError::from_moments(&m, annulus.weight(d)))
}

/// Deterministic annulus quadrature of the same truncated transform for
/// `d ∈ {2, 3}`: Gauss–Legendre in `ln r`, and on the sphere a
/// Gauss–Legendre rule in the polar cosine times a uniform azimuth rule.
pub fn riesz_annulus_quadrature<F>(
    f: F,
    k: usize,
    x: &[f64],
    annulus: Annulus,
    n_radial: usize,
    n_angular: usize,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let d = x.len();
    if k >= d {
        return Err(Error::domain(format!("coordinate {} exceeds dimension {d}", k + 1)));
    }
    let dirs = sphere_rule(d, n_angular)?;
    let (gx, gw) = gauss_legendre(n_radial);
    let (la, lb) = (annulus.eps.ln(), annulus.r_max.ln());
    let half = 0.5 * (lb - la);
    let mut y = vec![0.0; d];
    let mut total = 0.0;
    for (u, wu) in gx.iter().zip(&gw) {
        let r = (la + half * (u + 1.0)).exp();
        let mut ang = 0.0;
        for (theta, wt) in &dirs {
            for i in 0..d {
                y[i] = x[i] - r * theta[i];
            }
            ang += wt * theta[k] * f(&y);
        }
        total += half * wu * ang;
    }
    Ok(riesz_constant(d) * total)
}

/// Nodes and weights on the unit sphere, weights summing to its area.
pub fn sphere_rule(d: usize, n: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    match d {
        2 => {
            let m = 2 * n;
            let w = 2.0 * PI / m as f64;
            Ok((0..m)
                .map(|i| {
                    let a = (i as f64 + 0.5) * w;
                    (vec![a.cos(), a.sin()], w)
                })
                .collect())
        }
        3 => {
            let (cx, cw) = gauss_legendre(n);
            let m = 2 * n;
            let wa = 2.0 * PI / m as f64;
            let mut out = Vec::with_capacity(n * m);
            for (c, w) in cx.iter().zip(&cw) {
                let s = (1.0 - c * c).sqrt();
                for i in 0..m {
                    let a = (i as f64 + 0.5) * wa;
                    out.push((vec![s * a.cos(), s * a.sin(), *c], w * wa));
                }
            }
            Ok(out)
        }
        _ => Err(Error::Unsupported(format!("sphere rule for d = {d}"))),
    }
}

/// A vector field with its Jacobian, `jac[i*d + j] = ∂_j u_i`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64], out: &mut [f64]);
    fn jacobian(&self, x: &[f64], out: &mut [f64]);
}

/// Component-wise registry fields frozen at one time.
#[derive(Clone, Debug)]
pub struct FieldComponents {
    pub components: Vec<TestField>,
    pub t: f64,
}

impl VectorField for FieldComponents {
    fn dim(&self) -> usize {
        self.components.len()
    }

    fn value(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(x, self.t);
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (i, c) in self.components.iter().enumerate() {
            c.grad(x, self.t, &mut out[i * d..(i + 1) * d]);
        }
    }
}

/// Which terms of the bilinear form to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BilinearMode {
    ConvectiveOnly,
    Full,
}

/// Sampling parameters of the pressure term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RieszParams {
    pub eps: f64,
    pub r_max: f64,
    pub n: u64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_fd_step() -> f64 {
    1e-4
}

/// `(u·∇)u`, exactly, from the field's Jacobian.
pub fn convective(u: &dyn VectorField, x: &[f64]) -> Vec<f64> {
    let d = u.dim();
    let mut v = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    u.value(x, &mut v);
    u.jacobian(x, &mut jac);
    (0..d)
        .map(|i| (0..d).map(|j| v[j] * jac[i * d + j]).sum())
        .collect()
}

/// `B(u, u)` at `x`. `ConvectiveOnly` gives `(u·∇)u` with zero error; `Full`
/// adds `∇P`, `P = Σ_{j,k} R_j R_k (u_j u_k)`, estimated by nested truncated
/// Riesz sampling and central differences on common random numbers.
#[allow(non_snake_case)]
pub fn bilinear_B(
    u: &dyn VectorField,
    x: &[f64],
    mode: BilinearMode,
    params: Option<&RieszParams>,
    stream: &RandomStream,
) -> Result<Vec<EstimateWithError>> {
    let d = u.dim();
    if x.len() != d {
        return Err(Error::domain(format!("point has dimension {}, field has {d}", x.len())));
    }
    let conv = convective(u, x);
    match mode {
        BilinearMode::ConvectiveOnly => Ok(conv.into_iter().map(|v| EstimateWithError::exact(v, 0)).collect()),
        BilinearMode::Full => {
            let p = params.ok_or_else(|| {
                Error::config("riesz", "full bilinear mode needs Riesz sampling parameters")
            })?;
            let grad = pressure_gradient_mc(u, x, p, stream)?;
            Ok(conv
                .into_iter()
                .zip(grad)
                .map(|(c, g)| EstimateWithError {
                    value: c + g.value,
                    ..g
                })
                .collect())
        }
    }
}

/// `∂_i P(x)` for every `i`, sharing one sample plan across components and
/// across the two difference points.
pub fn pressure_gradient_mc(
    u: &dyn VectorField,
    x: &[f64],
    params: &RieszParams,
    stream: &RandomStream,
) -> Result<Vec<EstimateWithError>> {
    let d = u.dim();
    let annulus = Annulus::new(params.eps, params.r_max)?;
    if !(params.fd_step > 0.0) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let moments = sample_moments_vec(params.n, d, stream, |s, _, out| {
        pressure_gradient_sample(u, x, annulus, params.fd_step, s, out);
        Ok(())
    })?;
    Ok(moments
        .iter()
        .map(|m| EstimateWithError::from_moments(m, 1.0))
        .collect())
}

/// One unbiased sample of `∇P(x)` (up to the truncation and the difference
/// step), written into `out`.
pub fn pressure_gradient_sample(
    u: &dyn VectorField,
    x: &[f64],
    annulus: Annulus,
    fd_step: f64,
    s: &mut RandomStream,
    out: &mut [f64],
) {
    let d = u.dim();
    let w = annulus.weight(d);
    let r1 = annulus.sample_radius(s);
    let mut th1 = vec![0.0; d];
    sample_direction(d, s, &mut th1);
    let r2 = annulus.sample_radius(s);
    let mut th2 = vec![0.0; d];
    sample_direction(d, s, &mut th2);
    let mut xp = x.to_vec();
    for i in 0..d {
        xp[i] = x[i] + fd_step;
        let fp = nested_sample(u, &xp, r1, &th1, r2, &th2);
        xp[i] = x[i] - fd_step;
        let fm = nested_sample(u, &xp, r1, &th1, r2, &th2);
        xp[i] = x[i];
        out[i] = w * w * (fp - fm) / (2.0 * fd_step);
    }
}

/// `Σ_{j,k} θ1_j θ2_k (u_j u_k)(x − r1θ1 − r2θ2)`, averaged over the four
/// antithetic sign pairs.
fn nested_sample(u: &dyn VectorField, x: &[f64], r1: f64, th1: &[f64], r2: f64, th2: &[f64]) -> f64 {
    let d = x.len();
    let mut y = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut acc = 0.0;
    for (s1, s2) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
        for k in 0..d {
            y[k] = x[k] - s1 * r1 * th1[k] - s2 * r2 * th2[k];
        }
        u.value(&y, &mut v);
        let a: f64 = (0..d).map(|j| th1[j] * v[j]).sum();
        let b: f64 = (0..d).map(|k| th2[k] * v[k]).sum();
        acc += s1 * s2 * a * b;
    }
    0.25 * acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_symbol() {
        let p = hw_symbol(&[1.0, 0.0, 0.0]).unwrap();
        let expect = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(p.matrix, expect);
        assert!(hw_symbol(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn constants() {
        assert!((riesz_constant(3) + PI * PI).abs() < 1e-12);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-12);
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-12);
        let area: f64 = sphere_rule(3, 8).unwrap().iter().map(|p| p.1).sum();
        assert!((area - 4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn constant_field_vanishes() {
        let a = Annulus::new(0.01, 5.0).unwrap();
        let e = riesz_truncated_mc(|_| 3.0, 1, &[0.0, 0.0, 0.0], a, 1000, &RandomStream::new(1)).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn radial_field_vanishes() {
        let x = [0.3, -0.2, 0.5];
        let f = TestField::gaussian_bump(1.0, 0.7, x.to_vec());
        let a = Annulus::new(0.01, 8.0).unwrap();
        let e = riesz_truncated_mc(|y| f.eval(y, 0.0), 0, &x, a, 2000, &RandomStream::new(2)).unwrap();
        assert!(e.value.abs() < 1e-12);
    }

    #[test]
    fn offset_bump_matches_quadrature() {
        let f = TestField::gaussian_bump(1.0, 0.6, vec![0.5, 0.0, 0.2]);
        let x = [0.0, 0.0, 0.0];
        let a = Annulus::new(0.01, 6.0).unwrap();
        let q = riesz_annulus_quadrature(|y| f.eval(y, 0.0), 0, &x, a, 64, 32).unwrap();
        let q2 = riesz_annulus_quadrature(|y| f.eval(y, 0.0), 0, &x, a, 96, 48).unwrap();
        assert!((q - q2).abs() < 1e-8 * q.abs().max(1.0));
        let e = riesz_truncated_mc(|y| f.eval(y, 0.0), 0, &x, a, 200_000, &RandomStream::new(3)).unwrap();
        assert!((e.value - q).abs() <= 4.0 * e.stderr, "{e:?} vs {q}");
    }

    #[test]
    fn eps_at_least_r_rejected() {
        assert!(Annulus::new(1.0, 1.0).is_err());
        let a = Annulus { eps: 2.0, r_max: 1.0 };
        assert!(riesz_truncated_mc(|_| 1.0, 0, &[0.0], a, 10, &RandomStream::new(1)).is_err());
    }

    struct Rotation;

    impl VectorField for Rotation {
        fn dim(&self) -> usize {
            3
        }
        fn value(&self, x: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[x[1], -x[0], 0.0]);
        }
        fn jacobian(&self, _x: &[f64], out: &mut [f64]) {
            out.fill(0.0);
            out[1] = 1.0;
            out[3] = -1.0;
        }
    }

    #[test]
    fn convective_examples() {
        let x = [0.7, -0.4, 1.1];
        let b = bilinear_B(&Rotation, &x, BilinearMode::ConvectiveOnly, None, &RandomStream::new(1)).unwrap();
        let vals: Vec<f64> = b.iter().map(|e| e.value).collect();
        assert_eq!(vals, vec![-0.7, 0.4, 0.0]);

        let c = FieldComponents {
            components: (0..3).map(|i| TestField::constant(3, i as f64)).collect(),
            t: 1.0,
        };
        let b = bilinear_B(&c, &x, BilinearMode::ConvectiveOnly, None, &RandomStream::new(1)).unwrap();
        assert!(b.iter().all(|e| e.value == 0.0));
        assert!(matches!(
            bilinear_B(&c, &x, BilinearMode::Full, None, &RandomStream::new(1)),
            Err(Error::Config { .. })
        ));
    }
}
