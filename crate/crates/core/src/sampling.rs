//! Sampling laws for the depending-trial estimators: Gaussian step blocks,
//! the uniform law on the ordered simplex, and the polygonal Beta law
//! PB(1/2, m), together with the normalizing constants they need.
//!
//! Simplex points are stored in decreasing order `1 > τ_1 > … > τ_m > 0`.
//! The gap representation is `g_1 = 1 − τ_1`, `g_j = τ_{j−1} − τ_j` and the
//! remainder `τ_m`; under PB(1/2, m) the gaps follow a Dirichlet law with
//! concentration `(1/2, …, 1/2, 1)`.

use std::f64::consts::PI;

use statrs::function::beta::inv_beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::stream::RandomStream;

/// Gaps below this are treated as degenerate by the densities.
pub const MIN_GAP: f64 = 1e-300;

/// `m × d` block of independent standard normal variates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBlock {
    m: usize,
    d: usize,
    z: Vec<f64>,
}

impl GaussianBlock {
    pub fn from_rows(m: usize, d: usize, z: Vec<f64>) -> Result<Self> {
        if m == 0 || d == 0 || z.len() != m * d {
            return Err(Error::domain(format!(
                "gaussian block shape {m}x{d} does not match {} entries",
                z.len()
            )));
        }
        Ok(Self { m, d, z })
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        Self { m, d, z: vec![0.0; m * d] }
    }

    pub fn steps(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Row `j` (0-based step index).
    pub fn row(&self, j: usize) -> &[f64] {
        &self.z[j * self.d..(j + 1) * self.d]
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.z[j * self.d + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    /// Multiply every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            m: self.m,
            d: self.d,
            z: self.z.iter().map(|v| v * c).collect(),
        }
    }
}

/// Point of the ordered simplex `S(m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint {
    coords: Vec<f64>,
    /// `m + 1` entries: `g_1 … g_m` then the remainder `τ_m`.
    gaps: Vec<f64>,
}

impl SimplexPoint {
    /// Build from decreasing coordinates.
    pub fn from_coords(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::domain("simplex point needs at least one coordinate"));
        }
        let mut gaps = Vec::with_capacity(coords.len() + 1);
        let mut prev = 1.0;
        for &c in &coords {
            if !(c >= 0.0 && c <= prev) {
                return Err(Error::domain(format!(
                    "coordinates must decrease within [0,1], got {coords:?}"
                )));
            }
            gaps.push(prev - c);
            prev = c;
        }
        gaps.push(prev);
        Ok(Self { coords, gaps })
    }

    /// Build from the `m + 1` gaps (last entry is the remainder `τ_m`).
    pub fn from_gaps(gaps: Vec<f64>) -> Result<Self> {
        if gaps.len() < 2 || gaps.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::domain(format!("invalid simplex gaps {gaps:?}")));
        }
        let m = gaps.len() - 1;
        let mut coords = vec![0.0; m];
        let mut acc = gaps[m];
        for j in (0..m).rev() {
            coords[j] = acc;
            acc += gaps[j];
        }
        if (acc - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("simplex gaps sum to {acc}, expected 1")));
        }
        Ok(Self { coords, gaps })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// `g_1 … g_m` followed by the remainder.
    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    /// Whether `1 > τ_1 > … > τ_m > 0` and the gaps close to one.
    pub fn is_valid(&self) -> bool {
        let m = self.coords.len();
        let mut prev = 1.0;
        for &c in &self.coords {
            if !(c < prev && c > 0.0) {
                return false;
            }
            prev = c;
        }
        let total: f64 = self.gaps.iter().sum();
        self.gaps.len() == m + 1 && self.gaps.iter().all(|g| *g > 0.0) && (total - 1.0).abs() <= 1e-12
    }
}

/// Dirichlet concentration of one simplex gap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GapShape {
    /// Concentration 1/2: density factor `g^{-1/2}` (a gradient-kernel step).
    Half,
    /// Concentration 1: flat in the gap (a plain-kernel step).
    Unit,
}

impl GapShape {
    pub fn concentration(self) -> f64 {
        match self {
            GapShape::Half => 0.5,
            GapShape::Unit => 1.0,
        }
    }
}

pub fn gaussian_block_sample(m: usize, d: usize, stream: &mut RandomStream) -> GaussianBlock {
    let z = (0..m * d).map(|_| stream.normal()).collect();
    GaussianBlock { m, d, z }
}

/// Uniform point of `S(m)`: descending order statistics of `m` uniforms.
pub fn uniform_simplex_sample(m: usize, stream: &mut RandomStream) -> SimplexPoint {
    let mut coords: Vec<f64> = (0..m).map(|_| stream.uniform()).collect();
    coords.sort_unstable_by(|a, b| b.total_cmp(a));
    // ties have probability zero for 53-bit uniforms but keep the invariant strict
    for j in 1..m {
        if coords[j] >= coords[j - 1] {
            coords[j] = prev_float(coords[j - 1]);
        }
    }
    SimplexPoint::from_coords(coords).expect("order statistics lie in S(m)")
}

/// PB(1/2, m) point, one uniform per gap.
pub fn pb_half_sample(m: usize, stream: &mut RandomStream) -> SimplexPoint {
    let shapes = vec![GapShape::Half; m];
    stick_breaking_sample(&shapes, stream)
}

/// Stick-breaking draw of the gaps of an ordered simplex point whose gap `j`
/// has concentration `shapes[j]` and whose remainder has concentration 1.
///
/// The `j`-th break fraction is `Beta(α_j, Σ_{i>j} α_i + 1)`, evaluated by the
/// inverse regularized incomplete beta function from a single uniform.
pub fn stick_breaking_sample(shapes: &[GapShape], stream: &mut RandomStream) -> SimplexPoint {
    let m = shapes.len();
    let mut tail: f64 = 1.0 + shapes.iter().map(|s| s.concentration()).sum::<f64>();
    let mut remaining = 1.0;
    let mut gaps = Vec::with_capacity(m + 1);
    for &shape in shapes {
        let a = shape.concentration();
        tail -= a;
        let u = stream.uniform();
        let frac = clamp_open(beta_inverse_cdf(a, tail, u));
        let g = remaining * frac;
        gaps.push(g);
        remaining -= g;
    }
    gaps.push(remaining);
    let mut coords = vec![0.0; m];
    let mut acc = remaining;
    for j in (0..m).rev() {
        coords[j] = acc;
        acc += gaps[j];
    }
    SimplexPoint { coords, gaps }
}

/// Inverse CDF of Beta(a, b); closed form when `a == 1`.
pub fn beta_inverse_cdf(a: f64, b: f64, u: f64) -> f64 {
    if a == 1.0 {
        // 1 - (1-u)^{1/b}, written to keep precision for small u
        -((-u).ln_1p() / b).exp_m1()
    } else {
        inv_beta_reg(a, b, u)
    }
}

fn clamp_open(x: f64) -> f64 {
    let lo = f64::MIN_POSITIVE;
    let hi = prev_float(1.0);
    x.clamp(lo, hi)
}

fn prev_float(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// Density of PB(1/2, m) at `s`: `∏ g_j^{-1/2} / W_m`.
pub fn pb_density(m: usize, s: &SimplexPoint) -> Result<f64> {
    if s.dim() != m {
        return Err(Error::domain(format!(
            "point has dimension {}, expected {m}",
            s.dim()
        )));
    }
    let mut log_r = 0.0;
    for &g in &s.gaps()[..m] {
        if !(g > MIN_GAP) {
            return Err(Error::domain(format!("degenerate simplex gap {g}")));
        }
        log_r -= 0.5 * g.ln();
    }
    if !(s.gaps()[m] >= 0.0) {
        return Err(Error::domain("negative simplex remainder"));
    }
    Ok(log_r.exp() / unit_ball_volume(m))
}

/// Volume of the unit ball in `R^m`, `π^{m/2} / Γ(1 + m/2)`.
pub fn unit_ball_volume(m: usize) -> f64 {
    // W_0 = 1, W_1 = 2, W_m = (2π/m) W_{m-2}
    let (mut w, start) = if m % 2 == 0 { (1.0, 2) } else { (2.0, 3) };
    let mut k = start;
    while k <= m {
        w *= 2.0 * PI / k as f64;
        k += 2;
    }
    w
}

/// `∏ Γ(1 − α_k) / Γ(1 + Σ (1 − α_k))`: the integral over `S(m)` of
/// `∏ g_k^{−α_k}`.
pub fn dirichlet_simplex_integral(alphas: &[f64]) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::domain("need at least one exponent"));
    }
    let mut log_num = 0.0;
    let mut total = 0.0;
    for &a in alphas {
        if !(0.0..1.0).contains(&a) {
            return Err(Error::domain(format!("exponent {a} outside [0, 1)")));
        }
        log_num += ln_gamma(1.0 - a);
        total += 1.0 - a;
    }
    Ok((log_num - ln_gamma(1.0 + total)).exp())
}

/// Partial sum `Σ_{n < terms} z^n / Γ(1 + nβ)` of the Mittag-Leffler series.
pub fn mittag_leffler_partial(beta: f64, z: f64, terms: usize) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::domain(format!("beta must be positive, got {beta}")));
    }
    if terms == 0 {
        return Err(Error::domain("need at least one term"));
    }
    let mut sum = 1.0;
    if z != 0.0 {
        let ln_abs = z.abs().ln();
        for n in 1..terms {
            let nf = n as f64;
            let mag = (nf * ln_abs - ln_gamma(1.0 + nf * beta)).exp();
            let term = if z < 0.0 && n % 2 == 1 { -mag } else { mag };
            sum += term;
            if !sum.is_finite() || !term.is_finite() {
                return Err(Error::Overflow(format!(
                    "Mittag-Leffler partial sum overflowed at term {n}"
                )));
            }
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::beta::beta_reg;

    #[test]
    fn gaussian_block_is_deterministic() {
        let a = gaussian_block_sample(1, 3, &mut RandomStream::new(5));
        let b = gaussian_block_sample(1, 3, &mut RandomStream::new(5));
        assert_eq!(a, b);
        assert_eq!(a.steps(), 1);
        assert_eq!(a.dim(), 3);
    }

    #[test]
    fn ball_volumes() {
        assert_eq!(unit_ball_volume(1), 2.0);
        assert!((unit_ball_volume(2) - PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-14);
        for m in 1..40 {
            let direct = (m as f64 / 2.0 * PI.ln() - ln_gamma(1.0 + m as f64 / 2.0)).exp();
            assert!((unit_ball_volume(m) / direct - 1.0).abs() < 1e-12, "m={m}");
        }
        for m in 6..60 {
            assert!(unit_ball_volume(m + 1) < unit_ball_volume(m));
        }
        assert!(unit_ball_volume(200) < 1e-40);
    }

    #[test]
    fn dirichlet_integral_values() {
        assert!((dirichlet_simplex_integral(&[0.0]).unwrap() - 1.0).abs() < 1e-14);
        assert!((dirichlet_simplex_integral(&[0.0, 0.0, 0.0]).unwrap() - 1.0 / 6.0).abs() < 1e-14);
        assert!((dirichlet_simplex_integral(&[0.5, 0.5]).unwrap() - PI).abs() < 1e-13);
        assert!(matches!(dirichlet_simplex_integral(&[1.0]), Err(Error::Domain(_))));
        // m gradient gaps integrate to W_m
        for m in 1..8 {
            let v = dirichlet_simplex_integral(&vec![0.5; m]).unwrap();
            assert!((v / unit_ball_volume(m) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mittag_leffler_exponential() {
        let e = mittag_leffler_partial(1.0, 1.0, 40).unwrap();
        assert!((e - std::f64::consts::E).abs() < 1e-12);
        for terms in [1, 2, 10] {
            assert_eq!(mittag_leffler_partial(1.0, 0.0, terms).unwrap(), 1.0);
        }
        let inv = mittag_leffler_partial(1.0, -1.0, 40).unwrap();
        assert!((inv - (-1.0f64).exp()).abs() < 1e-12);
        assert!(matches!(
            mittag_leffler_partial(1.0, 1e300, 10),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn pb_density_m1_example() {
        let s = SimplexPoint::from_coords(vec![0.75]).unwrap();
        assert!((pb_density(1, &s).unwrap() - 1.0).abs() < 1e-15);
        let degenerate = SimplexPoint::from_coords(vec![1.0]).unwrap();
        assert!(matches!(pb_density(1, &degenerate), Err(Error::Domain(_))));
    }

    #[test]
    fn beta_inverse_round_trips() {
        for &(a, b) in &[(0.5, 1.0), (0.5, 1.5), (0.5, 3.5), (1.0, 2.0), (1.0, 0.5)] {
            for i in 1..100 {
                let u = i as f64 / 100.0;
                let x = beta_inverse_cdf(a, b, u);
                assert!((beta_reg(a, b, x) - u).abs() < 1e-10, "a={a} b={b} u={u}");
            }
        }
    }

    #[test]
    fn samples_satisfy_invariants() {
        let mut s = RandomStream::new(42);
        for m in 1..=6 {
            for _ in 0..10_000 {
                assert!(uniform_simplex_sample(m, &mut s).is_valid());
                assert!(pb_half_sample(m, &mut s).is_valid());
            }
        }
    }

    #[test]
    fn from_gaps_and_coords_agree() {
        let p = SimplexPoint::from_coords(vec![0.8, 0.5, 0.1]).unwrap();
        let q = SimplexPoint::from_gaps(p.gaps().to_vec()).unwrap();
        for (a, b) in p.coords().iter().zip(q.coords()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(SimplexPoint::from_coords(vec![0.2, 0.5]).is_err());
    }
}
