//! Depending-trial estimators for iterated space-time heat convolutions.
//!
//! A term is a chain of `m` steps from `(x, t)` back toward time zero. Step `j`
//! applies either the plain kernel `w_{s_{j-1}-s_j}(y_{j-1} - y_j)` or the
//! gradient kernel, which carries the extra factor
//! `(y_{j-1} - y_j)_k / (s_{j-1} - s_j)` for a fixed coordinate `k`. Under the
//! substitution `y_j = y_{j-1} + z_j √(s_{j-1} - s_j)`, `s_j = t τ_j`, the
//! gradient factor becomes `−z_{j,k} / √(gap)`, and the `gap^{-1/2}` is
//! absorbed into the simplex law.
//!
//! The simplex law puts concentration 1/2 on gradient gaps and 1 on plain gaps
//! and on the remainder. The normalizer is
//! `π^{m_g/2} / Γ(1 + m_p + m_g/2)`, which is `1/m!` for all-plain chains
//! and `W_m` for all-gradient chains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::heat::TestField;
use crate::quadrature::{gauss_hermite_prob, gauss_legendre};
use crate::sampling::{
    gaussian_block_sample, pb_half_sample, stick_breaking_sample, uniform_simplex_sample,
    unit_ball_volume, GapShape, GaussianBlock, SimplexPoint,
};
use crate::stats::{sample_moments, EstimateWithError};
use crate::stream::RandomStream;

/// Kernel applied at one step of a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Plain,
    Grad,
}

/// Sequence of plain and gradient steps with the derivative coordinate of
/// each gradient step (0-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermKernelSpec {
    order: Vec<StepKind>,
    deriv_indices: Vec<usize>,
}

impl TermKernelSpec {
    pub fn new(order: Vec<StepKind>, deriv_indices: Vec<usize>) -> Result<Self> {
        if order.is_empty() {
            return Err(Error::domain("a kernel chain needs at least one step"));
        }
        let grads = order.iter().filter(|k| **k == StepKind::Grad).count();
        if grads != deriv_indices.len() {
            return Err(Error::domain(format!(
                "{grads} gradient steps but {} derivative indices",
                deriv_indices.len()
            )));
        }
        Ok(Self { order, deriv_indices })
    }

    pub fn plain(m: usize) -> Result<Self> {
        Self::new(vec![StepKind::Plain; m], Vec::new())
    }

    pub fn grad(deriv_indices: Vec<usize>) -> Result<Self> {
        Self::new(vec![StepKind::Grad; deriv_indices.len()], deriv_indices)
    }

    /// `m1` plain steps followed by the gradient steps.
    pub fn mixed(m1: usize, deriv_indices: Vec<usize>) -> Result<Self> {
        let mut order = vec![StepKind::Plain; m1];
        order.extend(std::iter::repeat_n(StepKind::Grad, deriv_indices.len()));
        Self::new(order, deriv_indices)
    }

    /// Number of steps.
    pub fn m(&self) -> usize {
        self.order.len()
    }

    /// Number of plain steps.
    pub fn m1(&self) -> usize {
        self.order.len() - self.deriv_indices.len()
    }

    /// Number of gradient steps.
    pub fn m2(&self) -> usize {
        self.deriv_indices.len()
    }

    pub fn order(&self) -> &[StepKind] {
        &self.order
    }

    pub fn deriv_indices(&self) -> &[usize] {
        &self.deriv_indices
    }

    /// Derivative coordinate of each step, `None` for plain steps.
    pub fn step_derivs(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        let mut next = self.deriv_indices.iter();
        self.order.iter().map(move |k| match k {
            StepKind::Plain => None,
            StepKind::Grad => next.next().copied(),
        })
    }

    pub fn gap_shapes(&self) -> Vec<GapShape> {
        self.order
            .iter()
            .map(|k| match k {
                StepKind::Plain => GapShape::Unit,
                StepKind::Grad => GapShape::Half,
            })
            .collect()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if let Some(k) = self.deriv_indices.iter().find(|k| **k >= d) {
            return Err(Error::domain(format!(
                "derivative index {} exceeds dimension {d}",
                k + 1
            )));
        }
        Ok(())
    }
}

/// A sampled chain: Gaussian steps, simplex times and the resulting
/// space-time points `(y_j, s_j)`, `j = 1..m`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathPoint {
    pub z: GaussianBlock,
    pub tau: SimplexPoint,
    y: Vec<f64>,
    s: Vec<f64>,
}

impl PathPoint {
    pub fn steps(&self) -> usize {
        self.s.len()
    }

    /// `y_j` for `j` in `1..=m`.
    pub fn y(&self, j: usize) -> &[f64] {
        let d = self.z.dim();
        &self.y[(j - 1) * d..j * d]
    }

    /// `s_j` for `j` in `1..=m`.
    pub fn s(&self, j: usize) -> f64 {
        self.s[j - 1]
    }

    pub fn times(&self) -> &[f64] {
        &self.s
    }

    /// The last point `(y_m, s_m)`.
    pub fn end(&self) -> (&[f64], f64) {
        let m = self.steps();
        (self.y(m), self.s(m))
    }
}

fn build_path(x: &[f64], t: f64, z: GaussianBlock, tau: SimplexPoint) -> PathPoint {
    let (m, d) = (z.steps(), z.dim());
    let mut y = Vec::with_capacity(m * d);
    let mut s = Vec::with_capacity(m);
    for j in 0..m {
        let sj = t * tau.coords()[j];
        let scale = (t * tau.gaps()[j]).sqrt();
        let zj = z.row(j);
        for k in 0..d {
            let base = if j == 0 { x[k] } else { y[(j - 1) * d + k] };
            y.push(base + zj[k] * scale);
        }
        s.push(sj);
    }
    PathPoint { z, tau, y, s }
}

/// `y_j = y_{j-1} + z_j √(s_{j-1} − s_j)`, `s_j = t τ_j`, from `(y_0, s_0) = (x, t)`.
pub fn change_of_variables(
    x: &[f64],
    t: f64,
    z: &GaussianBlock,
    tau: &SimplexPoint,
) -> Result<PathPoint> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("time must be positive, got {t}")));
    }
    if z.dim() != x.len() || z.steps() != tau.dim() {
        return Err(Error::domain(format!(
            "shape mismatch: x has {} coordinates, z is {}x{}, tau has {} steps",
            x.len(),
            z.steps(),
            z.dim(),
            tau.dim()
        )));
    }
    if let Some(j) = tau.gaps()[..tau.dim()].iter().position(|g| *g <= 0.0) {
        return Err(Error::domain(format!("zero time gap at step {}", j + 1)));
    }
    Ok(build_path(x, t, z.clone(), tau.clone()))
}

/// Inverse of [`change_of_variables`]: the Gaussian steps that lead from
/// `(x, t)` through the points `y` (row-major `m × d`) at times `s`.
pub fn recover_steps(x: &[f64], t: f64, y: &[f64], s: &[f64]) -> Result<GaussianBlock> {
    let (m, d) = (s.len(), x.len());
    if y.len() != m * d {
        return Err(Error::domain("y must hold m rows of length d"));
    }
    let mut z = Vec::with_capacity(m * d);
    let mut prev = t;
    for j in 0..m {
        let gap = prev - s[j];
        if !(gap > 0.0) {
            return Err(Error::domain(format!("times must strictly decrease at step {}", j + 1)));
        }
        let scale = gap.sqrt();
        for k in 0..d {
            let base = if j == 0 { x[k] } else { y[(j - 1) * d + k] };
            z.push((y[j * d + k] - base) / scale);
        }
        prev = s[j];
    }
    GaussianBlock::from_rows(m, d, z)
}

/// Draw one chain for `spec` from `(x, t)`: simplex variate first, then the
/// Gaussian block.
pub fn sample_path(spec: &TermKernelSpec, x: &[f64], t: f64, stream: &mut RandomStream) -> PathPoint {
    let m = spec.m();
    let tau = if spec.m2() == 0 {
        uniform_simplex_sample(m, stream)
    } else if spec.m1() == 0 {
        pb_half_sample(m, stream)
    } else {
        stick_breaking_sample(&spec.gap_shapes(), stream)
    };
    let z = gaussian_block_sample(m, x.len(), stream);
    build_path(x, t, z, tau)
}

/// Total mass `t^{m_p + m_g/2} π^{m_g/2} / Γ(1 + m_p + m_g/2)` multiplying the
/// sample mean.
pub fn kernel_weight(spec: &TermKernelSpec, t: f64) -> f64 {
    let (mp, mg) = (spec.m1(), spec.m2());
    if mg == 0 {
        t.powi(mp as i32) / factorial(mp)
    } else if mp == 0 {
        t.powf(mg as f64 / 2.0) * unit_ball_volume(mg)
    } else {
        let half = mg as f64 / 2.0;
        let log_c = half * std::f64::consts::PI.ln() - ln_gamma(1.0 + mp as f64 + half);
        t.powf(mp as f64 + half) * log_c.exp()
    }
}

/// `∏ (−z_{j,k_j})` over the gradient steps.
pub fn gradient_factor(spec: &TermKernelSpec, path: &PathPoint) -> f64 {
    spec.step_derivs()
        .enumerate()
        .filter_map(|(j, k)| k.map(|k| -path.z.get(j, k)))
        .product()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Terminal integrand `h(y_m, s_m)`.
pub trait Integrand: Sync {
    fn eval(&self, y: &[f64], s: f64) -> f64;

    /// Spatial dimension, when the integrand fixes one.
    fn dim(&self) -> Option<usize> {
        None
    }

    /// `sup |h|`, when known.
    fn sup_abs(&self) -> Option<f64> {
        None
    }
}

impl Integrand for TestField {
    fn eval(&self, y: &[f64], s: f64) -> f64 {
        TestField::eval(self, y, s)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.d)
    }

    fn sup_abs(&self) -> Option<f64> {
        TestField::sup_abs(self)
    }
}

/// Wraps a closure `(y, s) -> h`.
pub struct FnIntegrand<F>(pub F);

impl<F: Fn(&[f64], f64) -> f64 + Sync> Integrand for FnIntegrand<F> {
    fn eval(&self, y: &[f64], s: f64) -> f64 {
        (self.0)(y, s)
    }
}

fn check_args(spec: &TermKernelSpec, x: &[f64], t: f64, dim: Option<usize>) -> Result<()> {
    if x.is_empty() {
        return Err(Error::domain("x must have at least one coordinate"));
    }
    if let Some(d) = dim {
        if d != x.len() {
            return Err(Error::domain(format!(
                "integrand has dimension {d}, point has {}",
                x.len()
            )));
        }
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("time must be positive, got {t}")));
    }
    spec.check_dim(x.len())
}

/// Estimate of `weight · E[∏(−z) · f(path)]` for an arbitrary path
/// functional. `f` may draw further variates from the chunk stream it is
/// handed; those come after the path's own draws.
pub fn estimate_path<F>(
    spec: &TermKernelSpec,
    x: &[f64],
    t: f64,
    n: u64,
    stream: &RandomStream,
    f: F,
) -> Result<EstimateWithError>
where
    F: Fn(&PathPoint, &mut RandomStream) -> Result<f64> + Sync,
{
    check_args(spec, x, t, None)?;
    let moments = sample_moments(n, stream, |s, _| {
        let path = sample_path(spec, x, t, s);
        let g = gradient_factor(spec, &path);
        Ok(g * f(&path, s)?)
    })?;
    Ok(EstimateWithError::from_moments(&moments, kernel_weight(spec, t)))
}

/// Mixed chain estimate of `K[h](x, t)`.
#[allow(non_snake_case)]
pub fn estimate_K<H: Integrand + ?Sized>(
    h: &H,
    spec: &TermKernelSpec,
    x: &[f64],
    t: f64,
    n: u64,
    stream: &RandomStream,
) -> Result<EstimateWithError> {
    check_args(spec, x, t, h.dim())?;
    let est = estimate_path(spec, x, t, n, stream, |p, _| {
        let (y, s) = p.end();
        Ok(h.eval(y, s))
    })?;
    Ok(match h.sup_abs() {
        Some(sup) => est.with_bound(variance_bound(spec, t, sup, n).sharp),
        None => est,
    })
}

/// `I_m[h](x, t)`: `m` plain kernels.
#[allow(non_snake_case)]
pub fn estimate_I<H: Integrand + ?Sized>(
    h: &H,
    m: usize,
    x: &[f64],
    t: f64,
    n: u64,
    stream: &RandomStream,
) -> Result<EstimateWithError> {
    estimate_K(h, &TermKernelSpec::plain(m)?, x, t, n, stream)
}

/// `J_m[h](x, t)`: gradient kernels only.
#[allow(non_snake_case)]
pub fn estimate_J<H: Integrand + ?Sized>(
    h: &H,
    spec: &TermKernelSpec,
    x: &[f64],
    t: f64,
    n: u64,
    stream: &RandomStream,
) -> Result<EstimateWithError> {
    if spec.m1() != 0 {
        return Err(Error::domain("gradient-only estimate given plain steps"));
    }
    estimate_K(h, spec, x, t, n, stream)
}

/// Variance bounds of the chain estimator for `|h| <= h_sup`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VarianceBound {
    /// Bound specific to the step mix.
    pub sharp: f64,
    /// `max(t^m, t^{2m}) W_m² h_sup² / N`.
    pub rough: f64,
}

/// Both variance bounds. With `m_p` plain and `m_g` gradient steps the sharp
/// bound is `t^{2m_p + m_g} W(m_g)² h_sup² / (m_p!² N)`, which covers the
/// pure cases `t^{2m}/m!²` and `t^m W_m²`.
pub fn variance_bound(spec: &TermKernelSpec, t: f64, h_sup: f64, n: u64) -> VarianceBound {
    let (mp, mg, m) = (spec.m1(), spec.m2(), spec.m());
    let h2 = h_sup * h_sup;
    let nf = n as f64;
    if h2 == 0.0 {
        return VarianceBound { sharp: 0.0, rough: 0.0 };
    }
    let w = unit_ball_volume(mg);
    let f = factorial(mp);
    let sharp = t.powi((2 * mp + mg) as i32) * w * w / (f * f) * h2 / nf;
    let wm = unit_ball_volume(m);
    let rough = t.powi(m as i32).max(t.powi(2 * m as i32)) * wm * wm * h2 / nf;
    VarianceBound { sharp, rough }
}

/// Deterministic reference value with an error estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuadratureValue {
    pub value: f64,
    pub error: f64,
}

/// Tensor Gauss quadrature of the substituted chain integral, for `m <= 2`
/// and `d <= 2`.
///
/// Time gaps are parametrized by stick fractions `a = sin²θ`, `b = sin²φ`,
/// which makes every `gap^{-1/2}` factor smooth; the Gaussian steps use
/// Gauss–Hermite nodes. Two resolutions are compared for the error.
pub fn quadrature_oracle<H: Integrand + ?Sized>(
    h: &H,
    spec: &TermKernelSpec,
    x: &[f64],
    t: f64,
) -> Result<QuadratureValue> {
    check_args(spec, x, t, h.dim())?;
    if spec.m() > 2 || x.len() > 2 {
        return Err(Error::Unsupported(format!(
            "quadrature oracle supports m <= 2 and d <= 2, got m = {}, d = {}",
            spec.m(),
            x.len()
        )));
    }
    let lo = chain_quadrature(h, spec, x, t, 20, 16);
    let hi = chain_quadrature(h, spec, x, t, 28, 22);
    Ok(QuadratureValue {
        value: hi,
        error: (hi - lo).abs(),
    })
}

fn chain_quadrature<H: Integrand + ?Sized>(
    h: &H,
    spec: &TermKernelSpec,
    x: &[f64],
    t: f64,
    n_time: usize,
    n_gauss: usize,
) -> f64 {
    let (m, d) = (spec.m(), x.len());
    let (gl_x, gl_w) = gauss_legendre(n_time);
    let quarter = std::f64::consts::FRAC_PI_4;
    // θ ∈ (0, π/2)
    let angles: Vec<(f64, f64)> = gl_x
        .iter()
        .zip(&gl_w)
        .map(|(u, w)| (quarter * (u + 1.0), quarter * w))
        .collect();
    let (gh_x, gh_w) = gauss_hermite_prob(n_gauss);
    let derivs: Vec<Option<usize>> = spec.step_derivs().collect();
    let nz = m * d;
    let z_total = n_gauss.pow(nz as u32);

    // (gaps, weight) of every time node, weight including the Jacobian and
    // the gradient singularities
    let mut time_nodes: Vec<([f64; 2], f64)> = Vec::new();
    for &(th, wt) in &angles {
        let a = th.sin().powi(2);
        let da = 2.0 * th.sin() * th.cos() * wt;
        if m == 1 {
            time_nodes.push(([a, 0.0], da));
        } else {
            for &(ph, wp) in &angles {
                let b = ph.sin().powi(2);
                let db = 2.0 * ph.sin() * ph.cos() * wp;
                time_nodes.push(([a, (1.0 - a) * b], (1.0 - a) * da * db));
            }
        }
    }

    let total: f64 = time_nodes
        .par_iter()
        .map(|(gaps, wt)| {
            let mut weight = *wt;
            for j in 0..m {
                if derivs[j].is_some() {
                    weight /= gaps[j].sqrt();
                }
            }
            let mut acc = 0.0;
            let mut z = vec![0.0; nz];
            let mut y = vec![0.0; d];
            for flat in 0..z_total {
                let mut rem = flat;
                let mut wz = 1.0;
                for zi in z.iter_mut() {
                    let idx = rem % n_gauss;
                    *zi = gh_x[idx];
                    wz *= gh_w[idx];
                    rem /= n_gauss;
                }
                y.copy_from_slice(x);
                let mut s = t;
                let mut factor = 1.0;
                for j in 0..m {
                    let gap = t * gaps[j];
                    let sc = gap.sqrt();
                    for k in 0..d {
                        y[k] += z[j * d + k] * sc;
                    }
                    s -= gap;
                    if let Some(k) = derivs[j] {
                        factor *= -z[j * d + k];
                    }
                }
                acc += wz * factor * h.eval(&y, s.max(0.0));
            }
            weight * acc
        })
        .sum();
    let (mp, mg) = (spec.m1() as f64, spec.m2() as f64);
    t.powf(mp + mg / 2.0) * total
}
