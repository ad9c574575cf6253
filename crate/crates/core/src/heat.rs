//! Heat kernel, the registry of analytic test fields, and the two base
//! estimators of the linear problem: the semigroup action on initial data and
//! the Duhamel term of a forcing.
//!
//! Normalization is `∂_t u = ½Δu`, so the kernel is the Gaussian density
//! with covariance `t·I`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{sample_moments, EstimateWithError};
use crate::stream::RandomStream;

/// Analytic field families. Each kind is evaluable everywhere and has either a
/// closed-form heat evolution or is meant for quadrature checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldKind {
    /// `c`
    Constant { value: f64 },
    /// `offset + coeffs · x`
    Linear { offset: f64, coeffs: Vec<f64> },
    /// `A exp(−‖x − c‖² / (2σ²))`
    GaussianBump {
        amplitude: f64,
        width: f64,
        center: Vec<f64>,
    },
    /// `A (1 + ‖x − c‖²)^{−power}`
    PolynomialDecay {
        amplitude: f64,
        power: f64,
        center: Vec<f64>,
    },
    /// `A t^p (offset + coeffs · x)`
    ProductTime {
        amplitude: f64,
        time_power: f64,
        offset: f64,
        coeffs: Vec<f64>,
    },
}

/// A scalar field on `R^d × [0, ∞)` drawn from the registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestField {
    pub d: usize,
    #[serde(flatten)]
    pub kind: FieldKind,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl TestField {
    pub fn new(d: usize, kind: FieldKind) -> Result<Self> {
        let f = Self { d, kind };
        f.validate()?;
        Ok(f)
    }

    pub fn constant(d: usize, value: f64) -> Self {
        Self { d, kind: FieldKind::Constant { value } }
    }

    /// `x_k` (0-based `k`).
    pub fn coordinate(d: usize, k: usize) -> Self {
        let mut coeffs = vec![0.0; d];
        coeffs[k] = 1.0;
        Self { d, kind: FieldKind::Linear { offset: 0.0, coeffs } }
    }

    pub fn gaussian_bump(amplitude: f64, width: f64, center: Vec<f64>) -> Self {
        Self {
            d: center.len(),
            kind: FieldKind::GaussianBump { amplitude, width, center },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 {
            return Err(Error::domain("field dimension must be positive"));
        }
        let check_len = |name: &str, v: &[f64]| {
            if v.len() != d {
                Err(Error::domain(format!("{name} has length {}, expected {d}", v.len())))
            } else if v.iter().any(|x| !x.is_finite()) {
                Err(Error::domain(format!("{name} has non-finite entries")))
            } else {
                Ok(())
            }
        };
        match &self.kind {
            FieldKind::Constant { value } if !value.is_finite() => {
                Err(Error::domain("constant must be finite"))
            }
            FieldKind::Constant { .. } => Ok(()),
            FieldKind::Linear { coeffs, .. } => check_len("coeffs", coeffs),
            FieldKind::GaussianBump { width, center, .. } => {
                if !(*width > 0.0) {
                    return Err(Error::domain("gaussian width must be positive"));
                }
                check_len("center", center)
            }
            FieldKind::PolynomialDecay { power, center, .. } => {
                if !(*power > 0.0) {
                    return Err(Error::domain("decay power must be positive"));
                }
                check_len("center", center)
            }
            FieldKind::ProductTime { time_power, coeffs, .. } => {
                if !(*time_power >= 0.0) {
                    return Err(Error::domain("time power must be non-negative"));
                }
                check_len("coeffs", coeffs)
            }
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        match &self.kind {
            FieldKind::Constant { value } => *value,
            FieldKind::Linear { offset, coeffs } => offset + dot(coeffs, x),
            FieldKind::GaussianBump { amplitude, width, center } => {
                amplitude * (-dist2(x, center) / (2.0 * width * width)).exp()
            }
            FieldKind::PolynomialDecay { amplitude, power, center } => {
                amplitude * (1.0 + dist2(x, center)).powf(-power)
            }
            FieldKind::ProductTime { amplitude, time_power, offset, coeffs } => {
                amplitude * t.powf(*time_power) * (offset + dot(coeffs, x))
            }
        }
    }

    /// Spatial gradient at `(x, t)`, written into `out`.
    pub fn grad(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match &self.kind {
            FieldKind::Constant { .. } => out.fill(0.0),
            FieldKind::Linear { coeffs, .. } => out.copy_from_slice(coeffs),
            FieldKind::GaussianBump { width, center, .. } => {
                let v = self.eval(x, t);
                let s2 = width * width;
                for k in 0..self.d {
                    out[k] = -v * (x[k] - center[k]) / s2;
                }
            }
            FieldKind::PolynomialDecay { amplitude, power, center } => {
                let r2 = dist2(x, center);
                let c = -2.0 * power * amplitude * (1.0 + r2).powf(-power - 1.0);
                for k in 0..self.d {
                    out[k] = c * (x[k] - center[k]);
                }
            }
            FieldKind::ProductTime { amplitude, time_power, coeffs, .. } => {
                let c = amplitude * t.powf(*time_power);
                for k in 0..self.d {
                    out[k] = c * coeffs[k];
                }
            }
        }
    }

    /// Sup of `|field|` over space at a fixed time, when finite.
    pub fn sup_abs(&self) -> Option<f64> {
        match &self.kind {
            FieldKind::Constant { value } => Some(value.abs()),
            FieldKind::GaussianBump { amplitude, .. } => Some(amplitude.abs()),
            FieldKind::PolynomialDecay { amplitude, .. } => Some(amplitude.abs()),
            FieldKind::Linear { coeffs, offset } if coeffs.iter().all(|c| *c == 0.0) => {
                Some(offset.abs())
            }
            _ => None,
        }
    }

    /// Radius beyond which the field is negligible, for fields that decay.
    pub fn support_radius(&self) -> Option<f64> {
        match &self.kind {
            FieldKind::GaussianBump { width, center, .. } => {
                Some(center.iter().map(|c| c * c).sum::<f64>().sqrt() + 6.0 * width)
            }
            FieldKind::PolynomialDecay { power, center, .. } => {
                // where (1 + r^2)^{-power} drops below 1e-6
                let r = (1e6f64.powf(1.0 / power) - 1.0).max(0.0).sqrt();
                Some(center.iter().map(|c| c * c).sum::<f64>().sqrt() + r)
            }
            _ => None,
        }
    }

    /// The same field multiplied by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let kind = match &self.kind {
            FieldKind::Constant { value } => FieldKind::Constant { value: lambda * value },
            FieldKind::Linear { offset, coeffs } => FieldKind::Linear {
                offset: lambda * offset,
                coeffs: coeffs.iter().map(|c| lambda * c).collect(),
            },
            FieldKind::GaussianBump { amplitude, width, center } => FieldKind::GaussianBump {
                amplitude: lambda * amplitude,
                width: *width,
                center: center.clone(),
            },
            FieldKind::PolynomialDecay { amplitude, power, center } => FieldKind::PolynomialDecay {
                amplitude: lambda * amplitude,
                power: *power,
                center: center.clone(),
            },
            FieldKind::ProductTime { amplitude, time_power, offset, coeffs } => {
                FieldKind::ProductTime {
                    amplitude: lambda * amplitude,
                    time_power: *time_power,
                    offset: *offset,
                    coeffs: coeffs.clone(),
                }
            }
        };
        Self { d: self.d, kind }
    }

    pub fn is_zero(&self) -> bool {
        match &self.kind {
            FieldKind::Constant { value } => *value == 0.0,
            FieldKind::Linear { offset, coeffs } => {
                *offset == 0.0 && coeffs.iter().all(|c| *c == 0.0)
            }
            FieldKind::GaussianBump { amplitude, .. }
            | FieldKind::PolynomialDecay { amplitude, .. }
            | FieldKind::ProductTime { amplitude, .. } => *amplitude == 0.0,
        }
    }
}

/// Space-time evaluation site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: Vec<f64>,
    pub t: f64,
}

/// Finite list of evaluation sites with quadrature weights for discrete norms.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeGrid {
    points: Vec<GridPoint>,
    weights: Vec<f64>,
}

impl SpaceTimeGrid {
    /// Sites with equal weights summing to one.
    pub fn new(points: Vec<GridPoint>) -> Result<Self> {
        let n = points.len();
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self::with_weights(points, vec![w; n])
    }

    pub fn with_weights(points: Vec<GridPoint>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::domain("one weight per grid point required"));
        }
        if let Some(d) = points.first().map(|p| p.x.len()) {
            for p in &points {
                if p.x.len() != d {
                    return Err(Error::domain("grid points have inconsistent dimension"));
                }
                if !(p.t > 0.0) || !p.t.is_finite() {
                    return Err(Error::domain(format!("grid time must be positive, got {}", p.t)));
                }
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::domain("grid weights must be non-negative"));
        }
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(Error::domain(format!("duplicate grid point {:?}", points[i])));
                }
            }
        }
        Ok(Self { points, weights })
    }

    /// Tensor grid over `[lo, hi]^d` with `per_axis` nodes per axis (endpoints
    /// included) at each time, weighted by the trapezoid rule.
    pub fn tensor_box(d: usize, lo: f64, hi: f64, per_axis: usize, times: &[f64]) -> Result<Self> {
        if d == 0 || per_axis < 2 || !(hi > lo) {
            return Err(Error::domain("tensor grid needs d >= 1, per_axis >= 2 and hi > lo"));
        }
        let h = (hi - lo) / (per_axis - 1) as f64;
        let axis: Vec<(f64, f64)> = (0..per_axis)
            .map(|i| {
                let w = if i == 0 || i == per_axis - 1 { 0.5 * h } else { h };
                (lo + i as f64 * h, w)
            })
            .collect();
        let total = per_axis.pow(d as u32);
        let mut points = Vec::with_capacity(total * times.len());
        let mut weights = Vec::with_capacity(total * times.len());
        for &t in times {
            for flat in 0..total {
                let mut rem = flat;
                let mut x = vec![0.0; d];
                let mut w = 1.0;
                for xk in x.iter_mut() {
                    let (v, wk) = axis[rem % per_axis];
                    *xk = v;
                    w *= wk;
                    rem /= per_axis;
                }
                points.push(GridPoint { x, t });
                weights.push(w);
            }
        }
        Self::with_weights(points, weights)
    }

    pub fn points(&self) -> &[GridPoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|p| p.x.len())
    }
}

/// Norm selector for [`field_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Norm {
    Lp(f64),
    Sup,
}

/// Discrete norm of a sampled vector field: per-component weighted `L_p` (or
/// sup) over the grid, then the max over components.
///
/// `values[i]` holds the components at grid point `i`.
pub fn field_norm(grid: &SpaceTimeGrid, values: &[Vec<f64>], norm: Norm) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::domain("cannot take a norm over an empty grid"));
    }
    if values.len() != grid.len() {
        return Err(Error::domain("one value vector per grid point required"));
    }
    let comps = values[0].len();
    if values.iter().any(|v| v.len() != comps) {
        return Err(Error::domain("inconsistent component count"));
    }
    let mut best: f64 = 0.0;
    for c in 0..comps {
        let v = match norm {
            Norm::Sup => values.iter().map(|u| u[c].abs()).fold(0.0, f64::max),
            Norm::Lp(p) => {
                if !(p >= 1.0) {
                    return Err(Error::domain(format!("p must be >= 1, got {p}")));
                }
                let s: f64 = values
                    .iter()
                    .zip(grid.weights())
                    .map(|(u, w)| w * u[c].abs().powf(p))
                    .sum();
                s.powf(1.0 / p)
            }
        };
        best = best.max(v);
    }
    Ok(best)
}

/// `(2πt)^{−d/2} exp(−‖x‖² / (2t))`.
pub fn heat_kernel(x: &[f64], t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::domain(format!("heat kernel needs t > 0, got {t}")));
    }
    let d = x.len() as f64;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok((2.0 * PI * t).powf(-d / 2.0) * (-r2 / (2.0 * t)).exp())
}

fn check_point(field: &TestField, x: &[f64], t: f64) -> Result<()> {
    if x.len() != field.d {
        return Err(Error::domain(format!(
            "point has dimension {}, field has {}",
            x.len(),
            field.d
        )));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("time must be positive, got {t}")));
    }
    Ok(())
}

/// Monte Carlo estimate of `E a(x + ξ√t)`, `ξ ~ N(0, I_d)`.
pub fn semigroup_mc(
    a: &TestField,
    x: &[f64],
    t: f64,
    n: u64,
    stream: &RandomStream,
) -> Result<EstimateWithError> {
    check_point(a, x, t)?;
    let sqrt_t = t.sqrt();
    let d = a.d;
    let m = sample_moments(n, stream, |s, _| {
        let y: Vec<f64> = (0..d).map(|k| x[k] + s.normal() * sqrt_t).collect();
        Ok(a.eval(&y, 0.0))
    })?;
    Ok(EstimateWithError::from_moments(&m, 1.0))
}

/// Monte Carlo estimate of the forced term
/// `E[t f(x + η√t √(1−τ), tτ)]`, `η ~ N(0, I_d)`, `τ ~ U(0,1)`.
pub fn forced_mc(
    f: &TestField,
    x: &[f64],
    t: f64,
    n: u64,
    stream: &RandomStream,
) -> Result<EstimateWithError> {
    check_point(f, x, t)?;
    let d = f.d;
    let m = sample_moments(n, stream, |s, _| {
        let tau = s.uniform();
        let scale = (t * (1.0 - tau)).sqrt();
        let mut y = vec![0.0; d];
        for k in 0..d {
            y[k] = x[k] + s.normal() * scale;
        }
        Ok(f.eval(&y, t * tau))
    })?;
    Ok(EstimateWithError::from_moments(&m, t))
}

/// Closed-form heat evolution of initial data `a` at `(x, t)`.
pub fn heat_exact(a: &TestField, x: &[f64], t: f64) -> Result<f64> {
    check_point(a, x, t)?;
    match &a.kind {
        FieldKind::Constant { value } => Ok(*value),
        FieldKind::Linear { offset, coeffs } => Ok(offset + dot(coeffs, x)),
        FieldKind::GaussianBump { amplitude, width, center } => {
            let s2 = width * width;
            let v = s2 + t;
            Ok(amplitude * (s2 / v).powf(a.d as f64 / 2.0) * (-dist2(x, center) / (2.0 * v)).exp())
        }
        other => Err(Error::Unsupported(format!(
            "no closed-form heat evolution for {}",
            kind_name(other)
        ))),
    }
}

/// Spatial gradient of [`heat_exact`].
pub fn heat_exact_grad(a: &TestField, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
    check_point(a, x, t)?;
    match &a.kind {
        FieldKind::Constant { .. } => out.fill(0.0),
        FieldKind::Linear { coeffs, .. } => out.copy_from_slice(coeffs),
        FieldKind::GaussianBump { center, width, .. } => {
            let v = heat_exact(a, x, t)?;
            let var = width * width + t;
            for k in 0..a.d {
                out[k] = -v * (x[k] - center[k]) / var;
            }
        }
        other => {
            return Err(Error::Unsupported(format!(
                "no closed-form heat evolution for {}",
                kind_name(other)
            )))
        }
    }
    Ok(())
}

/// Closed-form solution of `∂_t u = ½Δu + f`, `u(·,0) = 0`, for forcings
/// that are affine in space.
pub fn forced_exact(f: &TestField, x: &[f64], t: f64) -> Result<f64> {
    check_point(f, x, t)?;
    match &f.kind {
        FieldKind::Constant { value } => Ok(value * t),
        FieldKind::Linear { offset, coeffs } => Ok(t * (offset + dot(coeffs, x))),
        FieldKind::ProductTime { amplitude, time_power, offset, coeffs } => Ok(amplitude
            * t.powf(time_power + 1.0)
            / (time_power + 1.0)
            * (offset + dot(coeffs, x))),
        other => Err(Error::Unsupported(format!(
            "no closed-form forced solution for {}",
            kind_name(other)
        ))),
    }
}

/// Spatial gradient of [`forced_exact`].
pub fn forced_exact_grad(f: &TestField, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
    check_point(f, x, t)?;
    match &f.kind {
        FieldKind::Constant { .. } => out.fill(0.0),
        FieldKind::Linear { coeffs, .. } => {
            for k in 0..f.d {
                out[k] = t * coeffs[k];
            }
        }
        FieldKind::ProductTime { amplitude, time_power, coeffs, .. } => {
            let c = amplitude * t.powf(time_power + 1.0) / (time_power + 1.0);
            for k in 0..f.d {
                out[k] = c * coeffs[k];
            }
        }
        other => {
            return Err(Error::Unsupported(format!(
                "no closed-form forced solution for {}",
                kind_name(other)
            )))
        }
    }
    Ok(())
}

pub fn kind_name(kind: &FieldKind) -> &'static str {
    match kind {
        FieldKind::Constant { .. } => "constant",
        FieldKind::Linear { .. } => "linear",
        FieldKind::GaussianBump { .. } => "gaussian_bump",
        FieldKind::PolynomialDecay { .. } => "polynomial_decay",
        FieldKind::ProductTime { .. } => "product_time",
    }
}
