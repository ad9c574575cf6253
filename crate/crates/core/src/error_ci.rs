//! Confidence radii for the Monte Carlo error, the combined
//! truncation-plus-sampling error model and the choice of iteration depth.

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::combinatorics::d_sequence;
use crate::error::{Error, Result};
use crate::iteration::SolutionEstimate;

/// Fewest replicates accepted by the tail fit.
pub const MIN_REPLICATES: usize = 30;

/// Tail template `Q(v) = C v^{κ−1} exp(−v² / (2σ²))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailModel {
    pub c: f64,
    pub kappa: f64,
    pub sigma: f64,
}

impl TailModel {
    /// Requires `Q` to be decreasing on `v >= 3σ`, i.e. `κ < 10`.
    pub fn new(c: f64, kappa: f64, sigma: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::domain(format!("tail constant must be positive, got {c}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
        }
        if !(kappa < 10.0) {
            return Err(Error::domain(format!(
                "kappa = {kappa} makes the tail increase beyond 3 sigma"
            )));
        }
        Ok(Self { c, kappa, sigma })
    }

    fn eval(&self, v: f64) -> f64 {
        self.c * v.powf(self.kappa - 1.0) * (-v * v / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Start of the decreasing branch.
    fn mode(&self) -> f64 {
        self.sigma * (self.kappa - 1.0).max(0.0).sqrt()
    }
}

pub fn tail_probability(v: f64, model: &TailModel) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::domain(format!("tail argument must be positive, got {v}")));
    }
    Ok(model.eval(v))
}

/// Root of `Q(v) = δ` on `[lo, ∞)` where `Q` is decreasing and `Q(lo) > δ`.
fn bisect_tail(model: &TailModel, delta: f64, lo: f64) -> f64 {
    let mut a = lo;
    let mut b = lo.max(model.sigma) * 2.0;
    while model.eval(b) > delta {
        a = b;
        b *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if model.eval(mid) > delta {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= 1e-13 * b {
            break;
        }
    }
    0.5 * (a + b)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// `v(δ) >= 3σ` with `Q(v(δ)) = δ`.
pub fn solve_quantile(delta: f64, model: &TailModel) -> Result<f64> {
    check_delta(delta)?;
    let lo = 3.0 * model.sigma;
    let q = model.eval(lo);
    if q < delta {
        return Err(Error::Infeasible(format!(
            "Q(3 sigma) = {q:.3e} is already below delta = {delta}; use a smaller delta or a larger sigma"
        )));
    }
    if q == delta {
        return Ok(lo);
    }
    Ok(bisect_tail(model, delta, lo))
}

/// Root of `Q(v) = δ` on the decreasing branch without the `3σ` restriction.
/// Returns the branch start when the whole tail is below `δ`.
pub fn solve_quantile_unrestricted(delta: f64, model: &TailModel) -> Result<f64> {
    check_delta(delta)?;
    let lo = model.mode();
    if lo > 0.0 && model.eval(lo) <= delta {
        return Ok(lo);
    }
    Ok(bisect_tail(model, delta, lo))
}

pub fn confidence_radius(v_delta: f64, n: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::domain("sample count must be at least 1"));
    }
    if !(v_delta >= 0.0) {
        return Err(Error::domain("quantile must be non-negative"));
    }
    Ok(v_delta / (n as f64).sqrt())
}

/// Fit with `κ = 1`.
pub fn empirical_tail_fit(replicate_norms: &[f64]) -> Result<TailModel> {
    empirical_tail_fit_with_kappa(replicate_norms, 1.0)
}

/// `σ` is the root mean square of the norms; `C` puts `Q` at 0.1 on the
/// empirical 90th percentile.
pub fn empirical_tail_fit_with_kappa(replicate_norms: &[f64], kappa: f64) -> Result<TailModel> {
    let n = replicate_norms.len();
    if n < MIN_REPLICATES {
        return Err(Error::InsufficientData(format!(
            "tail fit needs at least {MIN_REPLICATES} replicates, got {n}"
        )));
    }
    if replicate_norms.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::domain("replicate norms must be finite and non-negative"));
    }
    let mut sorted = replicate_norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[n - 1] - sorted[0] <= 1e-14 * sorted[n - 1].abs() {
        return Err(Error::InsufficientData(
            "replicate norms have no spread; the tail fit is degenerate".into(),
        ));
    }
    let sigma = (sorted.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let q90 = quantile_sorted(&sorted, 0.9);
    let shape = TailModel { c: 1.0, kappa, sigma };
    let at = shape.eval(q90.max(f64::MIN_POSITIVE));
    TailModel::new(0.1 / at, kappa, sigma)
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `C (q^n + D(n) / √N)`.
pub fn combined_error(q: f64, n: usize, samples: u64, c: f64, d: usize) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::domain(format!("q must lie in (0, 1), got {q}")));
    }
    if samples == 0 || d == 0 || !(c > 0.0) {
        return Err(Error::domain("N, d and C must be positive"));
    }
    let dn = d_sequence(n, d as u64).to_f64().unwrap_or(f64::INFINITY);
    Ok(c * (q.powi(n as i32) + dn / (samples as f64).sqrt()))
}

/// Depth in `1..=n_max` minimizing [`combined_error`] among those with
/// `D(n) <= √N`; ties go to the smaller depth.
pub fn optimal_n(q: f64, samples: u64, c: f64, d: usize, n_max: usize) -> Result<usize> {
    if n_max == 0 {
        return Err(Error::domain("n_max must be at least 1"));
    }
    let budget = BigUint::from(samples);
    let mut best: Option<(usize, f64)> = None;
    for n in 1..=n_max {
        let dn = d_sequence(n, d as u64);
        if &dn * &dn > budget {
            // D grows with n, so no deeper iterate is feasible either
            break;
        }
        let e = combined_error(q, n, samples, c, d)?;
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((n, e));
        }
    }
    best.map(|(n, _)| n).ok_or_else(|| {
        Error::Infeasible(format!("no depth n >= 1 has D(n) <= sqrt(N) for N = {samples}, d = {d}"))
    })
}

/// Which branch produced `v(δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileRegime {
    /// Root at or beyond `3σ`.
    Tail,
    /// `δ` too large for a root beyond `3σ`; root taken on the whole decreasing branch.
    BelowThreeSigma,
    /// Every replicate error is zero; no model fitted.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub delta: f64,
    pub v_delta: f64,
    pub radius: f64,
    pub n_samples: u64,
    pub replicates: usize,
    pub model: Option<TailModel>,
    pub regime: QuantileRegime,
}

/// `√N` times the grid sup-norm of each replicate's deviation from
/// `reference`, or from the replicate mean when no reference is given.
/// Returns the norms and the common `N`.
pub fn replicate_norms(runs: &[SolutionEstimate], reference: Option<&[Vec<f64>]>) -> Result<(Vec<f64>, u64)> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InsufficientData("no replicate runs".into()))?;
    let shape: Vec<usize> = first.values.iter().map(Vec::len).collect();
    let n = first.values.iter().flatten().map(|e| e.n_samples).min().unwrap_or(0);
    for r in runs {
        if r.points != first.points || r.values.iter().map(Vec::len).collect::<Vec<_>>() != shape {
            return Err(Error::domain("replicates disagree on the grid"));
        }
        if r.values.iter().flatten().map(|e| e.n_samples).min().unwrap_or(0) != n {
            return Err(Error::domain("replicates disagree on the sample count"));
        }
    }
    if n == 0 {
        return Err(Error::domain("replicates carry no samples"));
    }
    let mean: Vec<Vec<f64>>;
    let reference = match reference {
        Some(r) => {
            if r.iter().map(Vec::len).collect::<Vec<_>>() != shape {
                return Err(Error::domain("reference does not match the grid"));
            }
            r
        }
        None => {
            let k = runs.len() as f64;
            mean = first
                .values
                .iter()
                .enumerate()
                .map(|(p, v)| {
                    (0..v.len())
                        .map(|i| runs.iter().map(|r| r.values[p][i].value).sum::<f64>() / k)
                        .collect()
                })
                .collect();
            &mean
        }
    };
    let scale = (n as f64).sqrt();
    let norms = runs
        .iter()
        .map(|r| {
            r.values
                .iter()
                .zip(reference)
                .flat_map(|(v, w)| v.iter().zip(w).map(|(e, x)| (e.value - x).abs()))
                .fold(0.0f64, f64::max)
                * scale
        })
        .collect();
    Ok((norms, n))
}

/// Confidence radius for a run from independent replicates of it.
pub fn ci_for_run(runs: &[SolutionEstimate], reference: Option<&[Vec<f64>]>, delta: f64) -> Result<ConfidenceReport> {
    check_delta(delta)?;
    if runs.len() < MIN_REPLICATES {
        return Err(Error::InsufficientData(format!(
            "confidence radius needs at least {MIN_REPLICATES} replicates, got {}",
            runs.len()
        )));
    }
    let (norms, n) = replicate_norms(runs, reference)?;
    if norms.iter().all(|v| *v == 0.0) {
        return Ok(ConfidenceReport {
            delta,
            v_delta: 0.0,
            radius: 0.0,
            n_samples: n,
            replicates: runs.len(),
            model: None,
            regime: QuantileRegime::Degenerate,
        });
    }
    let model = empirical_tail_fit(&norms)?;
    let (v_delta, regime) = match solve_quantile(delta, &model) {
        Ok(v) => (v, QuantileRegime::Tail),
        Err(Error::Infeasible(_)) => (solve_quantile_unrestricted(delta, &model)?, QuantileRegime::BelowThreeSigma),
        Err(e) => return Err(e),
    };
    Ok(ConfidenceReport {
        delta,
        v_delta,
        radius: confidence_radius(v_delta, n)?,
        n_samples: n,
        replicates: runs.len(),
        model: Some(model),
        regime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::RandomStream;
    use proptest::prelude::*;

    fn unit() -> TailModel {
        TailModel::new(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn tail_values() {
        assert!((tail_probability(3.0, &unit()).unwrap() - (-4.5f64).exp()).abs() < 1e-16);
        assert!(tail_probability(40.0, &unit()).unwrap() < 1e-300);
        assert!(tail_probability(0.0, &unit()).is_err());
        assert!(TailModel::new(1.0, 12.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_quantile() {
        let v = solve_quantile(0.01, &unit()).unwrap();
        let closed = (-2.0 * 0.01f64.ln()).sqrt();
        assert!((v - closed).abs() < 1e-11 * closed);
        assert!((v - 3.03485).abs() < 1e-5);
        let delta = tail_probability(4.0, &unit()).unwrap();
        assert!((solve_quantile(delta, &unit()).unwrap() - 4.0).abs() < 1e-11);
        assert!(solve_quantile(0.05, &unit()).is_err());
        assert!(solve_quantile(0.001, &unit()).unwrap() > v);
    }

    #[test]
    fn radius() {
        assert_eq!(confidence_radius(3.0, 9).unwrap(), 1.0);
        assert_eq!(confidence_radius(2.0, 400).unwrap() * 2.0, confidence_radius(2.0, 100).unwrap());
        assert_eq!(confidence_radius(0.0, 5).unwrap(), 0.0);
        assert!(confidence_radius(1.0, 0).is_err());
    }

    #[test]
    fn fit_recovers_scale() {
        let mut s = RandomStream::new(12);
        let norms: Vec<f64> = (0..200).map(|_| 2.0 * s.normal().abs()).collect();
        let m = empirical_tail_fit(&norms).unwrap();
        assert!((1.6..=2.4).contains(&m.sigma), "{}", m.sigma);
        let doubled: Vec<f64> = norms.iter().map(|v| 2.0 * v).collect();
        let m2 = empirical_tail_fit(&doubled).unwrap();
        assert!((m2.sigma - 2.0 * m.sigma).abs() < 1e-12 * m.sigma);
        assert!((m2.c - m.c).abs() < 1e-9 * m.c);
        assert!(matches!(empirical_tail_fit(&[1.5; 50]), Err(Error::InsufficientData(_))));
        assert!(matches!(empirical_tail_fit(&norms[..29]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn combined_error_values() {
        assert!((combined_error(0.5, 2, 1_000_000, 1.0, 3).unwrap() - 1.151).abs() < 1e-12);
        let far = combined_error(0.5, 2, u64::MAX, 1.0, 3).unwrap();
        assert!((far - 0.25).abs() < 1e-6);
        let small_q = combined_error(1e-12, 2, 1_000_000, 2.0, 3).unwrap();
        assert!((small_q - 2.0 * 0.901).abs() < 1e-9);
        assert!(combined_error(0.5, 9, 100, 1.0, 3).unwrap().is_infinite());
    }

    #[test]
    fn depth_choice() {
        assert_eq!(optimal_n(0.5, 1_000_000, 1.0, 3, 8).unwrap(), 1);
        assert!(matches!(optimal_n(0.5, 99, 1.0, 3, 8), Err(Error::Infeasible(_))));
        assert_eq!(optimal_n(0.5, 100, 1.0, 3, 8).unwrap(), 1);
    }

    proptest! {
        #[test]
        fn quantile_round_trip(ratio in 3.0f64..8.0, sigma in 0.1f64..10.0, c in 0.5f64..50.0, kappa in -2.0f64..4.0) {
            let m = TailModel::new(c, kappa, sigma).unwrap();
            let v = ratio * sigma;
            let delta = tail_probability(v, &m).unwrap();
            prop_assume!(delta > 0.0 && delta < 1.0 && m.eval(3.0 * sigma) >= delta);
            let back = solve_quantile(delta, &m).unwrap();
            prop_assert!((back - v).abs() <= 1e-10 * v);
        }

        #[test]
        fn depth_is_exhaustive_argmin(q in 0.01f64..0.99, log_n in 2.0f64..16.0, c in 0.1f64..10.0, d in 1usize..5) {
            let samples = 10f64.powf(log_n) as u64;
            let mut best: Option<(usize, f64)> = None;
            for n in 1..=6 {
                let dn = d_sequence(n, d as u64);
                if &dn * &dn <= BigUint::from(samples) {
                    let e = combined_error(q, n, samples, c, d).unwrap();
                    if best.is_none_or(|(_, b)| e < b) {
                        best = Some((n, e));
                    }
                }
            }
            match best {
                Some((n, _)) => prop_assert_eq!(optimal_n(q, samples, c, d, 6).unwrap(), n),
                None => prop_assert!(optimal_n(q, samples, c, d, 6).is_err()),
            }
        }

        #[test]
        fn more_budget_never_hurts(q in 0.01f64..0.99, n in 1usize..4, log_n in 2.0f64..12.0) {
            let small = 10f64.powf(log_n) as u64;
            let a = combined_error(q, n, small, 1.0, 3).unwrap();
            let b = combined_error(q, n, small * 2, 1.0, 3).unwrap();
            prop_assert!(b < a);
            if let (Ok(n1), Ok(n2)) = (optimal_n(q, small, 1.0, 3, 6), optimal_n(q, small * 2, 1.0, 3, 6)) {
                prop_assert!(n2 >= n1);
            }
        }
    }
}
