//! Distribution of a sample budget over the degree groups of the expansion.
//!
//! Group `k` holds `A(k, n)` terms, each estimated with `N(k)` samples that
//! cost `d (k + 1)` variates apiece. The objective is
//! `Z = Σ_k c_k / N(k)` with `c_k = W(k)² A(k, n) B^{2k}`, optionally times
//! `max(t^k, t^{2k})`, under `Σ_k a_k N(k) <= N`, `a_k = A(k, n) d (k + 1)`.

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::combinatorics::CoefficientTable;
use crate::error::{Error, Result};
use crate::sampling::unit_ball_volume;

/// `N(k)` for `k = 1..=2^n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub n: usize,
    /// `counts[k - 1] = N(k)`.
    pub counts: Vec<u64>,
}

impl Allocation {
    pub fn new(n: usize, counts: Vec<u64>) -> Result<Self> {
        let groups = group_count(n)?;
        if counts.len() != groups {
            return Err(Error::domain(format!(
                "allocation for n = {n} needs {groups} group counts, got {}",
                counts.len()
            )));
        }
        if let Some(k) = counts.iter().position(|c| *c == 0) {
            return Err(Error::Infeasible(format!("N({}) = 0; every group needs at least one sample", k + 1)));
        }
        Ok(Self { n, counts })
    }

    pub fn uniform(n: usize, count: u64) -> Result<Self> {
        Self::new(n, vec![count; group_count(n)?])
    }

    /// `N(k)`, 1-based.
    pub fn get(&self, k: usize) -> u64 {
        self.counts[k - 1]
    }

    pub fn groups(&self) -> usize {
        self.counts.len()
    }

    /// Every count multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            n: self.n,
            counts: self.counts.iter().map(|c| c * factor).collect(),
        }
    }
}

/// Number of degree groups, `2^n`.
pub fn group_count(n: usize) -> Result<usize> {
    if n >= 20 {
        return Err(Error::ResourceLimit(format!("2^{n} degree groups is beyond reach")));
    }
    Ok(1 << n)
}

/// Inputs of the allocation problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveParams {
    pub n: usize,
    pub d: usize,
    /// Triple-norm value of `u_0`.
    pub b: f64,
    pub t: f64,
    pub budget: u64,
    /// Weight each group by `max(t^k, t^{2k})`.
    #[serde(default)]
    pub with_t: bool,
}

impl ObjectiveParams {
    fn validate(&self) -> Result<()> {
        if !(self.b >= 0.0) || !self.b.is_finite() {
            return Err(Error::domain(format!("B must be finite and non-negative, got {}", self.b)));
        }
        if !(self.t > 0.0) {
            return Err(Error::domain(format!("t must be positive, got {}", self.t)));
        }
        if self.d == 0 {
            return Err(Error::domain("d must be positive"));
        }
        group_count(self.n)?;
        Ok(())
    }
}

/// Per-group constants `(A(k,n), c_k, a_k)` as floats.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCoefficients {
    pub multiplicity: Vec<f64>,
    pub weight: Vec<f64>,
    pub cost: Vec<f64>,
}

fn coefficients_exact(n: usize) -> Vec<BigUint> {
    let p = CoefficientTable::new().poly(n);
    (1..=(1usize << n)).map(|k| p.coeff(k)).collect()
}

pub fn group_coefficients(p: &ObjectiveParams) -> Result<GroupCoefficients> {
    p.validate()?;
    let a = coefficients_exact(p.n);
    let mut multiplicity = Vec::with_capacity(a.len());
    let mut weight = Vec::with_capacity(a.len());
    let mut cost = Vec::with_capacity(a.len());
    for (idx, akn) in a.iter().enumerate() {
        let k = idx + 1;
        let af = akn.to_f64().unwrap_or(f64::INFINITY);
        let w = unit_ball_volume(k);
        let mut c = w * w * af * p.b.powi(2 * k as i32);
        if p.with_t {
            c *= p.t.powi(k as i32).max(p.t.powi(2 * k as i32));
        }
        multiplicity.push(af);
        weight.push(c);
        cost.push(af * (p.d * (k + 1)) as f64);
    }
    Ok(GroupCoefficients { multiplicity, weight, cost })
}

/// `Σ_k A(k, n) N(k) d (k + 1)`, exactly.
pub fn budget_total(alloc: &Allocation, n: usize, d: usize) -> Result<BigUint> {
    if alloc.n != n || alloc.groups() != group_count(n)? {
        return Err(Error::domain(format!(
            "allocation is for n = {}, requested n = {n}",
            alloc.n
        )));
    }
    if alloc.counts.iter().any(|c| *c == 0) {
        return Err(Error::Infeasible("zero group count".into()));
    }
    let a = coefficients_exact(n);
    Ok(a.iter()
        .zip(&alloc.counts)
        .enumerate()
        .map(|(idx, (akn, nk))| akn * BigUint::from(*nk) * BigUint::from((d * (idx + 2)) as u64))
        .sum())
}

/// Budget constraint value; same as [`budget_total`].
#[allow(non_snake_case)]
pub fn constraint_Y(alloc: &Allocation, p: &ObjectiveParams) -> Result<BigUint> {
    budget_total(alloc, p.n, p.d)
}

/// `Σ_k c_k / N(k)`.
#[allow(non_snake_case)]
pub fn objective_Z(alloc: &Allocation, p: &ObjectiveParams) -> Result<f64> {
    let g = group_coefficients(p)?;
    if alloc.groups() != g.weight.len() {
        return Err(Error::domain("allocation does not match the group count"));
    }
    Ok(g.weight
        .iter()
        .zip(&alloc.counts)
        .map(|(c, nk)| c / *nk as f64)
        .sum())
}

/// Smallest budget that admits `N(k) = 1` everywhere.
pub fn minimal_budget(n: usize, d: usize) -> Result<u64> {
    let total = budget_total(&Allocation::uniform(n, 1)?, n, d)?;
    total
        .to_u64()
        .ok_or_else(|| Error::Overflow("minimal budget exceeds 64 bits".into()))
}

fn check_feasible(p: &ObjectiveParams) -> Result<()> {
    let min = minimal_budget(p.n, p.d)?;
    if p.budget < min {
        return Err(Error::Infeasible(format!(
            "budget {} is below the minimal feasible budget {min} for n = {}, d = {}",
            p.budget, p.n, p.d
        )));
    }
    Ok(())
}

/// Continuous minimizer of `Z` on `Σ a_k N_k = N`, `N_k >= 1`.
///
/// Unconstrained it is `N_k = λ √(c_k / a_k)`; groups whose value falls
/// below one are pinned to one and the rest re-solved on the remaining budget.
pub fn continuous_optimum(p: &ObjectiveParams) -> Result<Vec<f64>> {
    check_feasible(p)?;
    let g = group_coefficients(p)?;
    let m = g.weight.len();
    let mut pinned = vec![false; m];
    loop {
        let fixed: f64 = (0..m).filter(|&k| pinned[k]).map(|k| g.cost[k]).sum();
        let free_budget = p.budget as f64 - fixed;
        let denom: f64 = (0..m)
            .filter(|&k| !pinned[k])
            .map(|k| (g.weight[k] * g.cost[k]).sqrt())
            .sum();
        let mut out = vec![1.0; m];
        if denom > 0.0 {
            let lambda = free_budget / denom;
            for k in (0..m).filter(|&k| !pinned[k]) {
                out[k] = lambda * (g.weight[k] / g.cost[k]).sqrt();
            }
        } else {
            // every free group has zero weight: spread nothing, keep the floor
            let free: Vec<usize> = (0..m).filter(|&k| !pinned[k]).collect();
            if let Some(&k) = free.first() {
                let others: f64 = free[1..].iter().map(|&j| g.cost[j]).sum();
                out[k] = (free_budget - others) / g.cost[k];
            }
            return Ok(out);
        }
        let newly: Vec<usize> = (0..m).filter(|&k| !pinned[k] && out[k] < 1.0).collect();
        if newly.is_empty() {
            return Ok(out);
        }
        for k in newly {
            pinned[k] = true;
        }
    }
}

/// Integer optimum: floor of the continuous solution, then the leftover
/// budget is spent one sample at a time on the group with the largest
/// objective decrease per unit cost (ties to smaller `k`).
pub fn allocate_exact(p: &ObjectiveParams) -> Result<Allocation> {
    let cont = continuous_optimum(p)?;
    let g = group_coefficients(p)?;
    let mut counts: Vec<u64> = cont.iter().map(|v| (v.floor() as u64).max(1)).collect();
    let a: Vec<u64> = (0..counts.len())
        .map(|k| (g.cost[k].round()) as u64)
        .collect();
    let mut spend: u64 = counts.iter().zip(&a).map(|(n, c)| n * c).sum();
    if g.weight.iter().all(|c| *c == 0.0) {
        counts[0] += (p.budget - spend) / a[0];
        return Allocation::new(p.n, counts);
    }
    loop {
        let left = p.budget - spend;
        let mut best: Option<(usize, f64)> = None;
        for k in 0..counts.len() {
            if a[k] > left {
                continue;
            }
            let nk = counts[k] as f64;
            let gain = g.weight[k] * (1.0 / nk - 1.0 / (nk + 1.0)) / a[k] as f64;
            if best.is_none_or(|(_, b)| gain > b) {
                best = Some((k, gain));
            }
        }
        match best {
            Some((k, _)) => {
                counts[k] += 1;
                spend += a[k];
            }
            None => break,
        }
    }
    Allocation::new(p.n, counts)
}

/// The displayed closed form `N d^{-3/2} W(k) B^k / Σ_r W(r) B^r`, unrounded.
pub fn paper_formula_counts(p: &ObjectiveParams) -> Result<Vec<f64>> {
    p.validate()?;
    let m = group_count(p.n)?;
    let w: Vec<f64> = (1..=m).map(|k| unit_ball_volume(k) * p.b.powi(k as i32)).collect();
    let total: f64 = w.iter().sum();
    let scale = p.budget as f64 * (p.d as f64).powf(-1.5);
    Ok(w.iter()
        .enumerate()
        .map(|(k, wk)| {
            if total > 0.0 {
                scale * wk / total
            } else if k == 0 {
                scale
            } else {
                0.0
            }
        })
        .collect())
}

/// Allocation with the closed-form proportions `W(k) B^k`, rescaled so the
/// spend fits the budget, rounded to nearest with a floor of one.
pub fn allocate_paper(p: &ObjectiveParams) -> Result<Allocation> {
    check_feasible(p)?;
    let g = group_coefficients(p)?;
    let shape = paper_formula_counts(p)?;
    let spend_shape: f64 = shape.iter().zip(&g.cost).map(|(s, c)| s * c).sum();
    let lambda = if spend_shape > 0.0 { p.budget as f64 / spend_shape } else { 0.0 };
    let mut counts: Vec<u64> = shape
        .iter()
        .map(|s| ((s * lambda).round() as u64).max(1))
        .collect();
    let a: Vec<u64> = g.cost.iter().map(|c| c.round() as u64).collect();
    let mut spend: u64 = counts.iter().zip(&a).map(|(n, c)| n * c).sum();
    while spend > p.budget {
        let k = (0..counts.len())
            .filter(|&k| counts[k] > 1)
            .max_by_key(|&k| counts[k] * a[k])
            .expect("minimal budget admits all-ones");
        counts[k] -= 1;
        spend -= a[k];
    }
    Allocation::new(p.n, counts)
}

/// Equal `N(k)` for every group, as large as the budget allows.
pub fn allocate_uniform(p: &ObjectiveParams) -> Result<Allocation> {
    check_feasible(p)?;
    let per = p.budget / minimal_budget(p.n, p.d)?;
    Allocation::uniform(p.n, per)
}

/// Objective at the optimum next to the closed-form estimates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MinVarianceReport {
    /// `Z` of [`allocate_exact`].
    pub z_exact: f64,
    /// `(Σ_k √(c_k a_k))² / N`, the continuous optimum without the `N_k >= 1`
    /// floor.
    pub z_continuous: f64,
    /// `d^{3/2}/N · Σ_m W(m) A(m,n) B^m · Σ_r √(r+1) W(r) A(r,n) B^r`.
    pub product_form: f64,
}

pub fn min_variance_report(p: &ObjectiveParams) -> Result<MinVarianceReport> {
    let g = group_coefficients(p)?;
    let alloc = allocate_exact(p)?;
    let z_exact = objective_Z(&alloc, p)?;
    let s: f64 = g.weight.iter().zip(&g.cost).map(|(c, a)| (c * a).sqrt()).sum();
    let nb = p.budget as f64;
    let mut first = 0.0;
    let mut second = 0.0;
    for (idx, akn) in g.multiplicity.iter().enumerate() {
        let k = idx + 1;
        let term = unit_ball_volume(k) * akn * p.b.powi(k as i32);
        first += term;
        second += ((k + 1) as f64).sqrt() * term;
    }
    Ok(MinVarianceReport {
        z_exact,
        z_continuous: s * s / nb,
        product_form: (p.d as f64).powf(1.5) / nb * first * second,
    })
}
