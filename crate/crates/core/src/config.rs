//! Run configuration: one TOML document describing the problem, the grid, the
//! budget and the evaluation mode.
//!
//! ```toml
//! seed = 7
//! d = 3
//! n = 1
//!
//! [grid]
//! kind = "points"
//! points = [{ x = [0.0, 0.0, 0.0], t = 0.5 }]
//!
//! [[initial]]
//! kind = "gaussian_bump"
//! amplitude = 1.0
//! width = 1.0
//! center = [0.0, 0.0, 0.0]
//! # ... one table per component
//!
//! [budget]
//! method = "exact"
//! total = 100000
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::{allocate_exact, allocate_paper, allocate_uniform, Allocation, ObjectiveParams};
use crate::error::{Error, Result};
use crate::heat::{FieldKind, GridPoint, SpaceTimeGrid, TestField};
use crate::iteration::{u0_triple_norm, EvalOptions, Problem, U0Mode};
use crate::riesz::{BilinearMode, RieszParams};
use crate::stream::RandomStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub d: usize,
    /// Iteration depth.
    #[serde(default)]
    pub n: usize,
    /// Samples per grid point and component for the linear solver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub grid: GridConfig,
    /// One field per component of `a`.
    pub initial: Vec<FieldKind>,
    /// One field per component of `f`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<Vec<FieldKind>>,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riesz: Option<RieszParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nested: Option<NestedConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridConfig {
    Points { points: Vec<GridPoint> },
    /// Tensor grid over `[lo, hi]^d` at each listed time.
    Box { lo: f64, hi: f64, per_axis: usize, times: Vec<f64> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMethod {
    #[default]
    Exact,
    Paper,
    Uniform,
    /// Use `counts` verbatim.
    Explicit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default)]
    pub method: AllocationMethod,
    /// Total random variables for the solver methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<u64>,
    /// `N(1), …, N(2^n)` for the explicit method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
    /// Triple-norm value; estimated from the closed-form `u_0` on the grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default)]
    pub with_t: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    #[serde(default = "default_bilinear")]
    pub bilinear: BilinearMode,
    #[serde(default = "default_u0")]
    pub u0: U0Mode,
}

fn default_bilinear() -> BilinearMode {
    BilinearMode::ConvectiveOnly
}

fn default_u0() -> U0Mode {
    U0Mode::Exact
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self { bilinear: default_bilinear(), u0: default_u0() }
    }
}

/// Level sample counts `N(0), …, N(L)` of the nested scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestedConfig {
    pub counts: Vec<u64>,
}

/// Line of the first assignment to the last segment of `key` at or after
/// its section header, if any.
fn locate(source: &str, key: &str) -> Option<usize> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop()?;
    let leaf = leaf.split('[').next()?;
    let start = parts.first().and_then(|section| {
        let section = section.split('[').next().unwrap_or(section);
        source.lines().position(|l| {
            let l = l.trim();
            l == format!("[{section}]") || l == format!("[[{section}]]")
        })
    });
    source
        .lines()
        .enumerate()
        .skip(start.unwrap_or(0))
        .find(|(_, l)| assigns(l, leaf))
        .map(|(i, _)| i + 1)
}

/// Whether `line` contains `leaf = …` as a bare or inline-table key.
fn assigns(line: &str, leaf: &str) -> bool {
    line.match_indices(leaf).any(|(at, _)| {
        let before = line[..at].chars().next_back();
        let boundary = before.is_none_or(|c| c.is_whitespace() || c == '{' || c == ',');
        boundary && line[at + leaf.len()..].trim_start().starts_with('=')
    })
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

impl RunConfig {
    /// Parse and validate. Errors name the offending key and, when it can be
    /// found, its line.
    pub fn parse(source: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| line_of(source, s.start));
            let message = match line {
                Some(l) => format!("line {l}: {}", e.message()),
                None => e.message().to_string(),
            };
            Error::Config { key: "<document>".into(), message }
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config { key, message } => {
                let message = match locate(source, &key) {
                    Some(l) => format!("line {l}: {message}"),
                    None => message,
                };
                Error::Config { key, message }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 {
            return Err(Error::config("d", "dimension must be positive"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "seed must fit in a signed 64-bit integer"));
        }
        if self.samples == Some(0) {
            return Err(Error::config("samples", "sample count must be positive"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "thread count must be positive"));
        }
        match &self.grid {
            GridConfig::Points { points } => {
                if points.is_empty() {
                    return Err(Error::config("grid.points", "at least one point required"));
                }
                for (i, p) in points.iter().enumerate() {
                    if p.x.len() != d {
                        return Err(Error::config(format!("grid.points[{i}].x"), format!("expected {d} coordinates")));
                    }
                    if !(p.t > 0.0 && p.t.is_finite()) {
                        return Err(Error::config(format!("grid.points[{i}].t"), format!("time must be positive, got {}", p.t)));
                    }
                }
            }
            GridConfig::Box { lo, hi, per_axis, times } => {
                if !(hi > lo) {
                    return Err(Error::config("grid.hi", "upper corner must exceed lower corner"));
                }
                if *per_axis < 2 {
                    return Err(Error::config("grid.per_axis", "at least two nodes per axis"));
                }
                if times.is_empty() {
                    return Err(Error::config("grid.times", "at least one time required"));
                }
                for (i, t) in times.iter().enumerate() {
                    if !(*t > 0.0 && t.is_finite()) {
                        return Err(Error::config(format!("grid.times[{i}]"), format!("time must be positive, got {t}")));
                    }
                }
            }
        }
        self.grid_inner().map_err(|e| Error::config("grid", e.to_string()))?;
        if self.initial.len() != d {
            return Err(Error::config("initial", format!("expected {d} components, got {}", self.initial.len())));
        }
        for (i, k) in self.initial.iter().enumerate() {
            TestField::new(d, k.clone()).map_err(|e| Error::config(format!("initial[{i}]"), e.to_string()))?;
        }
        if let Some(f) = &self.forcing {
            if f.len() != d {
                return Err(Error::config("forcing", format!("expected {d} components, got {}", f.len())));
            }
            for (i, k) in f.iter().enumerate() {
                TestField::new(d, k.clone()).map_err(|e| Error::config(format!("forcing[{i}]"), e.to_string()))?;
            }
        }
        let b = &self.budget;
        match b.method {
            AllocationMethod::Explicit => {
                let counts = b
                    .counts
                    .as_ref()
                    .ok_or_else(|| Error::config("budget.counts", "explicit allocation needs counts"))?;
                let groups = 1usize
                    .checked_shl(self.n as u32)
                    .ok_or_else(|| Error::config("n", "iteration depth too large"))?;
                if counts.len() != groups {
                    return Err(Error::config("budget.counts", format!("expected {groups} counts for n = {}", self.n)));
                }
                if counts.iter().any(|c| *c == 0) {
                    return Err(Error::config("budget.counts", "every count must be at least 1"));
                }
            }
            _ => {
                if b.total == Some(0) {
                    return Err(Error::config("budget.total", "budget must be positive"));
                }
            }
        }
        if let Some(bv) = b.b {
            if !(bv > 0.0 && bv.is_finite()) {
                return Err(Error::config("budget.b", "triple-norm value must be positive"));
            }
        }
        if let U0Mode::MonteCarlo { n0 } = self.mode.u0 {
            if n0 == 0 {
                return Err(Error::config("mode.u0.n0", "leaf sample count must be positive"));
            }
        }
        if let Some(r) = &self.riesz {
            if !(r.eps > 0.0 && r.r_max > r.eps) {
                return Err(Error::config("riesz.eps", "need 0 < eps < r_max"));
            }
            if !(r.fd_step > 0.0) {
                return Err(Error::config("riesz.fd_step", "step must be positive"));
            }
        }
        if self.mode.bilinear == BilinearMode::Full {
            if self.riesz.is_none() {
                return Err(Error::config("riesz", "full bilinear mode needs a [riesz] section"));
            }
            if self.mode.u0 != U0Mode::Exact {
                return Err(Error::config("mode.u0", "full bilinear mode needs closed-form u0 leaves"));
            }
        }
        if let Some(nc) = &self.nested {
            if nc.counts.is_empty() || nc.counts.iter().any(|c| *c == 0) {
                return Err(Error::config("nested.counts", "need N(0..L), each at least 1"));
            }
        }
        Ok(())
    }

    fn grid_inner(&self) -> Result<SpaceTimeGrid> {
        match &self.grid {
            GridConfig::Points { points } => SpaceTimeGrid::new(points.clone()),
            GridConfig::Box { lo, hi, per_axis, times } => SpaceTimeGrid::tensor_box(self.d, *lo, *hi, *per_axis, times),
        }
    }

    pub fn grid(&self) -> Result<SpaceTimeGrid> {
        self.grid_inner()
    }

    pub fn problem(&self) -> Result<Problem> {
        let fields = |v: &[FieldKind]| v.iter().map(|k| TestField::new(self.d, k.clone())).collect::<Result<Vec<_>>>();
        let forcing = self.forcing.as_deref().map(fields).transpose()?;
        Problem::new(fields(&self.initial)?, forcing)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            u0: self.mode.u0,
            bilinear: self.mode.bilinear,
            riesz: self.riesz,
        }
    }

    pub fn stream(&self) -> RandomStream {
        RandomStream::new(self.seed)
    }

    /// Latest grid time.
    pub fn horizon(&self) -> f64 {
        match &self.grid {
            GridConfig::Points { points } => points.iter().map(|p| p.t).fold(0.0, f64::max),
            GridConfig::Box { times, .. } => times.iter().copied().fold(0.0, f64::max),
        }
    }

    /// The configured `B`, or the grid estimate for the closed-form `u_0`.
    pub fn triple_norm(&self) -> Result<f64> {
        if let Some(b) = self.budget.b {
            return Ok(b);
        }
        u0_triple_norm(&self.problem()?, &self.grid()?).map_err(|e| {
            Error::config("budget.b", format!("no closed form to estimate B from ({e}); set budget.b"))
        })
    }

    pub fn objective(&self) -> Result<ObjectiveParams> {
        Ok(ObjectiveParams {
            n: self.n,
            d: self.d,
            b: self.triple_norm()?,
            t: self.horizon(),
            budget: self.budget.total.ok_or_else(|| {
                Error::config("budget.total", "solver methods need a total budget")
            })?,
            with_t: self.budget.with_t,
        })
    }

    pub fn allocation(&self) -> Result<Allocation> {
        match self.budget.method {
            AllocationMethod::Explicit => {
                Allocation::new(self.n, self.budget.counts.clone().unwrap_or_default())
            }
            AllocationMethod::Exact => allocate_exact(&self.objective()?),
            AllocationMethod::Paper => allocate_paper(&self.objective()?),
            AllocationMethod::Uniform => allocate_uniform(&self.objective()?),
        }
    }

    /// Run `f` on a pool with the configured thread count.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        match self.threads {
            None => Ok(f()),
            Some(k) => rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map(|pool| pool.install(f))
                .map_err(|e| Error::config("threads", e.to_string())),
        }
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
d = 1

[grid]
kind = "points"
points = [{ x = [0.0], t = 0.5 }]

[[initial]]
kind = "gaussian_bump"
amplitude = 1.0
width = 1.0
center = [0.0]
"#;

    #[test]
    fn minimal_config() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.n, 0);
        assert_eq!(c.mode, ModeConfig::default());
        assert_eq!(c.problem().unwrap().d, 1);
    }

    #[test]
    fn negative_time_rejected() {
        let bad = MINIMAL.replace("t = 0.5", "t = -0.5");
        match RunConfig::parse(&bad) {
            Err(Error::Config { key, message }) => {
                assert_eq!(key, "grid.points[0].t");
                assert!(message.starts_with("line 7"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replace("seed = 7", "seed = 7\nsead = 8");
        let err = RunConfig::parse(&bad).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let bad = MINIMAL.replace("width = 1.0", "width = 1.0\nwidht = 2.0");
        assert!(RunConfig::parse(&bad).is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.n = 1;
        c.budget = BudgetConfig { method: AllocationMethod::Explicit, counts: Some(vec![5, 6]), ..Default::default() };
        c.mode.u0 = U0Mode::MonteCarlo { n0: 3 };
        c.forcing = Some(vec![FieldKind::Constant { value: 0.5 }]);
        c.nested = Some(NestedConfig { counts: vec![2, 3] });
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn full_mode_needs_riesz() {
        let bad = format!("{MINIMAL}\n[mode]\nbilinear = \"full\"\n");
        assert!(matches!(RunConfig::parse(&bad), Err(Error::Config { key, .. }) if key == "riesz"));
    }
}
