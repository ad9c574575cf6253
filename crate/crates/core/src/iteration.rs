//! Picard iteration `u_{n+1} = u_0 + w⊙(u_n·∂u_n)` expanded into operator
//! terms, and Monte Carlo evaluation of the expansion.
//!
//! A term is a tree over `u_0`, `∂u_0`, products `a·∂b` (the convective
//! contraction `Σ_j a_j ∂_j b_i`) and heat convolutions `w⊙c` or their
//! spatial gradients `∂(w⊙c)`. Each sample of a term follows one chain of
//! convolutions (the spine) drawn jointly from the mixed chain law; the other
//! factor of each product on the spine is estimated by an independent
//! single-sample recursion at the spine point. Component and derivative
//! indices are contracted inside each sample.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{budget_total, Allocation};
use crate::combinatorics::{d_sequence, CoefficientTable};
use crate::config::RunConfig;
use crate::convolution::{kernel_weight, sample_path, StepKind, TermKernelSpec};
use crate::error::{Error, Result};
use crate::heat::{
    forced_exact, forced_exact_grad, forced_mc, heat_exact, heat_exact_grad, semigroup_mc,
    GridPoint, SpaceTimeGrid, TestField,
};
use crate::riesz::{pressure_gradient_sample, Annulus, BilinearMode, RieszParams, VectorField};
use crate::sampling::unit_ball_volume;
use crate::stats::{sample_moments_vec, EstimateWithError};
use crate::stream::RandomStream;

/// Default refusal threshold on the scalar summand count `D(n)`.
pub const DEFAULT_TERM_CAP: u64 = 10_000_000;

/// Operator term of the expansion.
#[derive(Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TermTree {
    U0,
    /// Jacobian of `u_0`.
    DU0,
    /// `(left · ∇) right`: `left` is value-type, `right` gradient-type.
    Product(Arc<TermTree>, Arc<TermTree>),
    ConvPlain(Arc<TermTree>),
    ConvGrad(Arc<TermTree>),
}

impl TermTree {
    /// Number of `u_0` and `∂u_0` leaves.
    pub fn degree(&self) -> usize {
        match self {
            TermTree::U0 | TermTree::DU0 => 1,
            TermTree::Product(a, b) => a.degree() + b.degree(),
            TermTree::ConvPlain(c) | TermTree::ConvGrad(c) => c.degree(),
        }
    }

    /// Whether the node stands for a Jacobian rather than a vector.
    pub fn is_gradient(&self) -> bool {
        matches!(self, TermTree::DU0 | TermTree::ConvGrad(_))
    }

    /// Spatial Jacobian of a vector-valued term.
    pub fn gradient(self: &Arc<Self>) -> Result<Arc<TermTree>> {
        match &**self {
            TermTree::U0 => Ok(Arc::new(TermTree::DU0)),
            TermTree::ConvPlain(c) => Ok(Arc::new(TermTree::ConvGrad(c.clone()))),
            other => Err(Error::domain(format!("no gradient rule for {other}"))),
        }
    }

    /// Structural validity: products pair a vector with a Jacobian and every
    /// convolution wraps a product.
    pub fn is_well_formed(&self) -> bool {
        match self {
            TermTree::U0 | TermTree::DU0 => true,
            TermTree::Product(a, b) => {
                !a.is_gradient()
                    && !matches!(**a, TermTree::Product(..))
                    && b.is_gradient()
                    && a.is_well_formed()
                    && b.is_well_formed()
            }
            TermTree::ConvPlain(c) | TermTree::ConvGrad(c) => {
                matches!(**c, TermTree::Product(..)) && c.is_well_formed()
            }
        }
    }

    /// Scalar summands represented by the term: each product contributes the
    /// `d²` (component, derivative) pairs of the contraction.
    pub fn scalar_count(&self, d: u64) -> BigUint {
        match self {
            TermTree::U0 | TermTree::DU0 => BigUint::one(),
            TermTree::Product(a, b) => BigUint::from(d * d) * a.scalar_count(d) * b.scalar_count(d),
            TermTree::ConvPlain(c) | TermTree::ConvGrad(c) => c.scalar_count(d),
        }
    }
}

impl fmt::Display for TermTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TermTree::U0 => write!(f, "u0"),
            TermTree::DU0 => write!(f, "du0"),
            TermTree::Product(a, b) => write!(f, "{a}.{b}"),
            TermTree::ConvPlain(c) => write!(f, "w[{c}]"),
            TermTree::ConvGrad(c) => write!(f, "dw[{c}]"),
        }
    }
}

/// `(plain convolutions, gradient convolutions, degree)`; the two counts sum
/// to `degree − 1`.
pub fn term_signature(term: &TermTree) -> (usize, usize, usize) {
    fn walk(t: &TermTree, acc: &mut (usize, usize)) {
        match t {
            TermTree::U0 | TermTree::DU0 => {}
            TermTree::Product(a, b) => {
                walk(a, acc);
                walk(b, acc);
            }
            TermTree::ConvPlain(c) => {
                acc.0 += 1;
                walk(c, acc);
            }
            TermTree::ConvGrad(c) => {
                acc.1 += 1;
                walk(c, acc);
            }
        }
    }
    let mut acc = (0, 0);
    walk(term, &mut acc);
    (acc.0, acc.1, term.degree())
}

/// Operator terms of `u_n`, grouped by `u_0`-degree.
#[derive(Clone, Debug)]
pub struct ExpansionPlan {
    pub n: usize,
    pub d: usize,
    /// In expansion order; the index is part of each term's stream path.
    pub terms: Vec<Arc<TermTree>>,
    /// Degree `k` → number of terms.
    pub counts: BTreeMap<usize, BigUint>,
    pub scalar_count: BigUint,
}

impl ExpansionPlan {
    pub fn group(&self, k: usize) -> impl Iterator<Item = &Arc<TermTree>> {
        self.terms.iter().filter(move |t| t.degree() == k)
    }

    /// Per-group scalar summand counts.
    pub fn scalar_counts(&self) -> BTreeMap<usize, BigUint> {
        let mut out = BTreeMap::new();
        for t in &self.terms {
            *out.entry(t.degree()).or_insert_with(BigUint::default) += t.scalar_count(self.d as u64);
        }
        out
    }
}

/// Expand `u_n` with the default size cap.
pub fn expand_terms(n: usize, d: usize) -> Result<ExpansionPlan> {
    expand_terms_with_cap(n, d, DEFAULT_TERM_CAP)
}

/// Expand `u_n`, refusing when the projected scalar count `D(n)` exceeds `cap`.
pub fn expand_terms_with_cap(n: usize, d: usize, cap: u64) -> Result<ExpansionPlan> {
    if d == 0 {
        return Err(Error::domain("dimension must be positive"));
    }
    let projected = d_sequence(n, d as u64);
    if projected > BigUint::from(cap) {
        return Err(Error::ResourceLimit(format!(
            "expanding u_{n} in d = {d} needs {projected} scalar summands, above the cap {cap}"
        )));
    }
    let u0 = Arc::new(TermTree::U0);
    let mut terms = vec![u0.clone()];
    for _ in 0..n {
        let grads: Vec<Arc<TermTree>> = terms.iter().map(|t| t.gradient()).collect::<Result<_>>()?;
        let mut next = Vec::with_capacity(1 + terms.len() * terms.len());
        next.push(u0.clone());
        for a in &terms {
            for g in &grads {
                next.push(Arc::new(TermTree::ConvPlain(Arc::new(TermTree::Product(
                    a.clone(),
                    g.clone(),
                )))));
            }
        }
        terms = next;
    }
    let mut counts = BTreeMap::new();
    let mut scalar_count = BigUint::default();
    for t in &terms {
        *counts.entry(t.degree()).or_insert_with(BigUint::default) += 1u32;
        scalar_count += t.scalar_count(d as u64);
    }
    Ok(ExpansionPlan { n, d, terms, counts, scalar_count })
}

/// Initial data `a` and optional forcing `f`, one registry field per
/// component.
#[derive(Clone, Debug)]
pub struct Problem {
    pub d: usize,
    pub initial: Vec<TestField>,
    pub forcing: Option<Vec<TestField>>,
}

impl Problem {
    pub fn new(initial: Vec<TestField>, forcing: Option<Vec<TestField>>) -> Result<Self> {
        let d = initial.len();
        if d == 0 {
            return Err(Error::domain("initial data needs at least one component"));
        }
        for f in initial.iter().chain(forcing.iter().flatten()) {
            f.validate()?;
            if f.d != d {
                return Err(Error::domain(format!(
                    "component of dimension {} in a {d}-dimensional problem",
                    f.d
                )));
            }
        }
        if let Some(f) = &forcing {
            if f.len() != d {
                return Err(Error::domain("forcing needs one component per dimension"));
            }
        }
        Ok(Self { d, initial, forcing })
    }

    pub fn is_zero(&self) -> bool {
        self.initial.iter().chain(self.forcing.iter().flatten()).all(|f| f.is_zero())
    }

    /// Same problem with every field multiplied by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        Self {
            d: self.d,
            initial: self.initial.iter().map(|f| f.scaled(lambda)).collect(),
            forcing: self.forcing.as_ref().map(|v| v.iter().map(|f| f.scaled(lambda)).collect()),
        }
    }

    /// Closed-form `u_0` and its Jacobian at `(x, t)`.
    pub fn u0_exact(&self, x: &[f64], t: f64, val: &mut [f64], jac: &mut [f64]) -> Result<()> {
        let d = self.d;
        let mut g = vec![0.0; d];
        for i in 0..d {
            let a = &self.initial[i];
            if t <= 0.0 {
                val[i] = a.eval(x, 0.0);
                a.grad(x, 0.0, &mut jac[i * d..(i + 1) * d]);
                continue;
            }
            val[i] = heat_exact(a, x, t)?;
            heat_exact_grad(a, x, t, &mut jac[i * d..(i + 1) * d])?;
            if let Some(f) = &self.forcing {
                val[i] += forced_exact(&f[i], x, t)?;
                forced_exact_grad(&f[i], x, t, &mut g)?;
                for k in 0..d {
                    jac[i * d + k] += g[k];
                }
            }
        }
        Ok(())
    }

    /// `n` shared-variate samples of `u_0` and its Jacobian, averaged.
    fn u0_mc_inline(
        &self,
        x: &[f64],
        t: f64,
        n: u64,
        s: &mut RandomStream,
        val: &mut [f64],
        jac: &mut [f64],
    ) {
        let d = self.d;
        val.fill(0.0);
        jac.fill(0.0);
        let mut y = vec![0.0; d];
        let mut g = vec![0.0; d];
        let inv = 1.0 / n as f64;
        let st = t.max(0.0).sqrt();
        for _ in 0..n {
            for k in 0..d {
                y[k] = x[k] + s.normal() * st;
            }
            for i in 0..d {
                let a = &self.initial[i];
                val[i] += inv * a.eval(&y, 0.0);
                a.grad(&y, 0.0, &mut g);
                for k in 0..d {
                    jac[i * d + k] += inv * g[k];
                }
            }
            if let Some(f) = &self.forcing {
                let tau = s.uniform();
                let sc = (t.max(0.0) * (1.0 - tau)).sqrt();
                for k in 0..d {
                    y[k] = x[k] + s.normal() * sc;
                }
                for i in 0..d {
                    val[i] += inv * t * f[i].eval(&y, t * tau);
                    f[i].grad(&y, t * tau, &mut g);
                    for k in 0..d {
                        jac[i * d + k] += inv * t * g[k];
                    }
                }
            }
        }
    }
}

/// How the `u_0` leaves are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum U0Mode {
    /// Closed-form heat evolution and forced solution.
    Exact,
    /// Shared-variate Monte Carlo with `n0` samples per leaf.
    MonteCarlo { n0: u64 },
}

/// Evaluation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub u0: U0Mode,
    pub bilinear: BilinearMode,
    pub riesz: Option<RieszParams>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            u0: U0Mode::Exact,
            bilinear: BilinearMode::ConvectiveOnly,
            riesz: None,
        }
    }
}

/// `u_0` at a frozen time, as a vector field (closed form only).
struct U0AtTime<'a> {
    problem: &'a Problem,
    t: f64,
}

impl VectorField for U0AtTime<'_> {
    fn dim(&self) -> usize {
        self.problem.d
    }

    fn value(&self, x: &[f64], out: &mut [f64]) {
        let mut jac = vec![0.0; self.problem.d * self.problem.d];
        self.problem
            .u0_exact(x, self.t, out, &mut jac)
            .expect("closed form checked at setup");
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let mut val = vec![0.0; self.problem.d];
        self.problem
            .u0_exact(x, self.t, &mut val, out)
            .expect("closed form checked at setup");
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Via {
    Right,
    Left,
    End,
}

struct SpineStep<'t> {
    kind: StepKind,
    /// Factor not on the spine.
    side: Option<&'t TermTree>,
    via: Via,
}

fn spine(first: StepKind, product: &TermTree) -> Vec<SpineStep<'_>> {
    let mut steps = Vec::new();
    let mut kind = first;
    let mut node = product;
    loop {
        let TermTree::Product(a, g) = node else {
            unreachable!("convolutions wrap products in well-formed terms")
        };
        match (&**a, &**g) {
            (_, TermTree::ConvGrad(c)) => {
                steps.push(SpineStep { kind, side: Some(a), via: Via::Right });
                kind = StepKind::Grad;
                node = c;
            }
            (TermTree::ConvPlain(c), _) => {
                steps.push(SpineStep { kind, side: Some(g), via: Via::Left });
                kind = StepKind::Plain;
                node = c;
            }
            _ => {
                steps.push(SpineStep { kind, side: None, via: Via::End });
                return steps;
            }
        }
    }
}

/// Single-sample term evaluator bound to a problem and options.
pub struct Evaluator<'a> {
    problem: &'a Problem,
    opts: EvalOptions,
    annulus: Option<Annulus>,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a Problem, opts: EvalOptions) -> Result<Self> {
        let d = problem.d;
        if opts.u0 == U0Mode::Exact {
            // fail early on fields without a closed form
            let mut v = vec![0.0; d];
            let mut j = vec![0.0; d * d];
            problem.u0_exact(&vec![0.0; d], 1.0, &mut v, &mut j)?;
        }
        if let U0Mode::MonteCarlo { n0 } = opts.u0 {
            if n0 == 0 {
                return Err(Error::config("mode.n0", "leaf sample count must be positive"));
            }
        }
        let annulus = match opts.bilinear {
            BilinearMode::ConvectiveOnly => None,
            BilinearMode::Full => {
                let p = opts.riesz.ok_or_else(|| {
                    Error::config("mode.riesz", "full bilinear mode needs Riesz parameters")
                })?;
                if opts.u0 != U0Mode::Exact {
                    return Err(Error::Unsupported(
                        "the pressure term needs closed-form u_0 leaves".into(),
                    ));
                }
                Some(Annulus::new(p.eps, p.r_max)?)
            }
        };
        Ok(Self { problem, opts, annulus })
    }

    pub fn dim(&self) -> usize {
        self.problem.d
    }

    fn leaf(&self, x: &[f64], t: f64, s: &mut RandomStream, val: &mut [f64], jac: &mut [f64]) -> Result<()> {
        match self.opts.u0 {
            U0Mode::Exact => self.problem.u0_exact(x, t, val, jac),
            U0Mode::MonteCarlo { n0 } => {
                self.problem.u0_mc_inline(x, t, n0, s, val, jac);
                Ok(())
            }
        }
    }

    /// One sample of a vector-valued factor (`u_0` or `w⊙c`).
    fn sample_value(&self, term: &TermTree, x: &[f64], t: f64, s: &mut RandomStream, out: &mut [f64]) -> Result<()> {
        match term {
            TermTree::U0 => {
                let mut jac = vec![0.0; self.dim() * self.dim()];
                self.leaf(x, t, s, out, &mut jac)
            }
            TermTree::ConvPlain(c) => self.sample_chain(StepKind::Plain, c, x, t, s, Some(out), None),
            other => Err(Error::domain(format!("{other} is not vector-valued"))),
        }
    }

    /// One sample of a Jacobian-valued factor (`∂u_0` or `∂(w⊙c)`).
    fn sample_grad(&self, term: &TermTree, x: &[f64], t: f64, s: &mut RandomStream, out: &mut [f64]) -> Result<()> {
        match term {
            TermTree::DU0 => {
                let mut val = vec![0.0; self.dim()];
                self.leaf(x, t, s, &mut val, out)
            }
            TermTree::ConvGrad(c) => self.sample_chain(StepKind::Grad, c, x, t, s, None, Some(out)),
            other => Err(Error::domain(format!("{other} is not Jacobian-valued"))),
        }
    }

    /// One joint sample of a vector term and its Jacobian on shared variates.
    pub fn sample_both(
        &self,
        term: &TermTree,
        x: &[f64],
        t: f64,
        s: &mut RandomStream,
        val: &mut [f64],
        jac: &mut [f64],
    ) -> Result<()> {
        match term {
            TermTree::U0 => self.leaf(x, t, s, val, jac),
            TermTree::ConvPlain(c) => self.sample_chain(StepKind::Grad, c, x, t, s, Some(val), Some(jac)),
            other => Err(Error::domain(format!("{other} is not a term of u_n"))),
        }
    }

    /// Sample the spine below a root convolution of kind `first`. With both
    /// outputs requested the chain is drawn with a gradient first step and
    /// the value is reweighted by `√(t − s_1)`.
    #[allow(clippy::too_many_arguments)]
    fn sample_chain(
        &self,
        first: StepKind,
        product: &TermTree,
        x: &[f64],
        t: f64,
        s: &mut RandomStream,
        val: Option<&mut [f64]>,
        jac: Option<&mut [f64]>,
    ) -> Result<()> {
        let d = self.dim();
        let steps = spine(first, product);
        let order: Vec<StepKind> = steps.iter().map(|st| st.kind).collect();
        let grads = order.iter().filter(|k| **k == StepKind::Grad).count();
        let spec = TermKernelSpec::new(order, vec![0; grads])?;
        let path = sample_path(&spec, x, t, s);
        let weight = kernel_weight(&spec, t);
        let m = steps.len();

        // innermost product at the last spine point
        let mut v = vec![0.0; d];
        {
            let (y, sm) = path.end();
            let mut a = vec![0.0; d];
            let mut g = vec![0.0; d * d];
            self.leaf(y, sm, s, &mut a, &mut g)?;
            contract(&a, &g, &mut v);
            if let Some(annulus) = self.annulus {
                let field = U0AtTime { problem: self.problem, t: sm };
                let fd = self.opts.riesz.map_or(1e-4, |p| p.fd_step);
                let mut p = vec![0.0; d];
                pressure_gradient_sample(&field, y, annulus, fd, s, &mut p);
                for i in 0..d {
                    v[i] += p[i];
                }
            }
        }

        let mut side_v = vec![0.0; d];
        let mut side_g = vec![0.0; d * d];
        let mut next = vec![0.0; d];
        let mut mat = vec![0.0; d * d];
        for j in (1..m).rev() {
            // step j leads from spine point j to point j + 1 (1-based)
            let point_y = path.y(j);
            let point_s = path.s(j);
            let above = &steps[j - 1];
            match steps[j].kind {
                StepKind::Grad => {
                    debug_assert!(above.via == Via::Right);
                    let z = path.z.row(j);
                    for i in 0..d {
                        for k in 0..d {
                            mat[i * d + k] = z[k] * v[i];
                        }
                    }
                    self.sample_value(above.side.expect("side factor"), point_y, point_s, s, &mut side_v)?;
                    contract(&side_v, &mat, &mut next);
                }
                StepKind::Plain => {
                    debug_assert!(above.via == Via::Left);
                    self.sample_grad(above.side.expect("side factor"), point_y, point_s, s, &mut side_g)?;
                    contract(&v, &side_g, &mut next);
                }
            }
            std::mem::swap(&mut v, &mut next);
        }

        match first {
            StepKind::Plain => {
                let out = val.expect("value output");
                for i in 0..d {
                    out[i] = weight * v[i];
                }
            }
            StepKind::Grad => {
                let z = path.z.row(0);
                if let Some(out) = jac {
                    for i in 0..d {
                        for k in 0..d {
                            out[i * d + k] = weight * z[k] * v[i];
                        }
                    }
                }
                if let Some(out) = val {
                    let lag = (t * path.tau.gaps()[0]).sqrt();
                    for i in 0..d {
                        out[i] = weight * lag * v[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// `out_i = Σ_j a_j g_{ij}`.
fn contract(a: &[f64], g: &[f64], out: &mut [f64]) {
    let d = a.len();
    for i in 0..d {
        out[i] = (0..d).map(|j| a[j] * g[i * d + j]).sum();
    }
}

/// Value (length `d`) and Jacobian (row-major `d × d`) estimates of one term.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermEstimate {
    pub value: Vec<EstimateWithError>,
    pub grad: Vec<EstimateWithError>,
}

/// Estimate a term of `u_n` and its Jacobian at `(x, t)` with `n` samples.
pub fn evaluate_term_mc(
    term: &TermTree,
    eval: &Evaluator<'_>,
    x: &[f64],
    t: f64,
    n: u64,
    stream: &RandomStream,
) -> Result<TermEstimate> {
    let d = eval.dim();
    if x.len() != d {
        return Err(Error::domain(format!("point has dimension {}, problem has {d}", x.len())));
    }
    if !(t > 0.0) {
        return Err(Error::domain(format!("time must be positive, got {t}")));
    }
    if !term.is_well_formed() || term.is_gradient() {
        return Err(Error::domain(format!("{term} is not a term of u_n")));
    }
    if *term == TermTree::U0 {
        return u0_estimate(eval, x, t, n, stream);
    }
    let moments = sample_moments_vec(n, d + d * d, stream, |s, _, out| {
        let (val, jac) = out.split_at_mut(d);
        eval.sample_both(term, x, t, s, val, jac)
    })?;
    let mut est: Vec<EstimateWithError> = moments.iter().map(|m| EstimateWithError::from_moments(m, 1.0)).collect();
    let grad = est.split_off(d);
    Ok(TermEstimate { value: est, grad })
}

/// The `u_0` term itself: closed form, or the semigroup and forced estimators
/// for values with an analytic-gradient estimator for the Jacobian.
fn u0_estimate(eval: &Evaluator<'_>, x: &[f64], t: f64, n: u64, stream: &RandomStream) -> Result<TermEstimate> {
    let d = eval.dim();
    let problem = eval.problem;
    match eval.opts.u0 {
        U0Mode::Exact => {
            let mut v = vec![0.0; d];
            let mut j = vec![0.0; d * d];
            problem.u0_exact(x, t, &mut v, &mut j)?;
            Ok(TermEstimate {
                value: v.into_iter().map(|v| EstimateWithError::exact(v, n)).collect(),
                grad: j.into_iter().map(|v| EstimateWithError::exact(v, n)).collect(),
            })
        }
        U0Mode::MonteCarlo { .. } => {
            let mut value = Vec::with_capacity(d);
            for i in 0..d {
                let mut e = semigroup_mc(&problem.initial[i], x, t, n, &stream.descend(&[0, i as u64]))?;
                if let Some(f) = &problem.forcing {
                    e = e.add_independent(&forced_mc(&f[i], x, t, n, &stream.descend(&[1, i as u64]))?);
                    e.n_samples = n;
                }
                value.push(e);
            }
            let moments = sample_moments_vec(n, d * d, &stream.child(2), |s, _, out| {
                let mut v = vec![0.0; d];
                problem.u0_mc_inline(x, t, 1, s, &mut v, out);
                Ok(())
            })?;
            Ok(TermEstimate {
                value,
                grad: moments.iter().map(|m| EstimateWithError::from_moments(m, 1.0)).collect(),
            })
        }
    }
}

/// `u_{n,N}` and `∂u_{n,N}` on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionEstimate {
    pub points: Vec<GridPoint>,
    /// Per point, `d` components.
    pub values: Vec<Vec<EstimateWithError>>,
    /// Per point, row-major `d × d` with entry `(i, j) = ∂_j u_i`.
    pub grad_values: Vec<Vec<EstimateWithError>>,
    pub budget_used: u64,
}

/// Assemble `u_{n,N}` term by term. Term `r` at grid point `p` draws from
/// `stream.descend([r, p])`, so results do not depend on scheduling.
pub fn iterate_on_grid(
    problem: &Problem,
    grid: &SpaceTimeGrid,
    n: usize,
    alloc: &Allocation,
    opts: EvalOptions,
    stream: &RandomStream,
) -> Result<SolutionEstimate> {
    let d = problem.d;
    if grid.dim().is_some_and(|g| g != d) {
        return Err(Error::domain("grid dimension differs from the problem dimension"));
    }
    if alloc.n != n {
        return Err(Error::config("budget.counts", format!("allocation is for n = {}, run has n = {n}", alloc.n)));
    }
    let plan = expand_terms(n, d)?;
    let budget = budget_total(alloc, n, d)?;
    let budget_used = budget
        .to_u64()
        .ok_or_else(|| Error::Overflow("budget exceeds 64 bits".into()))?;
    let eval = Evaluator::new(problem, opts)?;
    let points = grid.points();
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..plan.terms.len()).map(move |r| (p, r)))
        .collect();
    let zero = problem.is_zero();
    let results: Vec<Result<TermEstimate>> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let term = &plan.terms[r];
            let nk = alloc.get(term.degree());
            if zero {
                return Ok(TermEstimate {
                    value: vec![EstimateWithError::exact(0.0, nk); d],
                    grad: vec![EstimateWithError::exact(0.0, nk); d * d],
                });
            }
            let sub = stream.descend(&[r as u64, p as u64]);
            evaluate_term_mc(term, &eval, &points[p].x, points[p].t, nk, &sub)
        })
        .collect();
    let mut values = Vec::with_capacity(points.len());
    let mut grad_values = Vec::with_capacity(points.len());
    let mut it = results.into_iter();
    for _ in 0..points.len() {
        let mut v: Option<Vec<EstimateWithError>> = None;
        let mut g: Option<Vec<EstimateWithError>> = None;
        for _ in 0..plan.terms.len() {
            let e = it.next().expect("one result per job")?;
            v = Some(match v {
                None => e.value,
                Some(acc) => acc.iter().zip(&e.value).map(|(a, b)| a.add_independent(b)).collect(),
            });
            g = Some(match g {
                None => e.grad,
                Some(acc) => acc.iter().zip(&e.grad).map(|(a, b)| a.add_independent(b)).collect(),
            });
        }
        values.push(v.expect("u_0 term is always present"));
        grad_values.push(g.expect("u_0 term is always present"));
    }
    Ok(SolutionEstimate {
        points: points.to_vec(),
        values,
        grad_values,
        budget_used,
    })
}

/// `u_{n,N}` for a run configuration.
pub fn iterate_solution(config: &RunConfig) -> Result<SolutionEstimate> {
    let problem = config.problem()?;
    let grid = config.grid()?;
    let alloc = config.allocation()?;
    let stream = config.stream();
    config.install(|| iterate_on_grid(&problem, &grid, config.n, &alloc, config.eval_options(), &stream))?
}

/// Nested-scheme baseline for a run configuration with a `[nested]` section.
pub fn iterate_nested(config: &RunConfig) -> Result<SolutionEstimate> {
    let counts = &config
        .nested
        .as_ref()
        .ok_or_else(|| Error::config("nested", "the nested scheme needs nested.counts"))?
        .counts;
    if config.mode.bilinear == BilinearMode::Full {
        return Err(Error::Unsupported("the nested scheme evaluates the convective term only".into()));
    }
    let problem = config.problem()?;
    let grid = config.grid()?;
    let stream = config.stream();
    config.install(|| nested_on_grid(&problem, &grid, counts, config.mode.u0, &stream))?
}

/// Budget of the nested scheme: `2 N(0) + Σ_{k=1}^{L} (k + 1) N(k)`.
pub fn nested_budget(counts: &[u64]) -> Result<u64> {
    let (first, rest) = counts
        .split_first()
        .ok_or_else(|| Error::domain("nested scheme needs N(0)"))?;
    let mut total = 2u64.checked_mul(*first);
    for (k, nk) in rest.iter().enumerate() {
        total = total.and_then(|acc| nk.checked_mul(k as u64 + 2).and_then(|v| acc.checked_add(v)));
    }
    total.ok_or_else(|| Error::Overflow("nested budget exceeds 64 bits".into()))
}

/// The nested recursion: `u_{L,N}` draws `N(L)` points `(x + η√(t g), t(1−g))`,
/// `g ~ Beta(1/2, 1)`, each carrying a fresh realization of `u_{L−1,N}`, and
/// averages the convective products. Products of estimates from shared
/// samples make this biased for `L >= 2`; it is kept as a baseline.
pub fn nested_on_grid(
    problem: &Problem,
    grid: &SpaceTimeGrid,
    counts: &[u64],
    u0: U0Mode,
    stream: &RandomStream,
) -> Result<SolutionEstimate> {
    let d = problem.d;
    if counts.iter().any(|c| *c == 0) {
        return Err(Error::Infeasible("every nested level needs N(k) >= 1".into()));
    }
    let budget_used = nested_budget(counts)?;
    let levels = counts.len() - 1;
    let opts = EvalOptions { u0, ..EvalOptions::default() };
    let eval = Evaluator::new(problem, opts)?;
    let n0 = counts[0];
    let mut values = Vec::with_capacity(grid.len());
    let mut grad_values = Vec::with_capacity(grid.len());
    for (p, pt) in grid.points().iter().enumerate() {
        let sub = stream.child(p as u64);
        let base = u0_estimate(&eval, &pt.x, pt.t, n0, &sub.child(0))?;
        if levels == 0 {
            values.push(base.value);
            grad_values.push(base.grad);
            continue;
        }
        let top = counts[levels];
        let moments = sample_moments_vec(top, d + d * d, &sub.child(1), |s, _, out| {
            let (val, jac) = out.split_at_mut(d);
            nested_sample(problem, u0, counts, levels, &pt.x, pt.t, s, val, jac);
            Ok(())
        })?;
        let v: Vec<EstimateWithError> = moments[..d]
            .iter()
            .zip(&base.value)
            .map(|(m, b)| EstimateWithError::from_moments(m, 1.0).add_independent(b))
            .collect();
        let g: Vec<EstimateWithError> = moments[d..]
            .iter()
            .zip(&base.grad)
            .map(|(m, b)| EstimateWithError::from_moments(m, 1.0).add_independent(b))
            .collect();
        values.push(v);
        grad_values.push(g);
    }
    Ok(SolutionEstimate {
        points: grid.points().to_vec(),
        values,
        grad_values,
        budget_used,
    })
}

/// One outer sample of level `level`'s Duhamel term at `(x, t)`.
#[allow(clippy::too_many_arguments)]
fn nested_sample(
    problem: &Problem,
    u0: U0Mode,
    counts: &[u64],
    level: usize,
    x: &[f64],
    t: f64,
    s: &mut RandomStream,
    val: &mut [f64],
    jac: &mut [f64],
) {
    let d = problem.d;
    let u = s.uniform();
    let g = u * u;
    let sc = (t * g).sqrt();
    let eta: Vec<f64> = (0..d).map(|_| s.normal()).collect();
    let y: Vec<f64> = (0..d).map(|k| x[k] + eta[k] * sc).collect();
    let sy = t * (1.0 - g);
    let mut uv = vec![0.0; d];
    let mut uj = vec![0.0; d * d];
    nested_realization(problem, u0, counts, level - 1, &y, sy, s, &mut uv, &mut uj);
    let mut f = vec![0.0; d];
    contract(&uv, &uj, &mut f);
    let st = t.sqrt();
    for i in 0..d {
        val[i] = t * 2.0 * g.sqrt() * f[i];
        for k in 0..d {
            jac[i * d + k] = 2.0 * st * eta[k] * f[i];
        }
    }
}

/// A full realization of `u_{level,N}` and its Jacobian at `(x, t)`.
#[allow(clippy::too_many_arguments)]
fn nested_realization(
    problem: &Problem,
    u0: U0Mode,
    counts: &[u64],
    level: usize,
    x: &[f64],
    t: f64,
    s: &mut RandomStream,
    val: &mut [f64],
    jac: &mut [f64],
) {
    let d = problem.d;
    match u0 {
        U0Mode::Exact => problem
            .u0_exact(x, t, val, jac)
            .expect("closed form checked at setup"),
        U0Mode::MonteCarlo { .. } => problem.u0_mc_inline(x, t, counts[0], s, val, jac),
    }
    if level == 0 {
        return;
    }
    let nl = counts[level];
    let inv = 1.0 / nl as f64;
    let mut sv = vec![0.0; d];
    let mut sj = vec![0.0; d * d];
    for _ in 0..nl {
        nested_sample(problem, u0, counts, level, x, t, s, &mut sv, &mut sj);
        for i in 0..d {
            val[i] += inv * sv[i];
        }
        for i in 0..d * d {
            jac[i] += inv * sj[i];
        }
    }
}

/// Upper bound `Σ_k max(t^k, t^{2k}) W(k)² A(k, n) B^{2k} / N(k)`.
pub fn variance_aggregate(alloc: &Allocation, t: f64, b: f64, n: usize) -> Result<f64> {
    if !(b >= 0.0) {
        return Err(Error::domain("B must be non-negative"));
    }
    if alloc.n != n {
        return Err(Error::domain("allocation does not match n"));
    }
    let p = CoefficientTable::new().poly(n);
    Ok((1..=alloc.groups())
        .map(|k| {
            let w = unit_ball_volume(k);
            let a = p.coeff(k).to_f64().unwrap_or(f64::INFINITY);
            let tk = t.powi(k as i32).max(t.powi(2 * k as i32));
            if b == 0.0 {
                0.0
            } else {
                tk * w * w * a * b.powi(2 * k as i32) / alloc.get(k) as f64
            }
        })
        .sum())
}

/// Grid lower estimate of `sup max(|x|, 1) max(|u_i|, |∂_j u_i|)`.
/// `values[p]` has `d` entries, `grads[p]` has `d²`.
pub fn triple_norm_estimate(grid: &SpaceTimeGrid, values: &[Vec<f64>], grads: &[Vec<f64>]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::domain("cannot estimate a norm on an empty grid"));
    }
    if values.len() != grid.len() || grads.len() != grid.len() {
        return Err(Error::domain("one value and one Jacobian per grid point required"));
    }
    let mut best: f64 = 0.0;
    for ((pt, v), g) in grid.points().iter().zip(values).zip(grads) {
        let r = pt.x.iter().map(|c| c * c).sum::<f64>().sqrt().max(1.0);
        let m = v.iter().chain(g).fold(0.0f64, |acc, x| acc.max(x.abs()));
        best = best.max(r * m);
    }
    Ok(best)
}

/// [`triple_norm_estimate`] of the closed-form `u_0` of a problem.
pub fn u0_triple_norm(problem: &Problem, grid: &SpaceTimeGrid) -> Result<f64> {
    let d = problem.d;
    let mut values = Vec::with_capacity(grid.len());
    let mut grads = Vec::with_capacity(grid.len());
    for pt in grid.points() {
        let mut v = vec![0.0; d];
        let mut j = vec![0.0; d * d];
        problem.u0_exact(&pt.x, pt.t, &mut v, &mut j)?;
        values.push(v);
        grads.push(j);
    }
    triple_norm_estimate(grid, &values, &grads)
}
