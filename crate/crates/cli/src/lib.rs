//! `picard`: command dispatch over the picard-mc library.

pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_bigint::BigUint;
use serde_json::{json, Value};

use picard_mc::allocation::{
    allocate_exact, allocate_paper, allocate_uniform, budget_total, group_coefficients, min_variance_report,
    objective_Z, Allocation, ObjectiveParams,
};
use picard_mc::combinatorics::{coeff_A, d_sequence, poly_iterate};
use picard_mc::config::{parse_config, AllocationMethod, RunConfig};
use picard_mc::convolution::{estimate_K, quadrature_oracle, TermKernelSpec};
use picard_mc::error_ci::{ci_for_run, combined_error, optimal_n};
use picard_mc::heat::{forced_exact, forced_mc, heat_exact, semigroup_mc, FieldKind, TestField};
use picard_mc::iteration::{expand_terms, iterate_nested, iterate_solution, variance_aggregate, SolutionEstimate};
use picard_mc::riesz::{riesz_truncated_mc, Annulus};
use picard_mc::sampling::{gaussian_block_sample, pb_half_sample, uniform_simplex_sample};
use picard_mc::RandomStream;

use output::{csv_text, emit, json_document, resolve_out, sha256_hex, sidecar, user, CliResult, Provenance};

#[derive(Parser, Debug)]
#[command(name = "picard", version, about = "Monte Carlo Picard iterates via heat-kernel convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw from the sampling laws.
    #[command(subcommand)]
    Dist(DistCmd),
    /// Exact polynomial and summand counts.
    #[command(subcommand)]
    Comb(CombCmd),
    /// Linear heat problem on a grid.
    #[command(subcommand)]
    Heat(HeatCmd),
    /// Single chain-kernel term.
    #[command(subcommand)]
    Term(TermCmd),
    /// Truncated Riesz transform.
    #[command(subcommand)]
    Riesz(RieszCmd),
    /// Picard iterate on a grid.
    Iterate(IterateArgs),
    /// Sample allocation across term groups.
    Allocate(AllocateArgs),
    /// Error reports.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand, Debug)]
enum DistCmd {
    Sample(DistArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Law {
    /// `m × d` standard normal block.
    Gauss,
    /// Uniform on the ordered simplex.
    Usimplex,
    /// Polygonal Beta(1/2, m).
    Pb,
}

#[derive(Args, Debug, Clone)]
struct DistArgs {
    #[arg(long, value_enum)]
    law: Law,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum CombCmd {
    /// `D(n)` under `D(n+1) = 1 + d² D(n)²`.
    Dn {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: u64,
        #[arg(long)]
        json: bool,
    },
    /// Coefficients of the polynomial of iterate `n`.
    Poly {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        json: bool,
    },
    /// `A(m, n)`.
    Coeff {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand, Debug)]
enum HeatCmd {
    Solve(HeatArgs),
}

#[derive(Args, Debug, Clone)]
struct HeatArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `samples`.
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FieldName {
    Constant,
    /// `x_1`
    Linear,
    GaussianBump,
    PolynomialDecay,
    /// `t (1 + x_1)`
    ProductTime,
}

fn named_field(name: FieldName, d: usize) -> CliResult<TestField> {
    let e1: Vec<f64> = (0..d).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect();
    let kind = match name {
        FieldName::Constant => FieldKind::Constant { value: 1.0 },
        FieldName::Linear => FieldKind::Linear { offset: 0.0, coeffs: e1 },
        FieldName::GaussianBump => FieldKind::GaussianBump { amplitude: 1.0, width: 1.0, center: vec![0.0; d] },
        FieldName::PolynomialDecay => FieldKind::PolynomialDecay { amplitude: 1.0, power: 2.0, center: vec![0.0; d] },
        FieldName::ProductTime => FieldKind::ProductTime { amplitude: 1.0, time_power: 1.0, offset: 1.0, coeffs: e1 },
    };
    Ok(TestField::new(d, kind)?)
}

#[derive(Subcommand, Debug)]
enum TermCmd {
    Estimate(TermArgs),
}

#[derive(Args, Debug, Clone)]
struct TermArgs {
    /// Plain kernels.
    #[arg(long, default_value_t = 0)]
    m1: usize,
    /// Gradient kernels; must match `--deriv` when both are given.
    #[arg(long)]
    m2: Option<usize>,
    /// 1-based derivative coordinate of each gradient kernel.
    #[arg(long, value_delimiter = ',')]
    deriv: Vec<usize>,
    #[arg(long, value_enum)]
    field: FieldName,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x: Vec<f64>,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also compute the quadrature reference (m <= 2, d <= 2).
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum RieszCmd {
    Estimate(RieszArgs),
}

#[derive(Args, Debug, Clone)]
struct RieszArgs {
    /// 1-based coordinate.
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum)]
    field: FieldName,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x: Vec<f64>,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    r: f64,
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AllocChoice {
    Exact,
    Paper,
    Uniform,
    /// Counts from `--alloc-file`.
    File,
}

#[derive(Args, Debug, Clone)]
struct IterateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `n`.
    #[arg(long)]
    n: Option<usize>,
    /// Overrides `budget.method`.
    #[arg(long, value_enum)]
    alloc: Option<AllocChoice>,
    /// JSON or TOML document with `counts = [N(1), …]`.
    #[arg(long)]
    alloc_file: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Run the nested baseline scheme from `[nested]`.
    #[arg(long)]
    nested: bool,
    /// Independent replicates with seeds `seed, seed+1, …`, written to `--runs-dir`.
    #[arg(long)]
    replicates: Option<u64>,
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodChoice {
    Exact,
    Paper,
    Uniform,
}

#[derive(Args, Debug, Clone)]
struct AllocateArgs {
    #[arg(long)]
    budget: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    /// Triple-norm value of `u_0`.
    #[arg(long)]
    b: f64,
    /// Weight groups by `max(T^k, T^{2k})`.
    #[arg(long, value_name = "T")]
    with_t: Option<f64>,
    #[arg(long, value_enum, default_value_t = MethodChoice::Exact)]
    method: MethodChoice,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ReportCmd {
    /// Confidence radius from replicate runs.
    Ci(CiArgs),
    /// Iteration depth minimizing the combined error.
    OptimalN(OptimalNArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Reference {
    /// Replicate mean.
    Mean,
    /// Closed-form `u_0`; valid for `n = 0` runs.
    Exact,
}

#[derive(Args, Debug, Clone)]
struct CiArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, value_enum, default_value_t = Reference::Mean)]
    reference: Reference,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct OptimalNArgs {
    #[arg(long)]
    q: f64,
    /// Sample count `N`.
    #[arg(long)]
    budget: u64,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    n_max: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Dist(DistCmd::Sample(a)) => dist_sample(a),
        Command::Comb(c) => comb(c),
        Command::Heat(HeatCmd::Solve(a)) => heat_solve(a),
        Command::Term(TermCmd::Estimate(a)) => term_estimate(a),
        Command::Riesz(RieszCmd::Estimate(a)) => riesz_estimate(a),
        Command::Iterate(a) => iterate(a),
        Command::Allocate(a) => allocate(a),
        Command::Report(ReportCmd::Ci(a)) => report_ci(a),
        Command::Report(ReportCmd::OptimalN(a)) => report_optimal_n(a),
    }
}

/// Shortest round-trip text for a float.
fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Hash input for flag-only commands: the parsed arguments without `--out`.
fn canonical_args<A: std::fmt::Debug + Clone>(args: &A, clear_out: impl FnOnce(&mut A)) -> String {
    let mut a = args.clone();
    clear_out(&mut a);
    format!("{a:?}")
}

fn dist_sample(a: DistArgs) -> CliResult<()> {
    if a.m == 0 || a.count == 0 || a.d == 0 {
        return Err(user("--m, --d and --count must be positive"));
    }
    let mut s = RandomStream::new(a.seed);
    let mut rows = Vec::new();
    let header: Vec<String> = match a.law {
        Law::Gauss => {
            let mut h = vec!["sample".to_string(), "step".to_string()];
            h.extend((1..=a.d).map(|k| format!("z_{k}")));
            for i in 0..a.count {
                let block = gaussian_block_sample(a.m, a.d, &mut s);
                for j in 0..a.m {
                    let mut r = vec![i.to_string(), (j + 1).to_string()];
                    r.extend(block.row(j).iter().map(|v| num(*v)));
                    rows.push(r);
                }
            }
            h
        }
        Law::Usimplex | Law::Pb => {
            let mut h = vec!["sample".to_string()];
            h.extend((1..=a.m).map(|k| format!("tau_{k}")));
            for i in 0..a.count {
                let p = match a.law {
                    Law::Usimplex => uniform_simplex_sample(a.m, &mut s),
                    _ => pb_half_sample(a.m, &mut s),
                };
                let mut r = vec![i.to_string()];
                r.extend(p.coords().iter().map(|v| num(*v)));
                rows.push(r);
            }
            h
        }
    };
    let out = resolve_out(a.out.as_deref());
    emit(out.as_deref(), &csv_text(&header, &rows)?)?;
    if let Some(p) = &out {
        let prov = Provenance::new("dist sample", Some(a.seed), &canonical_args(&a, |a| a.out = None));
        emit(Some(&sidecar(p)), &json_document(&prov, json!({ "rows": rows.len() }))?)?;
    }
    Ok(())
}

fn comb(c: CombCmd) -> CliResult<()> {
    let (text, body, name) = match &c {
        CombCmd::Dn { n, d, .. } => {
            let v = d_sequence(*n, *d);
            (v.to_string(), json!({ "n": n, "d": d, "value": v.to_string() }), "comb dn")
        }
        CombCmd::Poly { n, .. } => {
            let coeffs: Vec<String> = poly_iterate(*n).to_dense().iter().map(|v| v.to_string()).collect();
            (coeffs.join(" "), json!({ "n": n, "coefficients": coeffs }), "comb poly")
        }
        CombCmd::Coeff { m, n, .. } => {
            let v = coeff_A(*m, *n)?;
            (v.to_string(), json!({ "m": m, "n": n, "value": v.to_string() }), "comb coeff")
        }
    };
    let as_json = match c {
        CombCmd::Dn { json, .. } | CombCmd::Poly { json, .. } | CombCmd::Coeff { json, .. } => json,
    };
    if as_json {
        let prov = Provenance::new(name, None, &format!("{c:?}"));
        emit(None, &json_document(&prov, body)?)
    } else {
        emit(None, &format!("{text}\n"))
    }
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    Ok(parse_config(path)?)
}

fn heat_solve(a: HeatArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.samples {
        cfg.samples = Some(n);
    }
    cfg.validate()?;
    let n = cfg.samples.ok_or_else(|| user("heat solve needs `samples` in the config or --samples"))?;
    let problem = cfg.problem()?;
    let grid = cfg.grid()?;
    let stream = cfg.stream();
    let d = cfg.d;
    let rows = cfg.install(|| -> CliResult<Vec<Vec<String>>> {
        let mut rows = Vec::new();
        for (p, pt) in grid.points().iter().enumerate() {
            for i in 0..d {
                let a0 = &problem.initial[i];
                let mut est = semigroup_mc(a0, &pt.x, pt.t, n, &stream.descend(&[p as u64, i as u64, 0]))?;
                let mut exact = heat_exact(a0, &pt.x, pt.t).ok();
                if let Some(f) = &problem.forcing {
                    est = est.add_independent(&forced_mc(&f[i], &pt.x, pt.t, n, &stream.descend(&[p as u64, i as u64, 1]))?);
                    exact = exact.zip(forced_exact(&f[i], &pt.x, pt.t).ok()).map(|(u, v)| u + v);
                }
                let mut r: Vec<String> = pt.x.iter().map(|v| num(*v)).collect();
                r.push(num(pt.t));
                r.push((i + 1).to_string());
                r.push(num(est.value));
                r.push(num(est.stderr));
                r.push(exact.map(num).unwrap_or_default());
                rows.push(r);
            }
        }
        Ok(rows)
    })??;
    let mut header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
    header.extend(["t", "component", "estimate", "stderr", "exact"].map(String::from));
    let out = resolve_out(a.out.as_deref());
    emit(out.as_deref(), &csv_text(&header, &rows)?)?;
    if let Some(p) = &out {
        let prov = Provenance::new("heat solve", Some(cfg.seed), &cfg.to_toml()?);
        emit(Some(&sidecar(p)), &json_document(&prov, json!({ "samples": n, "rows": rows.len() }))?)?;
    }
    Ok(())
}

fn term_estimate(a: TermArgs) -> CliResult<()> {
    let d = a.x.len();
    let m2 = a.m2.unwrap_or(a.deriv.len());
    if m2 != a.deriv.len() {
        return Err(user(format!("--m2 {m2} needs {m2} entries in --deriv, got {}", a.deriv.len())));
    }
    if a.deriv.iter().any(|k| *k == 0 || *k > d) {
        return Err(user(format!("--deriv entries must lie in 1..={d}")));
    }
    let derivs: Vec<usize> = a.deriv.iter().map(|k| k - 1).collect();
    let spec = TermKernelSpec::mixed(a.m1, derivs)?;
    let field = named_field(a.field, d)?;
    let est = estimate_K(&field, &spec, &a.x, a.t, a.n, &RandomStream::new(a.seed))?;
    let mut body = json!({
        "m1": a.m1,
        "m2": m2,
        "value": est.value,
        "stderr": est.stderr,
        "n_samples": est.n_samples,
        "bound": est.variance_bound,
    });
    if a.oracle {
        let q = quadrature_oracle(&field, &spec, &a.x, a.t)?;
        body["oracle"] = json!({ "value": q.value, "error": q.error });
    }
    let prov = Provenance::new("term estimate", Some(a.seed), &canonical_args(&a, |a| a.out = None));
    emit(resolve_out(a.out.as_deref()).as_deref(), &json_document(&prov, body)?)
}

fn riesz_estimate(a: RieszArgs) -> CliResult<()> {
    let d = a.x.len();
    if a.k == 0 || a.k > d {
        return Err(user(format!("--k must lie in 1..={d}")));
    }
    let field = named_field(a.field, d)?;
    let annulus = Annulus::new(a.eps, a.r)?;
    let est = riesz_truncated_mc(|y| field.eval(y, 0.0), a.k - 1, &a.x, annulus, a.n, &RandomStream::new(a.seed))?;
    let body = json!({
        "k": a.k,
        "eps": a.eps,
        "r_max": a.r,
        "value": est.value,
        "stderr": est.stderr,
        "n_samples": est.n_samples,
    });
    let prov = Provenance::new("riesz estimate", Some(a.seed), &canonical_args(&a, |a| a.out = None));
    emit(resolve_out(a.out.as_deref()).as_deref(), &json_document(&prov, body)?)
}

fn read_counts(path: &Path) -> CliResult<Vec<u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Counts {
        counts: Vec<u64>,
    }
    let parsed: Result<Counts, String> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map(|c| c.counts).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn apply_iterate_overrides(a: &IterateArgs, cfg: &mut RunConfig) -> CliResult<()> {
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.threads {
        cfg.threads = Some(t);
    }
    match a.alloc {
        None => {}
        Some(AllocChoice::Exact) => cfg.budget.method = AllocationMethod::Exact,
        Some(AllocChoice::Paper) => cfg.budget.method = AllocationMethod::Paper,
        Some(AllocChoice::Uniform) => cfg.budget.method = AllocationMethod::Uniform,
        Some(AllocChoice::File) => {
            let path = a.alloc_file.as_ref().ok_or_else(|| user("--alloc file needs --alloc-file"))?;
            cfg.budget.method = AllocationMethod::Explicit;
            cfg.budget.counts = Some(read_counts(path)?);
        }
    }
    cfg.validate()?;
    Ok(())
}

fn solution_rows(sol: &SolutionEstimate) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (pt, vals) in sol.points.iter().zip(&sol.values) {
        for (i, e) in vals.iter().enumerate() {
            let mut r: Vec<String> = pt.x.iter().map(|v| num(*v)).collect();
            r.push(num(pt.t));
            r.push((i + 1).to_string());
            r.push(num(e.value));
            r.push(num(e.stderr));
            rows.push(r);
        }
    }
    rows
}

fn run_once(cfg: &RunConfig, nested: bool) -> CliResult<(SolutionEstimate, Value)> {
    if nested {
        let sol = iterate_nested(cfg)?;
        let summary = json!({
            "scheme": "nested",
            "levels": cfg.nested.as_ref().map(|n| n.counts.clone()),
            "budget_used": sol.budget_used,
        });
        return Ok((sol, summary));
    }
    let alloc = cfg.allocation()?;
    let sol = iterate_solution(cfg)?;
    let plan = expand_terms(cfg.n, cfg.d)?;
    let scalars = plan.scalar_counts();
    let term_counts: Vec<Value> = plan
        .counts
        .iter()
        .map(|(k, c)| {
            json!({
                "k": k,
                "terms": c.to_string(),
                "scalar_summands": scalars.get(k).map(|v| v.to_string()),
                "samples": alloc.get(*k),
            })
        })
        .collect();
    let b = cfg.triple_norm().ok();
    let bound = b.and_then(|b| variance_aggregate(&alloc, cfg.horizon(), b, cfg.n).ok());
    let max_stderr = sol.values.iter().flatten().map(|e| e.stderr).fold(0.0f64, f64::max);
    let summary = json!({
        "scheme": "expansion",
        "n": cfg.n,
        "d": cfg.d,
        "allocation": alloc.counts,
        "budget_used": sol.budget_used,
        "triple_norm": b,
        "variance_bound": bound,
        "max_stderr": max_stderr,
        "scalar_count": plan.scalar_count.to_string(),
        "term_counts": term_counts,
    });
    Ok((sol, summary))
}

fn iterate(a: IterateArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    apply_iterate_overrides(&a, &mut cfg)?;
    let d = cfg.d;
    if let Some(reps) = a.replicates {
        let dir = resolve_out(a.runs_dir.as_deref()).ok_or_else(|| user("--replicates needs --runs-dir"))?;
        for r in 0..reps {
            let mut rc = cfg.clone();
            rc.seed = cfg
                .seed
                .checked_add(r)
                .filter(|s| *s <= i64::MAX as u64)
                .ok_or_else(|| user("replicate seeds overflow"))?;
            let (sol, summary) = run_once(&rc, a.nested)?;
            let toml = rc.to_toml()?;
            let prov = Provenance::new("iterate", Some(rc.seed), &toml);
            let body = json!({ "config": toml, "summary": summary, "solution": sol });
            emit(Some(&dir.join(format!("run_{r:04}.json"))), &json_document(&prov, body)?)?;
        }
        return Ok(());
    }
    let (sol, summary) = run_once(&cfg, a.nested)?;
    let mut header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
    header.extend(["t", "component", "value", "stderr"].map(String::from));
    let out = resolve_out(a.out.as_deref());
    emit(out.as_deref(), &csv_text(&header, &solution_rows(&sol))?)?;
    let prov = Provenance::new("iterate", Some(cfg.seed), &cfg.to_toml()?);
    let doc = json_document(&prov, summary)?;
    match &out {
        Some(p) => emit(Some(&sidecar(p)), &doc),
        None => {
            eprint!("{doc}");
            Ok(())
        }
    }
}

fn allocate(a: AllocateArgs) -> CliResult<()> {
    let p = ObjectiveParams {
        n: a.n,
        d: a.d,
        b: a.b,
        t: a.with_t.unwrap_or(1.0),
        budget: a.budget,
        with_t: a.with_t.is_some(),
    };
    let alloc: Allocation = match a.method {
        MethodChoice::Exact => allocate_exact(&p)?,
        MethodChoice::Paper => allocate_paper(&p)?,
        MethodChoice::Uniform => allocate_uniform(&p)?,
    };
    let coeffs = group_coefficients(&p)?;
    let mut rows = Vec::new();
    for k in 1..=alloc.groups() {
        let akn = coeff_A(k, a.n)?;
        let nk = alloc.get(k);
        let spend = &akn * nk * (a.d * (k + 1));
        rows.push(vec![
            k.to_string(),
            akn.to_string(),
            nk.to_string(),
            spend.to_string(),
            num(coeffs.weight[k - 1] / nk as f64),
        ]);
    }
    let header: Vec<String> = ["k", "A", "N", "spend", "z_contribution"].map(String::from).to_vec();
    let used = budget_total(&alloc, a.n, a.d)?;
    let z = objective_Z(&alloc, &p)?;
    let report = min_variance_report(&p)?;
    let body = json!({
        "params": p,
        "method": format!("{:?}", a.method).to_lowercase(),
        "counts": alloc.counts,
        "budget_used": used.to_string(),
        "objective": z,
        "min_variance": report,
    });
    let prov = Provenance::new("allocate", None, &canonical_args(&a, |a| a.out = None));
    let out = resolve_out(a.out.as_deref());
    if a.json {
        return emit(out.as_deref(), &json_document(&prov, body)?);
    }
    emit(out.as_deref(), &csv_text(&header, &rows)?)?;
    if let Some(p) = &out {
        emit(Some(&sidecar(p)), &json_document(&prov, body)?)?;
    }
    Ok(())
}

struct LoadedRun {
    config: RunConfig,
    solution: SolutionEstimate,
}

fn load_runs(dir: &Path) -> CliResult<(Vec<LoadedRun>, String)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| user(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut runs = Vec::with_capacity(files.len());
    let mut all = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| user(format!("{}: {e}", f.display())))?;
        all.extend_from_slice(text.as_bytes());
        let v: Value = serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", f.display())))?;
        let toml = v["config"].as_str().ok_or_else(|| user(format!("{}: no config", f.display())))?;
        let config = RunConfig::parse(toml)?;
        let solution: SolutionEstimate = serde_json::from_value(v["solution"].clone())
            .map_err(|e| user(format!("{}: {e}", f.display())))?;
        runs.push(LoadedRun { config, solution });
    }
    Ok((runs, sha256_hex(&all)))
}

fn report_ci(a: CiArgs) -> CliResult<()> {
    let (runs, hash) = load_runs(&a.runs)?;
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.config.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() != runs.len() {
        return Err(user("replicate runs must have distinct seeds"));
    }
    let reference = match a.reference {
        Reference::Mean => None,
        Reference::Exact => {
            let first = runs.first().ok_or_else(|| user("no runs found"))?;
            if first.config.n != 0 {
                return Err(user("the exact reference is u_0 and only applies to n = 0 runs"));
            }
            let problem = first.config.problem()?;
            let d = problem.d;
            let mut values = Vec::new();
            for pt in &first.solution.points {
                let mut v = vec![0.0; d];
                let mut j = vec![0.0; d * d];
                problem.u0_exact(&pt.x, pt.t, &mut v, &mut j)?;
                values.push(v);
            }
            Some(values)
        }
    };
    let sols: Vec<SolutionEstimate> = runs.into_iter().map(|r| r.solution).collect();
    let report = ci_for_run(&sols, reference.as_deref(), a.delta)?;
    let body = json!({
        "reference": format!("{:?}", a.reference).to_lowercase(),
        "report": report,
    });
    let prov = Provenance::new("report ci", None, &hash);
    emit(resolve_out(a.out.as_deref()).as_deref(), &json_document(&prov, body)?)
}

fn report_optimal_n(a: OptimalNArgs) -> CliResult<()> {
    let n_star = optimal_n(a.q, a.budget, a.c, a.d, a.n_max)?;
    let sqrt_n = (a.budget as f64).sqrt();
    let table: Vec<Value> = (1..=a.n_max)
        .map(|n| {
            let dn = d_sequence(n, a.d as u64);
            let feasible = &dn * &dn <= BigUint::from(a.budget);
            json!({
                "n": n,
                "d_n": dn.to_string(),
                "feasible": feasible,
                "combined_error": combined_error(a.q, n, a.budget, a.c, a.d).ok(),
            })
        })
        .collect();
    let body = json!({
        "q": a.q,
        "budget": a.budget,
        "sqrt_budget": sqrt_n,
        "c": a.c,
        "d": a.d,
        "n_star": n_star,
        "table": table,
    });
    let prov = Provenance::new("report optimal-n", None, &canonical_args(&a, |a| a.out = None));
    emit(resolve_out(a.out.as_deref()).as_deref(), &json_document(&prov, body)?)
}
