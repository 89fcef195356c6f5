//! The named experiments. Each returns its artifacts, a pass flag for the
//! checks it embeds and human-readable summary lines.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tracedyn::collapse::{
    born_statistics, closed_form_coherence, ctilde_noise_bridge, ctilde_series_from_samples,
    ctilde_series_from_trajectory, lindblad_evolve, martingale_report, run_trajectories, CollapseConfig, Kernel, Mode,
    RunConfig, StateVector, TrajectoryEnsemble,
};
use tracedyn::dynamics::{integrate, liouville_divergence, random_hamiltonian, Flow, IntegrationConfig};
use tracedyn::ensemble::{
    effective_hbar, emergent_commutator_residual, ensemble_average, mcmc_sample, unitary_fix, ward_terms, Ensemble,
    FixConvention, McmcConfig, MatrixEstimate, SampleSet, WARD_TERMS,
};
use tracedyn::grassmann::Grade;
use tracedyn::parallel::try_map_indexed;
use tracedyn::trace::{jacobi_residual, trace_derivative, trace_eval, Letter};
use tracedyn::{Error, Execution, GrassmannElement, Kind, MatrixValue, PhaseState, TracePolynomial, TraceWord};

use crate::config::{collapse_setup, ConfigError, NoiseSource, Resolved};
use crate::output::Artifact;

/// Per-entry tolerance of exact identities such as `Tr C̃ = 0`.
const EXACT: f64 = 1e-10;
const JACOBI_TOLERANCE: f64 = 1e-9;
const DERIVATIVE_TOLERANCE: f64 = 1e-6;
const DIVERGENCE_TOLERANCE: f64 = 1e-6;
const SIGMAS: f64 = 3.0;
const DENSITY_SIGMAS: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numeric(#[from] Error),
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Numeric(Error::Csv(e))
    }
}

#[derive(Debug)]
pub struct Report {
    pub passed: bool,
    pub lines: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

type Out = Result<Report, RunError>;

fn bad(msg: impl Into<String>) -> RunError {
    RunError::Config(ConfigError::General(msg.into()))
}

struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[&str]) -> Result<Self, RunError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        Ok(Table { w })
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<(), RunError> {
        self.w.write_record(fields.into_iter().collect::<Vec<_>>())?;
        Ok(())
    }

    fn finish(self, name: &str) -> Result<Artifact, RunError> {
        let bytes = self.w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(Artifact::new(name, bytes))
    }
}

fn json_artifact(name: &str, v: &serde_json::Value) -> Artifact {
    let mut bytes = serde_json::to_vec_pretty(v).expect("json");
    bytes.push(b'\n');
    Artifact::new(name, bytes)
}

// JSON has no infinity; non-finite statistics are written as strings.
fn num(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn z(d: f64, se: f64) -> f64 {
    if se > 0.0 {
        d.abs() / se
    } else if d.abs() < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn run_experiment(r: &Resolved) -> Out {
    match r.experiment() {
        "conservation" => conservation(r),
        "liouville" => liouville(r),
        "ensemble_gaussian" => ensemble_gaussian(r),
        "ward" => ward(r),
        "hbar" => hbar(r),
        "collapse_born" => collapse_born(r),
        "collapse_lindblad" => collapse_lindblad(r),
        "degenerate_contrast" => degenerate_contrast(r),
        "noise_bridge" => noise_bridge(r),
        other => Err(bad(format!("unknown experiment `{other}`"))),
    }
}

fn rng(r: &Resolved, stream: u64) -> ChaCha8Rng {
    let mut g = ChaCha8Rng::seed_from_u64(r.config.seed);
    g.set_stream(stream);
    g
}

fn hamiltonians(r: &Resolved, g: &mut ChaCha8Rng) -> Result<Vec<TracePolynomial>, RunError> {
    let d = &r.config.dynamics;
    if d.random_hamiltonians == 0 {
        return Ok(vec![r.hamiltonian.clone()]);
    }
    (0..d.random_hamiltonians)
        .map(|_| Ok(random_hamiltonian(&r.roster, d.random_degree, d.random_words, d.random_strength, g)?))
        .collect()
}

fn random_state(r: &Resolved, g: &mut ChaCha8Rng) -> Result<PhaseState, RunError> {
    Ok(PhaseState::random(r.roster.clone(), r.dim, r.generators, r.config.system.init_scale, g)?)
}

fn conservation(r: &Resolved) -> Out {
    let mut g = rng(r, 0);
    let hs = hamiltonians(r, &mut g)?;
    let starts = hs.iter().map(|_| random_state(r, &mut g)).collect::<Result<Vec<_>, _>>()?;
    let d = &r.config.dynamics;
    let cfg = IntegrationConfig {
        t_final: d.t_final,
        dt: d.dt,
        scheme: d.scheme,
        record_every: d.record_every,
        keep_snapshots: false,
    };
    let runs = try_map_indexed(Execution::Parallel, hs.len(), |k| {
        let flow = Flow::new(&hs[k], &r.roster, &r.registry, r.dim)?;
        match integrate(&flow, &starts[k], &cfg) {
            Ok(t) => Ok(Ok(t)),
            Err(Error::NonFinite { time, .. }) => Ok(Err(time)),
            Err(e) => Err(e),
        }
    })?;
    let mut charges = Table::new(&[
        "hamiltonian",
        "time",
        "H_trace",
        "N_trace_abs",
        "ctilde_norm",
        "ctilde_trace_abs",
        "ctilde_antihermiticity",
        "constraint_violation",
    ])?;
    let mut drift = Table::new(&[
        "hamiltonian",
        "h_drift",
        "n_drift",
        "ctilde_norm_drift",
        "max_ctilde_trace",
        "max_ctilde_antihermiticity",
        "blowup_time",
        "pass",
    ])?;
    let mut passed = true;
    let mut worst = [0.0f64; 5];
    let mut listing = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        listing.push(json!({"index": k, "hamiltonian": hs[k].to_string()}));
        let (row, ok) = match run {
            Ok(t) => {
                for rec in &t.records {
                    charges.row([
                        k.to_string(),
                        rec.time.to_string(),
                        rec.h_trace.body().re.to_string(),
                        rec.n_trace.norm().to_string(),
                        rec.ctilde.norm().to_string(),
                        rec.ctilde_trace().to_string(),
                        rec.ctilde_antihermiticity().to_string(),
                        rec.constraint_violation.to_string(),
                    ])?;
                }
                let dr = t.drift();
                let v = [dr.h, dr.n, dr.ctilde_norm, dr.max_ctilde_trace, dr.max_ctilde_antihermiticity];
                for (w, x) in worst.iter_mut().zip(v) {
                    *w = w.max(x);
                }
                let ok = v[..3].iter().all(|&x| x < d.tolerance) && v[3] < EXACT && v[4] < EXACT;
                (v.iter().map(|x| x.to_string()).chain([String::new()]).collect::<Vec<_>>(), ok)
            }
            Err(time) => {
                worst = [f64::INFINITY; 5];
                (vec![String::new(); 5].into_iter().chain([time.to_string()]).collect(), false)
            }
        };
        passed &= ok;
        drift.row([k.to_string()].into_iter().chain(row).chain([ok.to_string()]))?;
    }
    let line = format!(
        "{} Hamiltonian(s), t = {}: max relative drift H {:.2e}, N {:.2e}, ‖C̃‖ {:.2e} (< {:.0e}); |Tr C̃| {:.2e}, ‖C̃ + C̃†‖ {:.2e} (< {EXACT:.0e})",
        hs.len(),
        d.t_final,
        worst[0],
        worst[1],
        worst[2],
        d.tolerance,
        worst[3],
        worst[4]
    );
    let summary = json!({
        "experiment": "conservation",
        "passed": passed,
        "tolerance": d.tolerance,
        "max_h_drift": num(worst[0]),
        "max_n_drift": num(worst[1]),
        "max_ctilde_norm_drift": num(worst[2]),
        "max_ctilde_trace": num(worst[3]),
        "max_ctilde_antihermiticity": num(worst[4]),
        "hamiltonians": listing,
    });
    Ok(Report {
        passed,
        lines: vec![line],
        artifacts: vec![charges.finish("charges.csv")?, drift.finish("drift.csv")?, json_artifact("summary.json", &summary)],
    })
}

fn random_poly(labels: &[String], consts: &[String], g: &mut ChaCha8Rng) -> TracePolynomial {
    let words = (0..g.random_range(1..=3))
        .map(|_| {
            let letters = (0..g.random_range(1..=4))
                .map(|_| {
                    if !consts.is_empty() && g.random_bool(0.15) {
                        Letter::constant(&consts[g.random_range(0..consts.len())])
                    } else {
                        let l = &labels[g.random_range(0..labels.len())];
                        if g.random_bool(0.5) {
                            Letter::q(l)
                        } else {
                            Letter::p(l)
                        }
                    }
                })
                .collect();
            TraceWord::new(Complex64::new(g.random_range(-1.0..1.0), g.random_range(-1.0..1.0)), letters)
        })
        .collect();
    TracePolynomial::new(words).expect("nonempty")
}

fn random_homogeneous(gens: u32, odd: bool, g: &mut ChaCha8Rng) -> Result<GrassmannElement, RunError> {
    let mut acc = GrassmannElement::zero(gens);
    for _ in 0..6 {
        let len = 2 * g.random_range(0..=2) + usize::from(odd);
        let mut idx: Vec<usize> = (0..gens as usize).collect();
        for i in 0..len {
            let j = g.random_range(i..idx.len());
            idx.swap(i, j);
        }
        let c = Complex64::new(g.random_range(-1.0..1.0), g.random_range(-1.0..1.0));
        acc = acc.try_add(&GrassmannElement::monomial(gens, &idx[..len], c)?)?;
    }
    Ok(acc)
}

fn grassmann_axioms(g: &mut ChaCha8Rng) -> Result<f64, RunError> {
    let gens = 8;
    let mut worst: f64 = 0.0;
    for i in 0..gens as usize {
        let ti = GrassmannElement::generator(gens, i)?;
        for j in 0..gens as usize {
            let tj = GrassmannElement::generator(gens, j)?;
            worst = worst.max(ti.try_mul(&tj)?.try_add(&tj.try_mul(&ti)?)?.norm());
        }
    }
    for _ in 0..200 {
        let x = random_homogeneous(gens, g.random_bool(0.5), g)?;
        let y = random_homogeneous(gens, g.random_bool(0.5), g)?;
        let sign = if x.grade() == Grade::Odd && y.grade() == Grade::Odd { -1.0 } else { 1.0 };
        worst = worst.max((&x.try_mul(&y)? - &y.try_mul(&x)?.scale(Complex64::new(sign, 0.0))).norm());
        let odd = random_homogeneous(gens, true, g)?;
        worst = worst.max(odd.try_mul(&odd)?.norm());
    }
    Ok(worst)
}

fn liouville(r: &Resolved) -> Out {
    if !r.roster.is_bosonic_only() {
        return Err(bad("liouville needs a bosonic roster (system.fermionic must be empty)"));
    }
    let d = &r.config.dynamics;
    let labels: Vec<String> = r.roster.vars().iter().map(|v| v.label.clone()).collect();
    let consts: Vec<String> = r.config.system.constants.keys().cloned().collect();
    let mut g = rng(r, 0);
    let hs = hamiltonians(r, &mut g)?;
    let mut div = Table::new(&["hamiltonian", "point", "divergence", "field_scale", "ratio"])?;
    let mut worst_div: f64 = 0.0;
    for (k, h) in hs.iter().enumerate() {
        let flow = Flow::new(h, &r.roster, &r.registry, r.dim)?;
        for p in 0..d.points {
            let s = random_state(r, &mut g)?;
            let v = liouville_divergence(&flow, &s, d.fd_step)?;
            let ratio = v.divergence.abs() / v.field_scale.max(f64::MIN_POSITIVE);
            worst_div = worst_div.max(ratio);
            div.row([k, p].map(|x| x.to_string()).into_iter().chain([v.divergence, v.field_scale, ratio].map(|x| x.to_string())))?;
        }
    }

    let mut g = rng(r, 1);
    let mut jac = Table::new(&["case", "residual", "scale"])?;
    let mut worst_jacobi: f64 = 0.0;
    for k in 0..d.algebra_cases {
        let [a, b, c] = [(); 3].map(|_| random_poly(&labels, &[], &mut g));
        let s = random_state(r, &mut g)?;
        let rep = jacobi_residual(&a, &b, &c, &s, &r.registry)?;
        worst_jacobi = worst_jacobi.max(rep.residual);
        jac.row([k.to_string(), rep.residual.to_string(), rep.scale.to_string()])?;
    }

    let mut der = Table::new(&["case", "variable", "row", "col", "direction", "analytic", "finite_difference", "abs_error"])?;
    let mut worst_der: f64 = 0.0;
    let h = d.fd_step;
    for k in 0..d.algebra_cases {
        let poly = random_poly(&labels, &consts, &mut g);
        let s = random_state(r, &mut g)?;
        let label = labels[g.random_range(0..labels.len())].clone();
        let kind = if g.random_bool(0.5) { Kind::Q } else { Kind::P };
        let (i, j) = (g.random_range(0..r.dim), g.random_range(0..r.dim));
        let dm = trace_derivative(&poly, (&label, kind), &r.roster)?.eval(&s, &r.registry)?;
        for (dname, dir) in [("re", Complex64::new(1.0, 0.0)), ("im", Complex64::new(0.0, 1.0))] {
            let mut e = vec![Complex64::new(0.0, 0.0); r.dim * r.dim];
            e[j * r.dim + i] = dir;
            let e = MatrixValue::from_rows(r.dim, &e);
            let shifted = |sgn: f64| -> Result<Complex64, Error> {
                let mut t = s.clone();
                let x = t.get(&label, kind)?.try_axpy(Complex64::new(sgn * h, 0.0), &e)?;
                t.set(&label, kind, x)?;
                Ok(trace_eval(&poly, &t, &r.registry)?.body())
            };
            let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
            let analytic = dm.body_entry(i, j) * dir;
            let err = (fd - analytic).norm();
            worst_der = worst_der.max(err);
            let var = format!("{}{label}", if kind == Kind::Q { "q" } else { "p" });
            der.row([
                k.to_string(),
                var,
                i.to_string(),
                j.to_string(),
                dname.to_string(),
                analytic.to_string(),
                fd.to_string(),
                err.to_string(),
            ])?;
        }
    }
    let axioms = grassmann_axioms(&mut g)?;

    let checks = [
        worst_div < DIVERGENCE_TOLERANCE,
        worst_jacobi < JACOBI_TOLERANCE,
        worst_der < DERIVATIVE_TOLERANCE,
        axioms < 1e-12,
    ];
    let passed = checks.iter().all(|&c| c);
    let lines = vec![
        format!(
            "max |div| / field scale {worst_div:.2e} over {} points (< {DIVERGENCE_TOLERANCE:.0e})",
            hs.len() * d.points
        ),
        format!("max Jacobi residual {worst_jacobi:.2e} over {} triples (< {JACOBI_TOLERANCE:.0e})", d.algebra_cases),
        format!(
            "max |analytic − central difference| {worst_der:.2e} over {} cases (< {DERIVATIVE_TOLERANCE:.0e})",
            d.algebra_cases
        ),
        format!("Grassmann axiom violation {axioms:.2e} (< 1e-12)"),
    ];
    let summary = json!({
        "experiment": "liouville",
        "passed": passed,
        "max_divergence_ratio": num(worst_div),
        "max_jacobi_residual": num(worst_jacobi),
        "max_derivative_error": num(worst_der),
        "grassmann_axiom_violation": num(axioms),
        "hamiltonians": hs.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
    });
    Ok(Report {
        passed,
        lines,
        artifacts: vec![
            div.finish("divergence.csv")?,
            jac.finish("jacobi.csv")?,
            der.finish("derivative.csv")?,
            json_artifact("summary.json", &summary),
        ],
    })
}

fn mcmc_config(r: &Resolved, seed: u64) -> McmcConfig {
    let e = &r.config.ensemble;
    McmcConfig {
        n_samples: e.n_samples,
        burn_in: e.burn_in,
        step_scale: e.step_scale,
        seed,
        chains: e.chains,
        thin: e.thin,
        execution: Execution::Parallel,
    }
}

fn sample(r: &Resolved, seed: u64) -> Result<(Ensemble, SampleSet), RunError> {
    if !r.roster.is_bosonic_only() {
        return Err(bad("Metropolis sampling needs a bosonic roster (system.fermionic must be empty)"));
    }
    let ens = Ensemble::new(&r.hamiltonian, r.ensemble_params()?, &r.registry)?;
    let set = mcmc_sample(&ens, &mcmc_config(r, seed))?;
    Ok((ens, set))
}

fn sample_artifacts(r: &Resolved, set: &SampleSet, suffix: &str) -> Result<Vec<Artifact>, RunError> {
    let mut diag = Vec::new();
    set.write_diagnostics(&mut diag)?;
    diag.push(b'\n');
    let mut out = vec![Artifact::new(format!("chains{suffix}.json"), diag)];
    if r.config.ensemble.write_samples {
        let mut s = Vec::new();
        set.write_jsonl(&mut s)?;
        out.push(Artifact::new(format!("samples{suffix}.jsonl"), s));
    }
    Ok(out)
}

fn ensemble_gaussian(r: &Resolved) -> Out {
    let e = &r.config.ensemble;
    if r.observables.is_empty() {
        return Err(bad("ensemble.observables must not be empty"));
    }
    let expected = match e.expected {
        Some(x) => x,
        None if *e.lambda_hat.get_ref() == 0.0 && e.tau > 0.0 => (r.dim * r.dim) as f64 / (2.0 * e.tau),
        None => return Err(bad("set ensemble.expected; the default N²/(2τ) needs tau > 0 and lambda_hat = 0")),
    };
    let (_, set) = sample(r, r.config.seed)?;
    let mut t = Table::new(&["observable", "re_mean", "re_stderr", "tau_int", "im_mean", "im_stderr", "n", "expected", "z"])?;
    let mut first = None;
    for (k, (o, text)) in r.observables.iter().zip(e.observables.iter().flatten()).enumerate() {
        let est = ensemble_average(o, &set, &r.registry)?;
        let (exp, zs) = if k == 0 {
            let zs = est.re.z_score(expected);
            first = Some((est.re, zs));
            (expected.to_string(), zs.to_string())
        } else {
            (String::new(), String::new())
        };
        t.row([
            text.get_ref().clone(),
            est.re.mean.to_string(),
            est.re.stderr.to_string(),
            est.re.tau_int.to_string(),
            est.im.mean.to_string(),
            est.im.stderr.to_string(),
            est.re.n.to_string(),
            exp,
            zs,
        ])?;
    }
    let (est, zs) = first.expect("one observable");
    let first_text = e.observables.iter().flatten().next().map(|s| s.get_ref().as_str()).unwrap_or_default();
    let passed = zs <= SIGMAS;
    let line = format!(
        "⟨{}⟩ = {:.4} ± {:.4} vs {expected} ({zs:.2}σ, {} samples, τ_int {:.1})",
        first_text,
        est.mean,
        est.stderr,
        set.len(),
        est.tau_int
    );
    let summary = json!({
        "experiment": "ensemble_gaussian",
        "passed": passed,
        "observable": first_text,
        "mean": est.mean,
        "stderr": est.stderr,
        "tau_int": est.tau_int,
        "expected": expected,
        "z": num(zs),
        "samples": set.len(),
        "warnings": set.warnings,
    });
    let mut artifacts = vec![t.finish("averages.csv")?, json_artifact("summary.json", &summary)];
    artifacts.extend(sample_artifacts(r, &set, "")?);
    Ok(Report {
        passed,
        lines: vec![line],
        artifacts,
    })
}

fn estimate_rows(t: &mut Table, prefix: &[String], est: &MatrixEstimate) -> Result<(), RunError> {
    for (k, e) in est.entries.iter().enumerate() {
        t.row(prefix.iter().cloned().chain([
            (k / est.dim).to_string(),
            (k % est.dim).to_string(),
            e.re.mean.to_string(),
            e.re.stderr.to_string(),
            e.im.mean.to_string(),
            e.im.stderr.to_string(),
        ]))?;
    }
    Ok(())
}

fn letter_name((label, kind): &(String, Kind)) -> String {
    format!("{}{label}", if *kind == Kind::Q { "q" } else { "p" })
}

fn ward(r: &Resolved) -> Out {
    if r.ward.is_empty() {
        return Err(bad("ensemble.ward must list at least one choice"));
    }
    let (ens, set) = sample(r, r.config.seed)?;
    let mut terms = Table::new(&["choice", "term", "row", "col", "re", "re_stderr", "im", "im_stderr"])?;
    let mut header = vec!["choice", "w", "x"];
    header.extend(WARD_TERMS);
    header.extend(["max_z", "pass"]);
    let mut mags = Table::new(&header)?;
    let mut passed = true;
    let mut lines = Vec::new();
    let mut choices = Vec::new();
    for (k, ((w, x), spec)) in r.ward.iter().zip(r.config.ensemble.ward.iter().flatten()).enumerate() {
        let rep = ward_terms(w, (x.0.as_str(), x.1), &ens.hamiltonian, &ens.params, &set, &r.registry)?;
        let named = WARD_TERMS.iter().copied().zip(&rep.terms).chain([("total", &rep.total)]);
        for (name, est) in named {
            estimate_rows(&mut terms, &[k.to_string(), name.to_string()], est)?;
        }
        let mz = rep.max_z();
        let ok = mz <= SIGMAS;
        passed &= ok;
        let m = rep.magnitudes();
        mags.row(
            [k.to_string(), spec.w.get_ref().clone(), letter_name(x)]
                .into_iter()
                .chain(m.iter().map(|v| v.to_string()))
                .chain([mz.to_string(), ok.to_string()]),
        )?;
        let parts: Vec<String> = WARD_TERMS.iter().zip(&m).map(|(n, v)| format!("{n} {v:.3}")).collect();
        lines.push(format!("W = {}, x = {}: total {mz:.2}σ; |terms| {}", spec.w.get_ref(), letter_name(x), parts.join(", ")));
        choices.push(json!({"w": spec.w.get_ref(), "x": letter_name(x), "max_z": num(mz), "magnitudes": m, "pass": ok}));
    }
    let summary = json!({
        "experiment": "ward",
        "passed": passed,
        "sigmas": SIGMAS,
        "samples": set.len(),
        "choices": choices,
        "warnings": set.warnings,
    });
    let mut artifacts = vec![terms.finish("ward_terms.csv")?, mags.finish("ward_summary.csv")?, json_artifact("summary.json", &summary)];
    artifacts.extend(sample_artifacts(r, &set, "")?);
    Ok(Report {
        passed,
        lines,
        artifacts,
    })
}

fn hbar(r: &Resolved) -> Out {
    let e = &r.config.ensemble;
    let (_, raw) = sample(r, r.config.seed)?;
    let (_, other) = sample(r, r.config.seed.wrapping_add(1))?;
    let report = effective_hbar(&raw)?;
    let conv = FixConvention {
        label: e.fix_label.clone(),
        subgroup: e.fix_subgroup,
        ..Default::default()
    };
    let mut degenerate = 0usize;
    let mut fixed = other.clone();
    for s in fixed.chains.iter_mut().flatten() {
        let f = unitary_fix(s, &conv)?;
        degenerate += usize::from(f.degenerate);
        *s = f.state;
    }

    let mut gauge = Table::new(&["observable", "raw_mean", "raw_stderr", "fixed_mean", "fixed_stderr", "z", "max_sample_deviation"])?;
    let mut worst_z: f64 = 0.0;
    let mut worst_exact: f64 = 0.0;
    for (poly, text) in r.observables.iter().zip(e.observables.iter().flatten()) {
        let a = ensemble_average(poly, &raw, &r.registry)?.re;
        let b = ensemble_average(poly, &fixed, &r.registry)?.re;
        let zs = z(a.mean - b.mean, (a.stderr.powi(2) + b.stderr.powi(2)).sqrt());
        worst_z = worst_z.max(zs);
        let mut dev: f64 = 0.0;
        for (s, f) in other.iter().zip(fixed.iter()) {
            let x = trace_eval(poly, s, &r.registry)?.body();
            let y = trace_eval(poly, f, &r.registry)?.body();
            dev = dev.max((x - y).norm() / x.norm().max(1.0));
        }
        worst_exact = worst_exact.max(dev);
        gauge.row([
            text.get_ref().clone(),
            a.mean.to_string(),
            a.stderr.to_string(),
            b.mean.to_string(),
            b.stderr.to_string(),
            zs.to_string(),
            dev.to_string(),
        ])?;
    }
    let passed = worst_z <= SIGMAS && worst_exact < EXACT;
    let mut lines = vec![
        format!(
            "ħ = {:.5} ± {:.5} (τ_int {:.1}), diagonal anisotropy {:.2e}",
            report.hbar.mean, report.hbar.stderr, report.hbar.tau_int, report.anisotropy
        ),
        format!(
            "raw vs fixed chains: max {worst_z:.2}σ over {} observable(s) (≤ {SIGMAS}σ); per-sample invariance {worst_exact:.1e}; {degenerate} degenerate fixings",
            r.observables.len()
        ),
    ];
    let mut artifacts = Vec::new();
    let mut ctilde = Table::new(&["row", "col", "re", "re_stderr", "im", "im_stderr"])?;
    estimate_rows(&mut ctilde, &[], &report.mean_ctilde)?;
    artifacts.push(ctilde.finish("mean_ctilde.csv")?);
    let mut commutator = serde_json::Value::Null;
    if let (Some((w, x)), Some(spec)) = (&r.commutator, &e.commutator) {
        let x = (x.0.as_str(), x.1);
        let est = emergent_commutator_residual(w, x, &raw, report.hbar.mean, &r.registry)?;
        let comm = emergent_commutator_residual(w, x, &raw, 0.0, &r.registry)?.mean();
        let full = est.mean();
        let hbar_term = full.try_sub(&comm)?.norm();
        let relative = full.norm() / hbar_term.max(f64::MIN_POSITIVE);
        let mut t = Table::new(&["row", "col", "re", "re_stderr", "im", "im_stderr"])?;
        estimate_rows(&mut t, &[], &est)?;
        artifacts.push(t.finish("commutator.csv")?);
        let name = letter_name(&(x.0.to_string(), x.1));
        lines.push(format!(
            "emergent commutator for W = {}, x = {name}: ‖⟨residual⟩‖ {:.3e}, ‖⟨commutator⟩‖ {:.3e}, ‖ħ term‖ {hbar_term:.3e}, relative residual {relative:.3}",
            spec.w.get_ref(),
            full.norm(),
            comm.norm()
        ));
        commutator = json!({
            "w": spec.w.get_ref(),
            "x": name,
            "residual_norm": full.norm(),
            "commutator_norm": comm.norm(),
            "hbar_term_norm": hbar_term,
            "relative_residual": num(relative),
        });
    }
    let summary = json!({
        "experiment": "hbar",
        "passed": passed,
        "hbar": report.hbar,
        "diagonal": report.diagonal,
        "anisotropy": report.anisotropy,
        "gauge_max_z": num(worst_z),
        "gauge_sample_deviation": num(worst_exact),
        "degenerate_fixings": degenerate,
        "commutator": commutator,
        "warnings": raw.warnings.iter().chain(&other.warnings).collect::<Vec<_>>(),
    });
    artifacts.push(gauge.finish("gauge.csv")?);
    artifacts.push(json_artifact("summary.json", &summary));
    artifacts.extend(sample_artifacts(r, &raw, "")?);
    artifacts.extend(sample_artifacts(r, &other, "_fixed_source")?);
    Ok(Report {
        passed,
        lines,
        artifacts,
    })
}

fn run_config(r: &Resolved, kernel: Kernel, checkpoints: usize) -> RunConfig {
    let c = &r.config.collapse;
    RunConfig {
        t_final: c.t_final,
        dt: c.dt,
        n_traj: c.n_traj,
        seed: r.config.seed,
        checkpoints,
        kernel,
        execution: Execution::Parallel,
    }
}

fn collapse_born(r: &Resolved) -> Out {
    let (cfg, psi) = collapse_setup("", r)?;
    let c = &r.config.collapse;
    let ens = run_trajectories(&psi, &cfg, &run_config(r, c.kernel, c.checkpoints))?;
    let born = born_statistics(&ens, &psi);
    let mart = martingale_report(&ens);
    let mut traj = Vec::new();
    ens.write_csv(&mut traj)?;
    let mut bt = Table::new(&["outcome", "born", "count", "frequency", "sigma", "ci_low", "ci_high", "pass"])?;
    for o in &born.outcomes {
        bt.row([
            o.outcome.to_string(),
            o.born.to_string(),
            o.count.to_string(),
            o.frequency.to_string(),
            o.sigma.to_string(),
            o.ci_low.to_string(),
            o.ci_high.to_string(),
            o.pass.to_string(),
        ])?;
    }
    let mut mt = Table::new(&["checkpoint", "time", "outcome", "mean", "stderr", "initial", "z"])?;
    for (k, (t, row)) in mart.times.iter().zip(&mart.means).enumerate() {
        for (i, est) in row.iter().enumerate() {
            mt.row([
                k.to_string(),
                t.to_string(),
                i.to_string(),
                est.mean.to_string(),
                est.stderr.to_string(),
                mart.initial[i].to_string(),
                est.z_score(mart.initial[i]).to_string(),
            ])?;
        }
    }
    let passed = born.pass && mart.max_z < SIGMAS;
    let mut lines: Vec<String> = born
        .outcomes
        .iter()
        .map(|o| format!("outcome {}: f = {:.4} vs Born {:.4} ± {:.4} (3σ)", o.outcome, o.frequency, o.born, 3.0 * o.sigma))
        .collect();
    lines.push(format!(
        "resolved {:.2}% of {} trajectories (≥ 99%); martingale max {:.2}σ at {} checkpoints",
        100.0 * born.resolved_fraction,
        born.trajectories,
        mart.max_z,
        mart.times.len()
    ));
    let summary = json!({
        "experiment": "collapse_born",
        "passed": passed,
        "born": born,
        "martingale_max_z": num(mart.max_z),
    });
    Ok(Report {
        passed,
        lines,
        artifacts: vec![
            Artifact::new("trajectories.csv", traj),
            bt.finish("born.csv")?,
            mt.finish("martingale.csv")?,
            json_artifact("summary.json", &summary),
        ],
    })
}

// Closed-form reference for a diagonal two-level H without dephasing.
fn closed_form(cfg: &CollapseConfig, rho0: &DMatrix<Complex64>, hbar: f64, t: f64) -> Option<DMatrix<Complex64>> {
    let h = &cfg.hamiltonian;
    let diagonal = h.nrows() == 2 && h[(0, 1)].norm() == 0.0 && h[(1, 0)].norm() == 0.0;
    if cfg.mode != Mode::EnergyDriven || cfg.dephasing != 0.0 || !diagonal {
        return None;
    }
    let r01 = closed_form_coherence(rho0[(0, 1)], h[(0, 0)].re, h[(1, 1)].re, cfg.gamma, hbar, t);
    Some(DMatrix::from_row_slice(2, 2, &[rho0[(0, 0)], r01, r01.conj(), rho0[(1, 1)]]))
}

fn collapse_lindblad(r: &Resolved) -> Out {
    let (cfg, psi) = collapse_setup("", r)?;
    let c = &r.config.collapse;
    let ens = run_trajectories(&psi, &cfg, &run_config(r, Kernel::Completed, c.checkpoints.max(2)))?;
    let rho0 = psi.density();
    let mut t = Table::new(&[
        "checkpoint",
        "time",
        "row",
        "col",
        "traj_re",
        "traj_re_stderr",
        "traj_im",
        "traj_im_stderr",
        "master_re",
        "master_im",
        "z",
    ])?;
    let mut worst: f64 = 0.0;
    let mut worst_closed: Option<f64> = None;
    for (k, &time) in ens.checkpoint_times.iter().enumerate().skip(1) {
        let est = ens.mean_density(k);
        let master = lindblad_evolve(&rho0, &cfg, time, c.hbar)?;
        worst = worst.max(est.max_z(&master));
        if let Some(reference) = closed_form(&cfg, &rho0, c.hbar, time) {
            let dev = (&master - &reference).iter().map(|x| x.norm()).fold(0.0, f64::max);
            worst_closed = Some(worst_closed.unwrap_or(0.0).max(dev));
        }
        for i in 0..master.nrows() {
            for j in 0..master.ncols() {
                let m = est.mean[(i, j)];
                let d = m - master[(i, j)];
                let zs = z(d.re, est.stderr_re[(i, j)]).max(z(d.im, est.stderr_im[(i, j)]));
                t.row([
                    k.to_string(),
                    time.to_string(),
                    i.to_string(),
                    j.to_string(),
                    m.re.to_string(),
                    est.stderr_re[(i, j)].to_string(),
                    m.im.to_string(),
                    est.stderr_im[(i, j)].to_string(),
                    master[(i, j)].re.to_string(),
                    master[(i, j)].im.to_string(),
                    zs.to_string(),
                ])?;
            }
        }
    }
    let mut passed = worst <= DENSITY_SIGMAS && worst_closed.is_none_or(|d| d < 1e-9);
    let mut lines = vec![format!(
        "trajectory average vs master equation: max {worst:.2}σ at {} times (≤ {DENSITY_SIGMAS}σ)",
        ens.checkpoint_times.len() - 1
    )];
    if let Some(d) = worst_closed {
        lines.push(format!("master equation vs closed-form coherence decay {d:.1e} (< 1e-9)"));
    }
    let mut artifacts = vec![t.finish("density.csv")?];
    let mut norm = serde_json::Value::Null;
    if c.linear_check {
        let completed = ens.norm_rate();
        let linear = run_trajectories(&psi, &cfg, &run_config(r, Kernel::Linear, 2))?.norm_rate();
        let ok = linear.mean.abs() > 10.0 * completed.mean.abs() && linear.mean != 0.0;
        passed &= ok;
        let mut nt = Table::new(&["kernel", "mean", "stderr"])?;
        for (name, e) in [("completed", completed), ("linear", linear)] {
            nt.row([name.to_string(), e.mean.to_string(), e.stderr.to_string()])?;
        }
        artifacts.push(nt.finish("norm_rate.csv")?);
        lines.push(format!(
            "d‖ψ‖²/dt: linear {:.3e} ± {:.1e}, completed {:.3e} ± {:.1e} (ratio > 10)",
            linear.mean, linear.stderr, completed.mean, completed.stderr
        ));
        norm = json!({"completed": completed, "linear": linear, "pass": ok});
    }
    let summary = json!({
        "experiment": "collapse_lindblad",
        "passed": passed,
        "max_z": num(worst),
        "closed_form_deviation": worst_closed,
        "norm_rate": norm,
    });
    artifacts.push(json_artifact("summary.json", &summary));
    Ok(Report {
        passed,
        lines,
        artifacts,
    })
}

struct BranchDrift {
    rows: Vec<[f64; 5]>,
    max_deviation: f64,
    max_z: f64,
}

fn branch_drift(ens: &TrajectoryEnsemble, projectors: &[DMatrix<Complex64>], initial: &[f64], hbar: f64) -> Result<BranchDrift, RunError> {
    let mut out = BranchDrift {
        rows: Vec::new(),
        max_deviation: 0.0,
        max_z: 0.0,
    };
    for (k, &time) in ens.checkpoint_times.iter().enumerate() {
        for (b, p) in projectors.iter().enumerate() {
            let pops = ens
                .records
                .iter()
                .map(|rec| Ok(StateVector::new(rec.checkpoints[k].clone(), hbar)?.expectation(p).re))
                .collect::<Result<Vec<f64>, Error>>()?;
            let n = pops.len() as f64;
            let m = pops.iter().sum::<f64>() / n;
            let var = if pops.len() > 1 { pops.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let se = (var / n).sqrt();
            let dev = pops.iter().map(|x| (x - initial[b]).abs()).fold(0.0, f64::max);
            out.max_deviation = out.max_deviation.max(dev);
            out.max_z = out.max_z.max(z(m - initial[b], se));
            out.rows.push([k as f64, time, b as f64, m, se]);
        }
    }
    Ok(out)
}

fn degenerate_contrast(r: &Resolved) -> Out {
    let c = &r.config.collapse;
    let levels = c.energies.get_ref();
    let nb = c.branches;
    let d = levels.len() * nb;
    let h = DMatrix::from_fn(d, d, |i, j| Complex64::new(if i == j { levels[i / nb] } else { 0.0 }, 0.0));
    let projectors: Vec<DMatrix<Complex64>> = (0..nb)
        .map(|b| DMatrix::from_fn(d, d, |i, j| Complex64::new(if i == j && i % nb == b { 1.0 } else { 0.0 }, 0.0)))
        .collect();
    let amps = match &c.initial {
        Some(v) if v.get_ref().len() == d => v.get_ref().clone(),
        Some(v) => return Err(bad(format!("collapse.initial has {} amplitudes; degenerate_contrast needs {d}", v.get_ref().len()))),
        None => vec![1.0; d],
    };
    let psi = StateVector::from_real(&amps, c.hbar)?;
    let initial: Vec<f64> = projectors.iter().map(|p| psi.expectation(p).re).collect();
    let run = run_config(r, Kernel::Completed, c.checkpoints);
    let energy = CollapseConfig::energy_driven(h.clone(), c.gamma)?;
    let e_ens = run_trajectories(&psi, &energy, &run)?;
    let e = branch_drift(&e_ens, &projectors, &initial, c.hbar)?;
    let control = CollapseConfig::energy_driven(h.clone(), 0.0)?;
    let ctl = branch_drift(&run_trajectories(&psi, &control, &run)?, &projectors, &initial, c.hbar)?;
    let csl = CollapseConfig::csl(h, projectors.clone(), c.gamma)?;
    let csl_ens = run_trajectories(&psi, &csl, &run)?;
    let s = branch_drift(&csl_ens, &projectors, &initial, c.hbar)?;
    let resolved = csl_ens.resolved_fraction();
    let mut t = Table::new(&["mode", "checkpoint", "time", "branch", "mean", "stderr", "initial"])?;
    for (name, drift) in [("energy_driven", &e), ("control", &ctl), ("csl", &s)] {
        for row in &drift.rows {
            t.row([
                name.to_string(),
                (row[0] as usize).to_string(),
                row[1].to_string(),
                (row[2] as usize).to_string(),
                row[3].to_string(),
                row[4].to_string(),
                initial[row[2] as usize].to_string(),
            ])?;
        }
    }
    let mut traj = Vec::new();
    csl_ens.write_csv(&mut traj)?;
    let passed = e.max_z <= SIGMAS && ctl.max_deviation < 1e-9 && resolved >= 0.99;
    let lines = vec![
        format!(
            "energy-driven branch drift {:.1e} ({:.2}σ), γ = 0 control {:.1e}",
            e.max_deviation, e.max_z, ctl.max_deviation
        ),
        format!("CSL resolved {:.1}% of {} trajectories (≥ 99%)", 100.0 * resolved, csl_ens.records.len()),
    ];
    let summary = json!({
        "experiment": "degenerate_contrast",
        "passed": passed,
        "energy_driven_max_deviation": e.max_deviation,
        "energy_driven_max_z": num(e.max_z),
        "control_max_deviation": ctl.max_deviation,
        "csl_resolved_fraction": resolved,
        "csl_max_deviation": s.max_deviation,
    });
    Ok(Report {
        passed,
        lines,
        artifacts: vec![
            t.finish("branches.csv")?,
            Artifact::new("csl_trajectories.csv", traj),
            json_artifact("summary.json", &summary),
        ],
    })
}

fn noise_bridge(r: &Resolved) -> Out {
    if r.dim % 2 == 1 {
        return Err(bad(format!("noise_bridge needs an even dim, got {}", r.dim)));
    }
    let n = &r.config.noise;
    let mut artifacts = Vec::new();
    let series = match n.source {
        NoiseSource::Ensemble => {
            let (_, set) = sample(r, r.config.seed)?;
            artifacts.extend(sample_artifacts(r, &set, "")?);
            ctilde_series_from_samples(&set)?
        }
        NoiseSource::Dynamics => {
            let d = &r.config.dynamics;
            let mut g = rng(r, 0);
            let s0 = random_state(r, &mut g)?;
            let flow = Flow::new(&r.hamiltonian, &r.roster, &r.registry, r.dim)?;
            let cfg = IntegrationConfig {
                t_final: d.t_final,
                dt: d.dt,
                scheme: d.scheme,
                record_every: d.record_every,
                keep_snapshots: true,
            };
            ctilde_series_from_trajectory(&integrate(&flow, &s0, &cfg)?)?
        }
    };
    let b = ctilde_noise_bridge(&series, n.hbar, n.lags)?;
    let mut t = Table::new(&["index", "k_re", "k_im", "n_norm"])?;
    for (k, ((a, bb), c)) in b.k_re.iter().zip(&b.k_im).zip(&b.n_norm).enumerate() {
        t.row([k.to_string(), a.to_string(), bb.to_string(), c.to_string()])?;
    }
    let lines = vec![format!(
        "ħ = {:.5}; Var K {:.3e}, ⟨‖𝒩‖²⟩ {:.3e}, τ_int(Re K) {:.1}, Ljung–Box Q = {:.2} (p = {:.3}, {} lags) over {} entries",
        b.hbar,
        b.k_variance,
        b.n_mean_square,
        b.k_autocorrelation_time,
        b.ljung_box_q,
        b.ljung_box_p,
        b.lags,
        series.len()
    )];
    let summary = json!({
        "experiment": "noise_bridge",
        "passed": true,
        "source": n.source,
        "entries": series.len(),
        "hbar": b.hbar,
        "k_variance": b.k_variance,
        "n_mean_square": b.n_mean_square,
        "k_autocorrelation_time": num(b.k_autocorrelation_time),
        "ljung_box_q": num(b.ljung_box_q),
        "ljung_box_p": num(b.ljung_box_p),
        "lags": b.lags,
    });
    artifacts.insert(0, t.finish("noise.csv")?);
    artifacts.insert(1, json_artifact("summary.json", &summary));
    Ok(Report {
        passed: true,
        lines,
        artifacts,
    })
}
