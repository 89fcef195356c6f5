//! Canonical ensemble `ρ ∝ exp −[λ̂ Tr(i_eff C̃) + τ H + η N]`: Metropolis
//! sampling of the bosonic sector, exact Berezin averages for a tiny fermionic
//! sector, global unitary fixing and the Ward-identity decomposition.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{charge_ctilde, charge_n, ctilde_polynomial, n_polynomial};
use crate::error::{Error, Result};
use crate::grassmann::GrassmannElement;
use crate::matrix::{eff_project, i_eff, random_hermitian, Kind, MatrixValue, Parity, PhaseState, Roster};
use crate::parallel::{try_map_indexed, Execution};
use crate::stats::{pooled_estimate, Estimate};
use crate::trace::{
    trace_derivative, trace_derivative_where, trace_eval, Compiled, DerivativeConvention, Letter, MatrixPolynomial,
    Registry, TracePolynomial, TraceWord,
};

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleParams {
    pub tau: f64,
    pub eta: f64,
    pub lambda_hat: f64,
    pub dim: usize,
    pub roster: Arc<Roster>,
}

impl EnsembleParams {
    pub fn new(tau: f64, eta: f64, lambda_hat: f64, dim: usize, roster: Arc<Roster>) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() || !eta.is_finite() || !lambda_hat.is_finite() {
            return Err(Error::Config(format!(
                "ensemble parameters must be finite with tau ≥ 0 (tau = {tau}, eta = {eta}, lambda_hat = {lambda_hat})"
            )));
        }
        if tau == 0.0 && lambda_hat == 0.0 {
            return Err(Error::Config("tau and lambda_hat cannot both vanish".into()));
        }
        if lambda_hat != 0.0 && !dim.is_multiple_of(2) {
            return Err(Error::OddDimension(dim));
        }
        Ok(EnsembleParams {
            tau,
            eta,
            lambda_hat,
            dim,
            roster,
        })
    }
}

/// Hamiltonian and parameters compiled for repeated weight evaluation.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub params: EnsembleParams,
    pub hamiltonian: TracePolynomial,
    h: Compiled,
    ieff: Option<MatrixValue>,
}

fn real_part(z: Complex64, what: &str) -> Result<f64> {
    if z.im.abs() > 1e-10 * z.norm().max(1.0) {
        return Err(Error::Consistency(format!("{what} has imaginary part {:.3e}", z.im)));
    }
    Ok(z.re)
}

impl Ensemble {
    pub fn new(hamiltonian: &TracePolynomial, params: EnsembleParams, reg: &Registry) -> Result<Self> {
        let h = Compiled::new(hamiltonian.words(), &params.roster, reg, params.dim)?;
        let ieff = if params.dim.is_multiple_of(2) { Some(i_eff(params.dim)?) } else { None };
        Ok(Ensemble {
            params,
            hamiltonian: hamiltonian.clone(),
            h,
            ieff,
        })
    }

    /// `Tr(i_eff C̃)`, real for anti-self-adjoint `C̃`.
    pub fn ctilde_term(&self, s: &PhaseState) -> Result<f64> {
        let ieff = self.ieff.as_ref().ok_or(Error::OddDimension(self.params.dim))?;
        real_part(ieff.try_mul(&charge_ctilde(s)?)?.trace().body(), "Tr(i_eff C̃)")
    }

    /// `−[λ̂ Tr(i_eff C̃) + τ H + η Re N]` for a bosonic (complex) state.
    pub fn log_weight(&self, s: &PhaseState) -> Result<f64> {
        if s.generators() != 0 {
            return Err(Error::Roster("log_weight needs a state without Grassmann generators".into()));
        }
        let p = &self.params;
        let mut total = 0.0;
        if p.lambda_hat != 0.0 {
            total += p.lambda_hat * self.ctilde_term(s)?;
        }
        if p.tau != 0.0 {
            total += p.tau * real_part(self.h.eval_trace(s)?.body(), "H")?;
        }
        if p.eta != 0.0 {
            total += p.eta * charge_n(s)?.body().re;
        }
        Ok(-total)
    }
}

pub fn log_weight(s: &PhaseState, h: &TracePolynomial, params: &EnsembleParams, reg: &Registry) -> Result<f64> {
    Ensemble::new(h, params.clone(), reg)?.log_weight(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Total recorded samples over all chains.
    pub n_samples: usize,
    /// Tuning steps per chain before recording starts.
    pub burn_in: usize,
    /// Initial proposal width per real coordinate.
    pub step_scale: f64,
    pub seed: u64,
    pub chains: usize,
    /// Metropolis steps between recorded samples.
    pub thin: usize,
    pub execution: Execution,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_samples: 10_000,
            burn_in: 2_000,
            step_scale: 0.5,
            seed: 0,
            chains: 4,
            thin: 1,
            execution: Execution::Parallel,
        }
    }
}

/// Target acceptance rate of the burn-in step-size tuning.
pub const TARGET_ACCEPTANCE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub chain: usize,
    pub acceptance: f64,
    pub step_scale: f64,
    /// Integrated autocorrelation time of the log weight, in recorded samples.
    pub tau_log_weight: f64,
}

#[derive(Clone, Debug)]
pub struct SampleSet {
    pub chains: Vec<Vec<PhaseState>>,
    pub diagnostics: Vec<ChainDiagnostics>,
    pub warnings: Vec<String>,
    pub seed: u64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &PhaseState> {
        self.chains.iter().flatten()
    }

    /// Applies `f` to every sample, keeping the chain structure.
    pub fn map(&self, f: impl Fn(&PhaseState) -> Result<PhaseState>) -> Result<Self> {
        let chains = self
            .chains
            .iter()
            .map(|c| c.iter().map(&f).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleSet {
            chains,
            diagnostics: self.diagnostics.clone(),
            warnings: self.warnings.clone(),
            seed: self.seed,
        })
    }

    /// Samples as JSON lines, one state per line, chains in order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in self.iter() {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_diagnostics<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            seed: u64,
            samples: usize,
            chains: &'a [ChainDiagnostics],
            warnings: &'a [String],
        }
        serde_json::to_writer_pretty(
            out,
            &Sidecar {
                seed: self.seed,
                samples: self.len(),
                chains: &self.diagnostics,
                warnings: &self.warnings,
            },
        )?;
        Ok(())
    }
}

fn propose<R: Rng + ?Sized>(s: &PhaseState, sigma: f64, rng: &mut R) -> Result<PhaseState> {
    let mut out = s.clone();
    let one = Complex64::new(1.0, 0.0);
    for label in s.roster().vars().iter().map(|v| v.label.clone()) {
        for kind in [Kind::Q, Kind::P] {
            let x = out.get(&label, kind)?.try_axpy(one, &random_hermitian(s.dim(), sigma, rng))?;
            out.set(&label, kind, x)?;
        }
    }
    Ok(out)
}

fn run_chain(ens: &Ensemble, cfg: &McmcConfig, chain: usize, n_record: usize) -> Result<(Vec<PhaseState>, ChainDiagnostics, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let p = &ens.params;
    let values = (0..p.roster.len())
        .map(|_| (MatrixValue::zeros(p.dim, 0), MatrixValue::zeros(p.dim, 0)))
        .collect();
    let mut s = PhaseState::new(p.roster.clone(), p.dim, 0, values)?;
    let mut lw = ens.log_weight(&s)?;
    let mut sigma = cfg.step_scale;
    let mut window_accepts = 0usize;
    const WINDOW: usize = 50;
    for n in 1..=cfg.burn_in {
        let t = propose(&s, sigma, &mut rng)?;
        let lt = ens.log_weight(&t)?;
        if (lt - lw).exp() > rng.random::<f64>() {
            s = t;
            lw = lt;
            window_accepts += 1;
        }
        if n % WINDOW == 0 {
            let rate = window_accepts as f64 / WINDOW as f64;
            sigma = (sigma * (2.0 * (rate - TARGET_ACCEPTANCE)).exp()).min(1e3);
            window_accepts = 0;
        }
    }
    let thin = cfg.thin.max(1);
    let mut samples = Vec::with_capacity(n_record);
    let mut lws = Vec::with_capacity(n_record);
    let mut accepted = 0usize;
    for _ in 0..n_record {
        for _ in 0..thin {
            let t = propose(&s, sigma, &mut rng)?;
            let lt = ens.log_weight(&t)?;
            if (lt - lw).exp() > rng.random::<f64>() {
                s = t;
                lw = lt;
                accepted += 1;
            }
        }
        samples.push(s.clone());
        lws.push(lw);
    }
    let acceptance = accepted as f64 / (n_record * thin).max(1) as f64;
    let mut warnings = Vec::new();
    if !(0.1..=0.9).contains(&acceptance) {
        warnings.push(format!(
            "chain {chain}: acceptance {acceptance:.3} outside [0.1, 0.9] (step scale {sigma:.3e})"
        ));
    }
    let tau_log_weight = crate::stats::integrated_autocorrelation(&lws);
    Ok((
        samples,
        ChainDiagnostics {
            chain,
            acceptance,
            step_scale: sigma,
            tau_log_weight,
        },
        warnings,
    ))
}

/// Random-walk Metropolis over the real coordinates of the self-adjoint
/// bosonic matrices. Chain `c` draws from the ChaCha8 stream `c` of `seed`,
/// so results do not depend on the execution mode.
pub fn mcmc_sample(ens: &Ensemble, cfg: &McmcConfig) -> Result<SampleSet> {
    if !ens.params.roster.is_bosonic_only() {
        return Err(Error::Roster(
            "Metropolis sampling covers bosonic rosters; use berezin_average for fermions".into(),
        ));
    }
    if !(cfg.step_scale >= 0.0) || !cfg.step_scale.is_finite() {
        return Err(Error::Config(format!("step_scale must be finite and ≥ 0, got {}", cfg.step_scale)));
    }
    let chains = cfg.chains.max(1);
    let per = |c: usize| cfg.n_samples / chains + usize::from(c < cfg.n_samples % chains);
    let runs = try_map_indexed(cfg.execution, chains, |c| run_chain(ens, cfg, c, per(c)))?;
    let mut set = SampleSet {
        chains: Vec::with_capacity(chains),
        diagnostics: Vec::with_capacity(chains),
        warnings: Vec::new(),
        seed: cfg.seed,
    };
    for (samples, diag, warnings) in runs {
        set.chains.push(samples);
        set.diagnostics.push(diag);
        set.warnings.extend(warnings);
    }
    Ok(set)
}

/// Mean of a real observable with an autocorrelation-corrected error,
/// pooled over chains.
pub fn average_by(samples: &SampleSet, f: impl Fn(&PhaseState) -> Result<f64>) -> Result<Estimate> {
    let series = samples
        .chains
        .iter()
        .map(|c| c.iter().map(&f).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    pooled_estimate(&series)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexEstimate {
    pub re: Estimate,
    pub im: Estimate,
}

/// Ensemble average of a trace polynomial.
pub fn ensemble_average(p: &TracePolynomial, samples: &SampleSet, reg: &Registry) -> Result<ComplexEstimate> {
    let first = samples.iter().next().ok_or(Error::EmptySamples)?;
    let compiled = Compiled::new(p.words(), first.roster(), reg, first.dim())?;
    let values = samples
        .chains
        .iter()
        .map(|c| c.iter().map(|s| Ok(compiled.eval_trace(s)?.body())).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    complex_estimate(&values)
}

fn complex_estimate(series: &[Vec<Complex64>]) -> Result<ComplexEstimate> {
    let re: Vec<Vec<f64>> = series.iter().map(|c| c.iter().map(|z| z.re).collect()).collect();
    let im: Vec<Vec<f64>> = series.iter().map(|c| c.iter().map(|z| z.im).collect()).collect();
    Ok(ComplexEstimate {
        re: pooled_estimate(&re)?,
        im: pooled_estimate(&im)?,
    })
}

/// Entrywise estimates of a matrix observable (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub dim: usize,
    pub entries: Vec<ComplexEstimate>,
}

impl MatrixEstimate {
    pub fn mean(&self) -> MatrixValue {
        let v: Vec<Complex64> = self.entries.iter().map(|e| Complex64::new(e.re.mean, e.im.mean)).collect();
        MatrixValue::from_rows(self.dim, &v)
    }

    pub fn entry(&self, i: usize, j: usize) -> &ComplexEstimate {
        &self.entries[i * self.dim + j]
    }

    /// Largest number of standard errors by which any real or imaginary part
    /// differs from the matching entry of `target`.
    pub fn max_z(&self, target: &MatrixValue) -> f64 {
        self.entries
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let t = target.body_entry(k / self.dim, k % self.dim);
                e.re.z_score(t.re).max(e.im.z_score(t.im))
            })
            .fold(0.0, f64::max)
    }

    pub fn max_z_from_zero(&self) -> f64 {
        self.max_z(&MatrixValue::zeros(self.dim, 0))
    }
}

/// Entrywise average of a matrix-valued observable.
pub fn average_matrix(samples: &SampleSet, f: impl Fn(&PhaseState) -> Result<MatrixValue>) -> Result<MatrixEstimate> {
    let first = samples.iter().next().ok_or(Error::EmptySamples)?;
    let n = first.dim();
    let mut series: Vec<Vec<Vec<Complex64>>> = vec![Vec::with_capacity(samples.chains.len()); n * n];
    for chain in &samples.chains {
        let mut per_entry: Vec<Vec<Complex64>> = vec![Vec::with_capacity(chain.len()); n * n];
        for s in chain {
            let m = f(s)?;
            for (k, e) in per_entry.iter_mut().enumerate() {
                e.push(m.body_entry(k / n, k % n));
            }
        }
        for (k, e) in per_entry.into_iter().enumerate() {
            series[k].push(e);
        }
    }
    Ok(MatrixEstimate {
        dim: n,
        entries: series.iter().map(|s| complex_estimate(s)).collect::<Result<_>>()?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subgroup {
    /// All unitaries.
    #[default]
    Full,
    /// Unitaries commuting with `i_eff` (block diagonal).
    Eff,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseRule {
    /// First nonzero component of each eigenvector made positive real.
    EigenvectorFirstComponent,
    /// Row 0 of the designated `p` made real and nonnegative, which fixes the
    /// residual diagonal phases up to an irrelevant global phase.
    #[default]
    SecondVariableRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixConvention {
    /// Bosonic label whose `q` is diagonalized; the first bosonic label when
    /// absent.
    pub label: Option<String>,
    pub subgroup: Subgroup,
    pub phase: PhaseRule,
}

impl Default for FixConvention {
    fn default() -> Self {
        FixConvention {
            label: None,
            subgroup: Subgroup::Full,
            phase: PhaseRule::SecondVariableRow,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixed {
    pub state: PhaseState,
    pub unitary: MatrixValue,
    /// Degenerate eigenvalues of the designated `q` were tie-broken with the
    /// designated `p`.
    pub degenerate: bool,
}

type CMat = DMatrix<Complex64>;

// Ascending eigen-decomposition of a Hermitian matrix; degenerate clusters
// are rotated to diagonalize `tie` within the cluster.
fn ordered_eigenvectors(m: &CMat, tie: &CMat, degenerate: &mut bool) -> CMat {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut v = CMat::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    let scale = vals.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && vals[end] - vals[end - 1] <= 1e-9 * scale {
            end += 1;
        }
        if end - start > 1 {
            *degenerate = true;
            let block = v.columns(start, end - start).into_owned();
            let reduced = block.adjoint() * tie * &block;
            let sub = ordered_eigenvectors(&reduced, &CMat::zeros(end - start, end - start), &mut false);
            let rotated = block * sub;
            v.columns_mut(start, end - start).copy_from(&rotated);
        }
        start = end;
    }
    v
}

/// Conjugates the state by the unitary that diagonalizes the designated `q`
/// with ascending eigenvalues, then fixes the residual phases.
pub fn unitary_fix(s: &PhaseState, conv: &FixConvention) -> Result<Fixed> {
    let label = match &conv.label {
        Some(l) => l.clone(),
        None => s
            .roster()
            .vars()
            .iter()
            .find(|v| v.parity == Parity::Bosonic)
            .map(|v| v.label.clone())
            .ok_or_else(|| Error::Roster("unitary fixing needs a bosonic variable".into()))?,
    };
    if s.roster().parity_of(&label) != Some(Parity::Bosonic) {
        return Err(Error::Roster(format!("`{label}` is not a bosonic variable")));
    }
    if s.generators() != 0 {
        return Err(Error::Roster("unitary fixing acts on complex (bosonic) states".into()));
    }
    let n = s.dim();
    let q = s.get(&label, Kind::Q)?.to_dmatrix();
    let p = s.get(&label, Kind::P)?.to_dmatrix();
    let mut degenerate = false;
    let mut v = match conv.subgroup {
        Subgroup::Full => ordered_eigenvectors(&q, &p, &mut degenerate),
        Subgroup::Eff => {
            if !n.is_multiple_of(2) {
                return Err(Error::OddDimension(n));
            }
            let h = n / 2;
            let mut v = CMat::zeros(n, n);
            for b in [0, h] {
                let qb = q.view((b, b), (h, h)).into_owned();
                let pb = p.view((b, b), (h, h)).into_owned();
                v.view_mut((b, b), (h, h)).copy_from(&ordered_eigenvectors(&qb, &pb, &mut degenerate));
            }
            v
        }
    };
    match conv.phase {
        PhaseRule::EigenvectorFirstComponent => {
            for j in 0..n {
                if let Some(k) = (0..n).find(|&i| v[(i, j)].norm() > 1e-12) {
                    let ph = v[(k, j)].conj() / v[(k, j)].norm();
                    for i in 0..n {
                        v[(i, j)] *= ph;
                    }
                }
            }
        }
        PhaseRule::SecondVariableRow => {
            let pp = v.adjoint() * &p * &v;
            for j in 1..n {
                let z = pp[(0, j)];
                if z.norm() > 1e-12 {
                    let ph = z.conj() / z.norm();
                    for i in 0..n {
                        v[(i, j)] *= ph;
                    }
                } else {
                    degenerate = true;
                }
            }
        }
    }
    let u = MatrixValue::from_dmatrix(&v);
    Ok(Fixed {
        state: s.apply_unitary(&u)?,
        unitary: u,
        degenerate,
    })
}

/// Per-sample Ward contributions for `A = Tr(C̃ {i_eff, W})` and a bosonic
/// variable `x`:
/// 1. `−λ̂ A δTr(i_eff C̃)/δx`, 2. `−τ A δH/δx`, 3. `−η A δN/δx`,
/// 4. `δA/δx` through the `C̃` letters, 5. `δA/δx` through the `W` letters.
#[derive(Clone, Debug)]
pub struct WardIdentity {
    a: Compiled,
    d_lambda: Compiled,
    d_h: Compiled,
    d_n: Compiled,
    d_ctilde: Compiled,
    d_w: Compiled,
    lambda_hat: f64,
    tau: f64,
    eta: f64,
}

/// Names of the five Ward contributions, in order.
pub const WARD_TERMS: [&str; 5] = ["lambda_ctilde", "tau_h", "eta_n", "delta_ctilde", "delta_w"];

/// `A = Tr(C̃ i_eff W) + Tr(C̃ W i_eff)` with the `C̃` letters first and the
/// number of leading `C̃` letters in every word.
pub fn ward_observable(w: &MatrixPolynomial, roster: &Roster) -> Result<TracePolynomial> {
    let ct = ctilde_polynomial(roster);
    let ieff = MatrixPolynomial::letter(Letter::constant("ieff"));
    let prod = ct.mul(&ieff.mul(w).add(&w.mul(&ieff)));
    let words = prod
        .words()
        .iter()
        .filter(|w| w.coeff != Complex64::new(0.0, 0.0))
        .cloned()
        .collect::<Vec<TraceWord>>();
    TracePolynomial::new(words)
}

impl WardIdentity {
    pub fn new(
        w: &MatrixPolynomial,
        x: (&str, Kind),
        h: &TracePolynomial,
        params: &EnsembleParams,
        reg: &Registry,
    ) -> Result<Self> {
        let roster = &params.roster;
        if roster.parity_of(x.0) != Some(Parity::Bosonic) {
            return Err(Error::Roster(format!("Ward terms are sampled for bosonic variables, not `{}`", x.0)));
        }
        let dim = params.dim;
        let a = ward_observable(w, roster)?;
        let lam = ctilde_polynomial(roster)
            .mul(&MatrixPolynomial::letter(Letter::constant("ieff")))
            .trace();
        let compile = |p: &MatrixPolynomial| Compiled::new(p.words(), roster, reg, dim);
        let conv = DerivativeConvention::default();
        // every word of A starts with the two letters of one C̃ term
        let d_ctilde = trace_derivative_where(&a, x, roster, conv, |_, pos| pos < 2)?;
        let d_w = trace_derivative_where(&a, x, roster, conv, |_, pos| pos >= 2)?;
        Ok(WardIdentity {
            a: Compiled::new(a.words(), roster, reg, dim)?,
            d_lambda: compile(&trace_derivative(&lam, x, roster)?)?,
            d_h: compile(&trace_derivative(h, x, roster)?)?,
            d_n: compile(&trace_derivative(&n_polynomial(roster), x, roster)?)?,
            d_ctilde: compile(&d_ctilde)?,
            d_w: compile(&d_w)?,
            lambda_hat: params.lambda_hat,
            tau: params.tau,
            eta: params.eta,
        })
    }

    /// The five contributions at one state.
    pub fn terms(&self, s: &PhaseState) -> Result<[MatrixValue; 5]> {
        let a = self.a.eval_trace(s)?.body();
        let weighted = |c: &Compiled, k: f64| -> Result<MatrixValue> {
            if k == 0.0 {
                return Ok(MatrixValue::zeros(s.dim(), s.generators()));
            }
            Ok(c.eval_matrix(s)?.scale(-a * k))
        };
        Ok([
            weighted(&self.d_lambda, self.lambda_hat)?,
            weighted(&self.d_h, self.tau)?,
            weighted(&self.d_n, self.eta)?,
            self.d_ctilde.eval_matrix(s)?,
            self.d_w.eval_matrix(s)?,
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WardReport {
    pub terms: Vec<MatrixEstimate>,
    pub total: MatrixEstimate,
}

impl WardReport {
    /// Largest deviation of the total from zero, in standard errors.
    pub fn max_z(&self) -> f64 {
        self.total.max_z_from_zero()
    }

    /// Frobenius norm of each averaged term, in `WARD_TERMS` order.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.mean().norm()).collect()
    }

    /// Rows `term,row,col,re,re_stderr,im,im_stderr`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["term", "row", "col", "re", "re_stderr", "im", "im_stderr"])?;
        let named = WARD_TERMS.iter().copied().zip(&self.terms).chain(std::iter::once(("total", &self.total)));
        for (name, est) in named {
            for (k, e) in est.entries.iter().enumerate() {
                w.write_record([
                    name.to_string(),
                    (k / est.dim).to_string(),
                    (k % est.dim).to_string(),
                    e.re.mean.to_string(),
                    e.re.stderr.to_string(),
                    e.im.mean.to_string(),
                    e.im.stderr.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Monte Carlo estimates of the five Ward contributions and their total;
/// the total vanishes exactly in the ensemble average.
pub fn ward_terms(
    w: &MatrixPolynomial,
    x: (&str, Kind),
    h: &TracePolynomial,
    params: &EnsembleParams,
    samples: &SampleSet,
    reg: &Registry,
) -> Result<WardReport> {
    let ward = WardIdentity::new(w, x, h, params, reg)?;
    let mut terms = Vec::with_capacity(5);
    for k in 0..5 {
        terms.push(average_matrix(samples, |s| Ok(ward.terms(s)?[k].clone()))?);
    }
    let total = average_matrix(samples, |s| {
        let t = ward.terms(s)?;
        let mut acc = MatrixValue::zeros(s.dim(), 0);
        for m in &t {
            acc = acc.try_add(m)?;
        }
        Ok(acc)
    })?;
    Ok(WardReport { terms, total })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HbarReport {
    /// `−Re Tr(i_eff ⟨C̃⟩)/N`, signed.
    pub hbar: Estimate,
    /// `Re(⟨C̃⟩_ii / i_eff_ii)` for each diagonal entry.
    pub diagonal: Vec<f64>,
    /// `max_i |diagonal_i − ħ|`.
    pub anisotropy: f64,
    pub mean_ctilde: MatrixEstimate,
}

/// Effective Planck constant from `⟨C̃⟩ ≈ i_eff ħ`.
pub fn effective_hbar(samples: &SampleSet) -> Result<HbarReport> {
    let first = samples.iter().next().ok_or(Error::EmptySamples)?;
    let n = first.dim();
    let ieff = i_eff(n)?;
    let hbar = average_by(samples, |s| {
        Ok(-ieff.try_mul(&charge_ctilde(s)?)?.trace().body().re / n as f64)
    })?;
    let mean_ctilde = average_matrix(samples, charge_ctilde)?;
    let mean = mean_ctilde.mean();
    let diagonal: Vec<f64> = (0..n)
        .map(|i| (mean.body_entry(i, i) / ieff.body_entry(i, i)).re)
        .collect();
    let anisotropy = diagonal.iter().map(|d| (d - hbar.mean).abs()).fold(0.0, f64::max);
    Ok(HbarReport {
        hbar,
        diagonal,
        anisotropy,
        mean_ctilde,
    })
}

/// Estimate of `i_eff [W_eff, x_eff] ∓ ħ δTr W/δx′` evaluated on the
/// effective projection of each sample, where `x′` is the conjugate of `x`.
/// The sign is `−` for a bosonic `q` and `+` otherwise.
pub fn emergent_commutator_residual(
    w: &MatrixPolynomial,
    x: (&str, Kind),
    samples: &SampleSet,
    hbar: f64,
    reg: &Registry,
) -> Result<MatrixEstimate> {
    let first = samples.iter().next().ok_or(Error::EmptySamples)?;
    let roster = first.roster().clone();
    let dim = first.dim();
    let ieff = i_eff(dim)?;
    let conj_kind = match x.1 {
        Kind::Q => Kind::P,
        Kind::P => Kind::Q,
    };
    let parity = roster.parity_of(x.0).ok_or_else(|| Error::UnknownLabel(x.0.to_string()))?;
    let sign = if parity == Parity::Bosonic && x.1 == Kind::Q { -1.0 } else { 1.0 };
    let wc = Compiled::new(w.words(), &roster, reg, dim)?;
    let dw = trace_derivative(&w.trace(), (x.0, conj_kind), &roster)?;
    let dwc = Compiled::new(dw.words(), &roster, reg, dim)?;
    average_matrix(samples, |s| {
        let e = s.map_values(eff_project)?;
        let xe = e.get(x.0, x.1)?;
        let comm = ieff.try_mul(&eff_project(&wc.eval_matrix(&e)?)?.commutator(xe)?)?;
        let deriv = eff_project(&dwc.eval_matrix(&e)?)?;
        comm.try_axpy(Complex64::new(sign * hbar, 0.0), &deriv)
    })
}

/// Exact ensemble average `∫dμ ρ A / ∫dμ ρ` over a fermionic roster whose
/// matrix entries are independent Grassmann generators: `q_ab` is generator
/// `2k` and `p = q†` takes the partner generators, with `k` running over the
/// entries of every fermionic `q`. Needs `2 N² F ≤ 16` generators.
pub fn berezin_average(
    observable: &TracePolynomial,
    h: &TracePolynomial,
    params: &EnsembleParams,
    reg: &Registry,
) -> Result<Complex64> {
    let roster = &params.roster;
    if !roster.vars().iter().all(|v| v.parity == Parity::Fermionic) {
        return Err(Error::Roster("exact Berezin averages take a purely fermionic roster".into()));
    }
    let n = params.dim;
    let generators = 2 * n * n * roster.len();
    if generators > 16 {
        return Err(Error::Config(format!("{generators} generators exceed the exact-integration budget of 16")));
    }
    let g = generators as u32;
    let mut values = Vec::with_capacity(roster.len());
    for (r, _) in roster.vars().iter().enumerate() {
        let mut entries = Vec::with_capacity(n * n);
        for k in 0..n * n {
            entries.push(GrassmannElement::generator(g, 2 * (r * n * n + k))?);
        }
        let q = MatrixValue::from_entries(n, g, &entries)?;
        let p = q.adjoint();
        values.push((q, p));
    }
    let s = PhaseState::new(roster.clone(), n, g, values)?;
    let mut exponent = GrassmannElement::zero(g);
    if params.lambda_hat != 0.0 {
        let lam = i_eff(n)?.try_mul(&charge_ctilde(&s)?)?.trace();
        exponent = exponent.try_add(&lam.scale(Complex64::new(params.lambda_hat, 0.0)))?;
    }
    if params.tau != 0.0 {
        exponent = exponent.try_add(&trace_eval(h, &s, reg)?.scale(Complex64::new(params.tau, 0.0)))?;
    }
    if params.eta != 0.0 {
        exponent = exponent.try_add(&charge_n(&s)?.scale(Complex64::new(params.eta, 0.0)))?;
    }
    let rho = exponent.scale(Complex64::new(-1.0, 0.0)).exp();
    let all: Vec<usize> = (0..generators).collect();
    let z = rho.berezin_integrate(&all)?.body();
    if z.norm() < 1e-12 {
        return Err(Error::Consistency("Berezin normalization vanishes".into()));
    }
    let a = trace_eval(observable, &s, reg)?;
    let num = rho.try_mul(&a)?.berezin_integrate(&all)?.body();
    Ok(num / z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{random_unitary, VariableSpec};

    const I: Complex64 = Complex64::new(0.0, 1.0);

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn tr(text: &str) -> TracePolynomial {
        TracePolynomial::parse(text).unwrap()
    }

    fn one_boson() -> Arc<Roster> {
        Arc::new(Roster::bosonic(&["1"]).unwrap())
    }

    fn gaussian(tau: f64, dim: usize) -> Ensemble {
        let params = EnsembleParams::new(tau, 0.0, 0.0, dim, one_boson()).unwrap();
        Ensemble::new(&tr("tr(p1 p1) + tr(q1 q1)"), params, &Registry::new()).unwrap()
    }

    #[test]
    fn params_validation() {
        let r = one_boson();
        assert!(matches!(EnsembleParams::new(1.0, 0.0, 1.0, 3, r.clone()), Err(Error::OddDimension(3))));
        assert!(EnsembleParams::new(0.0, 0.0, 0.0, 2, r.clone()).is_err());
        assert!(EnsembleParams::new(-1.0, 0.0, 1.0, 2, r.clone()).is_err());
        assert!(EnsembleParams::new(1.0, 0.0, 0.0, 3, r).is_ok());
    }

    #[test]
    fn log_weight_examples() {
        let roster = one_boson();
        let reg = Registry::new();
        let h = tr("tr(p1 p1) + tr(q1 q1)");
        let sx = MatrixValue::from_real_rows(2, &[0.0, 1.0, 1.0, 0.0]);
        let cval = 0.7;
        let sy = MatrixValue::from_rows(2, &[c(0.0), -I, I, c(0.0)]).scale(c(cval / 2.0));
        let s = PhaseState::new(roster.clone(), 2, 0, vec![(sx, sy)]).unwrap();
        // C̃ = [σx, (c/2)σy] = c·i_eff, so Tr(i_eff C̃) = −2c
        let ct = charge_ctilde(&s).unwrap();
        assert!(ct.try_sub(&i_eff(2).unwrap().scale(c(cval))).unwrap().norm() < 1e-15);
        let params = EnsembleParams::new(0.0, 0.0, 1.0, 2, roster.clone()).unwrap();
        assert!((log_weight(&s, &h, &params, &reg).unwrap() - 2.0 * cval).abs() < 1e-14);

        let params = EnsembleParams::new(1.0, 0.0, 0.0, 2, roster).unwrap();
        let hv = trace_eval(&h, &s, &reg).unwrap().body().re;
        assert!(hv > 0.0);
        assert_eq!(log_weight(&s, &h, &params, &reg).unwrap(), -hv);
    }

    #[test]
    fn log_weight_rejects_complex_hamiltonian() {
        let roster = one_boson();
        let params = EnsembleParams::new(1.0, 0.0, 0.0, 2, roster.clone()).unwrap();
        let s = PhaseState::random(roster, 2, 0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let err = log_weight(&s, &tr("(0+1i) * tr(q1 q1)"), &params, &Registry::new());
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn log_weight_invariant_under_eff_unitaries() {
        let roster = Arc::new(Roster::bosonic(&["1", "2"]).unwrap());
        let reg = Registry::new();
        let h = tr("tr(p1 p1) + tr(p2 p2) + tr(q1 q1 q2 q2)");
        let params = EnsembleParams::new(0.7, 0.0, 1.3, 4, roster.clone()).unwrap();
        let ens = Ensemble::new(&h, params, &reg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let s = PhaseState::random(roster.clone(), 4, 0, 1.0, &mut rng).unwrap();
            let (u1, u2) = (random_unitary(2, &mut rng), random_unitary(2, &mut rng));
            let mut u = MatrixValue::zeros(4, 0);
            for i in 0..2 {
                for j in 0..2 {
                    u.raw_mut()[i * 4 + j] = u1.body_entry(i, j);
                    u.raw_mut()[(i + 2) * 4 + j + 2] = u2.body_entry(i, j);
                }
            }
            let a = ens.log_weight(&s).unwrap();
            let b = ens.log_weight(&s.apply_unitary(&u).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn gaussian_equipartition() {
        let tau = 1.5;
        let ens = gaussian(tau, 2);
        let cfg = McmcConfig {
            n_samples: 40_000,
            seed: 3,
            ..Default::default()
        };
        let set = mcmc_sample(&ens, &cfg).unwrap();
        assert_eq!(set.len(), 40_000);
        assert!(set.warnings.is_empty(), "{:?}", set.warnings);
        let est = ensemble_average(&tr("tr(q1 q1)"), &set, &Registry::new()).unwrap();
        assert!(est.re.within(4.0 / (2.0 * tau), 3.0), "{est:?}");
        // odd observable averages to zero
        let odd = ensemble_average(&tr("tr(q1)"), &set, &Registry::new()).unwrap();
        assert!(odd.re.within(0.0, 3.0), "{odd:?}");
        let one = ensemble_average(&tr("0.5 * tr(1)"), &set, &Registry::new()).unwrap();
        assert_eq!((one.re.mean, one.re.stderr), (1.0, 0.0));
    }

    #[test]
    fn zero_step_chain_is_frozen() {
        let ens = gaussian(1.0, 2);
        let cfg = McmcConfig {
            n_samples: 50,
            burn_in: 100,
            step_scale: 0.0,
            chains: 1,
            ..Default::default()
        };
        let set = mcmc_sample(&ens, &cfg).unwrap();
        let first = set.chains[0][0].clone();
        assert!(set.iter().all(|s| *s == first));
        assert!(!set.warnings.is_empty());
    }

    #[test]
    fn chains_are_reproducible_across_execution_modes() {
        let ens = gaussian(1.0, 2);
        let mut cfg = McmcConfig {
            n_samples: 400,
            burn_in: 200,
            seed: 9,
            ..Default::default()
        };
        let a = mcmc_sample(&ens, &cfg).unwrap();
        cfg.execution = Execution::Sequential;
        let b = mcmc_sample(&ens, &cfg).unwrap();
        assert_eq!(a.chains, b.chains);
    }

    #[test]
    fn seeds_give_compatible_means() {
        let ens = gaussian(2.0, 2);
        let reg = Registry::new();
        let run = |seed| {
            let cfg = McmcConfig {
                n_samples: 20_000,
                seed,
                ..Default::default()
            };
            ensemble_average(&tr("tr(p1 p1 q1 q1)"), &mcmc_sample(&ens, &cfg).unwrap(), &reg).unwrap().re
        };
        let (a, b) = (run(1), run(2));
        let z = (a.mean - b.mean).abs() / (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!(z < 3.0, "{a:?} {b:?}");
    }

    #[test]
    fn fixing_examples() {
        let roster = Arc::new(Roster::bosonic(&["1", "2"]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = PhaseState::random(roster, 4, 0, 1.0, &mut rng).unwrap();
        let conv = FixConvention::default();
        let fixed = unitary_fix(&s, &conv).unwrap();
        assert!(!fixed.degenerate);
        let q = fixed.state.get("1", Kind::Q).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(q.body_entry(i, j).norm() < 1e-12);
                }
            }
            if i > 0 {
                assert!(q.body_entry(i, i).re >= q.body_entry(i - 1, i - 1).re);
            }
        }
        // idempotent
        let again = unitary_fix(&fixed.state, &conv).unwrap().state;
        for ((a, b), (c0, d)) in again.values().iter().zip(fixed.state.values()) {
            assert!(a.try_sub(c0).unwrap().norm() < 1e-10 && b.try_sub(d).unwrap().norm() < 1e-10);
        }
        // a rotated copy is mapped back to the same representative
        let rotated = fixed.state.apply_unitary(&random_unitary(4, &mut rng)).unwrap();
        let back = unitary_fix(&rotated, &conv).unwrap().state;
        for ((a, b), (c0, d)) in back.values().iter().zip(fixed.state.values()) {
            assert!(a.try_sub(c0).unwrap().norm() < 1e-10 && b.try_sub(d).unwrap().norm() < 1e-10);
        }
        let reg = Registry::new();
        let obs = tr("tr(q1 p1) + tr(q2 q1 p2)");
        let x = trace_eval(&obs, &s, &reg).unwrap().body();
        let y = trace_eval(&obs, &fixed.state, &reg).unwrap().body();
        assert!((x - y).norm() < 1e-12);
    }

    #[test]
    fn eff_fixing_commutes_with_ieff() {
        let roster = Arc::new(Roster::bosonic(&["1"]).unwrap());
        let s = PhaseState::random(roster, 4, 0, 1.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let conv = FixConvention {
            subgroup: Subgroup::Eff,
            ..Default::default()
        };
        let fixed = unitary_fix(&s, &conv).unwrap();
        let ie = i_eff(4).unwrap();
        assert!(fixed.unitary.commutator(&ie).unwrap().norm() < 1e-12);
    }

    #[test]
    fn degenerate_designated_q_is_flagged() {
        let roster = Arc::new(Roster::bosonic(&["1"]).unwrap());
        let q = MatrixValue::from_real_rows(2, &[1.0, 0.0, 0.0, 1.0]);
        let p = MatrixValue::from_real_rows(2, &[0.0, 2.0, 2.0, 0.0]);
        let s = PhaseState::new(roster, 2, 0, vec![(q, p)]).unwrap();
        let f = unitary_fix(&s, &FixConvention::default()).unwrap();
        assert!(f.degenerate);
        let pf = f.state.get("1", Kind::P).unwrap();
        assert!((pf.body_entry(0, 0) - c(-2.0)).norm() < 1e-12);
        assert!((pf.body_entry(1, 1) - c(2.0)).norm() < 1e-12);
    }

    #[test]
    fn ward_observable_shape() {
        let roster = Roster::bosonic(&["1"]).unwrap();
        let w = MatrixPolynomial::letter(Letter::q("1"));
        let a = ward_observable(&w, &roster).unwrap();
        assert_eq!(
            a.to_string(),
            "1 * tr(q1 p1 ieff q1) + 1 * tr(q1 p1 q1 ieff) + -1 * tr(p1 q1 ieff q1) + -1 * tr(p1 q1 q1 ieff)"
        );
    }

    #[test]
    fn ward_identity_gaussian() {
        let ens = gaussian(1.0, 2);
        let reg = Registry::new().with("j", MatrixValue::from_real_rows(2, &[0.3, 0.1, 0.1, -0.2]));
        let set = mcmc_sample(
            &ens,
            &McmcConfig {
                n_samples: 40_000,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let w = MatrixPolynomial::new(vec![TraceWord::real(1.0, vec![Letter::q("1"), Letter::constant("j")])]);
        let rep = ward_terms(&w, ("1", Kind::P), &ens.hamiltonian, &ens.params, &set, &reg).unwrap();
        assert!(rep.max_z() < 3.0, "{:?}", rep.total);
        assert_eq!(rep.terms[2].mean().norm(), 0.0);
        assert_eq!(rep.terms[0].mean().norm(), 0.0);

        let constant = MatrixPolynomial::letter(Letter::constant("j"));
        let rep = ward_terms(&constant, ("1", Kind::Q), &ens.hamiltonian, &ens.params, &set, &reg).unwrap();
        assert_eq!(rep.terms[4].mean().norm(), 0.0);
    }

    #[test]
    fn hbar_examples() {
        let roster = one_boson();
        let sx = MatrixValue::from_real_rows(2, &[0.0, 1.0, 1.0, 0.0]);
        let sy = MatrixValue::from_rows(2, &[c(0.0), -I, I, c(0.0)]).scale(c(0.25));
        let s = PhaseState::new(roster, 2, 0, vec![(sx, sy)]).unwrap();
        let set = SampleSet {
            chains: vec![vec![s.clone(); 10]],
            diagnostics: Vec::new(),
            warnings: Vec::new(),
            seed: 0,
        };
        let rep = effective_hbar(&set).unwrap();
        assert!((rep.hbar.mean - 0.5).abs() < 1e-15);
        assert!(rep.anisotropy < 1e-15);

        let ens = gaussian(1.0, 2);
        let set = mcmc_sample(
            &ens,
            &McmcConfig {
                n_samples: 20_000,
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let rep = effective_hbar(&set).unwrap();
        assert!(rep.hbar.within(0.0, 3.0), "{:?}", rep.hbar);
        assert!(rep.anisotropy >= 0.0);
    }

    #[test]
    fn emergent_commutator_degenerate_inputs() {
        let ens = gaussian(1.0, 2);
        let set = mcmc_sample(
            &ens,
            &McmcConfig {
                n_samples: 200,
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let reg = Registry::new();
        // W = x: commutator and conjugate derivative both vanish
        let w = MatrixPolynomial::letter(Letter::q("1"));
        let r = emergent_commutator_residual(&w, ("1", Kind::Q), &set, 0.7, &reg).unwrap();
        assert_eq!(r.mean().norm(), 0.0);
        let w = MatrixPolynomial::letter(Letter::identity());
        let r = emergent_commutator_residual(&w, ("1", Kind::Q), &set, 0.7, &reg).unwrap();
        assert_eq!(r.mean().norm(), 0.0);
        // W = x′ with ħ = 0 is the bare commutator average
        let w = MatrixPolynomial::letter(Letter::p("1"));
        let r = emergent_commutator_residual(&w, ("1", Kind::Q), &set, 0.0, &reg).unwrap();
        let direct = average_matrix(&set, |s| {
            let e = s.map_values(eff_project)?;
            i_eff(2)?.try_mul(&e.get("1", Kind::P)?.commutator(e.get("1", Kind::Q)?)?)
        })
        .unwrap();
        assert!(r.mean().try_sub(&direct.mean()).unwrap().norm() < 1e-12);
        // with ħ the conjugate derivative contributes −ħ·1
        let r2 = emergent_commutator_residual(&w, ("1", Kind::Q), &set, 0.5, &reg).unwrap();
        let shift = r2.mean().try_sub(&r.mean()).unwrap();
        assert!(shift.try_add(&MatrixValue::identity(2, 0).scale(c(0.5))).unwrap().norm() < 1e-12);
    }

    #[test]
    fn berezin_fermion_number_vanishes() {
        let roster = Arc::new(Roster::new(vec![VariableSpec::fermionic("f"), VariableSpec::fermionic("g")]).unwrap());
        let reg = Registry::new();
        let h = tr("tr(qf qf pf pf) + tr(qg qg pg pg) + 0.7 * tr(qf pg) + -0.7 * tr(qg pf)");
        let params = EnsembleParams::new(1.0, 0.0, 0.8, 2, roster.clone()).unwrap();
        let n = berezin_average(&n_polynomial(&roster), &h, &params, &reg).unwrap();
        assert_eq!(n, c(0.0));
        let one = berezin_average(&tr("tr(1)"), &h, &params, &reg).unwrap();
        assert!((one - c(2.0)).norm() < 1e-12);
        let params = EnsembleParams::new(1.0, 0.5, 0.8, 2, roster.clone()).unwrap();
        let n = berezin_average(&n_polynomial(&roster), &h, &params, &reg).unwrap();
        assert!(n.norm() > 1.0);
    }

    #[test]
    fn berezin_single_fermion_trace_mode_is_unsaturated() {
        let roster = Arc::new(Roster::new(vec![VariableSpec::fermionic("f")]).unwrap());
        let params = EnsembleParams::new(1.0, 0.0, 0.8, 2, roster.clone()).unwrap();
        let err = berezin_average(&n_polynomial(&roster), &tr("tr(qf qf pf pf)"), &params, &Registry::new());
        assert!(matches!(err, Err(Error::Consistency(_))));
    }
}
