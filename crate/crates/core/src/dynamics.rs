//! Equations of motion generated by a trace Hamiltonian, time integration
//! and the conserved charges `H`, `N` and `C̃`.

use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grassmann::GrassmannElement;
use crate::matrix::{Kind, MatrixValue, Parity, PhaseState, Roster};
use crate::trace::{trace_derivative_with, Compiled, DerivativeConvention, Letter, Registry, TracePolynomial, TraceWord};

/// Per-variable velocities `(q̇_r, ṗ_r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentState {
    pub values: Vec<(MatrixValue, MatrixValue)>,
}

impl TangentState {
    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|(a, b)| a.norm().powi(2) + b.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn get(&self, roster: &Roster, label: &str, kind: Kind) -> Result<&MatrixValue> {
        let k = roster.index_of(label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        Ok(match kind {
            Kind::Q => &self.values[k].0,
            Kind::P => &self.values[k].1,
        })
    }
}

/// `s + h·t`.
pub fn advance(s: &PhaseState, t: &TangentState, h: f64) -> Result<PhaseState> {
    let mut out = s.clone();
    let hc = Complex64::new(h, 0.0);
    for ((q, p), (dq, dp)) in out.values_mut().iter_mut().zip(&t.values) {
        q.axpy_in_place(hc, dq)?;
        p.axpy_in_place(hc, dp)?;
    }
    out.time += h;
    Ok(out)
}

/// Hamiltonian vector field of a trace functional, compiled for one roster
/// and matrix size:
/// `q̇_r = ε_r δW/δp_r`, `ṗ_r = −δW/δq_r`.
#[derive(Clone, Debug)]
pub struct Flow {
    generator: TracePolynomial,
    value: Compiled,
    q_dot: Vec<Compiled>,
    p_dot: Vec<Compiled>,
    q_only: Vec<bool>,
    p_only: Vec<bool>,
}

fn scaled(words: &[TraceWord], s: f64) -> Vec<TraceWord> {
    words
        .iter()
        .map(|w| TraceWord::new(w.coeff * s, w.letters.clone()))
        .collect()
}

impl Flow {
    pub fn new(generator: &TracePolynomial, roster: &Roster, reg: &Registry, dim: usize) -> Result<Self> {
        Self::with_convention(generator, roster, reg, dim, DerivativeConvention::default())
    }

    /// Flow built from derivatives in the given convention. Left derivatives
    /// by odd letters carry the opposite sign, so the fermionic equations are
    /// flipped to describe the same flow.
    pub fn with_convention(
        generator: &TracePolynomial,
        roster: &Roster,
        reg: &Registry,
        dim: usize,
        conv: DerivativeConvention,
    ) -> Result<Self> {
        let mut q_dot = Vec::new();
        let mut p_dot = Vec::new();
        for v in roster.vars() {
            let flip = if conv == DerivativeConvention::Left && v.parity.is_odd() { -1.0 } else { 1.0 };
            let dp = trace_derivative_with(generator, (&v.label, Kind::P), roster, conv)?;
            let dq = trace_derivative_with(generator, (&v.label, Kind::Q), roster, conv)?;
            q_dot.push(Compiled::new(&scaled(dp.words(), flip * v.parity.epsilon()), roster, reg, dim)?);
            p_dot.push(Compiled::new(&scaled(dq.words(), -flip), roster, reg, dim)?);
        }
        let only = |kind: Kind| {
            generator
                .words()
                .iter()
                .map(|w| w.letters.iter().all(|l| !matches!(l, Letter::Var(_, k) if *k != kind)))
                .collect()
        };
        Ok(Flow {
            generator: generator.clone(),
            value: Compiled::new(generator.words(), roster, reg, dim)?,
            q_dot,
            p_dot,
            q_only: only(Kind::Q),
            p_only: only(Kind::P),
        })
    }

    pub fn generator(&self) -> &TracePolynomial {
        &self.generator
    }

    /// Every word depends on the `q`s alone or on the `p`s alone.
    pub fn is_separable(&self) -> bool {
        self.q_only.iter().zip(&self.p_only).all(|(a, b)| *a || *b)
    }

    pub fn value(&self, s: &PhaseState) -> Result<GrassmannElement> {
        self.value.eval_trace(s)
    }

    pub fn field(&self, s: &PhaseState) -> Result<TangentState> {
        let mut values = Vec::with_capacity(self.q_dot.len());
        for (cq, cp) in self.q_dot.iter().zip(&self.p_dot) {
            values.push((cq.eval_matrix(s)?, cp.eval_matrix(s)?));
        }
        Ok(TangentState { values })
    }

    fn q_velocity(&self, s: &PhaseState) -> Result<Vec<MatrixValue>> {
        self.q_dot.iter().map(|c| c.eval_matrix(s)).collect()
    }

    fn p_velocity(&self, s: &PhaseState) -> Result<Vec<MatrixValue>> {
        self.p_dot.iter().map(|c| c.eval_matrix(s)).collect()
    }
}

/// Equations of motion for `h` at `s`.
pub fn eom_field(h: &TracePolynomial, s: &PhaseState, reg: &Registry) -> Result<TangentState> {
    Flow::new(h, s.roster(), reg, s.dim())?.field(s)
}

pub fn charge_h(h: &TracePolynomial, s: &PhaseState, reg: &Registry) -> Result<GrassmannElement> {
    crate::trace::trace_eval(h, s, reg)
}

/// Trace fermion number `i Σ_F Tr(q_r p_r)`.
pub fn charge_n(s: &PhaseState) -> Result<GrassmannElement> {
    let mut acc = GrassmannElement::zero(s.generators());
    for (v, (q, p)) in s.roster().vars().iter().zip(s.values()) {
        if v.parity == Parity::Fermionic {
            acc = acc.try_add(&q.try_mul(p)?.trace())?;
        }
    }
    Ok(acc.scale(Complex64::new(0.0, 1.0)))
}

/// Millard charge `Σ_B [q_r, p_r] − Σ_F {q_r, p_r}`.
pub fn charge_ctilde(s: &PhaseState) -> Result<MatrixValue> {
    let mut acc = MatrixValue::zeros(s.dim(), s.generators());
    for (v, (q, p)) in s.roster().vars().iter().zip(s.values()) {
        let term = match v.parity {
            Parity::Bosonic => q.commutator(p)?,
            Parity::Fermionic => q.anticommutator(p)?.scale(Complex64::new(-1.0, 0.0)),
        };
        acc.axpy_in_place(Complex64::new(1.0, 0.0), &term)?;
    }
    Ok(acc)
}

/// `C̃` as a matrix polynomial in the roster letters.
pub fn ctilde_polynomial(roster: &Roster) -> crate::trace::MatrixPolynomial {
    let mut words = Vec::new();
    for v in roster.vars() {
        let (q, p) = (Letter::q(&v.label), Letter::p(&v.label));
        let qp = if v.parity == Parity::Bosonic { 1.0 } else { -1.0 };
        words.push(TraceWord::real(qp, vec![q.clone(), p.clone()]));
        words.push(TraceWord::real(-1.0, vec![p, q]));
    }
    crate::trace::MatrixPolynomial::new(words)
}

/// Trace fermion number as a trace polynomial.
pub fn n_polynomial(roster: &Roster) -> TracePolynomial {
    let words = roster
        .vars()
        .iter()
        .filter(|v| v.parity == Parity::Fermionic)
        .map(|v| TraceWord::new(Complex64::new(0.0, 1.0), vec![Letter::q(&v.label), Letter::p(&v.label)]))
        .collect();
    TracePolynomial::new(words).expect("nonempty words")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChargeRecord {
    pub time: f64,
    pub h_trace: GrassmannElement,
    pub n_trace: GrassmannElement,
    pub ctilde: MatrixValue,
    pub constraint_violation: f64,
}

impl ChargeRecord {
    pub fn measure(flow: &Flow, s: &PhaseState) -> Result<Self> {
        Ok(ChargeRecord {
            time: s.time,
            h_trace: flow.value(s)?,
            n_trace: charge_n(s)?,
            ctilde: charge_ctilde(s)?,
            constraint_violation: s.check_constraints().max_violation,
        })
    }

    /// `|Tr C̃|`.
    pub fn ctilde_trace(&self) -> f64 {
        self.ctilde.trace().norm()
    }

    /// `‖C̃ + C̃†‖_F`.
    pub fn ctilde_antihermiticity(&self) -> f64 {
        self.ctilde
            .try_add(&self.ctilde.adjoint())
            .map(|m| m.norm())
            .unwrap_or(f64::INFINITY)
    }
}

fn relative(diff: f64, reference: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else {
        diff / reference.max(f64::MIN_POSITIVE)
    }
}

/// Largest relative change of each charge against the first record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub h: f64,
    pub n: f64,
    pub ctilde: f64,
    pub ctilde_norm: f64,
    pub max_ctilde_trace: f64,
    pub max_ctilde_antihermiticity: f64,
    pub max_constraint_violation: f64,
}

pub fn drift(records: &[ChargeRecord]) -> Drift {
    let Some(first) = records.first() else {
        return Drift::default();
    };
    let mut d = Drift::default();
    let c0 = first.ctilde.norm();
    for r in records {
        d.h = d.h.max(relative((&r.h_trace - &first.h_trace).norm(), first.h_trace.norm()));
        d.n = d.n.max(relative((&r.n_trace - &first.n_trace).norm(), first.n_trace.norm()));
        let dc = r.ctilde.try_sub(&first.ctilde).map(|m| m.norm()).unwrap_or(f64::INFINITY);
        d.ctilde = d.ctilde.max(relative(dc, c0));
        d.ctilde_norm = d.ctilde_norm.max(relative((r.ctilde.norm() - c0).abs(), c0));
        d.max_ctilde_trace = d.max_ctilde_trace.max(r.ctilde_trace());
        d.max_ctilde_antihermiticity = d.max_ctilde_antihermiticity.max(r.ctilde_antihermiticity());
        d.max_constraint_violation = d.max_constraint_violation.max(r.constraint_violation);
    }
    d
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Kick-drift-kick; needs a separable Hamiltonian.
    Leapfrog,
    #[default]
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrationConfig {
    pub t_final: f64,
    pub dt: f64,
    pub scheme: Scheme,
    /// Charges are recorded every this many steps (and at the end).
    pub record_every: usize,
    pub keep_snapshots: bool,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        IntegrationConfig {
            t_final: 10.0,
            dt: 1e-3,
            scheme: Scheme::Rk4,
            record_every: 10,
            keep_snapshots: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<ChargeRecord>,
    /// States at the record times when snapshots were requested.
    pub snapshots: Vec<PhaseState>,
    pub final_state: PhaseState,
    pub steps: usize,
}

impl Trajectory {
    pub fn drift(&self) -> Drift {
        drift(&self.records)
    }

    /// Columns: time, H_trace, |N_trace|, Ctilde_fro_norm, constraint_violation.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "H_trace", "|N_trace|", "Ctilde_fro_norm", "constraint_violation"])?;
        for r in &self.records {
            w.write_record([
                r.time.to_string(),
                r.h_trace.body().re.to_string(),
                r.n_trace.norm().to_string(),
                r.ctilde.norm().to_string(),
                r.constraint_violation.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One JSON document per line, one line per snapshot.
    pub fn write_snapshots<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.snapshots {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn rk4_step(flow: &Flow, s: &PhaseState, dt: f64) -> Result<PhaseState> {
    let k1 = flow.field(s)?;
    let k2 = flow.field(&advance(s, &k1, dt / 2.0)?)?;
    let k3 = flow.field(&advance(s, &k2, dt / 2.0)?)?;
    let k4 = flow.field(&advance(s, &k3, dt)?)?;
    let mut out = s.clone();
    let w = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
    for (k, h) in [&k1, &k2, &k3, &k4].into_iter().zip(w) {
        let hc = Complex64::new(h, 0.0);
        for ((q, p), (dq, dp)) in out.values_mut().iter_mut().zip(&k.values) {
            q.axpy_in_place(hc, dq)?;
            p.axpy_in_place(hc, dp)?;
        }
    }
    out.time = s.time + dt;
    Ok(out)
}

fn kick(s: &mut PhaseState, vel: &[MatrixValue], h: f64, kind: Kind) -> Result<()> {
    let hc = Complex64::new(h, 0.0);
    for ((q, p), v) in s.values_mut().iter_mut().zip(vel) {
        match kind {
            Kind::Q => q.axpy_in_place(hc, v)?,
            Kind::P => p.axpy_in_place(hc, v)?,
        }
    }
    Ok(())
}

fn leapfrog_step(flow: &Flow, s: &PhaseState, dt: f64) -> Result<PhaseState> {
    let mut out = s.clone();
    let pv = flow.p_velocity(&out)?;
    kick(&mut out, &pv, dt / 2.0, Kind::P)?;
    let qv = flow.q_velocity(&out)?;
    kick(&mut out, &qv, dt, Kind::Q)?;
    let pv = flow.p_velocity(&out)?;
    kick(&mut out, &pv, dt / 2.0, Kind::P)?;
    out.time = s.time + dt;
    Ok(out)
}

/// Single step of the chosen scheme.
pub fn step(flow: &Flow, s: &PhaseState, dt: f64, scheme: Scheme) -> Result<PhaseState> {
    match scheme {
        Scheme::Rk4 => rk4_step(flow, s, dt),
        Scheme::Leapfrog => leapfrog_step(flow, s, dt),
    }
}

/// Fixed-step integration from `s0` to `t_final`.
pub fn integrate(flow: &Flow, s0: &PhaseState, cfg: &IntegrationConfig) -> Result<Trajectory> {
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) || !(cfg.t_final >= 0.0) {
        return Err(Error::Config(format!("invalid dt = {} or t_final = {}", cfg.dt, cfg.t_final)));
    }
    if cfg.scheme == Scheme::Leapfrog && !flow.is_separable() {
        return Err(Error::Config(
            "leapfrog needs a Hamiltonian separable as Tr F(p) + Tr G(q)".into(),
        ));
    }
    let every = cfg.record_every.max(1);
    let steps = (cfg.t_final / cfg.dt).round() as usize;
    let mut s = s0.clone();
    let mut records = vec![ChargeRecord::measure(flow, &s)?];
    let mut snapshots = Vec::new();
    if cfg.keep_snapshots {
        snapshots.push(s.clone());
    }
    for n in 1..=steps {
        let next = step(flow, &s, cfg.dt, cfg.scheme)?;
        if !next.is_finite() {
            return Err(Error::NonFinite {
                step: n,
                time: next.time,
                last_good: Box::new(s),
            });
        }
        // reset accumulated rounding in the clock
        s = next;
        s.time = s0.time + n as f64 * cfg.dt;
        if n % every == 0 || n == steps {
            records.push(ChargeRecord::measure(flow, &s)?);
            if cfg.keep_snapshots {
                snapshots.push(s.clone());
            }
        }
    }
    Ok(Trajectory {
        records,
        snapshots,
        final_state: s,
        steps,
    })
}

// Orthonormal Hermitian basis under Tr(E_k E_l) = δ_kl.
pub(crate) fn hermitian_basis(n: usize) -> Vec<MatrixValue> {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let mut m = MatrixValue::zeros(n, 0);
        m.raw_mut()[i * n + i] = Complex64::new(1.0, 0.0);
        out.push(m);
        for j in i + 1..n {
            let mut a = MatrixValue::zeros(n, 0);
            a.raw_mut()[i * n + j] = Complex64::new(r, 0.0);
            a.raw_mut()[j * n + i] = Complex64::new(r, 0.0);
            out.push(a);
            let mut b = MatrixValue::zeros(n, 0);
            b.raw_mut()[i * n + j] = Complex64::new(0.0, r);
            b.raw_mut()[j * n + i] = Complex64::new(0.0, -r);
            out.push(b);
        }
    }
    out
}

/// Real part of `Tr(E X)`: the coordinate of `X` along `E`.
pub(crate) fn coordinate(e: &MatrixValue, x: &MatrixValue) -> f64 {
    let n = e.dim();
    let (ed, xd) = (e.raw(), x.raw());
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += (ed[i * n + j] * xd[j * n + i]).re;
        }
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub divergence: f64,
    /// Frobenius norm of the vector field at the point.
    pub field_scale: f64,
}

/// Phase-space divergence of the flow over all real coordinates of the
/// self-adjoint matrices, by central differences with step `h`.
pub fn liouville_divergence(flow: &Flow, s: &PhaseState, h: f64) -> Result<Divergence> {
    if !s.roster().is_bosonic_only() {
        return Err(Error::Roster("phase-space divergence needs a bosonic roster".into()));
    }
    let basis = hermitian_basis(s.dim());
    let mut div = 0.0;
    let labels: Vec<String> = s.roster().vars().iter().map(|v| v.label.clone()).collect();
    for (r, label) in labels.iter().enumerate() {
        for kind in [Kind::Q, Kind::P] {
            for e in &basis {
                let shifted = |sgn: f64| -> Result<f64> {
                    let mut t = s.clone();
                    let x = t.get(label, kind)?.try_axpy(Complex64::new(sgn * h, 0.0), e)?;
                    t.set(label, kind, x)?;
                    let f = flow.field(&t)?;
                    let v = match kind {
                        Kind::Q => &f.values[r].0,
                        Kind::P => &f.values[r].1,
                    };
                    Ok(coordinate(e, v))
                };
                div += (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
            }
        }
    }
    Ok(Divergence {
        divergence: div,
        field_scale: flow.field(s)?.norm(),
    })
}

/// One Euler step of the canonical flow generated by `w`.
pub fn canonical_generator_flow(w: &TracePolynomial, s: &PhaseState, eps: f64, reg: &Registry) -> Result<PhaseState> {
    let flow = Flow::new(w, s.roster(), reg, s.dim())?;
    let mut out = advance(s, &flow.field(s)?, eps)?;
    out.time = s.time;
    Ok(out)
}

/// Random self-adjoint Hamiltonian: `Σ_B Tr(p² + q²)`, `extra_words` random
/// words of degree 2..=`max_degree` with coefficients of size `strength`,
/// and for fermions a mass term `i Tr(q p)` with couplings carrying equal
/// numbers of fermionic `q` and `p` letters. For degree ≥ 3 every boson gets
/// a quartic confinement `g Tr(q⁴ + p⁴)` with `g` above the summed random
/// coefficients, which bounds the bosonic energy from below.
pub fn random_hamiltonian<R: Rng + ?Sized>(
    roster: &Roster,
    max_degree: usize,
    extra_words: usize,
    strength: f64,
    rng: &mut R,
) -> Result<TracePolynomial> {
    let mut words = Vec::new();
    let bosons: Vec<&str> = roster
        .vars()
        .iter()
        .filter(|v| v.parity == Parity::Bosonic)
        .map(|v| v.label.as_str())
        .collect();
    let fermions: Vec<&str> = roster
        .vars()
        .iter()
        .filter(|v| v.parity == Parity::Fermionic)
        .map(|v| v.label.as_str())
        .collect();
    for b in &bosons {
        words.push(TraceWord::real(1.0, vec![Letter::p(b), Letter::p(b)]));
        words.push(TraceWord::real(1.0, vec![Letter::q(b), Letter::q(b)]));
    }
    for f in &fermions {
        let m = rng.random_range(0.5..1.5);
        words.push(TraceWord::new(Complex64::new(0.0, m), vec![Letter::q(f), Letter::p(f)]));
    }
    let mut added = 0;
    let mut guard = 0;
    while added < extra_words && guard < 10_000 {
        guard += 1;
        let deg = rng.random_range(2..=max_degree.max(2));
        let mut letters = Vec::with_capacity(deg);
        let mut balance = 0i32;
        for _ in 0..deg {
            let use_fermion = !fermions.is_empty() && (bosons.is_empty() || rng.random_bool(0.4));
            let label = if use_fermion {
                fermions[rng.random_range(0..fermions.len())]
            } else {
                bosons[rng.random_range(0..bosons.len())]
            };
            let kind = if rng.random_bool(0.5) { Kind::Q } else { Kind::P };
            if use_fermion {
                balance += if kind == Kind::Q { 1 } else { -1 };
            }
            letters.push(Letter::Var(label.to_string(), kind));
        }
        if balance != 0 {
            continue;
        }
        let coeff = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * strength;
        words.push(TraceWord::new(coeff, letters));
        added += 1;
    }
    if max_degree >= 3 {
        let total: f64 = words.iter().filter(|w| w.letters.len() >= 3).map(|w| w.coeff.norm()).sum();
        for b in &bosons {
            let g = 0.5 + total + strength * rng.random_range(0.0..1.0);
            words.push(TraceWord::real(g, vec![Letter::q(b); 4]));
            words.push(TraceWord::real(g, vec![Letter::p(b); 4]));
        }
    }
    TracePolynomial::new(words)?.hermitian_part(roster)?.canonicalize(roster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{random_unitary, VariableSpec};
    use crate::trace::poisson_bracket;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn tr(text: &str) -> TracePolynomial {
        TracePolynomial::parse(text).unwrap()
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn bosons(labels: &[&str], dim: usize, seed: u64, scale: f64) -> PhaseState {
        let roster = Arc::new(Roster::bosonic(labels).unwrap());
        PhaseState::random(roster, dim, 0, scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn mixed(dim: usize, generators: u32, seed: u64) -> PhaseState {
        let roster = Arc::new(Roster::new(vec![VariableSpec::bosonic("1"), VariableSpec::fermionic("2")]).unwrap());
        PhaseState::random(roster, dim, generators, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn harmonic_field() {
        let s = bosons(&["1"], 2, 1, 1.0);
        let reg = Registry::new();
        let f = eom_field(&tr("tr(p1 p1) + tr(q1 q1)"), &s, &reg).unwrap();
        let (q, p) = s.pair("1").unwrap();
        assert!(f.values[0].0.try_sub(&p.scale(c(2.0))).unwrap().norm() < 1e-14);
        assert!(f.values[0].1.try_add(&q.scale(c(2.0))).unwrap().norm() < 1e-14);
        let f = eom_field(&tr("tr(q1 q1)"), &s, &reg).unwrap();
        assert_eq!(f.values[0].0.norm(), 0.0);
        let f = eom_field(&TracePolynomial::zero(), &s, &reg).unwrap();
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn charge_examples() {
        let roster = Arc::new(Roster::bosonic(&["1"]).unwrap());
        let q = MatrixValue::from_real_rows(2, &[1.0, 0.0, 0.0, 0.0]);
        let p = MatrixValue::from_real_rows(2, &[0.0, 0.0, 0.0, 1.0]);
        let s = PhaseState::new(roster.clone(), 2, 0, vec![(q, p)]).unwrap();
        assert_eq!(charge_ctilde(&s).unwrap().norm(), 0.0);
        assert!(charge_n(&s).unwrap().is_zero());

        // [σx, σy] = 2iσz
        let sx = MatrixValue::from_real_rows(2, &[0.0, 1.0, 1.0, 0.0]);
        let i = Complex64::new(0.0, 1.0);
        let sy = MatrixValue::from_rows(2, &[c(0.0), -i, i, c(0.0)]);
        let s = PhaseState::new(roster, 2, 0, vec![(sx, sy)]).unwrap();
        let want = MatrixValue::from_rows(2, &[2.0 * i, c(0.0), c(0.0), -2.0 * i]);
        assert_eq!(charge_ctilde(&s).unwrap(), want);
    }

    #[test]
    fn ctilde_polynomial_matches_direct_charge() {
        let s = mixed(2, 4, 3);
        let poly = ctilde_polynomial(s.roster());
        let direct = charge_ctilde(&s).unwrap();
        assert!(poly.eval(&s, &Registry::new()).unwrap().try_sub(&direct).unwrap().norm() < 1e-14);
    }

    #[test]
    fn ctilde_traceless_and_antihermitian() {
        for seed in 0..5 {
            let s = mixed(2, 4, seed);
            let ct = charge_ctilde(&s).unwrap();
            assert!(ct.trace().norm() < 1e-12);
            assert!(ct.try_add(&ct.adjoint()).unwrap().norm() < 1e-12);
            let n = charge_n(&s).unwrap();
            // N is real: its conjugate equals itself
            assert!((&n - &n.conj_with(crate::matrix::PHYSICS_CONVENTION)).norm() < 1e-12);
        }
    }

    #[test]
    fn harmonic_leapfrog_energy() {
        let s = bosons(&["1"], 2, 2, 1.0);
        let reg = Registry::new();
        let h = tr("tr(p1 p1) + tr(q1 q1)");
        let flow = Flow::new(&h, s.roster(), &reg, 2).unwrap();
        let cfg = IntegrationConfig {
            scheme: Scheme::Leapfrog,
            ..Default::default()
        };
        let traj = integrate(&flow, &s, &cfg).unwrap();
        assert!(traj.drift().h < 1e-6, "{:?}", traj.drift());
        assert!((traj.final_state.time - 10.0).abs() < 1e-12);
    }

    #[test]
    fn leapfrog_rejects_coupled_hamiltonian() {
        let s = bosons(&["1"], 2, 2, 1.0);
        let flow = Flow::new(&tr("tr(p1 q1 p1 q1)"), s.roster(), &Registry::new(), 2).unwrap();
        let cfg = IntegrationConfig {
            scheme: Scheme::Leapfrog,
            t_final: 0.01,
            ..Default::default()
        };
        assert!(matches!(integrate(&flow, &s, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rk4_step_consistency() {
        let s = bosons(&["1", "2"], 3, 4, 0.5);
        let reg = Registry::new();
        let h = tr("tr(p1 p1) + tr(p2 p2) + tr(q1 q1 q2 q2)");
        let flow = Flow::new(&h, s.roster(), &reg, 3).unwrap();
        let f = flow.field(&s).unwrap();
        let mut prev = f64::INFINITY;
        for dt in [1e-2, 5e-3, 2.5e-3] {
            let a = step(&flow, &s, dt, Scheme::Rk4).unwrap();
            let b = advance(&s, &f, dt).unwrap();
            let err: f64 = a
                .values()
                .iter()
                .zip(b.values())
                .map(|((q0, p0), (q1, p1))| q0.try_sub(q1).unwrap().norm() + p0.try_sub(p1).unwrap().norm())
                .sum();
            assert!(err < prev / 3.5, "O(dt²) difference expected");
            prev = err;
        }
    }

    #[test]
    fn coupled_bosons_conserve_ctilde() {
        let s = bosons(&["1", "2"], 2, 5, 0.5);
        let reg = Registry::new();
        let h = tr("tr(p1 p1) + tr(p2 p2) + tr(q1 q1 q2 q2)");
        let flow = Flow::new(&h, s.roster(), &reg, 2).unwrap();
        let cfg = IntegrationConfig {
            t_final: 2.0,
            ..Default::default()
        };
        let d = integrate(&flow, &s, &cfg).unwrap().drift();
        assert!(d.ctilde < 1e-6 && d.h < 1e-8, "{d:?}");
    }

    #[test]
    fn mixed_roster_conserves_all_charges() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = mixed(2, 4, 9);
        let reg = Registry::new();
        let h = random_hamiltonian(s.roster(), 4, 4, 0.3, &mut rng).unwrap();
        let flow = Flow::new(&h, s.roster(), &reg, 2).unwrap();
        assert!(flow.value(&s).unwrap().body().im.abs() < 1e-12);
        let cfg = IntegrationConfig {
            t_final: 1.0,
            ..Default::default()
        };
        let traj = integrate(&flow, &s, &cfg).unwrap();
        let d = traj.drift();
        assert!(d.h < 1e-8 && d.n < 1e-8 && d.ctilde < 1e-8, "{d:?}\n{h}");
        assert!(d.max_ctilde_trace < 1e-10 && d.max_ctilde_antihermiticity < 1e-10, "{d:?}");
        assert!(d.max_constraint_violation < 1e-12, "{d:?}");
    }

    #[test]
    fn evolution_commutes_with_unitaries() {
        let s = bosons(&["1", "2"], 3, 6, 0.5);
        let reg = Registry::new();
        let h = tr("tr(p1 p1) + tr(p2 p2) + tr(q1 q2 q1 q2) + tr(q1 q1)");
        let flow = Flow::new(&h, s.roster(), &reg, 3).unwrap();
        let u = random_unitary(3, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = IntegrationConfig {
            t_final: 0.5,
            ..Default::default()
        };
        let a = integrate(&flow, &s, &cfg).unwrap().final_state.apply_unitary(&u).unwrap();
        let b = integrate(&flow, &s.apply_unitary(&u).unwrap(), &cfg).unwrap().final_state;
        for ((q0, p0), (q1, p1)) in a.values().iter().zip(b.values()) {
            assert!(q0.try_sub(q1).unwrap().norm() < 1e-8);
            assert!(p0.try_sub(p1).unwrap().norm() < 1e-8);
        }
    }

    #[test]
    fn time_derivative_is_bracket_with_h() {
        let s = bosons(&["1", "2"], 2, 7, 0.5);
        let reg = Registry::new();
        let h = tr("tr(p1 p1) + tr(p2 p2) + tr(q1 q1 q2 q2) + 0.5 * tr(q1 p2 q2 p1)").hermitian_part(s.roster()).unwrap();
        let a = tr("tr(q1 p2 q2) + (0.2+0.3i) * tr(p1 p1 q2)");
        let flow = Flow::new(&h, s.roster(), &reg, 2).unwrap();
        let dt = 1e-4;
        let fwd = step(&flow, &s, dt, Scheme::Rk4).unwrap();
        let bwd = step(&flow, &s, -dt, Scheme::Rk4).unwrap();
        let ev = |x: &PhaseState| crate::trace::trace_eval(&a, x, &reg).unwrap().body();
        let fd = (ev(&fwd) - ev(&bwd)) / (2.0 * dt);
        let br = poisson_bracket(&a, &h, &s, &reg).unwrap().body();
        assert!((fd - br).norm() < 1e-5, "{fd} vs {br}");
    }

    #[test]
    fn conventions_describe_the_same_flow() {
        let s = mixed(2, 4, 12);
        let reg = Registry::new();
        let h = random_hamiltonian(s.roster(), 4, 5, 0.4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let right = Flow::new(&h, s.roster(), &reg, 2).unwrap().field(&s).unwrap();
        let left = Flow::with_convention(&h, s.roster(), &reg, 2, DerivativeConvention::Left)
            .unwrap()
            .field(&s)
            .unwrap();
        for ((a, b), (c0, d)) in right.values.iter().zip(&left.values) {
            assert!(a.try_sub(c0).unwrap().norm() < 1e-13);
            assert!(b.try_sub(d).unwrap().norm() < 1e-13);
        }
    }

    #[test]
    fn time_derivative_is_bracket_with_h_mixed() {
        let s = mixed(2, 4, 13);
        let reg = Registry::new();
        let h = random_hamiltonian(s.roster(), 4, 5, 0.4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = tr("tr(q1 q2 p2) + (0.3-0.1i) * tr(q2 p1 p2 q1) + tr(p1 q1)");
        let flow = Flow::new(&h, s.roster(), &reg, 2).unwrap();
        let dt = 1e-4;
        let fwd = step(&flow, &s, dt, Scheme::Rk4).unwrap();
        let bwd = step(&flow, &s, -dt, Scheme::Rk4).unwrap();
        let ev = |x: &PhaseState| crate::trace::trace_eval(&a, x, &reg).unwrap();
        let fd = (&ev(&fwd) - &ev(&bwd)).scale(c(0.5 / dt));
        let br = poisson_bracket(&a, &h, &s, &reg).unwrap();
        assert!((&fd - &br).norm() < 1e-5, "{fd} vs {br}");
    }

    #[test]
    fn divergence_vanishes() {
        let reg = Registry::new();
        let s = bosons(&["1"], 2, 8, 1.0);
        for text in ["tr(p1 p1) + tr(q1 q1)", "tr(q1 q1 q1 q1)", "0"] {
            let flow = Flow::new(&tr(text), s.roster(), &reg, 2).unwrap();
            let d = liouville_divergence(&flow, &s, 1e-4).unwrap();
            assert!(d.divergence.abs() < 1e-8 * d.field_scale.max(1.0), "{text}: {d:?}");
        }
        let m = mixed(2, 4, 1);
        let flow = Flow::new(&tr("tr(p1 p1)"), m.roster(), &reg, 2).unwrap();
        assert!(liouville_divergence(&flow, &m, 1e-4).is_err());
    }

    #[test]
    fn fermion_number_generates_phase() {
        let s = mixed(2, 4, 11);
        let reg = Registry::new();
        let eps = 1e-3;
        let out = canonical_generator_flow(&n_polynomial(s.roster()), &s, eps, &reg).unwrap();
        let (q0, p0) = s.pair("2").unwrap();
        let (q1, p1) = out.pair("2").unwrap();
        let i = Complex64::new(0.0, 1.0);
        assert!(q1.try_sub(&q0.scale(c(1.0) - i * eps)).unwrap().norm() < 1e-14);
        assert!(p1.try_sub(&p0.scale(c(1.0) + i * eps)).unwrap().norm() < 1e-14);
        // bosons untouched
        assert_eq!(s.pair("1").unwrap(), out.pair("1").unwrap());

        let h = tr("tr(p1 p1) + tr(q1 q1)");
        let direct = canonical_generator_flow(&h, &s, eps, &reg).unwrap();
        let flow = Flow::new(&h, s.roster(), &reg, 2).unwrap();
        let mut euler = advance(&s, &flow.field(&s).unwrap(), eps).unwrap();
        euler.time = s.time;
        assert_eq!(direct, euler);
        assert_eq!(canonical_generator_flow(&tr("3 * tr(1)"), &s, eps, &reg).unwrap(), s);
    }

    #[test]
    fn non_finite_aborts_with_last_good_state() {
        let s = bosons(&["1"], 2, 3, 3.0);
        let reg = Registry::new();
        // inverted quartic potential blows up in finite time
        let flow = Flow::new(&tr("tr(p1 p1) - 50 * tr(q1 q1 q1 q1)"), s.roster(), &reg, 2).unwrap();
        let cfg = IntegrationConfig {
            t_final: 100.0,
            dt: 1e-2,
            ..Default::default()
        };
        match integrate(&flow, &s, &cfg) {
            Err(Error::NonFinite { last_good, step, .. }) => {
                assert!(last_good.is_finite());
                assert!(step > 0);
            }
            other => panic!("expected non-finite abort, got {:?}", other.map(|t| t.steps)),
        }
    }

    #[test]
    fn csv_columns() {
        let s = bosons(&["1"], 2, 2, 1.0);
        let reg = Registry::new();
        let flow = Flow::new(&tr("tr(p1 p1) + tr(q1 q1)"), s.roster(), &reg, 2).unwrap();
        let cfg = IntegrationConfig {
            t_final: 0.05,
            record_every: 10,
            keep_snapshots: true,
            ..Default::default()
        };
        let traj = integrate(&flow, &s, &cfg).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,H_trace,|N_trace|,Ctilde_fro_norm,constraint_violation\n"));
        assert_eq!(text.lines().count(), 1 + traj.records.len());
        assert_eq!(traj.records.len(), 6);
        let mut buf = Vec::new();
        traj.write_snapshots(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
    }
}
