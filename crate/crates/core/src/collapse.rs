//! Stochastic statevector collapse driven by C̃ fluctuations.
//!
//! The completed (norm-preserving) equation for commuting self-adjoint
//! channels `A_k` is
//!
//! ```text
//! dψ = [−(i/ħ) H dt + Σ_k (−½γ (A_k − ⟨A_k⟩)² dt + (A_k − ⟨A_k⟩) dW_k)] ψ
//! ```
//!
//! with independent Wiener increments of variance `γ dt`, integrated by
//! Euler–Maruyama followed by renormalization. Its ensemble average obeys
//! `ρ̇ = −(i/ħ)[H, ρ] − ½γ Σ_k [A_k, [A_k, ρ]]`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::ensemble::SampleSet;
use crate::error::{Error, Result};
use crate::matrix::{i_eff, CMatrix, MatrixValue};
use crate::parallel::{map_indexed, Execution};
use crate::stats::{self, clopper_pearson, ljung_box, sigma_confidence};

pub type CVector = DVector<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Tolerance for self-adjointness and commutation of channel operators.
pub const OPERATOR_TOLERANCE: f64 = 1e-10;
/// Population an eigenspace must reach for a trajectory to count as resolved.
pub const RESOLVE_THRESHOLD: f64 = 1.0 - 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub amplitudes: CVector,
    pub basis: Vec<String>,
    pub time: f64,
    pub hbar: f64,
}

impl StateVector {
    /// Normalized state with basis labels `0, 1, ...`.
    pub fn new(amplitudes: CVector, hbar: f64) -> Result<Self> {
        let norm = amplitudes.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Config("state vector must have finite nonzero norm".into()));
        }
        if !(hbar > 0.0) {
            return Err(Error::Config(format!("hbar must be positive, got {hbar}")));
        }
        let basis = (0..amplitudes.len()).map(|k| k.to_string()).collect();
        Ok(StateVector {
            amplitudes: amplitudes / Complex64::new(norm, 0.0),
            basis,
            time: 0.0,
            hbar,
        })
    }

    pub fn from_real(amplitudes: &[f64], hbar: f64) -> Result<Self> {
        Self::new(CVector::from_iterator(amplitudes.len(), amplitudes.iter().map(|&a| Complex64::new(a, 0.0))), hbar)
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    pub fn density(&self) -> CMatrix {
        &self.amplitudes * self.amplitudes.adjoint()
    }

    /// `⟨ψ|A|ψ⟩ / ⟨ψ|ψ⟩`.
    pub fn expectation(&self, a: &CMatrix) -> Complex64 {
        self.amplitudes.dotc(&(a * &self.amplitudes)) / self.amplitudes.norm_squared()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The Hamiltonian is the single collapse channel.
    #[default]
    EnergyDriven,
    /// Supplied channels, such as mass-density weighted projectors.
    Csl,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseConfig {
    pub mode: Mode,
    pub hamiltonian: CMatrix,
    channels: Vec<CMatrix>,
    pub gamma: f64,
    /// Rate of optional pure-dephasing noise on the same channels (the
    /// non-collapsing contributions). Zero by default.
    pub dephasing: f64,
}

fn check_self_adjoint(m: &CMatrix, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Config(format!("{what} must be square")));
    }
    let dev = (m - m.adjoint()).norm();
    if dev > OPERATOR_TOLERANCE * m.norm().max(1.0) {
        return Err(Error::Config(format!("{what} is not self-adjoint (deviation {dev:.3e})")));
    }
    Ok(())
}

impl CollapseConfig {
    pub fn energy_driven(hamiltonian: CMatrix, gamma: f64) -> Result<Self> {
        Self::new(Mode::EnergyDriven, hamiltonian, Vec::new(), gamma)
    }

    pub fn csl(hamiltonian: CMatrix, channels: Vec<CMatrix>, gamma: f64) -> Result<Self> {
        Self::new(Mode::Csl, hamiltonian, channels, gamma)
    }

    /// In energy-driven mode `channels` must be empty; the Hamiltonian is used.
    pub fn new(mode: Mode, hamiltonian: CMatrix, channels: Vec<CMatrix>, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite and ≥ 0, got {gamma}")));
        }
        check_self_adjoint(&hamiltonian, "H_eff")?;
        let d = hamiltonian.nrows();
        let channels = match mode {
            Mode::EnergyDriven => {
                if !channels.is_empty() {
                    return Err(Error::Config("energy-driven mode takes no extra channels".into()));
                }
                vec![hamiltonian.clone()]
            }
            Mode::Csl => {
                if channels.is_empty() {
                    return Err(Error::Config("csl mode needs at least one channel".into()));
                }
                channels
            }
        };
        for (k, a) in channels.iter().enumerate() {
            if a.nrows() != d || a.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: a.nrows(),
                });
            }
            check_self_adjoint(a, &format!("channel {k}"))?;
        }
        for (k, a) in channels.iter().enumerate() {
            for (l, b) in channels.iter().enumerate().skip(k + 1) {
                let c = (a * b - b * a).norm();
                if c > OPERATOR_TOLERANCE * (a.norm() * b.norm()).max(1.0) {
                    return Err(Error::Config(format!("channels {k} and {l} do not commute ({c:.3e})")));
                }
            }
        }
        Ok(CollapseConfig {
            mode,
            hamiltonian,
            channels,
            gamma,
            dephasing: 0.0,
        })
    }

    pub fn with_dephasing(mut self, rate: f64) -> Result<Self> {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::Config(format!("dephasing rate must be finite and ≥ 0, got {rate}")));
        }
        self.dephasing = rate;
        Ok(self)
    }

    pub fn channels(&self) -> &[CMatrix] {
        &self.channels
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.nrows()
    }

    /// Wiener increments drawn per step: one per channel, doubled when
    /// dephasing is on.
    pub fn increments_per_step(&self) -> usize {
        self.channels.len() * if self.dephasing > 0.0 { 2 } else { 1 }
    }
}

/// Reproducible Wiener increments. Trajectory `id` draws from ChaCha8 stream
/// `id` of `seed`; per step, the collapse channels come first, then the
/// dephasing channels. Collapse increments have variance `γ dt`, dephasing
/// increments variance `γ_d dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRealization {
    pub seed: u64,
    pub trajectory: u64,
    pub dt: f64,
    pub increments: Vec<Vec<f64>>,
}

struct NoiseSource {
    rng: ChaCha8Rng,
    scales: Vec<f64>,
}

impl NoiseSource {
    fn new(seed: u64, trajectory: u64, cfg: &CollapseConfig, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trajectory);
        let mut scales = vec![(cfg.gamma * dt).sqrt(); cfg.channels.len()];
        if cfg.dephasing > 0.0 {
            scales.extend(std::iter::repeat_n((cfg.dephasing * dt).sqrt(), cfg.channels.len()));
        }
        NoiseSource { rng, scales }
    }

    fn fill(&mut self, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.scales) {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *o = s * z;
        }
    }
}

impl NoiseRealization {
    pub fn generate(seed: u64, trajectory: u64, cfg: &CollapseConfig, dt: f64, steps: usize) -> Self {
        let mut src = NoiseSource::new(seed, trajectory, cfg, dt);
        let increments = (0..steps)
            .map(|_| {
                let mut v = vec![0.0; src.scales.len()];
                src.fill(&mut v);
                v
            })
            .collect();
        NoiseRealization {
            seed,
            trajectory,
            dt,
            increments,
        }
    }

    /// Sample variance of the increments of `channel`.
    pub fn variance(&self, channel: usize) -> f64 {
        let xs: Vec<f64> = self.increments.iter().map(|v| v[channel]).collect();
        stats::variance(&xs)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Norm-preserving completion with renormalization.
    #[default]
    Completed,
    /// Raw linear equation `dψ = [−(i/ħ) H dt − Σ A_k dW_k] ψ`, no
    /// renormalization.
    Linear,
}

struct Workspace {
    hpsi: CVector,
    apsi: CVector,
    b: CVector,
    c: CVector,
    d: CVector,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let z = || CVector::zeros(n);
        Workspace {
            hpsi: z(),
            apsi: z(),
            b: z(),
            c: z(),
            d: z(),
        }
    }
}

fn step_in_place(psi: &mut CVector, hbar: f64, cfg: &CollapseConfig, dt: f64, dw: &[f64], kernel: Kernel, w: &mut Workspace) {
    let one = Complex64::new(1.0, 0.0);
    w.hpsi.gemv(one, &cfg.hamiltonian, psi, ZERO);
    w.d.copy_from(&w.hpsi);
    w.d *= -I * (dt / hbar);
    let k = cfg.channels.len();
    let n2 = psi.norm_squared();
    for (a, &dwk) in cfg.channels.iter().zip(dw) {
        w.apsi.gemv(one, a, psi, ZERO);
        match kernel {
            Kernel::Completed => {
                let m = psi.dotc(&w.apsi).re / n2;
                w.b.copy_from(&w.apsi);
                w.b.axpy(Complex64::new(-m, 0.0), psi, one);
                w.c.gemv(one, a, &w.b, ZERO);
                w.c.axpy(Complex64::new(-m, 0.0), &w.b, one);
                w.d.axpy(Complex64::new(-0.5 * cfg.gamma * dt, 0.0), &w.c, one);
                w.d.axpy(Complex64::new(dwk, 0.0), &w.b, one);
            }
            Kernel::Linear => {
                w.d.axpy(Complex64::new(-dwk, 0.0), &w.apsi, one);
            }
        }
    }
    if cfg.dephasing > 0.0 {
        for (a, &dv) in cfg.channels.iter().zip(&dw[k..]) {
            w.apsi.gemv(one, a, psi, ZERO);
            w.c.gemv(one, a, &w.apsi, ZERO);
            w.d.axpy(-I * dv, &w.apsi, one);
            w.d.axpy(Complex64::new(-0.5 * cfg.dephasing * dt, 0.0), &w.c, one);
        }
    }
    *psi += &w.d;
}

/// One Euler–Maruyama step of the completed equation, then renormalization.
/// `dw` holds `increments_per_step` entries.
pub fn sde_step(psi: &StateVector, cfg: &CollapseConfig, dt: f64, dw: &[f64]) -> Result<StateVector> {
    step_with(psi, cfg, dt, dw, Kernel::Completed)
}

/// One step of the uncompleted linear equation; the norm drifts.
pub fn linear_step(psi: &StateVector, cfg: &CollapseConfig, dt: f64, dw: &[f64]) -> Result<StateVector> {
    step_with(psi, cfg, dt, dw, Kernel::Linear)
}

fn step_with(psi: &StateVector, cfg: &CollapseConfig, dt: f64, dw: &[f64], kernel: Kernel) -> Result<StateVector> {
    if psi.dim() != cfg.dim() {
        return Err(Error::DimensionMismatch {
            expected: cfg.dim(),
            found: psi.dim(),
        });
    }
    if dw.len() != cfg.increments_per_step() {
        return Err(Error::DimensionMismatch {
            expected: cfg.increments_per_step(),
            found: dw.len(),
        });
    }
    let mut out = psi.clone();
    let mut w = Workspace::new(psi.dim());
    step_in_place(&mut out.amplitudes, psi.hbar, cfg, dt, dw, kernel, &mut w);
    if kernel == Kernel::Completed {
        let n = out.amplitudes.norm();
        out.amplitudes /= Complex64::new(n, 0.0);
    }
    out.time += dt;
    Ok(out)
}

/// Orthogonal projectors onto the joint eigenspaces of commuting self-adjoint
/// matrices, ordered by the eigenvalues of the first matrix, then the next.
pub fn joint_eigenspaces(ops: &[CMatrix]) -> Vec<CMatrix> {
    let d = ops.first().map_or(0, |a| a.nrows());
    let mut spaces = vec![CMatrix::identity(d, d)];
    for a in ops {
        let mut next = Vec::new();
        for basis in spaces {
            let reduced = basis.adjoint() * a * &basis;
            let eig = reduced.clone().symmetric_eigen();
            let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
            order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
            let scale = a.norm().max(1.0);
            let mut start = 0;
            while start < order.len() {
                let mut end = start + 1;
                while end < order.len() && eig.eigenvalues[order[end]] - eig.eigenvalues[order[end - 1]] <= 1e-8 * scale {
                    end += 1;
                }
                let cols: Vec<CVector> = order[start..end].iter().map(|&k| &basis * eig.eigenvectors.column(k)).collect();
                next.push(CMatrix::from_columns(&cols));
                start = end;
            }
        }
        spaces = next;
    }
    spaces.iter().map(|b| b * b.adjoint()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub t_final: f64,
    pub dt: f64,
    pub n_traj: usize,
    pub seed: u64,
    /// Number of evenly spaced snapshots, including `t = 0` and `t_final`.
    pub checkpoints: usize,
    pub kernel: Kernel,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t_final: 1.0,
            dt: 1e-3,
            n_traj: 1000,
            seed: 0,
            checkpoints: 10,
            kernel: Kernel::Completed,
            execution: Execution::Parallel,
        }
    }
}

impl RunConfig {
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Step index of each checkpoint.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let n = self.steps();
        let c = self.checkpoints.max(2);
        (0..c).map(|k| k * n / (c - 1)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub id: usize,
    /// Index into the ensemble's outcome projectors, if one is dominant at
    /// the end.
    pub outcome: Option<usize>,
    /// First time the final outcome reached the threshold and stayed there.
    pub resolve_time: Option<f64>,
    pub final_norm: f64,
    /// Mean relative norm change per unit time before renormalization.
    pub norm_rate: f64,
    pub checkpoints: Vec<CVector>,
}

#[derive(Clone, Debug)]
pub struct TrajectoryEnsemble {
    pub records: Vec<TrajectoryRecord>,
    pub outcomes: Vec<CMatrix>,
    pub checkpoint_times: Vec<f64>,
    pub seed: u64,
}

fn populations(psi: &CVector, outcomes: &[CMatrix]) -> Vec<f64> {
    let n2 = psi.norm_squared();
    outcomes.iter().map(|p| psi.dotc(&(p * psi)).re / n2).collect()
}

fn run_one(psi0: &StateVector, cfg: &CollapseConfig, run: &RunConfig, outcomes: &[CMatrix], id: usize) -> TrajectoryRecord {
    let steps = run.steps();
    let marks = run.checkpoint_steps();
    let mut src = NoiseSource::new(run.seed, id as u64, cfg, run.dt);
    let mut dw = vec![0.0; cfg.increments_per_step()];
    let mut w = Workspace::new(psi0.dim());
    let mut psi = psi0.amplitudes.clone();
    let mut checkpoints = Vec::with_capacity(marks.len());
    let mut next_mark = 0;
    let mut log_growth = 0.0;
    let mut above: Option<(usize, usize)> = None;
    for n in 0..=steps {
        while next_mark < marks.len() && marks[next_mark] == n {
            checkpoints.push(psi.clone());
            next_mark += 1;
        }
        let pops = populations(&psi, outcomes);
        let best = pops.iter().enumerate().fold((0, f64::MIN), |b, (k, &p)| if p > b.1 { (k, p) } else { b });
        above = match above {
            Some((k, since)) if k == best.0 && best.1 >= RESOLVE_THRESHOLD => Some((k, since)),
            _ if best.1 >= RESOLVE_THRESHOLD => Some((best.0, n)),
            _ => None,
        };
        if n == steps {
            break;
        }
        src.fill(&mut dw);
        let before = psi.norm_squared();
        step_in_place(&mut psi, psi0.hbar, cfg, run.dt, &dw, run.kernel, &mut w);
        let after = psi.norm_squared();
        log_growth += (after - before) / before;
        if run.kernel == Kernel::Completed {
            psi /= Complex64::new(after.sqrt(), 0.0);
        }
    }
    TrajectoryRecord {
        id,
        outcome: above.map(|(k, _)| k),
        resolve_time: above.map(|(_, since)| since as f64 * run.dt),
        final_norm: psi.norm(),
        norm_rate: if run.t_final > 0.0 { log_growth / run.t_final } else { 0.0 },
        checkpoints,
    }
}

/// Independent trajectories from `psi0`; trajectory `k` uses noise stream `k`.
pub fn run_trajectories(psi0: &StateVector, cfg: &CollapseConfig, run: &RunConfig) -> Result<TrajectoryEnsemble> {
    if psi0.dim() != cfg.dim() {
        return Err(Error::DimensionMismatch {
            expected: cfg.dim(),
            found: psi0.dim(),
        });
    }
    if !(run.dt > 0.0) || !(run.t_final >= 0.0) {
        return Err(Error::Config("dt must be positive and t_final nonnegative".into()));
    }
    let outcomes = joint_eigenspaces(cfg.channels());
    let records = map_indexed(run.execution, run.n_traj, |id| run_one(psi0, cfg, run, &outcomes, id));
    let checkpoint_times = run.checkpoint_steps().iter().map(|&n| n as f64 * run.dt).collect();
    Ok(TrajectoryEnsemble {
        records,
        outcomes,
        checkpoint_times,
        seed: run.seed,
    })
}

impl TrajectoryEnsemble {
    pub fn resolved(&self) -> usize {
        self.records.iter().filter(|r| r.outcome.is_some()).count()
    }

    pub fn resolved_fraction(&self) -> f64 {
        self.resolved() as f64 / self.records.len().max(1) as f64
    }

    /// Mean and standard error of the per-trajectory norm rate.
    pub fn norm_rate(&self) -> stats::Estimate {
        let xs: Vec<f64> = self.records.iter().map(|r| r.norm_rate).collect();
        independent_estimate(&xs)
    }

    /// Trajectory average of the normalized `|ψ⟩⟨ψ|` at a checkpoint, with
    /// entrywise standard errors of the real and imaginary parts.
    pub fn mean_density(&self, checkpoint: usize) -> DensityEstimate {
        let d = self.outcomes.first().map_or(0, |p| p.nrows());
        let n = self.records.len() as f64;
        let mut sum = CMatrix::zeros(d, d);
        let mut sq_re = DMatrix::<f64>::zeros(d, d);
        let mut sq_im = DMatrix::<f64>::zeros(d, d);
        for r in &self.records {
            let psi = &r.checkpoints[checkpoint];
            let rho = psi * psi.adjoint() / Complex64::new(psi.norm_squared(), 0.0);
            for i in 0..d {
                for j in 0..d {
                    sq_re[(i, j)] += rho[(i, j)].re * rho[(i, j)].re;
                    sq_im[(i, j)] += rho[(i, j)].im * rho[(i, j)].im;
                }
            }
            sum += rho;
        }
        let mean = sum / Complex64::new(n, 0.0);
        let se = |sq: f64, m: f64| if n > 1.0 { ((sq / n - m * m).max(0.0) / (n - 1.0)).sqrt() } else { 0.0 };
        DensityEstimate {
            stderr_re: DMatrix::from_fn(d, d, |i, j| se(sq_re[(i, j)], mean[(i, j)].re)),
            stderr_im: DMatrix::from_fn(d, d, |i, j| se(sq_im[(i, j)], mean[(i, j)].im)),
            mean,
        }
    }

    /// Rows `trajectory_id,outcome,resolve_time,final_norm`; unresolved
    /// trajectories have empty outcome and resolve time.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trajectory_id", "outcome", "resolve_time", "final_norm"])?;
        for r in &self.records {
            w.write_record([
                r.id.to_string(),
                r.outcome.map(|k| k.to_string()).unwrap_or_default(),
                r.resolve_time.map(|t| t.to_string()).unwrap_or_default(),
                r.final_norm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn independent_estimate(xs: &[f64]) -> stats::Estimate {
    let n = xs.len();
    stats::Estimate {
        mean: if n > 0 { stats::mean(xs) } else { 0.0 },
        stderr: if n > 1 { (stats::variance(xs) / n as f64).sqrt() } else { 0.0 },
        tau_int: 1.0,
        n,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
    pub mean: CMatrix,
    pub stderr_re: DMatrix<f64>,
    pub stderr_im: DMatrix<f64>,
}

impl DensityEstimate {
    /// Largest entrywise deviation from `reference` in standard errors.
    pub fn max_z(&self, reference: &CMatrix) -> f64 {
        let z = |d: f64, s: f64| {
            if s > 0.0 {
                d.abs() / s
            } else if d.abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        };
        let mut worst: f64 = 0.0;
        for i in 0..self.mean.nrows() {
            for j in 0..self.mean.ncols() {
                let d = self.mean[(i, j)] - reference[(i, j)];
                worst = worst.max(z(d.re, self.stderr_re[(i, j)])).max(z(d.im, self.stderr_im[(i, j)]));
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStat {
    pub outcome: usize,
    pub born: f64,
    pub count: u64,
    pub frequency: f64,
    /// Binomial standard deviation of the frequency under the Born value.
    pub sigma: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BornReport {
    pub trajectories: usize,
    pub unresolved: usize,
    pub resolved_fraction: f64,
    pub outcomes: Vec<OutcomeStat>,
    pub pass: bool,
}

/// Outcome frequencies against `⟨ψ0|P_i|ψ0⟩`. Passes when at least 99% of
/// trajectories resolved and every frequency lies within 3σ of its Born
/// value; the exact 3σ-level Clopper–Pearson interval is reported alongside.
pub fn born_statistics(ens: &TrajectoryEnsemble, psi0: &StateVector) -> BornReport {
    let n = ens.records.len() as u64;
    let born = populations(&psi0.amplitudes, &ens.outcomes);
    let conf = sigma_confidence(3.0);
    let outcomes: Vec<OutcomeStat> = born
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let count = ens.records.iter().filter(|r| r.outcome == Some(k)).count() as u64;
            let frequency = count as f64 / n.max(1) as f64;
            let sigma = (p * (1.0 - p) / n.max(1) as f64).sqrt();
            let (ci_low, ci_high) = clopper_pearson(count, n.max(1), conf);
            let pass = if sigma > 0.0 {
                (frequency - p).abs() <= 3.0 * sigma
            } else {
                (frequency - p).abs() < 1e-9
            };
            OutcomeStat {
                outcome: k,
                born: p,
                count,
                frequency,
                sigma,
                ci_low,
                ci_high,
                pass,
            }
        })
        .collect();
    let resolved_fraction = ens.resolved_fraction();
    let pass = resolved_fraction >= 0.99 && outcomes.iter().all(|o| o.pass);
    BornReport {
        trajectories: ens.records.len(),
        unresolved: ens.records.len() - ens.resolved(),
        resolved_fraction,
        outcomes,
        pass,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub times: Vec<f64>,
    /// `means[c][i]`: trajectory average of `⟨P_i⟩` at checkpoint `c`.
    pub means: Vec<Vec<stats::Estimate>>,
    pub initial: Vec<f64>,
    /// Largest deviation from the initial value in standard errors.
    pub max_z: f64,
}

/// Trajectory averages of the outcome populations at every checkpoint.
pub fn martingale_report(ens: &TrajectoryEnsemble) -> MartingaleReport {
    let n_cp = ens.checkpoint_times.len();
    let initial = ens.records.first().map(|r| populations(&r.checkpoints[0], &ens.outcomes)).unwrap_or_default();
    let mut means = Vec::with_capacity(n_cp);
    let mut max_z: f64 = 0.0;
    for c in 0..n_cp {
        let pops: Vec<Vec<f64>> = ens.records.iter().map(|r| populations(&r.checkpoints[c], &ens.outcomes)).collect();
        let row: Vec<stats::Estimate> = (0..ens.outcomes.len())
            .map(|i| independent_estimate(&pops.iter().map(|p| p[i]).collect::<Vec<_>>()))
            .collect();
        for (e, &p0) in row.iter().zip(&initial) {
            if c > 0 {
                max_z = max_z.max(e.z_score(p0));
            }
        }
        means.push(row);
    }
    MartingaleReport {
        times: ens.checkpoint_times.clone(),
        means,
        initial,
        max_z,
    }
}

/// Trace deviation that aborts Lindblad integration.
pub const TRACE_DRIFT_LIMIT: f64 = 1e-8;

fn lindblad_rhs(rho: &CMatrix, cfg: &CollapseConfig, hbar: f64) -> CMatrix {
    let h = &cfg.hamiltonian;
    let mut out = (h * rho - rho * h) * (-I / hbar);
    let rate = cfg.gamma + cfg.dephasing;
    if rate > 0.0 {
        for a in cfg.channels() {
            let inner = a * rho - rho * a;
            out -= (a * &inner - &inner * a) * Complex64::new(0.5 * rate, 0.0);
        }
    }
    out
}

/// RK4 integration of the averaged master equation up to time `t`, with
/// step `h` chosen so that `h · ‖L‖ ≤ 0.01`.
pub fn lindblad_evolve(rho0: &CMatrix, cfg: &CollapseConfig, t: f64, hbar: f64) -> Result<CMatrix> {
    if rho0.nrows() != cfg.dim() || !rho0.is_square() {
        return Err(Error::DimensionMismatch {
            expected: cfg.dim(),
            found: rho0.nrows(),
        });
    }
    check_self_adjoint(rho0, "initial density matrix")?;
    let tr0 = rho0.trace();
    if (tr0 - Complex64::new(1.0, 0.0)).norm() > 1e-9 {
        return Err(Error::Config(format!("initial density matrix has trace {tr0}")));
    }
    if rho0.clone().symmetric_eigen().eigenvalues.min() < -1e-10 {
        return Err(Error::Config("initial density matrix is not positive".into()));
    }
    if !(hbar > 0.0) || !(t >= 0.0) {
        return Err(Error::Config("hbar must be positive and t nonnegative".into()));
    }
    let rate = cfg.gamma + cfg.dephasing;
    let lnorm = 2.0 * cfg.hamiltonian.norm() / hbar + 2.0 * rate * cfg.channels().iter().map(|a| a.norm_squared()).sum::<f64>();
    let steps = ((t * lnorm / 0.01).ceil() as usize).max(1);
    let h = t / steps as f64;
    let mut rho = rho0.clone();
    for n in 0..steps {
        let k1 = lindblad_rhs(&rho, cfg, hbar);
        let k2 = lindblad_rhs(&(&rho + &k1 * Complex64::new(h / 2.0, 0.0)), cfg, hbar);
        let k3 = lindblad_rhs(&(&rho + &k2 * Complex64::new(h / 2.0, 0.0)), cfg, hbar);
        let k4 = lindblad_rhs(&(&rho + &k3 * Complex64::new(h, 0.0)), cfg, hbar);
        rho += (k1 + k2 * Complex64::new(2.0, 0.0) + k3 * Complex64::new(2.0, 0.0) + k4) * Complex64::new(h / 6.0, 0.0);
        let drift = (rho.trace() - tr0).norm();
        if drift > TRACE_DRIFT_LIMIT {
            return Err(Error::Consistency(format!(
                "trace drifted by {drift:.3e} at t = {}",
                (n + 1) as f64 * h
            )));
        }
    }
    Ok(rho)
}

/// Closed-form coherence of an energy-driven two-level system,
/// `ρ₀₁(t) = ρ₀₁(0) exp(−i(E₀ − E₁)t/ħ − γ(E₁ − E₀)² t / 2)`.
pub fn closed_form_coherence(rho01: Complex64, e0: f64, e1: f64, gamma: f64, hbar: f64, t: f64) -> Complex64 {
    let de = e1 - e0;
    rho01 * Complex64::new(-gamma * de * de * t / 2.0, -(e0 - e1) * t / hbar).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundProjector {
    pub projector: CMatrix,
    pub energy: f64,
    pub gap: f64,
    /// Largest entrywise difference between the eigenvector projector and
    /// the contour quadrature.
    pub contour_deviation: f64,
}

/// Number of trapezoid nodes in the resolvent contour quadrature.
pub const CONTOUR_NODES: usize = 64;

/// `ψ₀ψ₀†` from the eigen-decomposition, cross-checked against
/// `(2πi)⁻¹ ∮ dz (z − H)⁻¹` on a circle of radius gap/2 around `E₀`.
pub fn ground_state_projector(h: &CMatrix) -> Result<GroundProjector> {
    check_self_adjoint(h, "H_eff")?;
    let d = h.nrows();
    let eig = h.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let e0 = eig.eigenvalues[order[0]];
    let gap = if d > 1 { eig.eigenvalues[order[1]] - e0 } else { f64::INFINITY };
    if gap <= 1e-8 {
        return Err(Error::Degenerate(format!("lowest eigenvalue has gap {gap:.3e}")));
    }
    let v = eig.eigenvectors.column(order[0]).into_owned();
    let projector = &v * v.adjoint();
    let radius = if gap.is_finite() { gap / 2.0 } else { 1.0 };
    let mut contour = CMatrix::zeros(d, d);
    for k in 0..CONTOUR_NODES {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / CONTOUR_NODES as f64;
        let w = Complex64::from_polar(radius, theta);
        let z = Complex64::new(e0, 0.0) + w;
        let resolvent = (CMatrix::identity(d, d) * z - h)
            .try_inverse()
            .ok_or_else(|| Error::Consistency("resolvent is singular on the contour".into()))?;
        contour += resolvent * (w / CONTOUR_NODES as f64);
    }
    let contour_deviation = (&contour - &projector).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if contour_deviation > 1e-8 {
        return Err(Error::Consistency(format!(
            "contour quadrature disagrees with the eigenvector projector by {contour_deviation:.3e}"
        )));
    }
    Ok(GroundProjector {
        projector,
        energy: e0,
        gap,
        contour_deviation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBridge {
    pub hbar: f64,
    /// Scalar fluctuation `K = Tr M / N` with `M = −i_eff C̃ / ħ − 1`.
    pub k_re: Vec<f64>,
    pub k_im: Vec<f64>,
    /// Frobenius norm of the traceless part `𝒩 = M − K`.
    pub n_norm: Vec<f64>,
    pub k_variance: f64,
    pub n_mean_square: f64,
    /// Integrated autocorrelation time of `Re K`, in series steps.
    pub k_autocorrelation_time: f64,
    /// Ljung–Box whiteness test of `Re K` over `lags` lags.
    pub ljung_box_q: f64,
    pub ljung_box_p: f64,
    pub lags: usize,
}

/// Splits a C̃ series into its scalar and traceless fluctuations around
/// `i_eff ħ`. With `hbar = None`, ħ is taken from the series mean.
pub fn ctilde_noise_bridge(series: &[MatrixValue], hbar: Option<f64>, lags: usize) -> Result<NoiseBridge> {
    let first = series.first().ok_or(Error::EmptySamples)?;
    let n = first.dim();
    let ieff = i_eff(n)?;
    let ie = ieff.to_dmatrix();
    let mats: Vec<CMatrix> = series
        .iter()
        .map(|m| {
            if m.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: m.dim(),
                });
            }
            Ok(m.to_dmatrix())
        })
        .collect::<Result<_>>()?;
    let hbar = match hbar {
        Some(h) => h,
        None => {
            let mean: Complex64 = mats.iter().map(|c| (&ie * c).trace()).sum::<Complex64>() / mats.len() as f64;
            -mean.re / n as f64
        }
    };
    if hbar == 0.0 || !hbar.is_finite() {
        return Err(Error::Consistency(format!("effective hbar {hbar} cannot normalize the series")));
    }
    let mut k_re = Vec::with_capacity(mats.len());
    let mut k_im = Vec::with_capacity(mats.len());
    let mut n_norm = Vec::with_capacity(mats.len());
    for c in &mats {
        let m = -(&ie * c) / Complex64::new(hbar, 0.0) - CMatrix::identity(n, n);
        let k = m.trace() / n as f64;
        let traceless = m - CMatrix::identity(n, n) * k;
        k_re.push(k.re);
        k_im.push(k.im);
        n_norm.push(traceless.norm());
    }
    let (ljung_box_q, ljung_box_p) = ljung_box(&k_re, lags);
    Ok(NoiseBridge {
        hbar,
        k_variance: stats::variance(&k_re) + stats::variance(&k_im),
        n_mean_square: n_norm.iter().map(|x| x * x).sum::<f64>() / n_norm.len() as f64,
        k_autocorrelation_time: stats::integrated_autocorrelation(&k_re),
        k_re,
        k_im,
        n_norm,
        ljung_box_q,
        ljung_box_p,
        lags,
    })
}

/// C̃ of every sample, chains concatenated in order.
pub fn ctilde_series_from_samples(samples: &SampleSet) -> Result<Vec<MatrixValue>> {
    samples.iter().map(crate::dynamics::charge_ctilde).collect()
}

/// C̃ at every stored snapshot of a trajectory.
pub fn ctilde_series_from_trajectory(traj: &Trajectory) -> Result<Vec<MatrixValue>> {
    traj.snapshots.iter().map(crate::dynamics::charge_ctilde).collect()
}
