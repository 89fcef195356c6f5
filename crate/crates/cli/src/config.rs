//! Experiment configuration: a TOML document with strict keys.
//!
//! Parsing never touches the filesystem. Every error carries the line and
//! column of the offending key when one exists; see `docs/config.md` for the
//! full grammar.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use tracedyn::collapse::{CollapseConfig, Kernel, Mode, StateVector};
use tracedyn::dynamics::Scheme;
use tracedyn::ensemble::{EnsembleParams, Subgroup};
use tracedyn::{Kind, MatrixPolynomial, MatrixValue, Registry, Roster, TracePolynomial, VariableSpec};

/// Experiment names with a one-line description, in `list` order.
pub const EXPERIMENTS: [(&str, &str); 9] = [
    ("conservation", "integrate the equations of motion and tabulate the drift of H, N and C̃"),
    ("liouville", "phase-space divergence, bracket Jacobi residuals and derivative checks"),
    ("ensemble_gaussian", "Metropolis sampling of the canonical ensemble against an equipartition value"),
    ("ward", "term-by-term Ward identity averages for a list of (W, x) choices"),
    ("hbar", "effective ħ from ⟨C̃⟩, gauge independence under unitary fixing, emergent commutator"),
    ("collapse_born", "energy-driven or CSL collapse: outcome frequencies and martingale checkpoints"),
    ("collapse_lindblad", "trajectory-averaged density matrix against the master equation, linear-kernel norm drift"),
    ("degenerate_contrast", "branch populations of a degenerate superposition, energy-driven versus CSL"),
    ("noise_bridge", "split a C̃ series into scalar and traceless fluctuations around i_eff ħ"),
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    At { line: usize, column: usize, message: String },
    #[error("{0}")]
    General(String),
}

impl ConfigError {
    fn at(text: &str, span: Range<usize>, message: impl Into<String>) -> Self {
        // defaults carry an empty span at 0
        if span.is_empty() && span.start == 0 {
            return ConfigError::General(message.into());
        }
        let (line, column) = line_col(text, span.start);
        ConfigError::At {
            line,
            column,
            message: message.into(),
        }
    }
}

/// One-based line and column of a byte offset.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.chars().count(), |k| before[k + 1..].chars().count()) + 1;
    (line, column)
}

fn default_seed() -> u64 {
    0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Spanned<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub collapse: CollapseSection,
    #[serde(default)]
    pub noise: NoiseSection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantMatrix {
    /// Row-major real parts, `dim²` entries.
    pub re: Spanned<Vec<f64>>,
    #[serde(default)]
    pub im: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub dim: Spanned<usize>,
    pub bosonic: Spanned<Vec<String>>,
    pub fermionic: Vec<String>,
    /// Grassmann generators; 4 when fermions are present and 0 otherwise.
    pub generators: Option<u32>,
    /// Harmonic in every boson plus a fermion mass term when absent.
    pub hamiltonian: Option<Spanned<String>>,
    pub init_scale: f64,
    pub constants: BTreeMap<String, ConstantMatrix>,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection {
            dim: Spanned::new(0..0, 2),
            bosonic: Spanned::new(0..0, vec!["1".into()]),
            fermionic: Vec::new(),
            generators: None,
            hamiltonian: None,
            init_scale: 0.5,
            constants: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub t_final: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub record_every: usize,
    /// Largest accepted relative drift of each charge.
    pub tolerance: f64,
    /// When positive, this many random Hamiltonians replace `system.hamiltonian`.
    pub random_hamiltonians: usize,
    pub random_degree: usize,
    pub random_words: usize,
    pub random_strength: f64,
    /// Phase-space points per Hamiltonian for the divergence check.
    pub points: usize,
    pub fd_step: f64,
    /// Random cases for the Jacobi and derivative checks.
    pub algebra_cases: usize,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        DynamicsSection {
            t_final: 10.0,
            dt: 1e-3,
            scheme: Scheme::Rk4,
            record_every: 10,
            tolerance: 1e-5,
            random_hamiltonians: 0,
            random_degree: 4,
            random_words: 4,
            random_strength: 0.3,
            points: 50,
            fd_step: 1e-4,
            algebra_cases: 100,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WardChoice {
    /// Matrix polynomial written as a trace polynomial; its words are used
    /// without the trace.
    pub w: Spanned<String>,
    /// Variable letter such as `q1` or `p2`.
    pub x: Spanned<String>,
}

fn unspanned<T>(v: T) -> Spanned<T> {
    Spanned::new(0..0, v)
}

fn default_hamiltonian(bosons: &[String], fermions: &[String]) -> String {
    let mut words: Vec<String> = bosons.iter().map(|b| format!("tr(p{b} p{b}) + tr(q{b} q{b})")).collect();
    words.extend(fermions.iter().map(|f| format!("(0+1i) * tr(q{f} p{f})")));
    words.join(" + ")
}

fn default_ward(b: &str) -> Vec<WardChoice> {
    let (q, p) = (format!("q{b}"), format!("p{b}"));
    [
        (format!("tr({q})"), &q),
        (format!("tr({p})"), &q),
        (format!("tr({q} {q})"), &q),
        (format!("tr({q} {p})"), &p),
        (format!("tr({p} {p})"), &p),
    ]
    .into_iter()
    .map(|(w, x)| WardChoice {
        w: unspanned(w),
        x: unspanned(x.clone()),
    })
    .collect()
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub tau: f64,
    pub eta: f64,
    pub lambda_hat: Spanned<f64>,
    pub n_samples: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub step_scale: f64,
    pub thin: usize,
    /// Trace observables averaged by `ensemble_gaussian` and compared by
    /// `hbar`; `Tr q²` of the first boson when absent.
    pub observables: Option<Vec<Spanned<String>>>,
    /// Expected value of the first observable; `N²/(2τ)` when absent.
    pub expected: Option<f64>,
    /// Five choices built on the first boson when absent.
    pub ward: Option<Vec<WardChoice>>,
    pub commutator: Option<WardChoice>,
    pub fix_subgroup: Subgroup,
    pub fix_label: Option<String>,
    pub write_samples: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            tau: 1.0,
            eta: 0.0,
            lambda_hat: Spanned::new(0..0, 0.0),
            n_samples: 100_000,
            burn_in: 5_000,
            chains: 4,
            step_scale: 0.5,
            thin: 1,
            observables: None,
            expected: None,
            ward: None,
            commutator: None,
            fix_subgroup: Subgroup::Full,
            fix_label: None,
            write_samples: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseSection {
    pub mode: Mode,
    /// Diagonal of H_eff; ignored when `hamiltonian` is given.
    pub energies: Spanned<Vec<f64>>,
    /// Real symmetric H_eff, one array per row.
    pub hamiltonian: Option<Spanned<Vec<Vec<f64>>>>,
    /// Real symmetric channel operators for CSL mode; basis projectors when absent.
    pub channels: Option<Spanned<Vec<Vec<Vec<f64>>>>>,
    pub gamma: f64,
    pub hbar: f64,
    pub dephasing: f64,
    /// Real amplitudes, normalized on load.
    pub initial: Option<Spanned<Vec<f64>>>,
    pub initial_im: Option<Vec<f64>>,
    pub t_final: f64,
    pub dt: f64,
    pub n_traj: usize,
    pub checkpoints: usize,
    pub kernel: Kernel,
    /// Branches per energy level in `degenerate_contrast`.
    pub branches: usize,
    /// Also run the linear kernel in `collapse_lindblad`.
    pub linear_check: bool,
}

impl Default for CollapseSection {
    fn default() -> Self {
        CollapseSection {
            mode: Mode::EnergyDriven,
            energies: Spanned::new(0..0, vec![0.0, 1.0]),
            hamiltonian: None,
            channels: None,
            gamma: 10.0,
            hbar: 1.0,
            dephasing: 0.0,
            initial: None,
            initial_im: None,
            t_final: 2.0,
            dt: 1e-3,
            n_traj: 10_000,
            checkpoints: 10,
            kernel: Kernel::Completed,
            branches: 2,
            linear_check: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSource {
    #[default]
    Ensemble,
    Dynamics,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub source: NoiseSource,
    pub lags: usize,
    /// Fixed normalization; the series mean when absent.
    pub hbar: Option<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            source: NoiseSource::Ensemble,
            lags: 20,
            hbar: None,
        }
    }
}

/// Everything an experiment needs, built and checked from a config.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub roster: Arc<Roster>,
    pub dim: usize,
    pub generators: u32,
    pub hamiltonian: TracePolynomial,
    pub registry: Registry,
    pub observables: Vec<TracePolynomial>,
    pub ward: Vec<(MatrixPolynomial, (String, Kind))>,
    pub commutator: Option<(MatrixPolynomial, (String, Kind))>,
}

impl Resolved {
    pub fn experiment(&self) -> &str {
        self.config.experiment.get_ref()
    }

    pub fn ensemble_params(&self) -> tracedyn::Result<EnsembleParams> {
        let e = &self.config.ensemble;
        EnsembleParams::new(e.tau, e.eta, *e.lambda_hat.get_ref(), self.dim, self.roster.clone())
    }

    /// Resolved config as canonical JSON; the manifest echoes it.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON without `out`, which does not affect
    /// results.
    pub fn hash(&self) -> String {
        let mut v = self.to_json();
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        let bytes = serde_json::to_vec(&v).expect("json");
        hex(&Sha256::digest(&bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn poly_at(text: &str, s: &Spanned<String>) -> Result<TracePolynomial, ConfigError> {
    TracePolynomial::parse(s.get_ref()).map_err(|e| ConfigError::at(text, s.span(), format!("malformed polynomial: {e}")))
}

fn letter_at(text: &str, s: &Spanned<String>, roster: &Roster) -> Result<(String, Kind), ConfigError> {
    let v = s.get_ref();
    let kind = match v.as_bytes().first() {
        Some(b'q') => Kind::Q,
        Some(b'p') => Kind::P,
        _ => return Err(ConfigError::at(text, s.span(), format!("`{v}` is not a variable letter like q1 or p1"))),
    };
    let label = &v[1..];
    if roster.index_of(label).is_none() {
        return Err(ConfigError::at(text, s.span(), format!("unknown variable label `{label}`")));
    }
    Ok((label.to_string(), kind))
}

fn check_labels(text: &str, poly: &TracePolynomial, roster: &Roster, span: Range<usize>) -> Result<(), ConfigError> {
    for (label, _) in poly.variables() {
        if roster.index_of(&label).is_none() {
            return Err(ConfigError::at(text, span, format!("unknown variable label `{label}`")));
        }
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::General(format!("{name} must be finite and positive, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<(), ConfigError> {
    if v > 0 {
        Ok(())
    } else {
        Err(ConfigError::General(format!("{name} must be at least 1")))
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<Resolved, ConfigError> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| match e.span() {
        Some(span) => ConfigError::at(text, span, e.message().trim()),
        None => ConfigError::General(e.message().trim().to_string()),
    })?;
    resolve(text, config)
}

/// Validates an already parsed config; `text` anchors error positions.
pub fn resolve(text: &str, mut config: ExperimentConfig) -> Result<Resolved, ConfigError> {
    let name = config.experiment.get_ref();
    if !EXPERIMENTS.iter().any(|(n, _)| n == name) {
        let known: Vec<&str> = EXPERIMENTS.iter().map(|(n, _)| *n).collect();
        return Err(ConfigError::at(
            text,
            config.experiment.span(),
            format!("unknown experiment `{name}`; expected one of {}", known.join(", ")),
        ));
    }
    let sys = &mut config.system;
    let dim = *sys.dim.get_ref();
    if dim == 0 {
        return Err(ConfigError::at(text, sys.dim.span(), "dim must be at least 1"));
    }
    let mut vars: Vec<VariableSpec> = sys.bosonic.get_ref().iter().map(VariableSpec::bosonic).collect();
    vars.extend(sys.fermionic.iter().map(VariableSpec::fermionic));
    let roster = Roster::new(vars).map_err(|e| ConfigError::at(text, sys.bosonic.span(), e.to_string()))?;
    if roster.is_empty() {
        return Err(ConfigError::at(text, sys.bosonic.span(), "the roster needs at least one variable"));
    }
    let generators = *sys.generators.get_or_insert(if sys.fermionic.is_empty() { 0 } else { 4 });
    if !sys.fermionic.is_empty() && generators < 2 {
        return Err(ConfigError::General("fermionic variables need at least 2 generators".into()));
    }
    if generators > 16 {
        return Err(ConfigError::General(format!("at most 16 generators are supported, got {generators}")));
    }
    positive("system.init_scale", sys.init_scale)?;
    let h_text = sys
        .hamiltonian
        .get_or_insert_with(|| unspanned(default_hamiltonian(sys.bosonic.get_ref(), &sys.fermionic)));
    let hamiltonian = poly_at(text, h_text)?;
    check_labels(text, &hamiltonian, &roster, h_text.span())?;
    let first_boson = sys.bosonic.get_ref().first().cloned();
    let mut registry = Registry::new();
    for (tag, m) in &sys.constants {
        let re = m.re.get_ref();
        let im = m.im.clone().unwrap_or_else(|| vec![0.0; re.len()]);
        if re.len() != dim * dim || im.len() != dim * dim {
            return Err(ConfigError::at(
                text,
                m.re.span(),
                format!("constant `{tag}` needs {} row-major entries", dim * dim),
            ));
        }
        let entries: Vec<Complex64> = re.iter().zip(&im).map(|(&a, &b)| Complex64::new(a, b)).collect();
        registry
            .insert(tag, MatrixValue::from_rows(dim, &entries))
            .map_err(|e| ConfigError::at(text, m.re.span(), e.to_string()))?;
    }

    let dynm = &config.dynamics;
    positive("dynamics.dt", dynm.dt)?;
    if !(dynm.t_final >= 0.0 && dynm.t_final.is_finite()) {
        return Err(ConfigError::General(format!("dynamics.t_final must be ≥ 0, got {}", dynm.t_final)));
    }
    positive("dynamics.tolerance", dynm.tolerance)?;
    positive("dynamics.fd_step", dynm.fd_step)?;
    nonzero("dynamics.record_every", dynm.record_every)?;
    if dynm.random_hamiltonians > 0 && dynm.random_degree < 2 {
        return Err(ConfigError::General("dynamics.random_degree must be at least 2".into()));
    }

    if let Some(b) = &first_boson {
        let ens = &mut config.ensemble;
        ens.observables.get_or_insert_with(|| vec![unspanned(format!("tr(q{b} q{b})"))]);
        ens.ward.get_or_insert_with(|| default_ward(b));
    }
    let ens = &config.ensemble;
    let lambda_hat = *ens.lambda_hat.get_ref();
    if lambda_hat != 0.0 && dim % 2 == 1 {
        return Err(ConfigError::at(
            text,
            ens.lambda_hat.span(),
            format!("N = {dim} must be even when lambda_hat ≠ 0 (i_eff needs an even dimension)"),
        ));
    }
    EnsembleParams::new(ens.tau, ens.eta, lambda_hat, dim, Arc::new(roster.clone()))
        .map_err(|e| ConfigError::at(text, ens.lambda_hat.span(), e.to_string()))?;
    nonzero("ensemble.n_samples", ens.n_samples)?;
    nonzero("ensemble.chains", ens.chains)?;
    nonzero("ensemble.thin", ens.thin)?;
    positive("ensemble.step_scale", ens.step_scale)?;
    let mut observables = Vec::new();
    for o in ens.observables.iter().flatten() {
        let p = poly_at(text, o)?;
        check_labels(text, &p, &roster, o.span())?;
        observables.push(p);
    }
    let matrix_choice = |c: &WardChoice| -> Result<(MatrixPolynomial, (String, Kind)), ConfigError> {
        let p = poly_at(text, &c.w)?;
        check_labels(text, &p, &roster, c.w.span())?;
        Ok((MatrixPolynomial::new(p.words().to_vec()), letter_at(text, &c.x, &roster)?))
    };
    let ward = ens.ward.iter().flatten().map(matrix_choice).collect::<Result<Vec<_>, _>>()?;
    let commutator = ens.commutator.as_ref().map(matrix_choice).transpose()?;
    if let Some(l) = &ens.fix_label {
        if roster.parity_of(l) != Some(tracedyn::Parity::Bosonic) {
            return Err(ConfigError::General(format!("ensemble.fix_label `{l}` is not a bosonic label")));
        }
    }

    let col = &config.collapse;
    positive("collapse.dt", col.dt)?;
    positive("collapse.hbar", col.hbar)?;
    positive("collapse.t_final", col.t_final)?;
    nonzero("collapse.n_traj", col.n_traj)?;
    nonzero("collapse.branches", col.branches)?;
    if !(col.gamma >= 0.0 && col.gamma.is_finite()) {
        return Err(ConfigError::General(format!("collapse.gamma must be finite and ≥ 0, got {}", col.gamma)));
    }
    let lags = config.noise.lags;
    nonzero("noise.lags", lags)?;
    if let Some(h) = config.noise.hbar {
        if !(h != 0.0 && h.is_finite()) {
            return Err(ConfigError::General(format!("noise.hbar must be finite and nonzero, got {h}")));
        }
    }

    let resolved = Resolved {
        roster: Arc::new(roster),
        dim,
        generators,
        hamiltonian,
        registry,
        observables,
        ward,
        commutator,
        config,
    };
    // Collapse inputs are only checked for the experiments that read them.
    if resolved.experiment().starts_with("collapse") {
        collapse_setup(text, &resolved)?;
    }
    if resolved.experiment() == "degenerate_contrast" && resolved.config.collapse.energies.get_ref().is_empty() {
        return Err(ConfigError::at(text, resolved.config.collapse.energies.span(), "energies must not be empty"));
    }
    Ok(resolved)
}

fn real_matrix(rows: &[Vec<f64>]) -> Option<DMatrix<Complex64>> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return None;
    }
    Some(DMatrix::from_fn(d, d, |i, j| Complex64::new(rows[i][j], 0.0)))
}

/// Collapse model and initial state of the `collapse_*` experiments.
pub fn collapse_setup(text: &str, r: &Resolved) -> Result<(CollapseConfig, StateVector), ConfigError> {
    let c = &r.config.collapse;
    let h = match &c.hamiltonian {
        Some(rows) => real_matrix(rows.get_ref())
            .ok_or_else(|| ConfigError::at(text, rows.span(), "hamiltonian must be a nonempty square array of rows"))?,
        None => {
            let e = c.energies.get_ref();
            if e.is_empty() {
                return Err(ConfigError::at(text, c.energies.span(), "energies must not be empty"));
            }
            DMatrix::from_diagonal(&DVector::from_iterator(e.len(), e.iter().map(|&x| Complex64::new(x, 0.0))))
        }
    };
    let d = h.nrows();
    let channels = match (&c.mode, &c.channels) {
        (Mode::EnergyDriven, Some(ch)) => {
            return Err(ConfigError::at(text, ch.span(), "channels are only read in csl mode"));
        }
        (Mode::EnergyDriven, None) => Vec::new(),
        (Mode::Csl, Some(ch)) => ch
            .get_ref()
            .iter()
            .map(|m| real_matrix(m).filter(|m| m.nrows() == d))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| ConfigError::at(text, ch.span(), format!("every channel must be a {d}×{d} array of rows")))?,
        (Mode::Csl, None) => (0..d)
            .map(|k| DMatrix::from_fn(d, d, |i, j| Complex64::new(if i == k && j == k { 1.0 } else { 0.0 }, 0.0)))
            .collect(),
    };
    let cfg = CollapseConfig::new(c.mode, h, channels, c.gamma)
        .and_then(|cfg| cfg.with_dephasing(c.dephasing))
        .map_err(|e| ConfigError::General(format!("collapse: {e}")))?;
    let (re, span) = match &c.initial {
        Some(v) => (v.get_ref().clone(), v.span()),
        None if d == 2 => (vec![0.3f64.sqrt(), 0.7f64.sqrt()], 0..0),
        None => (vec![1.0; d], 0..0),
    };
    let im = c.initial_im.clone().unwrap_or_else(|| vec![0.0; re.len()]);
    if re.len() != d || im.len() != d {
        return Err(ConfigError::at(text, span, format!("initial state needs {d} amplitudes")));
    }
    let amps = DVector::from_iterator(d, re.iter().zip(&im).map(|(&a, &b)| Complex64::new(a, b)));
    let psi = StateVector::new(amps, c.hbar).map_err(|e| ConfigError::at(text, span, e.to_string()))?;
    Ok((cfg, psi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let r = parse_config("experiment = \"conservation\"\n").unwrap();
        assert_eq!(r.dim, 2);
        assert_eq!(r.generators, 0);
        assert_eq!(r.roster.len(), 1);
        assert_eq!(r.ward.len(), 5);
        assert_eq!(r.to_json()["system"]["hamiltonian"], "tr(p1 p1) + tr(q1 q1)");
    }

    #[test]
    fn defaults_follow_the_roster() {
        let r = parse_config("experiment = \"ward\"\n[system]\nbosonic = [\"a\", \"b\"]\nfermionic = [\"f\"]\n").unwrap();
        assert_eq!(r.hamiltonian.words().len(), 5);
        assert_eq!(r.ward[0].1, ("a".to_string(), Kind::Q));
        assert_eq!(r.to_json()["ensemble"]["observables"][0], "tr(qa qa)");
    }

    #[test]
    fn fermions_get_generators() {
        let r = parse_config("experiment = \"conservation\"\n[system]\nfermionic = [\"f\"]\n").unwrap();
        assert_eq!(r.generators, 4);
        assert_eq!(r.to_json()["system"]["generators"], 4);
    }

    #[test]
    fn unknown_label_in_hamiltonian_is_anchored() {
        let text = "experiment = \"conservation\"\n[system]\nhamiltonian = \"tr(q7 q7)\"\n";
        match parse_config(text) {
            Err(ConfigError::At { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("`7`"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ward_letter_must_name_a_variable() {
        let text = "experiment = \"ward\"\n[[ensemble.ward]]\nw = \"tr(q1)\"\nx = \"z1\"\n";
        assert!(matches!(parse_config(text), Err(ConfigError::At { line: 4, .. })));
    }

    #[test]
    fn hash_ignores_out_but_not_seed() {
        let a = parse_config("experiment = \"liouville\"\nout = \"a\"\n").unwrap();
        let b = parse_config("experiment = \"liouville\"\nout = \"b\"\n").unwrap();
        let c = parse_config("experiment = \"liouville\"\nseed = 3\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn collapse_channels_must_commute() {
        let text = "experiment = \"collapse_born\"\n[collapse]\nmode = \"csl\"\nchannels = [[[0.0, 1.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, -1.0]]]\n";
        assert!(parse_config(text).is_err());
    }
}
