//! Matrix-valued dynamical variables and the classical phase space.
//!
//! [`MatrixValue`] stores an `N×N` matrix whose entries live in a Grassmann
//! algebra with `G` generators as `2^G` complex component matrices, one per
//! monomial: `M = Σ_m M_m θ^m`. Bosonic data in a purely bosonic state uses
//! `G = 0`, which is just a complex matrix. A `G = 0` matrix combines with
//! any other algebra; two matrices over different nonzero generator counts
//! do not.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grassmann::{conj_monomial, reorder_sign, ConjConvention, GrassmannElement, DROP_TOLERANCE};

pub type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Conjugation convention used by [`MatrixValue::adjoint`]. With it, the
/// fermionic anticommutator `{q, q†}` is anti-self-adjoint, so the Millard
/// charge is anti-self-adjoint for mixed rosters with `p = q†`.
pub const PHYSICS_CONVENTION: ConjConvention = ConjConvention::OrderPreserving;

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixValue {
    dim: usize,
    generators: u32,
    // component-major: data[mask * dim² + row * dim + col]
    data: Vec<Complex64>,
}

impl MatrixValue {
    pub fn zeros(dim: usize, generators: u32) -> Self {
        MatrixValue {
            dim,
            generators,
            data: vec![ZERO; (1usize << generators) * dim * dim],
        }
    }

    pub fn identity(dim: usize, generators: u32) -> Self {
        let mut m = Self::zeros(dim, generators);
        for i in 0..dim {
            m.data[i * dim + i] = ONE;
        }
        m
    }

    /// Complex matrix from row-major entries.
    pub fn from_rows(dim: usize, entries: &[Complex64]) -> Self {
        assert_eq!(entries.len(), dim * dim, "row-major entry count");
        MatrixValue {
            dim,
            generators: 0,
            data: entries.to_vec(),
        }
    }

    pub fn from_real_rows(dim: usize, entries: &[f64]) -> Self {
        let v: Vec<Complex64> = entries.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Self::from_rows(dim, &v)
    }

    pub fn from_diagonal(diag: &[Complex64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, 0);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_dmatrix(m: &CMatrix) -> Self {
        assert!(m.is_square(), "square matrix required");
        let n = m.nrows();
        let mut out = Self::zeros(n, 0);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = m[(i, j)];
            }
        }
        out
    }

    /// Body (mask 0 component) as an nalgebra matrix.
    pub fn to_dmatrix(&self) -> CMatrix {
        let n = self.dim;
        CMatrix::from_fn(n, n, |i, j| self.data[i * n + j])
    }

    /// Builds a matrix from Grassmann entries sharing one algebra.
    pub fn from_entries(dim: usize, generators: u32, entries: &[GrassmannElement]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: entries.len(),
            });
        }
        let mut out = Self::zeros(dim, generators);
        for (k, e) in entries.iter().enumerate() {
            if e.generators() != generators {
                return Err(Error::AlgebraMismatch {
                    left: generators,
                    right: e.generators(),
                });
            }
            for (mask, c) in e.terms() {
                out.data[mask as usize * dim * dim + k] = c;
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generators(&self) -> u32 {
        self.generators
    }

    pub fn entry(&self, row: usize, col: usize) -> GrassmannElement {
        let nn = self.dim * self.dim;
        let k = row * self.dim + col;
        GrassmannElement::from_terms(
            self.generators,
            (0..1usize << self.generators)
                .map(|m| (m as u64, self.data[m * nn + k]))
                .filter(|(_, c)| *c != ZERO),
        )
    }

    /// Complex value of a pure (`G = 0`) matrix entry, or the body otherwise.
    pub fn body_entry(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.dim + col]
    }

    pub fn component(&self, mask: u64) -> &[Complex64] {
        let nn = self.dim * self.dim;
        &self.data[mask as usize * nn..(mask as usize + 1) * nn]
    }

    pub(crate) fn raw(&self) -> &[Complex64] {
        &self.data
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Masks whose component matrix has a nonzero entry.
    pub fn support(&self) -> Vec<u64> {
        let nn = self.dim * self.dim;
        (0..1usize << self.generators)
            .filter(|&m| self.data[m * nn..(m + 1) * nn].iter().any(|c| *c != ZERO))
            .map(|m| m as u64)
            .collect()
    }

    /// Same matrix embedded in a larger algebra.
    pub fn promote(&self, generators: u32) -> Result<Self> {
        if generators == self.generators {
            return Ok(self.clone());
        }
        if self.generators != 0 {
            return Err(Error::AlgebraMismatch {
                left: self.generators,
                right: generators,
            });
        }
        let mut out = Self::zeros(self.dim, generators);
        out.data[..self.data.len()].copy_from_slice(&self.data);
        Ok(out)
    }

    fn joint_generators(&self, other: &Self) -> Result<u32> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        match (self.generators, other.generators) {
            (a, b) if a == b => Ok(a),
            (0, b) => Ok(b),
            (a, 0) => Ok(a),
            (a, b) => Err(Error::AlgebraMismatch { left: a, right: b }),
        }
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.try_axpy(Complex64::new(1.0, 0.0), other)
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.try_axpy(Complex64::new(-1.0, 0.0), other)
    }

    /// `self + a·other`.
    pub fn try_axpy(&self, a: Complex64, other: &Self) -> Result<Self> {
        let g = self.joint_generators(other)?;
        let mut out = self.promote(g)?;
        for (o, x) in out.data.iter_mut().zip(&other.data) {
            *o += a * x;
        }
        Ok(out)
    }

    pub(crate) fn axpy_in_place(&mut self, a: Complex64, other: &Self) -> Result<()> {
        let g = self.joint_generators(other)?;
        if g != self.generators {
            *self = self.promote(g)?;
        }
        for (o, x) in self.data.iter_mut().zip(&other.data) {
            *o += a * x;
        }
        Ok(())
    }

    pub fn scale(&self, s: Complex64) -> Self {
        MatrixValue {
            dim: self.dim,
            generators: self.generators,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn try_mul(&self, other: &Self) -> Result<Self> {
        let g = self.joint_generators(other)?;
        let n = self.dim;
        let nn = n * n;
        let mut out = Self::zeros(n, g);
        let sa = self.support();
        let sb = other.support();
        for &a in &sa {
            let ca = &self.data[a as usize * nn..(a as usize + 1) * nn];
            for &b in &sb {
                if a & b != 0 {
                    continue;
                }
                let sign = reorder_sign(a, b);
                let cb = &other.data[b as usize * nn..(b as usize + 1) * nn];
                let target = (a | b) as usize * nn;
                let co = &mut out.data[target..target + nn];
                for i in 0..n {
                    for k in 0..n {
                        let x = ca[i * n + k];
                        if x == ZERO {
                            continue;
                        }
                        let x = x * sign;
                        for j in 0..n {
                            co[i * n + j] += x * cb[k * n + j];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.try_mul(other)?.try_sub(&other.try_mul(self)?)
    }

    pub fn anticommutator(&self, other: &Self) -> Result<Self> {
        self.try_mul(other)?.try_add(&other.try_mul(self)?)
    }

    /// Conjugate transpose with the physics conjugation convention.
    pub fn adjoint(&self) -> Self {
        self.adjoint_with(PHYSICS_CONVENTION)
    }

    /// Transpose with entrywise Grassmann conjugation.
    pub fn adjoint_with(&self, conv: ConjConvention) -> Self {
        let n = self.dim;
        let nn = n * n;
        let mut out = Self::zeros(n, self.generators);
        for m in 0..1u64 << self.generators {
            let src = &self.data[m as usize * nn..(m as usize + 1) * nn];
            if src.iter().all(|c| *c == ZERO) {
                continue;
            }
            let (image, sign) = conj_monomial(m, self.generators, conv);
            let dst = image as usize * nn;
            for i in 0..n {
                for j in 0..n {
                    out.data[dst + j * n + i] += src[i * n + j].conj() * sign;
                }
            }
        }
        out
    }

    pub fn trace(&self) -> GrassmannElement {
        let n = self.dim;
        let nn = n * n;
        GrassmannElement::from_terms(
            self.generators,
            (0..1usize << self.generators).map(|m| {
                let t: Complex64 = (0..n).map(|i| self.data[m * nn + i * n + i]).sum();
                (m as u64, t)
            }),
        )
    }

    /// Frobenius norm over all Grassmann components.
    pub fn norm(&self) -> f64 {
        self.data.iter().fold(0.0, |a, c| a + c.norm_sqr()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// True when every soul component vanishes.
    pub fn is_pure(&self) -> bool {
        let nn = self.dim * self.dim;
        self.data[nn..].iter().all(|c| c.norm() < DROP_TOLERANCE)
    }
}

/// `i_eff = diag(+i × N/2, −i × N/2)`.
pub fn i_eff(dim: usize) -> Result<MatrixValue> {
    if !dim.is_multiple_of(2) {
        return Err(Error::OddDimension(dim));
    }
    let diag: Vec<Complex64> = (0..dim).map(|k| if k < dim / 2 { I } else { -I }).collect();
    Ok(MatrixValue::from_diagonal(&diag))
}

/// Effective part `−½ i_eff {M, i_eff}`: keeps the two diagonal `N/2` blocks
/// and removes the off-diagonal ones.
pub fn eff_project(m: &MatrixValue) -> Result<MatrixValue> {
    let ie = i_eff(m.dim())?;
    Ok(ie
        .try_mul(&m.anticommutator(&ie)?)?
        .scale(Complex64::new(-0.5, 0.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Bosonic,
    Fermionic,
}

impl Parity {
    /// `ε_r`: +1 bosonic, −1 fermionic.
    pub fn epsilon(self) -> f64 {
        match self {
            Parity::Bosonic => 1.0,
            Parity::Fermionic => -1.0,
        }
    }

    pub fn is_odd(self) -> bool {
        self == Parity::Fermionic
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointRule {
    /// `q = q†`, `p = p†` (bosonic).
    SelfAdjointPair,
    /// `p = q†` (fermionic).
    PEqualsQDagger,
    /// `p_r = Σ_s q_s† A_sr`; entries are `(s, A_sr)`.
    Generalized(Vec<(String, MatrixValue)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub label: String,
    pub parity: Parity,
    pub rule: AdjointRule,
}

impl VariableSpec {
    pub fn bosonic(label: impl Into<String>) -> Self {
        VariableSpec {
            label: label.into(),
            parity: Parity::Bosonic,
            rule: AdjointRule::SelfAdjointPair,
        }
    }

    pub fn fermionic(label: impl Into<String>) -> Self {
        VariableSpec {
            label: label.into(),
            parity: Parity::Fermionic,
            rule: AdjointRule::PEqualsQDagger,
        }
    }
}

/// Ordered variable list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roster {
    vars: Vec<VariableSpec>,
}

impl Roster {
    pub fn new(vars: Vec<VariableSpec>) -> Result<Self> {
        for (k, v) in vars.iter().enumerate() {
            if v.label.is_empty() || !v.label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Roster(format!("bad label `{}`", v.label)));
            }
            if vars[..k].iter().any(|w| w.label == v.label) {
                return Err(Error::Roster(format!("duplicate label `{}`", v.label)));
            }
            match (&v.parity, &v.rule) {
                (Parity::Bosonic, AdjointRule::SelfAdjointPair) => {}
                (Parity::Fermionic, AdjointRule::PEqualsQDagger) => {}
                (Parity::Fermionic, AdjointRule::Generalized(_)) => {}
                _ => {
                    return Err(Error::Roster(format!(
                        "adjoint rule {:?} not allowed for {:?} `{}`",
                        v.rule, v.parity, v.label
                    )))
                }
            }
        }
        let roster = Roster { vars };
        roster.check_generalized()?;
        Ok(roster)
    }

    pub fn bosonic(labels: &[&str]) -> Result<Self> {
        Self::new(labels.iter().map(|l| VariableSpec::bosonic(*l)).collect())
    }

    fn rule_matrix(&self, r: &str, s: &str) -> Option<&MatrixValue> {
        let v = self.get(r)?;
        match &v.rule {
            AdjointRule::Generalized(list) => list.iter().find(|(l, _)| l == s).map(|(_, m)| m),
            _ => None,
        }
    }

    // A_sr† = A_rs for every generalized coupling
    fn check_generalized(&self) -> Result<()> {
        for v in &self.vars {
            if let AdjointRule::Generalized(list) = &v.rule {
                for (s, a_sr) in list {
                    let other = self
                        .get(s)
                        .ok_or_else(|| Error::Roster(format!("generalized rule names unknown `{s}`")))?;
                    if other.parity != Parity::Fermionic {
                        return Err(Error::Roster(format!("generalized rule couples bosonic `{s}`")));
                    }
                    let a_rs = self.rule_matrix(s, &v.label);
                    let dev = match a_rs {
                        Some(a_rs) => a_sr.adjoint().try_sub(a_rs)?.norm(),
                        None => a_sr.norm(),
                    };
                    if dev > 1e-12 {
                        return Err(Error::Roster(format!(
                            "generalized rule violates A_sr† = A_rs for ({s}, {}) by {dev:.3e}",
                            v.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn vars(&self) -> &[VariableSpec] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.label == label)
    }

    pub fn get(&self, label: &str) -> Option<&VariableSpec> {
        self.vars.iter().find(|v| v.label == label)
    }

    pub fn parity_of(&self, label: &str) -> Option<Parity> {
        self.get(label).map(|v| v.parity)
    }

    pub fn is_bosonic_only(&self) -> bool {
        self.vars.iter().all(|v| v.parity == Parity::Bosonic)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Q,
    P,
}

/// Classical configuration: one `(q_r, p_r)` pair per roster entry.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    roster: Arc<Roster>,
    dim: usize,
    generators: u32,
    values: Vec<(MatrixValue, MatrixValue)>,
    pub time: f64,
}

/// Constraint status for one variable.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableConstraint {
    pub label: String,
    pub ok: bool,
    pub violation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintReport {
    pub variables: Vec<VariableConstraint>,
    pub max_violation: f64,
}

impl ConstraintReport {
    pub fn all_ok(&self) -> bool {
        self.variables.iter().all(|v| v.ok)
    }
}

/// Tolerance for the adjointness checks after arithmetic.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-12;

impl PhaseState {
    /// Builds a state; fermionic pairs must satisfy their adjoint rule exactly
    /// and bosonic matrices must be self-adjoint within tolerance.
    pub fn new(
        roster: Arc<Roster>,
        dim: usize,
        generators: u32,
        values: Vec<(MatrixValue, MatrixValue)>,
    ) -> Result<Self> {
        let s = Self::new_unchecked(roster, dim, generators, values)?;
        for (v, (q, p)) in s.roster.vars().iter().zip(&s.values) {
            match v.parity {
                Parity::Bosonic => {
                    let dev = q.try_sub(&q.adjoint())?.norm().max(p.try_sub(&p.adjoint())?.norm());
                    if dev > CONSTRAINT_TOLERANCE {
                        return Err(Error::Roster(format!(
                            "bosonic `{}` not self-adjoint (deviation {dev:.3e})",
                            v.label
                        )));
                    }
                }
                Parity::Fermionic => {
                    let want = s.required_p(&v.label)?;
                    if want != *p {
                        return Err(Error::Roster(format!(
                            "fermionic `{}` violates its adjoint rule",
                            v.label
                        )));
                    }
                }
            }
        }
        Ok(s)
    }

    /// Builds a state without adjointness checks (shape and algebra only).
    pub fn new_unchecked(
        roster: Arc<Roster>,
        dim: usize,
        generators: u32,
        values: Vec<(MatrixValue, MatrixValue)>,
    ) -> Result<Self> {
        if values.len() != roster.len() {
            return Err(Error::Roster(format!(
                "{} value pairs for {} roster entries",
                values.len(),
                roster.len()
            )));
        }
        let mut promoted = Vec::with_capacity(values.len());
        for (q, p) in values {
            for m in [&q, &p] {
                if m.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: m.dim(),
                    });
                }
            }
            promoted.push((q.promote(generators)?, p.promote(generators)?));
        }
        Ok(PhaseState {
            roster,
            dim,
            generators,
            values: promoted,
            time: 0.0,
        })
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    pub fn roster_arc(&self) -> &Arc<Roster> {
        &self.roster
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generators(&self) -> u32 {
        self.generators
    }

    pub fn values(&self) -> &[(MatrixValue, MatrixValue)] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [(MatrixValue, MatrixValue)] {
        &mut self.values
    }

    pub fn pair(&self, label: &str) -> Result<&(MatrixValue, MatrixValue)> {
        let k = self
            .roster
            .index_of(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        Ok(&self.values[k])
    }

    pub fn get(&self, label: &str, kind: Kind) -> Result<&MatrixValue> {
        let (q, p) = self.pair(label)?;
        Ok(match kind {
            Kind::Q => q,
            Kind::P => p,
        })
    }

    /// Replaces one matrix; the caller is responsible for constraints.
    pub fn set(&mut self, label: &str, kind: Kind, value: MatrixValue) -> Result<()> {
        let k = self
            .roster
            .index_of(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        if value.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: value.dim(),
            });
        }
        let value = value.promote(self.generators)?;
        match kind {
            Kind::Q => self.values[k].0 = value,
            Kind::P => self.values[k].1 = value,
        }
        Ok(())
    }

    /// `p` demanded by the adjoint rule of a fermionic label.
    pub fn required_p(&self, label: &str) -> Result<MatrixValue> {
        let v = self
            .roster
            .get(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        match &v.rule {
            AdjointRule::SelfAdjointPair => Ok(self.get(label, Kind::P)?.clone()),
            AdjointRule::PEqualsQDagger => Ok(self.get(label, Kind::Q)?.adjoint()),
            AdjointRule::Generalized(list) => {
                let mut acc = MatrixValue::zeros(self.dim, self.generators);
                for (s, a_sr) in list {
                    acc = acc.try_add(&self.get(s, Kind::Q)?.adjoint().try_mul(a_sr)?)?;
                }
                Ok(acc)
            }
        }
    }

    pub fn check_constraints(&self) -> ConstraintReport {
        let mut variables = Vec::new();
        for (v, (q, p)) in self.roster.vars().iter().zip(&self.values) {
            let violation = match v.parity {
                Parity::Bosonic => {
                    let dq = q.try_sub(&q.adjoint()).map(|m| m.norm()).unwrap_or(f64::INFINITY);
                    let dp = p.try_sub(&p.adjoint()).map(|m| m.norm()).unwrap_or(f64::INFINITY);
                    dq.max(dp)
                }
                Parity::Fermionic => self
                    .required_p(&v.label)
                    .and_then(|want| want.try_sub(p))
                    .map(|d| d.norm())
                    .unwrap_or(f64::INFINITY),
            };
            variables.push(VariableConstraint {
                label: v.label.clone(),
                ok: violation <= CONSTRAINT_TOLERANCE,
                violation,
            });
        }
        let max_violation = variables.iter().map(|v| v.violation).fold(0.0, f64::max);
        ConstraintReport {
            variables,
            max_violation,
        }
    }

    /// Conjugates every variable: `x → U† x U`.
    pub fn apply_unitary(&self, u: &MatrixValue) -> Result<Self> {
        if u.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: u.dim(),
            });
        }
        if u.generators() != 0 {
            return Err(Error::AlgebraMismatch {
                left: 0,
                right: u.generators(),
            });
        }
        let ud = u.adjoint();
        let dev = ud
            .try_mul(u)?
            .try_sub(&MatrixValue::identity(self.dim, 0))?
            .norm();
        if dev > 1e-10 {
            return Err(Error::NotUnitary(dev));
        }
        let mut out = self.clone();
        for (q, p) in out.values.iter_mut() {
            *q = ud.try_mul(q)?.try_mul(u)?;
            *p = ud.try_mul(p)?.try_mul(u)?;
        }
        Ok(out)
    }

    /// Applies `f` to every matrix of the state.
    pub fn map_values(&self, mut f: impl FnMut(&MatrixValue) -> Result<MatrixValue>) -> Result<Self> {
        let mut out = self.clone();
        for (q, p) in out.values.iter_mut() {
            *q = f(q)?;
            *p = f(p)?;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|(q, p)| q.is_finite() && p.is_finite())
    }

    /// Random state. Bosonic matrices are Hermitian with Gaussian entries of
    /// standard deviation `scale`. Fermionic `q` entries are Grassmann-linear
    /// in the even generators `θ_0, θ_2, ...`; `p` follows the adjoint rule.
    pub fn random<R: Rng + ?Sized>(
        roster: Arc<Roster>,
        dim: usize,
        generators: u32,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(roster.len());
        for v in roster.vars() {
            match v.parity {
                Parity::Bosonic => values.push((
                    random_hermitian(dim, scale, rng).promote(generators)?,
                    random_hermitian(dim, scale, rng).promote(generators)?,
                )),
                Parity::Fermionic => {
                    if generators < 2 {
                        return Err(Error::Roster(
                            "fermionic variables need at least two generators".into(),
                        ));
                    }
                    let q = random_grassmann_linear(dim, generators, scale, rng);
                    values.push((q, MatrixValue::zeros(dim, generators)));
                }
            }
        }
        let mut s = Self::new_unchecked(roster.clone(), dim, generators, values)?;
        for v in roster.vars() {
            if v.parity == Parity::Fermionic {
                let p = s.required_p(&v.label)?;
                s.set(&v.label, Kind::P, p)?;
            }
        }
        Ok(s)
    }
}

pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> MatrixValue {
    let mut m = MatrixValue::zeros(dim, 0);
    for i in 0..dim {
        let d: f64 = StandardNormal.sample(rng);
        m.data[i * dim + i] = Complex64::new(scale * d, 0.0);
        for j in i + 1..dim {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let z = Complex64::new(re, im) * (scale / std::f64::consts::SQRT_2);
            m.data[i * dim + j] = z;
            m.data[j * dim + i] = z.conj();
        }
    }
    m
}

pub fn random_complex<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> MatrixValue {
    let mut m = MatrixValue::zeros(dim, 0);
    for z in m.data.iter_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *z = Complex64::new(re, im) * scale;
    }
    m
}

/// Random unitary from the QR decomposition of a complex Gaussian matrix.
pub fn random_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> MatrixValue {
    let z = random_complex(dim, 1.0, rng).to_dmatrix();
    let qr = z.qr();
    let (q, r) = qr.unpack();
    // fix column phases so the distribution is Haar
    let mut q = q;
    for j in 0..dim {
        let d = r[(j, j)];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        for i in 0..dim {
            q[(i, j)] *= ph;
        }
    }
    MatrixValue::from_dmatrix(&q)
}

fn random_grassmann_linear<R: Rng + ?Sized>(dim: usize, generators: u32, scale: f64, rng: &mut R) -> MatrixValue {
    let mut m = MatrixValue::zeros(dim, generators);
    let nn = dim * dim;
    for k in 0..(generators as usize).div_ceil(2) {
        let mask = 1usize << (2 * k);
        for e in 0..nn {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            m.data[mask * nn + e] = Complex64::new(re, im) * scale;
        }
    }
    m
}

// Serialized forms: flat records of per-component real/imaginary arrays.

#[derive(Serialize, Deserialize)]
struct ComponentRecord {
    mask: u64,
    re: Vec<f64>,
    im: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    dim: usize,
    generators: u32,
    components: Vec<ComponentRecord>,
}

impl Serialize for MatrixValue {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let nn = self.dim * self.dim;
        let mut components = Vec::new();
        for m in 0..1usize << self.generators {
            let c = &self.data[m * nn..(m + 1) * nn];
            if m == 0 || c.iter().any(|z| *z != ZERO) {
                components.push(ComponentRecord {
                    mask: m as u64,
                    re: c.iter().map(|z| z.re).collect(),
                    im: c.iter().map(|z| z.im).collect(),
                });
            }
        }
        MatrixRecord {
            dim: self.dim,
            generators: self.generators,
            components,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for MatrixValue {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = MatrixRecord::deserialize(de)?;
        if rec.generators > crate::grassmann::MAX_GENERATORS {
            return Err(D::Error::custom("too many generators"));
        }
        let mut m = MatrixValue::zeros(rec.dim, rec.generators);
        let nn = rec.dim * rec.dim;
        for c in rec.components {
            if c.mask >> rec.generators != 0 || c.re.len() != nn || c.im.len() != nn {
                return Err(D::Error::custom("malformed matrix component"));
            }
            for k in 0..nn {
                m.data[c.mask as usize * nn + k] = Complex64::new(c.re[k], c.im[k]);
            }
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct VariableRecord {
    label: String,
    q: MatrixValue,
    p: MatrixValue,
}

/// Flat JSON snapshot of a [`PhaseState`].
#[derive(Serialize, Deserialize)]
struct StateRecord {
    dim: usize,
    generators: u32,
    time: f64,
    roster: Roster,
    values: Vec<VariableRecord>,
}

impl Serialize for PhaseState {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        StateRecord {
            dim: self.dim,
            generators: self.generators,
            time: self.time,
            roster: (*self.roster).clone(),
            values: self
                .roster
                .vars()
                .iter()
                .zip(&self.values)
                .map(|(v, (q, p))| VariableRecord {
                    label: v.label.clone(),
                    q: q.clone(),
                    p: p.clone(),
                })
                .collect(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for PhaseState {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = StateRecord::deserialize(de)?;
        let roster = Roster::new(rec.roster.vars.clone()).map_err(D::Error::custom)?;
        if rec.values.iter().map(|v| &v.label).ne(roster.vars().iter().map(|v| &v.label)) {
            return Err(D::Error::custom("value labels do not match roster order"));
        }
        let values = rec.values.into_iter().map(|v| (v.q, v.p)).collect();
        let mut s = PhaseState::new_unchecked(Arc::new(roster), rec.dim, rec.generators, values)
            .map_err(D::Error::custom)?;
        s.time = rec.time;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn close(a: &MatrixValue, b: &MatrixValue, tol: f64) -> bool {
        a.try_sub(b).unwrap().norm() <= tol
    }

    #[test]
    fn adjoint_examples() {
        let id = MatrixValue::identity(3, 0);
        assert_eq!(id.adjoint(), id);
        assert_eq!(id.scale(I).adjoint(), id.scale(-I));
        let mut r = rng();
        let m = random_complex(3, 1.0, &mut r);
        assert_eq!(m.adjoint().adjoint(), m);
    }

    #[test]
    fn adjoint_respects_products_for_complex_entries() {
        let mut r = rng();
        let a = random_complex(4, 1.0, &mut r);
        let b = random_complex(4, 1.0, &mut r);
        let lhs = a.try_mul(&b).unwrap().adjoint();
        let rhs = b.adjoint().try_mul(&a.adjoint()).unwrap();
        assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn grassmann_matrix_product_matches_entrywise_sum() {
        let mut r = rng();
        let roster = Arc::new(Roster::new(vec![VariableSpec::fermionic("1")]).unwrap());
        let s = PhaseState::random(roster, 2, 4, 1.0, &mut r).unwrap();
        let (q, p) = s.pair("1").unwrap();
        let prod = q.try_mul(p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = GrassmannElement::zero(4);
                for k in 0..2 {
                    acc += &(&q.entry(i, k) * &p.entry(k, j));
                }
                assert!((&acc - &prod.entry(i, j)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn ieff_properties() {
        let ie = i_eff(2).unwrap();
        assert_eq!(ie, MatrixValue::from_diagonal(&[I, -I]));
        let ie4 = i_eff(4).unwrap();
        assert_eq!(ie4.try_mul(&ie4).unwrap(), MatrixValue::identity(4, 0).scale(c(-1.0, 0.0)));
        assert_eq!(ie4.trace().body(), c(0.0, 0.0));
        assert_eq!(ie4.adjoint(), ie4.scale(c(-1.0, 0.0)));
        assert!(matches!(i_eff(3), Err(Error::OddDimension(3))));
    }

    #[test]
    fn eff_projection_blocks() {
        let mut r = rng();
        let m = random_complex(4, 1.0, &mut r);
        let e = eff_project(&m).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let same_block = (i < 2) == (j < 2);
                let want = if same_block { m.body_entry(i, j) } else { ZERO };
                assert!((e.body_entry(i, j) - want).norm() < 1e-14);
            }
        }
        // fixed point, kernel, idempotency
        assert!(close(&eff_project(&e).unwrap(), &e, 1e-14));
        let off = m.try_sub(&e).unwrap();
        assert!(eff_project(&off).unwrap().norm() < 1e-14);
        let ie = i_eff(4).unwrap();
        assert!(e.commutator(&ie).unwrap().norm() < 1e-13);
        assert!(off.anticommutator(&ie).unwrap().norm() < 1e-13);
    }

    #[test]
    fn constraint_checks() {
        let mut r = rng();
        let roster = Arc::new(Roster::bosonic(&["1"]).unwrap());
        let s = PhaseState::random(roster.clone(), 3, 0, 1.0, &mut r).unwrap();
        assert!(s.check_constraints().all_ok());

        let mut bad = s.clone();
        let mut q = bad.get("1", Kind::Q).unwrap().clone();
        q.raw_mut()[1] += c(0.5, 0.0);
        bad.set("1", Kind::Q, q).unwrap();
        let rep = bad.check_constraints();
        assert!(!rep.all_ok());
        assert!((rep.max_violation - 0.5 * 2f64.sqrt()).abs() < 1e-12);
        let (q, p) = bad.pair("1").unwrap().clone();
        assert!(PhaseState::new(roster, 3, 0, vec![(q, p)]).is_err());

        let froster = Arc::new(Roster::new(vec![VariableSpec::fermionic("f")]).unwrap());
        let f = PhaseState::random(froster, 2, 4, 1.0, &mut r).unwrap();
        assert!(f.check_constraints().all_ok());
        assert_eq!(f.check_constraints().max_violation, 0.0);
    }

    #[test]
    fn generalized_rule_hermiticity() {
        let a = MatrixValue::identity(2, 0).scale(c(0.5, 0.0));
        let ok = Roster::new(vec![VariableSpec {
            label: "f".into(),
            parity: Parity::Fermionic,
            rule: AdjointRule::Generalized(vec![("f".into(), a)]),
        }]);
        assert!(ok.is_ok());
        let bad = Roster::new(vec![VariableSpec {
            label: "f".into(),
            parity: Parity::Fermionic,
            rule: AdjointRule::Generalized(vec![("f".into(), MatrixValue::identity(2, 0).scale(I))]),
        }]);
        assert!(bad.is_err());

        let mut r = rng();
        let s = PhaseState::random(Arc::new(ok.unwrap()), 2, 4, 1.0, &mut r).unwrap();
        let (q, p) = s.pair("f").unwrap();
        assert!(close(p, &q.adjoint().scale(c(0.5, 0.0)), 0.0));
        assert!(s.check_constraints().all_ok());
    }

    #[test]
    fn unitary_action() {
        let mut r = rng();
        let roster = Arc::new(Roster::bosonic(&["1"]).unwrap());
        let s = PhaseState::random(roster, 2, 0, 1.0, &mut r).unwrap();
        assert_eq!(s.apply_unitary(&MatrixValue::identity(2, 0)).unwrap(), s);

        // diag(1, e^{iφ}) rotates off-diagonal entries by e^{∓iφ}
        let phi = 0.7;
        let u = MatrixValue::from_diagonal(&[ONE, Complex64::from_polar(1.0, phi)]);
        let t = s.apply_unitary(&u).unwrap();
        let (q0, _) = s.pair("1").unwrap();
        let (q1, _) = t.pair("1").unwrap();
        assert!((q1.body_entry(0, 1) - q0.body_entry(0, 1) * Complex64::from_polar(1.0, phi)).norm() < 1e-14);
        assert!((q1.body_entry(1, 0) - q0.body_entry(1, 0) * Complex64::from_polar(1.0, -phi)).norm() < 1e-14);
        let tr2 = |m: &MatrixValue| m.try_mul(m).unwrap().trace().body();
        assert!((tr2(q0) - tr2(q1)).norm() < 1e-14);

        let not_u = MatrixValue::identity(2, 0).scale(c(2.0, 0.0));
        assert!(matches!(s.apply_unitary(&not_u), Err(Error::NotUnitary(_))));
    }

    #[test]
    fn random_unitary_is_unitary() {
        let mut r = rng();
        let u = random_unitary(4, &mut r);
        assert!(close(&u.adjoint().try_mul(&u).unwrap(), &MatrixValue::identity(4, 0), 1e-12));
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let mut r = rng();
        let roster = Arc::new(
            Roster::new(vec![VariableSpec::bosonic("1"), VariableSpec::fermionic("2")]).unwrap(),
        );
        let mut s = PhaseState::random(roster, 2, 4, 0.37, &mut r).unwrap();
        s.time = 0.1 + 0.2;
        let text = serde_json::to_string(&s).unwrap();
        let back: PhaseState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        for ((q0, p0), (q1, p1)) in s.values().iter().zip(back.values()) {
            for (a, b) in q0.raw().iter().chain(p0.raw()).zip(q1.raw().iter().chain(p1.raw())) {
                assert_eq!(a.re.to_bits(), b.re.to_bits());
                assert_eq!(a.im.to_bits(), b.im.to_bits());
            }
        }
    }
}
