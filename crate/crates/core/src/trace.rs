//! Trace polynomials, trace derivatives and the trace Poisson bracket.
//!
//! # Grammar
//!
//! ```text
//! poly    := "0" | ["-"] term (("+" | "-") term)*
//! term    := [coeff "*"] "tr" "(" letter+ ")"
//! coeff   := real | "(" real ("+" | "-") real "i" ")"
//! letter  := ("q" | "p") label      variable matrix
//!          | "1"                    identity
//!          | ident                  constant matrix from the registry
//! ```
//!
//! Letters are separated by whitespace; a label is a run of ASCII
//! alphanumerics or `_`. An identifier starting with `q` or `p` and followed
//! by label characters is always a variable, so constant tags must not have
//! that shape. `ieff` is the built-in `i_eff` constant. Printing emits every
//! coefficient with the shortest round-trip float form, so `parse(print(P))`
//! reproduces `P` exactly.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grassmann::GrassmannElement;
use crate::matrix::{i_eff, Kind, MatrixValue, Parity, PhaseState, Roster};

/// Default maximum number of letters per parsed word.
pub const DEFAULT_DEGREE_CAP: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Letter {
    Var(String, Kind),
    Const(String),
}

impl Letter {
    pub fn q(label: &str) -> Self {
        Letter::Var(label.to_string(), Kind::Q)
    }

    pub fn p(label: &str) -> Self {
        Letter::Var(label.to_string(), Kind::P)
    }

    pub fn constant(tag: &str) -> Self {
        Letter::Const(tag.to_string())
    }

    pub fn identity() -> Self {
        Letter::Const("1".into())
    }

    fn is_odd(&self, roster: &Roster) -> Result<bool> {
        match self {
            Letter::Var(label, _) => roster
                .parity_of(label)
                .map(Parity::is_odd)
                .ok_or_else(|| Error::UnknownLabel(label.clone())),
            Letter::Const(_) => Ok(false),
        }
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Letter::Var(l, Kind::Q) => write!(f, "q{l}"),
            Letter::Var(l, Kind::P) => write!(f, "p{l}"),
            Letter::Const(t) => f.write_str(t),
        }
    }
}

/// `coeff · L1 L2 ... Lk`. Inside a [`TracePolynomial`] the product is traced
/// and `letters` is nonempty; inside a [`MatrixPolynomial`] an empty word
/// stands for the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceWord {
    pub coeff: Complex64,
    pub letters: Vec<Letter>,
}

impl TraceWord {
    pub fn new(coeff: Complex64, letters: Vec<Letter>) -> Self {
        TraceWord { coeff, letters }
    }

    pub fn real(coeff: f64, letters: Vec<Letter>) -> Self {
        Self::new(Complex64::new(coeff, 0.0), letters)
    }

    pub fn degree(&self) -> usize {
        self.letters.len()
    }

    fn odd_count(&self, roster: &Roster) -> Result<usize> {
        let mut n = 0;
        for l in &self.letters {
            n += l.is_odd(roster)? as usize;
        }
        Ok(n)
    }
}

/// Sum of traced words with constant coefficients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TracePolynomial {
    words: Vec<TraceWord>,
}

/// Sum of untraced words; evaluates to a matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatrixPolynomial {
    words: Vec<TraceWord>,
}

/// Sign rule for derivatives with respect to odd letters.
///
/// With `Right`, `δP = Tr(D δx)` holds for odd variations placed to the
/// right, and the equations of motion, the bracket and `dA/dt = {A, H}` use
/// the same signs for bosons and fermions. For an even polynomial the left
/// derivative by an odd letter is exactly minus the right one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DerivativeConvention {
    /// The varied letter is anticommuted to the far left before removal.
    Left,
    /// The varied letter is anticommuted to the far right before removal.
    #[default]
    Right,
}

/// Named constant matrices. `1` and `ieff` are built in and sized on lookup.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    constants: HashMap<String, MatrixValue>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tag: &str, value: MatrixValue) -> Result<()> {
        if tag == "1" || tag == "ieff" {
            return Err(Error::Config(format!("`{tag}` is a built-in constant")));
        }
        if value.generators() != 0 {
            return Err(Error::AlgebraMismatch {
                left: 0,
                right: value.generators(),
            });
        }
        self.constants.insert(tag.to_string(), value);
        Ok(())
    }

    pub fn with(mut self, tag: &str, value: MatrixValue) -> Self {
        self.insert(tag, value).expect("valid constant");
        self
    }

    pub fn get(&self, tag: &str, dim: usize) -> Result<MatrixValue> {
        let m = match tag {
            "1" => MatrixValue::identity(dim, 0),
            "ieff" => i_eff(dim)?,
            _ => self
                .constants
                .get(tag)
                .cloned()
                .ok_or_else(|| Error::UnknownConstant(tag.to_string()))?,
        };
        if m.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: m.dim(),
            });
        }
        Ok(m)
    }
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn merge_words(words: impl IntoIterator<Item = TraceWord>) -> Vec<TraceWord> {
    let mut out: Vec<TraceWord> = Vec::new();
    let mut index: HashMap<Vec<Letter>, usize> = HashMap::new();
    for w in words {
        match index.get(&w.letters) {
            Some(&k) => out[k].coeff += w.coeff,
            None => {
                index.insert(w.letters.clone(), out.len());
                out.push(w);
            }
        }
    }
    out.retain(|w| w.coeff != Complex64::new(0.0, 0.0));
    out
}

impl TracePolynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(words: Vec<TraceWord>) -> Result<Self> {
        if let Some(k) = words.iter().position(|w| w.letters.is_empty()) {
            return Err(Error::Parse {
                pos: k,
                msg: "traced word without letters".into(),
            });
        }
        Ok(TracePolynomial { words })
    }

    /// Single word `coeff · Tr(letters)`.
    pub fn word(coeff: f64, letters: Vec<Letter>) -> Self {
        assert!(!letters.is_empty(), "traced word without letters");
        TracePolynomial {
            words: vec![TraceWord::real(coeff, letters)],
        }
    }

    pub fn words(&self) -> &[TraceWord] {
        &self.words
    }

    pub fn is_zero(&self) -> bool {
        self.words.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.words.iter().map(TraceWord::degree).max().unwrap_or(0)
    }

    pub fn check_degree(&self, cap: usize) -> Result<()> {
        match self.words.iter().map(TraceWord::degree).find(|&d| d > cap) {
            Some(degree) => Err(Error::DegreeCap { degree, cap }),
            None => Ok(()),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        TracePolynomial {
            words: self.words.iter().chain(&other.words).cloned().collect(),
        }
    }

    pub fn scale(&self, s: Complex64) -> Self {
        TracePolynomial {
            words: self
                .words
                .iter()
                .map(|w| TraceWord::new(w.coeff * s, w.letters.clone()))
                .collect(),
        }
    }

    /// Variable letters that occur anywhere in the polynomial.
    pub fn variables(&self) -> Vec<(String, Kind)> {
        let mut v: Vec<(String, Kind)> = self
            .words
            .iter()
            .flat_map(|w| &w.letters)
            .filter_map(|l| match l {
                Letter::Var(s, k) => Some((s.clone(), *k)),
                Letter::Const(_) => None,
            })
            .collect();
        v.sort();
        v.dedup();
        v
    }

    /// Rotates each word to its lexicographically least graded-cyclic form,
    /// merges equal words and drops zero coefficients. Words that equal minus
    /// themselves under rotation vanish.
    pub fn canonicalize(&self, roster: &Roster) -> Result<Self> {
        let mut words = Vec::with_capacity(self.words.len());
        for w in &self.words {
            if let Some(cw) = canonical_word(w, roster)? {
                words.push(cw);
            }
        }
        Ok(TracePolynomial {
            words: merge_words(words),
        })
    }

    /// Adjoint functional `Tr(A)* = Tr(A†)` with fermionic `q† = p`.
    pub fn adjoint(&self, roster: &Roster) -> Result<Self> {
        let mut words = Vec::with_capacity(self.words.len());
        for w in &self.words {
            let f = w.odd_count(roster)?;
            let sign = if (f * f.saturating_sub(1) / 2) % 2 == 1 { -1.0 } else { 1.0 };
            let mut coeff = w.coeff.conj() * sign;
            let mut letters = Vec::with_capacity(w.letters.len());
            for l in w.letters.iter().rev() {
                letters.push(match l {
                    Letter::Var(label, kind) => {
                        let spec = roster.get(label).ok_or_else(|| Error::UnknownLabel(label.clone()))?;
                        match (&spec.rule, kind) {
                            (crate::matrix::AdjointRule::SelfAdjointPair, _) => l.clone(),
                            (crate::matrix::AdjointRule::PEqualsQDagger, Kind::Q) => Letter::p(label),
                            (crate::matrix::AdjointRule::PEqualsQDagger, Kind::P) => Letter::q(label),
                            (crate::matrix::AdjointRule::Generalized(_), _) => {
                                return Err(Error::Roster(format!(
                                    "adjoint of `{label}` under a generalized rule is not a single letter"
                                )))
                            }
                        }
                    }
                    Letter::Const(t) if t == "1" => l.clone(),
                    Letter::Const(t) if t == "ieff" => {
                        coeff = -coeff;
                        l.clone()
                    }
                    Letter::Const(t) => return Err(Error::UnknownConstant(t.clone())),
                });
            }
            words.push(TraceWord::new(coeff, letters));
        }
        Ok(TracePolynomial { words })
    }

    /// `(P + P†)/2`, a functional that is real on constrained states.
    pub fn hermitian_part(&self, roster: &Roster) -> Result<Self> {
        Ok(self.add(&self.adjoint(roster)?).scale(c(0.5)))
    }
}

fn canonical_word(w: &TraceWord, roster: &Roster) -> Result<Option<TraceWord>> {
    let k = w.letters.len();
    let odd: Vec<bool> = w.letters.iter().map(|l| l.is_odd(roster)).collect::<Result<_>>()?;
    let total_odd = odd.iter().filter(|&&b| b).count();
    let mut best = w.letters.clone();
    let mut best_sign = 1.0;
    let mut sign = 1.0;
    let mut rot = w.letters.clone();
    let mut rot_odd = odd.clone();
    for _ in 1..k {
        // Tr(L M) = (−1)^{|L||M|} Tr(M L)
        let first = rot.remove(0);
        let first_odd = rot_odd.remove(0);
        if first_odd && (total_odd - 1) % 2 == 1 {
            sign = -sign;
        }
        rot.push(first);
        rot_odd.push(first_odd);
        if rot == w.letters && sign < 0.0 {
            return Ok(None);
        }
        if rot < best {
            best = rot.clone();
            best_sign = sign;
        }
    }
    Ok(Some(TraceWord::new(w.coeff * best_sign, best)))
}

impl MatrixPolynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(words: Vec<TraceWord>) -> Self {
        MatrixPolynomial { words }
    }

    pub fn identity() -> Self {
        MatrixPolynomial {
            words: vec![TraceWord::real(1.0, Vec::new())],
        }
    }

    pub fn letter(l: Letter) -> Self {
        MatrixPolynomial {
            words: vec![TraceWord::real(1.0, vec![l])],
        }
    }

    pub fn words(&self) -> &[TraceWord] {
        &self.words
    }

    pub fn is_zero(&self) -> bool {
        self.words.is_empty()
    }

    /// Merges equal words and drops zero coefficients.
    pub fn simplify(&self) -> Self {
        MatrixPolynomial {
            words: merge_words(self.words.iter().cloned()),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        MatrixPolynomial {
            words: self.words.iter().chain(&other.words).cloned().collect(),
        }
    }

    pub fn scale(&self, s: Complex64) -> Self {
        MatrixPolynomial {
            words: self
                .words
                .iter()
                .map(|w| TraceWord::new(w.coeff * s, w.letters.clone()))
                .collect(),
        }
    }

    /// Noncommutative product by word concatenation.
    pub fn mul(&self, other: &Self) -> Self {
        let mut words = Vec::with_capacity(self.words.len() * other.words.len());
        for a in &self.words {
            for b in &other.words {
                let mut letters = a.letters.clone();
                letters.extend(b.letters.iter().cloned());
                words.push(TraceWord::new(a.coeff * b.coeff, letters));
            }
        }
        MatrixPolynomial { words }
    }

    /// `Tr` of the polynomial; an empty word becomes `Tr(1)`.
    pub fn trace(&self) -> TracePolynomial {
        TracePolynomial {
            words: self
                .words
                .iter()
                .map(|w| {
                    let letters = if w.letters.is_empty() {
                        vec![Letter::identity()]
                    } else {
                        w.letters.clone()
                    };
                    TraceWord::new(w.coeff, letters)
                })
                .collect(),
        }
    }

    pub fn eval(&self, s: &PhaseState, reg: &Registry) -> Result<MatrixValue> {
        Compiled::new(&self.words, s.roster(), reg, s.dim())?.eval_matrix(s)
    }
}

/// Word list with letters resolved to slots of a state, for repeated
/// evaluation.
#[derive(Clone, Debug)]
pub struct Compiled {
    words: Vec<(Complex64, Vec<usize>)>,
    constants: Vec<MatrixValue>,
    slots: usize,
    dim: usize,
}

impl Compiled {
    pub fn new(words: &[TraceWord], roster: &Roster, reg: &Registry, dim: usize) -> Result<Self> {
        let slots = 2 * roster.len();
        let mut tags: Vec<String> = Vec::new();
        let mut constants = Vec::new();
        let mut out = Vec::with_capacity(words.len());
        for w in words {
            let mut idx = Vec::with_capacity(w.letters.len());
            for l in &w.letters {
                idx.push(match l {
                    Letter::Var(label, kind) => {
                        let r = roster.index_of(label).ok_or_else(|| Error::UnknownLabel(label.clone()))?;
                        2 * r + (*kind == Kind::P) as usize
                    }
                    Letter::Const(tag) => match tags.iter().position(|t| t == tag) {
                        Some(k) => slots + k,
                        None => {
                            constants.push(reg.get(tag, dim)?);
                            tags.push(tag.clone());
                            slots + tags.len() - 1
                        }
                    },
                });
            }
            out.push((w.coeff, idx));
        }
        Ok(Compiled {
            words: out,
            constants,
            slots,
            dim,
        })
    }

    fn slot<'a>(&'a self, s: &'a PhaseState, k: usize) -> &'a MatrixValue {
        if k < self.slots {
            let (q, p) = &s.values()[k / 2];
            if k.is_multiple_of(2) {
                q
            } else {
                p
            }
        } else {
            &self.constants[k - self.slots]
        }
    }

    fn word_product(&self, s: &PhaseState, idx: &[usize]) -> Result<MatrixValue> {
        match idx.split_first() {
            None => Ok(MatrixValue::identity(self.dim, 0)),
            Some((&first, rest)) => {
                let mut acc = self.slot(s, first).clone();
                for &k in rest {
                    acc = acc.try_mul(self.slot(s, k))?;
                }
                Ok(acc)
            }
        }
    }

    pub fn eval_matrix(&self, s: &PhaseState) -> Result<MatrixValue> {
        if s.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: s.dim(),
            });
        }
        let mut acc = MatrixValue::zeros(self.dim, s.generators());
        for (coeff, idx) in &self.words {
            acc.axpy_in_place(*coeff, &self.word_product(s, idx)?)?;
        }
        Ok(acc)
    }

    pub fn eval_trace(&self, s: &PhaseState) -> Result<GrassmannElement> {
        Ok(self.eval_matrix(s)?.trace())
    }

    /// `Σ |c| ‖Tr w‖`, the magnitude scale of a traced evaluation.
    pub fn trace_scale(&self, s: &PhaseState) -> Result<f64> {
        let mut total = 0.0;
        for (coeff, idx) in &self.words {
            total += coeff.norm() * self.word_product(s, idx)?.trace().norm();
        }
        Ok(total)
    }
}

/// `Σ_words coeff · Tr(product)`; Grassmann-valued when the state carries
/// generators.
pub fn trace_eval(p: &TracePolynomial, s: &PhaseState, reg: &Registry) -> Result<GrassmannElement> {
    Compiled::new(&p.words, s.roster(), reg, s.dim())?.eval_trace(s)
}

/// Trace derivative `D` with `D_ij = ∂P/∂x_ji` under the default convention.
pub fn trace_derivative(p: &TracePolynomial, x: (&str, Kind), roster: &Roster) -> Result<MatrixPolynomial> {
    trace_derivative_with(p, x, roster, DerivativeConvention::default())
}

pub fn trace_derivative_with(
    p: &TracePolynomial,
    x: (&str, Kind),
    roster: &Roster,
    conv: DerivativeConvention,
) -> Result<MatrixPolynomial> {
    trace_derivative_where(p, x, roster, conv, |_, _| true)
}

/// Trace derivative restricted to occurrences accepted by
/// `keep(word_index, position)`.
pub fn trace_derivative_where(
    p: &TracePolynomial,
    x: (&str, Kind),
    roster: &Roster,
    conv: DerivativeConvention,
    keep: impl Fn(usize, usize) -> bool,
) -> Result<MatrixPolynomial> {
    let target = Letter::Var(x.0.to_string(), x.1);
    let x_odd = target.is_odd(roster)?;
    let mut words = Vec::new();
    for (wi, w) in p.words.iter().enumerate() {
        let odd: Vec<bool> = w.letters.iter().map(|l| l.is_odd(roster)).collect::<Result<_>>()?;
        for (m, l) in w.letters.iter().enumerate() {
            if *l != target || !keep(wi, m) {
                continue;
            }
            // Tr(A x B): D = s · B A
            let a_odd = odd[..m].iter().filter(|&&b| b).count() % 2 == 1;
            let b_odd = odd[m + 1..].iter().filter(|&&b| b).count() % 2 == 1;
            let mut flips = (a_odd && b_odd) as u32;
            flips += match conv {
                DerivativeConvention::Left => (x_odd && a_odd) as u32,
                DerivativeConvention::Right => (x_odd && b_odd) as u32,
            };
            let sign = if flips % 2 == 1 { -1.0 } else { 1.0 };
            let mut letters: Vec<Letter> = w.letters[m + 1..].to_vec();
            letters.extend_from_slice(&w.letters[..m]);
            words.push(TraceWord::new(w.coeff * sign, letters));
        }
    }
    Ok(MatrixPolynomial::new(words).simplify())
}

/// Symbolic bracket
/// `{A, B} = Tr Σ_r ε_r [δA/δq_r δB/δp_r − δB/δq_r δA/δp_r]`.
pub fn bracket_polynomial(a: &TracePolynomial, b: &TracePolynomial, roster: &Roster) -> Result<TracePolynomial> {
    let mut out = MatrixPolynomial::zero();
    for v in roster.vars() {
        let eps = c(v.parity.epsilon());
        let daq = trace_derivative(a, (&v.label, Kind::Q), roster)?;
        let dbp = trace_derivative(b, (&v.label, Kind::P), roster)?;
        let dbq = trace_derivative(b, (&v.label, Kind::Q), roster)?;
        let dap = trace_derivative(a, (&v.label, Kind::P), roster)?;
        out = out
            .add(&daq.mul(&dbp).scale(eps))
            .add(&dbq.mul(&dap).scale(-eps));
    }
    out.trace().canonicalize(roster)
}

/// Numerical value of the trace Poisson bracket at `s`.
pub fn poisson_bracket(
    a: &TracePolynomial,
    b: &TracePolynomial,
    s: &PhaseState,
    reg: &Registry,
) -> Result<GrassmannElement> {
    let roster = s.roster();
    let mut acc = GrassmannElement::zero(s.generators());
    for v in roster.vars() {
        let eps = c(v.parity.epsilon());
        let d = |p: &TracePolynomial, k: Kind| -> Result<MatrixValue> {
            trace_derivative(p, (&v.label, k), roster)?.eval(s, reg)
        };
        let t1 = d(a, Kind::Q)?.try_mul(&d(b, Kind::P)?)?;
        let t2 = d(b, Kind::Q)?.try_mul(&d(a, Kind::P)?)?;
        acc = acc.try_add(&t1.try_sub(&t2)?.trace().scale(eps))?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobiReport {
    /// `|{A,{B,C}} + {B,{C,A}} + {C,{A,B}}|`.
    pub residual: f64,
    /// Sum of word magnitudes entering the three brackets.
    pub scale: f64,
}

pub fn jacobi_residual(
    a: &TracePolynomial,
    b: &TracePolynomial,
    cc: &TracePolynomial,
    s: &PhaseState,
    reg: &Registry,
) -> Result<JacobiReport> {
    let roster = s.roster();
    let mut total = GrassmannElement::zero(s.generators());
    let mut scale = 0.0;
    for (x, y, z) in [(a, b, cc), (b, cc, a), (cc, a, b)] {
        let outer = bracket_polynomial(x, &bracket_polynomial(y, z, roster)?, roster)?;
        let compiled = Compiled::new(&outer.words, roster, reg, s.dim())?;
        total = total.try_add(&compiled.eval_trace(s)?)?;
        scale += compiled.trace_scale(s)?;
    }
    Ok(JacobiReport {
        residual: total.norm(),
        scale,
    })
}

fn fmt_coeff(f: &mut fmt::Formatter<'_>, z: Complex64) -> fmt::Result {
    if z.im == 0.0 && z.im.is_sign_positive() {
        write!(f, "{}", z.re)
    } else {
        let sign = if z.im.is_sign_negative() { '-' } else { '+' };
        write!(f, "({}{}{}i)", z.re, sign, z.im.abs())
    }
}

fn fmt_words(f: &mut fmt::Formatter<'_>, words: &[TraceWord], traced: bool) -> fmt::Result {
    if words.is_empty() {
        return f.write_str("0");
    }
    for (k, w) in words.iter().enumerate() {
        if k > 0 {
            f.write_str(" + ")?;
        }
        fmt_coeff(f, w.coeff)?;
        f.write_str(if traced { " * tr(" } else { " * (" })?;
        if w.letters.is_empty() {
            f.write_str("1")?;
        }
        for (i, l) in w.letters.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{l}")?;
        }
        f.write_str(")")?;
    }
    Ok(())
}

impl fmt::Display for TracePolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_words(f, &self.words, true)
    }
}

impl fmt::Display for MatrixPolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_words(f, &self.words, false)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

fn is_label_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, b: u8) -> Result<()> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected `{}`", b as char))
        }
    }

    fn real(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        if i < s.len() && (s[i] == b'+' || s[i] == b'-') {
            i += 1;
        }
        while i < s.len() && (s[i].is_ascii_digit() || s[i] == b'.') {
            i += 1;
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&s[start..i]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos = i;
                Ok(v)
            }
            _ => self.err("expected a number"),
        }
    }

    // (value, written as a plain real)
    fn coeff(&mut self) -> Result<Option<(Complex64, bool)>> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let re = self.real()?;
                let sign = match self.peek() {
                    Some(b'+') => 1.0,
                    Some(b'-') => -1.0,
                    _ => return self.err("expected `+` or `-` in complex coefficient"),
                };
                self.pos += 1;
                let im = self.real()?;
                self.expect(b'i')?;
                self.expect(b')')?;
                Ok(Some((Complex64::new(re, sign * im), false)))
            }
            Some(b) if b.is_ascii_digit() || b == b'.' || b == b'-' || b == b'+' => {
                let next = self.src.get(self.pos + 1).copied().unwrap_or(b' ');
                if (b == b'-' || b == b'+') && !(next.is_ascii_digit() || next == b'.') {
                    return Ok(None);
                }
                Ok(Some((c(self.real()?), true)))
            }
            _ => Ok(None),
        }
    }

    fn letter(&mut self) -> Result<Letter> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && is_label_char(self.src[self.pos]) {
            self.pos += 1;
        }
        let tok = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        if tok.is_empty() {
            self.pos = start;
            return self.err("expected a letter");
        }
        let (head, rest) = tok.split_at(1);
        Ok(match head {
            "q" | "p" if rest.is_empty() => {
                self.pos = start;
                return self.err(format!("variable `{tok}` needs a label"));
            }
            "q" => Letter::q(rest),
            "p" => Letter::p(rest),
            _ if tok == "1" || tok.as_bytes()[0].is_ascii_alphabetic() || tok.starts_with('_') => Letter::constant(tok),
            _ => {
                self.pos = start;
                return self.err(format!("bad letter `{tok}`"));
            }
        })
    }

    fn term(&mut self, negate: bool) -> Result<TraceWord> {
        let (coeff, real) = match self.coeff()? {
            Some(z) => {
                self.expect(b'*')?;
                z
            }
            None => (c(1.0), true),
        };
        let coeff = match (negate, real) {
            (false, _) => coeff,
            (true, true) => c(-coeff.re),
            (true, false) => -coeff,
        };
        self.skip_ws();
        if !self.src[self.pos..].starts_with(b"tr") {
            return self.err("expected `tr(`");
        }
        self.pos += 2;
        self.expect(b'(')?;
        let mut letters = Vec::new();
        while self.peek() != Some(b')') {
            if self.peek().is_none() {
                return self.err("unterminated `tr(`");
            }
            letters.push(self.letter()?);
        }
        self.pos += 1;
        if letters.is_empty() {
            return self.err("empty trace");
        }
        Ok(TraceWord::new(coeff, letters))
    }

    fn polynomial(&mut self) -> Result<Vec<TraceWord>> {
        if self.peek() == Some(b'0') {
            let save = self.pos;
            self.pos += 1;
            if self.peek().is_none() {
                return Ok(Vec::new());
            }
            self.pos = save;
        }
        let mut negate = false;
        if self.peek() == Some(b'-') {
            self.pos += 1;
            negate = true;
        }
        let mut words = vec![self.term(negate)?];
        loop {
            match self.peek() {
                None => return Ok(words),
                Some(b'+') => negate = false,
                Some(b'-') => negate = true,
                _ => return self.err("expected `+`, `-` or end of input"),
            }
            self.pos += 1;
            words.push(self.term(negate)?);
        }
    }
}

impl TracePolynomial {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_cap(text, DEFAULT_DEGREE_CAP)
    }

    pub fn parse_with_cap(text: &str, cap: usize) -> Result<Self> {
        if !text.is_ascii() {
            let pos = text.char_indices().find(|(_, ch)| !ch.is_ascii()).map(|(i, _)| i).unwrap_or(0);
            return Err(Error::Parse {
                pos,
                msg: "non-ASCII character".into(),
            });
        }
        let mut parser = Parser {
            src: text.as_bytes(),
            pos: 0,
        };
        let words = parser.polynomial()?;
        let p = TracePolynomial { words };
        p.check_degree(cap)?;
        Ok(p)
    }
}

impl FromStr for TracePolynomial {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
