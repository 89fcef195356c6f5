//! Finite complex Grassmann algebras.
//!
//! An element is stored as a sparse map from monomials to complex
//! coefficients. A monomial is a set of generator indices, kept as a bitmask
//! whose set bits read in increasing order give the canonical (strictly
//! increasing) product `θ_{i1} θ_{i2} ... θ_{ik}`.
//!
//! Conjugation pairs generators: `θ_{2k}* = θ_{2k+1}` and vice versa, so a
//! complex fermionic entry and its adjoint both live in the same algebra. With
//! an odd generator count the last generator has no partner and is treated
//! as self-conjugate.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Coefficients with magnitude below this are dropped after arithmetic.
pub const DROP_TOLERANCE: f64 = 1e-14;

/// Largest supported generator count (monomials are `u64` bitmasks).
pub const MAX_GENERATORS: u32 = 63;

/// Grade classification by monomial length parity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grade {
    Even,
    Odd,
    Mixed,
}

/// Sign convention for conjugating a product of generators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConjConvention {
    /// `(θa θb)* = θb* θa*`, an antilinear anti-automorphism.
    #[default]
    Reversing,
    /// `(θa θb)* = θa* θb*`, an antilinear automorphism.
    OrderPreserving,
}

/// Sign picked up when the canonical monomial `a` is multiplied on the right
/// by the canonical monomial `b` and the result is sorted. Caller guarantees
/// `a & b == 0`.
#[inline]
pub(crate) fn reorder_sign(a: u64, b: u64) -> f64 {
    let mut swaps = 0u32;
    let mut rest = b;
    while rest != 0 {
        let j = rest.trailing_zeros();
        rest &= rest - 1;
        // generators of `a` that sit after position j must hop over θ_j
        swaps += (a >> j >> 1).count_ones();
    }
    if swaps.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Partner index under conjugation.
#[inline]
pub(crate) fn partner(index: u32, generators: u32) -> u32 {
    let p = index ^ 1;
    if p < generators {
        p
    } else {
        index
    }
}

fn sign_to_sort(seq: &[u32]) -> f64 {
    let mut inversions = 0usize;
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            if seq[i] > seq[j] {
                inversions += 1;
            }
        }
    }
    if inversions.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Conjugate of a single canonical monomial: the image mask and the sign.
pub(crate) fn conj_monomial(mask: u64, generators: u32, conv: ConjConvention) -> (u64, f64) {
    let mut seq: Vec<u32> = Vec::with_capacity(mask.count_ones() as usize);
    let mut rest = mask;
    while rest != 0 {
        let i = rest.trailing_zeros();
        rest &= rest - 1;
        seq.push(partner(i, generators));
    }
    if conv == ConjConvention::Reversing {
        seq.reverse();
    }
    let image = seq.iter().fold(0u64, |m, &i| m | (1u64 << i));
    (image, sign_to_sort(&seq))
}

/// Element of a complex Grassmann algebra with a fixed generator count.
#[derive(Clone, Debug, PartialEq)]
pub struct GrassmannElement {
    generators: u32,
    terms: BTreeMap<u64, Complex64>,
}

impl GrassmannElement {
    pub fn zero(generators: u32) -> Self {
        assert!(generators <= MAX_GENERATORS, "too many generators");
        GrassmannElement {
            generators,
            terms: BTreeMap::new(),
        }
    }

    pub fn scalar(generators: u32, value: Complex64) -> Self {
        let mut e = Self::zero(generators);
        e.insert(0, value);
        e
    }

    pub fn one(generators: u32) -> Self {
        Self::scalar(generators, Complex64::new(1.0, 0.0))
    }

    /// The generator `θ_index`.
    pub fn generator(generators: u32, index: usize) -> Result<Self> {
        if index >= generators as usize {
            return Err(Error::GeneratorOutOfRange { index, generators });
        }
        let mut e = Self::zero(generators);
        e.insert(1u64 << index, Complex64::new(1.0, 0.0));
        Ok(e)
    }

    /// Builds `coeff · θ_{i1} θ_{i2} ...` for an arbitrary (not necessarily
    /// sorted) index sequence; repeated indices give zero.
    pub fn monomial(generators: u32, indices: &[usize], coeff: Complex64) -> Result<Self> {
        let mut acc = Self::scalar(generators, coeff);
        for &i in indices {
            acc = acc.try_mul(&Self::generator(generators, i)?)?;
        }
        Ok(acc)
    }

    /// Builds an element from raw `(mask, coefficient)` pairs.
    pub fn from_terms(generators: u32, terms: impl IntoIterator<Item = (u64, Complex64)>) -> Self {
        let mut e = Self::zero(generators);
        for (m, c) in terms {
            assert!(
                generators == 64 || m >> generators == 0,
                "monomial uses generators outside the algebra"
            );
            e.accumulate(m, c);
        }
        e.prune();
        e
    }

    fn insert(&mut self, mask: u64, c: Complex64) {
        if c.norm() >= DROP_TOLERANCE {
            self.terms.insert(mask, c);
        }
    }

    fn accumulate(&mut self, mask: u64, c: Complex64) {
        *self.terms.entry(mask).or_insert(Complex64::new(0.0, 0.0)) += c;
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.norm() >= DROP_TOLERANCE);
    }

    pub fn generators(&self) -> u32 {
        self.generators
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Raw `(mask, coefficient)` view.
    pub fn terms(&self) -> impl Iterator<Item = (u64, Complex64)> + '_ {
        self.terms.iter().map(|(&m, &c)| (m, c))
    }

    /// Terms keyed by their strictly increasing generator index sequence.
    pub fn monomials(&self) -> impl Iterator<Item = (Vec<usize>, Complex64)> + '_ {
        self.terms.iter().map(|(&m, &c)| {
            let idx = (0..64).filter(|i| m >> i & 1 == 1).collect();
            (idx, c)
        })
    }

    pub fn coefficient(&self, mask: u64) -> Complex64 {
        self.terms.get(&mask).copied().unwrap_or_default()
    }

    /// Coefficient of the empty monomial.
    pub fn body(&self) -> Complex64 {
        self.coefficient(0)
    }

    /// Euclidean norm of the coefficient vector.
    pub fn norm(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a + c.norm_sqr()).sqrt()
    }

    pub fn grade(&self) -> Grade {
        let mut even = false;
        let mut odd = false;
        for m in self.terms.keys() {
            if m.count_ones() % 2 == 0 {
                even = true;
            } else {
                odd = true;
            }
        }
        match (even, odd) {
            (_, false) => Grade::Even,
            (false, true) => Grade::Odd,
            (true, true) => Grade::Mixed,
        }
    }

    pub fn even_part(&self) -> Self {
        self.filter(|m| m.count_ones() % 2 == 0)
    }

    pub fn odd_part(&self) -> Self {
        self.filter(|m| m.count_ones() % 2 == 1)
    }

    fn filter(&self, keep: impl Fn(u64) -> bool) -> Self {
        GrassmannElement {
            generators: self.generators,
            terms: self
                .terms
                .iter()
                .filter(|(&m, _)| keep(m))
                .map(|(&m, &c)| (m, c))
                .collect(),
        }
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.generators != other.generators {
            return Err(Error::AlgebraMismatch {
                left: self.generators,
                right: other.generators,
            });
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let mut out = self.clone();
        for (&m, &c) in &other.terms {
            out.accumulate(m, c);
        }
        out.prune();
        Ok(out)
    }

    /// Graded product; reordering into canonical order contributes the
    /// permutation sign and repeated generators annihilate the term.
    pub fn try_mul(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let mut out = Self::zero(self.generators);
        for (&a, &ca) in &self.terms {
            for (&b, &cb) in &other.terms {
                if a & b != 0 {
                    continue;
                }
                out.accumulate(a | b, ca * cb * reorder_sign(a, b));
            }
        }
        out.prune();
        Ok(out)
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let mut out = Self::zero(self.generators);
        for (&m, &c) in &self.terms {
            out.insert(m, c * s);
        }
        out
    }

    /// Conjugation with the default (order-reversing) convention.
    pub fn conj(&self) -> Self {
        self.conj_with(ConjConvention::Reversing)
    }

    pub fn conj_with(&self, conv: ConjConvention) -> Self {
        let mut out = Self::zero(self.generators);
        for (&m, &c) in &self.terms {
            let (image, sign) = conj_monomial(m, self.generators, conv);
            out.accumulate(image, c.conj() * sign);
        }
        out.prune();
        out
    }

    /// Berezin integration `∫ dθ_{g1} ... dθ_{gk} a`. The last listed
    /// generator is the innermost integral and acts first; each integral is
    /// the left derivative `∂/∂θ`.
    pub fn berezin_integrate(&self, gens: &[usize]) -> Result<Self> {
        let mut cur = self.clone();
        for &g in gens.iter().rev() {
            if g >= self.generators as usize {
                return Err(Error::GeneratorOutOfRange {
                    index: g,
                    generators: self.generators,
                });
            }
            let bit = 1u64 << g;
            let mut next = Self::zero(self.generators);
            for (&m, &c) in &cur.terms {
                if m & bit == 0 {
                    continue;
                }
                // move θ_g to the front past the generators preceding it
                let before = (m & (bit - 1)).count_ones();
                let sign = if before.is_multiple_of(2) { 1.0 } else { -1.0 };
                next.insert(m & !bit, c * sign);
            }
            cur = next;
        }
        Ok(cur)
    }

    /// `exp(self)` for an even nilpotent-plus-body element, summed until the
    /// series terminates.
    pub fn exp(&self) -> Self {
        let body = self.body();
        let soul = self.try_add(&Self::scalar(self.generators, -body)).unwrap();
        let mut term = Self::one(self.generators);
        let mut acc = Self::one(self.generators);
        let mut k = 1.0;
        loop {
            term = term.try_mul(&soul).unwrap().scale(Complex64::new(1.0 / k, 0.0));
            if term.is_zero() {
                break;
            }
            acc = acc.try_add(&term).unwrap();
            k += 1.0;
        }
        acc.scale(body.exp())
    }
}

impl fmt::Display for GrassmannElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (idx, c) in self.monomials() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "({}{:+}i)", c.re, c.im)?;
            for i in idx {
                write!(f, "·θ{i}")?;
            }
        }
        Ok(())
    }
}

// Operator forms panic on algebra mismatch; use the `try_*` methods to get
// the error instead.

impl Add for &GrassmannElement {
    type Output = GrassmannElement;
    fn add(self, rhs: Self) -> GrassmannElement {
        self.try_add(rhs).expect("Grassmann addition")
    }
}

impl AddAssign<&GrassmannElement> for GrassmannElement {
    fn add_assign(&mut self, rhs: &GrassmannElement) {
        self.check_same(rhs).expect("Grassmann addition");
        for (&m, &c) in &rhs.terms {
            self.accumulate(m, c);
        }
        self.prune();
    }
}

impl Sub for &GrassmannElement {
    type Output = GrassmannElement;
    fn sub(self, rhs: Self) -> GrassmannElement {
        self.try_add(&-rhs).expect("Grassmann subtraction")
    }
}

impl Neg for &GrassmannElement {
    type Output = GrassmannElement;
    fn neg(self) -> GrassmannElement {
        self.scale(Complex64::new(-1.0, 0.0))
    }
}

impl Mul for &GrassmannElement {
    type Output = GrassmannElement;
    fn mul(self, rhs: Self) -> GrassmannElement {
        self.try_mul(rhs).expect("Grassmann product")
    }
}
