//! Parametric learning-curve families.
//!
//! Every family is a saturating curve in one to three sample-size arguments:
//!
//! | family | formula (ñ = n / n_scale)                                   | free coefficients         |
//! |--------|-------------------------------------------------------------|---------------------------|
//! | EXP4   | `c - exp(b - a_i ñ_t^alpha)`                                | a_i, b, c, alpha          |
//! | EXP3.1 | `c - exp(b - a_i ñ_t)`                                      | a_i, b, c                 |
//! | ILOG2  | `c - a_i / ln(ñ_t)`                                         | a_i, c                    |
//! | EXP3.2 | `c - exp(b - a_i ñ_t - a_sigma ñ_sigma)`                    | a_i, a_sigma, b, c        |
//! | EXP3.3 | `c - exp(b - a_i ñ_t - a_ij ñ_aux - a_sigma ñ_sigma)`       | a_i, a_ij, a_sigma, b, c  |
//!
//! Raw counts are divided by `n_scale` before evaluation so that exponent
//! arguments stay O(1) for counts in the tens of thousands.
//!
//! Coefficients are always listed in the serialization order
//! `a_i, a_ij, a_sigma, b, c, alpha` ([`Param::ORDER`]); gradients and freeze
//! masks follow the same order.

use alloc::vec::Vec;
use core::fmt;

/// A learning-curve family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CurveFamily {
    Exp4,
    Exp3_1,
    Ilog2,
    Exp3_2,
    Exp3_3,
}

impl CurveFamily {
    pub const ALL: [CurveFamily; 5] = [
        CurveFamily::Exp4,
        CurveFamily::Exp3_1,
        CurveFamily::Ilog2,
        CurveFamily::Exp3_2,
        CurveFamily::Exp3_3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurveFamily::Exp4 => "EXP4",
            CurveFamily::Exp3_1 => "EXP3.1",
            CurveFamily::Ilog2 => "ILOG2",
            CurveFamily::Exp3_2 => "EXP3.2",
            CurveFamily::Exp3_3 => "EXP3.3",
        }
    }

    /// Parses the canonical name; `EXP3` is accepted as an alias of `EXP3.1`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "EXP4" => Some(CurveFamily::Exp4),
            "EXP3" | "EXP3.1" | "EXP3_1" => Some(CurveFamily::Exp3_1),
            "ILOG2" => Some(CurveFamily::Ilog2),
            "EXP3.2" | "EXP3_2" => Some(CurveFamily::Exp3_2),
            "EXP3.3" | "EXP3_3" => Some(CurveFamily::Exp3_3),
            _ => None,
        }
    }

    /// Coefficients the family depends on, in serialization order.
    pub fn params(self) -> &'static [Param] {
        use Param::*;
        match self {
            CurveFamily::Exp4 => &[Ai, B, C, Alpha],
            CurveFamily::Exp3_1 => &[Ai, B, C],
            CurveFamily::Ilog2 => &[Ai, C],
            CurveFamily::Exp3_2 => &[Ai, Asigma, B, C],
            CurveFamily::Exp3_3 => &[Ai, Aij, Asigma, B, C],
        }
    }

    /// Number of sample-size arguments.
    pub fn arity(self) -> usize {
        match self {
            CurveFamily::Exp4 | CurveFamily::Exp3_1 | CurveFamily::Ilog2 => 1,
            CurveFamily::Exp3_2 => 2,
            CurveFamily::Exp3_3 => 3,
        }
    }

    /// Coefficients that are both used by the family and not frozen by `mask`.
    pub fn free_params(self, mask: FreezeMask) -> Vec<Param> {
        self.params()
            .iter()
            .copied()
            .filter(|p| !mask.is_frozen(*p))
            .collect()
    }

    fn uses(self, slot: ArgSlot) -> bool {
        match slot {
            ArgSlot::Target => true,
            ArgSlot::Sigma => self.arity() >= 2,
            ArgSlot::Aux => self.arity() >= 3,
        }
    }
}

impl fmt::Display for CurveFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One learning-curve coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Param {
    Ai,
    Aij,
    Asigma,
    B,
    C,
    Alpha,
}

impl Param {
    pub const ORDER: [Param; 6] = [
        Param::Ai,
        Param::Aij,
        Param::Asigma,
        Param::B,
        Param::C,
        Param::Alpha,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::Ai => "a_i",
            Param::Aij => "a_ij",
            Param::Asigma => "a_sigma",
            Param::B => "b",
            Param::C => "c",
            Param::Alpha => "alpha",
        }
    }

    /// Box constraint `(lower, upper)` enforced by the fitter.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Param::Ai => (0.0, f64::INFINITY),
            Param::Aij | Param::Asigma | Param::B => (f64::NEG_INFINITY, f64::INFINITY),
            Param::C => (0.0, 1.0),
            Param::Alpha => (ALPHA_MIN, 4.0),
        }
    }
}

/// Smallest admissible EXP4 exponent; the open bound `alpha > 0` is
/// projected onto this value.
pub const ALPHA_MIN: f64 = 1e-6;

/// Per-coefficient freeze flags, one bit per [`Param::ORDER`] slot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct FreezeMask(u8);

impl FreezeMask {
    pub const NONE: FreezeMask = FreezeMask(0);

    pub fn is_frozen(self, p: Param) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn with(self, p: Param) -> Self {
        FreezeMask(self.0 | (1 << p.index()))
    }

    pub fn without(self, p: Param) -> Self {
        FreezeMask(self.0 & !(1 << p.index()))
    }

    /// Six-character `0`/`1` string in [`Param::ORDER`].
    pub fn to_bits(self) -> [u8; 6] {
        let mut out = [b'0'; 6];
        for p in Param::ORDER {
            if self.is_frozen(p) {
                out[p.index()] = b'1';
            }
        }
        out
    }

    pub fn parse_bits(s: &str) -> Option<Self> {
        let bytes = s.as_bytes();
        if bytes.len() != 6 {
            return None;
        }
        let mut mask = FreezeMask::NONE;
        for (p, &ch) in Param::ORDER.iter().zip(bytes) {
            match ch {
                b'0' => {}
                b'1' => mask = mask.with(*p),
                _ => return None,
            }
        }
        Some(mask)
    }
}

impl fmt::Display for FreezeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.to_bits() {
            write!(f, "{}", b as char)?;
        }
        Ok(())
    }
}

/// Coefficients of a learning curve together with its freeze mask and the
/// sample-size scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSet {
    pub a_i: f64,
    pub a_ij: f64,
    pub a_sigma: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub freeze: FreezeMask,
    /// Samples per unit; raw counts are divided by this before evaluation.
    pub n_scale: f64,
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet {
            a_i: 0.0,
            a_ij: 0.0,
            a_sigma: 0.0,
            b: 0.0,
            c: 0.0,
            alpha: 1.0,
            freeze: FreezeMask::NONE,
            n_scale: 1.0,
        }
    }
}

impl ParamSet {
    /// EXP3-style coefficients with `n_scale`; the rest at their defaults.
    pub fn exp3(a_i: f64, b: f64, c: f64, n_scale: f64) -> Self {
        ParamSet {
            a_i,
            b,
            c,
            n_scale,
            ..ParamSet::default()
        }
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Ai => self.a_i,
            Param::Aij => self.a_ij,
            Param::Asigma => self.a_sigma,
            Param::B => self.b,
            Param::C => self.c,
            Param::Alpha => self.alpha,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::Ai => self.a_i = v,
            Param::Aij => self.a_ij = v,
            Param::Asigma => self.a_sigma = v,
            Param::B => self.b = v,
            Param::C => self.c = v,
            Param::Alpha => self.alpha = v,
        }
    }

    pub fn frozen(mut self, p: Param) -> Self {
        self.freeze = self.freeze.with(p);
        self
    }
}

/// Raw sample-size arguments of a curve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CurveArgs {
    /// Labeled outcomes of the target task.
    pub n_t: f64,
    /// Summed labeled outcomes of the complementary tasks.
    pub n_sigma: f64,
    /// Labeled outcomes of one auxiliary task; zero when unused.
    pub n_aux: f64,
}

impl CurveArgs {
    pub fn single(n_t: f64) -> Self {
        CurveArgs {
            n_t,
            ..CurveArgs::default()
        }
    }

    pub fn pair(n_t: f64, n_sigma: f64) -> Self {
        CurveArgs {
            n_t,
            n_sigma,
            n_aux: 0.0,
        }
    }

    pub fn triple(n_t: f64, n_sigma: f64, n_aux: f64) -> Self {
        CurveArgs { n_t, n_sigma, n_aux }
    }

    pub fn get(&self, slot: ArgSlot) -> f64 {
        match slot {
            ArgSlot::Target => self.n_t,
            ArgSlot::Sigma => self.n_sigma,
            ArgSlot::Aux => self.n_aux,
        }
    }

    fn with_added(mut self, slot: ArgSlot, delta: f64) -> Self {
        match slot {
            ArgSlot::Target => self.n_t += delta,
            ArgSlot::Sigma => self.n_sigma += delta,
            ArgSlot::Aux => self.n_aux += delta,
        }
        self
    }
}

/// Which argument of a curve a sample increment applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgSlot {
    Target,
    Sigma,
    Aux,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurveError {
    #[error("{family} takes {arity} sample-size argument(s), got {args:?}")]
    ArityMismatch {
        family: CurveFamily,
        arity: usize,
        args: CurveArgs,
    },
    #[error("ILOG2 needs a scaled target sample size above 1, got {0}")]
    DomainError(f64),
    #[error("invalid curve input: {0}")]
    InvalidInput(&'static str),
}

fn check_args(family: CurveFamily, params: &ParamSet, args: &CurveArgs) -> Result<(), CurveError> {
    let counts = [args.n_t, args.n_sigma, args.n_aux];
    if counts.iter().any(|n| !n.is_finite() || *n < 0.0) {
        return Err(CurveError::InvalidInput("sample sizes must be finite and non-negative"));
    }
    if !(params.n_scale > 0.0 && params.n_scale.is_finite()) {
        return Err(CurveError::InvalidInput("n_scale must be positive"));
    }
    let mismatch = match family.arity() {
        1 => args.n_sigma != 0.0 || args.n_aux != 0.0,
        2 => args.n_aux != 0.0,
        _ => false,
    };
    if mismatch {
        return Err(CurveError::ArityMismatch {
            family,
            arity: family.arity(),
            args: *args,
        });
    }
    Ok(())
}

/// Scaled arguments and the shared exponent `b - Σ a_x ñ_x` of the EXP
/// families.
struct Scaled {
    t: f64,
    sigma: f64,
    aux: f64,
}

fn scaled(params: &ParamSet, args: &CurveArgs) -> Scaled {
    Scaled {
        t: args.n_t / params.n_scale,
        sigma: args.n_sigma / params.n_scale,
        aux: args.n_aux / params.n_scale,
    }
}

fn exponent(family: CurveFamily, p: &ParamSet, s: &Scaled) -> f64 {
    match family {
        CurveFamily::Exp4 => p.b - p.a_i * libm::pow(s.t, p.alpha),
        CurveFamily::Exp3_1 => p.b - p.a_i * s.t,
        CurveFamily::Exp3_2 => p.b - p.a_i * s.t - p.a_sigma * s.sigma,
        CurveFamily::Exp3_3 => p.b - p.a_i * s.t - p.a_ij * s.aux - p.a_sigma * s.sigma,
        CurveFamily::Ilog2 => unreachable!("ILOG2 has no exponent"),
    }
}

/// Evaluates `family` at `args`.
pub fn eval_curve(family: CurveFamily, params: &ParamSet, args: &CurveArgs) -> Result<f64, CurveError> {
    check_args(family, params, args)?;
    let s = scaled(params, args);
    match family {
        CurveFamily::Ilog2 => {
            if s.t <= 1.0 {
                return Err(CurveError::DomainError(s.t));
            }
            Ok(params.c - params.a_i / libm::log(s.t))
        }
        _ => Ok(params.c - libm::exp(exponent(family, params, &s))),
    }
}

/// Partial derivatives of the curve value with respect to every coefficient
/// of `family`, frozen or not, in [`Param::ORDER`]. Unused slots are zero.
pub fn partials(family: CurveFamily, params: &ParamSet, args: &CurveArgs) -> Result<[f64; 6], CurveError> {
    check_args(family, params, args)?;
    let s = scaled(params, args);
    let mut g = [0.0; 6];
    g[Param::C.index()] = 1.0;
    match family {
        CurveFamily::Ilog2 => {
            if s.t <= 1.0 {
                return Err(CurveError::DomainError(s.t));
            }
            g[Param::Ai.index()] = -1.0 / libm::log(s.t);
        }
        CurveFamily::Exp4 => {
            let e = libm::exp(exponent(family, params, &s));
            let pw = libm::pow(s.t, params.alpha);
            g[Param::Ai.index()] = pw * e;
            g[Param::B.index()] = -e;
            // d/dalpha of ñ^alpha is ñ^alpha ln ñ, which tends to 0 as ñ -> 0.
            g[Param::Alpha.index()] = if s.t > 0.0 {
                params.a_i * pw * libm::log(s.t) * e
            } else {
                0.0
            };
        }
        _ => {
            let e = libm::exp(exponent(family, params, &s));
            g[Param::Ai.index()] = s.t * e;
            g[Param::B.index()] = -e;
            if family.uses(ArgSlot::Sigma) {
                g[Param::Asigma.index()] = s.sigma * e;
            }
            if family.uses(ArgSlot::Aux) {
                g[Param::Aij.index()] = s.aux * e;
            }
        }
    }
    Ok(g)
}

/// Partial derivatives over the unfrozen coefficients of `family`, in
/// [`Param::ORDER`].
pub fn grad_params(
    family: CurveFamily,
    params: &ParamSet,
    args: &CurveArgs,
) -> Result<Vec<(Param, f64)>, CurveError> {
    let g = partials(family, params, args)?;
    Ok(family
        .free_params(params.freeze)
        .into_iter()
        .map(|p| (p, g[p.index()]))
        .collect())
}

/// Predicted change of the curve value when `delta` samples are added to the
/// `which` argument. This is an exact difference of two evaluations.
pub fn marginal_gain(
    family: CurveFamily,
    params: &ParamSet,
    args: &CurveArgs,
    delta: f64,
    which: ArgSlot,
) -> Result<f64, CurveError> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(CurveError::InvalidInput("delta must be finite and non-negative"));
    }
    if !family.uses(which) {
        return Err(CurveError::ArityMismatch {
            family,
            arity: family.arity(),
            args: args.with_added(which, delta),
        });
    }
    let before = eval_curve(family, params, args)?;
    let after = eval_curve(family, params, &args.with_added(which, delta))?;
    Ok(after - before)
}
