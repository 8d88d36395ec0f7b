use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::PhaseMonomial;
use crate::dynamics::{delta_kernel, e_kernel};
use crate::stats::CompensatedSum;
use crate::wave_system::WaveSystem;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Default ceiling on the number of generated terms.
pub const TERM_CEILING: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("expansion would exceed {ceiling} terms")]
    TooManyTerms { ceiling: usize },
    #[error("{what} has {got} entries, grid has {want}")]
    Length {
        what: &'static str,
        got: usize,
        want: usize,
    },
    #[error("amplitude of mode {mode} must be positive")]
    Amplitude { mode: usize },
    #[error("unknown expression '{0}'")]
    Expression(String),
    #[error("{0} has no closed form away from mu = 0")]
    NoClosedForm(Expr),
}

/// The five phase-averaged pieces of the second-order generating functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Expr {
    J1,
    J2,
    J3,
    J4,
    J5,
}

impl Expr {
    pub const ALL: [Expr; 5] = [Expr::J1, Expr::J2, Expr::J3, Expr::J4, Expr::J5];
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Expr {
    type Err = OracleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "J1" => Ok(Expr::J1),
            "J2" => Ok(Expr::J2),
            "J3" => Ok(Expr::J3),
            "J4" => Ok(Expr::J4),
            "J5" => Ok(Expr::J5),
            _ => Err(OracleError::Expression(s.into())),
        }
    }
}

/// `a_l` or, with `conj`, `ā_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Factor {
    pub mode: usize,
    pub conj: bool,
}

impl Factor {
    pub fn a(mode: usize) -> Self {
        Self { mode, conj: false }
    }

    pub fn abar(mode: usize) -> Self {
        Self { mode, conj: true }
    }

    fn flip(self) -> Self {
        Self {
            mode: self.mode,
            conj: !self.conj,
        }
    }
}

/// `coef · Π factors`, one monomial of an iterate in the initial amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMonomial {
    pub coef: Complex64,
    pub factors: Vec<Factor>,
}

impl FieldMonomial {
    fn conj(&self) -> Self {
        Self {
            coef: self.coef.conj(),
            factors: self.factors.iter().map(|f| f.flip()).collect(),
        }
    }

    /// Value at a concrete field.
    pub fn eval(&self, a: &[Complex64]) -> Complex64 {
        self.factors.iter().fold(self.coef, |acc, f| {
            acc * if f.conj { a[f.mode].conj() } else { a[f.mode] }
        })
    }
}

/// A first-iterate monomial before time integration: `c · Π factors · e^{iyt}`
/// under `∫₀ᵀ dt`, so that the integrated value is `c Δ_T(y)`.
#[derive(Debug, Clone, PartialEq)]
struct Vertex {
    coef: Complex64,
    freq: f64,
    factors: [Factor; 2],
}

/// Right-hand side vertices of `ȧ_l = −i Σ [...]` in the interaction picture.
fn vertices(sys: &WaveSystem, l: usize) -> Vec<Vertex> {
    let tab = sys.triads();
    let mut out = Vec::new();
    for t in tab.with_sum(l) {
        out.push(Vertex {
            coef: -I * t.coupling,
            freq: t.detuning,
            factors: [Factor::a(t.left), Factor::a(t.right)],
        });
    }
    for t in tab.with_left(l) {
        out.push(Vertex {
            coef: -2.0 * I * t.coupling.conj(),
            freq: -t.detuning,
            factors: [Factor::a(t.sum), Factor::abar(t.right)],
        });
    }
    out
}

/// `a¹_l(T)` as monomials in the initial field.
pub fn first_iterate_terms(sys: &WaveSystem, l: usize, t: f64) -> Vec<FieldMonomial> {
    vertices(sys, l)
        .into_iter()
        .map(|v| FieldMonomial {
            coef: v.coef * delta_kernel(v.freq, t),
            factors: v.factors.to_vec(),
        })
        .collect()
}

/// `a²_l(T)` by substituting the running first iterate into each factor of
/// each vertex: `∫₀ᵀ e^{iyt} Δ_t(z) dt = E(z + y, y)`.
pub fn second_iterate_terms(sys: &WaveSystem, l: usize, t: f64) -> Vec<FieldMonomial> {
    let mut out = Vec::new();
    for outer in vertices(sys, l) {
        for slot in 0..2 {
            let replaced = outer.factors[slot];
            let other = outer.factors[1 - slot];
            for inner in vertices(sys, replaced.mode) {
                // conjugating a¹ conjugates the coefficient and flips the
                // kernel argument: Δ̄_t(z) = Δ_t(−z)
                let (c, z, f) = if replaced.conj {
                    (
                        inner.coef.conj(),
                        -inner.freq,
                        [inner.factors[0].flip(), inner.factors[1].flip()],
                    )
                } else {
                    (inner.coef, inner.freq, inner.factors)
                };
                out.push(FieldMonomial {
                    coef: outer.coef * c * e_kernel(z + outer.freq, outer.freq, t),
                    factors: vec![other, f[0], f[1]],
                });
            }
        }
    }
    out
}

/// One fully expanded term `coef · Π A_l^{p_l} · Π ψ_l^{q_l}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicTerm {
    pub coef: Complex64,
    pub amp_powers: Vec<(usize, u32)>,
    pub phase: PhaseMonomial,
}

impl SymbolicTerm {
    pub fn from_factors(coef: Complex64, factors: &[Factor]) -> Self {
        let mut powers: Vec<(usize, u32)> = Vec::new();
        let mut phase = PhaseMonomial::default();
        for f in factors {
            match powers.iter_mut().find(|(m, _)| *m == f.mode) {
                Some((_, p)) => *p += 1,
                None => powers.push((f.mode, 1)),
            }
            phase.shift(f.mode, if f.conj { -1 } else { 1 });
        }
        powers.sort_unstable();
        Self {
            coef,
            amp_powers: powers,
            phase,
        }
    }

    pub fn amplitude_factor(&self, amps: &[f64]) -> f64 {
        self.amp_powers
            .iter()
            .map(|&(m, p)| amps[m].powi(p as i32))
            .product()
    }
}

/// Fully expanded expression with the amplitudes it was generated for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSum {
    pub expr: Expr,
    pub modes: usize,
    pub amplitudes: Vec<f64>,
    pub terms: Vec<SymbolicTerm>,
}

/// Mean of `Π ψ_l^{p_l}` over independent uniform phases.
pub fn phase_average(m: &PhaseMonomial) -> u8 {
    u8::from(m.is_empty())
}

/// Which `μ`-dependent prefactors the expressions carry. The two agree at
/// `μ ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Weights {
    /// `J2` with `−μ²/(2A²)` and the `J5` cross term
    /// `(λ_j + μ_j/(4A_j²))(μ_k/A_k²)(u_k − ū_k)u_j`, `u = a¹ā`.
    #[default]
    Literal,
    /// Second-order Taylor coefficients of `e^{λ|a|²}(a/ā)^{μ/2}`:
    /// `J2` with `−μ²/(4A²)` and `J5 = ½Σ_{j≠k}(w1_j u_j + w1'_j ū_j) w1_k u_k`
    /// with `w1' = λ − μ/(2A²)`.
    Expanded,
}

/// Inputs shared by every expression.
#[derive(Debug, Clone)]
pub struct Setup<'a> {
    pub sys: &'a WaveSystem,
    pub amps: &'a [f64],
    pub lambda: &'a [Complex64],
    pub mu: &'a [i32],
    pub t: f64,
    pub weights: Weights,
}

impl<'a> Setup<'a> {
    pub fn new(
        sys: &'a WaveSystem,
        amps: &'a [f64],
        lambda: &'a [Complex64],
        mu: &'a [i32],
        t: f64,
    ) -> Result<Self, OracleError> {
        let want = sys.len();
        for (what, got) in [
            ("amplitudes", amps.len()),
            ("lambda", lambda.len()),
            ("mu", mu.len()),
        ] {
            if got != want {
                return Err(OracleError::Length { what, got, want });
            }
        }
        if let Some(mode) = (0..want).find(|&m| !(amps[m] > 0.0)) {
            return Err(OracleError::Amplitude { mode });
        }
        Ok(Self {
            sys,
            amps,
            lambda,
            mu,
            t,
            weights: Weights::Literal,
        })
    }

    pub fn with_weights(mut self, weights: Weights) -> Self {
        self.weights = weights;
        self
    }

    fn mu_f(&self, j: usize) -> f64 {
        f64::from(self.mu[j])
    }

    /// `λ_j + μ_j / (2A_j²)`.
    pub fn w1(&self, j: usize) -> Complex64 {
        self.lambda[j] + self.mu_f(j) / (2.0 * self.amps[j].powi(2))
    }

    /// `λ_j − μ_j / (2A_j²)`.
    pub fn w1_bar(&self, j: usize) -> Complex64 {
        self.lambda[j] - self.mu_f(j) / (2.0 * self.amps[j].powi(2))
    }

    /// `λ_j + λ_j² A_j² − μ_j² / (c A_j²)` with `c = 2` or `4` by [`Weights`].
    pub fn w2(&self, j: usize) -> Complex64 {
        let a2 = self.amps[j].powi(2);
        let c = match self.weights {
            Weights::Literal => 2.0,
            Weights::Expanded => 4.0,
        };
        self.lambda[j] + self.lambda[j] * self.lambda[j] * a2 - self.mu_f(j).powi(2) / (c * a2)
    }

    /// `λ_j²/2 + μ_j/(4A_j⁴)(μ_j/2 − 1) + λ_j μ_j/(2A_j²)`.
    pub fn w4(&self, j: usize) -> Complex64 {
        let a2 = self.amps[j].powi(2);
        let m = self.mu_f(j);
        self.lambda[j] * self.lambda[j] / 2.0
            + m / (4.0 * a2 * a2) * (m / 2.0 - 1.0)
            + self.lambda[j] * m / (2.0 * a2)
    }
}

fn push_product(
    sink: &mut impl FnMut(Complex64, &[Factor]),
    scale: Complex64,
    parts: &[&FieldMonomial],
    extra: &[Factor],
    buf: &mut Vec<Factor>,
) {
    if scale == Complex64::new(0.0, 0.0) {
        return;
    }
    buf.clear();
    let mut c = scale;
    for p in parts {
        c *= p.coef;
        buf.extend_from_slice(&p.factors);
    }
    buf.extend_from_slice(extra);
    sink(c, buf);
}

/// Upper bound on the number of terms `visit_terms` will produce.
pub fn term_count_bound(expr: Expr, sys: &WaveSystem) -> usize {
    let n = sys.len();
    let deg: Vec<usize> = (0..n)
        .map(|l| sys.triads().with_sum(l).count() + sys.triads().with_left(l).count())
        .collect();
    let second: Vec<usize> = (0..n)
        .map(|l| {
            vertices(sys, l)
                .iter()
                .map(|v| v.factors.iter().map(|f| deg[f.mode]).sum::<usize>())
                .sum()
        })
        .collect();
    match expr {
        Expr::J1 => deg.iter().sum(),
        Expr::J2 | Expr::J4 => deg.iter().map(|d| d * d).sum(),
        Expr::J3 => second.iter().sum(),
        Expr::J5 => {
            let s: usize = deg.iter().sum();
            let s2: usize = deg.iter().map(|d| d * d).sum();
            3 * (s * s - s2)
        }
    }
}

/// First iterates of every mode and their conjugates.
struct Expansion {
    a1: Vec<Vec<FieldMonomial>>,
    a1c: Vec<Vec<FieldMonomial>>,
}

impl Expansion {
    fn new(setup: &Setup<'_>) -> Self {
        let a1: Vec<Vec<FieldMonomial>> = (0..setup.sys.len())
            .map(|l| first_iterate_terms(setup.sys, l, setup.t))
            .collect();
        let a1c = a1
            .iter()
            .map(|v| v.iter().map(FieldMonomial::conj).collect())
            .collect();
        Self { a1, a1c }
    }
}

/// Terms of `expr` whose outer mode index is `j`.
fn visit_block(
    expr: Expr,
    setup: &Setup<'_>,
    ex: &Expansion,
    j: usize,
    sink: &mut impl FnMut(Complex64, &[Factor]),
) {
    let mut buf = Vec::with_capacity(8);
    let (a1, a1c) = (&ex.a1, &ex.a1c);
    match expr {
        Expr::J1 => {
            let w = setup.w1(j);
            for m in &a1[j] {
                push_product(sink, w, &[m], &[Factor::abar(j)], &mut buf);
            }
        }
        Expr::J2 => {
            let w = 0.5 * setup.w2(j);
            for m in &a1[j] {
                for mc in &a1c[j] {
                    push_product(sink, w, &[m, mc], &[], &mut buf);
                }
            }
        }
        Expr::J3 => {
            let w = setup.w1(j);
            for m in second_iterate_terms(setup.sys, j, setup.t) {
                push_product(sink, w, &[&m], &[Factor::abar(j)], &mut buf);
            }
        }
        Expr::J4 => {
            let w = setup.w4(j);
            for m in &a1[j] {
                for m2 in &a1[j] {
                    push_product(
                        sink,
                        w,
                        &[m, m2],
                        &[Factor::abar(j), Factor::abar(j)],
                        &mut buf,
                    );
                }
            }
        }
        Expr::J5 if setup.weights == Weights::Expanded => {
            for k in (0..setup.sys.len()).filter(|&k| k != j) {
                let plain = 0.5 * setup.w1(j) * setup.w1(k);
                let mixed = 0.5 * setup.w1_bar(j) * setup.w1(k);
                for mk in &a1[k] {
                    for mj in &a1[j] {
                        push_product(
                            sink,
                            plain,
                            &[mj, mk],
                            &[Factor::abar(j), Factor::abar(k)],
                            &mut buf,
                        );
                    }
                    for mjc in &a1c[j] {
                        push_product(
                            sink,
                            mixed,
                            &[mjc, mk],
                            &[Factor::a(j), Factor::abar(k)],
                            &mut buf,
                        );
                    }
                }
            }
        }
        Expr::J5 => {
            for k in (0..setup.sys.len()).filter(|&k| k != j) {
                let ll = 0.5 * setup.lambda[j] * setup.lambda[k];
                let mix = 0.5
                    * (setup.lambda[j] + setup.mu_f(j) / (4.0 * setup.amps[j].powi(2)))
                    * setup.mu_f(k)
                    / setup.amps[k].powi(2);
                for mk in &a1[k] {
                    for mj in &a1[j] {
                        push_product(
                            sink,
                            ll + mix,
                            &[mj, mk],
                            &[Factor::abar(j), Factor::abar(k)],
                            &mut buf,
                        );
                    }
                    for mjc in &a1c[j] {
                        push_product(
                            sink,
                            ll,
                            &[mjc, mk],
                            &[Factor::a(j), Factor::abar(k)],
                            &mut buf,
                        );
                    }
                }
                for mkc in &a1c[k] {
                    for mj in &a1[j] {
                        push_product(
                            sink,
                            -mix,
                            &[mkc, mj],
                            &[Factor::a(k), Factor::abar(j)],
                            &mut buf,
                        );
                    }
                }
            }
        }
    }
}

/// Stream every term of `expr` as `(coefficient, factors)` without storing
/// the expansion.
pub fn visit_terms(expr: Expr, setup: &Setup<'_>, mut sink: impl FnMut(Complex64, &[Factor])) {
    let ex = Expansion::new(setup);
    for j in 0..setup.sys.len() {
        visit_block(expr, setup, &ex, j, &mut sink);
    }
}

/// Fully expanded `expr` with exact phase bookkeeping.
pub fn generate_terms(
    expr: Expr,
    setup: &Setup<'_>,
    ceiling: usize,
) -> Result<TermSum, OracleError> {
    if term_count_bound(expr, setup.sys) > ceiling {
        return Err(OracleError::TooManyTerms { ceiling });
    }
    let mut terms = Vec::new();
    visit_terms(expr, setup, |c, f| {
        terms.push(SymbolicTerm::from_factors(c, f))
    });
    Ok(TermSum {
        expr,
        modes: setup.sys.len(),
        amplitudes: setup.amps.to_vec(),
        terms,
    })
}

/// `⟨Π ψ_l^{μ_l} · Σ terms⟩` over independent uniform phases.
pub fn average_term_sum(terms: &TermSum, mu: &[i32]) -> Complex64 {
    let external = PhaseMonomial::from_pairs(mu.iter().enumerate().map(|(l, &p)| (l, p)));
    let mut re = CompensatedSum::default();
    let mut im = CompensatedSum::default();
    for t in &terms.terms {
        if phase_average(&t.phase.product(&external)) == 1 {
            let v = t.coef * t.amplitude_factor(&terms.amplitudes);
            re.add(v.re);
            im.add(v.im);
        }
    }
    Complex64::new(re.value(), im.value())
}

/// Streaming average and survivor count of `expr` at the setup's `μ`.
/// Blocks of outer indices run in parallel and are reduced in index order.
pub fn average_streaming(expr: Expr, setup: &Setup<'_>) -> (Complex64, usize) {
    let n = setup.sys.len();
    let ex = Expansion::new(setup);
    let blocks: Vec<(CompensatedSum, CompensatedSum, usize)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut net = vec![0i32; n];
            let mut re = CompensatedSum::default();
            let mut im = CompensatedSum::default();
            let mut survivors = 0usize;
            visit_block(expr, setup, &ex, j, &mut |c, factors: &[Factor]| {
                for f in factors {
                    net[f.mode] += if f.conj { -1 } else { 1 };
                }
                let ok = factors.iter().all(|f| net[f.mode] + setup.mu[f.mode] == 0)
                    && setup
                        .mu
                        .iter()
                        .enumerate()
                        .all(|(l, &m)| m == 0 || net[l] + m == 0);
                for f in factors {
                    net[f.mode] = 0;
                }
                if ok {
                    let amp: f64 = factors.iter().map(|f| setup.amps[f.mode]).product();
                    let v = c * amp;
                    re.add(v.re);
                    im.add(v.im);
                    survivors += 1;
                }
            });
            (re, im, survivors)
        })
        .collect();
    let mut re = CompensatedSum::default();
    let mut im = CompensatedSum::default();
    let mut survivors = 0;
    for (r, i, s) in &blocks {
        re.merge(r);
        im.merge(i);
        survivors += s;
    }
    (Complex64::new(re.value(), im.value()), survivors)
}

/// Surviving-term counts at `μ ≡ 0`, `λ ≡ 1` over a sweep of grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValenceTable {
    pub expr: Expr,
    /// Grid sizes `N`.
    pub modes: Vec<usize>,
    /// Modes that belong to at least one active triad; the fit is against these.
    pub active_modes: Vec<usize>,
    pub survivors: Vec<usize>,
    /// Slope of `log survivors` against `log active_modes`; `None` when any
    /// count is 0.
    pub exponent: Option<f64>,
}

pub fn valence_scaling(
    expr: Expr,
    systems: &[WaveSystem],
    t: f64,
    ceiling: usize,
) -> Result<ValenceTable, OracleError> {
    let mut modes = Vec::new();
    let mut active_modes = Vec::new();
    let mut survivors = Vec::new();
    for sys in systems {
        if term_count_bound(expr, sys) > ceiling {
            return Err(OracleError::TooManyTerms { ceiling });
        }
        let n = sys.len();
        let amps = vec![1.0; n];
        let lambda = vec![Complex64::new(1.0, 0.0); n];
        let mu = vec![0; n];
        let setup = Setup::new(sys, &amps, &lambda, &mu, t)?;
        modes.push(n);
        let mut touched = vec![false; n];
        for t in sys.triads().iter() {
            touched[t.sum] = true;
            touched[t.left] = true;
            touched[t.right] = true;
        }
        active_modes.push(touched.iter().filter(|&&x| x).count());
        survivors.push(average_streaming(expr, &setup).1);
    }
    let exponent = if survivors.iter().all(|&s| s > 0) && modes.len() >= 2 {
        let x: Vec<f64> = active_modes.iter().map(|&n| (n as f64).ln()).collect();
        let y: Vec<f64> = survivors.iter().map(|&s| (s as f64).ln()).collect();
        Some(crate::stats::linear_fit(&x, &y, None).0)
    } else {
        None
    };
    Ok(ValenceTable {
        expr,
        modes,
        active_modes,
        survivors,
        exponent,
    })
}
