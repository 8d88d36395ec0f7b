//! Joint intensity PDF of a few active modes under the Peierls equation
//! `∂P/∂t = −Σ_j ∂F_j/∂s_j`, and the joint-moment equations the same flux
//! implies.
//!
//! The flux along `s_j` is
//!
//! ```text
//! −F_j / (4πε² μ s_j) =
//!     Σ_{j=m+n} K¹ [s_n s_m ∂_jP − 2 s_m P − 4 s_n s_m ∂_mP]
//!   + Σ_{n=j+m} K² [2 s_n s_m ∂_jP + 2 s_m P + 2 s_n s_m ∂_mP]
//! ```
//!
//! with `K¹ = |V^j_{mn}|² δ_w(ω^j_{mn})` and `K² = |V^n_{jm}|² δ_w(ω^n_{jm})`
//! summed over ordered pairs. Modes outside the active set either drop out
//! (`Bath::Isolated`) or are integrated against independent exponential
//! marginals with a fixed spectrum (`Bath::Frozen`). Either way the flux
//! reduces to a short list of polynomial terms per direction, which drives
//! both the finite-volume solver and the moment equations.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetic::{measure, BroadenedDelta};
use crate::stats::sum;
use crate::wave_system::WaveSystem;

/// Largest active set the tensor-grid solver accepts.
pub const MAX_ACTIVE: usize = 4;
/// Fraction of the explicit stability limit used by [`evolve_joint`].
pub const CFL: f64 = 0.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultimodeError {
    #[error("active set: {0}")]
    ActiveSet(String),
    #[error("bath spectrum has {got} entries, grid has {want}")]
    Bath { got: usize, want: usize },
    #[error("grid needs at least 2 cells per dimension and positive extents")]
    Grid,
    #[error("time step {dt} exceeds the stability limit {limit}")]
    Cfl { dt: f64, limit: f64 },
    #[error("density went negative ({value:e}) in cell {cell}")]
    Negative { cell: usize, value: f64 },
    #[error("moment arrays do not match the active set")]
    Moments,
}

/// Treatment of triads that reach outside the active set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bath {
    /// Only triads whose three legs are all active.
    Isolated,
    /// Outside modes are independent exponentials with these means.
    Frozen(Vec<f64>),
}

/// One contribution `coef · Π s_b^{powers[b]} · X` to a flux component,
/// where `X` is `P` or `∂P/∂s_deriv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxTerm {
    pub coef: f64,
    pub powers: Vec<u8>,
    pub deriv: Option<usize>,
}

/// The Peierls flux of one system restricted to an active set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeierlsOperator {
    active: Vec<usize>,
    terms: Vec<Vec<FluxTerm>>,
}

fn factorial(p: u32) -> f64 {
    (1..=p).map(f64::from).product()
}

impl PeierlsOperator {
    pub fn new(
        sys: &WaveSystem,
        active: &[usize],
        delta: &BroadenedDelta,
        bath: &Bath,
    ) -> Result<Self, MultimodeError> {
        let n_modes = sys.len();
        if active.is_empty() {
            return Err(MultimodeError::ActiveSet("empty".into()));
        }
        let mut slot = vec![None; n_modes];
        for (a, &m) in active.iter().enumerate() {
            if m >= n_modes {
                return Err(MultimodeError::ActiveSet(format!(
                    "mode {m} is off the grid"
                )));
            }
            if m == sys.grid().zero() {
                return Err(MultimodeError::ActiveSet(
                    "the zero mode carries no dynamics".into(),
                ));
            }
            if slot[m].replace(a).is_some() {
                return Err(MultimodeError::ActiveSet(format!("mode {m} listed twice")));
            }
        }
        if let Bath::Frozen(n) = bath {
            if n.len() != n_modes {
                return Err(MultimodeError::Bath {
                    got: n.len(),
                    want: n_modes,
                });
            }
        }
        let c = 4.0 * PI * sys.epsilon().powi(2) * measure(sys);
        let k = active.len();
        let tab = sys.triads();
        let mut terms = Vec::with_capacity(k);
        for &j in active {
            let mut acc: BTreeMap<(Vec<u8>, Option<usize>), f64> = BTreeMap::new();
            let mut push = |w: f64, vars: &[usize], deriv: Option<usize>| {
                let mut coef = -c * w;
                let mut powers = vec![0u8; k];
                let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
                for &v in vars.iter().chain(std::iter::once(&j)) {
                    *counts.entry(v).or_default() += 1;
                }
                let mut d_slot = None;
                for (&v, &p) in &counts {
                    match (slot[v], bath) {
                        (Some(a), _) => {
                            powers[a] = p as u8;
                            if deriv == Some(v) {
                                d_slot = Some(a);
                            }
                        }
                        (None, Bath::Frozen(nb)) => {
                            coef *= if deriv == Some(v) {
                                -factorial(p) * nb[v].powi(p as i32 - 1)
                            } else {
                                factorial(p) * nb[v].powi(p as i32)
                            };
                        }
                        (None, Bath::Isolated) => unreachable!("isolated triads are filtered"),
                    }
                }
                if coef != 0.0 {
                    *acc.entry((powers, d_slot)).or_default() += coef;
                }
            };
            let inside = |legs: [usize; 3]| {
                matches!(bath, Bath::Frozen(_)) || legs.iter().all(|&l| slot[l].is_some())
            };
            for t in tab.with_sum(j) {
                if !inside([t.sum, t.left, t.right]) {
                    continue;
                }
                let w = t.coupling.norm_sqr() * delta.eval(t.detuning);
                let (m, n) = (t.left, t.right);
                push(w, &[n, m], Some(j));
                push(-2.0 * w, &[m], None);
                push(-4.0 * w, &[n, m], Some(m));
            }
            for t in tab.with_left(j) {
                if !inside([t.sum, t.left, t.right]) {
                    continue;
                }
                let w = t.coupling.norm_sqr() * delta.eval(t.detuning);
                let (n, m) = (t.sum, t.right);
                push(2.0 * w, &[n, m], Some(j));
                push(2.0 * w, &[m], None);
                push(2.0 * w, &[n, m], Some(m));
            }
            terms.push(
                acc.into_iter()
                    .filter(|(_, c)| *c != 0.0)
                    .map(|((powers, deriv), coef)| FluxTerm {
                        coef,
                        powers,
                        deriv,
                    })
                    .collect(),
            );
        }
        Ok(Self {
            active: active.to_vec(),
            terms,
        })
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Flux terms along the `a`-th active direction.
    pub fn terms(&self, a: usize) -> &[FluxTerm] {
        &self.terms[a]
    }

    pub fn is_trivial(&self) -> bool {
        self.terms.iter().all(|t| t.is_empty())
    }

    /// `(−Σ_j ∂_jF_j) / P` and its term-magnitude scale at the point `s`, for
    /// the product state `P = Π (1/n_a) e^{−s_a/n_a}`.
    pub fn product_state_rhs(&self, means: &[f64], s: &[f64]) -> (f64, f64) {
        let mut total = Vec::new();
        for (a, terms) in self.terms.iter().enumerate() {
            for t in terms {
                let op = t.deriv.map_or(1.0, |b| -1.0 / means[b]);
                let mono: f64 = t
                    .powers
                    .iter()
                    .zip(s)
                    .map(|(&p, &x)| x.powi(p as i32))
                    .product::<f64>();
                let q = t.coef * op * mono;
                // ∂_a(P q) / P = ∂_a q − q / n_a
                let dq = if t.powers[a] > 0 {
                    q * f64::from(t.powers[a]) / s[a]
                } else {
                    0.0
                };
                total.push(-dq);
                total.push(q / means[a]);
            }
        }
        let scale = sum(total.iter().map(|x| x.abs()));
        (sum(total.iter().copied()), scale)
    }

    /// `F_a / P` at `s` for the product state with `means`.
    pub fn product_state_flux(&self, means: &[f64], s: &[f64], a: usize) -> f64 {
        sum(self.terms[a].iter().map(|t| {
            let op = t.deriv.map_or(1.0, |b| -1.0 / means[b]);
            t.coef
                * op
                * t.powers
                    .iter()
                    .zip(s)
                    .map(|(&p, &x)| x.powi(p as i32))
                    .product::<f64>()
        }))
    }
}

/// Cell-averaged joint density of the intensities of the active modes on a
/// uniform tensor grid `[0, s_max[a]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPdf {
    pub active: Vec<usize>,
    pub cells: usize,
    pub s_max: Vec<f64>,
    pub density: Vec<f64>,
    pub time: f64,
}

impl JointPdf {
    /// Product of exponentials with the given means, cell averages taken
    /// exactly and renormalized to unit mass on the truncated box.
    pub fn product_exponential(
        active: &[usize],
        means: &[f64],
        s_max: &[f64],
        cells: usize,
    ) -> Result<Self, MultimodeError> {
        let k = active.len();
        if k == 0 || k > MAX_ACTIVE {
            return Err(MultimodeError::ActiveSet(format!(
                "{k} modes; the grid solver takes 1..={MAX_ACTIVE}"
            )));
        }
        if means.len() != k
            || s_max.len() != k
            || cells < 2
            || s_max.iter().chain(means).any(|&x| !(x > 0.0))
        {
            return Err(MultimodeError::Grid);
        }
        let factors: Vec<Vec<f64>> = (0..k)
            .map(|a| {
                let h = s_max[a] / cells as f64;
                let norm = 1.0 - (-s_max[a] / means[a]).exp();
                (0..cells)
                    .map(|i| {
                        let lo = i as f64 * h;
                        ((-lo / means[a]).exp() - (-(lo + h) / means[a]).exp()) / (h * norm)
                    })
                    .collect()
            })
            .collect();
        Ok(Self::from_marginals(active, s_max, cells, &factors))
    }

    /// Product density from per-mode cell values (each normalized to unit mass).
    pub fn from_marginals(
        active: &[usize],
        s_max: &[f64],
        cells: usize,
        factors: &[Vec<f64>],
    ) -> Self {
        let k = active.len();
        let total = cells.pow(k as u32);
        let density = (0..total)
            .map(|flat| {
                let mut rem = flat;
                let mut v = 1.0;
                for a in (0..k).rev() {
                    v *= factors[a][rem % cells];
                    rem /= cells;
                }
                v
            })
            .collect();
        Self {
            active: active.to_vec(),
            cells,
            s_max: s_max.to_vec(),
            density,
            time: 0.0,
        }
    }

    pub fn dims(&self) -> usize {
        self.active.len()
    }

    pub fn width(&self, a: usize) -> f64 {
        self.s_max[a] / self.cells as f64
    }

    fn stride(&self, a: usize) -> usize {
        self.cells.pow((self.dims() - 1 - a) as u32)
    }

    fn cell_volume(&self) -> f64 {
        (0..self.dims()).map(|a| self.width(a)).product()
    }

    fn coords(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        let mut out = vec![0; self.dims()];
        for a in (0..self.dims()).rev() {
            out[a] = rem % self.cells;
            rem /= self.cells;
        }
        out
    }

    pub fn mass(&self) -> f64 {
        sum(self.density.iter().copied()) * self.cell_volume()
    }

    /// `⟨Π s_a^{p_a}⟩` by the midpoint rule.
    pub fn moment(&self, powers: &[u32]) -> f64 {
        let vol = self.cell_volume();
        sum(self.density.iter().enumerate().map(|(flat, &p)| {
            let c = self.coords(flat);
            let w: f64 = (0..self.dims())
                .map(|a| ((c[a] as f64 + 0.5) * self.width(a)).powi(powers[a] as i32))
                .product();
            p * w
        })) * vol
    }

    /// Marginal over one active direction, as a density in `s_a`.
    pub fn marginal(&self, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cells];
        let other: f64 = self.cell_volume() / self.width(a);
        for (flat, &p) in self.density.iter().enumerate() {
            out[self.coords(flat)[a]] += p * other;
        }
        out
    }

    /// Two-dimensional marginal in `(s_a, s_b)`, row-major in `a`.
    pub fn pair_marginal(&self, a: usize, b: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cells * self.cells];
        let other: f64 = self.cell_volume() / (self.width(a) * self.width(b));
        for (flat, &p) in self.density.iter().enumerate() {
            let c = self.coords(flat);
            out[c[a] * self.cells + c[b]] += p * other;
        }
        out
    }

    /// Cell-wise `Σ |P − Q| ΔV`.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        sum(self
            .density
            .iter()
            .zip(&other.density)
            .map(|(a, b)| (a - b).abs()))
            * self.cell_volume()
    }
}

fn check_grid(p: &JointPdf, op: &PeierlsOperator) -> Result<(), MultimodeError> {
    if p.active != op.active {
        return Err(MultimodeError::ActiveSet(
            "density and operator disagree on the active set".into(),
        ));
    }
    Ok(())
}

fn central_diff(p: &JointPdf, flat: usize, coord: usize, b: usize) -> f64 {
    let st = p.stride(b);
    let h = p.width(b);
    let d = &p.density;
    if p.cells < 3 {
        return if coord == 0 {
            (d[flat + st] - d[flat]) / h
        } else {
            (d[flat] - d[flat - st]) / h
        };
    }
    if coord == 0 {
        (-3.0 * d[flat] + 4.0 * d[flat + st] - d[flat + 2 * st]) / (2.0 * h)
    } else if coord + 1 == p.cells {
        (3.0 * d[flat] - 4.0 * d[flat - st] + d[flat - 2 * st]) / (2.0 * h)
    } else {
        (d[flat + st] - d[flat - st]) / (2.0 * h)
    }
}

/// Flux along active direction `a` on the faces `{s_a = i Δs_a}`, laid out
/// with face index `i ∈ 0..=cells` in place of the cell index along `a`.
/// The two boundary faces carry zero flux.
pub fn peierls_flux(
    p: &JointPdf,
    op: &PeierlsOperator,
    a: usize,
) -> Result<Vec<f64>, MultimodeError> {
    check_grid(p, op)?;
    let k = p.dims();
    let c = p.cells;
    let other = c.pow(k as u32 - 1);
    let st = p.stride(a);
    let h = p.width(a);
    let terms = op.terms(a);
    let faces = (c + 1) * other;
    Ok((0..faces)
        .into_par_iter()
        .map(|fid| {
            // face id: (outer, face, inner) with the face index at slot a
            let inner = fid % st;
            let rest = fid / st;
            let f = rest % (c + 1);
            let outer = rest / (c + 1);
            if f == 0 || f == c || terms.is_empty() {
                return 0.0;
            }
            let hi = outer * st * c + f * st + inner;
            let lo = hi - st;
            let coords = p.coords(lo);
            let s: Vec<f64> = (0..k)
                .map(|b| {
                    if b == a {
                        f as f64 * h
                    } else {
                        (coords[b] as f64 + 0.5) * p.width(b)
                    }
                })
                .collect();
            let pv = 0.5 * (p.density[lo] + p.density[hi]);
            sum(terms.iter().map(|t| {
                let x = match t.deriv {
                    None => pv,
                    Some(b) if b == a => (p.density[hi] - p.density[lo]) / h,
                    Some(b) => {
                        0.5 * (central_diff(p, lo, coords[b], b)
                            + central_diff(p, hi, coords[b], b))
                    }
                };
                let mono: f64 = t
                    .powers
                    .iter()
                    .zip(&s)
                    .map(|(&q, &x)| x.powi(q as i32))
                    .product();
                t.coef * mono * x
            }))
        })
        .collect())
}

/// `−Σ_a ∂F_a/∂s_a` per cell.
pub fn peierls_rhs(p: &JointPdf, op: &PeierlsOperator) -> Result<Vec<f64>, MultimodeError> {
    let k = p.dims();
    let c = p.cells;
    let mut rhs = vec![0.0; p.density.len()];
    for a in 0..k {
        let flux = peierls_flux(p, op, a)?;
        let st = p.stride(a);
        let h = p.width(a);
        rhs.par_iter_mut().enumerate().for_each(|(flat, r)| {
            let inner = flat % st;
            let rest = flat / st;
            let i = rest % c;
            let outer = rest / c;
            let lo = outer * st * (c + 1) + i * st + inner;
            *r -= (flux[lo + st] - flux[lo]) / h;
        });
    }
    Ok(rhs)
}

/// Explicit stability limit from a row-sum bound on the discrete operator.
pub fn stability_limit(p: &JointPdf, op: &PeierlsOperator) -> f64 {
    let k = p.dims();
    let mut norm = 0.0;
    for a in 0..k {
        for t in op.terms(a) {
            let mono: f64 = t
                .powers
                .iter()
                .zip(&p.s_max)
                .map(|(&q, &x)| x.powi(q as i32))
                .product();
            let w = match t.deriv {
                None => 1.0,
                Some(b) => 2.0 / p.width(b),
            };
            norm += 2.0 * t.coef.abs() * mono * w / p.width(a);
        }
    }
    if norm > 0.0 {
        2.0 / norm
    } else {
        f64::INFINITY
    }
}

fn axpy(p: &JointPdf, r: &[f64], dt: f64) -> JointPdf {
    let mut out = p.clone();
    out.density
        .iter_mut()
        .zip(r)
        .for_each(|(d, r)| *d += dt * r);
    out
}

/// One Heun (SSP-RK2) step of the Peierls equation.
pub fn step_joint(p: &JointPdf, op: &PeierlsOperator, dt: f64) -> Result<JointPdf, MultimodeError> {
    let limit = stability_limit(p, op);
    if !(dt > 0.0) || dt > limit {
        return Err(MultimodeError::Cfl { dt, limit });
    }
    let r1 = peierls_rhs(p, op)?;
    let mid = axpy(p, &r1, dt);
    let r2 = peierls_rhs(&mid, op)?;
    let mut out = p.clone();
    out.density
        .iter_mut()
        .zip(r1.iter().zip(&r2))
        .for_each(|(d, (a, b))| *d += 0.5 * dt * (a + b));
    out.time += dt;
    let floor = -1e-9 * out.density.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some((cell, &value)) = out.density.iter().enumerate().find(|(_, &x)| x < floor) {
        return Err(MultimodeError::Negative { cell, value });
    }
    Ok(out)
}

/// Evolve to `t_end` with `steps` equal Heun steps, or with the smallest
/// step count that respects [`CFL`] when `steps` is `None`.
pub fn evolve_joint(
    p: &JointPdf,
    op: &PeierlsOperator,
    t_end: f64,
    steps: Option<usize>,
) -> Result<JointPdf, MultimodeError> {
    let span = t_end - p.time;
    if span <= 0.0 {
        return Ok(p.clone());
    }
    let steps =
        steps.unwrap_or_else(|| (span / (CFL * stability_limit(p, op))).ceil().max(1.0) as usize);
    let dt = span / steps as f64;
    let mut cur = p.clone();
    for _ in 0..steps {
        cur = step_joint(&cur, op, dt)?;
    }
    cur.time = t_end;
    Ok(cur)
}

/// `‖P_ab − P_a ⊗ P_b‖₁` for every pair `a < b`.
pub fn factorization_residual(p: &JointPdf) -> Vec<((usize, usize), f64)> {
    let c = p.cells;
    let mut out = Vec::new();
    for a in 0..p.dims() {
        for b in a + 1..p.dims() {
            let (pa, pb, pab) = (p.marginal(a), p.marginal(b), p.pair_marginal(a, b));
            let area = p.width(a) * p.width(b);
            let l1 = sum((0..c * c).map(|i| (pab[i] - pa[i / c] * pb[i % c]).abs())) * area;
            out.push(((p.active[a], p.active[b]), l1));
        }
    }
    out
}

/// Mutual information of `(s_a, s_b)` with the grid cells as bins.
pub fn mutual_information(p: &JointPdf, a: usize, b: usize) -> f64 {
    let c = p.cells;
    let (pa, pb, pab) = (p.marginal(a), p.marginal(b), p.pair_marginal(a, b));
    let area = p.width(a) * p.width(b);
    sum((0..c * c).map(|i| {
        let q = pab[i];
        let r = pa[i / c] * pb[i % c];
        if q > 0.0 && r > 0.0 {
            q * (q / r).ln() * area
        } else {
            0.0
        }
    }))
}

/// Closure for the third moments that the second-moment equations need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Closure {
    /// Third cumulants set to zero.
    #[default]
    ZeroThirdCumulant,
    /// Third cumulants of independent exponential marginals: `2⟨s_a⟩³` on
    /// the diagonal, zero for mixed indices.
    Exponential,
    /// Third cumulants of a gamma family matched to the current mean and
    /// covariance: `κ_aab = 2 var_a cov_ab / ⟨s_a⟩`, zero for three distinct
    /// indices. Exact for independent exponentials.
    Gamma,
    /// Use the stored third moments.
    Provided,
}

impl std::str::FromStr for Closure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero_third_cumulant" | "cumulant" => Ok(Self::ZeroThirdCumulant),
            "exponential" => Ok(Self::Exponential),
            "gamma" => Ok(Self::Gamma),
            "provided" => Ok(Self::Provided),
            other => Err(format!("unknown closure '{other}'")),
        }
    }
}

/// Intensity moments of the active modes: `first[a] = ⟨s_a⟩`,
/// `second[a][b] = ⟨s_a s_b⟩`, optional `third[a][b][c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMoments {
    pub modes: Vec<usize>,
    pub first: Vec<f64>,
    pub second: Vec<Vec<f64>>,
    pub third: Option<Vec<Vec<Vec<f64>>>>,
}

impl JointMoments {
    /// Independent exponential intensities with means `n`.
    pub fn independent_exponential(modes: &[usize], n: &[f64]) -> Self {
        let k = modes.len();
        let second = (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| {
                        if a == b {
                            2.0 * n[a] * n[a]
                        } else {
                            n[a] * n[b]
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            modes: modes.to_vec(),
            first: n.to_vec(),
            second,
            third: None,
        }
    }

    pub fn cumulant(&self, a: usize, b: usize) -> f64 {
        self.second[a][b] - self.first[a] * self.first[b]
    }

    fn get(&self, idx: &[usize], closure: Closure) -> f64 {
        match *idx {
            [] => 1.0,
            [a] => self.first[a],
            [a, b] => self.second[a][b],
            [a, b, c] => match (closure, &self.third) {
                (Closure::Provided, Some(t)) => t[a][b][c],
                _ => {
                    let m = &self.first;
                    let k3 = match closure {
                        Closure::Exponential if a == b && b == c => 2.0 * m[a].powi(3),
                        Closure::Gamma => self.gamma_cumulant(a, b, c),
                        _ => 0.0,
                    };
                    m[a] * self.second[b][c] + m[b] * self.second[a][c] + m[c] * self.second[a][b]
                        - 2.0 * m[a] * m[b] * m[c]
                        + k3
                }
            },
            _ => panic!("moments above third order are not tracked"),
        }
    }

    fn gamma_cumulant(&self, a: usize, b: usize, c: usize) -> f64 {
        let (rep, other) = if a == b {
            (a, c)
        } else if a == c {
            (a, b)
        } else if b == c {
            (b, a)
        } else {
            return 0.0;
        };
        2.0 * self.cumulant(rep, rep) * self.cumulant(rep, other) / self.first[rep]
    }

    fn moment(&self, powers: &[u32], closure: Closure) -> f64 {
        let idx: Vec<usize> = powers
            .iter()
            .enumerate()
            .flat_map(|(a, &p)| std::iter::repeat(a).take(p as usize))
            .collect();
        self.get(&idx, closure)
    }
}

/// Time derivatives of the first moments and of the pair cumulants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRates {
    pub first: Vec<f64>,
    pub second: Vec<Vec<f64>>,
    pub cumulant: Vec<Vec<f64>>,
}

/// `∫ s^q F_a ds` expressed through the moments, with `∫ s^r ∂_b P = −r_b ⟨s^{r−e_b}⟩`.
fn weighted_flux(
    m: &JointMoments,
    op: &PeierlsOperator,
    a: usize,
    extra: &[u32],
    closure: Closure,
) -> f64 {
    sum(op.terms(a).iter().map(|t| {
        let mut pw: Vec<u32> = t
            .powers
            .iter()
            .zip(extra)
            .map(|(&p, &e)| u32::from(p) + e)
            .collect();
        match t.deriv {
            None => t.coef * m.moment(&pw, closure),
            Some(b) => {
                let r = pw[b];
                if r == 0 {
                    return 0.0;
                }
                pw[b] -= 1;
                -t.coef * f64::from(r) * m.moment(&pw, closure)
            }
        }
    }))
}

/// Moment equations implied by the Peierls flux, `d⟨f⟩/dt = Σ_a ⟨(∂_a f) F_a / P⟩`.
pub fn joint_moment_rhs(
    m: &JointMoments,
    op: &PeierlsOperator,
    closure: Closure,
) -> Result<MomentRates, MultimodeError> {
    let k = op.active().len();
    if m.modes != op.active()
        || m.first.len() != k
        || m.second.len() != k
        || m.second.iter().any(|r| r.len() != k)
    {
        return Err(MultimodeError::Moments);
    }
    let unit = |a: usize| {
        let mut v = vec![0u32; k];
        v[a] = 1;
        v
    };
    let zero = vec![0u32; k];
    let first: Vec<f64> = (0..k)
        .map(|a| weighted_flux(m, op, a, &zero, closure))
        .collect();
    let mut second = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let v = weighted_flux(m, op, a, &unit(b), closure)
                + weighted_flux(m, op, b, &unit(a), closure);
            second[a][b] = v;
            second[b][a] = v;
        }
    }
    let cumulant = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| second[a][b] - (m.first[a] * first[b] + m.first[b] * first[a]))
                .collect()
        })
        .collect();
    Ok(MomentRates {
        first,
        second,
        cumulant,
    })
}

/// RK4 integration of the closed first- and second-moment equations.
pub fn evolve_joint_moments(
    m: &JointMoments,
    op: &PeierlsOperator,
    closure: Closure,
    t_end: f64,
    steps: usize,
) -> Result<JointMoments, MultimodeError> {
    let dt = t_end / steps.max(1) as f64;
    let shift = |base: &JointMoments, r: &MomentRates, h: f64| {
        let mut out = base.clone();
        out.first
            .iter_mut()
            .zip(&r.first)
            .for_each(|(x, d)| *x += h * d);
        for (row, drow) in out.second.iter_mut().zip(&r.second) {
            row.iter_mut().zip(drow).for_each(|(x, d)| *x += h * d);
        }
        out
    };
    let mut cur = m.clone();
    cur.third = None;
    for _ in 0..steps.max(1) {
        let k1 = joint_moment_rhs(&cur, op, closure)?;
        let k2 = joint_moment_rhs(&shift(&cur, &k1, 0.5 * dt), op, closure)?;
        let k3 = joint_moment_rhs(&shift(&cur, &k2, 0.5 * dt), op, closure)?;
        let k4 = joint_moment_rhs(&shift(&cur, &k3, dt), op, closure)?;
        let k = cur.first.len();
        let comb = MomentRates {
            first: (0..k)
                .map(|a| (k1.first[a] + 2.0 * k2.first[a] + 2.0 * k3.first[a] + k4.first[a]) / 6.0)
                .collect(),
            second: (0..k)
                .map(|a| {
                    (0..k)
                        .map(|b| {
                            (k1.second[a][b]
                                + 2.0 * k2.second[a][b]
                                + 2.0 * k3.second[a][b]
                                + k4.second[a][b])
                                / 6.0
                        })
                        .collect()
                })
                .collect(),
            cumulant: Vec::new(),
        };
        cur = shift(&cur, &comb, dt);
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetic::{kinetic_rhs, DeltaKind};
    use crate::wave_system::{Coupling, Dispersion, ModeGrid};
    use num_complex::Complex64;

    fn linear_1d(b: i64, eps: f64) -> WaveSystem {
        let grid = ModeGrid::new(1, 2.0 * PI, b).unwrap();
        WaveSystem::new(
            grid,
            Dispersion::power_law(1.0, 1.0),
            Coupling::constant(1.0),
            eps,
        )
        .unwrap()
    }

    fn idx(sys: &WaveSystem, l: i32) -> usize {
        sys.grid().index([l, 0, 0]).unwrap()
    }

    /// Coupling that vanishes on self triads `k₁ = k₂`.
    fn split_coupling() -> Coupling {
        Coupling::new("split", vec![], |_k, k1, k2| {
            Complex64::new((k1[0] - k2[0]).powi(2) * 0.1, 0.0)
        })
    }

    /// Direct transcription of the flux on a product state, summing over
    /// the full grid with bath modes integrated by hand.
    fn naive_flux_over_p(
        sys: &WaveSystem,
        delta: &BroadenedDelta,
        n: &[f64],
        s: &[f64],
        active: &[usize],
        j: usize,
    ) -> f64 {
        let c = 4.0 * PI * sys.epsilon().powi(2) * measure(sys);
        let val = |x: usize| active.iter().position(|&a| a == x).map(|a| s[a]);
        let sj = val(j).unwrap();
        let dj = -1.0 / n[j];
        let mut total = 0.0;
        for t in sys.triads().iter() {
            let w = t.coupling.norm_sqr() * delta.eval(t.detuning);
            if t.sum == j {
                let (m, nn) = (t.left, t.right);
                let (sm, sn) = (val(m), val(nn));
                let pair = match (sm, sn) {
                    (Some(a), Some(b)) if m != nn => a * b,
                    (Some(a), None) => a * n[nn],
                    (None, Some(b)) => n[m] * b,
                    (None, None) if m != nn => n[m] * n[nn],
                    (None, None) => 2.0 * n[m] * n[m],
                    (Some(a), Some(_)) => a * a,
                };
                let single = sm.unwrap_or(n[m]);
                // s_n s_m ∂_m P, integrated over bath legs
                let cross = match (sm, sn) {
                    (Some(a), Some(b)) => a * b * (-1.0 / n[m]),
                    (Some(a), None) => n[nn] * a * (-1.0 / n[m]),
                    (None, Some(b)) => -b,
                    (None, None) if m != nn => -n[nn],
                    (None, None) => -2.0 * n[m],
                };
                total += w * (pair * dj - 2.0 * single - 4.0 * cross);
            }
            if t.left == j {
                let (nn, m) = (t.sum, t.right);
                let (sn, sm) = (val(nn), val(m));
                let pair = match (sn, sm) {
                    (Some(a), Some(b)) => a * b,
                    (Some(a), None) => a * n[m],
                    (None, Some(b)) => n[nn] * b,
                    (None, None) => n[nn] * n[m],
                };
                let single = sm.unwrap_or(n[m]);
                let cross = match (sn, sm) {
                    (Some(a), Some(b)) if m == j => a * b * dj,
                    (Some(a), Some(b)) => a * b * (-1.0 / n[m]),
                    (Some(a), None) => -a,
                    (None, Some(b)) => n[nn] * b * (-1.0 / n[m]),
                    (None, None) => -n[nn],
                };
                total += w * (2.0 * pair * dj + 2.0 * single + 2.0 * cross);
            }
        }
        -c * sj * total
    }

    #[test]
    fn flux_terms_match_direct_transcription() {
        let sys = linear_1d(4, 0.1);
        let delta = BroadenedDelta::lorentzian(0.3).unwrap();
        let n: Vec<f64> = (0..sys.len()).map(|i| 0.5 + 0.1 * i as f64).collect();
        let active = [idx(&sys, 1), idx(&sys, 3), idx(&sys, -2)];
        let op = PeierlsOperator::new(&sys, &active, &delta, &Bath::Frozen(n.clone())).unwrap();
        let means: Vec<f64> = active.iter().map(|&a| n[a]).collect();
        let s = [0.7, 1.9, 0.4];
        for (a, &j) in active.iter().enumerate() {
            let got = op.product_state_flux(&means, &s, a);
            let want = naive_flux_over_p(&sys, &delta, &n, &s, &active, j);
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1e-300),
                "{a}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn thermodynamic_state_is_stationary_on_resonant_triad() {
        let sys = linear_1d(5, 0.1);
        let delta = BroadenedDelta::lorentzian(0.05).unwrap();
        let active = [idx(&sys, 2), idx(&sys, 3), idx(&sys, 5)];
        let op = PeierlsOperator::new(&sys, &active, &delta, &Bath::Isolated).unwrap();
        assert!(!op.is_trivial());
        let means: Vec<f64> = active.iter().map(|&a| 1.0 / sys.freq(a)).collect();
        for s in [[0.3, 0.2, 0.1], [1.0, 2.0, 0.5], [0.05, 0.7, 3.0]] {
            let (r, scale) = op.product_state_rhs(&means, &s);
            assert!(scale > 0.0 && r.abs() <= 1e-10 * scale, "{r} / {scale}");
        }
        // a KZ-like spectrum is not stationary
        let kz: Vec<f64> = active.iter().map(|&a| sys.freq(a).powf(-1.5)).collect();
        let (r, scale) = op.product_state_rhs(&kz, &[0.3, 0.2, 0.1]);
        assert!(r.abs() > 10.0 * 1e-10 * scale);
    }

    #[test]
    fn vanishing_coupling_gives_zero_flux() {
        let grid = ModeGrid::new(1, 2.0 * PI, 3).unwrap();
        let sys = WaveSystem::new(
            grid,
            Dispersion::power_law(1.0, 1.0),
            Coupling::constant(0.0),
            0.1,
        )
        .unwrap();
        let delta = BroadenedDelta::lorentzian(0.1).unwrap();
        let op = PeierlsOperator::new(
            &sys,
            &[idx(&sys, 1), idx(&sys, 2)],
            &delta,
            &Bath::Frozen(vec![1.0; 7]),
        )
        .unwrap();
        assert!(op.is_trivial());
        let p = JointPdf::product_exponential(op.active(), &[1.0, 0.8], &[10.0, 8.0], 12).unwrap();
        assert!(peierls_flux(&p, &op, 0).unwrap().iter().all(|&f| f == 0.0));
    }

    #[test]
    fn rejects_bad_active_sets() {
        let sys = linear_1d(2, 0.1);
        let d = BroadenedDelta::lorentzian(0.1).unwrap();
        let z = sys.grid().zero();
        assert!(PeierlsOperator::new(&sys, &[], &d, &Bath::Isolated).is_err());
        assert!(PeierlsOperator::new(&sys, &[z], &d, &Bath::Isolated).is_err());
        assert!(PeierlsOperator::new(&sys, &[1, 1], &d, &Bath::Isolated).is_err());
        assert!(PeierlsOperator::new(&sys, &[1], &d, &Bath::Frozen(vec![1.0; 2])).is_err());
        assert!(JointPdf::product_exponential(&[0, 1, 2, 3, 4], &[1.0; 5], &[1.0; 5], 4).is_err());
    }

    fn resonant_setup(cells: usize) -> (PeierlsOperator, JointPdf, Vec<f64>) {
        let sys = linear_1d(5, 0.3);
        let delta = BroadenedDelta::lorentzian(0.05).unwrap();
        let active = [idx(&sys, 2), idx(&sys, 3), idx(&sys, 5)];
        let op = PeierlsOperator::new(&sys, &active, &delta, &Bath::Isolated).unwrap();
        let means: Vec<f64> = active.iter().map(|&a| 1.0 / sys.freq(a)).collect();
        let s_max: Vec<f64> = means.iter().map(|n| 12.0 * n).collect();
        let p = JointPdf::product_exponential(&active, &means, &s_max, cells).unwrap();
        (op, p, means)
    }

    #[test]
    fn thermodynamic_grid_state_holds_over_many_steps() {
        let (op, p0, _) = resonant_setup(24);
        let dt = CFL * stability_limit(&p0, &op);
        let mut p = p0.clone();
        for _ in 0..1000 {
            p = step_joint(&p, &op, dt).unwrap();
        }
        assert!((p.mass() - 1.0).abs() < 1e-9);
        let drift = p.l1_distance(&p0);
        // compare to the departure of a non-equilibrium start over the same time
        let kz_means: Vec<f64> = op
            .active()
            .iter()
            .map(|&a| [0.2, 0.4, 0.6][op.active().iter().position(|&x| x == a).unwrap()])
            .collect();
        let q_max: Vec<f64> = kz_means.iter().map(|n| 12.0 * n).collect();
        let q0 = JointPdf::product_exponential(op.active(), &kz_means, &q_max, 24).unwrap();
        let mut q = q0.clone();
        for _ in 0..1000 {
            q = step_joint(&q, &op, dt).unwrap();
        }
        let moved = q.l1_distance(&q0);
        assert!(drift < 0.1 * moved, "drift {drift} vs moved {moved}");
    }

    #[test]
    fn thermodynamic_drift_shrinks_with_refinement() {
        let drift = |cells| {
            let (op, p0, _) = resonant_setup(cells);
            let r = peierls_rhs(&p0, &op).unwrap();
            r.iter().map(|x| x.abs()).sum::<f64>() * p0.density.len() as f64 / (cells.pow(3) as f64)
                * (0..3).map(|a| p0.width(a)).product::<f64>()
        };
        let (a, b) = (drift(10), drift(20));
        assert!(b < 0.5 * a, "{a} -> {b}");
    }

    #[test]
    fn mass_is_conserved_and_correlations_grow() {
        let sys = linear_1d(3, 0.3);
        let delta = BroadenedDelta::lorentzian(0.1).unwrap();
        let active = [idx(&sys, 1), idx(&sys, 2)];
        let op = PeierlsOperator::new(&sys, &active, &delta, &Bath::Frozen(vec![0.6; sys.len()]))
            .unwrap();
        let p0 = JointPdf::product_exponential(&active, &[1.0, 0.3], &[12.0, 6.0], 24).unwrap();
        assert!(factorization_residual(&p0)[0].1 < 1e-14);
        assert!(mutual_information(&p0, 0, 1).abs() < 1e-14);
        let dt = CFL * stability_limit(&p0, &op);
        let mut p = p0.clone();
        let mut mi = Vec::new();
        for _ in 0..4 {
            for _ in 0..100 {
                let m = p.mass();
                p = step_joint(&p, &op, dt).unwrap();
                assert!((p.mass() - m).abs() < 1e-9);
            }
            mi.push(mutual_information(&p, 0, 1));
        }
        assert!(mi[0] > 0.0 && mi.windows(2).all(|w| w[1] > w[0]), "{mi:?}");
        assert!(factorization_residual(&p)[0].1 > 1e-4);
    }

    #[test]
    fn heun_stepping_is_second_order() {
        let sys = linear_1d(3, 0.3);
        let delta = BroadenedDelta::lorentzian(0.1).unwrap();
        let active = [idx(&sys, 1), idx(&sys, 2)];
        let op = PeierlsOperator::new(&sys, &active, &delta, &Bath::Frozen(vec![0.6; sys.len()]))
            .unwrap();
        let p0 = JointPdf::product_exponential(&active, &[1.0, 0.3], &[12.0, 6.0], 20).unwrap();
        let base = (0.8 * stability_limit(&p0, &op)).recip();
        let t = 150.0 / base;
        let run = |steps: usize| evolve_joint(&p0, &op, t, Some(steps)).unwrap();
        let (a, b, c) = (run(150), run(300), run(600));
        let order = (a.l1_distance(&b) / b.l1_distance(&c)).log2();
        assert!(order >= 1.8, "order {order}");
    }

    #[test]
    fn time_step_above_limit_is_rejected() {
        let (op, p, _) = resonant_setup(8);
        let lim = stability_limit(&p, &op);
        assert!(matches!(
            step_joint(&p, &op, 1.01 * lim),
            Err(MultimodeError::Cfl { .. })
        ));
    }

    #[test]
    fn first_moments_reproduce_kinetic_equation() {
        let grid = ModeGrid::new(1, 2.0 * PI, 4).unwrap();
        let sys =
            WaveSystem::new(grid, Dispersion::power_law(1.5, 1.0), split_coupling(), 0.1).unwrap();
        let delta = BroadenedDelta::new(DeltaKind::Lorentzian, 0.4).unwrap();
        let z = sys.grid().zero();
        let modes: Vec<usize> = (0..sys.len()).filter(|&i| i != z).collect();
        let n_full: Vec<f64> = (0..sys.len())
            .map(|i| {
                if i == z {
                    0.0
                } else {
                    1.0 / (1.0 + (i as f64 - 4.0).powi(2))
                }
            })
            .collect();
        let n: Vec<f64> = modes.iter().map(|&i| n_full[i]).collect();
        let op = PeierlsOperator::new(&sys, &modes, &delta, &Bath::Isolated).unwrap();
        let m = JointMoments::independent_exponential(&modes, &n);
        let rates = joint_moment_rhs(&m, &op, Closure::ZeroThirdCumulant).unwrap();
        let kin = kinetic_rhs(&sys, &n_full, &delta);
        let scale = kin.iter().fold(0.0f64, |s, x| s.max(x.abs()));
        for (a, &i) in modes.iter().enumerate() {
            assert!(
                (rates.first[a] - kin[i]).abs() <= 1e-12 * scale,
                "mode {i}: {} vs {}",
                rates.first[a],
                kin[i]
            );
        }
    }

    #[test]
    fn moment_equations_track_grid_solver() {
        let sys = linear_1d(3, 0.3);
        let delta = BroadenedDelta::lorentzian(0.1).unwrap();
        let active = [idx(&sys, 1), idx(&sys, 3)];
        let op = PeierlsOperator::new(&sys, &active, &delta, &Bath::Frozen(vec![0.6; sys.len()]))
            .unwrap();
        let means = [0.8, 0.3];
        let p0 = JointPdf::product_exponential(&active, &means, &[12.0, 4.0], 48).unwrap();
        let t = 0.04;
        let p = evolve_joint(&p0, &op, t, None).unwrap();
        let m0 = JointMoments::independent_exponential(&active, &means);
        let m = evolve_joint_moments(&m0, &op, Closure::Gamma, t, 400).unwrap();
        for (a, pw) in [[1, 0], [0, 1]].iter().enumerate() {
            let dgrid = p.moment(pw) - p0.moment(pw);
            let dmom = m.first[a] - m0.first[a];
            assert!(dgrid > 0.01);
            assert!(
                (dgrid - dmom).abs() < 0.2 * dgrid,
                "mode {a}: grid {dgrid} moments {dmom}"
            );
        }
        let c_grid = p.moment(&[1, 1]) - p.moment(&[1, 0]) * p.moment(&[0, 1]);
        assert!(c_grid > 0.0 && m.cumulant(0, 1) > 0.0);
    }

    #[test]
    fn zero_cumulant_closure_fails_where_gamma_holds() {
        let sys = linear_1d(3, 0.3);
        let delta = BroadenedDelta::lorentzian(0.1).unwrap();
        let active = [idx(&sys, 1), idx(&sys, 3)];
        let op = PeierlsOperator::new(&sys, &active, &delta, &Bath::Frozen(vec![0.6; sys.len()]))
            .unwrap();
        let m0 = JointMoments::independent_exponential(&active, &[0.8, 0.3]);
        let zero = evolve_joint_moments(&m0, &op, Closure::ZeroThirdCumulant, 0.1, 1000).unwrap();
        let gamma = evolve_joint_moments(&m0, &op, Closure::Gamma, 0.1, 1000).unwrap();
        assert!(zero.first[0] < 0.0);
        assert!(gamma.first.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn uncoupled_pair_cumulant_starts_at_zero_rate() {
        // modes ±3 on B=4: 3+(−3) is the zero mode and 6 is off the grid
        let sys = linear_1d(4, 0.1);
        let delta = BroadenedDelta::lorentzian(0.2).unwrap();
        let z = sys.grid().zero();
        let modes: Vec<usize> = (0..sys.len()).filter(|&i| i != z).collect();
        let n: Vec<f64> = modes.iter().map(|&i| 1.0 / sys.freq(i).powf(1.3)).collect();
        let op = PeierlsOperator::new(&sys, &modes, &delta, &Bath::Isolated).unwrap();
        let m = JointMoments::independent_exponential(&modes, &n);
        let r = joint_moment_rhs(&m, &op, Closure::ZeroThirdCumulant).unwrap();
        let a = modes.iter().position(|&i| i == idx(&sys, 3)).unwrap();
        let b = modes.iter().position(|&i| i == idx(&sys, -3)).unwrap();
        let c = modes.iter().position(|&i| i == idx(&sys, 1)).unwrap();
        assert!(r.cumulant[a][c].abs() > 0.0);
        assert!(r.cumulant[a][b].abs() <= 1e-12 * r.cumulant[a][c].abs());
    }

    #[test]
    fn moment_symmetry_of_rates() {
        let sys = linear_1d(3, 0.2);
        let delta = BroadenedDelta::lorentzian(0.2).unwrap();
        let active = [idx(&sys, 1), idx(&sys, 2), idx(&sys, 3)];
        let op = PeierlsOperator::new(&sys, &active, &delta, &Bath::Frozen(vec![0.5; sys.len()]))
            .unwrap();
        let m = JointMoments::independent_exponential(&active, &[0.9, 0.5, 0.4]);
        let r = joint_moment_rhs(&m, &op, Closure::ZeroThirdCumulant).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(r.cumulant[a][b], r.cumulant[b][a]);
            }
        }
    }
}
