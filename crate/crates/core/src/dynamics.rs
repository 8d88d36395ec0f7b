//! Interaction-representation equations of motion, fixed-step RK4, and the
//! first and second perturbation iterates with their oscillatory kernels.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wave_system::WaveSystem;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("time step must be positive and finite, got {0}")]
    Step(f64),
    #[error("end time {end} precedes current time {start}")]
    Backwards { start: f64, end: f64 },
    #[error("field length {got} does not match grid size {expected}")]
    Length { got: usize, expected: usize },
    #[error("non-finite amplitude at step {step}, mode {mode}")]
    NonFinite { step: usize, mode: usize },
    #[error("fields advanced together start at {first} and {other}")]
    Unsynchronized { first: f64, other: f64 },
}

/// One realization of the wave field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexField {
    pub amps: Vec<Complex64>,
    pub time: f64,
}

impl ComplexField {
    pub fn new(amps: Vec<Complex64>) -> Self {
        Self { amps, time: 0.0 }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![ZERO; n])
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn amplitude(&self, l: usize) -> f64 {
        self.amps[l].norm()
    }

    pub fn intensity(&self, l: usize) -> f64 {
        self.amps[l].norm_sqr()
    }

    /// `a_l / |a_l|`, `None` when the amplitude vanishes.
    pub fn phase_factor(&self, l: usize) -> Option<Complex64> {
        let a = self.amps[l];
        let r = a.norm();
        (r > 0.0).then(|| a / r)
    }
}

/// Perturbative expansion `a ≈ a⁰ + ε a¹ + ε² a²` at time `elapsed`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateBundle {
    pub initial: Vec<Complex64>,
    pub first: Vec<Complex64>,
    pub second: Vec<Complex64>,
    pub elapsed: f64,
}

impl IterateBundle {
    pub fn compute(sys: &WaveSystem, a0: &[Complex64], elapsed: f64) -> Self {
        Self {
            initial: a0.to_vec(),
            first: first_iterate(sys, a0, elapsed),
            second: second_iterate(sys, a0, elapsed),
            elapsed,
        }
    }

    /// Truncated series with `order` correction terms (0, 1 or 2).
    pub fn series(&self, epsilon: f64, order: usize) -> Vec<Complex64> {
        (0..self.initial.len())
            .map(|l| {
                let mut a = self.initial[l];
                if order >= 1 {
                    a += epsilon * self.first[l];
                }
                if order >= 2 {
                    a += epsilon * epsilon * self.second[l];
                }
                a
            })
            .collect()
    }
}

/// Per-mode linear phasors `e^{i ω_l t}`.
fn phasors(sys: &WaveSystem, t: f64, out: &mut [Complex64]) {
    for (p, &w) in out.iter_mut().zip(sys.freqs()) {
        let (s, c) = (w * t).sin_cos();
        *p = Complex64::new(c, s);
    }
}

/// Time-dependent triad factors at one instant: `−iεV e^{iω^j_{mn}t}` for the
/// merge update and `−2iε V̄ e^{−iω^j_{mn}t}` for the split update.
#[derive(Debug, Clone, Default)]
struct TriadFactors {
    merge: Vec<Complex64>,
    split: Vec<Complex64>,
}

impl TriadFactors {
    fn fill(&mut self, sys: &WaveSystem, ph: &[Complex64]) {
        let scale = -I * sys.epsilon();
        self.merge.clear();
        self.split.clear();
        for tr in sys.triads().iter() {
            let w = tr.coupling * ph[tr.sum] * (ph[tr.left] * ph[tr.right]).conj();
            self.merge.push(scale * w);
            self.split.push(2.0 * scale * w.conj());
        }
    }
}

fn rhs_with(sys: &WaveSystem, amps: &[Complex64], f: &TriadFactors, out: &mut [Complex64]) {
    out.fill(ZERO);
    for ((tr, &u), &v) in sys.triads().iter().zip(&f.merge).zip(&f.split) {
        let (j, m, n) = (tr.sum, tr.left, tr.right);
        out[j] += u * (amps[m] * amps[n]);
        out[m] += v * (amps[j] * amps[n].conj());
    }
}

/// Time derivative of the interaction-representation amplitudes.
pub fn rhs(sys: &WaveSystem, amps: &[Complex64], t: f64) -> Vec<Complex64> {
    let mut out = vec![ZERO; amps.len()];
    let mut ph = vec![ZERO; amps.len()];
    let mut f = TriadFactors::default();
    phasors(sys, t, &mut ph);
    f.fill(sys, &ph);
    rhs_with(sys, amps, &f, &mut out);
    out
}

/// Fixed-step fourth-order Runge–Kutta with reusable scratch buffers.
///
/// Triad factors depend only on time, so they are built once per step and
/// shared by every field advanced in lockstep.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k: [Vec<Complex64>; 4],
    stage: Vec<Complex64>,
    ph: Vec<Complex64>,
    factors: [TriadFactors; 3],
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![ZERO; n]),
            stage: vec![ZERO; n],
            ph: vec![ZERO; n],
            factors: Default::default(),
        }
    }

    /// With `carried`, the start factors are the end factors of the previous
    /// step on the same system.
    fn prepare(&mut self, sys: &WaveSystem, t: f64, h: f64, carried: bool) {
        let n = sys.len();
        if self.ph.len() != n {
            *self = Self::new(n);
        }
        if !carried {
            phasors(sys, t, &mut self.ph);
            self.factors[0].fill(sys, &self.ph);
        }
        phasors(sys, t + 0.5 * h, &mut self.ph);
        self.factors[1].fill(sys, &self.ph);
        phasors(sys, t + h, &mut self.ph);
        self.factors[2].fill(sys, &self.ph);
    }

    fn apply(&mut self, sys: &WaveSystem, a: &mut [Complex64], h: f64) {
        let n = a.len();
        let [f0, f1, f2] = &self.factors;
        rhs_with(sys, a, f0, &mut self.k[0]);
        for i in 0..n {
            self.stage[i] = a[i] + 0.5 * h * self.k[0][i];
        }
        rhs_with(sys, &self.stage, f1, &mut self.k[1]);
        for i in 0..n {
            self.stage[i] = a[i] + 0.5 * h * self.k[1][i];
        }
        rhs_with(sys, &self.stage, f1, &mut self.k[2]);
        for i in 0..n {
            self.stage[i] = a[i] + h * self.k[2][i];
        }
        rhs_with(sys, &self.stage, f2, &mut self.k[3]);
        for i in 0..n {
            a[i] +=
                h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
        }
    }

    /// Advance `field` by one step of size `h`.
    pub fn step(&mut self, sys: &WaveSystem, field: &mut ComplexField, h: f64) {
        let t = field.time;
        self.prepare(sys, t, h, false);
        self.apply(sys, &mut field.amps, h);
        field.time = t + h;
    }

    /// Advance in place to `t_end` with steps no larger than `dt`.
    pub fn advance(
        &mut self,
        sys: &WaveSystem,
        field: &mut ComplexField,
        t_end: f64,
        dt: f64,
    ) -> Result<(), DynamicsError> {
        self.advance_many(sys, std::slice::from_mut(field), t_end, dt)
    }

    /// Advance fields that share a start time in lockstep. Each field sees
    /// exactly the arithmetic of [`Rk4::advance`].
    pub fn advance_many(
        &mut self,
        sys: &WaveSystem,
        fields: &mut [ComplexField],
        t_end: f64,
        dt: f64,
    ) -> Result<(), DynamicsError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DynamicsError::Step(dt));
        }
        let Some(first) = fields.first() else {
            return Ok(());
        };
        let start = first.time;
        for f in fields.iter() {
            if f.len() != sys.len() {
                return Err(DynamicsError::Length {
                    got: f.len(),
                    expected: sys.len(),
                });
            }
            if f.time.to_bits() != start.to_bits() {
                return Err(DynamicsError::Unsynchronized {
                    first: start,
                    other: f.time,
                });
            }
        }
        let span = t_end - start;
        if span < 0.0 {
            return Err(DynamicsError::Backwards { start, end: t_end });
        }
        if span == 0.0 {
            return Ok(());
        }
        let steps = step_count(span, dt);
        let h = span / steps as f64;
        for s in 0..steps {
            let t = start + s as f64 * h;
            // t + h and the next start can differ in the last bit
            let carried = s > 0 && (start + (s - 1) as f64 * h + h).to_bits() == t.to_bits();
            self.prepare(sys, t, h, carried);
            for f in fields.iter_mut() {
                self.apply(sys, &mut f.amps, h);
                if let Some(mode) = f
                    .amps
                    .iter()
                    .position(|a| !(a.re.is_finite() && a.im.is_finite()))
                {
                    return Err(DynamicsError::NonFinite { step: s + 1, mode });
                }
            }
            self.factors.swap(0, 2);
        }
        for f in fields.iter_mut() {
            f.time = t_end;
        }
        Ok(())
    }
}

/// Number of equal steps covering `span` with step size at most `dt`.
pub fn step_count(span: f64, dt: f64) -> usize {
    ((span / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Integrate the equations of motion from `field.time` to `t_end`.
pub fn integrate(
    sys: &WaveSystem,
    field: &ComplexField,
    t_end: f64,
    dt: f64,
) -> Result<ComplexField, DynamicsError> {
    let mut out = field.clone();
    Rk4::new(sys.len()).advance(sys, &mut out, t_end, dt)?;
    Ok(out)
}

const DELTA_SWITCH: f64 = 1e-6;
const DIVIDED_SWITCH: f64 = 0.1;
const MOMENT_SERIES_RADIUS: f64 = 4.0;

/// `∫₀ᵀ e^{ixt} dt`.
pub fn delta_kernel(x: f64, t: f64) -> Complex64 {
    let u = x * t;
    if u.abs() < DELTA_SWITCH {
        let u2 = u * u;
        return t * Complex64::new(1.0 - u2 / 6.0 + u2 * u2 / 120.0, u / 2.0 - u * u2 / 24.0);
    }
    let (s, c) = (0.5 * u).sin_cos();
    // e^{iu} - 1 = -2 sin²(u/2) + i sin(u), written without cancellation.
    Complex64::new(2.0 * s * c, 2.0 * s * s) / x
}

/// `∫₀¹ s^k e^{ws} ds` for `k = 0..=kmax`.
fn exp_moments(w: Complex64, kmax: usize) -> Vec<Complex64> {
    let r = w.norm();
    let mut out = vec![ZERO; kmax + 1];
    if r < MOMENT_SERIES_RADIUS {
        for (k, m) in out.iter_mut().enumerate() {
            let mut term = Complex64::new(1.0, 0.0);
            let mut sum = term / (k as f64 + 1.0);
            for q in 1..200 {
                term *= w / q as f64;
                let add = term / (k + q + 1) as f64;
                sum += add;
                if add.norm() < 1e-18 * sum.norm().max(1e-300) && q > r as usize + 2 {
                    break;
                }
            }
            *m = sum;
        }
    } else {
        let ew = w.exp();
        // e^w - 1 for purely imaginary w without cancellation
        let em1 = if w.re == 0.0 {
            let (s, c) = (0.5 * w.im).sin_cos();
            Complex64::new(-2.0 * s * s, 2.0 * s * c)
        } else {
            ew - 1.0
        };
        out[0] = em1 / w;
        for k in 1..=kmax {
            out[k] = (ew - k as f64 * out[k - 1]) / w;
        }
    }
    out
}

/// `∫₀ᵀ Δ_t(x − y) e^{iyt} dt` where `Δ_t` is [`delta_kernel`] with running
/// upper limit `t`.
pub fn e_kernel(x: f64, y: f64, t: f64) -> Complex64 {
    if t == 0.0 {
        return ZERO;
    }
    // E = T² · φ₁[ixT, iyT], the divided difference of φ₁(w) = (e^w - 1)/w.
    let (a, b) = (x * t, y * t);
    let h = 0.5 * (a - b);
    if h.abs() < 0.5 * DIVIDED_SWITCH {
        let c = Complex64::new(0.0, 0.5 * (a + b));
        let mom = exp_moments(c, 11);
        let ih = Complex64::new(0.0, h);
        let ih2 = ih * ih;
        let mut pow = Complex64::new(1.0, 0.0);
        let mut fact = 1.0;
        let mut sum = ZERO;
        for k in (1..=11).step_by(2) {
            if k > 1 {
                fact *= ((k - 1) * k) as f64;
                pow *= ih2;
            }
            sum += mom[k] * pow / fact;
        }
        t * t * sum
    } else {
        (delta_kernel(x, t) - delta_kernel(y, t)) / (I * (x - y))
    }
}

/// First iterate `a¹(T)`.
pub fn first_iterate(sys: &WaveSystem, a0: &[Complex64], t: f64) -> Vec<Complex64> {
    let mut out = vec![ZERO; a0.len()];
    for tr in sys.triads().iter() {
        let (j, m, n) = (tr.sum, tr.left, tr.right);
        let d = delta_kernel(tr.detuning, t);
        out[j] += tr.coupling * a0[m] * a0[n] * d;
        out[m] += 2.0 * tr.coupling.conj() * a0[j] * a0[n].conj() * d.conj();
    }
    for v in out.iter_mut() {
        *v *= -I;
    }
    out
}

/// Second iterate `a²(T)`: six families of E-kernel terms obtained by
/// substituting the first iterate back into the equations of motion.
pub fn second_iterate(sys: &WaveSystem, a0: &[Complex64], t: f64) -> Vec<Complex64> {
    let w = sys.freqs();
    let tab = sys.triads();
    let a = a0;
    let mut out = vec![ZERO; a.len()];
    for (l, slot) in out.iter_mut().enumerate() {
        let mut acc = ZERO;
        // l = m + n, with m expanded at first order.
        for outer in tab.with_sum(l) {
            let (m, n) = (outer.left, outer.right);
            let v = outer.coupling;
            let y = outer.detuning;
            for inner in tab.with_sum(m) {
                let (p, q) = (inner.left, inner.right);
                let x = w[l] - w[n] - w[p] - w[q];
                acc -= 2.0 * v * inner.coupling * a[n] * a[p] * a[q] * e_kernel(x, y, t);
            }
            for inner in tab.with_left(m) {
                let (p, q) = (inner.sum, inner.right);
                let x = w[l] + w[q] - w[n] - w[p];
                acc -=
                    4.0 * v * inner.coupling.conj() * a[n] * a[p] * a[q].conj() * e_kernel(x, y, t);
            }
        }
        // m = l + n, with m or n expanded at first order.
        for outer in tab.with_left(l) {
            let (m, n) = (outer.sum, outer.right);
            let vb = outer.coupling.conj();
            let y = -outer.detuning;
            for inner in tab.with_sum(m) {
                let (p, q) = (inner.left, inner.right);
                let x = w[l] + w[n] - w[p] - w[q];
                acc -= 2.0 * vb * inner.coupling * a[n].conj() * a[p] * a[q] * e_kernel(x, y, t);
            }
            for inner in tab.with_left(m) {
                let (p, q) = (inner.sum, inner.right);
                let x = w[l] + w[n] + w[q] - w[p];
                acc -= 4.0
                    * vb
                    * inner.coupling.conj()
                    * a[n].conj()
                    * a[p]
                    * a[q].conj()
                    * e_kernel(x, y, t);
            }
            for inner in tab.with_sum(n) {
                let (p, q) = (inner.left, inner.right);
                let x = w[l] + w[p] + w[q] - w[m];
                acc += 2.0
                    * vb
                    * inner.coupling.conj()
                    * a[m]
                    * a[p].conj()
                    * a[q].conj()
                    * e_kernel(x, y, t);
            }
            for inner in tab.with_left(n) {
                let (p, q) = (inner.sum, inner.right);
                let x = w[p] + w[l] - w[q] - w[m];
                acc += 4.0 * vb * inner.coupling * a[m] * a[p].conj() * a[q] * e_kernel(x, y, t);
            }
        }
        *slot = acc;
    }
    out
}
