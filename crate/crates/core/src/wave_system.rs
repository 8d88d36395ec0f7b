//! Discrete Fourier mode sets, dispersion laws and three-wave couplings.
//!
//! Modes live on the integer box `{l : |l_i| <= B}` in one to three
//! dimensions. Wavevectors are always recomputed from the integer labels so
//! the index to wavevector map never drifts.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

/// Integer label of a mode. Unused trailing components are zero.
pub type Mode = [i32; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("dimension must be 1, 2 or 3, got {0}")]
    Dimension(usize),
    #[error("box side must be positive and finite, got {0}")]
    Length(f64),
    #[error("half-width must be at least 1, got {0}")]
    HalfWidth(i64),
    #[error("dispersion `{name}` is invalid at mode {mode:?}: {reason}")]
    Dispersion {
        name: String,
        mode: Mode,
        reason: &'static str,
    },
    #[error("coupling `{name}` is not finite at triad {triad:?}")]
    Coupling { name: String, triad: [Mode; 3] },
    #[error("unknown {kind} `{name}`")]
    UnknownModel { kind: &'static str, name: String },
    #[error("model `{name}` expects parameter `{param}`")]
    MissingParameter { name: String, param: String },
}

/// Cubic box of Fourier modes with side `L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeGrid {
    dim: usize,
    length: f64,
    half_width: i32,
}

impl ModeGrid {
    pub fn new(dim: usize, length: f64, half_width: i64) -> Result<Self, SystemError> {
        if !(1..=3).contains(&dim) {
            return Err(SystemError::Dimension(dim));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(SystemError::Length(length));
        }
        if !(1..=1000).contains(&half_width) {
            return Err(SystemError::HalfWidth(half_width));
        }
        Ok(Self {
            dim,
            length,
            half_width: half_width as i32,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn half_width(&self) -> i32 {
        self.half_width
    }

    /// Modes per side, `2B + 1`.
    pub fn side(&self) -> usize {
        2 * self.half_width as usize + 1
    }

    /// Total number of modes `(2B + 1)^d`.
    pub fn len(&self) -> usize {
        self.side().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear index of the zero mode.
    pub fn zero(&self) -> usize {
        self.len() / 2
    }

    pub fn mode(&self, index: usize) -> Mode {
        debug_assert!(index < self.len());
        let side = self.side();
        let mut rest = index;
        let mut out = [0; 3];
        for c in out.iter_mut().take(self.dim) {
            *c = (rest % side) as i32 - self.half_width;
            rest /= side;
        }
        out
    }

    /// Linear index of a mode label, `None` when it falls outside the box.
    pub fn index(&self, mode: Mode) -> Option<usize> {
        let side = self.side();
        let mut index = 0usize;
        let mut stride = 1usize;
        for (i, &c) in mode.iter().enumerate() {
            if i >= self.dim {
                if c != 0 {
                    return None;
                }
                continue;
            }
            if c.abs() > self.half_width {
                return None;
            }
            index += (c + self.half_width) as usize * stride;
            stride *= side;
        }
        Some(index)
    }

    /// Index of `-l`. Always exists.
    pub fn negate(&self, index: usize) -> usize {
        self.len() - 1 - index
    }

    /// Index of `l + m` if it lies in the box.
    pub fn add(&self, a: usize, b: usize) -> Option<usize> {
        let (ma, mb) = (self.mode(a), self.mode(b));
        self.index([ma[0] + mb[0], ma[1] + mb[1], ma[2] + mb[2]])
    }

    /// Index of `l - m` if it lies in the box.
    pub fn sub(&self, a: usize, b: usize) -> Option<usize> {
        self.add(a, self.negate(b))
    }

    pub fn wavevector(&self, index: usize) -> [f64; 3] {
        let m = self.mode(index);
        let scale = 2.0 * PI / self.length;
        [
            m[0] as f64 * scale,
            m[1] as f64 * scale,
            m[2] as f64 * scale,
        ]
    }

    /// Wavenumber-space volume per mode, `(2π/L)^d`.
    pub fn cell_volume(&self) -> f64 {
        (2.0 * PI / self.length).powi(self.dim as i32)
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        0..self.len()
    }
}

pub fn norm(k: &[f64; 3]) -> f64 {
    (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt()
}

type DispersionFn = dyn Fn(&[f64; 3]) -> f64 + Send + Sync;
type CouplingFn = dyn Fn(&[f64; 3], &[f64; 3], &[f64; 3]) -> Complex64 + Send + Sync;

/// Frequency as a function of wavevector.
#[derive(Clone)]
pub struct Dispersion {
    name: String,
    params: Vec<(String, f64)>,
    eval: Arc<DispersionFn>,
}

impl fmt::Debug for Dispersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dispersion")
            .field("name", &self.name)
            .field("params", &self.params)
            .finish()
    }
}

impl Dispersion {
    pub fn new(
        name: impl Into<String>,
        params: Vec<(String, f64)>,
        eval: impl Fn(&[f64; 3]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            params,
            eval: Arc::new(eval),
        }
    }

    /// `ω = c |k|^α`.
    pub fn power_law(alpha: f64, scale: f64) -> Self {
        Self::new(
            "power_law",
            vec![("alpha".into(), alpha), ("scale".into(), scale)],
            move |k| scale * norm(k).powf(alpha),
        )
    }

    /// Look up a built-in law by name.
    pub fn from_name(name: &str, params: &[(String, f64)]) -> Result<Self, SystemError> {
        let get = |p: &str, default: Option<f64>| {
            params
                .iter()
                .find(|(k, _)| k == p)
                .map(|(_, v)| *v)
                .or(default)
                .ok_or_else(|| SystemError::MissingParameter {
                    name: name.to_string(),
                    param: p.to_string(),
                })
        };
        match name {
            "power_law" => Ok(Self::power_law(
                get("alpha", None)?,
                get("scale", Some(1.0))?,
            )),
            _ => Err(SystemError::UnknownModel {
                kind: "dispersion",
                name: name.to_string(),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }

    pub fn eval(&self, k: &[f64; 3]) -> f64 {
        (self.eval)(k)
    }
}

/// Interaction coefficient `V(k; k1, k2)`.
///
/// Evaluation through [`Coupling::value`] symmetrizes the raw evaluator in
/// its lower pair and returns zero whenever one of the three modes is the
/// zero mode.
#[derive(Clone)]
pub struct Coupling {
    name: String,
    params: Vec<(String, f64)>,
    eval: Arc<CouplingFn>,
}

impl fmt::Debug for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coupling")
            .field("name", &self.name)
            .field("params", &self.params)
            .finish()
    }
}

impl Coupling {
    pub fn new(
        name: impl Into<String>,
        params: Vec<(String, f64)>,
        eval: impl Fn(&[f64; 3], &[f64; 3], &[f64; 3]) -> Complex64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            params,
            eval: Arc::new(eval),
        }
    }

    /// `V ≡ v0` away from the zero mode.
    pub fn constant(v0: f64) -> Self {
        Self::new("constant", vec![("v0".into(), v0)], move |_, _, _| {
            Complex64::new(v0, 0.0)
        })
    }

    /// `V = v0 (|k| |k1| |k2|)^β`.
    pub fn product(v0: f64, beta: f64) -> Self {
        Self::new(
            "product",
            vec![("v0".into(), v0), ("beta".into(), beta)],
            move |k, k1, k2| Complex64::new(v0 * (norm(k) * norm(k1) * norm(k2)).powf(beta), 0.0),
        )
    }

    pub fn from_name(name: &str, params: &[(String, f64)]) -> Result<Self, SystemError> {
        let get = |p: &str, default: Option<f64>| {
            params
                .iter()
                .find(|(k, _)| k == p)
                .map(|(_, v)| *v)
                .or(default)
                .ok_or_else(|| SystemError::MissingParameter {
                    name: name.to_string(),
                    param: p.to_string(),
                })
        };
        match name {
            "constant" => Ok(Self::constant(get("v0", Some(1.0))?)),
            "product" => Ok(Self::product(get("v0", Some(1.0))?, get("beta", None)?)),
            _ => Err(SystemError::UnknownModel {
                kind: "coupling",
                name: name.to_string(),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }

    /// Coupling whose raw evaluator is the lower-pair symmetrization of this one.
    pub fn symmetrized(&self) -> Self {
        let inner = Arc::clone(&self.eval);
        Self {
            name: self.name.clone(),
            params: self.params.clone(),
            eval: Arc::new(move |k, k1, k2| 0.5 * (inner(k, k1, k2) + inner(k, k2, k1))),
        }
    }

    /// Raw evaluator output, no symmetrization and no zero-mode rule.
    pub fn raw(&self, k: &[f64; 3], k1: &[f64; 3], k2: &[f64; 3]) -> Complex64 {
        (self.eval)(k, k1, k2)
    }

    /// `V^j_{mn}` on grid modes.
    pub fn value(&self, grid: &ModeGrid, j: usize, m: usize, n: usize) -> Complex64 {
        let zero = grid.zero();
        if j == zero || m == zero || n == zero {
            return Complex64::new(0.0, 0.0);
        }
        let (k, k1, k2) = (grid.wavevector(j), grid.wavevector(m), grid.wavevector(n));
        0.5 * ((self.eval)(&k, &k1, &k2) + (self.eval)(&k, &k2, &k1))
    }
}

/// One momentum-conserving triple `k_sum = k_left + k_right`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triad {
    pub sum: usize,
    pub left: usize,
    pub right: usize,
    pub coupling: Complex64,
    /// `ω_sum - ω_left - ω_right`.
    pub detuning: f64,
}

/// All ordered triads of the grid, indexed both by the sum mode and by the
/// left mode.
#[derive(Debug, Clone)]
pub struct TriadTable {
    triads: Vec<Triad>,
    by_sum: Vec<Vec<u32>>,
    by_left: Vec<Vec<u32>>,
}

impl TriadTable {
    /// Enumerate every ordered pair `(left, right)` whose sum stays in the box.
    /// Triads with vanishing coupling are dropped unless `keep_inactive`.
    pub fn enumerate(
        grid: &ModeGrid,
        freqs: &[f64],
        coupling: &Coupling,
        keep_inactive: bool,
    ) -> Self {
        let n = grid.len();
        let mut triads = Vec::new();
        for sum in 0..n {
            for left in 0..n {
                let Some(right) = grid.sub(sum, left) else {
                    continue;
                };
                let v = coupling.value(grid, sum, left, right);
                if v == Complex64::new(0.0, 0.0) && !keep_inactive {
                    continue;
                }
                triads.push(Triad {
                    sum,
                    left,
                    right,
                    coupling: v,
                    detuning: freqs[sum] - freqs[left] - freqs[right],
                });
            }
        }
        let mut by_sum = vec![Vec::new(); n];
        let mut by_left = vec![Vec::new(); n];
        for (i, t) in triads.iter().enumerate() {
            by_sum[t.sum].push(i as u32);
            by_left[t.left].push(i as u32);
        }
        Self {
            triads,
            by_sum,
            by_left,
        }
    }

    pub fn len(&self) -> usize {
        self.triads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triads.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Triad> {
        self.triads.iter()
    }

    /// Number of stored triads with nonzero coupling.
    pub fn active_count(&self) -> usize {
        self.triads
            .iter()
            .filter(|t| t.coupling != Complex64::new(0.0, 0.0))
            .count()
    }

    /// Triads `(sum = j; left, right)`.
    pub fn with_sum(&self, j: usize) -> impl Iterator<Item = &Triad> + '_ {
        self.by_sum[j]
            .iter()
            .map(move |&i| &self.triads[i as usize])
    }

    /// Triads `(sum; left = m, right)`.
    pub fn with_left(&self, m: usize) -> impl Iterator<Item = &Triad> + '_ {
        self.by_left[m]
            .iter()
            .map(move |&i| &self.triads[i as usize])
    }
}

/// Grid, dispersion and coupling with cached frequencies and triads.
#[derive(Debug, Clone)]
pub struct WaveSystem {
    grid: ModeGrid,
    dispersion: Dispersion,
    coupling: Coupling,
    epsilon: f64,
    freqs: Vec<f64>,
    triads: Arc<TriadTable>,
}

impl WaveSystem {
    pub fn new(
        grid: ModeGrid,
        dispersion: Dispersion,
        coupling: Coupling,
        epsilon: f64,
    ) -> Result<Self, SystemError> {
        let mut freqs = Vec::with_capacity(grid.len());
        for i in grid.indices() {
            let w = dispersion.eval(&grid.wavevector(i));
            let bad = |reason| SystemError::Dispersion {
                name: dispersion.name().to_string(),
                mode: grid.mode(i),
                reason,
            };
            if !w.is_finite() {
                return Err(bad("frequency is not finite"));
            }
            if w < 0.0 {
                return Err(bad("frequency is negative"));
            }
            if i != grid.zero() && w == 0.0 {
                return Err(bad("frequency vanishes at nonzero wavevector"));
            }
            freqs.push(w);
        }
        for i in grid.indices() {
            let w = freqs[i];
            let wn = freqs[grid.negate(i)];
            if (w - wn).abs() > 1e-12 * w.abs().max(1.0) {
                return Err(SystemError::Dispersion {
                    name: dispersion.name().to_string(),
                    mode: grid.mode(i),
                    reason: "frequency is not even in k",
                });
            }
        }
        let triads = TriadTable::enumerate(&grid, &freqs, &coupling, false);
        if let Some(t) = triads
            .iter()
            .find(|t| !(t.coupling.re.is_finite() && t.coupling.im.is_finite()))
        {
            return Err(SystemError::Coupling {
                name: coupling.name().to_string(),
                triad: [grid.mode(t.sum), grid.mode(t.left), grid.mode(t.right)],
            });
        }
        Ok(Self {
            grid,
            dispersion,
            coupling,
            epsilon,
            freqs,
            triads: Arc::new(triads),
        })
    }

    pub fn grid(&self) -> &ModeGrid {
        &self.grid
    }

    pub fn dispersion(&self) -> &Dispersion {
        &self.dispersion
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Same system with a different nonlinearity parameter.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn freq(&self, i: usize) -> f64 {
        self.freqs[i]
    }

    pub fn triads(&self) -> &TriadTable {
        &self.triads
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn detuning(&self, j: usize, m: usize, n: usize) -> f64 {
        self.freqs[j] - self.freqs[m] - self.freqs[n]
    }

    pub fn coupling_value(&self, j: usize, m: usize, n: usize) -> Complex64 {
        self.coupling.value(&self.grid, j, m, n)
    }

    /// Mean frequency over the nonzero modes.
    pub fn mean_freq(&self) -> f64 {
        let zero = self.grid.zero();
        let (sum, count) = self
            .freqs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != zero)
            .fold((0.0, 0usize), |(s, c), (_, w)| (s + w, c + 1));
        sum / count as f64
    }

    pub fn max_freq(&self) -> f64 {
        self.freqs.iter().cloned().fold(0.0, f64::max)
    }

    /// `1 / (ε² ω̄)`.
    pub fn nonlinear_time(&self) -> f64 {
        1.0 / (self.epsilon * self.epsilon * self.mean_freq())
    }

    /// Default expansion time `10 · 2π / ω_max`.
    pub fn default_expansion_time(&self) -> f64 {
        10.0 * 2.0 * PI / self.max_freq()
    }
}
