//! Predicted phase observables: the nonlinear frequency shift, the growth
//! rate of phase-phase correlations and of the phase dispersion, plus the
//! random-integer example showing why φ and ψ = e^{iφ} differ statistically.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetic::{eta, measure, BroadenedDelta, DeltaKind};
use crate::stats::{jackknife, mean_estimate, Estimate};
use crate::wave_system::WaveSystem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseError {
    #[error("kernel width must be positive and finite, got {0}")]
    Width(f64),
    #[error("undefined phase dispersion rate: n = 0 at mode {0}")]
    UndefinedDispersion(usize),
    #[error("mode index {0} is outside the grid")]
    Mode(usize),
    #[error("toy demo needs at least 10^4 samples, got {0}")]
    Samples(usize),
    #[error("integer law needs lo <= hi, got [{lo}, {hi}]")]
    IntegerLaw { lo: i64, hi: i64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PvKind {
    /// `x / (x² + w²)`.
    #[default]
    Lorentzian,
    /// `1/x − sin(xτ)/(x²τ)` with `τ = 1/w`: the time average over `[0, τ]`
    /// of the transient `(1 − cos xt)/x`.
    FiniteTime,
}

/// Regularized `𝒫(1/x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrincipalValueKernel {
    pub width: f64,
    #[serde(default)]
    pub kind: PvKind,
}

impl PrincipalValueKernel {
    pub fn new(width: f64) -> Result<Self, PhaseError> {
        if !(width.is_finite() && width > 0.0) {
            return Err(PhaseError::Width(width));
        }
        Ok(Self {
            width,
            kind: PvKind::Lorentzian,
        })
    }

    pub fn finite_time(tau: f64) -> Result<Self, PhaseError> {
        Ok(Self {
            kind: PvKind::FiniteTime,
            ..Self::new(1.0 / tau)?
        })
    }

    /// The kernel sharing its width with `delta`; a finite-time delta gets
    /// the finite-time kernel, every other kind the Lorentzian one.
    pub fn paired(delta: &BroadenedDelta) -> Self {
        let kind = match delta.kind {
            DeltaKind::FiniteTime => PvKind::FiniteTime,
            _ => PvKind::Lorentzian,
        };
        Self {
            width: delta.width,
            kind,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let w = self.width;
        match self.kind {
            PvKind::Lorentzian => x / (x * x + w * w),
            PvKind::FiniteTime => {
                let u = x / w;
                if u.abs() < 0.25 {
                    let v = u * u;
                    u * (1.0 / 6.0
                        - v * (1.0 / 120.0
                            - v * (1.0 / 5040.0 - v * (1.0 / 362_880.0 - v / 39_916_800.0))))
                        / w
                } else {
                    (u - u.sin()) / (w * u * u)
                }
            }
        }
    }
}

/// Mean phase drift `⟨ω_NL⟩_j`,
/// `−4ε² μ Σ [|V^j_{mn}|² 𝒫(1/ω^j_{mn}) n_n + |V^m_{jn}|² 𝒫(1/ω^m_{jn}) (n_m − n_n)]`
/// together with the self-interaction term `−2ε² μ |V^{2j}_{jj}|² 𝒫(1/ω^{2j}_{jj}) n_j`
/// that survives on a finite grid.
///
/// Passing intensities `A_l²` of one realization instead of `n` gives the
/// per-realization drift.
pub fn omega_nl(sys: &WaveSystem, n: &[f64], pv: &PrincipalValueKernel) -> Vec<f64> {
    assert_eq!(n.len(), sys.len(), "spectrum length");
    let c = 4.0 * sys.epsilon().powi(2) * measure(sys);
    let tab = sys.triads();
    (0..sys.len())
        .into_par_iter()
        .map(|j| {
            let merge: f64 = tab
                .with_sum(j)
                .map(|t| t.coupling.norm_sqr() * pv.eval(t.detuning) * n[t.right])
                .sum();
            let split: f64 = tab
                .with_left(j)
                .map(|t| t.coupling.norm_sqr() * pv.eval(t.detuning) * (n[t.sum] - n[t.right]))
                .sum();
            let own = match sys.grid().add(j, j) {
                Some(d) => {
                    0.5 * sys.coupling_value(d, j, j).norm_sqr()
                        * pv.eval(sys.detuning(d, j, j))
                        * n[j]
                }
                None => 0.0,
            };
            -c * (merge + split + own)
        })
        .collect()
}

/// The averaged display read literally, with the overall `n_j` weight and
/// no `n_n` in the merge term:
/// `4ε² μ Σ [|V^j_{mn}|² 𝒫 − |V^m_{jn}|² 𝒫 (n_m − n_n)] n_j`. Not linear in `n`.
pub fn omega_nl_display(sys: &WaveSystem, n: &[f64], pv: &PrincipalValueKernel) -> Vec<f64> {
    assert_eq!(n.len(), sys.len(), "spectrum length");
    let c = 4.0 * sys.epsilon().powi(2) * measure(sys);
    let tab = sys.triads();
    (0..sys.len())
        .map(|j| {
            let merge: f64 = tab
                .with_sum(j)
                .map(|t| t.coupling.norm_sqr() * pv.eval(t.detuning))
                .sum();
            let split: f64 = tab
                .with_left(j)
                .map(|t| t.coupling.norm_sqr() * pv.eval(t.detuning) * (n[t.sum] - n[t.right]))
                .sum();
            c * (merge - split) * n[j]
        })
        .collect()
}

/// Growth rate of `⟨(φ_j − ⟨φ_j⟩)(φ_k − ⟨φ_k⟩)⟩`:
/// `4πε² [|V^j_{k,j−k}|² δ n_{j−k} + |V^k_{j,k−j}|² δ n_{k−j} + |V^{j+k}_{jk}|² δ n_{j+k}]`
/// plus, on the diagonal, `η_j / (2 n_j)`. Shifted indices outside the grid
/// contribute nothing.
pub fn phase_corr_rate(
    sys: &WaveSystem,
    n: &[f64],
    delta: &BroadenedDelta,
    j: usize,
    k: usize,
) -> Result<f64, PhaseError> {
    let grid = sys.grid();
    for m in [j, k] {
        if m >= sys.len() {
            return Err(PhaseError::Mode(m));
        }
    }
    let term = |s: Option<usize>, l: usize, r: usize| match s {
        Some(s) => {
            let v = sys.coupling_value(s, l, r).norm_sqr();
            v * delta.eval(sys.detuning(s, l, r))
        }
        None => 0.0,
    };
    let c = 4.0 * PI * sys.epsilon().powi(2);
    let mut rate = 0.0;
    if let Some(d) = grid.sub(j, k) {
        rate += term(Some(j), k, d) * n[d];
    }
    if let Some(d) = grid.sub(k, j) {
        rate += term(Some(k), j, d) * n[d];
    }
    if let Some(s) = grid.add(j, k) {
        rate += term(Some(s), j, k) * n[s];
    }
    rate *= c;
    if j == k {
        if n[j] <= 0.0 {
            return Err(PhaseError::UndefinedDispersion(j));
        }
        rate += eta(sys, n, delta)[j] / (2.0 * n[j]);
    }
    Ok(rate)
}

/// Phase-dispersion growth rate `σ̇_k = η_k / n_k`.
pub fn sigma_rate(
    sys: &WaveSystem,
    n: &[f64],
    delta: &BroadenedDelta,
    k: usize,
) -> Result<f64, PhaseError> {
    if k >= sys.len() {
        return Err(PhaseError::Mode(k));
    }
    if n[k] <= 0.0 {
        return Err(PhaseError::UndefinedDispersion(k));
    }
    Ok(eta(sys, n, delta)[k] / n[k])
}

/// All phase predictions for a spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePrediction {
    pub omega_nl: Vec<f64>,
    /// Symmetric `N × N` table; `None` on the diagonal where `n_j = 0`.
    pub pair_rates: Vec<Vec<Option<f64>>>,
    pub sigma_rates: Vec<Option<f64>>,
}

impl PhasePrediction {
    pub fn compute(sys: &WaveSystem, n: &[f64], delta: &BroadenedDelta) -> Self {
        let pv = PrincipalValueKernel::paired(delta);
        let e = eta(sys, n, delta);
        let sigma_rates = (0..sys.len())
            .map(|k| (n[k] > 0.0).then(|| e[k] / n[k]))
            .collect();
        let pair_rates = (0..sys.len())
            .into_par_iter()
            .map(|j| {
                (0..sys.len())
                    .map(|k| phase_corr_rate(sys, n, delta, j, k).ok())
                    .collect()
            })
            .collect();
        Self {
            omega_nl: omega_nl(sys, n, &pv),
            pair_rates,
            sigma_rates,
        }
    }
}

/// Law of the random integer in the toy example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntegerLaw {
    /// Uniform on `{lo, ..., hi}`.
    Uniform {
        lo: i64,
        hi: i64,
    },
    Constant {
        value: i64,
    },
}

impl IntegerLaw {
    pub fn variance(&self) -> f64 {
        match *self {
            Self::Uniform { lo, hi } => {
                let m = (hi - lo + 1) as f64;
                (m * m - 1.0) / 12.0
            }
            Self::Constant { .. } => 0.0,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> i64 {
        match *self {
            Self::Uniform { lo, hi } => rng.gen_range(lo..=hi),
            Self::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub samples: usize,
    pub predicted_cov: f64,
    pub cov_phi: Estimate,
    pub psi_pair: Complex64,
    pub psi_pair_stderr: f64,
    pub psi_means: [Complex64; 2],
    pub psi_mean_stderr: [f64; 2],
}

impl ToyReport {
    /// Covariance within `k` standard errors of `4π² Var(N)` and all three
    /// ψ statistics within `k` standard errors of zero.
    pub fn consistent(&self, k: f64) -> bool {
        self.cov_phi.z_score(self.predicted_cov) <= k
            && self.psi_pair.norm() <= k * self.psi_pair_stderr
            && (0..2).all(|i| self.psi_means[i].norm() <= k * self.psi_mean_stderr[i])
    }
}

/// Sample `φ_{1,2} = 2πN + r_{1,2}` with `r` uniform on `[−π, π)`.
pub fn toy_phase_demo(law: IntegerLaw, samples: usize, seed: u64) -> Result<ToyReport, PhaseError> {
    if samples < 10_000 {
        return Err(PhaseError::Samples(samples));
    }
    if let IntegerLaw::Uniform { lo, hi } = law {
        if lo > hi {
            return Err(PhaseError::IntegerLaw { lo, hi });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = [Vec::with_capacity(samples), Vec::with_capacity(samples)];
    for _ in 0..samples {
        let n = law.sample(&mut rng) as f64;
        for p in phi.iter_mut() {
            p.push(2.0 * PI * n + rng.gen_range(-PI..PI));
        }
    }
    let prod: Vec<f64> = phi[0].iter().zip(&phi[1]).map(|(a, b)| a * b).collect();
    let unbias = samples as f64 / (samples - 1) as f64;
    let mut cov_phi = jackknife(&[&phi[0], &phi[1], &prod], |m| m[2] - m[0] * m[1]);
    cov_phi.value *= unbias;
    let complex_mean = |re: Vec<f64>, im: Vec<f64>| {
        let (r, i) = (mean_estimate(&re), mean_estimate(&im));
        (Complex64::new(r.value, i.value), r.stderr.hypot(i.stderr))
    };
    let (psi_pair, psi_pair_stderr) = complex_mean(
        phi[0]
            .iter()
            .zip(&phi[1])
            .map(|(a, b)| (a + b).cos())
            .collect(),
        phi[0]
            .iter()
            .zip(&phi[1])
            .map(|(a, b)| (a + b).sin())
            .collect(),
    );
    let (m1, e1) = complex_mean(
        phi[0].iter().map(|a| a.cos()).collect(),
        phi[0].iter().map(|a| a.sin()).collect(),
    );
    let (m2, e2) = complex_mean(
        phi[1].iter().map(|a| a.cos()).collect(),
        phi[1].iter().map(|a| a.sin()).collect(),
    );
    Ok(ToyReport {
        samples,
        predicted_cov: 4.0 * PI * PI * law.variance(),
        cov_phi,
        psi_pair,
        psi_pair_stderr,
        psi_means: [m1, m2],
        psi_mean_stderr: [e1, e2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wave_system::{Coupling, Dispersion, ModeGrid};

    fn line(b: i64, alpha: f64) -> WaveSystem {
        let grid = ModeGrid::new(1, 2.0 * PI, b).unwrap();
        WaveSystem::new(
            grid,
            Dispersion::power_law(alpha, 1.0),
            Coupling::product(1.0, 0.5),
            0.1,
        )
        .unwrap()
    }

    fn spectrum(sys: &WaveSystem) -> Vec<f64> {
        let z = sys.grid().zero();
        (0..sys.len())
            .map(|l| {
                if l == z {
                    0.0
                } else {
                    0.5 + 0.25 * ((l * 3) % 4) as f64
                }
            })
            .collect()
    }

    #[test]
    fn kernel_limits() {
        let pv = PrincipalValueKernel::new(0.2).unwrap();
        assert_eq!(pv.eval(-0.7), -pv.eval(0.7));
        let x = 20.0 * 0.2;
        assert!((pv.eval(x) * x - 1.0).abs() < 0.01);
        assert!(PrincipalValueKernel::new(-1.0).is_err());

        let tau = 3.0;
        let ft = PrincipalValueKernel::finite_time(tau).unwrap();
        for x in [1e-5, 2e-4, 0.05, 0.9, -2.3, 40.0] {
            // (1/τ) ∫₀^τ (1 − cos xt)/x dt by the midpoint rule
            let m = 20_000;
            let h = tau / m as f64;
            let avg: f64 = (0..m)
                .map(|i| (1.0 - (x * (i as f64 + 0.5) * h).cos()) / x)
                .sum::<f64>()
                / m as f64;
            assert!(
                (ft.eval(x) - avg).abs() <= 1e-6 * avg.abs().max(1e-6),
                "{x}: {} vs {avg}",
                ft.eval(x)
            );
        }
        let seam = 0.25 * ft.width;
        assert!(
            (ft.eval(seam * (1.0 - 1e-15)) - ft.eval(seam * (1.0 + 1e-15))).abs()
                < 1e-12 * ft.eval(seam).abs()
        );
        assert_eq!(
            PrincipalValueKernel::paired(&BroadenedDelta::finite_time(tau).unwrap()),
            ft
        );
    }

    #[test]
    fn omega_nl_matches_direct_sum() {
        let sys = line(2, 1.5);
        let g = sys.grid();
        let n = spectrum(&sys);
        let pv = PrincipalValueKernel::new(0.1).unwrap();
        let got = omega_nl(&sys, &n, &pv);
        let eps2 = sys.epsilon().powi(2);
        for j in 0..sys.len() {
            let mut want = 0.0;
            for m in 0..sys.len() {
                for q in 0..sys.len() {
                    let (kj, km, kq) = (g.mode(j)[0], g.mode(m)[0], g.mode(q)[0]);
                    if kj == km + kq {
                        let v = sys.coupling_value(j, m, q).norm_sqr();
                        want -= 4.0
                            * eps2
                            * v
                            * pv.eval(sys.freq(j) - sys.freq(m) - sys.freq(q))
                            * n[q];
                    }
                    if km == kj + kq {
                        let v = sys.coupling_value(m, j, q).norm_sqr();
                        want -= 4.0
                            * eps2
                            * v
                            * pv.eval(sys.freq(m) - sys.freq(j) - sys.freq(q))
                            * (n[m] - n[q]);
                        if kq == kj {
                            want -=
                                2.0 * eps2 * v * pv.eval(sys.freq(m) - 2.0 * sys.freq(j)) * n[j];
                        }
                    }
                }
            }
            assert!(
                (got[j] - want).abs() <= 1e-12 * want.abs().max(1e-300),
                "j={j}"
            );
        }
        let zero = vec![0.0; sys.len()];
        assert!(omega_nl(&sys, &zero, &pv).iter().all(|x| *x == 0.0));
        let n2: Vec<f64> = n.iter().map(|x| 2.0 * x).collect();
        for (a, b) in omega_nl(&sys, &n2, &pv).iter().zip(&got) {
            assert!((a - 2.0 * b).abs() <= 1e-14 * b.abs());
        }
    }

    #[test]
    fn omega_nl_converges_as_width_shrinks() {
        // 1-D α = 1.5 has no detuning below 0.1 on B = 4
        let sys = line(4, 1.5);
        let min_det = sys
            .triads()
            .iter()
            .map(|t| t.detuning.abs())
            .fold(f64::INFINITY, f64::min);
        let n = spectrum(&sys);
        let w0 = 0.4 * min_det;
        let series: Vec<Vec<f64>> = (0..4)
            .map(|h| {
                omega_nl(
                    &sys,
                    &n,
                    &PrincipalValueKernel::new(w0 / 2f64.powi(h)).unwrap(),
                )
            })
            .collect();
        let gaps: Vec<f64> = series
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn correlation_rates() {
        let sys = line(3, 1.0);
        let n = spectrum(&sys);
        let d = BroadenedDelta::lorentzian(0.2).unwrap();
        let z = sys.grid().zero();
        for j in 0..sys.len() {
            for k in 0..sys.len() {
                let a = phase_corr_rate(&sys, &n, &d, j, k);
                let b = phase_corr_rate(&sys, &n, &d, k, j);
                match (a, b) {
                    (Ok(a), Ok(b)) => {
                        assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-300));
                        assert!(a >= 0.0);
                    }
                    _ => assert!(j == k && j == z),
                }
            }
        }
        let zero = vec![0.0; sys.len()];
        assert_eq!(phase_corr_rate(&sys, &zero, &d, 1, 2).unwrap(), 0.0);
        // diagonal: the self term plus half of σ̇
        let j = sys.grid().index([1, 0, 0]).unwrap();
        let j2 = sys.grid().index([2, 0, 0]).unwrap();
        let self_term = 4.0
            * PI
            * sys.epsilon().powi(2)
            * sys.coupling_value(j2, j, j).norm_sqr()
            * d.eval(sys.detuning(j2, j, j))
            * n[j2];
        let diag = phase_corr_rate(&sys, &n, &d, j, j).unwrap();
        let sig = sigma_rate(&sys, &n, &d, j).unwrap();
        assert!((diag - self_term - 0.5 * sig).abs() < 1e-13 * diag);
    }

    #[test]
    fn sigma_rate_rules() {
        let sys = line(3, 1.0);
        let n = spectrum(&sys);
        let d = BroadenedDelta::lorentzian(0.2).unwrap();
        let e = eta(&sys, &n, &d);
        for k in (0..sys.len()).filter(|k| n[*k] > 0.0) {
            let s = sigma_rate(&sys, &n, &d, k).unwrap();
            assert_eq!(s, e[k] / n[k]);
            assert!(s >= 0.0);
        }
        let z = sys.grid().zero();
        assert!(matches!(
            sigma_rate(&sys, &n, &d, z),
            Err(PhaseError::UndefinedDispersion(_))
        ));
        let p = PhasePrediction::compute(&sys, &n, &d);
        assert!(p.sigma_rates[z].is_none());
        assert_eq!(p.pair_rates[1][2], p.pair_rates[2][1]);
    }

    #[test]
    fn toy_demo_separates_phi_and_psi() {
        let r = toy_phase_demo(IntegerLaw::Uniform { lo: 0, hi: 1 }, 100_000, 5).unwrap();
        assert!((r.predicted_cov - PI * PI).abs() < 1e-12);
        assert!(r.consistent(3.0), "{r:?}");
        assert!(r.cov_phi.value > 5.0);
        let c = toy_phase_demo(IntegerLaw::Constant { value: 3 }, 20_000, 6).unwrap();
        assert_eq!(c.predicted_cov, 0.0);
        assert!(c.consistent(3.0), "{c:?}");
        assert!(toy_phase_demo(IntegerLaw::Constant { value: 0 }, 100, 1).is_err());
        assert_eq!(
            toy_phase_demo(IntegerLaw::Uniform { lo: -2, hi: 2 }, 10_000, 9).unwrap(),
            toy_phase_demo(IntegerLaw::Uniform { lo: -2, hi: 2 }, 10_000, 9).unwrap()
        );
    }
}
