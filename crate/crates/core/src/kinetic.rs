//! Collision coefficients of the three-wave kinetic equation `ṅ = η − γn`
//! on a discrete grid, with the frequency delta replaced by a broadened one.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wave_system::{Triad, WaveSystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticError {
    #[error("broadening width must be positive and finite, got {0}")]
    Width(f64),
    #[error("unknown broadening kind {0:?}")]
    Kind(String),
    #[error("spectrum has {got} modes, system has {want}")]
    Length { got: usize, want: usize },
    #[error("spectrum value at mode {mode} is {value}")]
    Value { mode: usize, value: f64 },
    #[error("time step must be positive and finite, got {0}")]
    Step(f64),
    #[error("kinetic evolution blew up at t = {time} in mode {mode}")]
    BlowUp { time: f64, mode: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    Lorentzian,
    Gaussian,
    /// Fejér kernel `|Δ_τ(x)|² / (2πτ)` of a finite window `τ = 1/w`.
    FiniteTime,
}

impl std::str::FromStr for DeltaKind {
    type Err = KineticError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lorentzian" => Ok(Self::Lorentzian),
            "gaussian" => Ok(Self::Gaussian),
            "finite_time" => Ok(Self::FiniteTime),
            other => Err(KineticError::Kind(other.to_string())),
        }
    }
}

/// Unit-mass approximation of `δ(x)` with width `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BroadenedDelta {
    pub kind: DeltaKind,
    pub width: f64,
}

impl BroadenedDelta {
    pub fn new(kind: DeltaKind, width: f64) -> Result<Self, KineticError> {
        if !(width.is_finite() && width > 0.0) {
            return Err(KineticError::Width(width));
        }
        Ok(Self { kind, width })
    }

    pub fn lorentzian(width: f64) -> Result<Self, KineticError> {
        Self::new(DeltaKind::Lorentzian, width)
    }

    pub fn gaussian(width: f64) -> Result<Self, KineticError> {
        Self::new(DeltaKind::Gaussian, width)
    }

    /// The kernel a second-order expansion produces after time `tau`.
    pub fn finite_time(tau: f64) -> Result<Self, KineticError> {
        Self::new(DeltaKind::FiniteTime, 1.0 / tau)
    }

    /// Lorentzian with `w = 0.1 · median |detuning|` over active triads,
    /// falling back to `0.1 · ω̄` when most triads are exactly resonant.
    pub fn default_for(sys: &WaveSystem) -> Self {
        let mut d: Vec<f64> = sys.triads().iter().map(|t| t.detuning.abs()).collect();
        d.sort_by(f64::total_cmp);
        let median = d.get(d.len() / 2).copied().unwrap_or(0.0);
        let w = if median > 0.0 {
            0.1 * median
        } else {
            0.1 * sys.mean_freq()
        };
        Self {
            kind: DeltaKind::Lorentzian,
            width: w,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let w = self.width;
        match self.kind {
            DeltaKind::Lorentzian => w / (PI * (x * x + w * w)),
            DeltaKind::Gaussian => (-0.5 * (x / w).powi(2)).exp() / (w * (2.0 * PI).sqrt()),
            DeltaKind::FiniteTime => {
                let u = x / w;
                if u.abs() < 1e-4 {
                    (1.0 - u * u / 12.0) / (2.0 * PI * w)
                } else {
                    2.0 * (0.5 * u).sin().powi(2) / (PI * w * u * u)
                }
            }
        }
    }
}

/// Validated nonnegative action spectrum `n_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum(pub Vec<f64>);

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Result<Self, KineticError> {
        if let Some(mode) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(KineticError::Value {
                mode,
                value: values[mode],
            });
        }
        Ok(Self(values))
    }

    /// Rayleigh–Jeans state `n = T/ω` with the zero mode left empty.
    pub fn equilibrium(sys: &WaveSystem, temperature: f64) -> Self {
        let zero = sys.grid().zero();
        Self(
            (0..sys.len())
                .map(|l| {
                    if l == zero {
                        0.0
                    } else {
                        temperature / sys.freq(l)
                    }
                })
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_len(sys: &WaveSystem, n: &[f64]) -> Result<(), KineticError> {
    if n.len() != sys.len() {
        return Err(KineticError::Length {
            got: n.len(),
            want: sys.len(),
        });
    }
    Ok(())
}

/// `(2π/L)^d`, applied once per triad sum.
pub fn measure(sys: &WaveSystem) -> f64 {
    (2.0 * PI / sys.grid().length()).powi(sys.grid().dim() as i32)
}

fn weight(t: &Triad, delta: &BroadenedDelta) -> f64 {
    t.coupling.norm_sqr() * delta.eval(t.detuning)
}

fn per_mode(sys: &WaveSystem, f: impl Fn(usize) -> f64 + Sync + Send) -> Vec<f64> {
    (0..sys.len()).into_par_iter().map(f).collect()
}

/// `η_j = 4πε² μ Σ [|V^j_{lm}|² δ_w(ω^j_{lm}) + 2 |V^m_{jl}|² δ_w(ω^m_{jl})] n_l n_m`.
pub fn eta(sys: &WaveSystem, n: &[f64], delta: &BroadenedDelta) -> Vec<f64> {
    assert_eq!(n.len(), sys.len(), "spectrum length");
    let c = 4.0 * PI * sys.epsilon().powi(2) * measure(sys);
    let tab = sys.triads();
    per_mode(sys, |j| {
        let merge: f64 = tab
            .with_sum(j)
            .map(|t| weight(t, delta) * n[t.left] * n[t.right])
            .sum();
        let split: f64 = tab
            .with_left(j)
            .map(|t| weight(t, delta) * n[t.right] * n[t.sum])
            .sum();
        c * (merge + 2.0 * split)
    })
}

/// `γ_j = 8πε² μ Σ [|V^j_{lm}|² δ_w(ω^j_{lm}) n_m + |V^m_{jl}|² δ_w(ω^m_{jl}) (n_l − n_m)]`.
pub fn gamma(sys: &WaveSystem, n: &[f64], delta: &BroadenedDelta) -> Vec<f64> {
    assert_eq!(n.len(), sys.len(), "spectrum length");
    let c = 8.0 * PI * sys.epsilon().powi(2) * measure(sys);
    let tab = sys.triads();
    per_mode(sys, |j| {
        let merge: f64 = tab.with_sum(j).map(|t| weight(t, delta) * n[t.right]).sum();
        let split: f64 = tab
            .with_left(j)
            .map(|t| weight(t, delta) * (n[t.right] - n[t.sum]))
            .sum();
        c * (merge + split)
    })
}

/// `dn/dt = η − γ n`.
pub fn kinetic_rhs(sys: &WaveSystem, n: &[f64], delta: &BroadenedDelta) -> Vec<f64> {
    let e = eta(sys, n, delta);
    let g = gamma(sys, n, delta);
    e.iter()
        .zip(&g)
        .zip(n)
        .map(|((e, g), n)| e - g * n)
        .collect()
}

/// `‖η − γn‖₂ / ‖η‖₂`.
pub fn stationarity_residual(sys: &WaveSystem, n: &[f64], delta: &BroadenedDelta) -> f64 {
    let e = eta(sys, n, delta);
    let r = kinetic_rhs(sys, n, delta);
    let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    l2(&r) / l2(&e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticTrajectory {
    pub times: Vec<f64>,
    pub spectra: Vec<Vec<f64>>,
    /// Number of negative values that were reset to zero.
    pub clipped: usize,
}

impl KineticTrajectory {
    pub fn last(&self) -> &[f64] {
        self.spectra
            .last()
            .expect("trajectory holds the initial state")
    }
}

/// RK4 on the kinetic equation. Every `record_every` steps (and at the end)
/// the spectrum is stored. Negative values are clipped and counted.
pub fn evolve_kinetic(
    sys: &WaveSystem,
    n0: &[f64],
    t_end: f64,
    dt: f64,
    delta: &BroadenedDelta,
    record_every: usize,
) -> Result<KineticTrajectory, KineticError> {
    check_len(sys, n0)?;
    Spectrum::new(n0.to_vec())?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(KineticError::Step(dt));
    }
    let steps = crate::dynamics::step_count(t_end, dt);
    let h = t_end / steps as f64;
    let ceiling = 1e12 * n0.iter().cloned().fold(1.0, f64::max);
    let stride = record_every.max(1);
    let mut n = n0.to_vec();
    let mut out = KineticTrajectory {
        times: vec![0.0],
        spectra: vec![n.clone()],
        clipped: 0,
    };
    let axpy = |x: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(a, b)| a + c * b).collect()
    };
    for s in 1..=steps {
        let k1 = kinetic_rhs(sys, &n, delta);
        let k2 = kinetic_rhs(sys, &axpy(&n, &k1, 0.5 * h), delta);
        let k3 = kinetic_rhs(sys, &axpy(&n, &k2, 0.5 * h), delta);
        let k4 = kinetic_rhs(sys, &axpy(&n, &k3, h), delta);
        for l in 0..n.len() {
            n[l] += h / 6.0 * (k1[l] + 2.0 * k2[l] + 2.0 * k3[l] + k4[l]);
            if !n[l].is_finite() || n[l] > ceiling {
                return Err(KineticError::BlowUp {
                    time: s as f64 * h,
                    mode: l,
                });
            }
            if n[l] < 0.0 {
                n[l] = 0.0;
                out.clipped += 1;
            }
        }
        if s % stride == 0 || s == steps {
            out.times.push(s as f64 * h);
            out.spectra.push(n.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wave_system::{Coupling, Dispersion, ModeGrid};

    fn line(b: i64, alpha: f64, length: f64) -> WaveSystem {
        let grid = ModeGrid::new(1, length, b).unwrap();
        WaveSystem::new(
            grid,
            Dispersion::power_law(alpha, 1.0),
            Coupling::constant(1.0),
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
                    1.0 + 0.3 * ((l * 7) % 5) as f64
                }
            })
            .collect()
    }

    /// Direct double loop over all (l, m) pairs, independent of the triad table.
    fn naive(sys: &WaveSystem, n: &[f64], delta: &BroadenedDelta) -> (Vec<f64>, Vec<f64>) {
        let g = sys.grid();
        let eps2 = sys.epsilon().powi(2);
        let mu = (2.0 * PI / g.length()).powi(g.dim() as i32);
        let mut eta = vec![0.0; sys.len()];
        let mut gam = vec![0.0; sys.len()];
        for j in 0..sys.len() {
            for l in 0..sys.len() {
                for m in 0..sys.len() {
                    let (kj, kl, km) = (g.mode(j), g.mode(l), g.mode(m));
                    let w = |a: usize, b: usize, c: usize| {
                        let v = sys.coupling_value(a, b, c).norm_sqr();
                        v * delta.eval(sys.freq(a) - sys.freq(b) - sys.freq(c))
                    };
                    if (0..3).all(|i| kj[i] == kl[i] + km[i]) {
                        eta[j] += 4.0 * PI * eps2 * mu * w(j, l, m) * n[l] * n[m];
                        gam[j] += 8.0 * PI * eps2 * mu * w(j, l, m) * n[m];
                    }
                    if (0..3).all(|i| km[i] == kj[i] + kl[i]) {
                        eta[j] += 8.0 * PI * eps2 * mu * w(m, j, l) * n[l] * n[m];
                        gam[j] += 8.0 * PI * eps2 * mu * w(m, j, l) * (n[l] - n[m]);
                    }
                }
            }
        }
        (eta, gam)
    }

    #[test]
    fn delta_has_unit_mass_and_is_even() {
        let window_mass = |d: &BroadenedDelta, half: f64| {
            let w = d.width;
            let m = 200_000;
            let h = 2.0 * half * w / m as f64;
            (0..m)
                .map(|i| d.eval(-half * w + (i as f64 + 0.5) * h) * h)
                .sum::<f64>()
        };
        let g = BroadenedDelta::gaussian(0.3).unwrap();
        assert!((window_mass(&g, 50.0) - 1.0).abs() < 1e-9);
        // the Lorentzian tail keeps 2/(50π) of the mass outside ±50w
        let l = BroadenedDelta::lorentzian(0.3).unwrap();
        let m = window_mass(&l, 50.0);
        assert!((m - 2.0 / PI * 50f64.atan()).abs() < 1e-8, "{m}");
        assert!(window_mass(&l, 64.0) >= 0.99);
        for d in [g, l] {
            assert_eq!(d.eval(0.7), d.eval(-0.7));
        }
        assert!(BroadenedDelta::lorentzian(0.0).is_err());
        assert!("cauchy".parse::<DeltaKind>().is_err());
    }

    #[test]
    fn matches_naive_sums() {
        for (b, alpha, len) in [(2, 1.5, 2.0 * PI), (2, 2.0, 5.0), (3, 1.0, 2.0 * PI)] {
            let sys = line(b, alpha, len);
            let n = spectrum(&sys);
            let d = BroadenedDelta::lorentzian(0.2).unwrap();
            let (e0, g0) = naive(&sys, &n, &d);
            let e = eta(&sys, &n, &d);
            let g = gamma(&sys, &n, &d);
            for j in 0..sys.len() {
                assert!((e[j] - e0[j]).abs() <= 1e-12 * e0[j].abs().max(1e-300));
                assert!((g[j] - g0[j]).abs() <= 1e-12 * g0[j].abs().max(1e-12));
            }
        }
    }

    #[test]
    fn trivial_cases() {
        let sys = line(4, 1.5, 2.0 * PI);
        let d = BroadenedDelta::lorentzian(0.1).unwrap();
        let zero = vec![0.0; sys.len()];
        assert!(eta(&sys, &zero, &d).iter().all(|x| *x == 0.0));
        assert!(gamma(&sys, &zero, &d).iter().all(|x| *x == 0.0));
        assert!(kinetic_rhs(&sys, &zero, &d).iter().all(|x| *x == 0.0));

        let k0 = sys.grid().index([1, 0, 0]).unwrap();
        let mut single = zero.clone();
        single[k0] = 1.0;
        let e = eta(&sys, &single, &d);
        let k2 = sys.grid().index([2, 0, 0]).unwrap();
        for (j, v) in e.iter().enumerate() {
            assert_eq!(*v > 0.0, j == k2, "mode {j}");
        }
    }

    #[test]
    fn homogeneity() {
        let sys = line(4, 1.5, 2.0 * PI);
        let d = BroadenedDelta::gaussian(0.2).unwrap();
        let n = spectrum(&sys);
        let n3: Vec<f64> = n.iter().map(|x| 3.0 * x).collect();
        let (e1, e3) = (eta(&sys, &n, &d), eta(&sys, &n3, &d));
        let (g1, g3) = (gamma(&sys, &n, &d), gamma(&sys, &n3, &d));
        for j in 0..sys.len() {
            assert!((e3[j] - 9.0 * e1[j]).abs() <= 1e-13 * e3[j].abs().max(1e-300));
            assert!((g3[j] - 3.0 * g1[j]).abs() <= 1e-13 * g3[j].abs().max(1e-300));
            assert!(e1[j] >= 0.0);
        }
    }

    #[test]
    fn steady_state_relation() {
        let sys = line(3, 1.5, 2.0 * PI);
        let d = BroadenedDelta::lorentzian(0.2).unwrap();
        let n = spectrum(&sys);
        let e = eta(&sys, &n, &d);
        let g = gamma(&sys, &n, &d);
        let r = kinetic_rhs(&sys, &n, &d);
        for j in 0..sys.len() {
            assert!((r[j] - (e[j] - g[j] * n[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn equilibrium_residual_shrinks_with_width() {
        let sys = line(6, 1.0, 2.0 * PI);
        let n = Spectrum::equilibrium(&sys, 1.0);
        let wbar = sys.mean_freq();
        let res: Vec<f64> = [0.3, 0.1, 0.03]
            .iter()
            .map(|f| {
                stationarity_residual(
                    &sys,
                    n.as_slice(),
                    &BroadenedDelta::lorentzian(f * wbar).unwrap(),
                )
            })
            .collect();
        assert!(res[0] > res[1] && res[1] > res[2], "{res:?}");
    }

    #[test]
    fn evolution_converges_at_fourth_order() {
        let sys = line(3, 1.5, 2.0 * PI);
        let d = BroadenedDelta::lorentzian(0.5).unwrap();
        let n = spectrum(&sys);
        let t = 10.0;
        let run = |dt: f64| {
            evolve_kinetic(&sys, &n, t, dt, &d, usize::MAX)
                .unwrap()
                .last()
                .to_vec()
        };
        let (a, b, c) = (run(1.0), run(0.5), run(0.25));
        let diff = |x: &[f64], y: &[f64]| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max)
        };
        let ratio = diff(&a, &b) / diff(&b, &c);
        assert!(ratio > 12.8 && ratio < 19.2, "ratio {ratio}");
    }

    #[test]
    fn equilibrium_drifts_little() {
        let sys = line(6, 1.0, 2.0 * PI);
        let n = Spectrum::equilibrium(&sys, 1.0);
        // Lorentzian tails feed the neutral directions of the resonant
        // collision operator; the Gaussian has none at this width
        let d = BroadenedDelta::gaussian(0.03 * sys.mean_freq()).unwrap();
        let tr = evolve_kinetic(
            &sys,
            n.as_slice(),
            sys.nonlinear_time(),
            0.2,
            &d,
            usize::MAX,
        )
        .unwrap();
        let z = sys.grid().zero();
        let drift = (0..sys.len())
            .filter(|l| *l != z)
            .map(|l| (tr.last()[l] / n.0[l] - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 0.01, "drift {drift}");
        assert_eq!(tr.clipped, 0);
    }

    #[test]
    fn rejects_bad_input() {
        let sys = line(2, 1.5, 2.0 * PI);
        let d = BroadenedDelta::lorentzian(0.1).unwrap();
        let mut n = spectrum(&sys);
        assert!(evolve_kinetic(&sys, &n, 1.0, 0.0, &d, 1).is_err());
        n[1] = -1.0;
        assert!(matches!(
            evolve_kinetic(&sys, &n, 1.0, 0.1, &d, 1),
            Err(KineticError::Value { .. })
        ));
        assert!(evolve_kinetic(&sys, &n[..2], 1.0, 0.1, &d, 1).is_err());
    }

    #[test]
    fn finite_time_kernel_is_fejer() {
        let tau = 7.3;
        let d = BroadenedDelta::finite_time(tau).unwrap();
        for x in [0.0, 1e-7, 0.01, 0.4, 2.5, -3.1] {
            let want = crate::dynamics::delta_kernel(x, tau).norm_sqr() / (2.0 * PI * tau);
            assert!((d.eval(x) - want).abs() < 1e-12 * want.max(1e-3), "x={x}");
        }
        let h = 1e-3;
        let mass: f64 = (-200_000..=200_000).map(|i| d.eval(i as f64 * h) * h).sum();
        let tail = 2.0 / (PI * tau * 200.0);
        assert!((mass + tail - 1.0).abs() < 1e-3, "{mass}");
        assert_eq!(
            "finite_time".parse::<DeltaKind>().unwrap(),
            DeltaKind::FiniteTime
        );
    }
}
