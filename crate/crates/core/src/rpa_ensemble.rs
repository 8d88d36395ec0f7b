//! Random-phase ensembles and the statistics measured on them.
//!
//! Every member is a pure function of `(master seed, member index)`: the
//! generator for member `i` is a ChaCha stream selected by the member index,
//! so results do not depend on how members are scheduled across workers.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ComplexField, DynamicsError, Rk4};
use crate::onemode_pdf::AmplitudePdf;
use crate::stats::{jackknife, mean_estimate, sum, CompensatedSum, Estimate};
use crate::wave_system::WaveSystem;
use crate::wick_oracle::PhaseMonomial;

/// Largest per-step phase increment accepted while unwrapping.
pub const MAX_UNWRAP_STEP: f64 = PI / 2.0;
/// Members integrated together with shared triad factors.
const LOCKSTEP_CHUNK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("amplitude law covers {got} modes, grid has {expected}")]
    LawLength { got: usize, expected: usize },
    #[error("invalid amplitude law entry for mode {mode}: {reason}")]
    LawValue { mode: usize, reason: &'static str },
    #[error("ensemble is empty")]
    Empty,
    #[error("generating function needs lambda <= 0, got {0}")]
    PositiveLambda(f64),
    #[error("phase increment {increment:.3} at mode {mode} exceeds the unwrap limit; reduce dt")]
    Unwrap { mode: usize, increment: f64 },
    #[error("mode {0} has zero amplitude; its phase is undefined")]
    ZeroAmplitude(usize),
    #[error("bin layout is invalid")]
    Bins,
    #[error("snapshot {0} out of range")]
    Snapshot(usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Per-mode law for the intensity `s = A²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmplitudeLaw {
    /// Fixed amplitudes `A_l`.
    Deterministic { amplitudes: Vec<f64> },
    /// `P(s) = e^{-s/n}/n` with the given means.
    ExponentialIntensity { means: Vec<f64> },
    /// Per-mode inverse-CDF tables `(u, s)`, `u` increasing from 0 to 1.
    Tabulated { tables: Vec<Vec<(f64, f64)>> },
}

impl AmplitudeLaw {
    pub fn len(&self) -> usize {
        match self {
            Self::Deterministic { amplitudes } => amplitudes.len(),
            Self::ExponentialIntensity { means } => means.len(),
            Self::Tabulated { tables } => tables.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, modes: usize) -> Result<(), EnsembleError> {
        if self.len() != modes {
            return Err(EnsembleError::LawLength {
                got: self.len(),
                expected: modes,
            });
        }
        let bad = |mode, reason| Err(EnsembleError::LawValue { mode, reason });
        match self {
            Self::Deterministic { amplitudes } => {
                if let Some(m) = amplitudes
                    .iter()
                    .position(|a| !(a.is_finite() && *a >= 0.0))
                {
                    return bad(m, "amplitude must be finite and nonnegative");
                }
            }
            Self::ExponentialIntensity { means } => {
                if let Some(m) = means.iter().position(|a| !(a.is_finite() && *a >= 0.0)) {
                    return bad(m, "mean intensity must be finite and nonnegative");
                }
            }
            Self::Tabulated { tables } => {
                for (m, t) in tables.iter().enumerate() {
                    if t.len() < 2 {
                        return bad(m, "table needs at least two points");
                    }
                    if t[0].0 != 0.0 || t[t.len() - 1].0 != 1.0 {
                        return bad(m, "table must span u in [0, 1]");
                    }
                    if t.windows(2).any(|w| !(w[1].0 > w[0].0 && w[1].1 >= w[0].1)) {
                        return bad(m, "table must be increasing");
                    }
                    if t[0].1 < 0.0 {
                        return bad(m, "intensities must be nonnegative");
                    }
                }
            }
        }
        Ok(())
    }

    /// Intensity for mode `l` at uniform variate `u ∈ [0, 1)`.
    pub fn intensity(&self, l: usize, u: f64) -> f64 {
        match self {
            Self::Deterministic { amplitudes } => amplitudes[l] * amplitudes[l],
            Self::ExponentialIntensity { means } => -means[l] * (-u).ln_1p(),
            Self::Tabulated { tables } => {
                let t = &tables[l];
                let k = t.partition_point(|p| p.0 <= u).clamp(1, t.len() - 1);
                let (a, b) = (t[k - 1], t[k]);
                a.1 + (b.1 - a.1) * (u - a.0) / (b.0 - a.0)
            }
        }
    }

    /// Mean intensity per mode, where available in closed form.
    pub fn mean_intensity(&self, l: usize) -> f64 {
        match self {
            Self::Deterministic { amplitudes } => amplitudes[l] * amplitudes[l],
            Self::ExponentialIntensity { means } => means[l],
            Self::Tabulated { tables } => {
                let t = &tables[l];
                sum(t
                    .windows(2)
                    .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)))
            }
        }
    }
}

/// Generator for one member and stream.
pub fn member_rng(master: u64, member: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(member.wrapping_mul(16).wrapping_add(stream & 15));
    rng
}

/// Draw one field: intensity then phase for each mode in index order.
pub fn sample_field(law: &AmplitudeLaw, rng: &mut impl Rng) -> ComplexField {
    let amps = (0..law.len())
        .map(|l| {
            let s = law.intensity(l, rng.gen::<f64>());
            let theta = 2.0 * PI * rng.gen::<f64>() - PI;
            Complex64::from_polar(s.sqrt(), theta)
        })
        .collect();
    ComplexField::new(amps)
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<ComplexField>,
    pub master_seed: u64,
}

impl Ensemble {
    pub fn generate(
        sys: &WaveSystem,
        law: &AmplitudeLaw,
        master_seed: u64,
        size: usize,
    ) -> Result<Self, EnsembleError> {
        law.validate(sys.len())?;
        let members = (0..size as u64)
            .into_par_iter()
            .map(|i| sample_field(law, &mut member_rng(master_seed, i, 0)))
            .collect();
        Ok(Self {
            members,
            master_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Integrate every member to `t_end`.
    pub fn evolve(&self, sys: &WaveSystem, t_end: f64, dt: f64) -> Result<Self, EnsembleError> {
        let mut members = self.members.clone();
        members.par_chunks_mut(LOCKSTEP_CHUNK).try_for_each_init(
            || Rk4::new(sys.len()),
            |rk, chunk| rk.advance_many(sys, chunk, t_end, dt),
        )?;
        Ok(Self {
            members,
            master_seed: self.master_seed,
        })
    }

    pub fn intensities(&self, l: usize) -> Vec<f64> {
        self.members.iter().map(|f| f.intensity(l)).collect()
    }
}

/// Mean intensity per mode.
pub fn spectrum(ens: &Ensemble) -> Vec<Estimate> {
    let n = ens.members.first().map_or(0, |f| f.len());
    (0..n).map(|l| mean_estimate(&ens.intensities(l))).collect()
}

/// Complex mean with a standard error for the modulus scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexEstimate {
    pub value: Complex64,
    /// `sqrt(Var(re)/R + Var(im)/R)`.
    pub stderr: f64,
    /// Members skipped because a required amplitude vanished.
    pub skipped: usize,
}

/// Empirical mean of `Π ψ_l^{μ_l}`.
pub fn psi_monomial_mean(ens: &Ensemble, monomial: &PhaseMonomial) -> ComplexEstimate {
    if monomial.is_empty() {
        return ComplexEstimate {
            value: Complex64::new(1.0, 0.0),
            stderr: 0.0,
            skipped: 0,
        };
    }
    let mut re = Vec::with_capacity(ens.len());
    let mut im = Vec::with_capacity(ens.len());
    let mut skipped = 0;
    'members: for f in &ens.members {
        let mut prod = Complex64::new(1.0, 0.0);
        for (&l, &p) in monomial.iter() {
            let Some(psi) = f.phase_factor(l) else {
                skipped += 1;
                continue 'members;
            };
            prod *= psi.powi(p);
        }
        re.push(prod.re);
        im.push(prod.im);
    }
    let (r, i) = (mean_estimate(&re), mean_estimate(&im));
    ComplexEstimate {
        value: Complex64::new(r.value, i.value),
        stderr: (r.stderr * r.stderr + i.stderr * i.stderr).sqrt(),
        skipped,
    }
}

/// `⟨A_j²A_k²⟩ − ⟨A_j²⟩⟨A_k²⟩` with a jackknife error.
pub fn intensity_cumulant(ens: &Ensemble, j: usize, k: usize) -> Estimate {
    let sj = ens.intensities(j);
    let sk = ens.intensities(k);
    let prod: Vec<f64> = sj.iter().zip(&sk).map(|(a, b)| a * b).collect();
    jackknife(&[&sj, &sk, &prod], |m| m[2] - m[0] * m[1])
}

/// Uniform histogram bins on `[0, s_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub s_max: f64,
    pub bins: usize,
}

/// Normalized histogram of `s_j`. Samples beyond `s_max` land in the last bin.
pub fn one_mode_histogram(
    ens: &Ensemble,
    j: usize,
    spec: BinSpec,
) -> Result<AmplitudePdf, EnsembleError> {
    if ens.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if !(spec.s_max > 0.0 && spec.bins > 0) {
        return Err(EnsembleError::Bins);
    }
    let mut counts = vec![0u64; spec.bins];
    let h = spec.s_max / spec.bins as f64;
    for s in ens.intensities(j) {
        let b = ((s / h) as usize).min(spec.bins - 1);
        counts[b] += 1;
    }
    let r = ens.len() as f64;
    let density = counts.iter().map(|&c| c as f64 / (r * h)).collect();
    let mut pdf = AmplitudePdf::zeros(spec.s_max, spec.bins, j);
    pdf.density = density;
    pdf.time = ens.members[0].time;
    Ok(pdf)
}

/// Empirical `⟨e^{λ A_j²}⟩` for `λ <= 0`.
pub fn generating_fn_a(ens: &Ensemble, j: usize, lambda: f64) -> Result<Estimate, EnsembleError> {
    if lambda > 0.0 || lambda.is_nan() {
        return Err(EnsembleError::PositiveLambda(lambda));
    }
    if ens.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if lambda == 0.0 {
        return Ok(Estimate::exact(1.0));
    }
    let xs: Vec<f64> = ens
        .members
        .iter()
        .map(|f| (lambda * f.intensity(j)).exp())
        .collect();
    Ok(mean_estimate(&xs))
}

/// Unwrapped phases of one trajectory at snapshot times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrack {
    pub times: Vec<f64>,
    /// `phases[snapshot][mode]`.
    pub phases: Vec<Vec<f64>>,
    /// Final field, kept so the track can be continued.
    pub field: ComplexField,
}

impl PhaseTrack {
    pub fn at(&self, snapshot: usize, mode: usize) -> f64 {
        self.phases[snapshot][mode]
    }
}

/// Integrate `field` and record continuously unwrapped phases at each of
/// `snapshots` (ascending, not before `field.time`). Modes listed in `skip`
/// are not tracked; their phase stays at zero.
pub fn track_phases(
    sys: &WaveSystem,
    field: &ComplexField,
    snapshots: &[f64],
    dt: f64,
    skip: &[usize],
) -> Result<PhaseTrack, EnsembleError> {
    let n = field.len();
    let tracked: Vec<usize> = (0..n).filter(|l| !skip.contains(l)).collect();
    let mut phase = vec![0.0; n];
    for &l in &tracked {
        if field.amps[l] == Complex64::new(0.0, 0.0) {
            return Err(EnsembleError::ZeroAmplitude(l));
        }
        phase[l] = field.amps[l].arg();
    }
    let mut f = field.clone();
    let mut rk = Rk4::new(n);
    let mut times = Vec::with_capacity(snapshots.len());
    let mut phases = Vec::with_capacity(snapshots.len());
    let mut prev = f.amps.clone();
    for &target in snapshots {
        let span = target - f.time;
        if span < 0.0 {
            return Err(DynamicsError::Backwards {
                start: f.time,
                end: target,
            }
            .into());
        }
        if span > 0.0 {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(DynamicsError::Step(dt).into());
            }
            let steps = crate::dynamics::step_count(span, dt);
            let h = span / steps as f64;
            let start = f.time;
            for s in 0..steps {
                rk.step(sys, &mut f, h);
                f.time = start + (s + 1) as f64 * h;
                for &l in &tracked {
                    let a = f.amps[l];
                    if !(a.re.is_finite() && a.im.is_finite()) {
                        return Err(DynamicsError::NonFinite {
                            step: s + 1,
                            mode: l,
                        }
                        .into());
                    }
                    if a == Complex64::new(0.0, 0.0) {
                        return Err(EnsembleError::ZeroAmplitude(l));
                    }
                    let inc = (a * prev[l].conj()).arg();
                    if inc.abs() > MAX_UNWRAP_STEP {
                        return Err(EnsembleError::Unwrap {
                            mode: l,
                            increment: inc,
                        });
                    }
                    phase[l] += inc;
                }
                prev.copy_from_slice(&f.amps);
            }
            f.time = target;
        }
        times.push(target);
        phases.push(phase.clone());
    }
    Ok(PhaseTrack {
        times,
        phases,
        field: f,
    })
}

/// Track phases for every member of an ensemble.
pub fn track_ensemble(
    sys: &WaveSystem,
    ens: &Ensemble,
    snapshots: &[f64],
    dt: f64,
    skip: &[usize],
) -> Result<Vec<PhaseTrack>, EnsembleError> {
    ens.members
        .par_iter()
        .map(|f| track_phases(sys, f, snapshots, dt, skip))
        .collect()
}

/// `⟨(φ_j − ⟨φ_j⟩)(φ_k − ⟨φ_k⟩)⟩` at one snapshot.
pub fn phase_pair_correlator(
    tracks: &[PhaseTrack],
    snapshot: usize,
    j: usize,
    k: usize,
) -> Result<Estimate, EnsembleError> {
    if tracks.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if tracks.iter().any(|t| snapshot >= t.phases.len()) {
        return Err(EnsembleError::Snapshot(snapshot));
    }
    let pj: Vec<f64> = tracks.iter().map(|t| t.at(snapshot, j)).collect();
    let pk: Vec<f64> = tracks.iter().map(|t| t.at(snapshot, k)).collect();
    let prod: Vec<f64> = pj.iter().zip(&pk).map(|(a, b)| a * b).collect();
    Ok(jackknife(&[&pj, &pk, &prod], |m| m[2] - m[0] * m[1]))
}

/// Summary statistics of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub members: usize,
    pub time: f64,
    pub spectrum: Vec<Estimate>,
    pub monomials: Vec<(PhaseMonomial, ComplexEstimate)>,
    pub cumulants: Vec<((usize, usize), Estimate)>,
    /// Circular mean phase and circular variance `1 - |⟨ψ⟩|` per mode.
    pub phase_mean: Vec<f64>,
    pub phase_circular_variance: Vec<f64>,
}

impl EnsembleStats {
    pub fn collect(
        ens: &Ensemble,
        monomials: &[PhaseMonomial],
        pairs: &[(usize, usize)],
    ) -> Result<Self, EnsembleError> {
        if ens.is_empty() {
            return Err(EnsembleError::Empty);
        }
        let n = ens.members[0].len();
        let mut phase_mean = Vec::with_capacity(n);
        let mut phase_circular_variance = Vec::with_capacity(n);
        for l in 0..n {
            let (mut re, mut im) = (CompensatedSum::default(), CompensatedSum::default());
            let mut count = 0usize;
            for f in &ens.members {
                if let Some(p) = f.phase_factor(l) {
                    re.add(p.re);
                    im.add(p.im);
                    count += 1;
                }
            }
            let c = Complex64::new(re.value(), im.value()) / count.max(1) as f64;
            phase_mean.push(c.arg());
            phase_circular_variance.push(1.0 - c.norm());
        }
        Ok(Self {
            members: ens.len(),
            time: ens.members[0].time,
            spectrum: spectrum(ens),
            monomials: monomials
                .iter()
                .map(|m| (m.clone(), psi_monomial_mean(ens, m)))
                .collect(),
            cumulants: pairs
                .iter()
                .map(|&(j, k)| ((j, k), intensity_cumulant(ens, j, k)))
                .collect(),
            phase_mean,
            phase_circular_variance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wave_system::{Coupling, Dispersion, ModeGrid};
    use proptest::prelude::*;

    fn system(b: i64) -> WaveSystem {
        let grid = ModeGrid::new(1, 2.0 * PI, b).unwrap();
        WaveSystem::new(
            grid,
            Dispersion::power_law(1.5, 1.0),
            Coupling::constant(1.0),
            0.05,
        )
        .unwrap()
    }

    fn exp_law(n: usize, mean: f64) -> AmplitudeLaw {
        AmplitudeLaw::ExponentialIntensity {
            means: vec![mean; n],
        }
    }

    #[test]
    fn deterministic_law_has_unit_modulus() {
        let sys = system(3);
        let law = AmplitudeLaw::Deterministic {
            amplitudes: vec![1.0; sys.len()],
        };
        let ens = Ensemble::generate(&sys, &law, 7, 200).unwrap();
        for f in &ens.members {
            for a in &f.amps {
                assert!((a.norm() - 1.0).abs() < 1e-15);
            }
        }
        let mono = PhaseMonomial::from_pairs([(2, 1)]);
        let m = psi_monomial_mean(&ens, &mono);
        assert!(m.value.norm() < 4.0 * m.stderr);
    }

    #[test]
    fn exponential_mean_and_variance() {
        let sys = system(1);
        let ens = Ensemble::generate(&sys, &exp_law(3, 2.0), 11, 100_000).unwrap();
        let n = spectrum(&ens)[0];
        assert!((n.value - 2.0).abs() < 0.02, "{n:?}");
        assert!(n.z_score(2.0) < 3.0);
        let var = intensity_cumulant(&ens, 1, 1);
        assert!(var.z_score(4.0) < 3.0, "{var:?}");
        let cross = intensity_cumulant(&ens, 0, 2);
        assert!(cross.z_score(0.0) < 3.0, "{cross:?}");
    }

    #[test]
    fn members_are_reproducible() {
        let sys = system(2);
        let a = Ensemble::generate(&sys, &exp_law(5, 1.0), 3, 64).unwrap();
        let b = Ensemble::generate(&sys, &exp_law(5, 1.0), 3, 64).unwrap();
        assert_eq!(a.members, b.members);
        let single = sample_field(&exp_law(5, 1.0), &mut member_rng(3, 17, 0));
        assert_eq!(single, a.members[17]);
        let other = Ensemble::generate(&sys, &exp_law(5, 1.0), 4, 64).unwrap();
        assert_ne!(a.members[0], other.members[0]);
    }

    #[test]
    fn monomial_means() {
        let sys = system(2);
        let ens = Ensemble::generate(&sys, &exp_law(5, 1.0), 5, 10_000).unwrap();
        let one = psi_monomial_mean(&ens, &PhaseMonomial::default());
        assert_eq!(one.value, Complex64::new(1.0, 0.0));
        assert_eq!(one.stderr, 0.0);
        let single = psi_monomial_mean(&ens, &PhaseMonomial::from_pairs([(1, 1)]));
        assert!(single.value.norm() < 3.0 * single.stderr);
        let pair = psi_monomial_mean(&ens, &PhaseMonomial::from_pairs([(1, 1), (3, -1)]));
        assert!(pair.value.norm() < 3.0 * pair.stderr);
        let cancel = psi_monomial_mean(&ens, &PhaseMonomial::from_pairs([(1, 1), (1, -1)]));
        assert_eq!(cancel.value, Complex64::new(1.0, 0.0));
    }

    #[test]
    fn zero_amplitude_members_are_skipped() {
        let sys = system(1);
        let law = AmplitudeLaw::Deterministic {
            amplitudes: vec![1.0, 0.0, 1.0],
        };
        let ens = Ensemble::generate(&sys, &law, 1, 10).unwrap();
        let m = psi_monomial_mean(&ens, &PhaseMonomial::from_pairs([(1, 1)]));
        assert_eq!(m.skipped, 10);
    }

    #[test]
    fn histogram_matches_exponential() {
        let sys = system(1);
        let r = 100_000;
        let ens = Ensemble::generate(&sys, &exp_law(3, 1.0), 2, r).unwrap();
        let pdf = one_mode_histogram(
            &ens,
            0,
            BinSpec {
                s_max: 20.0,
                bins: 400,
            },
        )
        .unwrap();
        assert!((pdf.mass() - 1.0).abs() < 1e-12);
        // Kolmogorov–Smirnov distance from the raw samples
        let mut s = ens.intensities(0);
        s.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, x) in s.iter().enumerate() {
            let cdf = 1.0 - (-x).exp();
            d = d
                .max((cdf - i as f64 / r as f64).abs())
                .max(((i + 1) as f64 / r as f64 - cdf).abs());
        }
        assert!(d < 1.63 / (r as f64).sqrt(), "KS {d}");

        let law = AmplitudeLaw::Deterministic {
            amplitudes: vec![0.9; 3],
        };
        let ens = Ensemble::generate(&sys, &law, 2, 100).unwrap();
        let pdf = one_mode_histogram(
            &ens,
            0,
            BinSpec {
                s_max: 4.0,
                bins: 8,
            },
        )
        .unwrap();
        assert_eq!(pdf.density.iter().filter(|p| **p > 0.0).count(), 1);
        assert!(one_mode_histogram(
            &Ensemble {
                members: vec![],
                master_seed: 0
            },
            0,
            BinSpec {
                s_max: 1.0,
                bins: 2
            }
        )
        .is_err());
    }

    #[test]
    fn generating_function() {
        let sys = system(1);
        let ens = Ensemble::generate(&sys, &exp_law(3, 1.0), 8, 100_000).unwrap();
        assert_eq!(generating_fn_a(&ens, 0, 0.0).unwrap(), Estimate::exact(1.0));
        let z = generating_fn_a(&ens, 0, -1.0).unwrap();
        assert!(z.z_score(0.5) < 3.0, "{z:?}");
        assert!(matches!(
            generating_fn_a(&ens, 0, 0.1),
            Err(EnsembleError::PositiveLambda(_))
        ));
        let mut last = 1.0;
        for lam in [-0.1, -0.5, -1.0, -3.0] {
            let v = generating_fn_a(&ens, 0, lam).unwrap().value;
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn tabulated_law_inverts_table() {
        let law = AmplitudeLaw::Tabulated {
            tables: vec![vec![(0.0, 0.0), (0.5, 1.0), (1.0, 3.0)]],
        };
        law.validate(1).unwrap();
        assert_eq!(law.intensity(0, 0.25), 0.5);
        assert_eq!(law.intensity(0, 0.75), 2.0);
        assert!((law.mean_intensity(0) - 1.25).abs() < 1e-15);
        let bad = AmplitudeLaw::Tabulated {
            tables: vec![vec![(0.0, 1.0), (1.0, 0.5)]],
        };
        assert!(bad.validate(1).is_err());
        assert!(exp_law(2, 1.0).validate(3).is_err());
    }

    #[test]
    fn phases_frozen_without_coupling() {
        let sys = system(3).with_epsilon(0.0);
        let f = sample_field(&exp_law(sys.len(), 1.0), &mut member_rng(1, 0, 0));
        let z = sys.grid().zero();
        let tr = track_phases(&sys, &f, &[0.0, 5.0, 10.0], 0.1, &[z]).unwrap();
        for l in (0..sys.len()).filter(|l| *l != z) {
            assert_eq!(tr.at(0, l), tr.at(2, l));
            let psi = f.phase_factor(l).unwrap();
            assert!((Complex64::from_polar(1.0, tr.at(2, l)) - psi).norm() < 1e-10);
        }
    }

    #[test]
    fn phases_unwrap_continuously() {
        let sys = system(3).with_epsilon(0.05);
        let f = sample_field(&exp_law(sys.len(), 1.0), &mut member_rng(9, 0, 0));
        let z = sys.grid().zero();
        let snaps: Vec<f64> = (0..=20).map(|i| i as f64).collect();
        let tr = track_phases(&sys, &f, &snaps, 0.01, &[z]).unwrap();
        for (s, t) in tr.times.iter().enumerate() {
            let at = crate::dynamics::integrate(&sys, &f, *t, 0.01).unwrap();
            for l in (0..sys.len()).filter(|l| *l != z) {
                let psi = at.phase_factor(l).unwrap();
                assert!((Complex64::from_polar(1.0, tr.at(s, l)) - psi).norm() < 1e-10);
            }
        }
        assert!(matches!(
            track_phases(&sys, &f, &[0.0, 20.0], 20.0, &[z]),
            Err(EnsembleError::Unwrap { .. })
        ));
    }

    #[test]
    fn single_rotation_advances_phase() {
        // one mode, no triads: rotate by hand and unwrap through the same rule
        let a = Complex64::from_polar(1.0, 3.0);
        let b = a * Complex64::from_polar(1.0, 0.3);
        assert!(((b * a.conj()).arg() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn fresh_phase_correlator() {
        let sys = system(2);
        let ens = Ensemble::generate(&sys, &exp_law(5, 1.0), 21, 20_000).unwrap();
        let z = sys.grid().zero();
        let tracks = track_ensemble(&sys, &ens, &[0.0], 0.1, &[z]).unwrap();
        let cross = phase_pair_correlator(&tracks, 0, 1, 3).unwrap();
        assert!(cross.z_score(0.0) < 3.0, "{cross:?}");
        let var = phase_pair_correlator(&tracks, 0, 1, 1).unwrap();
        assert!(var.z_score(PI * PI / 3.0) < 3.0, "{var:?}");
        assert!(phase_pair_correlator(&tracks, 1, 1, 1).is_err());
    }

    #[test]
    fn stats_are_permutation_insensitive() {
        let sys = system(2);
        let ens = Ensemble::generate(&sys, &exp_law(5, 1.0), 4, 5000).unwrap();
        let mut shuffled = ens.clone();
        shuffled.members.reverse();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.members.swap(i, (i * 7919) % n);
        }
        let monos = vec![PhaseMonomial::from_pairs([(1, 1), (3, 1), (4, -1)])];
        let a = EnsembleStats::collect(&ens, &monos, &[(1, 3), (4, 4)]).unwrap();
        let b = EnsembleStats::collect(&shuffled, &monos, &[(1, 3), (4, 4)]).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-300);
        for (x, y) in a.spectrum.iter().zip(&b.spectrum) {
            assert!(close(x.value, y.value) && close(x.stderr, y.stderr));
        }
        for (x, y) in a.cumulants.iter().zip(&b.cumulants) {
            assert!(close(x.1.value, y.1.value) && close(x.1.stderr, y.1.stderr));
        }
        let (ma, mb) = (a.monomials[0].1, b.monomials[0].1);
        assert!(close(ma.value.re, mb.value.re) && close(ma.value.im, mb.value.im));
        assert!(close(ma.stderr, mb.stderr));
    }

    proptest! {
        #[test]
        fn sampled_intensities_are_nonnegative(seed in 0u64..500, mean in 0.0f64..5.0) {
            let law = exp_law(4, mean);
            let f = sample_field(&law, &mut member_rng(seed, 0, 0));
            prop_assert!(f.amps.iter().all(|a| a.norm_sqr() >= 0.0 && a.norm().is_finite()));
        }
    }
}
