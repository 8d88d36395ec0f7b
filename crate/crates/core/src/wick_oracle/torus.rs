use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::terms::{average_streaming, Expr, OracleError, Setup, Weights};
use crate::dynamics::{first_iterate, second_iterate};
use crate::wave_system::WaveSystem;

/// Roots of unity per mode; exact for the phase harmonics reached at second
/// order.
pub const TORUS_POINTS: usize = 11;
const EPS_POINTS: usize = 32;
const EPS_RADIUS: f64 = 0.05;
/// Largest grid the full tensor quadrature is run on.
pub const MAX_TORUS_MODES: usize = 6;

/// ε¹ and ε² coefficients of `Z{λ, μ, T} = ⟨Π e^{λ_l|a_l(T)|²} ψ_l(T)^{μ_l}⟩`
/// over uniform initial phases at fixed amplitudes.
///
/// Phases are integrated by a tensor product of roots of unity; the ε
/// dependence is continued holomorphically (`|a|² → a·ã` with `ã` the
/// conjugate series) and read off a Cauchy contour.
pub fn torus_coefficients(
    sys: &WaveSystem,
    amps: &[f64],
    lambda: &[f64],
    mu: &[i32],
    t: f64,
) -> Result<[Complex64; 2], OracleError> {
    let n = sys.len();
    for (what, got) in [
        ("amplitudes", amps.len()),
        ("lambda", lambda.len()),
        ("mu", mu.len()),
    ] {
        if got != n {
            return Err(OracleError::Length { what, got, want: n });
        }
    }
    let zero = sys.grid().zero();
    if n - 1 > MAX_TORUS_MODES {
        return Err(OracleError::TooManyTerms {
            ceiling: TORUS_POINTS.pow(MAX_TORUS_MODES as u32),
        });
    }
    let free: Vec<usize> = (0..n).filter(|&l| l != zero).collect();
    let total = TORUS_POINTS.pow(free.len() as u32);
    let contour: Vec<Complex64> = (0..EPS_POINTS)
        .map(|k| Complex64::from_polar(EPS_RADIUS, 2.0 * PI * k as f64 / EPS_POINTS as f64))
        .collect();
    let sums: Vec<[Complex64; 2]> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut a0 = vec![Complex64::new(amps[zero], 0.0); n];
            let mut rest = flat;
            for &l in &free {
                let theta = 2.0 * PI * (rest % TORUS_POINTS) as f64 / TORUS_POINTS as f64;
                rest /= TORUS_POINTS;
                a0[l] = Complex64::from_polar(amps[l], theta);
            }
            let a1 = first_iterate(sys, &a0, t);
            let a2 = second_iterate(sys, &a0, t);
            let mut c = [Complex64::new(0.0, 0.0); 2];
            for (k, &eps) in contour.iter().enumerate() {
                let mut f = Complex64::new(1.0, 0.0);
                for l in 0..n {
                    let a = a0[l] + eps * a1[l] + eps * eps * a2[l];
                    let at = a0[l].conj() + eps * a1[l].conj() + eps * eps * a2[l].conj();
                    let aa = a * at;
                    f *= (lambda[l] * aa).exp();
                    if mu[l] != 0 {
                        f *= (a / aa.sqrt()).powi(mu[l]);
                    }
                }
                let theta = 2.0 * PI * k as f64 / EPS_POINTS as f64;
                c[0] += f * Complex64::from_polar(1.0, -theta);
                c[1] += f * Complex64::from_polar(1.0, -2.0 * theta);
            }
            c
        })
        .collect();
    let mut out = [Complex64::new(0.0, 0.0); 2];
    for c in &sums {
        out[0] += c[0];
        out[1] += c[1];
    }
    let norm = total as f64 * EPS_POINTS as f64;
    Ok([
        out[0] / (norm * EPS_RADIUS),
        out[1] / (norm * EPS_RADIUS * EPS_RADIUS),
    ])
}

/// `Z₀ · (X{λ,μ} + X̄{λ,−μ})` from the phase-averaged J expressions, split
/// into the ε¹ and ε² parts.
pub fn conjugation_prediction(
    sys: &WaveSystem,
    amps: &[f64],
    lambda: &[f64],
    mu: &[i32],
    t: f64,
    weights: Weights,
) -> Result<[Complex64; 2], OracleError> {
    let lam: Vec<Complex64> = lambda.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let neg: Vec<i32> = mu.iter().map(|m| -m).collect();
    let plus = Setup::new(sys, amps, &lam, mu, t)?.with_weights(weights);
    let minus = Setup::new(sys, amps, &lam, &neg, t)?.with_weights(weights);
    let x = |s: &Setup<'_>, es: &[Expr]| -> Complex64 {
        es.iter().map(|&e| average_streaming(e, s).0).sum()
    };
    let z0: f64 = lambda
        .iter()
        .zip(amps)
        .map(|(l, a)| (l * a * a).exp())
        .product();
    let second = [Expr::J2, Expr::J3, Expr::J4, Expr::J5];
    Ok([
        z0 * (x(&plus, &[Expr::J1]) + x(&minus, &[Expr::J1]).conj()),
        z0 * (x(&plus, &second) + x(&minus, &second).conj()),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugationReport {
    pub mu: Vec<i32>,
    pub weights: Weights,
    pub torus: [Complex64; 2],
    pub predicted: [Complex64; 2],
    pub relative: f64,
}

/// Relative mismatch of both orders; the scale is the larger of the
/// predicted magnitudes so that vanishing orders are still tested.
pub fn conjugation_check(
    sys: &WaveSystem,
    amps: &[f64],
    lambda: &[f64],
    mu: &[i32],
    t: f64,
    weights: Weights,
) -> Result<ConjugationReport, OracleError> {
    let torus = torus_coefficients(sys, amps, lambda, mu, t)?;
    let predicted = conjugation_prediction(sys, amps, lambda, mu, t, weights)?;
    let scale = predicted[0]
        .norm()
        .max(predicted[1].norm())
        .max(f64::MIN_POSITIVE);
    let relative = (0..2)
        .map(|k| (torus[k] - predicted[k]).norm())
        .fold(0.0, f64::max)
        / scale;
    Ok(ConjugationReport {
        mu: mu.to_vec(),
        weights,
        torus,
        predicted,
        relative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wave_system::{Coupling, Dispersion, ModeGrid};

    fn system() -> WaveSystem {
        let grid = ModeGrid::new(1, 2.0 * PI, 2).unwrap();
        let v = Coupling::new("g", vec![], |k, k1, k2| {
            Complex64::new(
                0.3 + 0.1 * k[0] + 0.05 * k1[0] * k2[0],
                0.2 * (k1[0] - k2[0]).abs() + 0.1,
            )
        });
        WaveSystem::new(grid, Dispersion::power_law(1.5, 1.0), v, 0.1).unwrap()
    }

    #[test]
    fn expansion_reproduces_quadrature_at_and_away_from_zero_mu() {
        let sys = system();
        let g = sys.grid();
        let idx = |k: i32| g.index([k, 0, 0]).unwrap();
        let amps = vec![0.9, 1.2, 1.0, 0.7, 1.1];
        let lambda = vec![-0.3, 0.2, 0.0, -0.5, 0.1];
        let mut patterns = vec![vec![0; 5]];
        let mut m = vec![0; 5];
        m[idx(2)] = 1;
        m[idx(1)] = -2;
        patterns.push(m);
        for expr in [Expr::J2, Expr::J3, Expr::J4, Expr::J5] {
            let pat = super::super::predicted_patterns(expr, &sys)
                .into_iter()
                .find(|p| !p.is_empty() && p.iter().all(|(_, e)| e.abs() <= 2))
                .unwrap();
            let mut m = vec![0; 5];
            for (&l, &e) in pat.iter() {
                m[l] = e;
            }
            patterns.push(m);
        }
        let mut literal_misses = 0;
        for mu in &patterns {
            let r = conjugation_check(&sys, &amps, &lambda, mu, 0.9, Weights::Expanded).unwrap();
            assert!(
                r.predicted[0].norm().max(r.predicted[1].norm()) > 1e-4,
                "{mu:?}"
            );
            assert!(r.relative < 1e-9, "{r:?}");
            let lit = conjugation_check(&sys, &amps, &lambda, mu, 0.9, Weights::Literal).unwrap();
            if mu.iter().all(|&m| m == 0) {
                assert!(lit.relative < 1e-9, "{lit:?}");
            } else if lit.relative > 1e-6 {
                literal_misses += 1;
            }
        }
        assert!(literal_misses > 0);
    }

    #[test]
    fn conjugating_at_plus_mu_instead_fails() {
        let sys = system();
        let g = sys.grid();
        let amps = vec![0.9, 1.2, 1.0, 0.7, 1.1];
        let lambda = vec![-0.3, 0.2, 0.0, -0.5, 0.1];
        let mut mu = vec![0; 5];
        mu[g.index([2, 0, 0]).unwrap()] = 1;
        mu[g.index([1, 0, 0]).unwrap()] = -2;
        let torus = torus_coefficients(&sys, &amps, &lambda, &mu, 0.9).unwrap();
        let lam: Vec<Complex64> = lambda.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let s = Setup::new(&sys, &amps, &lam, &mu, 0.9).unwrap();
        let z0: f64 = lambda
            .iter()
            .zip(&amps)
            .map(|(l, a)| (l * a * a).exp())
            .product();
        let j1 = average_streaming(Expr::J1, &s).0;
        let wrong = z0 * (j1 + j1.conj());
        assert!((torus[0] - wrong).norm() > 1e-3 * torus[0].norm());
    }
}
