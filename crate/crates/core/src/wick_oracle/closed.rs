use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::terms::{Expr, OracleError, Setup};
use super::PhaseMonomial;
use crate::dynamics::{delta_kernel, e_kernel};
use crate::wave_system::{Triad, WaveSystem};

const I: Complex64 = Complex64::new(0.0, 1.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Which analytic answer to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Variant {
    /// Leading terms plus every finite-N correction, an identity at fixed A.
    #[default]
    Exact,
    /// Leading zero-valent terms only; self triads are counted like generic ones.
    Leading,
}

/// One monomial of `a¹_j` seen as an external leg: `coef · amp · ψ^phase`.
#[derive(Debug, Clone, PartialEq)]
pub struct Leg {
    pub coef: Complex64,
    pub amp: f64,
    pub phase: PhaseMonomial,
}

/// Legs of `a¹_j(T)` read off the triad table.
pub fn legs(sys: &WaveSystem, amps: &[f64], j: usize, t: f64) -> Vec<Leg> {
    let tab = sys.triads();
    let merge = tab.with_sum(j).map(|tr| Leg {
        coef: -I * tr.coupling * delta_kernel(tr.detuning, t),
        amp: amps[tr.left] * amps[tr.right],
        phase: PhaseMonomial::from_pairs([(tr.left, 1), (tr.right, 1)]),
    });
    let split = tab.with_left(j).map(|tr| Leg {
        coef: -2.0 * I * tr.coupling.conj() * delta_kernel(tr.detuning, t).conj(),
        amp: amps[tr.sum] * amps[tr.right],
        phase: PhaseMonomial::from_pairs([(tr.sum, 1), (tr.right, -1)]),
    });
    merge.chain(split).collect()
}

fn triad(sys: &WaveSystem, sum: usize, left: usize) -> Option<&Triad> {
    sys.triads().with_sum(sum).find(|t| t.left == left)
}

fn is_zero_pattern(mu: &[i32]) -> bool {
    mu.iter().all(|&m| m == 0)
}

fn pattern(mu: &[i32]) -> PhaseMonomial {
    PhaseMonomial::from_pairs(mu.iter().enumerate().map(|(l, &p)| (l, p)))
}

/// Analytic value of `expr`. `J1` and `J4` are available for every `μ`; the
/// others only at `μ ≡ 0`.
pub fn j_closed_form(
    expr: Expr,
    setup: &Setup<'_>,
    variant: Variant,
) -> Result<Complex64, OracleError> {
    let zero_mu = is_zero_pattern(setup.mu);
    match expr {
        Expr::J1 => Ok(j1(setup)),
        Expr::J4 => Ok(j4(setup)),
        _ if !zero_mu => Err(OracleError::NoClosedForm(expr)),
        Expr::J2 => Ok(j2(setup, variant)),
        Expr::J3 => Ok(j3(setup, variant)),
        Expr::J5 => Ok(j5(setup, variant)),
    }
}

/// Merge legs of `j = m + n` pin `μ = e_j − e_m − e_n`; split legs of `m`
/// with `j = m + n` pin the negated pattern.
fn j1(s: &Setup<'_>) -> Complex64 {
    let target = pattern(s.mu);
    let amps = s.amps;
    let mut acc = ZERO;
    for t in s.sys.triads().iter() {
        let d = delta_kernel(t.detuning, s.t);
        let a3 = amps[t.sum] * amps[t.left] * amps[t.right];
        let merge = PhaseMonomial::from_pairs([(t.sum, 1), (t.left, -1), (t.right, -1)]);
        if merge == target {
            acc += s.w1(t.sum) * (-I) * t.coupling * d * a3;
        }
        if merge.negate() == target {
            acc += s.w1(t.left) * (-2.0 * I) * t.coupling.conj() * d.conj() * a3;
        }
    }
    acc
}

/// `Σ_j w4_j A_j² Σ_{X,X'} c_X c_X' A_X A_X' δ(μ + X + X' − 2e_j)`.
fn j4(s: &Setup<'_>) -> Complex64 {
    let target = pattern(s.mu).negate();
    let mut acc = ZERO;
    for j in 0..s.sys.len() {
        let two_j = PhaseMonomial::from_pairs([(j, 2)]);
        let lg = legs(s.sys, s.amps, j, s.t);
        let mut inner = ZERO;
        for x in &lg {
            for y in &lg {
                if x.phase.product(&y.phase).product(&two_j.negate()) == target {
                    inner += x.coef * y.coef * x.amp * y.amp;
                }
            }
        }
        acc += s.w4(j) * s.amps[j].powi(2) * inner;
    }
    acc
}

fn j2(s: &Setup<'_>, variant: Variant) -> Complex64 {
    let a2 = |l: usize| s.amps[l].powi(2);
    let self_weight = match variant {
        Variant::Exact => 0.5,
        Variant::Leading => 1.0,
    };
    let mut acc = ZERO;
    for j in 0..s.sys.len() {
        let mut inner = 0.0;
        for t in s.sys.triads().with_sum(j) {
            let k = t.coupling.norm_sqr()
                * delta_kernel(t.detuning, s.t).norm_sqr()
                * a2(t.left)
                * a2(t.right);
            inner += if t.left == t.right {
                self_weight * k
            } else {
                k
            };
        }
        for t in s.sys.triads().with_left(j) {
            inner += 2.0
                * t.coupling.norm_sqr()
                * delta_kernel(t.detuning, s.t).norm_sqr()
                * a2(t.sum)
                * a2(t.right);
        }
        acc += s.w2(j) * inner;
    }
    acc
}

fn j3(s: &Setup<'_>, variant: Variant) -> Complex64 {
    let a2 = |l: usize| s.amps[l].powi(2);
    let mut acc = ZERO;
    for j in 0..s.sys.len() {
        let mut inner = ZERO;
        for t in s.sys.triads().with_sum(j) {
            inner -=
                4.0 * t.coupling.norm_sqr() * a2(t.right) * a2(j) * e_kernel(0.0, t.detuning, s.t);
        }
        for t in s.sys.triads().with_left(j) {
            inner += 4.0
                * t.coupling.norm_sqr()
                * (a2(t.sum) - a2(t.right))
                * a2(j)
                * e_kernel(0.0, -t.detuning, s.t);
        }
        if variant == Variant::Exact {
            if let Some(t) = s.sys.grid().add(j, j).and_then(|d| triad(s.sys, d, j)) {
                inner +=
                    2.0 * t.coupling.norm_sqr() * a2(j) * a2(j) * e_kernel(0.0, -t.detuning, s.t);
            }
        }
        acc += s.lambda[j] * inner;
    }
    acc
}

fn j5(s: &Setup<'_>, variant: Variant) -> Complex64 {
    let a2 = |l: usize| s.amps[l].powi(2);
    let grid = s.sys.grid();
    // |V^j_{kn}Δ|² A_j² A_k² A_n² with n = j − k
    let down = |j: usize, k: usize| -> f64 {
        grid.sub(j, k)
            .and_then(|n| triad(s.sys, j, k).map(|t| (n, t)))
            .map_or(0.0, |(n, t)| {
                let c = match variant {
                    Variant::Exact if n == k => 1.0,
                    _ => 2.0,
                };
                c * t.coupling.norm_sqr()
                    * delta_kernel(t.detuning, s.t).norm_sqr()
                    * a2(j)
                    * a2(k)
                    * a2(n)
            })
    };
    let up = |j: usize, k: usize| -> f64 {
        grid.add(j, k)
            .and_then(|n| triad(s.sys, n, j).map(|t| (n, t)))
            .map_or(0.0, |(n, t)| {
                t.coupling.norm_sqr()
                    * delta_kernel(t.detuning, s.t).norm_sqr()
                    * a2(n)
                    * a2(j)
                    * a2(k)
            })
    };
    let mut acc = ZERO;
    for j in 0..s.sys.len() {
        for k in (0..s.sys.len()).filter(|&k| k != j) {
            acc += 0.5
                * s.lambda[j]
                * s.lambda[k]
                * (-2.0 * down(j, k) - 2.0 * down(k, j) + 4.0 * up(j, k));
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::super::terms::{average_streaming, average_term_sum, generate_terms, TERM_CEILING};
    use super::*;
    use crate::wave_system::{Coupling, Dispersion, ModeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn system(b: i64, coupling: Coupling) -> WaveSystem {
        let grid = ModeGrid::new(1, 2.0 * PI, b).unwrap();
        WaveSystem::new(grid, Dispersion::power_law(1.5, 1.0), coupling, 0.1).unwrap()
    }

    fn complex_coupling() -> Coupling {
        Coupling::new("test", vec![], |k, k1, k2| {
            Complex64::new(
                0.3 + 0.1 * k[0] + 0.05 * k1[0] * k2[0],
                0.2 * (k1[0] - k2[0]).abs() + 0.1,
            )
        })
    }

    struct Point {
        amps: Vec<f64>,
        lambda: Vec<Complex64>,
    }

    fn point(n: usize, seed: u64) -> Point {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Point {
            amps: (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
            lambda: (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..0.5), 0.0))
                .collect(),
        }
    }

    fn rel(a: Complex64, b: Complex64) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
    }

    #[test]
    fn zero_mu_closed_forms_match_brute_force() {
        for b in [2, 3] {
            let sys = system(b, complex_coupling());
            let p = point(sys.len(), 7 + b as u64);
            let mu = vec![0; sys.len()];
            let setup = Setup::new(&sys, &p.amps, &p.lambda, &mu, 1.3).unwrap();
            for expr in [Expr::J2, Expr::J3, Expr::J5] {
                let brute = average_streaming(expr, &setup).0;
                let closed = j_closed_form(expr, &setup, Variant::Exact).unwrap();
                assert!(brute.norm() > 1e-6, "{expr} vanished on B={b}");
                assert!(
                    rel(brute, closed) < 1e-12,
                    "{expr} B={b}: {brute} vs {closed}"
                );
            }
            assert_eq!(average_streaming(Expr::J4, &setup), (ZERO, 0));
            assert_eq!(
                j_closed_form(Expr::J4, &setup, Variant::Exact).unwrap(),
                ZERO
            );
        }
    }

    #[test]
    fn leading_forms_differ_only_by_self_triads() {
        let sys = system(2, complex_coupling());
        let p = point(sys.len(), 3);
        let mu = vec![0; sys.len()];
        let setup = Setup::new(&sys, &p.amps, &p.lambda, &mu, 0.9).unwrap();
        for expr in [Expr::J2, Expr::J3, Expr::J5] {
            let exact = j_closed_form(expr, &setup, Variant::Exact).unwrap();
            let lead = j_closed_form(expr, &setup, Variant::Leading).unwrap();
            assert!(rel(exact, lead) > 1e-6, "{expr}");
        }
        let free = system(
            2,
            Coupling::new("split", vec![], |_, k1, k2| {
                Complex64::new((k1[0] - k2[0]).powi(2) * 0.1, 0.0)
            }),
        );
        let setup = Setup::new(&free, &p.amps, &p.lambda, &mu, 0.9).unwrap();
        for expr in [Expr::J2, Expr::J3, Expr::J5] {
            let exact = j_closed_form(expr, &setup, Variant::Exact).unwrap();
            let lead = j_closed_form(expr, &setup, Variant::Leading).unwrap();
            assert!(rel(exact, lead) < 1e-14, "{expr}");
        }
    }

    #[test]
    fn j1_patterns_on_single_triad() {
        let sys = system(2, complex_coupling());
        let p = point(sys.len(), 11);
        let g = sys.grid();
        let idx = |k: i32| g.index([k, 0, 0]).unwrap();
        let t = 0.7;
        let cases: Vec<Vec<(usize, i32)>> = vec![
            vec![(idx(1), 1), (idx(2), -1), (idx(-1), -1)],
            vec![(idx(1), -2), (idx(2), 1)],
            vec![(idx(-1), -2), (idx(-2), 1)],
            vec![(idx(1), 2), (idx(2), -1)],
        ];
        for case in cases {
            let mut mu = vec![0; sys.len()];
            for &(l, e) in &case {
                mu[l] = e;
            }
            let setup = Setup::new(&sys, &p.amps, &p.lambda, &mu, t).unwrap();
            let brute = average_streaming(Expr::J1, &setup).0;
            let closed = j_closed_form(Expr::J1, &setup, Variant::Exact).unwrap();
            assert!(brute.norm() > 1e-6, "{case:?}");
            assert!(rel(brute, closed) < 1e-12, "{case:?}: {brute} vs {closed}");
        }
    }

    #[test]
    fn j1_self_line_value() {
        // μ = {m: −2, 2m: +1}: the merge leg of 2m from (m, m) only
        let sys = system(2, complex_coupling());
        let p = point(sys.len(), 5);
        let g = sys.grid();
        let (m, d) = (g.index([1, 0, 0]).unwrap(), g.index([2, 0, 0]).unwrap());
        let mut mu = vec![0; sys.len()];
        mu[m] = -2;
        mu[d] = 1;
        let t = 0.8;
        let setup = Setup::new(&sys, &p.amps, &p.lambda, &mu, t).unwrap();
        let tr = triad(&sys, d, m).unwrap();
        let want = setup.w1(d)
            * (-I)
            * tr.coupling
            * delta_kernel(tr.detuning, t)
            * p.amps[m].powi(2)
            * p.amps[d];
        assert!(
            rel(
                j_closed_form(Expr::J1, &setup, Variant::Exact).unwrap(),
                want
            ) < 1e-14
        );
    }

    #[test]
    fn j4_external_structure_matches_brute_force() {
        let sys = system(2, complex_coupling());
        let p = point(sys.len(), 13);
        let t = 0.6;
        let mut patterns = std::collections::BTreeSet::new();
        for j in 0..sys.len() {
            let lg = legs(&sys, &p.amps, j, t);
            for x in &lg {
                for y in &lg {
                    patterns.insert(
                        PhaseMonomial::from_pairs([(j, 2)])
                            .product(&x.phase.product(&y.phase).negate()),
                    );
                }
            }
        }
        assert!(patterns.len() > 10);
        for pat in &patterns {
            let mut mu = vec![0; sys.len()];
            for (&l, &e) in pat.iter() {
                mu[l] = e;
            }
            let setup = Setup::new(&sys, &p.amps, &p.lambda, &mu, t).unwrap();
            let brute = average_streaming(Expr::J4, &setup).0;
            let closed = j_closed_form(Expr::J4, &setup, Variant::Exact).unwrap();
            assert!(brute.norm() > 1e-8, "{pat}");
            assert!(rel(brute, closed) < 1e-12, "{pat}: {brute} vs {closed}");
        }
    }

    #[test]
    fn stored_and_streamed_averages_agree() {
        let sys = system(2, complex_coupling());
        let p = point(sys.len(), 17);
        let mu = vec![0; sys.len()];
        let setup = Setup::new(&sys, &p.amps, &p.lambda, &mu, 1.1).unwrap();
        for expr in Expr::ALL {
            let ts = generate_terms(expr, &setup, TERM_CEILING).unwrap();
            let a = average_term_sum(&ts, &mu);
            let b = average_streaming(expr, &setup).0;
            assert!((a - b).norm() <= 1e-13 * a.norm().max(1.0), "{expr}");
        }
    }
}
