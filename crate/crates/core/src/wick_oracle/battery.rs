use std::collections::BTreeSet;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::terms::{average_streaming, Expr, OracleError, Setup};
use super::PhaseMonomial;
use crate::wave_system::WaveSystem;

/// Phases `X` of the legs of `a¹_j`: `e_m + e_n` for `j = m + n`,
/// `e_m − e_n` for `m = j + n`.
fn leg_phases(sys: &WaveSystem, j: usize) -> Vec<PhaseMonomial> {
    let tab = sys.triads();
    let mut out: Vec<PhaseMonomial> = tab
        .with_sum(j)
        .map(|t| PhaseMonomial::from_pairs([(t.left, 1), (t.right, 1)]))
        .chain(
            tab.with_left(j)
                .map(|t| PhaseMonomial::from_pairs([(t.sum, 1), (t.right, -1)])),
        )
        .collect();
    out.sort();
    out.dedup();
    out
}

fn e(l: usize, p: i32) -> PhaseMonomial {
    PhaseMonomial::from_pairs([(l, p)])
}

/// Phases of the legs of `a²_j`: each leg of `a¹_j` with one of its factors
/// replaced by that factor's own legs.
fn second_leg_phases(
    sys: &WaveSystem,
    j: usize,
    first: &[Vec<PhaseMonomial>],
) -> Vec<PhaseMonomial> {
    let tab = sys.triads();
    let outer: Vec<[(usize, i32); 2]> = tab
        .with_sum(j)
        .map(|t| [(t.left, 1), (t.right, 1)])
        .chain(tab.with_left(j).map(|t| [(t.sum, 1), (t.right, -1)]))
        .collect();
    let mut out = Vec::new();
    for factors in outer {
        for slot in 0..2 {
            let (kept, kp) = factors[1 - slot];
            let (swapped, sp) = factors[slot];
            for x in &first[swapped] {
                let x = if sp > 0 { x.clone() } else { x.negate() };
                out.push(e(kept, kp).product(&x));
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// External patterns `μ` for which `⟨Πψ^μ · expr⟩` can be nonzero, built
/// from leg phases alone.
pub fn predicted_patterns(expr: Expr, sys: &WaveSystem) -> BTreeSet<PhaseMonomial> {
    let n = sys.len();
    let first: Vec<Vec<PhaseMonomial>> = (0..n).map(|j| leg_phases(sys, j)).collect();
    let mut out = BTreeSet::new();
    for j in 0..n {
        match expr {
            Expr::J1 => {
                for x in &first[j] {
                    out.insert(e(j, 1).product(&x.negate()));
                }
            }
            Expr::J2 => {
                for x in &first[j] {
                    for y in &first[j] {
                        out.insert(y.product(&x.negate()));
                    }
                }
            }
            Expr::J3 => {
                for x in second_leg_phases(sys, j, &first) {
                    out.insert(e(j, 1).product(&x.negate()));
                }
            }
            Expr::J4 => {
                for x in &first[j] {
                    for y in &first[j] {
                        out.insert(e(j, 2).product(&x.product(y).negate()));
                    }
                }
            }
            Expr::J5 => {
                for k in (0..n).filter(|&k| k != j) {
                    for x in &first[j] {
                        for y in &first[k] {
                            let xj = x.product(&e(j, -1));
                            let yk = y.product(&e(k, -1));
                            out.insert(xj.product(&yk).negate());
                            out.insert(xj.negate().product(&yk).negate());
                            out.insert(xj.product(&yk.negate()).negate());
                        }
                    }
                }
            }
        }
    }
    out
}

/// Every `μ` with `|μ_l| ≤ max_abs` and at most `max_support` nonzero entries.
pub fn enumerate_patterns(modes: usize, max_abs: i32, max_support: usize) -> Vec<Vec<i32>> {
    let values: Vec<i32> = (-max_abs..=max_abs).filter(|&v| v != 0).collect();
    let mut out = vec![vec![0; modes]];
    fn rec(start: usize, left: usize, cur: &mut Vec<i32>, values: &[i32], out: &mut Vec<Vec<i32>>) {
        if left == 0 {
            return;
        }
        for l in start..cur.len() {
            for &v in values {
                cur[l] = v;
                out.push(cur.clone());
                rec(l + 1, left - 1, cur, values, out);
            }
            cur[l] = 0;
        }
    }
    let mut cur = vec![0; modes];
    rec(0, max_support, &mut cur, &values, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryRow {
    pub expr: Expr,
    pub patterns: usize,
    pub predicted: usize,
    /// Patterns with at least one surviving term.
    pub surviving: usize,
    /// Surviving patterns absent from the prediction, or nonzero averages
    /// without survivors.
    pub violations: Vec<String>,
}

impl BatteryRow {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Exhaustive `μ` battery for one expression.
pub fn delta_battery(
    expr: Expr,
    sys: &WaveSystem,
    amps: &[f64],
    lambda: &[Complex64],
    t: f64,
    patterns: &[Vec<i32>],
) -> Result<BatteryRow, OracleError> {
    let predicted = predicted_patterns(expr, sys);
    let mut surviving = 0;
    let mut violations = Vec::new();
    for mu in patterns {
        let setup = Setup::new(sys, amps, lambda, mu, t)?;
        let (avg, count) = average_streaming(expr, &setup);
        let key = PhaseMonomial::from_pairs(mu.iter().enumerate().map(|(l, &p)| (l, p)));
        if count > 0 {
            surviving += 1;
            if !predicted.contains(&key) {
                violations.push(format!("{key}: {count} survivors outside prediction"));
            }
        } else if avg != Complex64::new(0.0, 0.0) {
            violations.push(format!("{key}: nonzero average {avg} without survivors"));
        }
    }
    Ok(BatteryRow {
        expr,
        patterns: patterns.len(),
        predicted: predicted.len(),
        surviving,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wave_system::{Coupling, Dispersion, ModeGrid};
    use std::f64::consts::PI;

    fn system(b: i64) -> WaveSystem {
        let grid = ModeGrid::new(1, 2.0 * PI, b).unwrap();
        let v = Coupling::new("test", vec![], |k, k1, k2| {
            Complex64::new(0.3 + 0.1 * k[0] + 0.05 * k1[0] * k2[0], 0.1)
        });
        WaveSystem::new(grid, Dispersion::power_law(1.5, 1.0), v, 0.1).unwrap()
    }

    #[test]
    fn pattern_count_on_five_modes() {
        let p = enumerate_patterns(5, 2, 3);
        assert_eq!(p.len(), 1 + 5 * 4 + 10 * 16 + 10 * 64);
        let set: BTreeSet<_> = p.iter().cloned().collect();
        assert_eq!(set.len(), p.len());
    }

    #[test]
    fn every_expression_vanishes_off_prediction() {
        let sys = system(2);
        let n = sys.len();
        let amps: Vec<f64> = (0..n).map(|l| 0.7 + 0.13 * l as f64).collect();
        let lambda: Vec<Complex64> = (0..n)
            .map(|l| Complex64::new(-0.4 + 0.1 * l as f64, 0.0))
            .collect();
        let patterns = enumerate_patterns(n, 2, 3);
        for expr in Expr::ALL {
            let row = delta_battery(expr, &sys, &amps, &lambda, 0.9, &patterns).unwrap();
            assert!(row.passed(), "{expr}: {:?}", row.violations);
            if expr != Expr::J5 {
                assert!(row.surviving > 0, "{expr}");
            }
        }
    }

    #[test]
    fn zero_pattern_prediction() {
        let sys = system(2);
        let zero = PhaseMonomial::default();
        assert!(!predicted_patterns(Expr::J1, &sys).contains(&zero));
        assert!(!predicted_patterns(Expr::J4, &sys).contains(&zero));
        for expr in [Expr::J2, Expr::J3, Expr::J5] {
            assert!(predicted_patterns(expr, &sys).contains(&zero), "{expr}");
        }
    }
}
