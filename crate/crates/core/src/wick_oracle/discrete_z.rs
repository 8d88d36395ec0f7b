use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::terms::{average_streaming, Expr, OracleError, Setup};
use crate::dynamics::{delta_kernel, e_kernel};
use crate::wave_system::WaveSystem;

const CONTOUR_POINTS: usize = 16;

/// Mixed partial derivatives of a generating functional at a real point,
/// by trapezoidal Cauchy integrals on a polycircle.
pub struct CauchyDerivatives<F> {
    f: F,
    at: Vec<f64>,
    radius: Vec<f64>,
    points: usize,
    cache: HashMap<Vec<usize>, f64>,
}

impl<F: Fn(&[Complex64]) -> Complex64> CauchyDerivatives<F> {
    /// `radius[l]` should be comparable to the scale on which `f` varies in
    /// `λ_l`.
    pub fn new(f: F, at: &[f64], radius: Vec<f64>, points: usize) -> Self {
        Self {
            f,
            at: at.to_vec(),
            radius,
            points,
            cache: HashMap::new(),
        }
    }

    /// `∂^{|idx|} f / Π ∂λ_{idx_i}`; repeated entries give higher orders.
    pub fn d(&mut self, idx: &[usize]) -> f64 {
        let mut key = idx.to_vec();
        key.sort_unstable();
        if let Some(&v) = self.cache.get(&key) {
            return v;
        }
        let mut vars: Vec<(usize, u32)> = Vec::new();
        for &l in &key {
            match vars.last_mut() {
                Some((v, p)) if *v == l => *p += 1,
                _ => vars.push((l, 1)),
            }
        }
        let m = self.points;
        let total = m.pow(vars.len() as u32);
        let mut z: Vec<Complex64> = self.at.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut acc = Complex64::new(0.0, 0.0);
        for flat in 0..total {
            let mut rest = flat;
            let mut weight = Complex64::new(1.0, 0.0);
            for &(l, p) in &vars {
                let theta = 2.0 * PI * (rest % m) as f64 / m as f64;
                rest /= m;
                z[l] = self.at[l] + self.radius[l] * Complex64::from_polar(1.0, theta);
                weight *= Complex64::from_polar(1.0, -(p as f64) * theta);
            }
            acc += (self.f)(&z) * weight;
        }
        let scale: f64 = vars
            .iter()
            .map(|&(l, p)| (1..=p).product::<u32>() as f64 / self.radius[l].powi(p as i32))
            .product();
        let v = (acc / total as f64).re * scale;
        self.cache.insert(key, v);
        v
    }
}

/// `Π_l e^{λ_l A_l²}`, the generating functional of fixed amplitudes.
pub fn fixed_amplitude_z(amps: &[f64]) -> impl Fn(&[Complex64]) -> Complex64 + '_ {
    move |lam| {
        lam.iter()
            .zip(amps)
            .map(|(&l, &a)| (l * a * a).exp())
            .product()
    }
}

/// The second-order increment `[Z(T) − Z(0)]/ε²` written as a differential
/// operator on `Z(0)`, summed with its conjugate, at real `λ`.
///
/// With `self_triads` the degenerate triads `2j = j + j` carry their finite
/// pairing weights; without it they are counted like generic triads.
pub fn discrete_z_rhs<F: Fn(&[Complex64]) -> Complex64>(
    sys: &WaveSystem,
    lambda: &[f64],
    t: f64,
    self_triads: bool,
    d: &mut CauchyDerivatives<F>,
) -> f64 {
    let tab = sys.triads();
    let half = |same: bool| if self_triads && same { 0.5 } else { 1.0 };
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut l3 = 0.0;
    for j in 0..sys.len() {
        let lj = lambda[j];
        for tr in tab.with_sum(j) {
            let (m, n) = (tr.left, tr.right);
            let k = tr.coupling.norm_sqr() * delta_kernel(tr.detuning, t).norm_sqr();
            l1 += half(m == n) * k * (lj * d.d(&[m, n]) + lj * lj * d.d(&[j, m, n]));
            let e = tr.coupling.norm_sqr() * e_kernel(0.0, tr.detuning, t).re;
            l2 -= lj * e * d.d(&[n, j]);
            if m != j {
                l3 -= 2.0 * half(m == n) * lambda[m] * lj * k * d.d(&[j, n, m]);
            }
        }
        for tr in tab.with_left(j) {
            let (m, n) = (tr.sum, tr.right);
            let k = tr.coupling.norm_sqr() * delta_kernel(tr.detuning, t).norm_sqr();
            l1 += 2.0 * k * (lj * d.d(&[m, n]) + lj * lj * d.d(&[j, m, n]));
            let e = tr.coupling.norm_sqr() * e_kernel(0.0, -tr.detuning, t).re;
            l2 += lj * e * (d.d(&[m, j]) - d.d(&[n, j]));
            if n != j {
                l3 += lj * lambda[n] * k * d.d(&[j, m, n]);
            }
        }
        if self_triads {
            if let Some(tr) = sys
                .grid()
                .add(j, j)
                .and_then(|s| tab.with_sum(s).find(|tr| tr.left == j))
            {
                l2 += 0.5
                    * lj
                    * tr.coupling.norm_sqr()
                    * e_kernel(0.0, -tr.detuning, t).re
                    * d.d(&[j, j]);
            }
        }
    }
    2.0 * l1 + 8.0 * l2 + 4.0 * l3
}

/// `2 Re (J2 + J3 + J5)` at `μ ≡ 0` by brute-force phase averaging.
pub fn oracle_increment(
    sys: &WaveSystem,
    amps: &[f64],
    lambda: &[f64],
    t: f64,
) -> Result<f64, OracleError> {
    let lam: Vec<Complex64> = lambda.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mu = vec![0; sys.len()];
    let setup = Setup::new(sys, amps, &lam, &mu, t)?;
    Ok([Expr::J2, Expr::J3, Expr::J5]
        .iter()
        .map(|&e| 2.0 * average_streaming(e, &setup).0.re)
        .sum())
}

/// Constant, gradient and Hessian of a quadratic about `at`, exact for
/// polynomials of degree two.
fn quadratic_coefficients(
    f: &mut impl FnMut(&[f64]) -> Result<f64, OracleError>,
    at: &[f64],
) -> Result<Vec<f64>, OracleError> {
    let n = at.len();
    let shifted = |d: &[(usize, f64)]| {
        let mut x = at.to_vec();
        for &(l, h) in d {
            x[l] += h;
        }
        x
    };
    let f0 = f(at)?;
    let mut plus = vec![0.0; n];
    let mut out = vec![f0];
    for l in 0..n {
        let p = f(&shifted(&[(l, 1.0)]))?;
        let m = f(&shifted(&[(l, -1.0)]))?;
        plus[l] = p;
        out.push(0.5 * (p - m));
        out.push(p + m - 2.0 * f0);
    }
    for a in 0..n {
        for b in a + 1..n {
            out.push(f(&shifted(&[(a, 1.0), (b, 1.0)]))? - plus[a] - plus[b] + f0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub self_triads: bool,
    pub coefficients: usize,
    pub max_abs_diff: f64,
    pub scale: f64,
    pub relative: f64,
}

/// Compare the λ-polynomial coefficients of the oracle increment with those
/// of `discrete_z_rhs / Z(0)` about a real point.
pub fn generating_functional_check(
    sys: &WaveSystem,
    amps: &[f64],
    lambda: &[f64],
    t: f64,
    self_triads: bool,
) -> Result<ConsistencyReport, OracleError> {
    let z = fixed_amplitude_z(amps);
    let radius: Vec<f64> = amps.iter().map(|a| 1.0 / (a * a)).collect();
    let mut rhs = |lam: &[f64]| -> Result<f64, OracleError> {
        let mut d = CauchyDerivatives::new(&z, lam, radius.clone(), CONTOUR_POINTS);
        let z0 = d.d(&[]);
        Ok(discrete_z_rhs(sys, lam, t, self_triads, &mut d) / z0)
    };
    let mut oracle = |lam: &[f64]| oracle_increment(sys, amps, lam, t);
    let a = quadratic_coefficients(&mut rhs, lambda)?;
    let b = quadratic_coefficients(&mut oracle, lambda)?;
    let max_abs_diff = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max);
    Ok(ConsistencyReport {
        self_triads,
        coefficients: a.len(),
        max_abs_diff,
        scale,
        relative: max_abs_diff / scale.max(f64::MIN_POSITIVE),
    })
}
