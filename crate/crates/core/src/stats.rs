//! Order-insensitive reductions and error estimates.

use serde::{Deserialize, Serialize};

/// A scalar statistic with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    /// `|value - target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.value - target).abs();
        if self.stderr > 0.0 {
            d / self.stderr
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &Self) {
        self.add(other.sum);
        self.add(other.carry);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

pub fn mean(xs: &[f64]) -> f64 {
    sum(xs.iter().copied()) / xs.len() as f64
}

/// Sample mean with the standard error of the mean.
pub fn mean_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len();
    if n == 0 {
        return Estimate {
            value: f64::NAN,
            stderr: f64::NAN,
        };
    }
    let m = mean(xs);
    if n == 1 {
        return Estimate {
            value: m,
            stderr: f64::NAN,
        };
    }
    let var = sum(xs.iter().map(|x| (x - m) * (x - m))) / (n - 1) as f64;
    Estimate {
        value: m,
        stderr: (var / n as f64).sqrt(),
    }
}

/// Delete-one jackknife for a smooth function of several sample means.
///
/// `columns[c][i]` is observable `c` for sample `i`. The estimate is the
/// plug-in `f(means)`; the error comes from the leave-one-out spread.
pub fn jackknife(columns: &[&[f64]], f: impl Fn(&[f64]) -> f64) -> Estimate {
    let n = columns.first().map_or(0, |c| c.len());
    assert!(
        columns.iter().all(|c| c.len() == n),
        "ragged jackknife input"
    );
    let totals: Vec<f64> = columns.iter().map(|c| sum(c.iter().copied())).collect();
    let means: Vec<f64> = totals.iter().map(|t| t / n as f64).collect();
    let value = f(&means);
    if n < 2 {
        return Estimate {
            value,
            stderr: f64::NAN,
        };
    }
    let mut loo = vec![0.0; columns.len()];
    let thetas: Vec<f64> = (0..n)
        .map(|i| {
            for (c, col) in columns.iter().enumerate() {
                loo[c] = (totals[c] - col[i]) / (n - 1) as f64;
            }
            f(&loo)
        })
        .collect();
    let tbar = mean(&thetas);
    let ss = sum(thetas.iter().map(|t| (t - tbar) * (t - tbar)));
    Estimate {
        value,
        stderr: ((n - 1) as f64 / n as f64 * ss).sqrt(),
    }
}

/// Weighted least-squares slope and intercept of `y` on `x`.
///
/// Returns `(slope, intercept, slope_stderr)`; weights are `1/σ²` when
/// `sigma` is given, uniform otherwise.
pub fn linear_fit(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> (f64, f64, f64) {
    let w: Vec<f64> = match sigma {
        Some(s) => s.iter().map(|s| 1.0 / (s * s)).collect(),
        None => vec![1.0; x.len()],
    };
    let sw = sum(w.iter().copied());
    let mx = sum(x.iter().zip(&w).map(|(x, w)| x * w)) / sw;
    let my = sum(y.iter().zip(&w).map(|(y, w)| y * w)) / sw;
    let sxx = sum(x.iter().zip(&w).map(|(x, w)| w * (x - mx) * (x - mx)));
    let sxy = sum(x
        .iter()
        .zip(y)
        .zip(&w)
        .map(|((x, y), w)| w * (x - mx) * (y - my)));
    let slope = sxy / sxx;
    let err = match sigma {
        Some(_) => (1.0 / sxx).sqrt(),
        None => {
            let n = x.len() as f64;
            let res = sum(x.iter().zip(y).map(|(x, y)| {
                let r = y - (my + slope * (x - mx));
                r * r
            }));
            if n > 2.0 {
                (res / (n - 2.0) / sxx).sqrt()
            } else {
                0.0
            }
        }
    };
    (slope, my - slope * mx, err)
}
