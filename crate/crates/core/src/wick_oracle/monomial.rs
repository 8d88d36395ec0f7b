use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Product `Π ψ_l^{p_l}` of unit phase factors with integer exponents.
///
/// Entries with zero total exponent are dropped, so two monomials compare
/// equal exactly when they denote the same function of the phases.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseMonomial(BTreeMap<usize, i32>);

impl PhaseMonomial {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, i32)>) -> Self {
        let mut m = Self::default();
        for (l, p) in pairs {
            m.shift(l, p);
        }
        m
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &i32)> {
        self.0.iter()
    }

    pub fn exponent(&self, l: usize) -> i32 {
        self.0.get(&l).copied().unwrap_or(0)
    }

    /// Multiply by `ψ_l^p`.
    pub fn shift(&mut self, l: usize, p: i32) {
        let e = self.0.entry(l).or_insert(0);
        *e += p;
        if *e == 0 {
            self.0.remove(&l);
        }
    }

    /// Complex conjugate.
    pub fn negate(&self) -> Self {
        Self(self.0.iter().map(|(&l, &p)| (l, -p)).collect())
    }

    pub fn product(&self, other: &Self) -> Self {
        let mut m = self.clone();
        for (&l, &p) in other.iter() {
            m.shift(l, p);
        }
        m
    }

    /// Total degree `Σ |p_l|`.
    pub fn degree(&self) -> u32 {
        self.0.values().map(|p| p.unsigned_abs()).sum()
    }
}

impl fmt::Display for PhaseMonomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self.0.iter().map(|(l, p)| format!("psi{l}^{p}")).collect();
        write!(f, "{}", parts.join("*"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cancellation_and_conjugate() {
        let m = PhaseMonomial::from_pairs([(1, 1), (1, -1), (3, 2)]);
        assert_eq!(m, PhaseMonomial::from_pairs([(3, 2)]));
        assert_eq!(m.product(&m.negate()), PhaseMonomial::default());
        assert_eq!(m.degree(), 2);
        assert_eq!(m.to_string(), "psi3^2");
    }
}
