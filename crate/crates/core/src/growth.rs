//! Closed-form coefficient sequences and their asymptotic algebra.
//!
//! A [`GrowthLaw`] is the sequence
//! `C · base^k · (k+1)^power · ln(e+k)^log_power · (k!)^factorial_power`.
//! The polynomial and exponential parameter families are special cases.
//! [`Asym`] records only the exponents, which is all that matters for
//! limits of ratios and for convergence of series built from such terms.

use std::cmp::Ordering;
use std::f64::consts::E;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

const EXP_TOL: f64 = 1e-12;

fn default_one() -> f64 {
    1.0
}

/// A regularly varying sequence with optional exponential and factorial parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthLaw {
    #[serde(default = "default_one")]
    pub constant: f64,
    #[serde(default = "default_one")]
    pub base: f64,
    #[serde(default)]
    pub power: f64,
    #[serde(default)]
    pub log_power: f64,
    #[serde(default)]
    pub factorial_power: f64,
}

impl GrowthLaw {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, base: 1.0, power: 0.0, log_power: 0.0, factorial_power: 0.0 }
    }

    pub fn power(constant: f64, power: f64) -> Self {
        Self { power, ..Self::constant(constant) }
    }

    pub fn exponential(constant: f64, base: f64, power: f64) -> Self {
        Self { base, power, ..Self::constant(constant) }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self { constant: self.constant * factor, ..self }
    }

    /// Value at index `k`.
    pub fn at(&self, k: usize) -> f64 {
        if self.constant == 0.0 {
            return 0.0;
        }
        let kf = k as f64;
        let mut ln = self.base.ln() * kf + self.power * (kf + 1.0).ln();
        if self.log_power != 0.0 {
            ln += self.log_power * (E + kf).ln().ln();
        }
        if self.factorial_power != 0.0 {
            ln += self.factorial_power * ln_gamma(kf + 1.0);
        }
        self.constant * ln.exp()
    }

    pub fn is_valid(&self) -> bool {
        self.constant >= 0.0
            && self.base > 0.0
            && [self.constant, self.base, self.power, self.log_power, self.factorial_power]
                .iter()
                .all(|x| x.is_finite())
    }

    pub fn asym(&self) -> Asym {
        if self.constant == 0.0 {
            return Asym::ZERO;
        }
        Asym {
            zero: false,
            factorial: self.factorial_power,
            ln_base: self.base.ln(),
            power: self.power,
            log_power: self.log_power,
            loglog_power: 0.0,
        }
    }
}

// ── Asymptotic classes ───────────────────────────────────────────────────────

/// Growth class `(k!)^f · e^{βk} · k^p · (ln k)^g · (ln ln k)^h`, or identically zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Asym {
    pub zero: bool,
    pub factorial: f64,
    pub ln_base: f64,
    pub power: f64,
    pub log_power: f64,
    pub loglog_power: f64,
}

/// Limit of a positive sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Limit {
    Zero,
    Finite,
    Infinite,
}

fn sign(x: f64) -> Ordering {
    if x > EXP_TOL {
        Ordering::Greater
    } else if x < -EXP_TOL {
        Ordering::Less
    } else {
        Ordering::Equal
    }
}

impl Asym {
    pub const ZERO: Asym =
        Asym { zero: true, factorial: 0.0, ln_base: 0.0, power: 0.0, log_power: 0.0, loglog_power: 0.0 };
    pub const ONE: Asym =
        Asym { zero: false, factorial: 0.0, ln_base: 0.0, power: 0.0, log_power: 0.0, loglog_power: 0.0 };

    fn exponents(&self) -> [f64; 5] {
        [self.factorial, self.ln_base, self.power, self.log_power, self.loglog_power]
    }

    fn from_exponents(e: [f64; 5]) -> Self {
        Asym { zero: false, factorial: e[0], ln_base: e[1], power: e[2], log_power: e[3], loglog_power: e[4] }
    }

    /// Sign of the leading exponent: growth to infinity, decay to zero, or neither.
    fn leading(&self) -> Ordering {
        self.exponents().iter().map(|&x| sign(x)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal)
    }

    pub fn mul(&self, other: &Self) -> Self {
        if self.zero || other.zero {
            return Self::ZERO;
        }
        let (a, b) = (self.exponents(), other.exponents());
        Self::from_exponents(std::array::from_fn(|i| a[i] + b[i]))
    }

    /// Ratio `self / other`; `other` must not be identically zero.
    pub fn div(&self, other: &Self) -> Self {
        debug_assert!(!other.zero);
        if self.zero {
            return Self::ZERO;
        }
        let (a, b) = (self.exponents(), other.exponents());
        Self::from_exponents(std::array::from_fn(|i| a[i] - b[i]))
    }

    /// Compare growth rates.
    pub fn compare(&self, other: &Self) -> Ordering {
        match (self.zero, other.zero) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Less,
            (false, true) => Ordering::Greater,
            _ => self.div(other).leading(),
        }
    }

    /// Growth class of a sum of two positive sequences.
    pub fn add(&self, other: &Self) -> Self {
        if self.compare(other) == Ordering::Less {
            *other
        } else {
            *self
        }
    }

    /// Index shift `k ↦ k+1` multiplies by the base and, for factorial
    /// growth, by `k^f`.
    pub fn shift(&self) -> Self {
        if self.zero {
            return *self;
        }
        Self { power: self.power + self.factorial, ..*self }
    }

    /// Limit of the sequence itself.
    pub fn limit(&self) -> Limit {
        if self.zero {
            return Limit::Zero;
        }
        match self.leading() {
            Ordering::Greater => Limit::Infinite,
            Ordering::Less => Limit::Zero,
            Ordering::Equal => Limit::Finite,
        }
    }

    /// Whether `Σ_k a_k < ∞`.
    pub fn summable(&self) -> bool {
        if self.zero {
            return true;
        }
        let shifted = [self.factorial, self.ln_base, self.power + 1.0, self.log_power + 1.0];
        for x in shifted {
            match sign(x) {
                Ordering::Less => return true,
                Ordering::Greater => return false,
                Ordering::Equal => {}
            }
        }
        sign(self.loglog_power + 1.0) == Ordering::Less
    }

    /// Growth class of the partial sums `Σ_{l≤k} a_l`.
    pub fn partial_sum(&self) -> Self {
        if self.zero {
            return Self::ZERO;
        }
        if self.summable() {
            return Self::ONE;
        }
        match (sign(self.factorial), sign(self.ln_base)) {
            (Ordering::Greater, _) | (Ordering::Equal, Ordering::Greater) => return *self,
            _ => {}
        }
        if sign(self.power + 1.0) == Ordering::Greater {
            return Self { power: self.power + 1.0, ..*self };
        }
        if sign(self.log_power + 1.0) == Ordering::Greater {
            return Self { power: 0.0, log_power: self.log_power + 1.0, ..*self };
        }
        // Σ 1/(k ln k) (ln ln k)^h with h ≥ −1: divergent, slower than any power of ln.
        let h = self.loglog_power + 1.0;
        Self { power: 0.0, log_power: 0.0, loglog_power: if h > EXP_TOL { h } else { f64::EPSILON }, ..*self }
    }
}
