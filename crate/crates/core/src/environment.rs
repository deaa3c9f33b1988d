//! Parameter sequences and the quenched random environment on the tree.
//!
//! Every tree vertex ξ carries a resampling measure `Λ^ξ = λ_{|ξ|} ρ^ξ χ`,
//! where `χ` is a fixed normalized shape on `(0,1]` and the total masses
//! `ρ^ξ` are i.i.d. with mean one. The field is never stored: `ρ^ξ` is a
//! pure function of the master seed and the vertex, so any part of the
//! infinite tree can be queried from any thread.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::growth::GrowthLaw;
use crate::hiergroup::TreeAddress;
use crate::rng::{mix64, mix_pair, unit_f64};

// ── Law of the total masses ──────────────────────────────────────────────────

/// Law of the total mass `ρ^ξ` of the resampling measure at a tree vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvLaw {
    /// Constant value.
    Dirac { value: f64 },
    /// `lo` with probability `p`, `hi` with probability `1 − p`.
    TwoPoint { lo: f64, hi: f64, p: f64 },
    /// Finite list of `(value, weight)` pairs.
    Atoms { atoms: Vec<(f64, f64)> },
}

impl Default for EnvLaw {
    fn default() -> Self {
        EnvLaw::Dirac { value: 1.0 }
    }
}

impl EnvLaw {
    pub fn dirac(value: f64) -> Self {
        EnvLaw::Dirac { value }
    }

    pub fn two_point(lo: f64, hi: f64, p: f64) -> Self {
        EnvLaw::TwoPoint { lo, hi, p }
    }

    /// `(value, probability)` pairs, with zero-probability atoms dropped.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        let raw = match self {
            EnvLaw::Dirac { value } => vec![(*value, 1.0)],
            EnvLaw::TwoPoint { lo, hi, p } => vec![(*lo, *p), (*hi, 1.0 - *p)],
            EnvLaw::Atoms { atoms } => atoms.clone(),
        };
        raw.into_iter().filter(|&(_, w)| w > 0.0).collect()
    }

    pub fn check(&self) -> Result<()> {
        if let EnvLaw::TwoPoint { p, .. } = self {
            if !(0.0..=1.0).contains(p) {
                return invalid(format!("two_point probability p = {p} outside [0, 1]"));
            }
        }
        let atoms = self.atoms();
        if atoms.is_empty() {
            return invalid("environment law has no atoms");
        }
        for &(v, w) in &atoms {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("environment value {v} must be finite and non-negative"));
            }
            if !(w.is_finite() && w >= 0.0) {
                return invalid(format!("environment weight {w} must be finite and non-negative"));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("environment weights sum to {total}, expected 1"));
        }
        Ok(())
    }

    /// Exact expectation `E[f(ρ)]` as a finite sum over atoms.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms().iter().map(|&(v, w)| w * f(v)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.expect(|r| r)
    }

    pub fn second_moment(&self) -> f64 {
        self.expect(|r| r * r)
    }

    pub fn is_degenerate(&self) -> bool {
        let a = self.atoms();
        a.iter().all(|&(v, _)| v == a[0].0)
    }

    pub fn min_value(&self) -> f64 {
        self.atoms().iter().map(|a| a.0).fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.atoms().iter().map(|a| a.0).fold(0.0, f64::max)
    }
}

// ── Measures on (0,1] ────────────────────────────────────────────────────────

/// Finite atomic measure `Σ w_i δ_{r_i}` on `(0,1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AtomMeasure {
    pub atoms: Vec<(f64, f64)>,
}

impl Default for AtomMeasure {
    fn default() -> Self {
        Self { atoms: vec![(0.5, 1.0)] }
    }
}

impl AtomMeasure {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        let m = Self { atoms };
        m.check()?;
        Ok(m)
    }

    pub fn single(r: f64, w: f64) -> Self {
        Self { atoms: vec![(r, w)] }
    }

    pub fn check(&self) -> Result<()> {
        for &(r, w) in &self.atoms {
            if !(r > 0.0 && r <= 1.0) {
                return invalid(format!("atom position r = {r} outside (0, 1]"));
            }
            if !(w.is_finite() && w >= 0.0) {
                return invalid(format!("atom weight w = {w} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Check that this is a normalized shape (positive weights summing to 1).
    pub fn check_shape(&self) -> Result<()> {
        self.check()?;
        if self.atoms.is_empty() || self.atoms.iter().any(|a| a.1 <= 0.0) {
            return invalid("chi shape needs at least one atom and positive weights");
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("chi shape weights sum to {total}, expected 1"));
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    /// Total mass of `Λ(dr)/r²`, the rate of the block-event clock.
    pub fn star_mass(&self) -> f64 {
        self.atoms.iter().map(|&(r, w)| w / (r * r)).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { atoms: self.atoms.iter().map(|&(r, w)| (r, w * factor)).collect() }
    }

    /// Rate `λ_{b,l} = ∫ r^l (1−r)^{b−l} Λ(dr)/r²` at which a given set of
    /// `l` out of `b` blocks merges.
    pub fn coalescence_rate(&self, b: usize, l: usize) -> Result<f64> {
        if l < 2 || l > b {
            return invalid(format!("coalescence rate needs 2 ≤ l ≤ b, got b = {b}, l = {l}"));
        }
        Ok(self.coalescence_rate_unchecked(b, l))
    }

    pub(crate) fn coalescence_rate_unchecked(&self, b: usize, l: usize) -> f64 {
        self.atoms
            .iter()
            .map(|&(r, w)| w * r.powi(l as i32 - 2) * (1.0 - r).powi((b - l) as i32))
            .sum()
    }
}

/// Binomial coefficient as a float.
pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

// ── Parameter families ───────────────────────────────────────────────────────

fn zero() -> f64 {
    0.0
}

fn one() -> f64 {
    1.0
}

/// Migration rates `c_k` and resampling intensities `λ_k = 2μ_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamFamily {
    /// Finite explicit sequences.
    Explicit { c: Vec<f64>, lambda: Vec<f64> },
    /// `c_k = const_c (k+1)^a ln(e+k)^log_c`, `μ_k = const_mu (k+1)^b ln(e+k)^log_mu`.
    Polynomial {
        a: f64,
        b: f64,
        #[serde(default = "one")]
        const_c: f64,
        #[serde(default = "one")]
        const_mu: f64,
        #[serde(default = "zero")]
        log_c: f64,
        #[serde(default = "zero")]
        log_mu: f64,
    },
    /// `c_k = const_c c^k (k+1)^a_bar`, `μ_k = const_mu μ^k (k+1)^b_bar` (with optional log factors).
    Exponential {
        c: f64,
        mu: f64,
        #[serde(default = "zero")]
        a_bar: f64,
        #[serde(default = "zero")]
        b_bar: f64,
        #[serde(default = "one")]
        const_c: f64,
        #[serde(default = "one")]
        const_mu: f64,
        #[serde(default = "zero")]
        log_c: f64,
        #[serde(default = "zero")]
        log_mu: f64,
    },
    /// General closed-form laws for `c_k` and `μ_k`.
    Growth { c: GrowthLaw, mu: GrowthLaw },
}

impl ParamFamily {
    /// `c_k ≡ c`, `λ_k ≡ λ`.
    pub fn constant(c: f64, lambda: f64) -> Self {
        ParamFamily::Growth { c: GrowthLaw::constant(c), mu: GrowthLaw::constant(lambda / 2.0) }
    }

    pub fn polynomial(a: f64, b: f64, const_c: f64, const_mu: f64) -> Self {
        ParamFamily::Polynomial { a, b, const_c, const_mu, log_c: 0.0, log_mu: 0.0 }
    }

    pub fn exponential(c: f64, mu: f64, a_bar: f64, b_bar: f64) -> Self {
        ParamFamily::Exponential {
            c,
            mu,
            a_bar,
            b_bar,
            const_c: 1.0,
            const_mu: 1.0,
            log_c: 0.0,
            log_mu: 0.0,
        }
    }

    /// Closed-form laws `(c, μ)`, or `None` for explicit sequences.
    pub fn laws(&self) -> Option<(GrowthLaw, GrowthLaw)> {
        match *self {
            ParamFamily::Explicit { .. } => None,
            ParamFamily::Polynomial { a, b, const_c, const_mu, log_c, log_mu } => Some((
                GrowthLaw { log_power: log_c, ..GrowthLaw::power(const_c, a) },
                GrowthLaw { log_power: log_mu, ..GrowthLaw::power(const_mu, b) },
            )),
            ParamFamily::Exponential { c, mu, a_bar, b_bar, const_c, const_mu, log_c, log_mu } => Some((
                GrowthLaw { log_power: log_c, ..GrowthLaw::exponential(const_c, c, a_bar) },
                GrowthLaw { log_power: log_mu, ..GrowthLaw::exponential(const_mu, mu, b_bar) },
            )),
            ParamFamily::Growth { c, mu } => Some((c, mu)),
        }
    }

    /// Number of available terms (`None` for closed forms).
    pub fn available(&self) -> Option<usize> {
        match self {
            ParamFamily::Explicit { c, lambda } => Some(c.len().min(lambda.len())),
            _ => None,
        }
    }

    pub fn c_opt(&self, k: usize) -> Option<f64> {
        match self {
            ParamFamily::Explicit { c, .. } => c.get(k).copied(),
            _ => self.laws().map(|(c, _)| c.at(k)),
        }
    }

    pub fn lambda_opt(&self, k: usize) -> Option<f64> {
        match self {
            ParamFamily::Explicit { lambda, .. } => lambda.get(k).copied(),
            _ => self.laws().map(|(_, mu)| 2.0 * mu.at(k)),
        }
    }

    /// Migration rate `c_k`.
    ///
    /// # Panics
    /// Panics if `k` lies beyond an explicit sequence; callers check
    /// [`ParamFamily::ensure_covers`] first.
    pub fn c(&self, k: usize) -> f64 {
        self.c_opt(k).unwrap_or_else(|| panic!("c_{k} beyond explicit data"))
    }

    /// Resampling intensity `λ_k` (see [`ParamFamily::c`] for panics).
    pub fn lambda(&self, k: usize) -> f64 {
        self.lambda_opt(k).unwrap_or_else(|| panic!("lambda_{k} beyond explicit data"))
    }

    pub fn mu(&self, k: usize) -> f64 {
        self.lambda(k) / 2.0
    }

    /// Error unless `c_k` and `λ_k` are available for all `k < n`.
    pub fn ensure_covers(&self, n: usize) -> Result<()> {
        match self.available() {
            Some(len) if len < n => Err(Error::OutOfRange(format!(
                "explicit parameters have {len} terms, {n} needed"
            ))),
            _ => Ok(()),
        }
    }

    pub fn c_seq(&self, n: usize) -> Result<Vec<f64>> {
        self.ensure_covers(n)?;
        Ok((0..n).map(|k| self.c(k)).collect())
    }

    pub fn mu_seq(&self, n: usize) -> Result<Vec<f64>> {
        self.ensure_covers(n)?;
        Ok((0..n).map(|k| self.mu(k)).collect())
    }

    pub fn check(&self) -> Result<()> {
        match self {
            ParamFamily::Explicit { c, lambda } => {
                if c.is_empty() || lambda.is_empty() {
                    return invalid("explicit parameters need at least one term");
                }
                if let Some(x) = c.iter().chain(lambda).find(|x| !(x.is_finite() && **x >= 0.0)) {
                    return invalid(format!("explicit parameter {x} must be finite and non-negative"));
                }
                Ok(())
            }
            _ => {
                let (c, mu) = self.laws().expect("closed form");
                if !c.is_valid() || !mu.is_valid() {
                    return invalid("family parameters must be finite with positive bases and non-negative constants");
                }
                Ok(())
            }
        }
    }
}

// ── The realized environment ─────────────────────────────────────────────────

/// Everything that defines the random environment except its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub law: EnvLaw,
    #[serde(default)]
    pub chi: AtomMeasure,
    pub params: ParamFamily,
}

/// A seeded, lazily realized environment field.
#[derive(Clone, Debug)]
pub struct Environment {
    spec: EnvSpec,
    seed: u64,
    cumulative: Vec<(f64, f64)>,
}

impl Environment {
    pub fn new(spec: EnvSpec, seed: u64) -> Result<Self> {
        spec.law.check()?;
        spec.chi.check_shape()?;
        spec.params.check()?;
        let mut acc = 0.0;
        let cumulative = spec
            .law
            .atoms()
            .into_iter()
            .map(|(v, w)| {
                acc += w;
                (acc, v)
            })
            .collect();
        Ok(Self { spec, seed, cumulative })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamFamily {
        &self.spec.params
    }

    pub fn law(&self) -> &EnvLaw {
        &self.spec.law
    }

    pub fn chi(&self) -> &AtomMeasure {
        &self.spec.chi
    }

    /// Whether every vertex carries the same total mass.
    pub fn is_constant(&self) -> bool {
        self.cumulative.len() == 1
    }

    /// Total mass `ρ^ξ` at vertex ξ.
    pub fn rho_at(&self, xi: &TreeAddress) -> f64 {
        self.rho_at_digits(xi.order(), xi.base().digits(), xi.height())
    }

    /// `ρ` at the height-`height` ancestor of the leaf with the given digits.
    pub fn rho_at_digits(&self, order: u32, digits: &[u32], height: usize) -> f64 {
        if self.cumulative.len() == 1 {
            return self.cumulative[0].1;
        }
        let u = unit_f64(vertex_hash(self.seed, order, digits, height));
        self.cumulative
            .iter()
            .find(|&&(acc, _)| u < acc)
            .map_or(self.cumulative[self.cumulative.len() - 1].1, |a| a.1)
    }

    /// `λ^ξ = λ_{|ξ|} ρ^ξ`.
    pub fn lambda_at(&self, xi: &TreeAddress) -> f64 {
        self.spec.params.lambda(xi.height()) * self.rho_at(xi)
    }

    /// `χ^ξ`, the shape scaled by `ρ^ξ`.
    pub fn chi_at(&self, xi: &TreeAddress) -> AtomMeasure {
        self.spec.chi.scaled(self.rho_at(xi))
    }

    /// The resampling measure `Λ^ξ = λ_{|ξ|} χ^ξ`.
    pub fn big_lambda_at(&self, xi: &TreeAddress) -> AtomMeasure {
        self.spec.chi.scaled(self.lambda_at(xi))
    }
}

/// Counter-based hash of a tree vertex: leaf digits below `height` are ignored.
pub(crate) fn vertex_hash(seed: u64, order: u32, digits: &[u32], height: usize) -> u64 {
    let mut h = mix_pair(mix64(seed), (u64::from(order) << 32) | height as u64);
    for (i, &d) in digits.iter().enumerate().skip(height) {
        if d != 0 {
            h = mix_pair(h, ((i as u64) << 32) | u64::from(d));
        }
    }
    h
}

// ── Validation ───────────────────────────────────────────────────────────────

/// Outcome of one check; `exact` is false for numeric estimates from finite data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub holds: bool,
    pub exact: bool,
    pub detail: String,
}

/// Report on the standing assumptions for a given group order `N`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub order: u32,
    pub positive_rates: Check,
    pub migration_growth: Check,
    pub resampling_growth: Check,
    pub mean_one: Check,
    pub finite_second_moment: Check,
    pub bounded_support: Check,
    pub bounded_support_delta: Option<f64>,
    pub zero_environment: bool,
    pub notes: Vec<String>,
}

impl ValidationReport {
    /// Whether the model assumptions needed for simulation hold.
    pub fn model_ok(&self) -> bool {
        self.migration_growth.holds && self.resampling_growth.holds && self.mean_one.holds
    }
}

fn growth_check(name: &str, params: &ParamFamily, pick_c: bool, order: u32) -> Check {
    let ln_n = f64::from(order).ln();
    if let Some((c, mu)) = params.laws() {
        let law = if pick_c { c } else { mu };
        if law.constant == 0.0 {
            return Check { holds: true, exact: true, detail: format!("{name} vanishes identically") };
        }
        if law.factorial_power > 0.0 {
            return Check { holds: false, exact: true, detail: format!("{name} grows factorially") };
        }
        let rate = if law.factorial_power < 0.0 { f64::NEG_INFINITY } else { law.base.ln() };
        return Check {
            holds: rate < ln_n,
            exact: true,
            detail: format!("limsup (1/k) log {name}_k = {rate:.6} vs log N = {ln_n:.6}"),
        };
    }
    let len = params.available().unwrap_or(0);
    let rate = (len / 2..len)
        .filter(|&k| k > 0)
        .map(|k| {
            let v = if pick_c { params.c(k) } else { params.lambda(k) };
            if v > 0.0 { v.ln() / k as f64 } else { f64::NEG_INFINITY }
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Check {
        holds: rate < ln_n,
        exact: false,
        detail: format!("estimated (1/k) log {name}_k over the data tail = {rate:.6} vs log N = {ln_n:.6}"),
    }
}

/// Check the growth conditions, the mean-one normalization and the bounded
/// support condition for group order `order`.
pub fn validate(spec: &EnvSpec, order: u32) -> ValidationReport {
    let mut notes = Vec::new();
    let params = &spec.params;
    let positive_rates = match params.laws() {
        Some((c, mu)) => Check {
            holds: c.constant > 0.0 && mu.constant > 0.0,
            exact: true,
            detail: format!("c constant {}, mu constant {}", c.constant, mu.constant),
        },
        None => {
            let n = params.available().unwrap_or(0);
            let ok = (0..n).all(|k| params.c(k) > 0.0 && params.lambda(k) > 0.0);
            Check { holds: ok, exact: true, detail: format!("checked {n} explicit terms") }
        }
    };
    let migration_growth = growth_check("c", params, true, order);
    let resampling_growth = growth_check("lambda", params, false, order);
    let law = &spec.law;
    let law_ok = law.check();
    if let Err(e) = &law_ok {
        notes.push(e.to_string());
    }
    let mean = law.mean();
    let mean_one = Check {
        holds: law_ok.is_ok() && (mean - 1.0).abs() < 1e-12,
        exact: true,
        detail: format!("E[rho] = {mean}"),
    };
    let c2 = law.second_moment();
    let finite_second_moment =
        Check { holds: c2.is_finite(), exact: true, detail: format!("E[rho^2] = {c2}") };
    let (lo, hi) = (law.min_value(), law.max_value());
    let delta = if lo > 0.0 { Some(lo.min(1.0 / hi)) } else { None };
    let bounded_support = Check {
        holds: delta.is_some(),
        exact: true,
        detail: match delta {
            Some(d) => format!("support [{lo}, {hi}] lies in [{d}, {}]", 1.0 / d),
            None => "support reaches 0".to_string(),
        },
    };
    let zero_environment = law.atoms().iter().all(|a| a.0 == 0.0);
    if zero_environment {
        notes.push("zero environment; valid only as comparison baseline".to_string());
    }
    if let Err(e) = spec.chi.check_shape() {
        notes.push(e.to_string());
    }
    ValidationReport {
        order,
        positive_rates,
        migration_growth,
        resampling_growth,
        mean_one,
        finite_second_moment,
        bounded_support,
        bounded_support_delta: delta,
        zero_environment,
        notes,
    }
}
