//! Coexistence versus clustering.
//!
//! At finite `N` the system clusters iff `Σ_k (1/c̄_k) Σ_{l≤k} λ_l = ∞` with
//! `c̄_k = c_k + λ_{k+1}/N`; in the hierarchical mean-field limit the same
//! series is taken with `c_k` in place of `c̄_k`. Closed-form families are
//! decided on their growth classes. Explicit sequences only yield partial sums.

use serde::Serialize;

use crate::coalescent::{pair_coalescence_estimate, PairConfig, PairEstimate};
use crate::environment::{Environment, ParamFamily};
use crate::error::{invalid, Error, Result};
use crate::growth::Limit;
use crate::walkcalc::{hazard_series_verdict, SeriesVerdict};

/// Default number of terms summed for the reported partial sums.
pub const DEFAULT_PARTIAL_TERMS: usize = 10_000;

/// Long-time behaviour of the system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Clustering,
    Coexistence,
    Undecided,
}

impl From<SeriesVerdict> for Regime {
    fn from(v: SeriesVerdict) -> Self {
        match v {
            SeriesVerdict::Divergent => Regime::Clustering,
            SeriesVerdict::Convergent => Regime::Coexistence,
            SeriesVerdict::Undecided => Regime::Undecided,
        }
    }
}

/// Which series decides the regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    FiniteN { order: u32 },
    Limit,
}

/// Partial sum `S_k` of the criterion series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PartialSum {
    pub k: usize,
    pub value: f64,
}

/// Outcome of the two-branch regularity condition on `(c_k, λ_k)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Regularity {
    pub holds: bool,
    /// `limsup λ_{k+1}/c_k < ∞`.
    pub first_branch: bool,
    /// `liminf min(λ_{k+1}/c_k, λ_k/λ_{k+1}) > 0`.
    pub second_branch: bool,
    /// Limit class of `λ_{k+1}/c_k`.
    pub ratio_lambda_c: Limit,
    /// Limit class of `λ_k/λ_{k+1}` (`None` when `λ ≡ 0`).
    pub ratio_lambda_shift: Option<Limit>,
}

/// Monte Carlo support for an analytic verdict.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Corroboration {
    pub estimate: PairEstimate,
    /// Probabilities non-decreasing in the horizon.
    pub monotone: bool,
    /// Whether the estimate matches the analytic regime under [`CorroborationRule`].
    pub consistent: bool,
    pub detail: String,
}

/// Thresholds used to compare Monte Carlo output with a verdict.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorroborationRule {
    /// Clustering: final probability must exceed this.
    pub clustering_floor: f64,
    /// Coexistence: final probability must stay below this.
    pub coexistence_ceiling: f64,
    /// Coexistence: last two horizons must agree within this many standard errors.
    pub sigmas: f64,
}

impl Default for CorroborationRule {
    fn default() -> Self {
        Self { clustering_floor: 0.95, coexistence_ceiling: 0.9, sigmas: 3.0 }
    }
}

/// Classification of a parameter family.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DichotomyVerdict {
    pub regime: Regime,
    pub criterion: Criterion,
    /// Partial sums at `k = 10^0, 10^1, …` and at the last index summed
    /// (summation stops early if terms overflow).
    pub partial_sums: Vec<PartialSum>,
    pub regularity: Option<Regularity>,
    pub corroboration: Option<Corroboration>,
}

// ── Partial sums ─────────────────────────────────────────────────────────────

fn partial_sums(params: &ParamFamily, terms: usize, denom: impl Fn(usize) -> Option<f64>) -> Vec<PartialSum> {
    let mut out = Vec::new();
    let (mut lam, mut total) = (0.0, 0.0);
    let mut checkpoint = 1;
    let mut last = None;
    for k in 0..terms {
        let (Some(l), Some(d)) = (params.lambda_opt(k), denom(k)) else { break };
        lam += l;
        let term = if lam == 0.0 { 0.0 } else { lam / d };
        if !(total + term).is_finite() {
            break;
        }
        total += term;
        last = Some(PartialSum { k, value: total });
        if k + 1 == checkpoint {
            out.push(PartialSum { k, value: total });
            checkpoint *= 10;
        }
    }
    if let Some(p) = last {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

// ── Classification ───────────────────────────────────────────────────────────

/// Finite-`N` criterion with the default number of partial-sum terms.
pub fn classify_finite_n(params: &ParamFamily, order: u32) -> Result<DichotomyVerdict> {
    classify_finite_n_with(params, order, DEFAULT_PARTIAL_TERMS)
}

/// Finite-`N` criterion `Σ_k (1/c̄_k) Σ_{l≤k} λ_l`, reporting `terms` partial sums.
pub fn classify_finite_n_with(params: &ParamFamily, order: u32, terms: usize) -> Result<DichotomyVerdict> {
    if order < 2 {
        return invalid(format!("order N = {order} must be at least 2"));
    }
    params.check()?;
    let n = order as f64;
    let sums = partial_sums(params, terms, |k| Some(params.c_opt(k)? + params.lambda_opt(k + 1)? / n));
    Ok(DichotomyVerdict {
        regime: hazard_series_verdict(params).into(),
        criterion: Criterion::FiniteN { order },
        partial_sums: sums,
        regularity: regularity_check(params).ok(),
        corroboration: None,
    })
}

/// Limit criterion with the default number of partial-sum terms.
pub fn classify_limit(params: &ParamFamily) -> Result<DichotomyVerdict> {
    classify_limit_with(params, DEFAULT_PARTIAL_TERMS)
}

/// Limit criterion `Σ_k (1/c_k) Σ_{l≤k} λ_l`.
pub fn classify_limit_with(params: &ParamFamily, terms: usize) -> Result<DichotomyVerdict> {
    params.check()?;
    let sums = partial_sums(params, terms, |k| params.c_opt(k));
    let regime = match params.laws() {
        None => Regime::Undecided,
        Some((c, mu)) => {
            let lam = mu.asym().partial_sum();
            if lam.zero {
                Regime::Coexistence
            } else if c.asym().zero {
                Regime::Clustering
            } else if lam.div(&c.asym()).summable() {
                Regime::Coexistence
            } else {
                Regime::Clustering
            }
        }
    };
    Ok(DichotomyVerdict {
        regime,
        criterion: Criterion::Limit,
        partial_sums: sums,
        regularity: regularity_check(params).ok(),
        corroboration: None,
    })
}

/// Evaluate the regularity condition on the growth classes of `c` and `λ`.
pub fn regularity_check(params: &ParamFamily) -> Result<Regularity> {
    let (c, mu) = params
        .laws()
        .ok_or_else(|| Error::Unresolved("regularity needs a closed-form family".into()))?;
    let (c, lam) = (c.asym(), mu.asym());
    if lam.zero {
        return Ok(Regularity {
            holds: true,
            first_branch: true,
            second_branch: false,
            ratio_lambda_c: Limit::Zero,
            ratio_lambda_shift: None,
        });
    }
    let ratio_lambda_c = if c.zero { Limit::Infinite } else { lam.shift().div(&c).limit() };
    let ratio_lambda_shift = lam.div(&lam.shift()).limit();
    let first_branch = ratio_lambda_c != Limit::Infinite;
    let second_branch = ratio_lambda_c != Limit::Zero && ratio_lambda_shift != Limit::Zero;
    Ok(Regularity {
        holds: first_branch || second_branch,
        first_branch,
        second_branch,
        ratio_lambda_c,
        ratio_lambda_shift: Some(ratio_lambda_shift),
    })
}

// ── Monte Carlo corroboration ────────────────────────────────────────────────

/// Attach a pair-coalescence estimate to a finite-`N` verdict.
pub fn corroborate(
    verdict: &DichotomyVerdict,
    env: &Environment,
    cfg: &PairConfig,
    rule: CorroborationRule,
) -> Result<DichotomyVerdict> {
    let estimate = pair_coalescence_estimate(env, cfg)?;
    let p = &estimate.probability;
    let se = &estimate.probability_se;
    let last = p.len() - 1;
    let monotone = p.windows(2).all(|w| w[1] >= w[0]);
    let (consistent, detail) = match verdict.regime {
        Regime::Clustering => (
            monotone && p[last] > rule.clustering_floor,
            format!("final probability {:.4} vs floor {}", p[last], rule.clustering_floor),
        ),
        Regime::Coexistence if last >= 1 => {
            let gap = (p[last] - p[last - 1]).abs();
            let band = rule.sigmas * (se[last].powi(2) + se[last - 1].powi(2)).sqrt();
            (
                gap <= band && p[last] < rule.coexistence_ceiling,
                format!(
                    "last two estimates {:.4}, {:.4} (gap {:.2e}, band {:.2e}), ceiling {}",
                    p[last - 1],
                    p[last],
                    gap,
                    band,
                    rule.coexistence_ceiling
                ),
            )
        }
        Regime::Coexistence => (false, "plateau check needs at least two horizons".into()),
        Regime::Undecided => (false, "no analytic verdict to compare with".into()),
    };
    Ok(DichotomyVerdict {
        corroboration: Some(Corroboration { estimate, monotone, consistent, detail }),
        ..verdict.clone()
    })
}
