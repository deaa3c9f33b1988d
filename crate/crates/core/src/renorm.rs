//! Volatility recursion, fixed points and scaling classification.
//!
//! The volatility of the `k`-block average obeys
//! `d_{k+1} = E[f_k(d_k)]` with the random Möbius map
//! `f_k(x) = c_k (μ_k ρ + x) / (c_k + μ_k ρ + x)`, the expectation being over
//! the law of the environment mass `ρ`. This module iterates the map,
//! solves the fixed-point equations that give the limiting constants, and
//! decides which scaling regime a closed-form parameter family falls into.

use serde::Serialize;

use crate::environment::{EnvLaw, ParamFamily};
use crate::error::{invalid, Error, Result};
use crate::growth::{Asym, GrowthLaw, Limit};

// ── The recursion ────────────────────────────────────────────────────────────

/// One application of the averaged map: `E[c(μρ + x)/(c + μρ + x)]`.
pub fn f_map(c: f64, mu: f64, atoms: &[(f64, f64)], x: f64) -> f64 {
    atoms
        .iter()
        .map(|&(rho, w)| {
            let num = mu * rho + x;
            let den = c + num;
            if den > 0.0 {
                w * c * num / den
            } else {
                0.0
            }
        })
        .sum()
}

/// The volatility sequence with its two comparison traces.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VolatilityTrace {
    /// `c_0 … c_kmax`.
    pub c: Vec<f64>,
    /// `μ_0 … μ_kmax`.
    pub mu: Vec<f64>,
    /// `d_0 … d_kmax` under the given law.
    pub d: Vec<f64>,
    /// Companion trace for the zero environment.
    pub d_zero: Vec<f64>,
    /// Companion trace for the average (constant one) environment.
    pub d_one: Vec<f64>,
}

impl VolatilityTrace {
    pub fn kmax(&self) -> usize {
        self.d.len() - 1
    }

    /// `d_k / c_k`.
    pub fn ratio_c(&self, k: usize) -> f64 {
        self.d[k] / self.c[k]
    }

    /// `d_k / μ_k`.
    pub fn ratio_mu(&self, k: usize) -> f64 {
        self.d[k] / self.mu[k]
    }

    /// `d_k / √(c_k μ_k)`.
    pub fn ratio_geometric(&self, k: usize) -> f64 {
        self.d[k] / (self.c[k] * self.mu[k]).sqrt()
    }

    /// `σ_k = Σ_{l<k} 1/c_l`.
    pub fn sigma(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.d.len());
        let mut acc = 0.0;
        for k in 0..self.d.len() {
            s.push(acc);
            acc += 1.0 / self.c[k];
        }
        s
    }

    pub fn diagnostic(&self, which: Diagnostic) -> Vec<f64> {
        match which {
            Diagnostic::RatioC => (0..self.d.len()).map(|k| self.ratio_c(k)).collect(),
            Diagnostic::RatioMu => (0..self.d.len()).map(|k| self.ratio_mu(k)).collect(),
            Diagnostic::RatioGeometric => (0..self.d.len()).map(|k| self.ratio_geometric(k)).collect(),
            Diagnostic::SigmaD => self.sigma().iter().zip(&self.d).map(|(s, d)| s * d).collect(),
        }
    }
}

/// Iterate the volatility recursion up to level `kmax`.
pub fn recurse(params: &ParamFamily, law: &EnvLaw, d0: f64, kmax: usize) -> Result<VolatilityTrace> {
    if !(d0.is_finite() && d0 >= 0.0) {
        return invalid(format!("d0 = {d0} must be finite and non-negative"));
    }
    law.check()?;
    let c = params.c_seq(kmax + 1)?;
    let mu = params.mu_seq(kmax + 1)?;
    let atoms = law.atoms();
    let zero = [(0.0, 1.0)];
    let one = [(1.0, 1.0)];
    let run = |atoms: &[(f64, f64)]| {
        let mut d = Vec::with_capacity(kmax + 1);
        d.push(d0);
        for k in 0..kmax {
            d.push(f_map(c[k], mu[k], atoms, d[k]));
        }
        d
    };
    Ok(VolatilityTrace { d: run(&atoms), d_zero: run(&zero), d_one: run(&one), c, mu })
}

// ── Fixed points ─────────────────────────────────────────────────────────────

/// Which fixed-point equation to solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointVariant {
    /// `M = E[(Kρ + M)/(1 + Kρ + M)]`.
    PolyM,
    /// `M̄ = E[(cKρ + M̄)/(c + cKρ + M̄)]` for exponential base `c`.
    ExpMbar { c: f64 },
}

/// A solved fixed point with its certificates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FixedPoint {
    pub value: f64,
    /// `|g(M) − M|`.
    pub residual: f64,
    /// Contraction factor `1 − g(0)/M`.
    pub beta: f64,
    /// Root found by bisection alone, before the Newton polish.
    pub bisection_value: f64,
}

fn fixed_point_map(k: f64, atoms: &[(f64, f64)], variant: FixedPointVariant, m: f64) -> (f64, f64) {
    let scale = match variant {
        FixedPointVariant::PolyM => 1.0,
        FixedPointVariant::ExpMbar { c } => c,
    };
    atoms.iter().fold((0.0, 0.0), |(g, dg), &(rho, w)| {
        let den = scale + scale * k * rho + m;
        (g + w * (scale * k * rho + m) / den, dg + w * scale / (den * den))
    })
}

/// Solve the fixed-point equation by bisection on `[0, 1]`, then polish with Newton.
pub fn fixed_point(k: f64, law: &EnvLaw, variant: FixedPointVariant) -> Result<FixedPoint> {
    if !(k > 0.0 && k.is_finite()) {
        return invalid(format!("fixed point needs K in (0, inf), got {k}"));
    }
    if let FixedPointVariant::ExpMbar { c } = variant {
        if !(c > 0.0 && c.is_finite()) {
            return invalid(format!("exponential base c = {c} must be positive"));
        }
    }
    law.check()?;
    let atoms = law.atoms();
    let h = |m: f64| fixed_point_map(k, &atoms, variant, m).0 - m;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let bisection_value = 0.5 * (lo + hi);
    let mut m = bisection_value;
    for _ in 0..3 {
        let (g, dg) = fixed_point_map(k, &atoms, variant, m);
        let next = m - (g - m) / (dg - 1.0);
        if (fixed_point_map(k, &atoms, variant, next).0 - next).abs() <= (g - m).abs() {
            m = next;
        }
    }
    let g0 = fixed_point_map(k, &atoms, variant, 0.0).0;
    Ok(FixedPoint { value: m, residual: h(m).abs(), beta: 1.0 - g0 / m, bisection_value })
}

// ── Scaling classification ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Polynomial,
    Exponential,
}

/// Scaling regime of the volatility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Case {
    #[serde(rename = "a")]
    PolyA,
    #[serde(rename = "b")]
    PolyB,
    #[serde(rename = "c")]
    PolyC,
    #[serde(rename = "d")]
    PolyD,
    #[serde(rename = "e")]
    PolyE,
    #[serde(rename = "A")]
    ExpA,
    #[serde(rename = "B")]
    ExpB,
    #[serde(rename = "C1")]
    ExpC1,
    #[serde(rename = "C2")]
    ExpC2,
    #[serde(rename = "C3")]
    ExpC3,
    #[serde(rename = "unresolved")]
    Unresolved,
}

/// Refinement of cases C2 and C3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcase {
    /// C2 with `k K̄_k → ∞`.
    C2Fast,
    /// C2 with `k K̄_k → n_bar < ∞`.
    C2Moderate { n_bar: f64 },
    /// C2 where `k K̄_k` has no positive finite or infinite limit.
    C2Other,
    /// C3 with `1 > c > μ`.
    C3First,
    /// C3 with `1 = c > μ` and `a < 1`.
    C3Second,
}

/// Sequence whose limit the scaling class predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    /// `d_k / c_k`
    RatioC,
    /// `d_k / μ_k`
    RatioMu,
    /// `d_k / √(c_k μ_k)`
    RatioGeometric,
    /// `σ_k d_k`
    SigmaD,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub diagnostic: Diagnostic,
    pub value: f64,
}

/// Verdict of the scaling classifier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingClass {
    pub family: Family,
    pub case: Case,
    pub subcase: Option<Subcase>,
    /// Polynomial exponent of `c_k` (`a` or `ā`).
    pub a: f64,
    /// Polynomial exponent of `μ_k` (`b` or `b̄`).
    pub b: f64,
    /// Exponential bases `c`, `μ` (both 1 for polynomial families).
    pub c_base: f64,
    pub mu_base: f64,
    /// Limit type and value of `K_k = μ_k/c_k` (or `K̄_k` for exponential families).
    pub k_limit: Limit,
    pub k_value: Option<f64>,
    /// Limit type and value of `k² K_k` (polynomial families only).
    pub l_limit: Option<Limit>,
    pub l_value: Option<f64>,
    /// Solution of the relevant fixed-point equation, when used.
    pub fixed_point: Option<f64>,
    pub prediction: Option<Prediction>,
    pub note: String,
}

impl ScalingClass {
    pub fn is_resolved(&self) -> bool {
        !matches!(self.case, Case::Unresolved | Case::PolyE)
    }
}

fn ratio_value(num: &GrowthLaw, den: &GrowthLaw, limit: Limit) -> Option<f64> {
    (limit == Limit::Finite).then(|| num.constant / den.constant)
}

fn without_base(law: &GrowthLaw) -> GrowthLaw {
    GrowthLaw { base: 1.0, ..*law }
}

/// Classify a parameter family given in closed form.
pub fn classify(params: &ParamFamily, law: &EnvLaw) -> Result<ScalingClass> {
    let (c, mu) = params
        .laws()
        .ok_or_else(|| Error::InvalidArgument("scaling classification needs a closed-form family".into()))?;
    if c.constant <= 0.0 {
        return invalid("scaling classification needs c_k > 0");
    }
    if c.factorial_power != 0.0 || mu.factorial_power != 0.0 {
        return invalid("factorial growth lies outside the polynomial and exponential families");
    }
    if c.base == 1.0 && mu.base == 1.0 {
        classify_polynomial(&c, &mu, law)
    } else {
        classify_exponential(&c, &mu, law)
    }
}

/// Classification for `c_k ~ k^a L_c(k)`, `μ_k ~ k^b L_μ(k)`.
pub fn classify_polynomial(c: &GrowthLaw, mu: &GrowthLaw, law: &EnvLaw) -> Result<ScalingClass> {
    if c.base != 1.0 || mu.base != 1.0 || c.constant <= 0.0 || mu.constant < 0.0 {
        return invalid("polynomial family needs unit bases, const_c > 0 and const_mu >= 0");
    }
    law.check()?;
    let k_asym = mu.asym().div(&c.asym());
    let k_limit = k_asym.limit();
    let k_value = ratio_value(mu, c, k_limit);
    let l_asym = k_asym.mul(&GrowthLaw::power(1.0, 2.0).asym());
    let l_limit = l_asym.limit();
    let l_value = ratio_value(mu, c, l_limit);
    let mut out = ScalingClass {
        family: Family::Polynomial,
        case: Case::Unresolved,
        subcase: None,
        a: c.power,
        b: mu.power,
        c_base: 1.0,
        mu_base: 1.0,
        k_limit,
        k_value,
        l_limit: Some(l_limit),
        l_value,
        fixed_point: None,
        prediction: None,
        note: String::new(),
    };
    let a = c.power;
    match (k_limit, l_limit) {
        (Limit::Infinite, _) => {
            out.case = Case::PolyA;
            out.prediction = Some(Prediction { diagnostic: Diagnostic::RatioC, value: 1.0 });
        }
        (Limit::Finite, _) => {
            let m = fixed_point(k_value.unwrap_or(0.0), law, FixedPointVariant::PolyM)?.value;
            out.case = Case::PolyB;
            out.fixed_point = Some(m);
            out.prediction = Some(Prediction { diagnostic: Diagnostic::RatioC, value: m });
        }
        (Limit::Zero, Limit::Infinite) => {
            out.case = Case::PolyC;
            out.prediction = Some(Prediction { diagnostic: Diagnostic::RatioGeometric, value: 1.0 });
        }
        (Limit::Zero, _) if a < 1.0 => {
            let l = l_value.unwrap_or(0.0);
            let m = 0.5 * (1.0 + (1.0 + 4.0 * l / ((1.0 - a) * (1.0 - a))).sqrt());
            out.case = Case::PolyD;
            out.fixed_point = Some(m);
            out.prediction = Some(Prediction { diagnostic: Diagnostic::SigmaD, value: m });
        }
        (Limit::Zero, _) if a == 1.0 => {
            out.case = Case::PolyE;
            out.note = "critical case a = 1: no scaling result is available".into();
        }
        _ => {
            out.note = "K = 0 and L < inf with a > 1: outside the scaling cases".into();
        }
    }
    Ok(out)
}

/// Classification for `c_k = c^k c̄_k`, `μ_k = μ^k μ̄_k`.
pub fn classify_exponential(c: &GrowthLaw, mu: &GrowthLaw, law: &EnvLaw) -> Result<ScalingClass> {
    if c.constant <= 0.0 || mu.constant < 0.0 || c.base <= 0.0 || mu.base <= 0.0 {
        return invalid("exponential family needs c, mu > 0, const_c > 0 and const_mu >= 0");
    }
    law.check()?;
    let (cb, mb) = (c.base, if mu.constant == 0.0 { 0.0 } else { mu.base });
    let (cbar, mbar) = (without_base(c), without_base(mu));
    let k_asym = mbar.asym().div(&cbar.asym());
    let k_limit = k_asym.limit();
    let k_value = ratio_value(&mbar, &cbar, k_limit);
    let mut out = ScalingClass {
        family: Family::Exponential,
        case: Case::Unresolved,
        subcase: None,
        a: c.power,
        b: mu.power,
        c_base: cb,
        mu_base: mb,
        k_limit,
        k_value,
        l_limit: None,
        l_value: None,
        fixed_point: None,
        prediction: None,
        note: String::new(),
    };
    let predict = |out: &mut ScalingClass, case, diagnostic, value| {
        out.case = case;
        out.prediction = Some(Prediction { diagnostic, value });
    };
    if cb < mb || (cb == mb && k_limit == Limit::Infinite) {
        predict(&mut out, Case::ExpA, Diagnostic::RatioC, 1.0 / cb);
    } else if cb == mb && k_limit == Limit::Finite {
        let m = fixed_point(k_value.unwrap_or(0.0), law, FixedPointVariant::ExpMbar { c: cb })?.value;
        out.fixed_point = Some(m);
        predict(&mut out, Case::ExpB, Diagnostic::RatioC, m / cb);
    } else if cb == mb {
        if cb < 1.0 {
            predict(&mut out, Case::ExpC1, Diagnostic::RatioC, (1.0 - cb) / cb);
        } else if cb > 1.0 {
            if k_asym.summable() {
                out.note = "c = mu > 1, Kbar = 0 with summable Kbar_k: outside the scaling cases".into();
            } else {
                predict(&mut out, Case::ExpC2, Diagnostic::RatioMu, 1.0 / (mb - 1.0));
                let kk = k_asym.mul(&GrowthLaw::power(1.0, 1.0).asym());
                out.subcase = Some(match kk.limit() {
                    Limit::Infinite => Subcase::C2Fast,
                    Limit::Finite => Subcase::C2Moderate { n_bar: mbar.constant / cbar.constant },
                    Limit::Zero => Subcase::C2Other,
                });
            }
        } else {
            out.note = "c = mu = 1 with Kbar = 0: outside the scaling cases".into();
        }
    } else if cb < 1.0 {
        predict(&mut out, Case::ExpC3, Diagnostic::SigmaD, 1.0);
        out.subcase = Some(Subcase::C3First);
    } else if cb == 1.0 && c.power < 1.0 {
        predict(&mut out, Case::ExpC3, Diagnostic::SigmaD, 1.0);
        out.subcase = Some(Subcase::C3Second);
    } else if cb == 1.0 {
        out.note = "C3 with a >= 1: no scaling result is available".into();
    } else {
        out.note = "c > max(mu, 1): outside the scaling cases".into();
    }
    Ok(out)
}

/// Numerical confirmation of a predicted limit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingVerdict {
    pub diagnostic: Diagnostic,
    pub window: (usize, usize),
    pub predicted: f64,
    /// Diagnostic value at the end of the window.
    pub observed: f64,
    pub window_min: f64,
    pub window_max: f64,
    pub gap: f64,
}

/// Compare the class's diagnostic over `window` (inclusive) against its prediction.
pub fn verify_scaling(
    trace: &VolatilityTrace,
    class: &ScalingClass,
    window: (usize, usize),
) -> Result<ScalingVerdict> {
    let pred = class
        .prediction
        .ok_or_else(|| Error::Unresolved(format!("case {:?} has no prediction", class.case)))?;
    let (lo, hi) = window;
    if lo > hi || hi > trace.kmax() {
        return Err(Error::OutOfRange(format!(
            "window ({lo}, {hi}) beyond trace of length {}",
            trace.kmax()
        )));
    }
    let diag = trace.diagnostic(pred.diagnostic);
    let slice = &diag[lo..=hi];
    let observed = diag[hi];
    Ok(ScalingVerdict {
        diagnostic: pred.diagnostic,
        window,
        predicted: pred.value,
        observed,
        window_min: slice.iter().copied().fold(f64::INFINITY, f64::min),
        window_max: slice.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        gap: (observed - pred.value).abs(),
    })
}

// ── Stability substitution ───────────────────────────────────────────────────

/// Effective homogeneous environment `r_k` and the two traces it links.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Substitution {
    /// `r_k = N_k / D_k` for `k = 0 … kmax−1`.
    pub r: Vec<f64>,
    /// Recursion under the random law.
    pub d_direct: Vec<f64>,
    /// Homogeneous recursion with `μ_k r_k` in place of `μ_k ρ`.
    pub d_substituted: Vec<f64>,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

/// Replace the random law by the constant `r_k` that yields the same `d_{k+1}`.
pub fn stability_substitution(params: &ParamFamily, law: &EnvLaw, d0: f64, kmax: usize) -> Result<Substitution> {
    let trace = recurse(params, law, d0, kmax)?;
    let atoms = law.atoms();
    let r: Vec<f64> = (0..kmax)
        .map(|k| {
            let (c, mu, d) = (trace.c[k], trace.mu[k], trace.d[k]);
            let (mut n, mut dd) = (0.0, 0.0);
            for &(rho, w) in &atoms {
                let den = c + mu * rho + d;
                n += w * c * rho / den;
                dd += w * c / den;
            }
            n / dd
        })
        .collect();
    let mut sub = Vec::with_capacity(kmax + 1);
    sub.push(d0);
    for k in 0..kmax {
        sub.push(f_map(trace.c[k], trace.mu[k] * r[k], &[(1.0, 1.0)], sub[k]));
    }
    let (mut max_abs, mut max_rel) = (0.0_f64, 0.0_f64);
    for (a, b) in trace.d.iter().zip(&sub) {
        let diff = (a - b).abs();
        max_abs = max_abs.max(diff);
        if a.abs() > 0.0 {
            max_rel = max_rel.max(diff / a.abs());
        }
    }
    Ok(Substitution { r, d_direct: trace.d, d_substituted: sub, max_abs_diff: max_abs, max_rel_diff: max_rel })
}

/// Asymptotic class of `K_k` for a closed-form family, if any.
pub fn k_asym(params: &ParamFamily) -> Option<Asym> {
    params.laws().map(|(c, mu)| mu.asym().div(&c.asym()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOLDEN: f64 = 0.618_033_988_749_894_9;

    fn two_point() -> EnvLaw {
        EnvLaw::two_point(0.5, 1.5, 0.5)
    }

    #[test]
    fn pure_migration_closed_form() {
        let p = ParamFamily::constant(1.0, 0.0);
        let t = recurse(&p, &two_point(), 1.0, 10_000).unwrap();
        for (k, d) in t.d.iter().enumerate() {
            assert!((d - 1.0 / (1.0 + k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn dirac_one_equals_homogeneous_trace() {
        let p = ParamFamily::polynomial(0.5, 0.2, 1.3, 0.7);
        let t = recurse(&p, &EnvLaw::dirac(1.0), 0.4, 200).unwrap();
        assert_eq!(t.d, t.d_one);
    }

    #[test]
    fn sandwich_for_two_point_law() {
        let p = ParamFamily::constant(1.0, 2.0);
        let t = recurse(&p, &two_point(), 1.0, 50).unwrap();
        for k in 1..=50 {
            assert!(t.d_zero[k] < t.d[k] && t.d[k] < t.d_one[k], "k = {k}");
        }
    }

    #[test]
    fn recurse_rejects_bad_input() {
        let p = ParamFamily::constant(1.0, 1.0);
        assert!(recurse(&p, &two_point(), -1.0, 5).is_err());
        let short = ParamFamily::Explicit { c: vec![1.0; 3], lambda: vec![1.0; 3] };
        assert!(recurse(&short, &two_point(), 1.0, 5).is_err());
    }

    #[test]
    fn golden_fixed_point() {
        let fp = fixed_point(1.0, &EnvLaw::dirac(1.0), FixedPointVariant::PolyM).unwrap();
        let quadratic = (-1.0 + 5f64.sqrt()) / 2.0;
        assert!((fp.value - quadratic).abs() < 1e-12);
        assert!((fp.bisection_value - GOLDEN).abs() < 1e-12);
        assert!(fp.residual < 1e-12);
        assert!(fp.beta > 0.0 && fp.beta < 1.0);
    }

    #[test]
    fn random_law_lowers_fixed_point() {
        let fp = fixed_point(1.0, &two_point(), FixedPointVariant::PolyM).unwrap();
        assert!(fp.value > 0.0 && fp.value < GOLDEN);
        assert!(fp.residual < 1e-12);
    }

    #[test]
    fn small_k_fixed_point_vanishes() {
        let law = EnvLaw::dirac(1.0);
        let m = |k: f64| fixed_point(k, &law, FixedPointVariant::PolyM).unwrap().value;
        assert!(m(1e-6) < m(1e-4) && m(1e-4) < m(1e-2));
        assert!(m(1e-8) < 2e-4);
        assert!(fixed_point(0.0, &law, FixedPointVariant::PolyM).is_err());
        assert!(fixed_point(-1.0, &law, FixedPointVariant::PolyM).is_err());
    }

    #[test]
    fn exp_fixed_point_matches_recursion() {
        // c_k = μ_k = 2^k: d_k / c_k → M̄/c with K̄ = 1.
        let p = ParamFamily::exponential(2.0, 2.0, 0.0, 0.0);
        let class = classify(&p, &two_point()).unwrap();
        assert_eq!(class.case, Case::ExpB);
        let t = recurse(&p, &two_point(), 1.0, 60).unwrap();
        let v = verify_scaling(&t, &class, (50, 60)).unwrap();
        assert!(v.gap < 1e-8, "{v:?}");
    }

    #[test]
    fn polynomial_cases() {
        let law = EnvLaw::dirac(1.0);
        let cls = |a, b, cc, cm| classify(&ParamFamily::polynomial(a, b, cc, cm), &law).unwrap();
        assert_eq!(cls(0.0, 1.0, 1.0, 1.0).case, Case::PolyA);
        let b = cls(1.0, 1.0, 2.0, 1.0);
        assert_eq!(b.case, Case::PolyB);
        assert_eq!(b.k_value, Some(0.5));
        let m = fixed_point(0.5, &law, FixedPointVariant::PolyM).unwrap().value;
        assert_eq!(b.fixed_point, Some(m));
        assert_eq!(cls(0.0, -1.0, 1.0, 1.0).case, Case::PolyC);
        let d = cls(0.0, -2.0, 1.0, 4.0);
        assert_eq!(d.case, Case::PolyD);
        assert!((d.fixed_point.unwrap() - 0.5 * (1.0 + 17f64.sqrt())).abs() < 1e-15);
        let e = cls(1.0, -1.0, 1.0, 1.0);
        assert_eq!(e.case, Case::PolyE);
        assert!(!e.is_resolved());
        assert_eq!(cls(2.0, 0.0, 1.0, 1.0).case, Case::Unresolved);
    }

    #[test]
    fn log_factors_decide_boundaries() {
        let law = EnvLaw::dirac(1.0);
        let c = GrowthLaw::constant(1.0);
        let mu = GrowthLaw { log_power: 1.0, ..GrowthLaw::constant(1.0) };
        assert_eq!(classify_polynomial(&c, &mu, &law).unwrap().case, Case::PolyA);
        let mu = GrowthLaw { log_power: 1.0, ..GrowthLaw::power(1.0, -2.0) };
        assert_eq!(classify_polynomial(&c, &mu, &law).unwrap().case, Case::PolyC);
    }

    #[test]
    fn exponential_cases() {
        let law = EnvLaw::dirac(1.0);
        let cls = |c, m, a, b| classify(&ParamFamily::exponential(c, m, a, b), &law).unwrap();
        let a = cls(2.0, 3.0, 0.0, 0.0);
        assert_eq!(a.case, Case::ExpA);
        assert_eq!(a.prediction.unwrap().value, 0.5);
        assert_eq!(cls(2.0, 2.0, 0.0, 1.0).case, Case::ExpA);
        let c1 = cls(0.5, 0.5, 0.0, -1.0);
        assert_eq!(c1.case, Case::ExpC1);
        assert_eq!(c1.prediction.unwrap().value, 1.0);
        let c2 = cls(2.0, 2.0, 0.0, -0.5);
        assert_eq!((c2.case, c2.subcase), (Case::ExpC2, Some(Subcase::C2Fast)));
        let c2m = cls(2.0, 2.0, 0.0, -1.0);
        assert_eq!(c2m.subcase, Some(Subcase::C2Moderate { n_bar: 1.0 }));
        assert_eq!(cls(2.0, 2.0, 0.0, -2.0).case, Case::Unresolved);
        assert_eq!(cls(0.5, 0.25, 0.0, 0.0).subcase, Some(Subcase::C3First));
        assert_eq!(cls(1.0, 0.5, 0.5, 0.0).subcase, Some(Subcase::C3Second));
        assert_eq!(cls(1.0, 0.5, 1.0, 0.0).case, Case::Unresolved);
        assert_eq!(cls(3.0, 1.0, 0.0, 0.0).case, Case::Unresolved);
    }

    #[test]
    fn classify_rejects_explicit() {
        let p = ParamFamily::Explicit { c: vec![1.0], lambda: vec![1.0] };
        assert!(classify(&p, &EnvLaw::dirac(1.0)).is_err());
    }

    #[test]
    fn case_b_converges_geometrically() {
        let p = ParamFamily::constant(1.0, 2.0);
        let class = classify(&p, &EnvLaw::dirac(1.0)).unwrap();
        let t = recurse(&p, &EnvLaw::dirac(1.0), 1.0, 200).unwrap();
        let v = verify_scaling(&t, &class, (150, 200)).unwrap();
        assert!(v.gap < 1e-6);
        assert!((v.predicted - GOLDEN).abs() < 1e-12);
    }

    #[test]
    fn case_a_ratio_below_one() {
        let p = ParamFamily::polynomial(0.0, 1.0, 1.0, 1.0);
        let class = classify(&p, &two_point()).unwrap();
        let t = recurse(&p, &two_point(), 1.0, 1000).unwrap();
        let r = t.ratio_c(1000);
        assert!(r > 1.0 - 1e-2 && r <= 1.0);
        assert!(verify_scaling(&t, &class, (900, 1000)).unwrap().gap < 1e-2);
    }

    #[test]
    fn case_c_ratio() {
        let p = ParamFamily::polynomial(0.0, -1.0, 1.0, 1.0);
        let class = classify(&p, &two_point()).unwrap();
        let t = recurse(&p, &two_point(), 1.0, 20_000).unwrap();
        let v = verify_scaling(&t, &class, (10_000, 20_000)).unwrap();
        assert!(v.gap < 2e-2, "{v:?}");
    }

    #[test]
    fn window_beyond_trace_is_error() {
        let p = ParamFamily::constant(1.0, 2.0);
        let class = classify(&p, &EnvLaw::dirac(1.0)).unwrap();
        let t = recurse(&p, &EnvLaw::dirac(1.0), 1.0, 10).unwrap();
        assert!(verify_scaling(&t, &class, (5, 11)).is_err());
    }

    #[test]
    fn substitution_dirac_is_identity() {
        let s = stability_substitution(&ParamFamily::constant(1.0, 1.0), &EnvLaw::dirac(1.0), 1.0, 50).unwrap();
        assert!(s.r.iter().all(|&r| (r - 1.0).abs() < 1e-15));
    }

    #[test]
    fn substitution_r_tends_to_one() {
        let p = ParamFamily::polynomial(0.0, -2.0, 1.0, 1.0);
        let s = stability_substitution(&p, &two_point(), 1.0, 1000).unwrap();
        assert!((s.r[999] - 1.0).abs() < 1e-2);
        assert!(s.max_abs_diff < 1e-12);
    }

    fn arb_params() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(0.1f64..5.0, 40),
            proptest::collection::vec(0.01f64..5.0, 40),
        )
    }

    fn arb_law() -> impl Strategy<Value = EnvLaw> {
        (0.05f64..0.95, 0.05f64..0.95).prop_map(|(lo, p)| {
            // Mean one: p·lo + (1−p)·hi = 1.
            let hi = (1.0 - p * lo) / (1.0 - p);
            EnvLaw::two_point(lo, hi, p)
        })
    }

    proptest! {
        #[test]
        fn sandwich_holds((c, mu) in arb_params(), law in arb_law(), d0 in 0.0f64..3.0) {
            let lambda = mu.iter().map(|m| 2.0 * m).collect();
            let p = ParamFamily::Explicit { c, lambda };
            let t = recurse(&p, &law, d0, 39).unwrap();
            for k in 1..=39 {
                prop_assert!(t.d_zero[k] < t.d[k] && t.d[k] < t.d_one[k]);
            }
        }

        #[test]
        fn maps_are_increasing_and_concave(c in 0.1f64..5.0, mu in 0.0f64..5.0, law in arb_law()) {
            let atoms = law.atoms();
            let h = 0.05;
            let mut prev_slope = f64::INFINITY;
            for i in 0..40 {
                let x = i as f64 * h;
                let slope = (f_map(c, mu, &atoms, x + h) - f_map(c, mu, &atoms, x)) / h;
                prop_assert!(slope > 0.0);
                prop_assert!(slope < prev_slope);
                prev_slope = slope;
            }
        }

        #[test]
        fn monotone_in_parameters((c, mu) in arb_params(), law in arb_law(), l in 0usize..20, bump in 0.01f64..1.0, which in any::<bool>()) {
            let lambda: Vec<f64> = mu.iter().map(|m| 2.0 * m).collect();
            let base = ParamFamily::Explicit { c: c.clone(), lambda: lambda.clone() };
            let (mut c2, mut l2) = (c, lambda);
            if which { c2[l] += bump } else { l2[l] += 2.0 * bump }
            let bumped = ParamFamily::Explicit { c: c2, lambda: l2 };
            let t0 = recurse(&base, &law, 1.0, 39).unwrap();
            let t1 = recurse(&bumped, &law, 1.0, 39).unwrap();
            for k in 0..=39 {
                prop_assert!(t1.d[k] >= t0.d[k] - 1e-15);
            }
        }

        #[test]
        fn fixed_point_certificates(k in 0.01f64..50.0, law in arb_law()) {
            let fp = fixed_point(k, &law, FixedPointVariant::PolyM).unwrap();
            prop_assert!(fp.residual < 1e-12);
            prop_assert!(fp.beta > 0.0 && fp.beta < 1.0);
            let hom = fixed_point(k, &EnvLaw::dirac(1.0), FixedPointVariant::PolyM).unwrap();
            prop_assert!(fp.value < hom.value);
        }

        #[test]
        fn exp_fixed_point_certificates(k in 0.01f64..20.0, c in 1.01f64..5.0, law in arb_law()) {
            let fp = fixed_point(k, &law, FixedPointVariant::ExpMbar { c }).unwrap();
            prop_assert!(fp.residual < 1e-12);
            prop_assert!(fp.value > 0.0 && fp.value < 1.0);
            prop_assert!(fp.beta > 0.0 && fp.beta < 1.0);
        }

        #[test]
        fn substitution_reproduces_recursion((c, mu) in arb_params(), law in arb_law(), d0 in 0.0f64..3.0) {
            let lambda = mu.iter().map(|m| 2.0 * m).collect();
            let p = ParamFamily::Explicit { c, lambda };
            let s = stability_substitution(&p, &law, d0, 39).unwrap();
            prop_assert!(s.max_abs_diff < 1e-12);
        }
    }
}
