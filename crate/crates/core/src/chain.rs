//! Interaction chains: variance profiles, cluster classes and their scaling limits.
//!
//! The level-`j` interaction chain started in θ has
//! `var⟨M^{(j)}_{η,0}, f⟩ = Π_{k≤j} 2c_k/(2c_k + λ_kρ_k + 2d_k) · var_θ(f)`.
//! In the clustering regime the scaling class of `d_k` selects one of five
//! universality classes, each with an explicit description of its limit.

use rayon::prelude::*;
use serde::Serialize;

use crate::environment::{EnvLaw, EnvSpec, Environment, ParamFamily};
use crate::error::{invalid, Error, Result};
use crate::hiergroup::HierAddress;
use crate::renorm::{recurse, Case, ScalingClass, Subcase, VolatilityTrace};
use crate::rng::mix_pair;

/// Convergence-mode caveat attached to the diffusive classes.
pub const PROBABILITY_CAVEAT: &str = "convergence holds in P-probability, not P-a.s.";

// ── Variance profile ─────────────────────────────────────────────────────────

/// Per-level variance factors of an interaction chain and their running products.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceProfile {
    pub j: usize,
    /// `ρ_k` read at the height-`k` ancestor of η, `k = 0..=j`.
    pub rho: Vec<f64>,
    pub factors_quenched: Vec<f64>,
    pub factors_annealed: Vec<f64>,
    /// `Π_{l≤k}` of the quenched factors.
    pub product_quenched: Vec<f64>,
    pub product_annealed: Vec<f64>,
}

impl VarianceProfile {
    /// `var⟨M^{(j)}_{η,0}, f⟩` given `var_θ(f)`.
    pub fn variance(&self, var_theta: f64) -> f64 {
        self.product_quenched[self.j] * var_theta
    }
}

fn factor(c: f64, lambda: f64, rho: f64, d: f64) -> f64 {
    2.0 * c / (2.0 * c + lambda * rho + 2.0 * d)
}

fn running_product(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .scan(1.0, |acc, x| {
            *acc *= x;
            Some(*acc)
        })
        .collect()
}

/// Variance factors for levels `0..=j` along the ancestors of `eta`.
pub fn variance_profile(env: &Environment, trace: &VolatilityTrace, j: usize, eta: &HierAddress) -> Result<VarianceProfile> {
    if j > trace.kmax() {
        return Err(Error::OutOfRange(format!("level {j} exceeds the volatility trace (kmax = {})", trace.kmax())));
    }
    if let Some(k) = (0..=j).find(|&k| trace.c[k] <= 0.0) {
        return invalid(format!("c_{k} must be positive for the variance profile"));
    }
    let rho: Vec<f64> = (0..=j).map(|k| env.rho_at_digits(eta.order(), eta.digits(), k)).collect();
    let quenched: Vec<f64> = (0..=j).map(|k| factor(trace.c[k], 2.0 * trace.mu[k], rho[k], trace.d[k])).collect();
    let annealed: Vec<f64> = (0..=j).map(|k| factor(trace.c[k], 2.0 * trace.mu[k], 1.0, trace.d[k])).collect();
    Ok(VarianceProfile {
        j,
        rho,
        product_quenched: running_product(&quenched),
        product_annealed: running_product(&annealed),
        factors_quenched: quenched,
        factors_annealed: annealed,
    })
}

// ── Cluster classes ──────────────────────────────────────────────────────────

/// Universality class of cluster formation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ClusterRegime {
    I1,
    I2,
    II1,
    II2,
    II3,
}

/// Scale `h(j)` of the fast-clustering window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowScale {
    /// `h(j) = 1/√K_j`
    InvSqrtK,
    /// `h(j) = 1/K̄_j`
    InvKbar,
}

/// The family of level scalings `k_α(j)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevelScaling {
    /// `k_α(j) = 0 ∨ (j+1−α)`, `α ∈ ℕ₀`.
    Shift,
    /// `k_α(j) = 0 ∨ ⌊j+1−α h(j)⌋`, `α ≥ 0`.
    Fast { h: WindowScale },
    /// `k_α(j) = ⌊(1−α)(j+1)⌋`, `α ∈ [0,1)`.
    Moderate,
}

/// Time change of the limiting standard Fleming–Viot process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeChange {
    /// `ℓ(α) = slope · α`.
    Linear { slope: f64 },
    /// `ℓ(α) = log(1/(1−α)^R)`.
    Power { r: f64 },
}

impl TimeChange {
    pub fn at(&self, alpha: f64) -> f64 {
        match *self {
            TimeChange::Linear { slope } => slope * alpha,
            TimeChange::Power { r } => -r * (-alpha).ln_1p(),
        }
    }
}

/// Description of the scaling limit `M*`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LimitProcess {
    /// Chain trapped after one step: `K(θ,·) = ∫θ(du) δ_{δ_u}`.
    Trap,
    /// Chain with kernels `ν^{1, M̃, 2K̃χ_α}_θ`; `environment_driven` is false
    /// when `K̃ = 0` and the environment drops out.
    EnvironmentChain { m_tilde: f64, k_tilde: f64, environment_driven: bool },
    /// Time-changed standard Fleming–Viot process `Z^{0,1,0}_θ(ℓ(α))`.
    FlemingViot { time_change: TimeChange },
}

/// Cluster-formation class derived from a scaling class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterClass {
    pub regime: ClusterRegime,
    pub case: Case,
    pub subcase: Option<Subcase>,
    pub scaling: LevelScaling,
    pub limit: LimitProcess,
    pub caveat: Option<String>,
}

impl ClusterClass {
    /// `h(j)` for fast clustering, using `K_j = μ_j/c_j` (equal to `K̄_j` when `c = μ`).
    pub fn h(&self, params: &ParamFamily, j: usize) -> Option<f64> {
        let LevelScaling::Fast { h } = self.scaling else { return None };
        let k = params.lambda_opt(j)? / (2.0 * params.c_opt(j)?);
        Some(match h {
            WindowScale::InvSqrtK => 1.0 / k.sqrt(),
            WindowScale::InvKbar => 1.0 / k,
        })
    }

    /// `k_α(j)`.
    pub fn k_alpha(&self, params: &ParamFamily, alpha: f64, j: usize) -> Option<usize> {
        let x = match self.scaling {
            LevelScaling::Shift => j as f64 + 1.0 - alpha.floor(),
            LevelScaling::Fast { .. } => j as f64 + 1.0 - alpha * self.h(params, j)?,
            LevelScaling::Moderate => (1.0 - alpha) * (j as f64 + 1.0),
        };
        Some(x.floor().max(0.0) as usize)
    }
}

/// The trap kernel `K(θ,·)`: atoms `δ_{e_i}` with weights `θ_i`.
pub fn trap_kernel(theta: &[f64]) -> Vec<(Vec<f64>, f64)> {
    (0..theta.len())
        .map(|i| {
            let mut point = vec![0.0; theta.len()];
            point[i] = 1.0;
            (point, theta[i])
        })
        .collect()
}

/// Map a scaling class to its cluster-formation class.
pub fn cluster_class(scaling: &ScalingClass) -> Result<ClusterClass> {
    let no_class = |why: &str| Err(Error::Unresolved(format!("no classification: {why}")));
    let caveat = Some(PROBABILITY_CAVEAT.to_string());
    let mu = scaling.mu_base;
    let (regime, level, limit, caveat) = match (scaling.case, scaling.subcase) {
        (Case::PolyA | Case::ExpA, _) => (ClusterRegime::I1, LevelScaling::Shift, LimitProcess::Trap, None),
        (Case::PolyB, _) => {
            let m = scaling.fixed_point.ok_or_else(|| Error::Unresolved("case (b) without fixed point".into()))?;
            let k = scaling.k_value.unwrap_or(0.0);
            (ClusterRegime::I2, LevelScaling::Shift, environment_chain(m, k), None)
        }
        (Case::ExpB, _) => {
            let m = scaling.fixed_point.ok_or_else(|| Error::Unresolved("case (B) without fixed point".into()))?;
            let k = scaling.k_value.unwrap_or(0.0);
            (ClusterRegime::I2, LevelScaling::Shift, environment_chain(m / scaling.c_base, k), None)
        }
        (Case::ExpC1, _) | (Case::ExpC3, Some(Subcase::C3First)) => {
            let c = scaling.c_base;
            (ClusterRegime::I2, LevelScaling::Shift, environment_chain((1.0 - c) / c, 0.0), None)
        }
        (Case::PolyC, _) => (
            ClusterRegime::II1,
            LevelScaling::Fast { h: WindowScale::InvSqrtK },
            LimitProcess::FlemingViot { time_change: TimeChange::Linear { slope: 1.0 } },
            caveat,
        ),
        (Case::ExpC2, Some(Subcase::C2Fast)) => (
            ClusterRegime::II1,
            LevelScaling::Fast { h: WindowScale::InvKbar },
            LimitProcess::FlemingViot { time_change: TimeChange::Linear { slope: mu / (mu - 1.0) } },
            caveat,
        ),
        (Case::PolyD, _) => {
            let m = scaling.fixed_point.ok_or_else(|| Error::Unresolved("case (d) without constant M".into()))?;
            (ClusterRegime::II2, LevelScaling::Moderate, power_fv(m * (1.0 - scaling.a)), caveat)
        }
        (Case::ExpC2, Some(Subcase::C2Moderate { n_bar })) => {
            (ClusterRegime::II2, LevelScaling::Moderate, power_fv(n_bar * mu / (mu - 1.0)), caveat)
        }
        (Case::ExpC3, Some(Subcase::C3Second)) => {
            (ClusterRegime::II2, LevelScaling::Moderate, power_fv(1.0 - scaling.a), caveat)
        }
        (Case::PolyE, _) => return no_class("case (e) is expected to show slow clustering (II3); no scaling limit is known"),
        (Case::ExpC2, _) => return no_class("case C2 without a limit of k K̄_k"),
        _ => return no_class(&format!("scaling class is unresolved ({})", scaling.note)),
    };
    Ok(ClusterClass { regime, case: scaling.case, subcase: scaling.subcase, scaling: level, limit, caveat })
}

fn environment_chain(m_tilde: f64, k_tilde: f64) -> LimitProcess {
    LimitProcess::EnvironmentChain { m_tilde, k_tilde, environment_driven: k_tilde > 0.0 }
}

fn power_fv(r: f64) -> LimitProcess {
    LimitProcess::FlemingViot { time_change: TimeChange::Power { r } }
}

// ── Δ(j) ─────────────────────────────────────────────────────────────────────

/// Finite-`j` increment `Δ(j)` of the time change against its limit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaReport {
    pub j: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Summation window `j1..=j2` (empty when `j1 > j2`).
    pub window: (usize, usize),
    /// Δ(j) with the asymptotic forms of `d_k` substituted.
    pub delta: f64,
    /// Δ(j) with `d_k` from the volatility recursion.
    pub delta_recursion: f64,
    pub limit: f64,
    pub gap: f64,
    pub gap_recursion: f64,
}

/// Summand and exponent rate of the substituted Δ-sum.
struct DeltaForm {
    weight: Box<dyn Fn(usize) -> f64>,
    rate: Box<dyn Fn(usize) -> f64>,
}

fn window_sum(form: &DeltaForm, j1: usize, j2: usize) -> f64 {
    let (mut total, mut exponent) = (0.0_f64, 0.0_f64);
    for k in (j1..=j2).rev() {
        total += (form.weight)(k) * (-exponent).exp();
        exponent += (form.rate)(k);
    }
    total
}

/// Evaluate Δ(j) for `α2 ≤ α1` and compare it with its closed-form limit.
///
/// The recursion variant iterates `d` from `d0` under the environment `law`.
pub fn delta_limit(
    params: &ParamFamily,
    law: &EnvLaw,
    d0: f64,
    class: &ScalingClass,
    alpha1: f64,
    alpha2: f64,
    j: usize,
) -> Result<DeltaReport> {
    if !(alpha2 >= 0.0 && alpha1 >= alpha2 && alpha1.is_finite()) {
        return invalid(format!("need 0 <= alpha2 <= alpha1, got ({alpha1}, {alpha2})"));
    }
    let cluster = cluster_class(class)?;
    let kk = |k: usize| params.mu(k) / params.c(k);
    let jf = j as f64 + 1.0;
    let (x1, x2, form, limit): (f64, f64, DeltaForm, f64) = match (cluster.scaling, cluster.limit) {
        (LevelScaling::Fast { h: WindowScale::InvSqrtK }, _) => {
            let h = 1.0 / kk(j).sqrt();
            let p = params.clone();
            let q = params.clone();
            let form = DeltaForm {
                weight: Box::new(move |k| (p.mu(k) / p.c(k)).sqrt()),
                rate: Box::new(move |l| {
                    let x = q.mu(l) / q.c(l);
                    x + x.sqrt()
                }),
            };
            (jf - alpha1 * h, jf - alpha2 * h, form, -(-(alpha1 - alpha2)).exp_m1())
        }
        (LevelScaling::Fast { h: WindowScale::InvKbar }, LimitProcess::FlemingViot { time_change: TimeChange::Linear { slope } }) => {
            let h = 1.0 / kk(j);
            let p = params.clone();
            let q = params.clone();
            let form = DeltaForm {
                weight: Box::new(move |k| slope * p.mu(k) / p.c(k)),
                rate: Box::new(move |l| slope * q.mu(l) / q.c(l)),
            };
            (jf - alpha1 * h, jf - alpha2 * h, form, -(-slope * (alpha1 - alpha2)).exp_m1())
        }
        (LevelScaling::Moderate, LimitProcess::FlemingViot { time_change: TimeChange::Power { r } }) => {
            if alpha1 > 1.0 {
                return invalid(format!("moderate clustering needs alpha1 <= 1, got {alpha1}"));
            }
            let p = params.clone();
            let form = match class.subcase {
                // k K̄_k → N̄: both summand and rate are (μ/(μ−1)) K̄_k ≈ R/k.
                Some(Subcase::C2Moderate { .. }) => {
                    let q = params.clone();
                    let slope = class.mu_base / (class.mu_base - 1.0);
                    DeltaForm {
                        weight: Box::new(move |k| slope * p.mu(k) / p.c(k)),
                        rate: Box::new(move |l| slope * q.mu(l) / q.c(l)),
                    }
                }
                _ => DeltaForm {
                    weight: Box::new(move |k| r / k as f64),
                    rate: Box::new(move |l| p.mu(l) / p.c(l) + r / l as f64),
                },
            };
            let ratio = if alpha1 >= 1.0 { 0.0 } else { (1.0 - alpha1) / (1.0 - alpha2) };
            (((1.0 - alpha1) * jf).max(0.0), (1.0 - alpha2) * jf, form, 1.0 - ratio.powf(r))
        }
        _ => return Err(Error::Unresolved(format!("regime {:?} has no Δ-limit", cluster.regime))),
    };
    let moderate = cluster.scaling == LevelScaling::Moderate;
    let j1 = (x1.max(0.0).floor() as usize + 1).max(usize::from(moderate));
    let j2 = x2.max(0.0).floor() as usize;
    params.ensure_covers(j2 + 2)?;
    let (delta, delta_recursion) = if j1 > j2 {
        (0.0, 0.0)
    } else {
        let trace = recurse(params, law, d0, j2 + 1)?;
        let rec = DeltaForm {
            weight: {
                let (d, c) = (trace.d.clone(), trace.c.clone());
                Box::new(move |k| d[k + 1] / c[k])
            },
            rate: {
                let (d, c, mu) = (trace.d.clone(), trace.c.clone(), trace.mu.clone());
                Box::new(move |l| (mu[l] + d[l]) / c[l])
            },
        };
        (window_sum(&form, j1, j2), window_sum(&rec, j1, j2))
    };
    Ok(DeltaReport {
        j,
        alpha1,
        alpha2,
        window: (j1, j2),
        delta,
        delta_recursion,
        limit,
        gap: (delta - limit).abs(),
        gap_recursion: (delta_recursion - limit).abs(),
    })
}

// ── Weak law of large numbers along the spine ────────────────────────────────

/// Statistics of `S(j1,j2)/E[S(j1,j2)]` over environment replicas.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WllnWindow {
    pub j1: usize,
    pub j2: usize,
    /// `E[S(j1,j2)] = Σ_k (μ_k E[ρ] + d_k)/c_k`.
    pub expected: f64,
    pub mean_ratio: f64,
    /// Unbiased sample variance of the ratio.
    pub var_ratio: f64,
    /// `max_k χ_k(j1,j2)` with `χ_k = (μ_k/c_k)/E[S]`.
    pub chi_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WllnReport {
    pub replicas: usize,
    pub windows: Vec<WllnWindow>,
}

/// Sample `S(j1,j2)(ω) = Σ_{k=j1}^{j2} (μ_kρ_k(ω) + d_k)/c_k` along the ancestors
/// of the origin for each `j2` in `j2s`, over `replicas` independent environments.
pub fn wlln_check(
    spec: &EnvSpec,
    order: u32,
    d0: f64,
    j1: usize,
    j2s: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<WllnReport> {
    if replicas < 2 {
        return invalid("need at least two environment replicas");
    }
    if j2s.is_empty() || j2s.iter().any(|&j2| j2 <= j1) {
        return invalid(format!("every j2 must exceed j1 = {j1}"));
    }
    if order < 2 {
        return invalid(format!("order N = {order} must be at least 2"));
    }
    let jmax = *j2s.iter().max().expect("non-empty");
    let trace = recurse(&spec.params, &spec.law, d0, jmax)?;
    if trace.c.iter().any(|&c| c <= 0.0) {
        return invalid("c_k must be positive");
    }
    let term = |k: usize, rho: f64| (trace.mu[k] * rho + trace.d[k]) / trace.c[k];
    let mean_rho = spec.law.mean();
    let samples: Vec<Vec<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let env = Environment::new(spec.clone(), mix_pair(seed, r)).expect("validated spec");
            j2s.iter()
                .map(|&j2| (j1..=j2).map(|k| term(k, env.rho_at_digits(order, &[], k))).sum())
                .collect()
        })
        .collect();
    let windows = j2s
        .iter()
        .enumerate()
        .map(|(i, &j2)| {
            let expected: f64 = (j1..=j2).map(|k| term(k, mean_rho)).sum();
            let ratios: Vec<f64> = samples.iter().map(|s| s[i] / expected).collect();
            let n = ratios.len() as f64;
            let mean = ratios.iter().sum::<f64>() / n;
            let var = ratios.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let chi_max = (j1..=j2).map(|k| trace.mu[k] / trace.c[k]).fold(0.0, f64::max) / expected;
            WllnWindow { j1, j2, expected, mean_ratio: mean, var_ratio: var, chi_max }
        })
        .collect();
    Ok(WllnReport { replicas, windows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::{classify_limit, Regime};
    use crate::environment::AtomMeasure;
    use crate::growth::GrowthLaw;
    use crate::renorm::classify;
    use proptest::prelude::*;

    fn spec(params: ParamFamily, law: EnvLaw) -> EnvSpec {
        EnvSpec { law, chi: AtomMeasure::default(), params }
    }

    fn two_point() -> EnvLaw {
        EnvLaw::two_point(0.5, 1.5, 0.5)
    }

    fn profile(params: &ParamFamily, law: EnvLaw, d0: f64, j: usize, seed: u64) -> VarianceProfile {
        let trace = recurse(params, &law, d0, j).unwrap();
        let env = Environment::new(spec(params.clone(), law), seed).unwrap();
        let eta = HierAddress::new(3, vec![1, 2, 0, 1]).unwrap();
        variance_profile(&env, &trace, j, &eta).unwrap()
    }

    #[test]
    fn no_resampling_keeps_variance() {
        let p = profile(&ParamFamily::constant(1.0, 0.0), two_point(), 0.0, 50, 1);
        assert!(p.factors_quenched.iter().chain(&p.product_annealed).all(|&f| f == 1.0));
        assert_eq!(p.variance(0.25), 0.25);
    }

    #[test]
    fn dirac_environment_is_annealed() {
        let params = ParamFamily::polynomial(0.5, 0.0, 1.0, 0.7);
        let p = profile(&params, EnvLaw::dirac(1.0), 0.3, 200, 4);
        assert_eq!(p.factors_quenched, p.factors_annealed);
        assert_eq!(p.product_quenched, p.product_annealed);
    }

    #[test]
    fn profile_rejects_long_levels() {
        let params = ParamFamily::constant(1.0, 1.0);
        let trace = recurse(&params, &two_point(), 0.0, 10).unwrap();
        let env = Environment::new(spec(params, two_point()), 0).unwrap();
        let err = variance_profile(&env, &trace, 11, &HierAddress::zero(2).unwrap()).unwrap_err();
        assert!(matches!(err, Error::OutOfRange(_)));
    }

    #[test]
    fn product_vanishes_iff_clustering() {
        // c_k = 2^k overflows beyond k = 1023, long after its product has settled.
        let families = [
            (ParamFamily::constant(1.0, 1.0), 100_000),
            (ParamFamily::polynomial(0.5, 0.0, 1.0, 0.5), 100_000),
            (ParamFamily::Growth { c: GrowthLaw::power(1.0, 2.0), mu: GrowthLaw::constant(0.5) }, 100_000),
            (ParamFamily::Growth { c: GrowthLaw::exponential(1.0, 2.0, 0.0), mu: GrowthLaw::constant(0.5) }, 1000),
            (ParamFamily::Growth { c: GrowthLaw::power(1.0, 3.0), mu: GrowthLaw::constant(0.5) }, 100_000),
        ];
        for (params, end) in families {
            let regime = classify_limit(&params).unwrap().regime;
            let mid = end / 100;
            let p = profile(&params, two_point(), 0.0, end, 7);
            let (mid, end) = (p.product_quenched[mid], p.product_quenched[end]);
            match regime {
                Regime::Clustering => assert!(end < 0.5 * mid, "{params:?}: {mid} -> {end}"),
                Regime::Coexistence => assert!(end > 0.99 * mid && end > 0.0, "{params:?}: {mid} -> {end}"),
                Regime::Undecided => panic!("closed form must be decided"),
            }
        }
    }

    #[test]
    fn class_mapping_examples() {
        let law = EnvLaw::dirac(1.0);
        let a = cluster_class(&classify(&ParamFamily::polynomial(0.0, 1.0, 1.0, 1.0), &law).unwrap()).unwrap();
        assert_eq!((a.regime, a.limit), (ClusterRegime::I1, LimitProcess::Trap));

        let b_scaling = classify(&ParamFamily::constant(1.0, 2.0), &law).unwrap();
        let b = cluster_class(&b_scaling).unwrap();
        assert_eq!(b.regime, ClusterRegime::I2);
        let LimitProcess::EnvironmentChain { m_tilde, k_tilde, environment_driven } = b.limit else { panic!() };
        assert_eq!((m_tilde, k_tilde), (b_scaling.fixed_point.unwrap(), 1.0));
        assert!(environment_driven && b.caveat.is_none());

        // μ_k = 2/(k+1)² gives L = 2 and M = ½(1 + √9) = 2.
        let d = cluster_class(&classify(&ParamFamily::polynomial(0.0, -2.0, 1.0, 2.0), &law).unwrap()).unwrap();
        assert_eq!(d.regime, ClusterRegime::II2);
        let LimitProcess::FlemingViot { time_change: TimeChange::Power { r } } = d.limit else { panic!() };
        assert!((r - 2.0).abs() < 1e-9);
        assert_eq!(d.caveat.as_deref(), Some(PROBABILITY_CAVEAT));

        let c = cluster_class(&classify(&ParamFamily::polynomial(0.0, -1.0, 1.0, 1.0), &law).unwrap()).unwrap();
        assert_eq!(c.regime, ClusterRegime::II1);
        assert_eq!(c.limit, LimitProcess::FlemingViot { time_change: TimeChange::Linear { slope: 1.0 } });
    }

    #[test]
    fn exponential_classes() {
        let law = EnvLaw::dirac(1.0);
        let c1 = classify(&ParamFamily::exponential(0.5, 0.5, 0.0, -1.0), &law).unwrap();
        let cc = cluster_class(&c1).unwrap();
        assert_eq!(cc.regime, ClusterRegime::I2);
        assert_eq!(cc.limit, LimitProcess::EnvironmentChain { m_tilde: 1.0, k_tilde: 0.0, environment_driven: false });

        let fast = cluster_class(&classify(&ParamFamily::exponential(2.0, 2.0, 0.0, -0.5), &law).unwrap()).unwrap();
        assert_eq!(fast.regime, ClusterRegime::II1);
        assert_eq!(fast.limit, LimitProcess::FlemingViot { time_change: TimeChange::Linear { slope: 2.0 } });

        let moderate = classify(&ParamFamily::exponential(2.0, 2.0, 0.0, -1.0), &law).unwrap();
        let m = cluster_class(&moderate).unwrap();
        let LimitProcess::FlemingViot { time_change: TimeChange::Power { r } } = m.limit else { panic!() };
        assert!((r - 2.0).abs() < 1e-12);

        let second = classify(&ParamFamily::exponential(1.0, 0.5, 0.5, 0.0), &law).unwrap();
        let s = cluster_class(&second).unwrap();
        assert_eq!(s.limit, LimitProcess::FlemingViot { time_change: TimeChange::Power { r: 0.5 } });
    }

    #[test]
    fn unresolved_classes_have_no_classification() {
        let law = EnvLaw::dirac(1.0);
        let e = classify(&ParamFamily::polynomial(1.0, -1.5, 1.0, 1.0), &law).unwrap();
        assert!(matches!(cluster_class(&e), Err(Error::Unresolved(m)) if m.contains("II3")));
        let outside = classify(&ParamFamily::polynomial(2.0, -1.0, 1.0, 1.0), &law).unwrap();
        assert!(matches!(cluster_class(&outside), Err(Error::Unresolved(_))));
    }

    #[test]
    fn trap_kernel_preserves_mean() {
        let theta = [0.2, 0.5, 0.3];
        let kernel = trap_kernel(&theta);
        let mean: Vec<f64> = (0..3).map(|i| kernel.iter().map(|(p, w)| w * p[i]).sum()).collect();
        assert_eq!(mean, theta);
        assert!((kernel.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn level_scalings() {
        let law = EnvLaw::dirac(1.0);
        let params = ParamFamily::polynomial(0.0, -1.0, 1.0, 1.0);
        let c = cluster_class(&classify(&params, &law).unwrap()).unwrap();
        // K_99 = 1/100, so h(99) = 10.
        assert!((c.h(&params, 99).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(c.k_alpha(&params, 2.5, 99), Some(75));
        assert_eq!(c.k_alpha(&params, 50.0, 99), Some(0));
        let shift = ClusterClass { scaling: LevelScaling::Shift, ..c.clone() };
        assert_eq!(shift.k_alpha(&params, 3.0, 10), Some(8));
        let moderate = ClusterClass { scaling: LevelScaling::Moderate, ..c };
        assert_eq!(moderate.k_alpha(&params, 0.5, 99), Some(50));
        assert!((TimeChange::Power { r: 2.0 }.at(0.5) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    fn case_c() -> (ParamFamily, ScalingClass) {
        let params = ParamFamily::polynomial(0.0, -1.0, 1.0, 1.0);
        let class = classify(&params, &EnvLaw::dirac(1.0)).unwrap();
        (params, class)
    }

    fn case_d() -> (ParamFamily, ScalingClass) {
        let params = ParamFamily::polynomial(0.0, -2.0, 1.0, 0.0);
        let class = classify(&params, &EnvLaw::dirac(1.0)).unwrap();
        (params, class)
    }

    #[test]
    fn delta_case_c_limit() {
        let (params, class) = case_c();
        let r = delta_limit(&params, &EnvLaw::dirac(1.0), 1.0, &class, 1.0, 0.0, 1000).unwrap();
        assert!((r.limit - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!(r.gap < 1e-2, "{r:?}");
        assert!(r.gap_recursion < 1e-2, "{r:?}");
    }

    #[test]
    fn delta_case_d_limit() {
        let (params, class) = case_d();
        assert_eq!(class.fixed_point, Some(1.0));
        let r = delta_limit(&params, &EnvLaw::dirac(1.0), 1.0, &class, 0.5, 0.0, 1000).unwrap();
        assert_eq!(r.limit, 0.5);
        assert!(r.gap < 1e-2 && r.gap_recursion < 1e-2, "{r:?}");
    }

    #[test]
    fn delta_empty_window() {
        let (params, class) = case_c();
        let r = delta_limit(&params, &EnvLaw::dirac(1.0), 1.0, &class, 0.7, 0.7, 500).unwrap();
        assert_eq!((r.delta, r.delta_recursion, r.limit), (0.0, 0.0, 0.0));
        let (params, class) = case_d();
        let r = delta_limit(&params, &EnvLaw::dirac(1.0), 1.0, &class, 0.3, 0.3, 500).unwrap();
        assert_eq!((r.delta, r.limit), (0.0, 0.0));
    }

    #[test]
    fn delta_errors() {
        let (params, class) = case_c();
        assert!(delta_limit(&params, &EnvLaw::dirac(1.0), 1.0, &class, 0.0, 1.0, 100).is_err());
        let b = classify(&ParamFamily::constant(1.0, 1.0), &EnvLaw::dirac(1.0)).unwrap();
        let err = delta_limit(&ParamFamily::constant(1.0, 1.0), &EnvLaw::dirac(1.0), 1.0, &b, 1.0, 0.0, 100);
        assert!(matches!(err, Err(Error::Unresolved(_))));
    }

    #[test]
    fn wlln_dirac_is_exact() {
        let s = spec(ParamFamily::polynomial(0.0, -1.0, 1.0, 1.0), EnvLaw::dirac(1.0));
        let r = wlln_check(&s, 2, 0.5, 0, &[100, 1000], 20, 3).unwrap();
        for w in &r.windows {
            assert_eq!(w.mean_ratio, 1.0);
            assert_eq!(w.var_ratio, 0.0);
        }
    }

    #[test]
    fn wlln_concentrates() {
        let s = spec(ParamFamily::polynomial(0.0, -1.0, 1.0, 1.0), two_point());
        let r = wlln_check(&s, 2, 0.5, 0, &[100, 1000, 10_000], 400, 11).unwrap();
        let v: Vec<f64> = r.windows.iter().map(|w| w.var_ratio).collect();
        assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
        let chi: Vec<f64> = r.windows.iter().map(|w| w.chi_max).collect();
        assert!(chi[0] > chi[1] && chi[1] > chi[2] && chi[2] < 0.1, "{chi:?}");
        for w in &r.windows {
            assert!((w.mean_ratio - 1.0).abs() < 4.0 * (w.var_ratio / 400.0).sqrt() + 1e-12);
        }
    }

    #[test]
    fn wlln_is_deterministic() {
        let s = spec(ParamFamily::constant(1.0, 1.0), two_point());
        let a = wlln_check(&s, 3, 0.0, 5, &[50], 30, 8).unwrap();
        let b = wlln_check(&s, 3, 0.0, 5, &[50], 30, 8).unwrap();
        assert_eq!(a, b);
        assert!(wlln_check(&s, 3, 0.0, 5, &[5], 30, 8).is_err());
    }

    proptest! {
        #[test]
        fn factors_in_unit_interval(
            a in -0.5f64..2.0,
            b in -2.0f64..1.0,
            d0 in 0.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let p = profile(&ParamFamily::polynomial(a, b, 1.0, 1.0), two_point(), d0, 60, seed);
            prop_assert!(p.factors_quenched.iter().chain(&p.factors_annealed).all(|&f| f > 0.0 && f < 1.0));
            prop_assert!(p.product_quenched.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(p.product_annealed.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn delta_recursion_bounded_and_monotone(
            j in 50usize..2000,
            a2 in 0.0f64..0.5,
            s1 in 0.0f64..0.4,
            s2 in 0.0f64..0.4,
            use_d in any::<bool>(),
        ) {
            let (params, class) = if use_d { case_d() } else { case_c() };
            let scale = if use_d { 1.0 } else { 5.0 };
            let (lo, hi) = (a2 + s1.min(s2), a2 + s1.max(s2));
            let law = two_point();
            let r_lo = delta_limit(&params, &law, 1.0, &class, scale * lo, scale * a2, j).unwrap();
            let r_hi = delta_limit(&params, &law, 1.0, &class, scale * hi, scale * a2, j).unwrap();
            for r in [&r_lo, &r_hi] {
                prop_assert!(r.delta >= 0.0 && r.delta_recursion >= 0.0);
                prop_assert!(r.delta_recursion <= 1.0);
            }
            prop_assert!(r_hi.delta >= r_lo.delta && r_hi.delta_recursion >= r_lo.delta_recursion);
            if !use_d {
                prop_assert!(r_hi.delta <= 1.0);
            }
        }
    }
}
