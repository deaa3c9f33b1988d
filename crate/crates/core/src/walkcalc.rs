//! Closed-form quantities for the homogeneous hierarchical random walk.
//!
//! A lineage jumps at level `i ≥ 1` at rate `q_i = c̄_{i−1} / N^{i−1}`, where
//! `c̄_k = c_k + λ_{k+1}/N` is the effective migration rate, landing uniformly
//! in its `i`-block. The Fourier decomposition over the hierarchical group
//! gives the kernel
//!
//! `p_t(0, η) = Σ_{m ≥ k} K_{mk} N^{−m} e^{−H_m t}`,  `k = |η|`,
//!
//! with `H_m = Σ_{i ≥ m} q_i`, `K_{kk} = −1` (`k ≥ 1`), `K_{00} = 0` and
//! `K_{mk} = N − 1` for `m > k`. A [`WalkProfile`] holds the walk with jumps
//! above level `jmax` removed, so its kernel is normalized exactly; the
//! neglected rate `Σ_{i > jmax} q_i` is reported alongside.

use serde::Serialize;

use crate::environment::ParamFamily;
use crate::error::{invalid, Error, Result};
use crate::growth::{Asym, GrowthLaw};

/// Extra terms summed explicitly when estimating the neglected tail rate.
const TAIL_TERMS: usize = 400;

/// Number of sites at hierarchical distance exactly `k` from a point.
pub fn shell_size(order: u32, k: usize) -> f64 {
    let n = order as f64;
    if k == 0 {
        1.0
    } else {
        (n - 1.0) * n.powi(k as i32 - 1)
    }
}

fn check_order(order: u32) -> Result<()> {
    if order < 2 {
        return invalid(format!("order N = {order} must be at least 2"));
    }
    Ok(())
}

/// `c̄_k = c_k + λ_{k+1}/N`, if the family covers index `k + 1`.
pub fn effective_rate(params: &ParamFamily, order: u32, k: usize) -> Option<f64> {
    Some(params.c_opt(k)? + params.lambda_opt(k + 1)? / order as f64)
}

/// Growth class of `c̄_k` for closed-form families.
pub fn effective_rate_asym(params: &ParamFamily) -> Option<Asym> {
    let (c, mu) = params.laws()?;
    Some(c.asym().add(&mu.asym().shift()))
}

/// Verdict on an infinite series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesVerdict {
    Convergent,
    Divergent,
    Undecided,
}

// ── Walk profile ─────────────────────────────────────────────────────────────

/// Jump rates of the walk truncated at level `jmax`, with derived constants.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WalkProfile {
    pub order: u32,
    pub jmax: usize,
    /// `c̄_0 … c̄_{jmax−1}`.
    pub cbar: Vec<f64>,
    /// `q_0 = 0, q_1 … q_jmax`.
    pub q: Vec<f64>,
    /// `H_0 … H_{jmax+1}` for the truncated walk (`H_0 = H_1`, `H_{jmax+1} = 0`).
    pub big_h: Vec<f64>,
    /// Estimate of the neglected rate `Σ_{i > jmax} q_i`.
    pub tail_rate: f64,
    /// Total rate `D(N)` of jumps that change the position.
    pub total_rate: f64,
    /// `r_0 = 0, r_1 … r_jmax`: distribution of the distance of a jump.
    pub r: Vec<f64>,
    /// `h_j = H_j / D(N)` for `j = 0 … jmax + 1`.
    pub h: Vec<f64>,
}

fn tail_estimate(params: &ParamFamily, order: u32, jmax: usize) -> Result<f64> {
    let n = order as f64;
    let q = |i: usize| effective_rate(params, order, i - 1).map(|c| c * n.powi(1 - i as i32));
    if let Some(asym) = effective_rate_asym(params) {
        let geometric = GrowthLaw::exponential(1.0, n, 0.0).asym();
        if !asym.div(&geometric).summable() {
            return Err(Error::DivergentTail(format!(
                "sum of c_k / N^k diverges for N = {order}: the walk is not well defined"
            )));
        }
    }
    // Known terms from jmax on; the first is q_jmax itself and is not part of the tail.
    let known: Vec<f64> = (jmax.max(1)..=jmax + TAIL_TERMS).map_while(q).collect();
    let tail: f64 = known.iter().skip(1).sum();
    let len = known.len();
    if len < 2 {
        return Err(Error::DivergentTail("parameters end before the tail can be bounded".into()));
    }
    let (a, b) = (known[len - 2], known[len - 1]);
    if b == 0.0 {
        Ok(tail)
    } else if b < a {
        let ratio = b / a;
        Ok(tail + b * ratio / (1.0 - ratio))
    } else if params.laws().is_some() {
        Ok(tail + b * TAIL_TERMS as f64)
    } else {
        Err(Error::DivergentTail("migration rates do not decay like N^-k".into()))
    }
}

/// Build the walk profile truncated at level `jmax`.
pub fn profile(params: &ParamFamily, order: u32, jmax: usize) -> Result<WalkProfile> {
    check_order(order)?;
    params.check()?;
    if jmax == 0 {
        return invalid("jmax must be at least 1");
    }
    let n = order as f64;
    let cbar = (0..jmax)
        .map(|k| {
            effective_rate(params, order, k)
                .ok_or_else(|| Error::OutOfRange(format!("parameter family does not cover level {}", k + 1)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut q = vec![0.0; jmax + 1];
    for i in 1..=jmax {
        q[i] = cbar[i - 1] * n.powi(1 - i as i32);
    }
    let mut big_h = vec![0.0; jmax + 2];
    for m in (1..=jmax).rev() {
        big_h[m] = big_h[m + 1] + q[m];
    }
    big_h[0] = big_h[1];
    // T_j = Σ_{i ≥ j} q_i N^{j−1−i}, so that r_j D = (N − 1) T_j.
    let mut t = vec![0.0; jmax + 2];
    for j in (1..=jmax).rev() {
        t[j] = (q[j] + t[j + 1]) / n;
    }
    let rd: Vec<f64> = (0..=jmax).map(|j| if j == 0 { 0.0 } else { (n - 1.0) * t[j] }).collect();
    let total_rate: f64 = rd.iter().sum();
    if !(total_rate > 0.0) {
        return invalid("all migration rates vanish: the walk does not move");
    }
    let r = rd.iter().map(|x| x / total_rate).collect();
    let h = big_h.iter().map(|x| x / total_rate).collect();
    let tail_rate = tail_estimate(params, order, jmax)?;
    Ok(WalkProfile { order, jmax, cbar, q, big_h, tail_rate, total_rate, r, h })
}

/// Smallest `jmax` whose neglected rate is below `tol`.
pub fn default_jmax(params: &ParamFamily, order: u32, tol: f64) -> Result<usize> {
    check_order(order)?;
    let limit = params.available().map(|a| a.saturating_sub(1)).unwrap_or(4000);
    let mut j = 1;
    while j <= limit {
        if tail_estimate(params, order, j)? < tol {
            return Ok(j);
        }
        j += 1;
    }
    Err(Error::DivergentTail(format!("neglected rate stays above {tol} up to level {limit}")))
}

fn kernel_coeff(order: u32, m: usize, k: usize) -> f64 {
    if m == k {
        if k == 0 {
            0.0
        } else {
            -1.0
        }
    } else {
        order as f64 - 1.0
    }
}

impl WalkProfile {
    fn n(&self) -> f64 {
        self.order as f64
    }

    /// `H_m` of the untruncated walk, estimated by adding the neglected rate.
    pub fn h_infinite(&self, m: usize) -> f64 {
        self.big_h[m.min(self.jmax + 1)] + self.tail_rate
    }

    /// Asymptotic form `h_j ≈ c̄_{j−1} / (D N^{j−1})` of the leading term.
    pub fn h_leading(&self, j: usize) -> f64 {
        self.q[j] / self.total_rate
    }
}

/// `p_t(0, η)` for `|η| = k` under the truncated walk.
pub fn transition_prob(profile: &WalkProfile, t: f64, k: usize) -> f64 {
    if k > profile.jmax {
        return 0.0;
    }
    let n = profile.n();
    let j = profile.jmax;
    if k == 0 {
        let sum: f64 = (1..=j).map(|m| (n - 1.0) * n.powi(-(m as i32)) * (-profile.big_h[m] * t).exp()).sum();
        return sum + n.powi(-(j as i32));
    }
    // Pair the −N^{−k} e^{−H_k t} term with the others so that every summand is
    // non-negative: N^{−k} = Σ_{k<m≤J} (N−1) N^{−m} + N^{−J}.
    let mut gap = 0.0;
    let mut p = 0.0;
    for m in k + 1..=j {
        gap += profile.q[m - 1];
        p += (n - 1.0) * n.powi(-(m as i32)) * (-profile.big_h[m] * t).exp() * -(-gap * t).exp_m1();
    }
    let gap_top = gap + profile.q[j];
    p + n.powi(-(j as i32)) * -(-gap_top * t).exp_m1()
}

/// The kernel `p_t(0, ·)` at every distance `0 … jmax`.
pub fn transition_row(profile: &WalkProfile, t: f64) -> Vec<f64> {
    (0..=profile.jmax).map(|k| transition_prob(profile, t, k)).collect()
}

/// Kernel of the untruncated walk restricted to `B_jmax`, dropping the
/// mass that has left it. This is the integrand behind [`green_pair`].
pub fn transient_prob(profile: &WalkProfile, t: f64, k: usize) -> f64 {
    if k > profile.jmax {
        return 0.0;
    }
    let n = profile.n();
    (k..=profile.jmax)
        .map(|m| kernel_coeff(profile.order, m, k) * n.powi(-(m as i32)) * (-profile.h_infinite(m) * t).exp())
        .sum()
}

/// Convolution of two radial kernels: `(a ∗ b)(k) = Σ_η' a(|η'|) b(|η − η'|)`.
pub fn compose_kernels(order: u32, a: &[f64], b: &[f64]) -> Vec<f64> {
    let len = a.len().min(b.len());
    let shell = |k| shell_size(order, k);
    (0..len)
        .map(|k| {
            let mut s = 0.0;
            for j in 0..len {
                if j != k {
                    s += shell(j) * a[j] * b[j.max(k)];
                }
            }
            // η' on the same shell as η: distance l < k for N[l] of them, k for the rest.
            let mut same = 0.0;
            let mut inner = 0.0;
            for l in 0..k {
                same += shell(l) * b[l];
                inner += shell(l);
            }
            same += (shell(k) - inner) * b[k];
            s + a[k] * same
        })
        .collect()
}

// ── Green functions ──────────────────────────────────────────────────────────

/// Pair Green function with its truncation diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GreenValue {
    /// `∫_0^∞ p_t(0, η^{(p)}) p_t(0, η^{(q)}) dt`, or `+∞` when divergent.
    pub value: f64,
    pub divergent: bool,
    /// Estimated contribution of levels above `jmax`.
    pub truncation_estimate: f64,
}

/// Exact double sum `Σ_{m,n} K_{mp} K_{nq} N^{−m−n} / (H_m + H_n)`.
pub fn green_pair(profile: &WalkProfile, p: usize, q: usize) -> Result<GreenValue> {
    let j = profile.jmax;
    if p > j || q > j {
        return Err(Error::OutOfRange(format!("distances ({p}, {q}) exceed jmax = {j}")));
    }
    let n = profile.n();
    let term = |m: usize, l: usize| {
        kernel_coeff(profile.order, m, p) * kernel_coeff(profile.order, l, q) * n.powi(-((m + l) as i32))
            / (profile.h_infinite(m) + profile.h_infinite(l))
    };
    let mut value = 0.0;
    for m in p..=j {
        for l in q..=j {
            value += term(m, l);
        }
    }
    // Diagonal terms N^{−2m}/(2H_m) decide convergence.
    let diag = |m: usize| n.powi(-2 * m as i32) / (2.0 * profile.h_infinite(m));
    let (last, prev) = (diag(j), diag(j.saturating_sub(1).max(p.max(q))));
    let ratio = if prev > 0.0 { last / prev } else { 0.0 };
    if !(value.is_finite()) || ratio >= 1.0 - 1e-9 {
        return Ok(GreenValue { value: f64::INFINITY, divergent: true, truncation_estimate: f64::INFINITY });
    }
    let shell: f64 = (p..=j).map(|m| term(m, j).abs()).sum::<f64>() + (q..=j).map(|l| term(j, l).abs()).sum::<f64>();
    Ok(GreenValue { value, divergent: false, truncation_estimate: shell * ratio / (1.0 - ratio) })
}

/// Large-`N` asymptote `c̄_0 / ((1 + 1_{p=q}) c̄_{p∧q} N^{p∨q})` of `D(N) · G`.
pub fn green_pair_asymptote(profile: &WalkProfile, p: usize, q: usize) -> Result<f64> {
    let lo = p.min(q);
    if lo >= profile.cbar.len() || p.max(q) > profile.jmax {
        return Err(Error::OutOfRange(format!("distances ({p}, {q}) exceed jmax = {}", profile.jmax)));
    }
    let diag = if p == q { 2.0 } else { 1.0 };
    Ok(profile.cbar[0] / (diag * profile.cbar[lo] * profile.n().powi(p.max(q) as i32)))
}

// ── Mean hazard ──────────────────────────────────────────────────────────────

/// Partial sums of the mean coalescence hazard series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanHazard {
    /// `S_0 … S_M`.
    pub partial_sums: Vec<f64>,
    /// `S_M`, or `+∞` when the series is known to diverge.
    pub value: f64,
    pub verdict: SeriesVerdict,
}

/// Asymptotic verdict on `Σ_k (1/c̄_k) Σ_{l ≤ k} λ_l` for closed-form families.
pub fn hazard_series_verdict(params: &ParamFamily) -> SeriesVerdict {
    let (Some((_, mu)), Some(cbar)) = (params.laws(), effective_rate_asym(params)) else {
        return SeriesVerdict::Undecided;
    };
    if cbar.zero {
        return SeriesVerdict::Undecided;
    }
    if mu.asym().partial_sum().div(&cbar).summable() {
        SeriesVerdict::Convergent
    } else {
        SeriesVerdict::Divergent
    }
}

/// `Σ_{k ≤ M} (1/c̄_k) Σ_{l ≤ k} λ_l (½·1_{l=k} + 1_{l<k})`.
pub fn mean_hazard(params: &ParamFamily, order: u32, level_cut: usize) -> Result<MeanHazard> {
    check_order(order)?;
    params.check()?;
    let mut partial_sums = Vec::with_capacity(level_cut + 1);
    let (mut lam_before, mut total) = (0.0, 0.0);
    for k in 0..=level_cut {
        let cbar = effective_rate(params, order, k)
            .ok_or_else(|| Error::OutOfRange(format!("parameter family does not cover level {}", k + 1)))?;
        let lam = params.lambda_opt(k).unwrap_or(0.0);
        total += (lam_before + 0.5 * lam) / cbar;
        lam_before += lam;
        partial_sums.push(total);
    }
    let verdict = hazard_series_verdict(params);
    let value = if verdict == SeriesVerdict::Divergent { f64::INFINITY } else { total };
    Ok(MeanHazard { partial_sums, value, verdict })
}

fn phi(a: f64, t: f64) -> f64 {
    if a * t < 1e-12 {
        t * (1.0 - 0.5 * a * t)
    } else {
        -(-a * t).exp_m1() / a
    }
}

/// Expected pair hazard up to time `horizon` in the homogeneous system cut at
/// `level_cut`: two walkers from the origin, block events at height `k` with
/// pair rate `N^{−k} λ_k · pair_rate`, and Kingman rate `2 d₀` at a shared site.
pub fn truncated_mean_hazard(
    params: &ParamFamily,
    order: u32,
    level_cut: usize,
    horizon: f64,
    pair_rate: f64,
    kingman_d0: f64,
) -> Result<f64> {
    check_order(order)?;
    params.check()?;
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return invalid(format!("horizon = {horizon} must be finite and non-negative"));
    }
    let n = order as f64;
    let rate = |i: usize| -> Result<f64> {
        let c = params.c_opt(i - 1).ok_or_else(|| Error::OutOfRange(format!("c_{} not available", i - 1)))?;
        let l = params.lambda_opt(i).ok_or_else(|| Error::OutOfRange(format!("lambda_{i} not available")))?;
        Ok((c + l / n) * n.powi(1 - i as i32))
    };
    // E_j = Σ_{j < i ≤ K} q_i.
    let mut e = vec![0.0; level_cut + 1];
    for j in (0..level_cut).rev() {
        e[j] = e[j + 1] + rate(j + 1)?;
    }
    let mut total = 0.0;
    for k in 0..=level_cut {
        let lam = params.lambda_opt(k).ok_or_else(|| Error::OutOfRange(format!("lambda_{k} not available")))?;
        let a = lam * pair_rate + if k == 0 { 2.0 * kingman_d0 } else { 0.0 };
        if a == 0.0 {
            continue;
        }
        let mut inner = n.powi(-(level_cut as i32)) * horizon;
        for j in k..level_cut {
            inner += (n - 1.0) * n.powi(-(j as i32) - 1) * phi(2.0 * e[j], horizon);
        }
        total += a * inner;
    }
    Ok(total)
}

// ── Transience ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Transience {
    /// `γ(N) = log c / log(N/c)`.
    pub gamma: f64,
    /// `d(N) = 2 log N / log(N/c)`.
    pub dimension: f64,
}

/// Degree of recurrence or transience of the walk with `c_k = c^k`.
pub fn transience_degree(c: f64, order: u32) -> Result<Transience> {
    check_order(order)?;
    let n = order as f64;
    if !(c > 0.0 && c.is_finite()) {
        return invalid(format!("c = {c} must be positive"));
    }
    if c >= n {
        return invalid(format!("c = {c} >= N = {order}: the growth condition fails"));
    }
    let denom = (n / c).ln();
    Ok(Transience { gamma: c.ln() / denom, dimension: 2.0 * n.ln() / denom })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(order: u32) -> WalkProfile {
        let p = ParamFamily::constant(1.0, 0.0);
        profile(&p, order, default_jmax(&p, order, 1e-12).unwrap()).unwrap()
    }

    /// Distance-class chain, solved by uniformization.
    fn uniformized_row(profile: &WalkProfile, t: f64) -> Vec<f64> {
        let j = profile.jmax;
        let n = profile.n();
        let lam_total: f64 = profile.q.iter().sum();
        let mut gen = vec![vec![0.0; j + 1]; j + 1];
        for k in 0..=j {
            for i in k.max(1)..=j {
                for l in 0..=i {
                    let target = shell_size(profile.order, l) / n.powi(i as i32);
                    gen[k][l] += profile.q[i] * target;
                }
                gen[k][k] -= profile.q[i];
            }
        }
        let mut v = vec![0.0; j + 1];
        v[0] = 1.0;
        let mut weight = (-lam_total * t).exp();
        let mut out: Vec<f64> = v.iter().map(|x| x * weight).collect();
        for step in 1..2000 {
            let mut next = v.clone();
            for (k, row) in gen.iter().enumerate() {
                for (l, g) in row.iter().enumerate() {
                    next[l] += v[k] * g / lam_total;
                }
            }
            v = next;
            weight *= lam_total * t / step as f64;
            for (o, x) in out.iter_mut().zip(&v) {
                *o += weight * x;
            }
            if weight < 1e-20 && step as f64 > lam_total * t {
                break;
            }
        }
        (0..=j).map(|k| out[k] / shell_size(profile.order, k)).collect()
    }

    #[test]
    fn shell_sizes() {
        assert_eq!(shell_size(3, 0), 1.0);
        assert_eq!(shell_size(3, 1), 2.0);
        assert_eq!(shell_size(3, 3), 18.0);
    }

    #[test]
    fn r_normalized_and_decreasing() {
        let p = unit(3);
        let s: f64 = p.r.iter().sum();
        assert!((1.0 - 1e-10..=1.0 + 1e-15).contains(&s));
        for j in 1..p.jmax {
            assert!(p.r[j] > 0.0 && p.r[j + 1] < p.r[j]);
        }
        for j in 1..p.jmax {
            assert!(p.h[j + 1] < p.h[j]);
        }
    }

    #[test]
    fn h_leading_term_dominates_for_large_n() {
        let params = ParamFamily::Growth { c: GrowthLaw::exponential(1.0, 2.0, 0.0), mu: GrowthLaw::constant(0.5) };
        let mut prev = f64::INFINITY;
        for order in [8, 32, 128] {
            let p = profile(&params, order, 30).unwrap();
            let err = (3..6).map(|j| (p.h[j] / p.h_leading(j) - 1.0).abs()).fold(0.0, f64::max);
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn kernel_initial_condition() {
        let p = unit(3);
        assert!((transition_prob(&p, 0.0, 0) - 1.0).abs() < 1e-15);
        for k in 1..=p.jmax {
            assert!(transition_prob(&p, 0.0, k).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_normalized() {
        for order in [3, 5] {
            let p = unit(order);
            for t in [0.1, 1.0, 10.0, 1e3] {
                let s: f64 = (0..=p.jmax).map(|k| shell_size(order, k) * transition_prob(&p, t, k)).sum();
                assert!((s - 1.0).abs() < 1e-10, "N = {order}, t = {t}: {s}");
            }
        }
    }

    #[test]
    fn kernel_matches_distance_chain() {
        let params = ParamFamily::constant(1.0, 1.0);
        let p = profile(&params, 3, 12).unwrap();
        for t in [0.5, 2.0, 10.0] {
            let oracle = uniformized_row(&p, t);
            for (k, o) in oracle.iter().enumerate() {
                let v = transition_prob(&p, t, k);
                assert!((v - o).abs() < 1e-10 * o.max(1e-3), "t = {t}, k = {k}: {v} vs {o}");
            }
        }
    }

    #[test]
    fn chapman_kolmogorov() {
        let p = profile(&ParamFamily::polynomial(0.5, 0.0, 1.0, 0.5), 4, 20).unwrap();
        for (s, t) in [(0.3, 0.7), (1.0, 5.0), (10.0, 20.0)] {
            let direct = transition_row(&p, s + t);
            let composed = compose_kernels(4, &transition_row(&p, s), &transition_row(&p, t));
            for (a, b) in direct.iter().zip(&composed) {
                assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-300), "{a} vs {b}");
            }
        }
    }

    fn green_quadrature(p: &WalkProfile, a: usize, b: usize) -> f64 {
        // t = e^s; integrate over s in unit pieces.
        let f = |s: f64| {
            let t = s.exp();
            transient_prob(p, t, a) * transient_prob(p, t, b) * t
        };
        let hi = (1.0 / p.h_infinite(p.jmax)).ln() + 40.0;
        let mut total = 0.0;
        let mut s = -40.0;
        while s < hi {
            total += quadrature::integrate(f, s, s + 1.0, 1e-16).integral;
            s += 1.0;
        }
        total
    }

    #[test]
    fn green_matches_quadrature() {
        for order in [3, 5] {
            let params = ParamFamily::constant(1.0, 1.0);
            let p = profile(&params, order, 12).unwrap();
            for (a, b) in [(0, 0), (1, 0), (2, 1), (3, 3)] {
                let g = green_pair(&p, a, b).unwrap();
                assert!(!g.divergent);
                let oracle = green_quadrature(&p, a, b);
                assert!((g.value - oracle).abs() < 1e-6 * oracle, "({a},{b}): {} vs {oracle}", g.value);
            }
        }
    }

    #[test]
    fn green_symmetric_and_asymptotic() {
        let params = ParamFamily::Growth { c: GrowthLaw::exponential(1.0, 2.0, 0.0), mu: GrowthLaw::constant(0.5) };
        let p = profile(&params, 200, 12).unwrap();
        for (a, b) in [(0, 1), (1, 3), (2, 2)] {
            let g1 = green_pair(&p, a, b).unwrap().value;
            let g2 = green_pair(&p, b, a).unwrap().value;
            assert!((g1 - g2).abs() <= 1e-14 * g1);
        }
        for a in [1, 2, 3] {
            let g = green_pair(&p, a, a).unwrap().value;
            let ratio = p.total_rate * g / green_pair_asymptote(&p, a, a).unwrap();
            assert!((ratio - 1.0).abs() < 0.05, "({a},{a}): {ratio}");
        }
        // Off the diagonal the asymptote is the (p+1, q+1) term alone; other
        // terms of the same order keep the full sum within a bounded factor.
        let n = 200f64;
        for (a, b) in [(1, 2), (2, 3), (1, 3)] {
            let lead = (n - 1.0).powi(2) * n.powi(-((a + b + 2) as i32))
                / (p.h_infinite(a + 1) + p.h_infinite(b + 1));
            let asym = green_pair_asymptote(&p, a, b).unwrap();
            assert!((p.total_rate * lead / asym - 1.0).abs() < 0.05);
            let ratio = p.total_rate * green_pair(&p, a, b).unwrap().value / asym;
            assert!((0.25..=1.0).contains(&ratio), "({a},{b}): {ratio}");
        }
    }

    #[test]
    fn green_divergence_flagged() {
        // c_k = N^{-k} makes the pair walk recurrent.
        let params = ParamFamily::Growth { c: GrowthLaw::exponential(1.0, 1.0 / 3.0, 0.0), mu: GrowthLaw::constant(0.0) };
        let p = profile(&params, 3, 30).unwrap();
        assert!(green_pair(&p, 0, 0).unwrap().divergent);
    }

    #[test]
    fn profile_rejects_divergent_rates() {
        let params = ParamFamily::Growth { c: GrowthLaw::exponential(1.0, 3.0, 0.0), mu: GrowthLaw::constant(0.5) };
        assert!(matches!(profile(&params, 3, 10), Err(Error::DivergentTail(_))));
        assert!(profile(&ParamFamily::constant(1.0, 1.0), 1, 10).is_err());
    }

    #[test]
    fn hazard_series_verdicts() {
        let clustering = mean_hazard(&ParamFamily::constant(1.0, 1.0), 3, 50).unwrap();
        assert_eq!(clustering.verdict, SeriesVerdict::Divergent);
        assert!(clustering.value.is_infinite());
        let s = &clustering.partial_sums;
        // Partial sums grow like k²/2 scaled by 1/c̄.
        assert!(s[50] / s[25] > 3.5);
        let coexist = ParamFamily::Growth { c: GrowthLaw::exponential(1.0, 3.0, 0.0), mu: GrowthLaw::constant(0.5) };
        let m = mean_hazard(&coexist, 4, 200).unwrap();
        assert_eq!(m.verdict, SeriesVerdict::Convergent);
        assert!((m.partial_sums[200] - m.partial_sums[100]).abs() < 1e-12);
        let explicit = ParamFamily::Explicit { c: vec![1.0; 5], lambda: vec![1.0; 5] };
        assert_eq!(mean_hazard(&explicit, 3, 3).unwrap().verdict, SeriesVerdict::Undecided);
    }

    #[test]
    fn truncated_hazard_limits() {
        let params = ParamFamily::constant(1.0, 1.0);
        assert_eq!(truncated_mean_hazard(&params, 3, 3, 0.0, 1.0, 0.0).unwrap(), 0.0);
        // Short horizons: both walkers still at the origin, rate Σ_k N^{-k} λ_k.
        let t = 1e-6;
        let expect: f64 = (0..=3).map(|k| 3f64.powi(-k)).sum::<f64>() * t;
        let got = truncated_mean_hazard(&params, 3, 3, t, 1.0, 0.0).unwrap();
        assert!((got / expect - 1.0).abs() < 1e-5);
        // Long horizons: walkers uniform on B_K, rate per unit time Σ_k N^{-k} λ_k N^{k-K}.
        let (t1, t2) = (1e4, 2e4);
        let slope = (truncated_mean_hazard(&params, 3, 3, t2, 1.0, 0.0).unwrap()
            - truncated_mean_hazard(&params, 3, 3, t1, 1.0, 0.0).unwrap())
            / (t2 - t1);
        assert!((slope - 4.0 / 27.0).abs() < 1e-9);
        let with_kingman = truncated_mean_hazard(&params, 3, 3, t, 1.0, 0.5).unwrap();
        assert!((with_kingman - got - t).abs() < 1e-9);
    }

    #[test]
    fn transience_examples() {
        let t = transience_degree(1.0, 5).unwrap();
        assert_eq!((t.gamma, t.dimension), (0.0, 2.0));
        assert!(transience_degree(0.5, 5).unwrap().gamma < 0.0);
        let t = transience_degree(3f64.sqrt(), 3).unwrap();
        assert!((t.gamma - 1.0).abs() < 1e-12 && (t.dimension - 4.0).abs() < 1e-12);
        assert!(transience_degree(5.0, 5).is_err());
        assert!(transience_degree(0.0, 5).is_err());
    }

    proptest! {
        #[test]
        fn normalization_on_grid(order in 2u32..8, c in 0.2f64..1.5, lam in 0.0f64..3.0, t in 0.0f64..50.0) {
            let params = ParamFamily::constant(c, lam);
            let p = profile(&params, order, 25).unwrap();
            let s: f64 = (0..=p.jmax).map(|k| shell_size(order, k) * transition_prob(&p, t, k)).sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
            for k in 0..=p.jmax {
                prop_assert!(transition_prob(&p, t, k) > -1e-15);
            }
        }

        #[test]
        fn chapman_kolmogorov_random(order in 2u32..6, c in 0.2f64..2.0, s in 0.0f64..5.0, t in 0.0f64..5.0) {
            let p = profile(&ParamFamily::constant(c, 1.0), order, 15).unwrap();
            let direct = transition_row(&p, s + t);
            let composed = compose_kernels(order, &transition_row(&p, s), &transition_row(&p, t));
            for (a, b) in direct.iter().zip(&composed) {
                prop_assert!((a - b).abs() <= 1e-8 * a.abs());
            }
        }

        #[test]
        fn mean_hazard_monotone_in_cut(c in 0.5f64..4.0, lam in 0.0f64..3.0, order in 2u32..6) {
            let params = ParamFamily::Growth { c: GrowthLaw::exponential(1.0, c, 0.0), mu: GrowthLaw::constant(lam / 2.0) };
            let m = mean_hazard(&params, order, 60).unwrap();
            for w in m.partial_sums.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }
    }
}
