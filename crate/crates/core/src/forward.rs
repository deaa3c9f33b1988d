//! Forward simulation of the individual-based model with finitely many types.
//!
//! Space is the finite hierarchy `G_{N,K}` of `N^K` colonies, each holding
//! `M` individuals. The state is a table of per-colony type counts, and all
//! moves keep every colony at exactly `M` individuals:
//!
//! * migration to distance `k` is a swap with a uniform partner in the
//!   `k`-block, initiated by each individual at rate `c_{k−1}/(2N^{k−1})`;
//! * each `k`-block fires at rate `N^{−k} λ_k ρ^ξ Σ_i w_i/r_i²`, reshuffles its
//!   individuals uniformly over its slots, picks atom `i ∝ w_i/r_i²` and a
//!   parent type from the block, and converts each individual with probability `r_i`;
//! * every ordered pair within a colony resamples at rate `d₀`;
//! * optionally each individual is replaced by a `θ`-draw at rate `c_src`.
//!
//! The single-site McKean–Vlasov particle system and a two-level block-scaling
//! experiment sit on top of the same conventions.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1, Hypergeometric};
use serde::{Deserialize, Serialize};

use crate::environment::{AtomMeasure, EnvSpec, Environment};
use crate::error::{invalid, Error, Result};
use crate::hiergroup::HierAddress;
use crate::renorm::f_map;
use crate::rng::{stream_rng, SimRng};

/// Largest number of individuals a forward run will allocate.
pub const MAX_INDIVIDUALS: u64 = 50_000_000;

const INIT_STREAM: u64 = 0x696e_6974;
const RUN_STREAM: u64 = 0x0072_756e;

// ── Configuration and state ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    /// Group order `N`.
    pub order: u32,
    /// Number of hierarchical levels `K`.
    pub levels: usize,
    /// Individuals per colony.
    pub m_ind: u32,
    /// Initial type distribution.
    pub theta: Vec<f64>,
    #[serde(default)]
    pub d0: f64,
    pub env: EnvSpec,
    #[serde(default)]
    pub env_seed: u64,
    #[serde(default)]
    pub seed: u64,
    pub horizon: f64,
    /// Snapshot spacing.
    pub record_interval: f64,
    /// Per-individual rate of replacement by a `θ`-draw.
    #[serde(default)]
    pub source_immigration: f64,
}

/// Per-colony type counts at one time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardState {
    pub time: f64,
    pub order: u32,
    pub levels: usize,
    pub types: usize,
    pub m_ind: u32,
    /// Colony-major counts: entry `x·q + a` is the number of type-`a` individuals in colony `x`.
    pub counts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardTrajectory {
    pub snapshots: Vec<ForwardState>,
    /// Number of events fired, including those that leave the state unchanged.
    pub events: u64,
}

fn check_theta(theta: &[f64]) -> Result<()> {
    if theta.len() < 2 {
        return invalid(format!("need at least two types, got {}", theta.len()));
    }
    if theta.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (theta.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid("theta must be a probability vector");
    }
    Ok(())
}

impl ForwardConfig {
    pub fn colonies(&self) -> u64 {
        u64::from(self.order).saturating_pow(self.levels as u32)
    }

    pub fn check(&self) -> Result<()> {
        if self.order < 2 {
            return invalid(format!("order N = {} must be at least 2", self.order));
        }
        if self.m_ind < 2 {
            return invalid(format!("m_ind = {} must be at least 2", self.m_ind));
        }
        check_theta(&self.theta)?;
        if !(self.d0.is_finite() && self.d0 >= 0.0) {
            return invalid("d0 must be finite and non-negative");
        }
        if !(self.source_immigration.is_finite() && self.source_immigration >= 0.0) {
            return invalid("source_immigration must be finite and non-negative");
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return invalid("horizon must be finite and non-negative");
        }
        if !(self.record_interval.is_finite() && self.record_interval > 0.0) {
            return invalid("record_interval must be positive");
        }
        if self.colonies().saturating_mul(u64::from(self.m_ind)) > MAX_INDIVIDUALS {
            return invalid(format!("N^K · M exceeds {MAX_INDIVIDUALS} individuals"));
        }
        self.env.params.ensure_covers(self.levels + 1)?;
        Ok(())
    }
}

impl ForwardState {
    pub fn colony(&self, x: usize) -> &[u32] {
        &self.counts[x * self.types..(x + 1) * self.types]
    }

    /// Index of the colony with the given address (digits at and above `K` are ignored).
    pub fn colony_index(&self, eta: &HierAddress) -> Result<usize> {
        if eta.order() != self.order {
            return Err(Error::MismatchedOrder { left: eta.order(), right: self.order });
        }
        let n = self.order as usize;
        Ok((0..self.levels).rev().fold(0, |acc, i| acc * n + eta.digit(i) as usize))
    }

    /// Type counts summed over all colonies.
    pub fn totals(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.types];
        for (i, &c) in self.counts.iter().enumerate() {
            out[i % self.types] += u64::from(c);
        }
        out
    }

    fn block_range(&self, x: usize, k: usize) -> std::ops::Range<usize> {
        let size = (self.order as usize).pow(k as u32);
        let start = x / size * size;
        start..start + size
    }

    fn average_over(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.types];
        let total = (range.len() as f64) * f64::from(self.m_ind);
        for x in range {
            for (a, &c) in self.colony(x).iter().enumerate() {
                out[a] += f64::from(c);
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        out
    }
}

/// Empirical type distribution over the `k`-block `B_k(η)`.
pub fn block_average(state: &ForwardState, eta: &HierAddress, k: usize) -> Result<Vec<f64>> {
    if k > state.levels {
        return Err(Error::OutOfRange(format!("block level {k} exceeds K = {}", state.levels)));
    }
    let x = state.colony_index(eta)?;
    Ok(state.average_over(state.block_range(x, k)))
}

// ── Sampling helpers ─────────────────────────────────────────────────────────

/// Index drawn with probability proportional to `weights`.
fn pick_weighted(rng: &mut SimRng, weights: impl Iterator<Item = f64> + Clone, total: f64) -> usize {
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// Type of the individual at position `pos` when a colony is listed type by type.
fn type_at(counts: &[u32], mut pos: u32) -> usize {
    for (a, &c) in counts.iter().enumerate() {
        if pos < c {
            return a;
        }
        pos -= c;
    }
    unreachable!("position beyond colony size")
}

fn binomial(rng: &mut SimRng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("valid binomial").sample(rng)
    }
}

fn hypergeometric(rng: &mut SimRng, population: u64, successes: u64, draws: u64) -> u64 {
    if successes == 0 || draws == 0 {
        0
    } else if successes == population {
        draws
    } else {
        Hypergeometric::new(population, successes, draws).expect("valid hypergeometric").sample(rng)
    }
}

/// Multinomial counts of `n` draws from `p` via sequential binomials.
fn multinomial(rng: &mut SimRng, n: u64, p: &[f64]) -> Vec<u64> {
    let mut out = vec![0; p.len()];
    let (mut left, mut mass) = (n, 1.0);
    for (a, &pa) in p.iter().enumerate() {
        if a + 1 == p.len() {
            out[a] = left;
            break;
        }
        let x = binomial(rng, left, if mass > 0.0 { (pa / mass).min(1.0) } else { 0.0 });
        out[a] = x;
        left -= x;
        mass -= pa;
    }
    out
}

/// Deal the individuals of `colonies` uniformly into their slots without
/// replacement; returns the block's type totals.
fn reshuffle(state: &mut ForwardState, colonies: std::ops::Range<usize>, rng: &mut SimRng) -> Vec<u64> {
    let q = state.types;
    let m = u64::from(state.m_ind);
    let mut pool = vec![0u64; q];
    for x in colonies.clone() {
        for a in 0..q {
            pool[a] += u64::from(state.counts[x * q + a]);
        }
    }
    let totals = pool.clone();
    if colonies.len() > 1 {
        let mut remaining: u64 = pool.iter().sum();
        for x in colonies {
            let (mut need, mut rest) = (m, remaining);
            for a in 0..q {
                let take = if a + 1 == q { need } else { hypergeometric(rng, rest, pool[a], need) };
                state.counts[x * q + a] = take as u32;
                rest -= pool[a];
                pool[a] -= take;
                need -= take;
            }
            remaining -= m;
        }
    }
    totals
}

// ── The forward simulator ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
enum Channel {
    Migration(usize),
    Blocks,
    Moran,
    Source,
}

struct Forward {
    state: ForwardState,
    theta: Vec<f64>,
    shape: AtomMeasure,
    /// Cumulative block-event rates and the matching `(height, first colony)`.
    block_cumulative: Vec<f64>,
    block_index: Vec<(usize, usize)>,
    channels: Vec<(Channel, f64)>,
    total_rate: f64,
    rng: SimRng,
    events: u64,
}

impl Forward {
    fn new(cfg: &ForwardConfig) -> Result<Self> {
        cfg.check()?;
        let env = Environment::new(cfg.env.clone(), cfg.env_seed)?;
        let (n, levels, q, m) = (cfg.order as usize, cfg.levels, cfg.theta.len(), cfg.m_ind);
        let colonies = n.pow(levels as u32);
        let mut init = stream_rng(cfg.seed, INIT_STREAM);
        let mut counts = Vec::with_capacity(colonies * q);
        for _ in 0..colonies {
            counts.extend(multinomial(&mut init, u64::from(m), &cfg.theta).into_iter().map(|c| c as u32));
        }
        let state = ForwardState { time: 0.0, order: cfg.order, levels, types: q, m_ind: m, counts };

        let star = env.chi().star_mass();
        let (mut block_cumulative, mut block_index, mut acc) = (Vec::new(), Vec::new(), 0.0);
        for k in 0..=levels {
            let size = n.pow(k as u32);
            let lambda = env.params().lambda(k);
            for first in (0..colonies).step_by(size) {
                let digits: Vec<u32> = (0..levels).map(|i| (first / n.pow(i as u32) % n) as u32).collect();
                let rate = lambda * env.rho_at_digits(cfg.order, &digits, k) * star / size as f64;
                if rate > 0.0 {
                    acc += rate;
                    block_cumulative.push(acc);
                    block_index.push((k, first));
                }
            }
        }
        let individuals = (colonies as f64) * f64::from(m);
        let mut channels = Vec::new();
        for k in 1..=levels {
            let rate = individuals * env.params().c(k - 1) / (2.0 * (n as f64).powi(k as i32 - 1));
            channels.push((Channel::Migration(k), rate));
        }
        channels.push((Channel::Blocks, acc));
        channels.push((Channel::Moran, colonies as f64 * f64::from(m) * f64::from(m - 1) * cfg.d0));
        channels.push((Channel::Source, individuals * cfg.source_immigration));
        channels.retain(|c| c.1 > 0.0);
        let total_rate = channels.iter().map(|c| c.1).sum();
        Ok(Self {
            state,
            theta: cfg.theta.clone(),
            shape: env.chi().clone(),
            block_cumulative,
            block_index,
            channels,
            total_rate,
            rng: stream_rng(cfg.seed, RUN_STREAM),
            events: 0,
        })
    }

    /// Advance to `until`, calling `observe` at every multiple of `interval`.
    fn run(&mut self, until: f64, interval: f64, mut observe: impl FnMut(&ForwardState)) {
        let mut next_obs = 0.0;
        let mut grid = 0u64;
        loop {
            let wait = if self.total_rate > 0.0 {
                self.rng.sample::<f64, _>(Exp1) / self.total_rate
            } else {
                f64::INFINITY
            };
            let t_next = self.state.time + wait;
            while next_obs <= until && next_obs < t_next {
                let now = self.state.time;
                self.state.time = next_obs;
                observe(&self.state);
                self.state.time = now;
                grid += 1;
                next_obs = grid as f64 * interval;
            }
            if t_next > until {
                self.state.time = until;
                return;
            }
            self.state.time = t_next;
            self.fire();
        }
    }

    fn fire(&mut self) {
        self.events += 1;
        let ch = pick_weighted(&mut self.rng, self.channels.iter().map(|c| c.1), self.total_rate);
        match self.channels[ch].0 {
            Channel::Migration(k) => self.migrate(k),
            Channel::Blocks => self.block_event(),
            Channel::Moran => self.moran(),
            Channel::Source => self.source(),
        }
    }

    fn colonies(&self) -> usize {
        self.state.counts.len() / self.state.types
    }

    fn random_member(&mut self, x: usize) -> usize {
        let pos = self.rng.random_range(0..self.state.m_ind);
        type_at(self.state.colony(x), pos)
    }

    fn migrate(&mut self, k: usize) {
        let q = self.state.types;
        let x = self.rng.random_range(0..self.colonies());
        let range = self.state.block_range(x, k);
        let y = self.rng.random_range(range);
        let a = self.random_member(x);
        let b = self.random_member(y);
        if x != y && a != b {
            self.state.counts[x * q + a] -= 1;
            self.state.counts[x * q + b] += 1;
            self.state.counts[y * q + b] -= 1;
            self.state.counts[y * q + a] += 1;
        }
    }

    fn moran(&mut self) {
        let q = self.state.types;
        let m = self.state.m_ind;
        let x = self.rng.random_range(0..self.colonies());
        let i = self.rng.random_range(0..m);
        let mut j = self.rng.random_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (type_at(self.state.colony(x), i), type_at(self.state.colony(x), j));
        if a != b {
            self.state.counts[x * q + a] -= 1;
            self.state.counts[x * q + b] += 1;
        }
    }

    fn source(&mut self) {
        let q = self.state.types;
        let x = self.rng.random_range(0..self.colonies());
        let a = self.random_member(x);
        let b = pick_weighted(&mut self.rng, self.theta.iter().copied(), 1.0);
        if a != b {
            self.state.counts[x * q + a] -= 1;
            self.state.counts[x * q + b] += 1;
        }
    }

    fn block_event(&mut self) {
        let total = *self.block_cumulative.last().expect("block channel has positive rate");
        let u = self.rng.random::<f64>() * total;
        let idx = self.block_cumulative.partition_point(|&c| c <= u).min(self.block_index.len() - 1);
        let (k, first) = self.block_index[idx];
        let q = self.state.types;
        let colonies = first..first + (self.state.order as usize).pow(k as u32);

        let pool = reshuffle(&mut self.state, colonies.clone(), &mut self.rng);
        let block_total: u64 = pool.iter().sum();
        let parent_weights: Vec<f64> = pool.iter().map(|&c| c as f64).collect();

        let atoms = &self.shape.atoms;
        let star_total: f64 = atoms.iter().map(|&(r, w)| w / (r * r)).sum();
        let i = pick_weighted(&mut self.rng, atoms.iter().map(|&(r, w)| w / (r * r)), star_total);
        let r = atoms[i].0;
        let parent = pick_weighted(&mut self.rng, parent_weights.iter().copied(), block_total as f64);
        for x in colonies {
            for b in 0..q {
                if b == parent {
                    continue;
                }
                let moved = binomial(&mut self.rng, u64::from(self.state.counts[x * q + b]), r) as u32;
                self.state.counts[x * q + b] -= moved;
                self.state.counts[x * q + parent] += moved;
            }
        }
    }
}

/// Run the forward model and record snapshots every `record_interval` up to `horizon`.
pub fn simulate_forward(cfg: &ForwardConfig) -> Result<ForwardTrajectory> {
    let mut sim = Forward::new(cfg)?;
    let mut snapshots = Vec::new();
    sim.run(cfg.horizon, cfg.record_interval, |s| snapshots.push(s.clone()));
    Ok(ForwardTrajectory { snapshots, events: sim.events })
}

// ── McKean–Vlasov particle system ────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MkvConfig {
    /// Immigration rate towards `θ`.
    pub c: f64,
    /// Resampling rate per ordered pair of particles.
    pub d: f64,
    /// Resampling measure `Λ` (absolute weights).
    pub lambda: AtomMeasure,
    pub theta: Vec<f64>,
    pub particles: u32,
    pub horizon: f64,
    pub burn_in: f64,
    pub sample_interval: f64,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default)]
    pub seed: u64,
    /// Keep the sampled trajectory in the report.
    #[serde(default)]
    pub record: bool,
}

fn default_batches() -> usize {
    50
}

/// Time-averaged equilibrium statistics of the particle system.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MkvReport {
    pub samples: usize,
    pub events: u64,
    /// Time-averaged type frequencies and their batch-means standard errors.
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Time-averaged squared deviation from the sample mean.
    pub variance: Vec<f64>,
    pub variance_se: Vec<f64>,
    /// `(λ+2d)/(2c+λ+2d) · θ_a(1−θ_a)`.
    pub predicted_variance: Vec<f64>,
    /// Exact stationary variance for the given number of particles.
    pub finite_size_variance: Vec<f64>,
    /// `(time, frequencies)` at each sample, if requested.
    pub trajectory: Option<Vec<(f64, Vec<f64>)>>,
}

impl MkvConfig {
    pub fn check(&self) -> Result<()> {
        check_theta(&self.theta)?;
        self.lambda.check()?;
        if !(self.c.is_finite() && self.c >= 0.0 && self.d.is_finite() && self.d >= 0.0) {
            return invalid("c and d must be finite and non-negative");
        }
        if self.particles < 2 {
            return invalid("need at least two particles");
        }
        if !(self.sample_interval > 0.0 && self.burn_in >= 0.0 && self.horizon > self.burn_in) {
            return invalid("need sample_interval > 0 and horizon > burn_in >= 0");
        }
        if self.batches < 2 {
            return invalid("need at least two batches");
        }
        let samples = ((self.horizon - self.burn_in) / self.sample_interval).floor() as usize;
        if samples < self.batches {
            return invalid(format!("{samples} samples cannot fill {} batches", self.batches));
        }
        Ok(())
    }
}

/// Stationary variance of a type frequency: `θ(1−θ)(A + 2c/n)/(2c + A)` with
/// `A = 2d + Σ_i w_i (1 + 2(1−r_i)/(r_i n))`.
pub fn mkv_finite_size_variance(c: f64, d: f64, lambda: &AtomMeasure, theta: f64, n: u32) -> f64 {
    let n = f64::from(n);
    let a = 2.0 * d + lambda.atoms.iter().map(|&(r, w)| w * (1.0 + 2.0 * (1.0 - r) / (r * n))).sum::<f64>();
    theta * (1.0 - theta) * (a + 2.0 * c / n) / (2.0 * c + a)
}

/// Run the `n`-particle system and report time-averaged equilibrium statistics.
pub fn mkv_particle(cfg: &MkvConfig) -> Result<MkvReport> {
    cfg.check()?;
    let q = cfg.theta.len();
    let n = u64::from(cfg.particles);
    let nf = n as f64;
    let mut rng = stream_rng(cfg.seed, RUN_STREAM);
    let mut counts: Vec<u64> = cfg.theta.iter().map(|p| (p * nf).floor() as u64).collect();
    let short = n - counts.iter().sum::<u64>();
    counts[0] += short;

    let stars: Vec<f64> = cfg.lambda.atoms.iter().map(|&(r, w)| w / (r * r)).collect();
    let star_total: f64 = stars.iter().sum();
    let immigration = cfg.c * nf;

    let mut samples: Vec<Vec<f64>> = Vec::new();
    let mut times = Vec::new();
    let first = (cfg.burn_in / cfg.sample_interval).ceil() as u64;
    let mut grid = first;
    let mut next_obs = grid as f64 * cfg.sample_interval;
    let (mut time, mut events) = (0.0, 0u64);
    loop {
        let sq: f64 = counts.iter().map(|&c| (c as f64) * (c as f64)).sum();
        let moran = cfg.d * (nf * nf - sq);
        let total = immigration + moran + star_total;
        let t_next = if total > 0.0 { time + rng.sample::<f64, _>(Exp1) / total } else { f64::INFINITY };
        while next_obs <= cfg.horizon && next_obs < t_next {
            samples.push(counts.iter().map(|&c| c as f64 / nf).collect());
            times.push(next_obs);
            grid += 1;
            next_obs = grid as f64 * cfg.sample_interval;
        }
        if t_next > cfg.horizon {
            break;
        }
        time = t_next;
        events += 1;
        let u = rng.random::<f64>() * total;
        if u < immigration {
            let a = pick_weighted(&mut rng, counts.iter().map(|&c| c as f64), nf);
            let b = pick_weighted(&mut rng, cfg.theta.iter().copied(), 1.0);
            counts[a] -= 1;
            counts[b] += 1;
        } else if u < immigration + moran {
            let a = pick_weighted(&mut rng, counts.iter().map(|&c| (c * (n - c)) as f64), nf * nf - sq);
            let rest = (n - counts[a]) as f64;
            let b = pick_weighted(
                &mut rng,
                counts.iter().enumerate().map(|(b, &c)| if b == a { 0.0 } else { c as f64 }),
                rest,
            );
            counts[a] -= 1;
            counts[b] += 1;
        } else {
            let i = pick_weighted(&mut rng, stars.iter().copied(), star_total);
            let r = cfg.lambda.atoms[i].0;
            let parent = pick_weighted(&mut rng, counts.iter().map(|&c| c as f64), nf);
            for b in 0..q {
                if b != parent {
                    let moved = binomial(&mut rng, counts[b], r);
                    counts[b] -= moved;
                    counts[parent] += moved;
                }
            }
        }
    }

    let s = samples.len();
    let mean: Vec<f64> = (0..q).map(|a| samples.iter().map(|x| x[a]).sum::<f64>() / s as f64).collect();
    let per_batch = s / cfg.batches;
    let batch_stat = |f: &dyn Fn(&[f64]) -> f64| -> (f64, f64) {
        let values: Vec<f64> = (0..cfg.batches)
            .map(|b| samples[b * per_batch..(b + 1) * per_batch].iter().map(|x| f(x)).sum::<f64>() / per_batch as f64)
            .collect();
        let overall = samples.iter().map(|x| f(x)).sum::<f64>() / s as f64;
        let m = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0);
        (overall, (var / values.len() as f64).sqrt())
    };
    let mut mean_se = Vec::with_capacity(q);
    let mut variance = Vec::with_capacity(q);
    let mut variance_se = Vec::with_capacity(q);
    for a in 0..q {
        mean_se.push(batch_stat(&|x: &[f64]| x[a]).1);
        let (v, se) = batch_stat(&|x: &[f64]| (x[a] - mean[a]).powi(2));
        variance.push(v);
        variance_se.push(se);
    }
    let lam = cfg.lambda.total_mass();
    let factor = (lam + 2.0 * cfg.d) / (2.0 * cfg.c + lam + 2.0 * cfg.d);
    Ok(MkvReport {
        samples: s,
        events,
        mean,
        mean_se,
        variance,
        variance_se,
        predicted_variance: cfg.theta.iter().map(|t| factor * t * (1.0 - t)).collect(),
        finite_size_variance: cfg
            .theta
            .iter()
            .map(|&t| mkv_finite_size_variance(cfg.c, cfg.d, &cfg.lambda, t, cfg.particles))
            .collect(),
        trajectory: cfg.record.then(|| times.into_iter().zip(samples).collect()),
    })
}

// ── Two-level block scaling ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockscaleConfig {
    /// Group orders to sweep.
    pub orders: Vec<u32>,
    pub m_ind: u32,
    pub theta: Vec<f64>,
    #[serde(default)]
    pub d0: f64,
    pub env: EnvSpec,
    #[serde(default)]
    pub env_seed: u64,
    #[serde(default)]
    pub seed: u64,
    /// Horizon, burn-in and sampling step in macro time `t/N`.
    pub macro_horizon: f64,
    pub macro_burn_in: f64,
    pub macro_interval: f64,
    #[serde(default = "default_batches")]
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockscaleRow {
    pub order: u32,
    /// Quadratic-variation rate of the type-0 frequency of 1-blocks per unit of `y(1−y)`.
    pub estimate: f64,
    pub estimate_se: f64,
    /// `2d₁ + λ₁ρ` averaged over 1-blocks with occupation weights.
    pub prediction: f64,
    pub relative_gap: f64,
    /// Mean increment of the global type-0 frequency per macro step, with its standard error.
    pub global_drift: f64,
    pub global_drift_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockscaleReport {
    /// `d₁ = E[c₀(μ₀ρ + d₀)/(c₀ + μ₀ρ + d₀)]`.
    pub d1: f64,
    pub rows: Vec<BlockscaleRow>,
    /// Whether the relative gap decreases along the sweep.
    pub gap_shrinks: bool,
}

/// Predicted `d₁` from level-0 parameters.
pub fn d1_prediction(spec: &EnvSpec, d0: f64) -> f64 {
    let atoms = spec.law.atoms();
    f_map(spec.params.c(0), spec.params.mu(0), &atoms, d0)
}

/// Compare the 1-block variance rate on time scale `Nt` against `2d₁ + λ₁ρ`.
pub fn blockscale_check(cfg: &BlockscaleConfig) -> Result<BlockscaleReport> {
    if cfg.orders.is_empty() {
        return invalid("need at least one order in the sweep");
    }
    if !(cfg.macro_interval > 0.0 && cfg.macro_burn_in >= 0.0 && cfg.macro_horizon > cfg.macro_burn_in) {
        return invalid("need macro_interval > 0 and macro_horizon > macro_burn_in >= 0");
    }
    if cfg.batches < 2 {
        return invalid("need at least two batches");
    }
    cfg.env.params.ensure_covers(3)?;
    let d1 = d1_prediction(&cfg.env, cfg.d0);
    let mut rows = Vec::new();
    for &order in &cfg.orders {
        let n = order as f64;
        let fwd = ForwardConfig {
            order,
            levels: 2,
            m_ind: cfg.m_ind,
            theta: cfg.theta.clone(),
            d0: cfg.d0,
            env: cfg.env.clone(),
            env_seed: cfg.env_seed,
            seed: crate::rng::mix_pair(cfg.seed, u64::from(order)),
            horizon: cfg.macro_horizon * n,
            record_interval: cfg.macro_interval * n,
            source_immigration: 0.0,
        };
        let mut sim = Forward::new(&fwd)?;
        let env = Environment::new(cfg.env.clone(), cfg.env_seed)?;
        let per_block: Vec<f64> = (0..order as usize)
            .map(|b| {
                let digits = [0, b as u32];
                2.0 * d1 + env.params().lambda(1) * env.rho_at_digits(order, &digits, 1) * env.chi().total_mass()
            })
            .collect();
        let steps = ((cfg.macro_horizon - cfg.macro_burn_in) / cfg.macro_interval).floor() as usize;
        let per_batch = steps / cfg.batches;
        if per_batch == 0 {
            return invalid("too few macro steps for the requested batches");
        }
        let mut qv = vec![0.0; cfg.batches];
        let mut occ = vec![0.0; cfg.batches];
        let mut weighted_prediction = 0.0;
        let mut increments = Vec::with_capacity(steps);
        let mut prev: Option<(Vec<f64>, f64)> = None;
        let mut step = 0usize;
        sim.run(fwd.horizon, fwd.record_interval, |s| {
            let blocks: Vec<f64> = (0..order as usize)
                .map(|b| s.average_over(b * order as usize..(b + 1) * order as usize)[0])
                .collect();
            let global = blocks.iter().sum::<f64>() / n;
            if s.time >= cfg.macro_burn_in * n - 1e-9 {
                if let Some((before, g_before)) = &prev {
                    let batch = step / per_batch;
                    if batch < cfg.batches {
                        for (b, (&y, &y0)) in blocks.iter().zip(before).enumerate() {
                            let w = y0 * (1.0 - y0) * cfg.macro_interval;
                            qv[batch] += (y - y0).powi(2);
                            occ[batch] += w;
                            weighted_prediction += w * per_block[b];
                        }
                        increments.push(global - g_before);
                    }
                    step += 1;
                }
                prev = Some((blocks, global));
            }
        });
        let total_occ: f64 = occ.iter().sum();
        if total_occ <= 0.0 {
            return Err(Error::Unresolved(format!("N = {order}: 1-blocks fixed before sampling")));
        }
        let estimate = qv.iter().sum::<f64>() / total_occ;
        let batch_est: Vec<f64> = qv.iter().zip(&occ).filter(|(_, o)| **o > 0.0).map(|(q, o)| q / o).collect();
        let estimate_se = if batch_est.len() > 1 {
            let m = batch_est.iter().sum::<f64>() / batch_est.len() as f64;
            let v = batch_est.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batch_est.len() as f64 - 1.0);
            (v / batch_est.len() as f64).sqrt()
        } else {
            f64::NAN
        };
        let prediction = weighted_prediction / total_occ;
        let k = increments.len() as f64;
        let drift = increments.iter().sum::<f64>() / k;
        let drift_var = increments.iter().map(|x| (x - drift).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
        rows.push(BlockscaleRow {
            order,
            estimate,
            estimate_se,
            prediction,
            relative_gap: (estimate - prediction).abs() / prediction,
            global_drift: drift,
            global_drift_se: (drift_var / k).sqrt(),
        });
    }
    let gap_shrinks = rows.windows(2).all(|w| w[1].relative_gap < w[0].relative_gap);
    Ok(BlockscaleReport { d1, rows, gap_shrinks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{EnvLaw, ParamFamily};
    use proptest::prelude::*;

    fn env(c: Vec<f64>, lambda: Vec<f64>, law: EnvLaw) -> EnvSpec {
        EnvSpec { law, chi: AtomMeasure::default(), params: ParamFamily::Explicit { c, lambda } }
    }

    fn base(order: u32, levels: usize, spec: EnvSpec) -> ForwardConfig {
        ForwardConfig {
            order,
            levels,
            m_ind: 10,
            theta: vec![0.3, 0.5, 0.2],
            d0: 0.5,
            env: spec,
            env_seed: 1,
            seed: 2,
            horizon: 5.0,
            record_interval: 0.5,
            source_immigration: 0.0,
        }
    }

    /// Batch-means mean and standard error of a stationary series.
    fn batch_mean(xs: &[f64], batches: usize) -> (f64, f64) {
        let per = xs.len() / batches;
        let means: Vec<f64> = (0..batches).map(|b| xs[b * per..(b + 1) * per].iter().sum::<f64>() / per as f64).collect();
        let m = means.iter().sum::<f64>() / batches as f64;
        let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
        (m, (v / batches as f64).sqrt())
    }

    #[test]
    fn frozen_without_rates() {
        let cfg = ForwardConfig { d0: 0.0, ..base(3, 2, env(vec![0.0; 3], vec![0.0; 3], EnvLaw::dirac(1.0))) };
        let traj = simulate_forward(&cfg).unwrap();
        assert_eq!(traj.events, 0);
        assert_eq!(traj.snapshots.len(), 11);
        assert!(traj.snapshots.iter().all(|s| s.counts == traj.snapshots[0].counts));
    }

    #[test]
    fn colonies_stay_full() {
        let cfg = base(3, 2, env(vec![1.0, 0.5, 0.2], vec![1.0, 2.0, 3.0], EnvLaw::two_point(0.5, 1.5, 0.5)));
        let traj = simulate_forward(&cfg).unwrap();
        assert!(traj.events > 100);
        for s in &traj.snapshots {
            for x in 0..9 {
                assert_eq!(s.colony(x).iter().sum::<u32>(), 10);
            }
        }
    }

    #[test]
    fn migration_preserves_global_counts() {
        let cfg = ForwardConfig { d0: 0.0, ..base(3, 2, env(vec![2.0, 1.0, 1.0], vec![0.0; 3], EnvLaw::dirac(1.0))) };
        let traj = simulate_forward(&cfg).unwrap();
        let first = traj.snapshots[0].totals();
        assert!(traj.snapshots.iter().all(|s| s.totals() == first));
        assert_ne!(traj.snapshots[0].counts, traj.snapshots.last().unwrap().counts);
    }

    #[test]
    fn reshuffle_preserves_block_totals() {
        let cfg = base(4, 2, env(vec![1.0; 3], vec![1.0; 3], EnvLaw::dirac(1.0)));
        let mut sim = Forward::new(&cfg).unwrap();
        let before = sim.state.clone();
        let totals = reshuffle(&mut sim.state, 4..8, &mut sim.rng);
        let sum = |s: &ForwardState| -> Vec<u64> {
            (0..3).map(|a| (4..8).map(|x| u64::from(s.colony(x)[a])).sum()).collect()
        };
        assert_eq!(sum(&before), totals);
        assert_eq!(sum(&sim.state), totals);
        assert_eq!(before.colony(0), sim.state.colony(0));
        assert!((4..8).all(|x| sim.state.colony(x).iter().sum::<u32>() == 10));
    }

    #[test]
    fn block_averages() {
        let cfg = base(3, 2, env(vec![1.0; 3], vec![1.0; 3], EnvLaw::dirac(1.0)));
        let state = simulate_forward(&cfg).unwrap().snapshots.pop().unwrap();
        let eta = HierAddress::new(3, vec![2, 1]).unwrap();
        let own: Vec<f64> = state.colony(5).iter().map(|&c| f64::from(c) / 10.0).collect();
        assert_eq!(state.colony_index(&eta).unwrap(), 5);
        assert_eq!(block_average(&state, &eta, 0).unwrap(), own);
        let children: Vec<Vec<f64>> = (0..3)
            .map(|b| block_average(&state, &HierAddress::new(3, vec![0, b]).unwrap(), 1).unwrap())
            .collect();
        let top = block_average(&state, &eta, 2).unwrap();
        for a in 0..3 {
            let avg = children.iter().map(|c| c[a]).sum::<f64>() / 3.0;
            assert!((avg - top[a]).abs() < 1e-12);
        }
        let totals = state.totals();
        assert!((top[0] - totals[0] as f64 / 90.0).abs() < 1e-12);
        assert!(matches!(block_average(&state, &eta, 3), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn reproducible_trajectories() {
        let cfg = base(2, 3, env(vec![1.0; 4], vec![0.5; 4], EnvLaw::two_point(0.5, 1.5, 0.5)));
        assert_eq!(simulate_forward(&cfg).unwrap(), simulate_forward(&cfg).unwrap());
        let other = ForwardConfig { seed: 3, ..cfg.clone() };
        assert_ne!(simulate_forward(&cfg).unwrap(), simulate_forward(&other).unwrap());
    }

    #[test]
    fn config_errors() {
        let good = base(3, 1, env(vec![1.0; 2], vec![1.0; 2], EnvLaw::dirac(1.0)));
        assert!(simulate_forward(&ForwardConfig { theta: vec![1.0], ..good.clone() }).is_err());
        assert!(simulate_forward(&ForwardConfig { theta: vec![0.6, 0.6], ..good.clone() }).is_err());
        assert!(simulate_forward(&ForwardConfig { m_ind: 1, ..good.clone() }).is_err());
        assert!(simulate_forward(&ForwardConfig { levels: 4, ..good.clone() }).is_err());
        assert!(simulate_forward(&ForwardConfig { record_interval: 0.0, ..good }).is_err());
    }

    #[test]
    fn single_colony_matches_variance_factor() {
        // One colony with immigration from θ: E[x(1−x)] = 2c/(2c+λρ+2d) · θ(1−θ).
        let spec = env(vec![0.0], vec![1.0], EnvLaw::two_point(0.5, 1.5, 0.5));
        let rho = Environment::new(spec.clone(), 4).unwrap().rho_at_digits(2, &[], 0);
        let (c, d, m, theta) = (1.0, 0.25, 400u32, 0.4);
        let cfg = ForwardConfig {
            order: 2,
            levels: 0,
            m_ind: m,
            theta: vec![theta, 1.0 - theta],
            d0: d,
            env: spec,
            env_seed: 4,
            seed: 8,
            horizon: 1500.0,
            record_interval: 0.1,
            source_immigration: c,
        };
        let traj = simulate_forward(&cfg).unwrap();
        let series: Vec<f64> = traj.snapshots[100..]
            .iter()
            .map(|s| {
                let x = f64::from(s.counts[0]) / f64::from(m);
                x * (1.0 - x)
            })
            .collect();
        let (est, se) = batch_mean(&series, 30);
        let lam = rho;
        let factor = 2.0 * c / (2.0 * c + lam + 2.0 * d);
        let exact = theta * (1.0 - theta) - mkv_finite_size_variance(c, d, &AtomMeasure::single(0.5, lam), theta, m);
        assert!((est - factor * theta * (1.0 - theta)).abs() < 3.0 * se, "{est} ± {se} vs {}", factor * theta * (1.0 - theta));
        assert!((est - exact).abs() < 3.0 * se);
    }

    fn mkv(c: f64, d: f64, w: f64, horizon: f64, interval: f64) -> MkvConfig {
        MkvConfig {
            c,
            d,
            lambda: AtomMeasure::single(0.5, w),
            theta: vec![0.3, 0.7],
            particles: 500,
            horizon,
            burn_in: horizon / 100.0,
            sample_interval: interval,
            batches: 40,
            seed: 21,
            record: false,
        }
    }

    #[test]
    fn mkv_equilibrium_moments() {
        let r = mkv_particle(&mkv(1.0, 0.25, 1.0, 800.0, 0.05)).unwrap();
        assert!((r.mean[0] - 0.3).abs() < 3.0 * r.mean_se[0], "{:?} {:?}", r.mean, r.mean_se);
        assert!((r.variance[0] - r.predicted_variance[0]).abs() < 3.0 * r.variance_se[0]);
        assert!((r.mean[0] + r.mean[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mkv_time_rescaling_is_exact() {
        let slow = mkv_particle(&mkv(1.0, 0.25, 1.0, 100.0, 0.5)).unwrap();
        let fast = mkv_particle(&mkv(2.0, 0.5, 2.0, 50.0, 0.25)).unwrap();
        assert_eq!(slow.mean, fast.mean);
        assert_eq!(slow.variance, fast.variance);
        assert_eq!(slow.events, fast.events);
        assert_eq!(slow.predicted_variance, fast.predicted_variance);
    }

    #[test]
    fn mkv_finite_size_limit() {
        let lam = AtomMeasure::single(0.5, 1.0);
        let big = mkv_finite_size_variance(1.0, 0.25, &lam, 0.5, 1_000_000_000);
        assert!((big - 0.25 * 1.5 / 3.5).abs() < 1e-8);
    }

    #[test]
    fn mkv_trajectory_recorded() {
        let cfg = MkvConfig { record: true, ..mkv(1.0, 0.25, 1.0, 20.0, 0.1) };
        let r = mkv_particle(&cfg).unwrap();
        let traj = r.trajectory.unwrap();
        assert_eq!(traj.len(), r.samples);
        assert!(traj.windows(2).all(|w| w[1].0 > w[0].0));
        assert!(mkv_particle(&MkvConfig { batches: 1000, ..cfg }).is_err());
    }

    #[test]
    fn d1_for_dirac_environment() {
        let spec = env(vec![2.0, 1.0, 1.0], vec![1.0, 0.0, 0.0], EnvLaw::dirac(1.0));
        let (c0, mu0, d0) = (2.0, 0.5, 0.3);
        assert!((d1_prediction(&spec, d0) - c0 * (mu0 + d0) / (c0 + mu0 + d0)).abs() < 1e-15);
    }

    #[test]
    fn blockscale_trend() {
        let spec = env(vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 0.0], EnvLaw::dirac(1.0));
        let cfg = BlockscaleConfig {
            orders: vec![4, 16],
            m_ind: 20,
            theta: vec![0.5, 0.5],
            d0: 1.0,
            env: spec,
            env_seed: 0,
            seed: 3,
            macro_horizon: 30.0,
            macro_burn_in: 2.0,
            macro_interval: 0.02,
            batches: 20,
        };
        let r = blockscale_check(&cfg).unwrap();
        assert_eq!(r.d1, 0.5);
        assert!(r.rows[1].relative_gap < r.rows[0].relative_gap, "{r:#?}");
        assert!(r.rows[1].relative_gap < 0.05, "{r:#?}");
        for row in &r.rows {
            assert!(row.global_drift.abs() < 4.0 * row.global_drift_se, "{row:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn block_events_preserve_population(seed in any::<u64>(), order in 2u32..4, levels in 0usize..3) {
            let spec = env(vec![0.5; 4], vec![2.0; 4], EnvLaw::two_point(0.5, 1.5, 0.5));
            let cfg = ForwardConfig { seed, order, levels, horizon: 2.0, ..base(order, levels, spec) };
            let traj = simulate_forward(&cfg).unwrap();
            let colonies = (order as usize).pow(levels as u32);
            for s in &traj.snapshots {
                prop_assert_eq!(s.totals().iter().sum::<u64>(), colonies as u64 * 10);
                prop_assert!((0..colonies).all(|x| s.colony(x).iter().sum::<u32>() == 10));
            }
        }
    }
}
