//! The spatial Λ-coalescent in a quenched environment.
//!
//! Partition elements ("blocks") sit on sites of Ω_N. Each block migrates
//! at level `i` at rate `N^{−(i−1)} (c_{i−1} + λ_i ρ^{(i)}/N)`, with `ρ^{(i)}` the
//! environment at its height-`i` ancestor, landing uniformly in its `i`-block.
//! The vertex `ξ` at height `k` carrying `b ≥ 2` blocks fires a block event at
//! rate `N^{−k} Σ_l C(b,l) λ^ξ_{b,l}`: a uniform `l`-subset of its blocks
//! merges and every block below `ξ` is then placed uniformly in `B_k(ξ)`.
//! Blocks sharing a site also merge pairwise at Kingman rate `2d₀`.
//!
//! Only levels up to `level_cut` are active. The accumulated pair hazard is
//! the time integral of the summed pair-coalescence rates over all pairs of
//! distinct blocks.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{binomial, AtomMeasure, Environment, ParamFamily};
use crate::error::{invalid, Error, Result};
use crate::hiergroup::{HierAddress, TreeAddress};
use crate::rng::{substream_rng, SimRng};

/// Stream tag for pair-estimator replicas.
const PAIR_STREAM: u64 = 0x7061_6972;
/// Extra levels scanned when bounding neglected rates.
const TAIL_LEVELS: usize = 400;

// ── Rates ────────────────────────────────────────────────────────────────────

/// `λ_{b,l}`: rate at which a given `l` of `b` blocks merge under `Λ`.
pub fn coalescence_rate(b: usize, l: usize, lambda: &AtomMeasure) -> Result<f64> {
    lambda.check()?;
    lambda.coalescence_rate(b, l)
}

/// Total block-event rate `Σ_{l=2}^{b} C(b,l) λ_{b,l}` for a measure.
pub fn block_event_rate(b: usize, lambda: &AtomMeasure) -> f64 {
    if b < 2 {
        return 0.0;
    }
    lambda
        .atoms
        .iter()
        .map(|&(r, w)| {
            let s = 1.0 - r;
            w / (r * r) * (1.0 - s.powi(b as i32) - b as f64 * r * s.powi(b as i32 - 1))
        })
        .sum()
}

/// `c_k(ω)(N, η) = c_k + λ_{k+1} ρ^{MC_{k+1}(η)} / N`.
pub fn effective_migration(env: &Environment, eta: &HierAddress, k: usize) -> Result<f64> {
    let params = env.params();
    let (c, lam) = match (params.c_opt(k), params.lambda_opt(k + 1)) {
        (Some(c), Some(l)) => (c, l),
        _ => return Err(Error::OutOfRange(format!("parameters do not cover level {}", k + 1))),
    };
    let rho = env.rho_at_digits(eta.order(), eta.digits(), k + 1);
    Ok(c + lam * rho / eta.order() as f64)
}

/// Smallest level cut whose neglected migration and block-event rates are
/// below `tol` times the active ones (for a single lineage in mean environment).
pub fn default_level_cut(params: &ParamFamily, order: u32, tol: f64) -> Result<usize> {
    if order < 2 {
        return invalid(format!("order N = {order} must be at least 2"));
    }
    let n = order as f64;
    let limit = params.available().map(|a| a.saturating_sub(1)).unwrap_or(4000);
    let term = |i: usize| -> Option<f64> {
        let q = (params.c_opt(i - 1)? + params.lambda_opt(i)? / n) * n.powi(1 - i as i32);
        Some(q + params.lambda_opt(i)? * n.powi(-(i as i32)))
    };
    let mut active = params.lambda_opt(0).unwrap_or(0.0);
    for k in 1..=limit {
        active += term(k).ok_or_else(|| Error::OutOfRange(format!("parameters do not cover level {k}")))?;
        let tail: Vec<f64> = (k + 1..=k + TAIL_LEVELS).map_while(term).collect();
        if tail.len() < 2 || tail.iter().any(|t| !t.is_finite()) {
            break;
        }
        let (a, b) = (tail[tail.len() - 2], tail[tail.len() - 1]);
        let extrapolated = if b == 0.0 {
            0.0
        } else if b < a {
            b * (b / a) / (1.0 - b / a)
        } else {
            f64::INFINITY
        };
        if tail.iter().sum::<f64>() + extrapolated < tol * active {
            return Ok(k);
        }
    }
    Err(Error::DivergentTail(format!("neglected rate stays above {tol} of the active rate")))
}

// ── Partitions ───────────────────────────────────────────────────────────────

/// A partition element with its location.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Block {
    /// Sorted lineage labels `1 … n`.
    pub members: Vec<u32>,
    pub location: HierAddress,
}

/// Partition of `{1, …, n}` labelled by sites of Ω_N.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelledPartition {
    pub order: u32,
    pub n: usize,
    pub blocks: Vec<Block>,
}

impl LabelledPartition {
    /// Check that the member sets partition `{1, …, n}` and locations match `N`.
    pub fn check(&self) -> Result<()> {
        let mut seen = vec![false; self.n];
        for b in &self.blocks {
            if b.location.order() != self.order {
                return invalid("block location has the wrong order");
            }
            for &m in &b.members {
                let i = (m as usize).checked_sub(1).filter(|&i| i < self.n);
                match i {
                    Some(i) if !seen[i] => seen[i] = true,
                    _ => return invalid(format!("label {m} repeated or out of range")),
                }
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            invalid("member sets do not cover all labels")
        }
    }

    /// Sorted block sizes, largest first.
    pub fn block_sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.blocks.iter().map(|b| b.members.len()).collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    }
}

// ── Simulation ───────────────────────────────────────────────────────────────

/// Settings for a single trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub order: u32,
    pub level_cut: usize,
    pub horizon: f64,
    #[serde(default)]
    pub kingman_d0: f64,
    #[serde(default)]
    pub record_events: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Migration,
    BlockEvent,
    Kingman,
}

/// One logged transition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    /// Block of the event: the jump block for a migration, `ξ` otherwise.
    pub vertex: TreeAddress,
    /// Member sets that merged (empty for migrations).
    pub merged: Vec<Vec<u32>>,
    /// New location of every relocated block.
    pub locations: Vec<HierAddress>,
}

/// Final state of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoalescentState {
    pub partition: LabelledPartition,
    pub clock: f64,
    pub hazard: f64,
    pub events: Vec<EventRecord>,
    /// `(time, number of blocks)` after every change in the block count.
    pub block_counts: Vec<(f64, usize)>,
}

type VertexKey = (usize, Vec<u32>);

#[derive(Clone, Debug, PartialEq)]
enum Target {
    Block(usize),
    Vertex(VertexKey),
}

#[derive(Debug)]
struct Entry {
    time: f64,
    seq: u64,
    version: u64,
    target: Target,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

struct BlockState {
    members: Vec<u32>,
    digits: Vec<u32>,
    version: u64,
}

#[derive(Default)]
struct VertexState {
    blocks: BTreeSet<usize>,
    version: u64,
    rho: f64,
}

/// Rate tables shared by the simulators.
struct Rates {
    order: u32,
    n: f64,
    levels: usize,
    /// `c_0 … c_{K−1}`.
    c: Vec<f64>,
    /// `λ_0 … λ_K`.
    lam: Vec<f64>,
    chi: AtomMeasure,
    pair: f64,
    d0: f64,
}

impl Rates {
    fn new(env: &Environment, order: u32, levels: usize, d0: f64) -> Result<Self> {
        if order < 2 {
            return invalid(format!("order N = {order} must be at least 2"));
        }
        if !(d0.is_finite() && d0 >= 0.0) {
            return invalid(format!("kingman_d0 = {d0} must be finite and non-negative"));
        }
        let p = env.params();
        p.ensure_covers(levels + 1)?;
        let c = (0..levels).map(|k| p.c(k)).collect();
        let lam = (0..=levels).map(|k| p.lambda(k)).collect();
        let chi = env.chi().clone();
        let pair = chi.coalescence_rate_unchecked(2, 2);
        Ok(Self { order, n: order as f64, levels, c, lam, chi, pair, d0 })
    }

    /// Migration rate at level `i ≥ 1` given `ρ` at the height-`i` ancestor.
    fn migration(&self, i: usize, rho: f64) -> f64 {
        (self.c[i - 1] + self.lam[i] * rho / self.n) * self.n.powi(1 - i as i32)
    }

    fn vertex(&self, k: usize, rho: f64, b: usize) -> f64 {
        if b < 2 {
            return 0.0;
        }
        let kingman = if k == 0 { self.d0 * (b * (b - 1)) as f64 } else { 0.0 };
        self.n.powi(-(k as i32)) * self.lam[k] * rho * block_event_rate(b, &self.chi) + kingman
    }

    /// Pair hazard rate contributed by one vertex with `b` blocks.
    fn pair_hazard(&self, k: usize, rho: f64, b: usize) -> f64 {
        if b < 2 {
            return 0.0;
        }
        let pairs = binomial(b, 2);
        let kingman = if k == 0 { 2.0 * self.d0 } else { 0.0 };
        pairs * (self.n.powi(-(k as i32)) * self.lam[k] * rho * self.pair + kingman)
    }
}

fn exp_time(rng: &mut SimRng, rate: f64) -> f64 {
    if rate > 0.0 {
        rng.sample::<f64, _>(Exp1) / rate
    } else {
        f64::INFINITY
    }
}

fn pick(rng: &mut SimRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

struct Sim<'a> {
    env: &'a Environment,
    rates: Rates,
    len: usize,
    blocks: Vec<Option<BlockState>>,
    vertices: BTreeMap<VertexKey, VertexState>,
    heap: BinaryHeap<Reverse<Entry>>,
    seq: u64,
    rng: SimRng,
    time: f64,
    hazard: f64,
    events: Vec<EventRecord>,
    block_counts: Vec<(f64, usize)>,
    record: bool,
}

impl<'a> Sim<'a> {
    fn rho(&self, digits: &[u32], h: usize) -> f64 {
        self.env.rho_at_digits(self.rates.order, digits, h)
    }

    fn address(&self, digits: &[u32]) -> HierAddress {
        HierAddress::from_digits_unchecked(self.rates.order, digits.to_vec())
    }

    fn vertex_address(&self, key: &VertexKey) -> TreeAddress {
        let mut digits = vec![0; key.0];
        digits.extend_from_slice(&key.1);
        TreeAddress::new(self.address(&digits), key.0)
    }

    fn live_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_some()).count()
    }

    fn push(&mut self, time: f64, version: u64, target: Target) {
        if time.is_finite() {
            self.seq += 1;
            self.heap.push(Reverse(Entry { time, seq: self.seq, version, target }));
        }
    }

    fn schedule_block(&mut self, id: usize) {
        self.seq += 1;
        let version = self.seq;
        let Some(b) = self.blocks[id].as_mut() else { return };
        b.version = version;
        let digits = b.digits.clone();
        let rate: f64 = (1..=self.rates.levels).map(|i| self.rates.migration(i, self.rho(&digits, i))).sum();
        let t = self.time + exp_time(&mut self.rng, rate);
        self.push(t, version, Target::Block(id));
    }

    fn schedule_vertex(&mut self, key: &VertexKey) {
        self.seq += 1;
        let version = self.seq;
        let Some(v) = self.vertices.get_mut(key) else { return };
        v.version = version;
        let (rho, b) = (v.rho, v.blocks.len());
        let rate = self.rates.vertex(key.0, rho, b);
        let t = self.time + exp_time(&mut self.rng, rate);
        self.push(t, version, Target::Vertex(key.clone()));
    }

    fn attach(&mut self, id: usize, h: usize) -> VertexKey {
        let digits = self.blocks[id].as_ref().expect("live block").digits.clone();
        let key = (h, digits[h..].to_vec());
        if !self.vertices.contains_key(&key) {
            let rho = self.rho(&digits, h);
            self.vertices.insert(key.clone(), VertexState { rho, ..Default::default() });
        }
        self.vertices.get_mut(&key).expect("present").blocks.insert(id);
        key
    }

    fn detach(&mut self, id: usize, h: usize) -> VertexKey {
        let digits = &self.blocks[id].as_ref().expect("live block").digits;
        let key = (h, digits[h..].to_vec());
        if let Some(v) = self.vertices.get_mut(&key) {
            v.blocks.remove(&id);
            if v.blocks.is_empty() {
                self.vertices.remove(&key);
            }
        }
        key
    }

    fn pair_rate(&self) -> f64 {
        self.vertices.iter().map(|(k, v)| self.rates.pair_hazard(k.0, v.rho, v.blocks.len())).sum()
    }

    fn reschedule_all(&mut self) {
        for id in 0..self.blocks.len() {
            self.schedule_block(id);
        }
        let keys: Vec<VertexKey> = self.vertices.keys().cloned().collect();
        for key in &keys {
            self.schedule_vertex(key);
        }
        if self.heap.len() > 8 * (self.blocks.len() + keys.len()) + 64 {
            let live: Vec<_> = std::mem::take(&mut self.heap).into_iter().filter(|e| self.is_current(&e.0)).collect();
            self.heap = live.into_iter().collect();
        }
    }

    fn is_current(&self, e: &Entry) -> bool {
        match &e.target {
            Target::Block(id) => self.blocks[*id].as_ref().is_some_and(|b| b.version == e.version),
            Target::Vertex(key) => self.vertices.get(key).is_some_and(|v| v.version == e.version),
        }
    }

    fn migrate(&mut self, id: usize) {
        let old = self.blocks[id].as_ref().expect("live block").digits.clone();
        let weights: Vec<f64> = (1..=self.rates.levels).map(|i| self.rates.migration(i, self.rho(&old, i))).collect();
        let level = pick(&mut self.rng, &weights) + 1;
        let mut new = old.clone();
        for d in new.iter_mut().take(level) {
            *d = self.rng.random_range(0..self.rates.order);
        }
        let top = (0..level).rev().find(|&j| new[j] != old[j]).map_or(0, |j| j + 1);
        let mut touched = Vec::with_capacity(2 * top);
        for h in 0..top {
            touched.push(self.detach(id, h));
        }
        self.blocks[id].as_mut().expect("live block").digits = new.clone();
        for h in 0..top {
            touched.push(self.attach(id, h));
        }
        for key in &touched {
            self.schedule_vertex(key);
        }
        self.schedule_block(id);
        if self.record {
            let vertex = TreeAddress::new(self.address(&new), level);
            let loc = self.address(&new);
            self.events.push(EventRecord {
                time: self.time,
                kind: EventKind::Migration,
                vertex,
                merged: Vec::new(),
                locations: vec![loc],
            });
        }
    }

    fn fire_vertex(&mut self, key: VertexKey) {
        let (k, rho, ids) = {
            let v = &self.vertices[&key];
            (key.0, v.rho, v.blocks.iter().copied().collect::<Vec<usize>>())
        };
        let b = ids.len();
        let total = self.rates.vertex(k, rho, b);
        let kingman = if k == 0 { self.rates.d0 * (b * (b - 1)) as f64 } else { 0.0 };
        let is_kingman = self.rng.random::<f64>() * total < kingman;
        let chosen: Vec<usize> = if is_kingman {
            sample(&mut self.rng, b, 2).into_iter().map(|i| ids[i]).collect()
        } else {
            let weights: Vec<f64> =
                (2..=b).map(|l| binomial(b, l) * self.rates.chi.coalescence_rate_unchecked(b, l)).collect();
            let l = pick(&mut self.rng, &weights) + 2;
            sample(&mut self.rng, b, l).into_iter().map(|i| ids[i]).collect()
        };
        let mut chosen = chosen;
        chosen.sort_unstable();
        let keep = chosen[0];
        let mut merged = Vec::with_capacity(chosen.len());
        let mut members = Vec::new();
        for &id in &chosen {
            let m = self.blocks[id].as_ref().expect("live block").members.clone();
            members.extend_from_slice(&m);
            merged.push(m);
            if id != keep {
                for h in 0..=self.rates.levels {
                    self.detach(id, h);
                }
                self.blocks[id] = None;
            }
        }
        members.sort_unstable();
        self.blocks[keep].as_mut().expect("live block").members = members;
        let mut locations = Vec::new();
        if !is_kingman {
            let inside: Vec<usize> = self.vertices[&key].blocks.iter().copied().collect();
            for &id in &inside {
                for h in 0..k {
                    self.detach(id, h);
                }
                let order = self.rates.order;
                let b = self.blocks[id].as_mut().expect("live block");
                for d in b.digits.iter_mut().take(k) {
                    *d = self.rng.random_range(0..order);
                }
                for h in 0..k {
                    self.attach(id, h);
                }
                if self.record {
                    locations.push(self.address(&self.blocks[id].as_ref().expect("live block").digits));
                }
            }
        }
        self.block_counts.push((self.time, self.live_blocks()));
        if self.record {
            self.events.push(EventRecord {
                time: self.time,
                kind: if is_kingman { EventKind::Kingman } else { EventKind::BlockEvent },
                vertex: self.vertex_address(&key),
                merged,
                locations,
            });
        }
        self.reschedule_all();
    }
}

/// Simulate the coalescent of `start.len()` lineages up to `cfg.horizon`.
pub fn simulate(env: &Environment, start: &[HierAddress], cfg: &SimConfig, seed: u64) -> Result<CoalescentState> {
    if start.is_empty() {
        return invalid("need at least one lineage");
    }
    if !(cfg.horizon >= 0.0 && cfg.horizon.is_finite()) {
        return invalid(format!("horizon = {} must be finite and non-negative", cfg.horizon));
    }
    if let Some(a) = start.iter().find(|a| a.order() != cfg.order) {
        return invalid(format!("start address {a} has order {}, expected {}", a.order(), cfg.order));
    }
    let rates = Rates::new(env, cfg.order, cfg.level_cut, cfg.kingman_d0)?;
    let len = start.iter().map(|a| a.digits().len()).max().unwrap_or(0).max(cfg.level_cut);
    let blocks = start
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut digits = a.digits().to_vec();
            digits.resize(len, 0);
            Some(BlockState { members: vec![i as u32 + 1], digits, version: 0 })
        })
        .collect();
    let mut sim = Sim {
        env,
        rates,
        len,
        blocks,
        vertices: BTreeMap::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        rng: substream_rng(seed, 0x0073_696d, 0),
        time: 0.0,
        hazard: 0.0,
        events: Vec::new(),
        block_counts: vec![(0.0, start.len())],
        record: cfg.record_events,
    };
    for id in 0..start.len() {
        for h in 0..=cfg.level_cut {
            sim.attach(id, h);
        }
    }
    sim.reschedule_all();
    let mut pair_rate = sim.pair_rate();
    while let Some(Reverse(e)) = sim.heap.pop() {
        if e.time > cfg.horizon {
            break;
        }
        if !sim.is_current(&e) {
            continue;
        }
        sim.hazard += pair_rate * (e.time - sim.time);
        sim.time = e.time;
        match e.target {
            Target::Block(id) => sim.migrate(id),
            Target::Vertex(key) => sim.fire_vertex(key),
        }
        pair_rate = sim.pair_rate();
    }
    sim.hazard += pair_rate * (cfg.horizon - sim.time);
    sim.time = cfg.horizon;
    debug_assert!(sim.len >= cfg.level_cut);
    let blocks = sim
        .blocks
        .iter()
        .flatten()
        .map(|b| Block { members: b.members.clone(), location: sim.address(&b.digits) })
        .collect();
    let partition = LabelledPartition { order: cfg.order, n: start.len(), blocks };
    Ok(CoalescentState {
        partition,
        clock: sim.time,
        hazard: sim.hazard,
        events: sim.events,
        block_counts: sim.block_counts,
    })
}

// ── Pair coalescence ─────────────────────────────────────────────────────────

/// Settings for the two-lineage estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub order: u32,
    pub level_cut: usize,
    /// Increasing observation times.
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default)]
    pub kingman_d0: f64,
    /// Keep integrating the hazard after coalescence (needed for hazard moments).
    #[serde(default)]
    pub track_hazard: bool,
}

/// One replica: coalescence time and the pair hazard at each horizon.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairOutcome {
    /// Coalescence time, `+∞` if none before the last horizon.
    pub tau: f64,
    /// Accumulated hazard at each horizon (empty unless tracked).
    pub hazard: Vec<f64>,
}

/// Aggregated estimates across replicas.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairEstimate {
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub probability: Vec<f64>,
    pub probability_se: Vec<f64>,
    pub hazard_mean: Option<Vec<f64>>,
    pub hazard_var: Option<Vec<f64>>,
    pub hazard_se: Option<Vec<f64>>,
    /// Whether the constant-environment distance chain was used.
    pub constant_path: bool,
}

impl PairConfig {
    fn check(&self) -> Result<()> {
        if self.replicas == 0 {
            return invalid("replicas must be at least 1");
        }
        if self.horizons.is_empty() {
            return invalid("horizons must not be empty");
        }
        if self.horizons.iter().any(|h| !(h.is_finite() && *h >= 0.0)) || self.horizons.windows(2).any(|w| w[1] < w[0]) {
            return invalid("horizons must be finite, non-negative and non-decreasing");
        }
        Ok(())
    }
}

/// Records the hazard at horizons and the threshold crossing over one
/// constant-rate segment `[t, end]`.
struct Tracker<'c> {
    cfg: &'c PairConfig,
    threshold: f64,
    t: f64,
    h: f64,
    next: usize,
    out: PairOutcome,
}

impl<'c> Tracker<'c> {
    fn new(cfg: &'c PairConfig, threshold: f64) -> Self {
        let hazard = Vec::with_capacity(if cfg.track_hazard { cfg.horizons.len() } else { 0 });
        Self { cfg, threshold, t: 0.0, h: 0.0, next: 0, out: PairOutcome { tau: f64::INFINITY, hazard } }
    }

    fn last(&self) -> f64 {
        *self.cfg.horizons.last().expect("non-empty")
    }

    /// Advance by `dt` at hazard rate `rate`; returns `true` when the replica is finished.
    fn advance(&mut self, dt: f64, rate: f64) -> bool {
        let end = (self.t + dt).min(self.last());
        if self.out.tau.is_infinite() && rate > 0.0 && self.h + rate * (end - self.t) >= self.threshold {
            self.out.tau = self.t + (self.threshold - self.h) / rate;
        }
        while self.next < self.cfg.horizons.len() && self.cfg.horizons[self.next] <= end {
            if self.cfg.track_hazard {
                self.out.hazard.push(self.h + rate * (self.cfg.horizons[self.next] - self.t));
            }
            self.next += 1;
        }
        self.h += rate * (end - self.t);
        self.t = end;
        self.t >= self.last() || (self.out.tau.is_finite() && !self.cfg.track_hazard)
    }
}

/// Distance chain of two walkers in a constant environment.
fn pair_constant(rates: &Rates, rho: f64, cfg: &PairConfig, rng: &mut SimRng) -> PairOutcome {
    let k = rates.levels;
    let q: Vec<f64> = (0..=k).map(|i| if i == 0 { 0.0 } else { rates.migration(i, rho) }).collect();
    let mut hz = vec![0.0; k + 2];
    for d in (0..=k).rev() {
        hz[d] = hz[d + 1] + rates.n.powi(-(d as i32)) * rates.lam[d] * rho * rates.pair;
    }
    hz[0] += 2.0 * rates.d0;
    let mut suffix = vec![0.0; k + 2];
    for i in (1..=k).rev() {
        suffix[i] = suffix[i + 1] + q[i];
    }
    let threshold: f64 = rng.sample(Exp1);
    let mut tr = Tracker::new(cfg, threshold);
    let mut d = 0usize;
    loop {
        let lo = d.max(1);
        let move_rate = 2.0 * suffix[lo];
        if tr.advance(exp_time(rng, move_rate), hz[d]) {
            return tr.out;
        }
        // Jump level i ≥ d chosen proportionally to q_i; new distance has law N[j]/N^i on j ≤ i.
        let mut u = rng.random::<f64>() * suffix[lo];
        let mut level = k;
        for (i, &qi) in q.iter().enumerate().skip(lo) {
            if u < qi {
                level = i;
                break;
            }
            u -= qi;
        }
        d = 0;
        for j in (1..=level).rev() {
            if rng.random_range(0..rates.order) != 0 {
                d = j;
                break;
            }
        }
    }
}

/// Two walkers with quenched, location-dependent rates.
fn pair_quenched(env: &Environment, rates: &Rates, cfg: &PairConfig, rng: &mut SimRng) -> PairOutcome {
    let k = rates.levels;
    let order = rates.order;
    let rho = |digits: &[u32], h: usize| env.rho_at_digits(order, digits, h);
    let level_rates = |digits: &[u32]| -> Vec<f64> { (1..=k).map(|i| rates.migration(i, rho(digits, i))).collect() };
    let hazard_rate = |x: &[u32], y: &[u32]| -> f64 {
        let d = (0..k).rev().find(|&j| x[j] != y[j]).map_or(0, |j| j + 1);
        let mut r: f64 = (d..=k).map(|h| rates.n.powi(-(h as i32)) * rates.lam[h] * rho(x, h) * rates.pair).sum();
        if d == 0 {
            r += 2.0 * rates.d0;
        }
        r
    };
    let mut pos = [vec![0u32; k], vec![0u32; k]];
    let mut lr = [level_rates(&pos[0]), level_rates(&pos[1])];
    let mut hr = hazard_rate(&pos[0], &pos[1]);
    let threshold: f64 = rng.sample(Exp1);
    let mut tr = Tracker::new(cfg, threshold);
    loop {
        let totals = [lr[0].iter().sum::<f64>(), lr[1].iter().sum::<f64>()];
        if tr.advance(exp_time(rng, totals[0] + totals[1]), hr) {
            return tr.out;
        }
        let w = usize::from(rng.random::<f64>() * (totals[0] + totals[1]) >= totals[0]);
        let level = pick(rng, &lr[w]) + 1;
        for d in pos[w].iter_mut().take(level) {
            *d = rng.random_range(0..order);
        }
        lr[w] = level_rates(&pos[w]);
        hr = hazard_rate(&pos[0], &pos[1]);
    }
}

/// Per-replica outcomes for two lineages started at the origin.
pub fn pair_outcomes(env: &Environment, cfg: &PairConfig) -> Result<Vec<PairOutcome>> {
    pair_outcomes_with(env, cfg, env.is_constant())
}

fn pair_outcomes_with(env: &Environment, cfg: &PairConfig, constant: bool) -> Result<Vec<PairOutcome>> {
    cfg.check()?;
    let rates = Rates::new(env, cfg.order, cfg.level_cut, cfg.kingman_d0)?;
    let rho0 = env.rho_at_digits(cfg.order, &[], 0);
    Ok((0..cfg.replicas as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream_rng(cfg.seed, PAIR_STREAM, i);
            if constant {
                pair_constant(&rates, rho0, cfg, &mut rng)
            } else {
                pair_quenched(env, &rates, cfg, &mut rng)
            }
        })
        .collect())
}

fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = if n > 1.0 { xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Aggregate replica outcomes into estimates per horizon.
pub fn summarize_pairs(cfg: &PairConfig, outcomes: &[PairOutcome], constant_path: bool) -> PairEstimate {
    let r = outcomes.len() as f64;
    let mut probability = Vec::new();
    let mut probability_se = Vec::new();
    for &h in &cfg.horizons {
        let p = outcomes.iter().filter(|o| o.tau <= h).count() as f64 / r;
        probability.push(p);
        probability_se.push((p * (1.0 - p) / r).sqrt());
    }
    let (mut hazard_mean, mut hazard_var, mut hazard_se) = (None, None, None);
    if cfg.track_hazard {
        let (mut m, mut v, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..cfg.horizons.len() {
            let (mean, var) = mean_var(outcomes.iter().map(move |o| o.hazard[i]));
            m.push(mean);
            v.push(var);
            s.push((var / r).sqrt());
        }
        (hazard_mean, hazard_var, hazard_se) = (Some(m), Some(v), Some(s));
    }
    PairEstimate {
        horizons: cfg.horizons.clone(),
        replicas: outcomes.len(),
        probability,
        probability_se,
        hazard_mean,
        hazard_var,
        hazard_se,
        constant_path,
    }
}

/// Estimate `P(two lineages from 0 coalesce by h)` for each horizon, plus hazard moments.
pub fn pair_coalescence_estimate(env: &Environment, cfg: &PairConfig) -> Result<PairEstimate> {
    let outcomes = pair_outcomes(env, cfg)?;
    Ok(summarize_pairs(cfg, &outcomes, env.is_constant()))
}
