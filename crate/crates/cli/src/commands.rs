//! The subcommands: each turns a validated configuration into an artifact.

use anyhow::Context;
use hiercan_core::chain::{cluster_class, delta_limit, variance_profile, wlln_check};
use hiercan_core::coalescent::{default_level_cut, pair_coalescence_estimate, simulate, PairConfig, SimConfig};
use hiercan_core::dichotomy::{
    classify_finite_n, classify_limit, corroborate, regularity_check, CorroborationRule, DichotomyVerdict,
};
use hiercan_core::environment::{Environment, ValidationReport};
use hiercan_core::forward::{blockscale_check, mkv_particle, simulate_forward, BlockscaleConfig, ForwardConfig, MkvConfig};
use hiercan_core::hiergroup::HierAddress;
use hiercan_core::renorm::{classify, recurse, stability_substitution, verify_scaling, ScalingClass, VolatilityTrace};
use hiercan_core::rng::mix_pair;
use hiercan_core::walkcalc::{mean_hazard, truncated_mean_hazard};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig};
use crate::output::{Artifact, Cell, Table};
use crate::Failure;

const TRAJECTORY_TAG: u64 = 0x7472_616a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    /// Scaling, dichotomy and cluster classes.
    Classify,
    /// Volatility recursion table.
    Recursion,
    /// Coalescent trajectory and pair estimates.
    Coalescent,
    /// Analytic annealed mean hazard against its Monte Carlo estimate in one environment.
    Hazard,
    /// Individual-based forward simulation.
    Forward,
    /// McKean–Vlasov particle system.
    Mkv,
    /// Δ(j) tables and the WLLN check.
    Delta,
    /// Aggregate of all verdicts for one parameter point.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Classify => "classify",
            Command::Recursion => "recursion",
            Command::Coalescent => "coalescent",
            Command::Hazard => "hazard",
            Command::Forward => "forward",
            Command::Mkv => "mkv",
            Command::Delta => "delta",
            Command::Report => "report",
        }
    }

    fn needs_model(self) -> bool {
        matches!(self, Command::Coalescent | Command::Hazard | Command::Forward)
    }
}

/// Validate `cfg` and run `command` on it.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<Artifact, Failure> {
    let report = cfg.validate()?;
    if command.needs_model() && !report.model_ok() {
        let failed = [&report.migration_growth, &report.resampling_growth]
            .into_iter()
            .find(|c| !c.holds)
            .map_or_else(|| "model assumptions fail".to_string(), |c| c.detail.clone());
        return Err(ConfigError::new("params", failed).into());
    }
    let (result, table) = match command {
        Command::Classify => classify_cmd(cfg, &report),
        Command::Recursion => recursion_cmd(cfg),
        Command::Coalescent => coalescent_cmd(cfg),
        Command::Hazard => hazard_cmd(cfg),
        Command::Forward => forward_cmd(cfg),
        Command::Mkv => mkv_cmd(cfg),
        Command::Delta => delta_cmd(cfg),
        Command::Report => report_cmd(cfg, &report),
    }
    .map_err(Failure::Runtime)?;
    Ok(Artifact { command: command.name().to_string(), result, table })
}

type Output = anyhow::Result<(Value, Option<Table>)>;

/// A library result as JSON, with failures recorded instead of raised.
fn outcome<T: Serialize>(r: &hiercan_core::Result<T>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).unwrap_or(Value::Null),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn environment(cfg: &RunConfig) -> anyhow::Result<Environment> {
    Ok(Environment::new(cfg.env_spec(), cfg.environment.seed)?)
}

fn level_cut(cfg: &RunConfig) -> anyhow::Result<usize> {
    match cfg.run.level_cut {
        Some(k) => Ok(k),
        None => default_level_cut(&cfg.params, cfg.model.order, cfg.run.tolerance)
            .context("cannot derive a level cut; set run.level_cut"),
    }
}

fn kingman_d0(cfg: &RunConfig) -> f64 {
    if cfg.run.kingman {
        cfg.model.d0
    } else {
        0.0
    }
}

fn pair_config(cfg: &RunConfig, level_cut: usize) -> PairConfig {
    PairConfig {
        order: cfg.model.order,
        level_cut,
        horizons: cfg.run.horizons.clone(),
        replicas: cfg.run.replicas,
        seed: cfg.run.seed,
        kingman_d0: kingman_d0(cfg),
        track_hazard: true,
    }
}

fn trace(cfg: &RunConfig) -> anyhow::Result<VolatilityTrace> {
    Ok(recurse(&cfg.params, &cfg.environment.law, cfg.model.d0, cfg.run.kmax)?)
}

fn scaling_check(cfg: &RunConfig, trace: &VolatilityTrace, class: &hiercan_core::Result<ScalingClass>) -> Value {
    let kmax = trace.kmax();
    let window = cfg.run.window.unwrap_or((kmax / 2, kmax));
    match class {
        Ok(c) if c.prediction.is_some() => outcome(&verify_scaling(trace, c, window)),
        Ok(_) => json!({ "error": "no prediction for this case" }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn dichotomy(cfg: &RunConfig) -> (hiercan_core::Result<DichotomyVerdict>, Value) {
    let finite = classify_finite_n(&cfg.params, cfg.model.order);
    let value = json!({
        "finite_n": outcome(&finite),
        "limit": outcome(&classify_limit(&cfg.params)),
        "regularity": outcome(&regularity_check(&cfg.params)),
    });
    (finite, value)
}

// ── Commands ─────────────────────────────────────────────────────────────────

fn classify_cmd(cfg: &RunConfig, report: &ValidationReport) -> Output {
    let scaling = classify(&cfg.params, &cfg.environment.law);
    let cluster = scaling.clone().and_then(|s| cluster_class(&s));
    let (finite, dich) = dichotomy(cfg);
    let summary = json!({
        "regime": finite.as_ref().ok().map(|v| v.regime),
        "case": scaling.as_ref().ok().map(|s| s.case),
        "subcase": scaling.as_ref().ok().and_then(|s| s.subcase),
        "cluster_regime": cluster.as_ref().ok().map(|c| c.regime),
    });
    let result = json!({
        "summary": summary,
        "validation": report,
        "scaling": outcome(&scaling),
        "dichotomy": dich,
        "cluster": outcome(&cluster),
    });
    Ok((result, None))
}

fn recursion_cmd(cfg: &RunConfig) -> Output {
    let trace = trace(cfg)?;
    let class = classify(&cfg.params, &cfg.environment.law);
    let mut table = Table::new(["k", "c_k", "mu_k", "d_k", "d_zero_k", "d_one_k", "d_over_c"]);
    for k in 0..=trace.kmax() {
        table.push(vec![
            k.into(),
            trace.c[k].into(),
            trace.mu[k].into(),
            trace.d[k].into(),
            trace.d_zero[k].into(),
            trace.d_one[k].into(),
            trace.ratio_c(k).into(),
        ]);
    }
    let result = json!({
        "scaling": outcome(&class),
        "scaling_check": scaling_check(cfg, &trace, &class),
        "trace": trace,
    });
    Ok((result, Some(table)))
}

/// Site whose base-`N` digits spell `i`.
fn spread_site(order: u32, mut i: usize) -> hiercan_core::Result<HierAddress> {
    let mut digits = Vec::new();
    while i > 0 {
        digits.push((i % order as usize) as u32);
        i /= order as usize;
    }
    HierAddress::new(order, digits)
}

fn coalescent_cmd(cfg: &RunConfig) -> Output {
    let env = environment(cfg)?;
    let cut = level_cut(cfg)?;
    let order = cfg.model.order;
    let horizon = *cfg.run.horizons.last().expect("validated non-empty");
    let trajectory = if cfg.run.lineages > 0 {
        let start = (0..cfg.run.lineages).map(|i| spread_site(order, i)).collect::<hiercan_core::Result<Vec<_>>>()?;
        let sim = SimConfig { order, level_cut: cut, horizon, kingman_d0: kingman_d0(cfg), record_events: true };
        Some(simulate(&env, &start, &sim, mix_pair(cfg.run.seed, TRAJECTORY_TAG))?)
    } else {
        None
    };
    let est = pair_coalescence_estimate(&env, &pair_config(cfg, cut))?;
    let mut table = Table::new(["horizon", "probability", "probability_se", "hazard_mean", "hazard_se"]);
    let (hm, hs) = (est.hazard_mean.clone().unwrap_or_default(), est.hazard_se.clone().unwrap_or_default());
    for (i, &h) in est.horizons.iter().enumerate() {
        table.push(vec![h.into(), est.probability[i].into(), est.probability_se[i].into(), hm[i].into(), hs[i].into()]);
    }
    let result = json!({ "level_cut": cut, "trajectory": trajectory, "pair": est });
    Ok((result, Some(table)))
}

fn hazard_cmd(cfg: &RunConfig) -> Output {
    let env = environment(cfg)?;
    let cut = level_cut(cfg)?;
    let order = cfg.model.order;
    let pair_rate = cfg.environment.chi.coalescence_rate(2, 2)?;
    let est = pair_coalescence_estimate(&env, &pair_config(cfg, cut))?;
    let (hm, hs) = (est.hazard_mean.clone().unwrap_or_default(), est.hazard_se.clone().unwrap_or_default());
    let mut table = Table::new(["horizon", "analytic", "mc_mean", "mc_se", "z"]);
    let mut rows = Vec::new();
    for (i, &h) in est.horizons.iter().enumerate() {
        let exact = truncated_mean_hazard(&cfg.params, order, cut, h, pair_rate, kingman_d0(cfg))?;
        let z = if hs[i] > 0.0 { (hm[i] - exact) / hs[i] } else { 0.0 };
        table.push(vec![h.into(), exact.into(), hm[i].into(), hs[i].into(), z.into()]);
        rows.push(json!({ "horizon": h, "analytic": exact, "mc_mean": hm[i], "mc_se": hs[i], "z": z }));
    }
    let result = json!({
        "level_cut": cut,
        "replicas": est.replicas,
        "environment_constant": env.is_constant(),
        "rows": rows,
        "series": outcome(&mean_hazard(&cfg.params, order, cut)),
    });
    Ok((result, Some(table)))
}

fn forward_cmd(cfg: &RunConfig) -> Output {
    let m = &cfg.model;
    let f = &cfg.run.forward;
    let fc = ForwardConfig {
        order: m.order,
        levels: m.levels,
        m_ind: m.m_ind,
        theta: m.theta.clone(),
        d0: m.d0,
        env: cfg.env_spec(),
        env_seed: cfg.environment.seed,
        seed: cfg.run.seed,
        horizon: f.horizon,
        record_interval: f.record_interval,
        source_immigration: f.source_immigration,
    };
    let traj = simulate_forward(&fc)?;
    let types = m.theta.len();
    let mut columns = vec!["time".to_string()];
    columns.extend((0..types).map(|a| format!("freq_{a}")));
    columns.push("mean_homozygosity".into());
    let mut table = Table::new(columns);
    for s in &traj.snapshots {
        let colonies = s.counts.len() / types;
        let total = (colonies as f64) * f64::from(s.m_ind);
        let mut row = vec![Cell::from(s.time)];
        row.extend(s.totals().iter().map(|&n| Cell::from(n as f64 / total)));
        let homo = (0..colonies)
            .map(|x| s.colony(x).iter().map(|&n| (f64::from(n) / f64::from(s.m_ind)).powi(2)).sum::<f64>())
            .sum::<f64>()
            / colonies as f64;
        row.push(homo.into());
        table.push(row);
    }
    let b = &cfg.run.blockscale;
    let blockscale = if b.orders.is_empty() {
        Value::Null
    } else {
        let bc = BlockscaleConfig {
            orders: b.orders.clone(),
            m_ind: m.m_ind,
            theta: m.theta.clone(),
            d0: m.d0,
            env: cfg.env_spec(),
            env_seed: cfg.environment.seed,
            seed: cfg.run.seed,
            macro_horizon: b.macro_horizon,
            macro_burn_in: b.macro_burn_in,
            macro_interval: b.macro_interval,
            batches: b.batches,
        };
        serde_json::to_value(blockscale_check(&bc)?)?
    };
    let last = traj.snapshots.last().map(|s| s.totals());
    let result = json!({
        "events": traj.events,
        "snapshots": traj.snapshots.len(),
        "final_totals": last,
        "blockscale": blockscale,
    });
    Ok((result, Some(table)))
}

fn mkv_cmd(cfg: &RunConfig) -> Output {
    let k = &cfg.run.mkv;
    let mc = MkvConfig {
        c: k.c,
        d: k.d,
        lambda: k.lambda.clone(),
        theta: cfg.model.theta.clone(),
        particles: k.particles,
        horizon: k.horizon,
        burn_in: k.burn_in,
        sample_interval: k.sample_interval,
        batches: k.batches,
        seed: cfg.run.seed,
        record: k.record,
    };
    let r = mkv_particle(&mc)?;
    let mut table =
        Table::new(["type", "mean", "mean_se", "variance", "variance_se", "predicted_variance", "finite_size_variance"]);
    for a in 0..r.mean.len() {
        table.push(vec![
            a.into(),
            r.mean[a].into(),
            r.mean_se[a].into(),
            r.variance[a].into(),
            r.variance_se[a].into(),
            r.predicted_variance[a].into(),
            r.finite_size_variance[a].into(),
        ]);
    }
    Ok((serde_json::to_value(&r)?, Some(table)))
}

fn delta_cmd(cfg: &RunConfig) -> Output {
    let class = classify(&cfg.params, &cfg.environment.law)?;
    let mut table = Table::new([
        "j",
        "alpha1",
        "alpha2",
        "j1",
        "j2",
        "delta",
        "delta_recursion",
        "limit",
        "gap",
        "gap_recursion",
    ]);
    let mut reports = Vec::new();
    for &j in &cfg.run.js {
        for &(a1, a2) in &cfg.run.alphas {
            let r = delta_limit(&cfg.params, &cfg.environment.law, cfg.model.d0, &class, a1, a2, j)?;
            table.push(vec![
                j.into(),
                a1.into(),
                a2.into(),
                r.window.0.into(),
                r.window.1.into(),
                r.delta.into(),
                r.delta_recursion.into(),
                r.limit.into(),
                r.gap.into(),
                r.gap_recursion.into(),
            ]);
            reports.push(r);
        }
    }
    let w = &cfg.run.wlln;
    let wlln = if w.replicas > 0 {
        serde_json::to_value(wlln_check(&cfg.env_spec(), cfg.model.order, cfg.model.d0, w.j1, &w.j2s, w.replicas, cfg.run.seed)?)?
    } else {
        Value::Null
    };
    let result = json!({ "scaling": class, "cluster": outcome(&cluster_class(&class)), "delta": reports, "wlln": wlln });
    Ok((result, Some(table)))
}

fn report_cmd(cfg: &RunConfig, report: &ValidationReport) -> Output {
    let trace = trace(cfg)?;
    let scaling = classify(&cfg.params, &cfg.environment.law);
    let cluster = scaling.clone().and_then(|s| cluster_class(&s));
    let (finite, mut dich) = dichotomy(cfg);
    let substitution = stability_substitution(&cfg.params, &cfg.environment.law, cfg.model.d0, cfg.run.kmax)
        .map(|s| json!({ "max_abs_diff": s.max_abs_diff, "max_rel_diff": s.max_rel_diff }));
    let env = environment(cfg)?;
    let eta = HierAddress::new(cfg.model.order, cfg.model.eta.clone())?;
    let profiles: Vec<Value> = cfg
        .run
        .js
        .iter()
        .map(|&j| {
            outcome(&variance_profile(&env, &trace, j, &eta).map(|p| {
                json!({ "j": j, "product_quenched": p.product_quenched, "product_annealed": p.product_annealed })
            }))
        })
        .collect();
    let hazard = if report.model_ok() {
        let cut = level_cut(cfg)?;
        let series = mean_hazard(&cfg.params, cfg.model.order, cut);
        if cfg.run.corroborate {
            let verdict = finite.clone()?;
            let checked = corroborate(&verdict, &env, &pair_config(cfg, cut), CorroborationRule::default())?;
            dich["corroboration"] = serde_json::to_value(&checked.corroboration)?;
        }
        json!({ "level_cut": cut, "series": outcome(&series) })
    } else {
        Value::Null
    };
    let result = json!({
        "summary": {
            "regime": finite.as_ref().ok().map(|v| v.regime),
            "case": scaling.as_ref().ok().map(|s| s.case),
            "cluster_regime": cluster.as_ref().ok().map(|c| c.regime),
        },
        "validation": report,
        "scaling": outcome(&scaling),
        "scaling_check": scaling_check(cfg, &trace, &scaling),
        "dichotomy": dich,
        "cluster": outcome(&cluster),
        "substitution": outcome(&substitution),
        "variance_profile": profiles,
        "hazard": hazard,
    });
    Ok((result, None))
}
