//! Run configuration: parsing, defaults and validation.

use std::path::Path;

use hiercan_core::environment::{validate, AtomMeasure, EnvLaw, EnvSpec, ParamFamily, ValidationReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem tied to the key that caused it.
#[derive(Debug, thiserror::Error)]
#[error("{key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: key.into(), message: message.into() }
    }
}

fn require(ok: bool, key: &str, message: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(key, message()))
    }
}

// ── Sections ─────────────────────────────────────────────────────────────────

/// Complete description of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: ParamFamily,
    #[serde(default)]
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub run: RunSection,
    /// Where results go; not part of the resolved configuration or its hash.
    #[serde(default, skip_serializing)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    #[serde(default)]
    pub law: EnvLaw,
    /// Normalized shape `χ` as `[r, w]` pairs.
    #[serde(default)]
    pub chi: AtomMeasure,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Group order `N`.
    pub order: u32,
    /// Number of hierarchical levels `K` in forward simulations.
    pub levels: usize,
    /// Level-0 Moran rate `d₀`, also the starting value of the volatility recursion.
    pub d0: f64,
    /// Initial type distribution `θ`; its length is the number of types.
    pub theta: Vec<f64>,
    /// Individuals per colony.
    pub m_ind: u32,
    /// Digits of the site η used by the variance profile.
    pub eta: Vec<u32>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { order: 3, levels: 2, d0: 1.0, theta: vec![0.5, 0.5], m_ind: 10, eta: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Master seed for all Monte Carlo work.
    pub seed: u64,
    /// Last index of the volatility recursion.
    pub kmax: usize,
    /// Inclusive window `[lo, hi]` over which scaling predictions are checked.
    pub window: Option<(usize, usize)>,
    /// Level cut of the coalescent; derived from `tolerance` when absent.
    pub level_cut: Option<usize>,
    pub tolerance: f64,
    /// Increasing observation times.
    pub horizons: Vec<f64>,
    pub replicas: usize,
    /// Number of lineages started at the origin for a single coalescent trajectory.
    pub lineages: usize,
    /// Add Kingman merging at rate `d₀` per pair at a shared site.
    pub kingman: bool,
    /// Run the pair-coalescence corroboration in `report`.
    pub corroborate: bool,
    /// Levels `j` for Δ(j) and the variance profile.
    pub js: Vec<usize>,
    /// `(α1, α2)` pairs for Δ(j).
    pub alphas: Vec<(f64, f64)>,
    pub wlln: WllnKnobs,
    pub forward: ForwardKnobs,
    pub mkv: MkvKnobs,
    pub blockscale: BlockscaleKnobs,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            kmax: 200,
            window: None,
            level_cut: None,
            tolerance: 1e-6,
            horizons: vec![1.0, 10.0, 100.0],
            replicas: 1000,
            lineages: 4,
            kingman: false,
            corroborate: false,
            js: vec![100],
            alphas: vec![(1.0, 0.0)],
            wlln: WllnKnobs::default(),
            forward: ForwardKnobs::default(),
            mkv: MkvKnobs::default(),
            blockscale: BlockscaleKnobs::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WllnKnobs {
    /// Environment replicas; zero disables the check.
    pub replicas: usize,
    pub j1: usize,
    pub j2s: Vec<usize>,
}

impl Default for WllnKnobs {
    fn default() -> Self {
        Self { replicas: 0, j1: 0, j2s: vec![100, 1000] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardKnobs {
    pub horizon: f64,
    pub record_interval: f64,
    pub source_immigration: f64,
}

impl Default for ForwardKnobs {
    fn default() -> Self {
        Self { horizon: 10.0, record_interval: 1.0, source_immigration: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MkvKnobs {
    pub c: f64,
    pub d: f64,
    /// Resampling measure `Λ` as `[r, w]` pairs with absolute weights.
    pub lambda: AtomMeasure,
    pub particles: u32,
    pub horizon: f64,
    pub burn_in: f64,
    pub sample_interval: f64,
    pub batches: usize,
    pub record: bool,
}

impl Default for MkvKnobs {
    fn default() -> Self {
        Self {
            c: 1.0,
            d: 0.25,
            lambda: AtomMeasure::single(0.5, 1.0),
            particles: 2000,
            horizon: 200.0,
            burn_in: 10.0,
            sample_interval: 0.05,
            batches: 50,
            record: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockscaleKnobs {
    /// Group orders to sweep; empty disables the sweep.
    pub orders: Vec<u32>,
    pub macro_horizon: f64,
    pub macro_burn_in: f64,
    pub macro_interval: f64,
    pub batches: usize,
}

impl Default for BlockscaleKnobs {
    fn default() -> Self {
        Self { orders: Vec::new(), macro_horizon: 20.0, macro_burn_in: 2.0, macro_interval: 0.02, batches: 20 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Directory for artifacts; standard output when absent.
    pub dir: Option<String>,
    pub format: Format,
}

// ── Parsing ──────────────────────────────────────────────────────────────────

fn path_error<E: std::fmt::Display>(err: serde_path_to_error::Error<E>) -> ConfigError {
    let key = err.path().to_string();
    let key = if key == "." { "<root>".to_string() } else { key };
    ConfigError::new(key, err.into_inner().to_string())
}

impl RunConfig {
    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            let mut de = serde_json::Deserializer::from_str(text);
            let cfg = serde_path_to_error::deserialize(&mut de).map_err(path_error)?;
            de.end().map_err(|e| ConfigError::new("<root>", e.to_string()))?;
            Ok(cfg)
        } else {
            let de = toml::Deserializer::new(text);
            serde_path_to_error::deserialize(de).map_err(path_error)
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec {
            law: self.environment.law.clone(),
            chi: self.environment.chi.clone(),
            params: self.params.clone(),
        }
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("configuration serializes");
        format!("{:x}", Sha256::digest(bytes))
    }

    /// Check every section and return the model-assumption report.
    pub fn validate(&self) -> Result<ValidationReport, ConfigError> {
        self.params.check().map_err(|e| ConfigError::new("params", e.to_string()))?;
        self.environment.law.check().map_err(|e| ConfigError::new("environment.law", e.to_string()))?;
        self.environment.chi.check_shape().map_err(|e| ConfigError::new("environment.chi", e.to_string()))?;

        let m = &self.model;
        require(m.order >= 2, "model.order", || format!("must be at least 2, got {}", m.order))?;
        require(m.d0.is_finite() && m.d0 >= 0.0, "model.d0", || format!("must be finite and >= 0, got {}", m.d0))?;
        require(m.theta.len() >= 2, "model.theta", || "needs at least two types".into())?;
        let total: f64 = m.theta.iter().sum();
        require(
            m.theta.iter().all(|t| t.is_finite() && *t >= 0.0) && (total - 1.0).abs() < 1e-9,
            "model.theta",
            || format!("must be a probability vector, sums to {total}"),
        )?;
        require(m.m_ind >= 2, "model.m_ind", || format!("must be at least 2, got {}", m.m_ind))?;
        require(m.eta.iter().all(|&d| d < m.order), "model.eta", || format!("digits must be below N = {}", m.order))?;

        let r = &self.run;
        require(r.kmax >= 1, "run.kmax", || "must be at least 1".into())?;
        if let Some((lo, hi)) = r.window {
            require(lo <= hi && hi <= r.kmax, "run.window", || format!("need lo <= hi <= kmax, got ({lo}, {hi})"))?;
        }
        require(r.tolerance > 0.0 && r.tolerance < 1.0, "run.tolerance", || format!("must lie in (0, 1), got {}", r.tolerance))?;
        require(!r.horizons.is_empty(), "run.horizons", || "must not be empty".into())?;
        require(
            r.horizons.iter().all(|h| h.is_finite() && *h >= 0.0) && r.horizons.windows(2).all(|w| w[0] <= w[1]),
            "run.horizons",
            || "must be finite, non-negative and non-decreasing".into(),
        )?;
        require(r.replicas >= 2, "run.replicas", || format!("must be at least 2, got {}", r.replicas))?;
        require(
            r.alphas.iter().all(|&(a1, a2)| a2 >= 0.0 && a1 >= a2 && a1.is_finite()),
            "run.alphas",
            || "each pair needs 0 <= alpha2 <= alpha1".into(),
        )?;
        if r.wlln.replicas > 0 {
            require(r.wlln.replicas >= 2, "run.wlln.replicas", || "must be 0 or at least 2".into())?;
            require(
                !r.wlln.j2s.is_empty() && r.wlln.j2s.iter().all(|&j| j > r.wlln.j1),
                "run.wlln.j2s",
                || format!("every j2 must exceed j1 = {}", r.wlln.j1),
            )?;
        }
        let f = &r.forward;
        require(f.horizon.is_finite() && f.horizon >= 0.0, "run.forward.horizon", || "must be finite and >= 0".into())?;
        require(f.record_interval > 0.0, "run.forward.record_interval", || "must be positive".into())?;
        require(f.source_immigration >= 0.0, "run.forward.source_immigration", || "must be >= 0".into())?;
        let k = &r.mkv;
        require(k.c >= 0.0 && k.d >= 0.0, "run.mkv", || "rates c and d must be >= 0".into())?;
        k.lambda.check().map_err(|e| ConfigError::new("run.mkv.lambda", e.to_string()))?;
        require(k.particles >= 2, "run.mkv.particles", || "must be at least 2".into())?;
        require(k.sample_interval > 0.0, "run.mkv.sample_interval", || "must be positive".into())?;
        require(k.burn_in >= 0.0 && k.burn_in < k.horizon, "run.mkv.burn_in", || "must lie in [0, horizon)".into())?;
        require(k.batches >= 2, "run.mkv.batches", || "must be at least 2".into())?;
        let b = &r.blockscale;
        require(b.orders.iter().all(|&n| n >= 2), "run.blockscale.orders", || "orders must be at least 2".into())?;
        require(b.macro_interval > 0.0, "run.blockscale.macro_interval", || "must be positive".into())?;
        require(b.batches >= 2, "run.blockscale.batches", || "must be at least 2".into())?;

        let report = validate(&self.env_spec(), m.order);
        require(report.mean_one.holds, "environment.law", || report.mean_one.detail.clone())?;
        Ok(report)
    }
}
