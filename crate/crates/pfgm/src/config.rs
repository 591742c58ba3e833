//! Flat run configuration.
//!
//! Values resolve as defaults < config file < `PFGM_*` environment < flags.
//! Every layer is a flat TOML table keyed by the field names below; unknown
//! keys are rejected at every layer.

use std::collections::BTreeMap;
use std::path::Path;

use pfgm_core::dataset::stats as dataset_stats;
use pfgm_core::model::{Activation, InputEncoding, TrainConfig};
use pfgm_core::perturb::{rule_of_thumb_m, rule_of_thumb_schedule, SmallEpsZCap};
use pfgm_core::{Dataset, OdeConfig, PerturbConfig, PriorSpec, Solver};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "PFGM_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,

    /// Toy generator name or CSV path.
    pub dataset: String,
    /// Points drawn when `dataset` names a generator.
    pub count: usize,
    pub csv_header: bool,
    pub csv_charge_column: bool,
    pub center: bool,

    /// `None` applies the rule of thumb to the dataset's moments.
    pub max_exponent: Option<u32>,
    pub sigma: f64,
    pub tau: f64,
    pub gamma: f64,
    pub small_eps_z_threshold: Option<f64>,
    pub capped_max_exponent: Option<f64>,

    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub encoding: InputEncoding,
    pub train_steps: usize,
    pub batch_size: usize,
    pub large_batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,

    pub solver: Solver,
    pub euler_steps: usize,
    pub z_min: f64,
    /// `None` derives `z_max` from the rule-of-thumb schedule.
    pub z_max: Option<f64>,
    /// `None` derives the clip from the schedule; `0` disables clipping.
    pub norm_clip: Option<f64>,
    pub rk45_atol: f64,
    pub rk45_rtol: f64,
    pub z_sub_threshold: f64,
    pub v_z_floor: f64,
    pub max_steps: usize,

    pub exact: bool,
    pub checkpoint: Option<String>,
    pub sample_count: usize,
    /// Keep every k-th accepted step in trajectory dumps; 0 turns them off.
    pub record_every: usize,
    pub svg: bool,

    /// 0 selects central differences, otherwise the number of Hutchinson probes.
    pub hutchinson_probes: usize,

    /// When set, exact-field evaluation in `field-eval` uses the tree code.
    pub tree_theta: Option<f64>,
    pub tree_leaf: usize,
    pub queries: Option<String>,

    pub interp_a: Option<Vec<f64>>,
    pub interp_b: Option<Vec<f64>>,
    pub interp_steps: usize,

    pub suite: String,
    pub verify_count: usize,
    /// Theorem-1 sphere radius; defaults to `1e3 * max_norm`.
    pub verify_radius: Option<f64>,
    pub hit_count: usize,
    pub norm_z_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ode = OdeConfig::default();
        let train = TrainConfig::default();
        let p = PerturbConfig::default();
        Self {
            seed: 0,
            out: "out".into(),
            dataset: "disk".into(),
            count: 10_000,
            csv_header: false,
            csv_charge_column: false,
            center: false,
            max_exponent: None,
            sigma: p.sigma,
            tau: p.tau,
            gamma: p.gamma,
            small_eps_z_threshold: None,
            capped_max_exponent: None,
            hidden: train.hidden,
            activation: train.activation,
            encoding: train.encoding,
            train_steps: train.steps,
            batch_size: train.batch_size,
            large_batch_size: train.large_batch_size,
            lr: train.lr,
            ema_decay: train.ema_decay,
            solver: ode.solver,
            euler_steps: ode.euler_steps,
            z_min: ode.z_min,
            z_max: None,
            norm_clip: None,
            rk45_atol: ode.rk45_atol,
            rk45_rtol: ode.rk45_rtol,
            z_sub_threshold: ode.z_sub_threshold,
            v_z_floor: ode.v_z_floor,
            max_steps: ode.max_steps,
            exact: false,
            checkpoint: None,
            sample_count: 1000,
            record_every: 0,
            svg: true,
            hutchinson_probes: 0,
            tree_theta: None,
            tree_leaf: 16,
            queries: None,
            interp_a: None,
            interp_b: None,
            interp_steps: 8,
            suite: "all".into(),
            verify_count: 2000,
            verify_radius: None,
            hit_count: 2000,
            norm_z_bins: 20,
        }
    }
}

/// Hyperparameters derived from the dataset's moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Derivations {
    pub mean_sq_norm: f64,
    pub max_norm: f64,
    pub n: usize,
    pub rule_of_thumb_m: u32,
    pub max_exponent: u32,
    pub schedule_z_max: f64,
    pub schedule_norm_clip: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub norm_clip: Option<f64>,
}

impl RunConfig {
    /// Merge layers and deserialize. Flags are given as an already-typed table.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: Table,
    ) -> Result<Self, CliError> {
        let mut table = Value::try_from(RunConfig::default())
            .map_err(|e| CliError::Config(e.to_string()))?
            .as_table()
            .cloned()
            .unwrap_or_default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::NotFound(format!("config {}: {e}", path.display())))?;
            let parsed = parse_file(path, &text)?;
            merge(&mut table, parsed, "config file")?;
        }
        merge(&mut table, env_layer(env)?, "environment")?;
        merge(&mut table, flags, "flags")?;
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.count == 0 || self.sample_count == 0 {
            return bad("counts must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.small_eps_z_threshold.is_some() != self.capped_max_exponent.is_some() {
            return bad("small_eps_z_threshold and capped_max_exponent must be set together");
        }
        if let Some(t) = self.tree_theta {
            if !(t >= 0.0) {
                return bad("tree_theta must be nonnegative");
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            large_batch_size: self.large_batch_size,
            lr: self.lr,
            ema_decay: self.ema_decay,
            hidden: self.hidden.clone(),
            activation: self.activation,
            encoding: self.encoding,
        }
    }

    pub fn derive(&self, d: &Dataset) -> Result<Derivations, CliError> {
        let st = dataset_stats(d)?;
        let n = d.dim().n();
        let m = rule_of_thumb_m(st.mean_sq_norm, n, self.sigma, self.tau)?;
        let max_exponent = self.max_exponent.unwrap_or(m);
        let sched = rule_of_thumb_schedule(st.mean_sq_norm, n, self.sigma, self.tau, max_exponent)?;
        let norm_clip = match self.norm_clip {
            None => Some(sched.norm_clip),
            Some(c) if c <= 0.0 => None,
            Some(c) => Some(c),
        };
        Ok(Derivations {
            mean_sq_norm: st.mean_sq_norm,
            max_norm: st.max_norm,
            n,
            rule_of_thumb_m: m,
            max_exponent,
            schedule_z_max: sched.z_max,
            schedule_norm_clip: sched.norm_clip,
            z_min: self.z_min,
            z_max: self.z_max.unwrap_or(sched.z_max),
            norm_clip,
        })
    }

    pub fn perturb_config(&self, dv: &Derivations) -> PerturbConfig {
        PerturbConfig {
            max_exponent: dv.max_exponent,
            sigma: self.sigma,
            tau: self.tau,
            gamma: self.gamma,
            small_eps_z_cap: self
                .small_eps_z_threshold
                .zip(self.capped_max_exponent)
                .map(|(threshold, capped_max_exponent)| SmallEpsZCap {
                    threshold,
                    capped_max_exponent,
                }),
        }
    }

    pub fn ode_config(&self, dv: &Derivations) -> OdeConfig {
        OdeConfig {
            z_min: self.z_min,
            z_max: dv.z_max,
            solver: self.solver,
            euler_steps: self.euler_steps,
            rk45_atol: self.rk45_atol,
            rk45_rtol: self.rk45_rtol,
            z_sub_threshold: self.z_sub_threshold,
            gamma: self.gamma,
            v_z_floor: self.v_z_floor,
            max_steps: self.max_steps,
            record_every: self.record_every,
        }
    }

    pub fn prior(&self, dv: &Derivations) -> Result<PriorSpec, CliError> {
        let mut p = PriorSpec::new(dv.z_max, dv.n)?;
        if let Some(c) = dv.norm_clip {
            p = p.with_clip(c)?;
        }
        Ok(p)
    }
}

/// TOML, or a JSON manifest whose `config` object is reused.
fn parse_file(path: &Path, text: &str) -> Result<Table, CliError> {
    let bad = |e: String| CliError::Config(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let obj = match v {
            serde_json::Value::Object(mut m) if m.contains_key("config") => m.remove("config").unwrap_or_default(),
            other => other,
        };
        let serde_json::Value::Object(map) = obj else {
            return Err(bad("expected a JSON object".into()));
        };
        let mut t = Table::new();
        for (k, v) in map {
            if v.is_null() {
                continue;
            }
            t.insert(k, Value::try_from(v).map_err(|e| bad(e.to_string()))?);
        }
        Ok(t)
    } else {
        text.parse().map_err(|e: toml::de::Error| bad(e.to_string()))
    }
}

fn merge(base: &mut Table, layer: Table, origin: &str) -> Result<(), CliError> {
    for (k, v) in layer {
        if !base.contains_key(&k) && !OPTIONAL_KEYS.contains(&k.as_str()) {
            return Err(CliError::Config(format!("unknown key `{k}` in {origin}")));
        }
        base.insert(k, v);
    }
    Ok(())
}

/// Keys whose default is `None`, hence absent from the serialized defaults.
const OPTIONAL_KEYS: &[&str] = &[
    "max_exponent",
    "small_eps_z_threshold",
    "capped_max_exponent",
    "z_max",
    "norm_clip",
    "checkpoint",
    "tree_theta",
    "queries",
    "interp_a",
    "interp_b",
    "verify_radius",
];

/// `PFGM_Z_MAX=40` becomes `z_max = 40`. Values are parsed as TOML and fall
/// back to plain strings.
fn env_layer(env: impl IntoIterator<Item = (String, String)>) -> Result<Table, CliError> {
    let mut t = Table::new();
    for (k, v) in env {
        let Some(key) = k.strip_prefix(ENV_PREFIX) else { continue };
        t.insert(key.to_ascii_lowercase(), parse_scalar(&v));
    }
    Ok(t)
}

/// Parse a flag or environment value as a TOML value, defaulting to a string.
pub fn parse_scalar(v: &str) -> Value {
    format!("x = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| Value::String(v.to_string()))
}

/// Resolved config as a key-sorted map, for embedding in manifests.
pub fn to_map(cfg: &RunConfig) -> BTreeMap<String, serde_json::Value> {
    match serde_json::to_value(cfg) {
        Ok(serde_json::Value::Object(m)) => m.into_iter().collect(),
        _ => BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::resolve(None, Vec::new(), Table::new()).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn precedence_flags_env_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\nz_max = 10.0\nsolver = \"euler\"\n").unwrap();
        let env = vec![("PFGM_SEED".to_string(), "4".to_string()), ("HOME".into(), "/".into())];
        let cfg = RunConfig::resolve(Some(&path), env.clone(), Table::new()).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.z_max, Some(10.0));
        assert_eq!(cfg.solver, Solver::Euler);
        let mut flags = Table::new();
        flags.insert("seed".into(), Value::Integer(5));
        let cfg = RunConfig::resolve(Some(&path), env, flags).unwrap();
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let env = vec![("PFGM_NOPE".to_string(), "1".to_string())];
        assert!(matches!(RunConfig::resolve(None, env, Table::new()), Err(CliError::Config(_))));
        let env = vec![("PFGM_SEED".to_string(), "\"abc\"".to_string())];
        assert!(matches!(RunConfig::resolve(None, env, Table::new()), Err(CliError::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "seed = = 1").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&path), Vec::new(), Table::new()), Err(CliError::Config(_))));
    }

    #[test]
    fn manifest_json_is_a_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.z_max = Some(40.0);
        let path = dir.path().join("manifest.json");
        let doc = serde_json::json!({ "command": "sample", "config": to_map(&cfg) });
        std::fs::write(&path, doc.to_string()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), Vec::new(), Table::new()).unwrap(), cfg);
    }

    #[test]
    fn scalar_parsing() {
        assert_eq!(parse_scalar("1.5"), Value::Float(1.5));
        assert_eq!(parse_scalar("true"), Value::Boolean(true));
        assert_eq!(parse_scalar("disk"), Value::String("disk".into()));
        assert_eq!(parse_scalar("[1.0, 2.0]"), Value::Array(vec![Value::Float(1.0), Value::Float(2.0)]));
    }
}
