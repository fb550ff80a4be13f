//! Config-driven experiment runner.
//!
//! A config is a flat JSON object. `kind` selects the experiment; every
//! other key is optional and falls back to a per-kind default. Keys that do
//! not belong to the selected kind are rejected. Each run produces a set of
//! named text files (CSV or plain text) plus `metadata.json`, all of which
//! depend only on the config and the master seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::BigRational;
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::duality::check_duality;
use crate::dynamics::{fmt_f64, product_measure, run, QVoterParams};
use crate::equilibrium::{coalescence_fates, sample_nu_u, sample_nu_u_dual};
use crate::greens::{expected_hitting_time, simulate_hitting, RateFunction};
use crate::lattice::{nearest_neighbor_offsets, unit_offsets, write_slice, Configuration, Offset, SnapshotHeader, TorusLattice};
use crate::ode::compare_particle_ode;
use crate::reaction::{empirical_drift, perturbation_rates, phi_from_distribution, phi_with_error, Regime};
use crate::rng::{replica_rng, replica_seed};
use crate::statistics::{box_sums, extinction_ensemble, least_squares, moment_ratio, variance_exponent, Outcome};

/// Code version recorded in every metadata file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(ConfigErrors),
    #[error("{0}")]
    Runtime(String),
    #[error("cannot write output: {0}")]
    Io(String),
}

impl ExperimentError {
    fn runtime(e: impl fmt::Display) -> Self {
        ExperimentError::Runtime(e.to_string())
    }
}

/// Every problem found in a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("\n"))
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Persistence,
    Extinction,
    DualityCheck,
    ReactionTerm,
    OdeCompare,
    BoxClt,
    Greens,
    Snapshot,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Persistence,
        ExperimentKind::Extinction,
        ExperimentKind::DualityCheck,
        ExperimentKind::ReactionTerm,
        ExperimentKind::OdeCompare,
        ExperimentKind::BoxClt,
        ExperimentKind::Greens,
        ExperimentKind::Snapshot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Persistence => "persistence",
            ExperimentKind::Extinction => "extinction",
            ExperimentKind::DualityCheck => "duality-check",
            ExperimentKind::ReactionTerm => "reaction-term",
            ExperimentKind::OdeCompare => "ode-compare",
            ExperimentKind::BoxClt => "box-clt",
            ExperimentKind::Greens => "greens",
            ExperimentKind::Snapshot => "snapshot",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown experiment kind {s:?}"))
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn as_display<T: fmt::Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Coalescing walks from every site, then independent cluster labels.
    Dual,
    /// The voter model run forward from product measure.
    Forward,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersistenceSettings {
    #[serde(rename = "L")]
    pub sides: Vec<usize>,
    pub offsets: Vec<Offset>,
    pub q: f64,
    pub u0: f64,
    pub replicates: usize,
    pub horizon: f64,
    pub transient: f64,
    pub band: f64,
    pub sample_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtinctionSettings {
    #[serde(rename = "L")]
    pub sides: Vec<usize>,
    pub offsets: Vec<Offset>,
    pub q: f64,
    pub u0: f64,
    pub replicates: usize,
    /// Censoring time per site: `t_max = t_max_per_site * n`.
    pub t_max_per_site: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualitySettings {
    #[serde(rename = "L")]
    pub side: usize,
    pub offsets: Vec<Offset>,
    pub t: f64,
    pub replicates: usize,
    #[serde(rename = "A")]
    pub a: Vec<[usize; 3]>,
    #[serde(rename = "B")]
    pub b: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReactionSettings {
    pub k: usize,
    pub offsets: Vec<Offset>,
    #[serde(serialize_with = "as_display")]
    pub regime: Regime,
    pub t_trunc: f64,
    pub replicates: u64,
    /// Densities at which the flip-rate drift is compared with `phi`; empty
    /// skips the comparison.
    pub drift_u: Vec<f64>,
    #[serde(rename = "drift_L")]
    pub drift_l: usize,
    pub burn: f64,
    pub configs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeCompareSettings {
    #[serde(rename = "L")]
    pub sides: Vec<usize>,
    pub offsets: Vec<Offset>,
    #[serde(serialize_with = "as_display")]
    pub regime: Regime,
    /// Fixed perturbation strength; when absent `epsilon = n^(-epsilon_exponent)`.
    pub epsilon: Option<f64>,
    pub epsilon_exponent: f64,
    pub u0: f64,
    pub t0: f64,
    pub dt: f64,
    pub replicates: usize,
    pub t_trunc: f64,
    pub fate_replicates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxCltSettings {
    #[serde(rename = "L")]
    pub side: usize,
    pub offsets: Vec<Offset>,
    pub r: Vec<usize>,
    pub lambda: f64,
    pub burn: f64,
    pub replicates: usize,
    pub sampler: Sampler,
    /// Also fit product-measure configurations.
    pub control: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreensSettings {
    pub x: u64,
    pub z: u64,
    #[serde(serialize_with = "as_display")]
    pub rate: RateFunction,
    pub replicates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotSettings {
    #[serde(rename = "L")]
    pub side: usize,
    pub offsets: Vec<Offset>,
    pub q: f64,
    pub u0: f64,
    pub t: f64,
    pub axis: usize,
    pub level: usize,
    pub sample_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    Persistence(PersistenceSettings),
    Extinction(ExtinctionSettings),
    DualityCheck(DualitySettings),
    ReactionTerm(ReactionSettings),
    OdeCompare(OdeCompareSettings),
    BoxClt(BoxCltSettings),
    Greens(GreensSettings),
    Snapshot(SnapshotSettings),
}

impl Experiment {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            Experiment::Persistence(_) => ExperimentKind::Persistence,
            Experiment::Extinction(_) => ExperimentKind::Extinction,
            Experiment::DualityCheck(_) => ExperimentKind::DualityCheck,
            Experiment::ReactionTerm(_) => ExperimentKind::ReactionTerm,
            Experiment::OdeCompare(_) => ExperimentKind::OdeCompare,
            Experiment::BoxClt(_) => ExperimentKind::BoxClt,
            Experiment::Greens(_) => ExperimentKind::Greens,
            Experiment::Snapshot(_) => ExperimentKind::Snapshot,
        }
    }
}

/// A validated config with all defaults filled in.
///
/// `threads` and `out` only decide where and how fast the run happens, so
/// they are left out of the serialized echo; everything else is written to
/// `metadata.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip)]
    pub threads: usize,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(flatten)]
    pub experiment: Experiment,
}

impl ExperimentConfig {
    pub fn kind(&self) -> ExperimentKind {
        self.experiment.kind()
    }

    /// The config echo written to metadata.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Reads keys from the raw object, remembering which were consumed and
/// collecting every error instead of stopping at the first.
struct Reader {
    map: Map<String, Value>,
    used: BTreeSet<String>,
    errors: Vec<String>,
}

impl Reader {
    /// A `null` value counts as absent.
    fn get(&mut self, key: &str) -> Option<Value> {
        self.used.insert(key.to_string());
        self.map.get(key).filter(|v| !v.is_null()).cloned()
    }

    fn err(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn float(&mut self, key: &str, default: f64) -> f64 {
        self.opt_float(key).unwrap_or(default)
    }

    fn opt_float(&mut self, key: &str) -> Option<f64> {
        match self.get(key)? {
            Value::Number(n) => n.as_f64(),
            v => {
                self.err(format!("{key}: expected a number, got {v}"));
                None
            }
        }
    }

    fn opt_uint(&mut self, key: &str) -> Option<u64> {
        let v = self.get(key)?;
        let parsed = as_uint(&v);
        if parsed.is_none() {
            self.err(format!("{key}: expected a nonnegative integer, got {v}"));
        }
        parsed
    }

    fn uint(&mut self, key: &str, default: u64) -> u64 {
        self.opt_uint(key).unwrap_or(default)
    }

    fn size(&mut self, key: &str, default: usize) -> usize {
        self.uint(key, default as u64) as usize
    }

    fn boolean(&mut self, key: &str, default: bool) -> bool {
        match self.get(key) {
            None => default,
            Some(Value::Bool(b)) => b,
            Some(v) => {
                self.err(format!("{key}: expected true or false, got {v}"));
                default
            }
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.get(key)? {
            Value::String(s) => Some(s),
            v => {
                self.err(format!("{key}: expected a string, got {v}"));
                None
            }
        }
    }

    fn uint_list(&mut self, key: &str, default: &[usize], allow_scalar: bool) -> Vec<usize> {
        let Some(v) = self.get(key) else {
            return default.to_vec();
        };
        let items = match &v {
            Value::Array(a) => a.iter().map(as_uint).collect::<Option<Vec<_>>>(),
            _ if allow_scalar => as_uint(&v).map(|x| vec![x]),
            _ => None,
        };
        match items {
            Some(xs) if !xs.is_empty() => xs.into_iter().map(|x| x as usize).collect(),
            _ => {
                self.err(format!("{key}: expected a nonempty list of nonnegative integers, got {v}"));
                default.to_vec()
            }
        }
    }

    fn float_list(&mut self, key: &str, default: &[f64]) -> Vec<f64> {
        let Some(v) = self.get(key) else {
            return default.to_vec();
        };
        let items = match &v {
            Value::Array(a) => a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>(),
            Value::Number(n) => n.as_f64().map(|x| vec![x]),
            _ => None,
        };
        items.unwrap_or_else(|| {
            self.err(format!("{key}: expected a list of numbers, got {v}"));
            default.to_vec()
        })
    }

    fn triples<T: TryFrom<i64>>(&mut self, key: &str) -> Option<Vec<[T; 3]>> {
        let v = self.get(key)?;
        let parse = |v: &Value| -> Option<Vec<[T; 3]>> {
            v.as_array()?
                .iter()
                .map(|t| {
                    let t = t.as_array()?;
                    if t.len() != 3 {
                        return None;
                    }
                    let mut out = Vec::with_capacity(3);
                    for c in t {
                        out.push(T::try_from(c.as_i64()?).ok()?);
                    }
                    out.try_into().ok()
                })
                .collect()
        };
        let parsed = parse(&v).filter(|p| !p.is_empty());
        if parsed.is_none() {
            self.err(format!("{key}: expected a nonempty list of integer triples, got {v}"));
        }
        parsed
    }

    fn offsets(&mut self, default: Vec<Offset>) -> Vec<Offset> {
        let offsets = self.triples::<i32>("offsets").unwrap_or(default);
        if let Err(e) = TorusLattice::new(2, offsets.clone()) {
            self.err(format!("offsets: {e}"));
        }
        offsets
    }

    fn side(&mut self, default: usize) -> usize {
        let l = self.size("L", default);
        self.check(l >= 2, format!("L must be at least 2, got {l}"));
        l
    }

    fn sides(&mut self, default: &[usize]) -> Vec<usize> {
        let ls = self.uint_list("L", default, true);
        for &l in &ls {
            self.check(l >= 2, format!("L must be at least 2, got {l}"));
        }
        ls
    }

    fn check(&mut self, ok: bool, msg: String) {
        if !ok {
            self.err(msg);
        }
    }

    fn unit_open(&mut self, key: &str, v: f64) {
        self.check(v > 0.0 && v < 1.0, format!("{key} must lie strictly between 0 and 1, got {v}"));
    }

    fn positive(&mut self, key: &str, v: f64) {
        self.check(v > 0.0 && v.is_finite(), format!("{key} must be positive, got {v}"));
    }

    fn at_least_one(&mut self, key: &str, v: u64) {
        self.check(v >= 1, format!("{key} must be at least 1"));
    }

    fn regime(&mut self) -> Regime {
        match self.string("regime") {
            None => Regime::QLt1,
            Some(s) => s.parse().unwrap_or_else(|e| {
                self.err(format!("regime: {e}"));
                Regime::QLt1
            }),
        }
    }
}

fn as_uint(v: &Value) -> Option<u64> {
    if let Some(u) = v.as_u64() {
        return Some(u);
    }
    let f = v.as_f64()?;
    (f >= 0.0 && f.fract() == 0.0 && f < 2f64.powi(63)).then_some(f as u64)
}

/// Parse config text, apply defaults and report all errors at once.
pub fn validate_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    validate_config_with(text, Map::new())
}

/// [`validate_config`] after replacing top-level keys with `overrides`.
pub fn validate_config_with(text: &str, overrides: Map<String, Value>) -> Result<ExperimentConfig, ConfigErrors> {
    let mut value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| ConfigErrors(vec![format!("invalid JSON: {e}")]))?
    };
    if let Value::Object(map) = &mut value {
        map.extend(overrides);
    }
    validate_value(value)
}

/// [`validate_config`] on an already parsed JSON value.
pub fn validate_value(value: Value) -> Result<ExperimentConfig, ConfigErrors> {
    let Value::Object(map) = value else {
        return Err(ConfigErrors(vec!["config must be a JSON object".into()]));
    };
    let mut rd = Reader {
        map,
        used: BTreeSet::new(),
        errors: Vec::new(),
    };
    let kind = match rd.string("kind") {
        None if rd.errors.is_empty() => {
            rd.err("missing experiment kind".into());
            None
        }
        None => None,
        Some(s) => s.parse::<ExperimentKind>().map_err(|e| rd.err(e)).ok(),
    };
    let seed = rd.uint("seed", 1);
    let threads = rd.size("threads", 0);
    let out = PathBuf::from(rd.string("out").unwrap_or_else(|| "out".into()));
    let Some(kind) = kind else {
        return Err(ConfigErrors(rd.errors));
    };
    let experiment = read_experiment(kind, &mut rd);
    let unknown: Vec<String> = rd.map.keys().filter(|k| !rd.used.contains(*k)).cloned().collect();
    for key in unknown {
        rd.err(format!("unknown key {key:?} for kind {kind}"));
    }
    if rd.errors.is_empty() {
        Ok(ExperimentConfig {
            seed,
            threads,
            out,
            experiment,
        })
    } else {
        Err(ConfigErrors(rd.errors))
    }
}

fn read_experiment(kind: ExperimentKind, rd: &mut Reader) -> Experiment {
    match kind {
        ExperimentKind::Persistence => {
            let sides = rd.sides(&[16, 20, 26]);
            let offsets = rd.offsets(nearest_neighbor_offsets());
            let q = rd.float("q", 0.9);
            rd.positive("q", q);
            let horizon = match rd.opt_float("horizon") {
                Some(h) => h,
                None => {
                    rd.check(q != 1.0, "horizon must be given when q = 1".into());
                    50.0 / (1.0 - q).abs()
                }
            };
            rd.positive("horizon", horizon);
            let transient = rd.float("transient", 0.2 * horizon);
            rd.check(
                (0.0..horizon).contains(&transient),
                format!("transient must lie in [0, horizon), got {transient}"),
            );
            let u0 = rd.float("u0", 0.25);
            rd.unit_open("u0", u0);
            let replicates = rd.size("replicates", 20);
            rd.at_least_one("replicates", replicates as u64);
            let band = rd.float("band", 0.1);
            rd.positive("band", band);
            let sample_dt = rd.float("sample_dt", 1.0);
            rd.positive("sample_dt", sample_dt);
            Experiment::Persistence(PersistenceSettings {
                sides,
                offsets,
                q,
                u0,
                replicates,
                horizon,
                transient,
                band,
                sample_dt,
            })
        }
        ExperimentKind::Extinction => {
            let sides = rd.sides(&[16, 20, 26]);
            let offsets = rd.offsets(nearest_neighbor_offsets());
            let q = rd.float("q", 1.1);
            rd.positive("q", q);
            let u0 = rd.float("u0", 0.25);
            rd.unit_open("u0", u0);
            let replicates = rd.size("replicates", 20);
            rd.at_least_one("replicates", replicates as u64);
            let t_max_per_site = rd.float("t_max_per_site", 50.0);
            rd.positive("t_max_per_site", t_max_per_site);
            Experiment::Extinction(ExtinctionSettings {
                sides,
                offsets,
                q,
                u0,
                replicates,
                t_max_per_site,
            })
        }
        ExperimentKind::DualityCheck => {
            let side = rd.side(3);
            let offsets = rd.offsets(nearest_neighbor_offsets());
            let t = rd.float("t", 1.0);
            rd.check(t >= 0.0 && t.is_finite(), format!("t must be nonnegative, got {t}"));
            let replicates = rd.size("replicates", 100_000);
            rd.at_least_one("replicates", replicates as u64);
            let a = rd.triples::<usize>("A").unwrap_or_else(|| vec![[0, 0, 0]]);
            let b = rd.triples::<usize>("B").unwrap_or_else(|| vec![[1, 1, 0]]);
            for (name, set) in [("A", &a), ("B", &b)] {
                let inside = set.iter().all(|c| c.iter().all(|&x| x < side));
                rd.check(inside, format!("{name}: coordinates must lie in [0, L)"));
            }
            Experiment::DualityCheck(DualitySettings {
                side,
                offsets,
                t,
                replicates,
                a,
                b,
            })
        }
        ExperimentKind::ReactionTerm => {
            let k = rd.size("k", 3);
            let default = match k {
                3 => unit_offsets(),
                6 => nearest_neighbor_offsets(),
                _ => Vec::new(),
            };
            let has_offsets = rd.map.contains_key("offsets");
            rd.check(
                has_offsets || !default.is_empty(),
                format!("offsets must be given for k = {k}"),
            );
            let offsets = if has_offsets || !default.is_empty() {
                rd.offsets(default)
            } else {
                Vec::new()
            };
            rd.check(
                offsets.is_empty() || offsets.len() == k,
                format!("k = {k} but {} offsets were given", offsets.len()),
            );
            rd.check((3..=12).contains(&k), format!("k must lie in 3..=12, got {k}"));
            let regime = rd.regime();
            let t_trunc = rd.float("t_trunc", 1e4);
            rd.check((0.0..=1e5).contains(&t_trunc), format!("t_trunc must lie in [0, 1e5], got {t_trunc}"));
            let replicates = rd.uint("replicates", 1_000_000);
            rd.at_least_one("replicates", replicates);
            let drift_u = rd.float_list("drift_u", &[]);
            for &u in &drift_u {
                rd.unit_open("drift_u", u);
            }
            let drift_l = rd.size("drift_L", 20);
            rd.check(drift_l >= 2, format!("drift_L must be at least 2, got {drift_l}"));
            let burn = rd.float("burn", (drift_l * drift_l) as f64);
            rd.check(burn >= 0.0 && burn.is_finite(), format!("burn must be nonnegative, got {burn}"));
            let configs = rd.size("configs", 64);
            rd.check(configs >= 2, "configs must be at least 2".into());
            Experiment::ReactionTerm(ReactionSettings {
                k,
                offsets,
                regime,
                t_trunc,
                replicates,
                drift_u,
                drift_l,
                burn,
                configs,
            })
        }
        ExperimentKind::OdeCompare => {
            let sides = rd.sides(&[10, 16, 22]);
            let offsets = rd.offsets(nearest_neighbor_offsets());
            rd.check(
                (3..=12).contains(&offsets.len()),
                "ode-compare needs between 3 and 12 offsets".into(),
            );
            let regime = rd.regime();
            let epsilon = rd.opt_float("epsilon");
            if let Some(e) = epsilon {
                rd.check((0.0..1.0).contains(&e), format!("epsilon must lie in [0, 1), got {e}"));
            }
            let epsilon_exponent = rd.float("epsilon_exponent", 0.8);
            rd.positive("epsilon_exponent", epsilon_exponent);
            let u0 = rd.float("u0", 0.25);
            rd.check((0.0..=1.0).contains(&u0), format!("u0 must lie in [0, 1], got {u0}"));
            let t0 = rd.float("t0", 2.0);
            rd.positive("t0", t0);
            let dt = rd.float("dt", 0.05);
            rd.positive("dt", dt);
            let replicates = rd.size("replicates", 10);
            rd.at_least_one("replicates", replicates as u64);
            let t_trunc = rd.float("t_trunc", 1e4);
            rd.check((0.0..=1e5).contains(&t_trunc), format!("t_trunc must lie in [0, 1e5], got {t_trunc}"));
            let fate_replicates = rd.uint("fate_replicates", 100_000);
            rd.at_least_one("fate_replicates", fate_replicates);
            Experiment::OdeCompare(OdeCompareSettings {
                sides,
                offsets,
                regime,
                epsilon,
                epsilon_exponent,
                u0,
                t0,
                dt,
                replicates,
                t_trunc,
                fate_replicates,
            })
        }
        ExperimentKind::BoxClt => {
            let side = rd.side(64);
            let offsets = rd.offsets(nearest_neighbor_offsets());
            let r = rd.uint_list("r", &[4, 8, 16], false);
            for &x in &r {
                rd.check(x >= 1 && side.is_multiple_of(x), format!("r must divide L (r = {x}, L = {side})"));
            }
            let distinct: BTreeSet<usize> = r.iter().copied().collect();
            rd.check(distinct.len() >= 3, "r needs at least 3 distinct sizes".into());
            let lambda = rd.float("lambda", 0.5);
            rd.unit_open("lambda", lambda);
            let burn = rd.float("burn", (side * side) as f64);
            rd.check(burn >= 0.0 && burn.is_finite(), format!("burn must be nonnegative, got {burn}"));
            let replicates = rd.size("replicates", 8);
            rd.at_least_one("replicates", replicates as u64);
            let sampler = match rd.string("sampler").as_deref() {
                None | Some("dual") => Sampler::Dual,
                Some("forward") => Sampler::Forward,
                Some(s) => {
                    rd.err(format!("sampler: expected \"dual\" or \"forward\", got {s:?}"));
                    Sampler::Dual
                }
            };
            let control = rd.boolean("control", true);
            Experiment::BoxClt(BoxCltSettings {
                side,
                offsets,
                r,
                lambda,
                burn,
                replicates,
                sampler,
                control,
            })
        }
        ExperimentKind::Greens => {
            let x = rd.uint("x", 10);
            let z = rd.uint("z", 100);
            rd.check(x >= 1 && x < z, format!("need 0 < x < z, got x = {x}, z = {z}"));
            let rate = match rd.string("rate") {
                None => RateFunction::Linear,
                Some(s) => s.parse().unwrap_or_else(|e| {
                    rd.err(format!("rate: {e}"));
                    RateFunction::Linear
                }),
            };
            if x >= 1 && x < z {
                if let Err(e) = rate.validate(z) {
                    rd.err(format!("rate: {e}"));
                }
            }
            let replicates = rd.uint("replicates", 100_000);
            rd.at_least_one("replicates", replicates);
            Experiment::Greens(GreensSettings { x, z, rate, replicates })
        }
        ExperimentKind::Snapshot => {
            let side = rd.side(100);
            let offsets = rd.offsets(nearest_neighbor_offsets());
            let q = rd.float("q", 0.9);
            rd.positive("q", q);
            let u0 = rd.float("u0", 0.5);
            rd.check((0.0..=1.0).contains(&u0), format!("u0 must lie in [0, 1], got {u0}"));
            let t = rd.float("t", 100.0);
            rd.positive("t", t);
            let axis = rd.size("axis", 2);
            rd.check(axis < 3, format!("axis must be 0, 1 or 2, got {axis}"));
            let level = rd.size("level", side / 2);
            rd.check(level < side, format!("level must lie in [0, L), got {level}"));
            let sample_dt = rd.float("sample_dt", 1.0);
            rd.positive("sample_dt", sample_dt);
            Experiment::Snapshot(SnapshotSettings {
                side,
                offsets,
                q,
                u0,
                t,
                axis,
                level,
                sample_dt,
            })
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub version: &'static str,
    /// Output files by name, in the order they were produced.
    pub files: Vec<(String, String)>,
    /// Headline numbers, also written to `summary.csv`.
    pub metrics: BTreeMap<String, f64>,
    pub wall_clock: Duration,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    /// `metadata.json`: config echo, code version and file list.
    pub fn metadata(&self) -> String {
        let files: Vec<&str> = self.files.iter().map(|(n, _)| n.as_str()).collect();
        let meta = serde_json::json!({
            "version": self.version,
            "config": self.config.echo(),
            "files": files,
        });
        let mut s = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        s.push('\n');
        s
    }

    /// Write every file plus `metadata.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), ExperimentError> {
        let io = |e: std::io::Error| ExperimentError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        for (name, contents) in &self.files {
            std::fs::write(dir.join(name), contents).map_err(io)?;
        }
        std::fs::write(dir.join("metadata.json"), self.metadata()).map_err(io)
    }
}

struct Output {
    files: Vec<(String, String)>,
    metrics: BTreeMap<String, f64>,
}

impl Output {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn file(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    fn metric(&mut self, name: impl Into<String>, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    fn summary(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k},{}", fmt_f64(*v));
        }
        s
    }
}

/// Run the experiment on a pool of `config.threads` workers (0 picks the
/// machine default). Nothing is written to disk; see [`run_and_write`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord, ExperimentError> {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(ExperimentError::runtime)?;
    let seed = config.seed;
    let mut out = pool.install(|| match &config.experiment {
        Experiment::Persistence(s) => persistence(s, seed),
        Experiment::Extinction(s) => extinction(s, seed),
        Experiment::DualityCheck(s) => duality(s, seed),
        Experiment::ReactionTerm(s) => reaction(s, seed),
        Experiment::OdeCompare(s) => ode_compare(s, seed),
        Experiment::BoxClt(s) => box_clt(s, seed),
        Experiment::Greens(s) => greens(s, seed),
        Experiment::Snapshot(s) => snapshot(s, seed),
    })?;
    let summary = out.summary();
    out.file("summary.csv", summary);
    Ok(RunRecord {
        config: config.clone(),
        version: VERSION,
        files: out.files,
        metrics: out.metrics,
        wall_clock: start.elapsed(),
    })
}

/// [`run_experiment`] followed by [`RunRecord::write_to`] into `config.out`.
pub fn run_and_write(config: &ExperimentConfig) -> Result<RunRecord, ExperimentError> {
    let record = run_experiment(config)?;
    record.write_to(&config.out)?;
    Ok(record)
}

/// Render plane `level` perpendicular to `axis` in the snapshot format.
pub fn snapshot_cross_section(
    config: &Configuration,
    axis: usize,
    level: usize,
    header: &SnapshotHeader,
) -> Result<String, ExperimentError> {
    let side = config.lattice().side();
    if axis > 2 {
        return Err(ExperimentError::Runtime(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    if level >= side {
        return Err(ExperimentError::Runtime(format!("level {level} outside [0, {side})")));
    }
    Ok(write_slice(config, axis, level, header))
}

fn lattice(side: usize, offsets: &[Offset]) -> Result<Arc<TorusLattice>, ExperimentError> {
    TorusLattice::new(side, offsets.to_vec())
        .map(Arc::new)
        .map_err(ExperimentError::runtime)
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn persistence(s: &PersistenceSettings, seed: u64) -> Result<Output, ExperimentError> {
    let params = QVoterParams::direct(s.q).map_err(ExperimentError::runtime)?;
    let mut out = Output::new();
    let mut table = String::from("L,replicate,occupancy\n");
    let w = width(s.replicates);
    for (li, &side) in s.sides.iter().enumerate() {
        let lat = lattice(side, &s.offsets)?;
        let stream = replica_seed(seed, li as u64);
        let runs: Result<Vec<_>, ExperimentError> = (0..s.replicates)
            .into_par_iter()
            .map(|i| {
                let mut rng = replica_rng(stream, i as u64);
                let start = product_measure(lat.clone(), s.u0, &mut rng).map_err(ExperimentError::runtime)?;
                run(&start, &params, s.horizon, &mut rng, s.sample_dt).map_err(ExperimentError::runtime)
            })
            .collect();
        let mut occupancy = Vec::with_capacity(s.replicates);
        for (i, tr) in runs?.iter().enumerate() {
            let post: Vec<f64> = tr
                .times
                .iter()
                .zip(&tr.densities)
                .filter(|(t, _)| **t >= s.transient)
                .map(|(_, d)| *d)
                .collect();
            let inside = post.iter().filter(|d| (*d - 0.5).abs() <= s.band).count();
            let occ = inside as f64 / post.len() as f64;
            occupancy.push(occ);
            let _ = writeln!(table, "{side},{i},{}", fmt_f64(occ));
            out.file(format!("trajectory_L{side}_r{i:0w$}.csv"), tr.to_csv());
        }
        let (m, se) = mean_se(&occupancy);
        out.metric(format!("occupancy_L{side}"), m);
        out.metric(format!("occupancy_se_L{side}"), se);
    }
    out.file("occupancy.csv", table);
    Ok(out)
}

fn extinction(s: &ExtinctionSettings, seed: u64) -> Result<Output, ExperimentError> {
    let params = QVoterParams::direct(s.q).map_err(ExperimentError::runtime)?;
    let mut out = Output::new();
    let mut log_n = Vec::new();
    let mut mean_times = Vec::new();
    for (li, &side) in s.sides.iter().enumerate() {
        let lat = lattice(side, &s.offsets)?;
        let n = lat.n() as f64;
        let ens = extinction_ensemble(
            lat,
            &params,
            s.u0,
            s.replicates,
            s.t_max_per_site * n,
            replica_seed(seed, li as u64),
        )
        .map_err(ExperimentError::runtime)?;
        out.file(format!("extinction_L{side}.csv"), ens.to_csv());
        let times: Vec<f64> = ens.samples.iter().map(|e| e.time).collect();
        let (m, se) = mean_se(&times);
        out.metric(format!("absorbed_zero_L{side}"), ens.count(Outcome::AllZero) as f64);
        out.metric(format!("absorbed_one_L{side}"), ens.count(Outcome::AllOne) as f64);
        out.metric(format!("censored_L{side}"), ens.count(Outcome::Censored) as f64);
        out.metric(format!("mean_time_L{side}"), m);
        out.metric(format!("mean_time_se_L{side}"), se);
        log_n.push(n.ln());
        mean_times.push(m);
    }
    if s.sides.len() >= 2 {
        let (slope, _, _) = least_squares(&log_n, &mean_times);
        out.metric("time_vs_log_n_slope", slope);
    }
    Ok(out)
}

fn site_of(lat: &TorusLattice, c: &[usize; 3]) -> usize {
    lat.index(c[0], c[1], c[2])
}

fn duality(s: &DualitySettings, seed: u64) -> Result<Output, ExperimentError> {
    let lat = lattice(s.side, &s.offsets)?;
    let a: Vec<usize> = s.a.iter().map(|c| site_of(&lat, c)).collect();
    let b: Vec<usize> = s.b.iter().map(|c| site_of(&lat, c)).collect();
    let chk = check_duality(lat, &a, &b, s.t, s.replicates, seed).map_err(ExperimentError::runtime)?;
    let mut out = Output::new();
    out.file(
        "duality.csv",
        format!(
            "p_forward,se_forward,p_dual,se_dual\n{},{},{},{}\n",
            fmt_f64(chk.p_forward),
            fmt_f64(chk.se_forward),
            fmt_f64(chk.p_dual),
            fmt_f64(chk.se_dual)
        ),
    );
    out.metric("p_forward", chk.p_forward);
    out.metric("p_dual", chk.p_dual);
    out.metric("discrepancy", chk.discrepancy());
    out.metric("combined_se", chk.combined_se());
    Ok(out)
}

fn reaction(s: &ReactionSettings, seed: u64) -> Result<Output, ExperimentError> {
    let rates = perturbation_rates(s.k, s.regime).map_err(ExperimentError::runtime)?;
    let fates = coalescence_fates(&s.offsets, s.t_trunc, s.replicates, replica_seed(seed, 0))
        .map_err(ExperimentError::runtime)?;
    let term = phi_from_distribution::<BigRational>(&fates, &rates).map_err(ExperimentError::runtime)?;
    let mut out = Output::new();
    out.file("fates.csv", fates.to_csv());
    out.file("reaction.csv", term.to_csv());
    out.metric("sign", term.sign as f64);
    out.metric("c_k", term.to_f64().c_k);
    if !s.drift_u.is_empty() {
        let lat = lattice(s.drift_l, &s.offsets)?;
        let mut table = String::from("u,phi,phi_se,drift,drift_se\n");
        for (ui, &u) in s.drift_u.iter().enumerate() {
            let stream = replica_seed(seed, 1 + ui as u64);
            let drifts: Result<Vec<f64>, ExperimentError> = (0..s.configs)
                .into_par_iter()
                .map(|i| {
                    let mut rng = replica_rng(stream, i as u64);
                    let c = sample_nu_u(lat.clone(), u, s.burn, &mut rng).map_err(ExperimentError::runtime)?;
                    empirical_drift(&c, &rates).map_err(ExperimentError::runtime)
                })
                .collect();
            let (d, d_se) = mean_se(&drifts?);
            let (p, p_se) = phi_with_error(&fates, &rates, u).map_err(ExperimentError::runtime)?;
            let _ = writeln!(table, "{},{},{},{},{}", fmt_f64(u), fmt_f64(p), fmt_f64(p_se), fmt_f64(d), fmt_f64(d_se));
            out.metric(format!("phi_u{u}"), p);
            out.metric(format!("phi_se_u{u}"), p_se);
            out.metric(format!("drift_u{u}"), d);
            out.metric(format!("drift_se_u{u}"), d_se);
        }
        out.file("drift.csv", table);
    }
    Ok(out)
}

fn ode_compare(s: &OdeCompareSettings, seed: u64) -> Result<Output, ExperimentError> {
    let k = s.offsets.len();
    let rates = perturbation_rates(k, s.regime).map_err(ExperimentError::runtime)?;
    let fates = coalescence_fates(&s.offsets, s.t_trunc, s.fate_replicates, replica_seed(seed, 0))
        .map_err(ExperimentError::runtime)?;
    let term = phi_from_distribution::<f64>(&fates, &rates).map_err(ExperimentError::runtime)?;
    let mut out = Output::new();
    out.file("reaction.csv", term.to_csv());
    let mut ode_written = false;
    for (li, &side) in s.sides.iter().enumerate() {
        let lat = lattice(side, &s.offsets)?;
        let eps = s
            .epsilon
            .unwrap_or_else(|| (lat.n() as f64).powf(-s.epsilon_exponent));
        let params = QVoterParams::perturbation(eps, rates.clone()).map_err(ExperimentError::runtime)?;
        let cmp = compare_particle_ode(
            lat,
            &params,
            &term.phi,
            s.u0,
            s.t0,
            eps,
            s.dt,
            s.replicates,
            replica_seed(seed, 1 + li as u64),
        )
        .map_err(ExperimentError::runtime)?;
        if !ode_written && eps > 0.0 {
            out.file("ode.csv", cmp.ode.to_csv());
            ode_written = true;
        }
        out.file(format!("comparison_L{side}.csv"), cmp.to_csv());
        out.metric(format!("epsilon_L{side}"), eps);
        out.metric(format!("mean_deviation_L{side}"), cmp.mean());
        out.metric(format!("max_deviation_L{side}"), cmp.max());
    }
    Ok(out)
}

fn box_clt(s: &BoxCltSettings, seed: u64) -> Result<Output, ExperimentError> {
    let lat = lattice(s.side, &s.offsets)?;
    let mut out = Output::new();
    let mut fits = String::from("source,slope,slope_se,intercept\n");
    let w = width(s.replicates);
    let sources: &[(&str, bool)] = if s.control {
        &[("voter", true), ("product", false)]
    } else {
        &[("voter", true)]
    };
    for (si, &(name, equilibrated)) in sources.iter().enumerate() {
        let stream = replica_seed(seed, si as u64);
        let configs: Result<Vec<Configuration>, ExperimentError> = (0..s.replicates)
            .into_par_iter()
            .map(|i| {
                let mut rng = replica_rng(stream, i as u64);
                if !equilibrated {
                    return product_measure(lat.clone(), s.lambda, &mut rng).map_err(ExperimentError::runtime);
                }
                match s.sampler {
                    Sampler::Dual => sample_nu_u_dual(lat.clone(), s.lambda, s.burn, &mut rng),
                    Sampler::Forward => sample_nu_u(lat.clone(), s.lambda, s.burn, &mut rng),
                }
                .map_err(ExperimentError::runtime)
            })
            .collect();
        let mut samples = Vec::new();
        for (i, c) in configs?.iter().enumerate() {
            let mut csv = String::from("r,cube_index,value\n");
            for &r in &s.r {
                let b = box_sums(c, r, s.lambda).map_err(ExperimentError::runtime)?;
                b.append_rows(&mut csv);
                samples.push(b);
            }
            out.file(format!("box_sums_{name}_c{i:0w$}.csv"), csv);
        }
        let fit = variance_exponent(&samples).map_err(ExperimentError::runtime)?;
        let _ = writeln!(
            fits,
            "{name},{},{},{}",
            fmt_f64(fit.slope),
            fmt_f64(fit.slope_se),
            fmt_f64(fit.intercept)
        );
        out.metric(format!("{name}_slope"), fit.slope);
        out.metric(format!("{name}_slope_se"), fit.slope_se);
        for &r in &s.r {
            let values: Vec<f64> = samples
                .iter()
                .filter(|b| b.r == r)
                .flat_map(|b| b.values.iter().copied())
                .collect();
            if let Ok(kurt) = moment_ratio(&values) {
                out.metric(format!("{name}_kurtosis_r{r}"), kurt);
            }
        }
    }
    out.file("fit.csv", fits);
    Ok(out)
}

fn greens(s: &GreensSettings, seed: u64) -> Result<Output, ExperimentError> {
    let exact = expected_hitting_time(s.x, s.z, &s.rate).map_err(ExperimentError::runtime)?;
    let est = simulate_hitting(s.x, s.z, &s.rate, s.replicates, seed).map_err(ExperimentError::runtime)?;
    let mut out = Output::new();
    out.file(
        "greens.csv",
        format!(
            "x,z,rate,exact,mean_time,time_se,top_fraction,top_se\n{},{},{},{},{},{},{},{}\n",
            s.x,
            s.z,
            s.rate,
            fmt_f64(exact),
            fmt_f64(est.mean_time),
            fmt_f64(est.time_se),
            fmt_f64(est.top_fraction),
            fmt_f64(est.top_se)
        ),
    );
    out.metric("exact", exact);
    out.metric("mean_time", est.mean_time);
    out.metric("time_se", est.time_se);
    out.metric("top_fraction", est.top_fraction);
    out.metric("top_se", est.top_se);
    Ok(out)
}

fn snapshot(s: &SnapshotSettings, seed: u64) -> Result<Output, ExperimentError> {
    let lat = lattice(s.side, &s.offsets)?;
    let params = QVoterParams::direct(s.q).map_err(ExperimentError::runtime)?;
    let mut rng = replica_rng(seed, 0);
    let start = product_measure(lat.clone(), s.u0, &mut rng).map_err(ExperimentError::runtime)?;
    let tr = run(&start, &params, s.t, &mut rng, s.sample_dt).map_err(ExperimentError::runtime)?;
    let header = SnapshotHeader {
        side: s.side,
        time: s.t,
        q: s.q,
        seed,
    };
    let slice = snapshot_cross_section(&tr.terminal, s.axis, s.level, &header)?;
    let sites = lat.slice_sites(s.axis, s.level);
    let ones = sites.iter().filter(|&&x| tr.terminal.get(x)).count() as f64;
    let share = ones / sites.len() as f64;
    let mut out = Output::new();
    out.file("snapshot.txt", slice);
    out.file("trajectory.csv", tr.to_csv());
    out.metric("slice_density", share);
    out.metric("slice_majority_share", share.max(1.0 - share));
    out.metric("density", tr.final_density());
    Ok(out)
}
