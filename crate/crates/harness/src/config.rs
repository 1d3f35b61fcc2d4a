//! Run and sweep configuration: TOML on disk, canonical JSON for hashing.

use std::path::{Path, PathBuf};

use igar_core::bench::DEFAULT_CASES;
use igar_core::policy::Intervention;
use igar_core::recal::RecalConfig;
use igar_core::sink::SinkDetectConfig;
use igar_core::world::{sha256_hex, Suite, DEFAULT_STEP_LIMIT};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "IGAR_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "igar-out";
pub const DEFAULT_ROLLOUTS: usize = 50;
pub const TOOL_VERSION: &str = concat!("igar/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySource {
    /// The hand-constructed sink policy; `seed` picks its probe scenes.
    Sink {
        #[serde(default)]
        seed: u64,
    },
    /// Weights saved by `igar train`.
    Weights { path: PathBuf },
    /// Train on the shortcut dataset, then evaluate.
    Train(TrainSpec),
}

impl Default for PolicySource {
    fn default() -> Self {
        PolicySource::Sink { seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub scenes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { scenes: 1500, epochs: 25, lr: 0.05, dropout: 0.3, d: 32, layers: 2, heads: 4, seed: 1 }
    }
}

/// A suite file, or a suite generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SuiteRef {
    File { path: PathBuf },
    Generate {
        generate: Suite,
        #[serde(default = "default_cases")]
        cases: usize,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn default_cases() -> usize {
    DEFAULT_CASES
}

fn default_rollouts() -> usize {
    DEFAULT_ROLLOUTS
}

fn default_step_limit() -> usize {
    DEFAULT_STEP_LIMIT
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub policy: PolicySource,
    #[serde(default = "default_suites")]
    pub suites: Vec<SuiteRef>,
    #[serde(default = "default_rollouts")]
    pub rollouts: usize,
    #[serde(default)]
    pub intervention: bool,
    #[serde(default)]
    pub sink: SinkDetectConfig,
    #[serde(default)]
    pub recal: RecalConfig,
    /// Seed of generated suites that do not set their own.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_step_limit")]
    pub step_limit: usize,
    /// Fan rollouts out over a thread pool. Results do not depend on it.
    #[serde(default = "default_true")]
    pub parallel: bool,
    /// Falls back to `$IGAR_OUT_DIR`, then `igar-out`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_suites() -> Vec<SuiteRef> {
    Suite::ALL.iter().map(|&s| SuiteRef::Generate { generate: s, cases: DEFAULT_CASES, seed: None }).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config is valid")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.rollouts == 0 {
            return bad("rollouts must be at least 1".into());
        }
        if self.step_limit == 0 {
            return bad("step_limit must be at least 1".into());
        }
        if self.suites.is_empty() {
            return bad("no suites configured".into());
        }
        for s in &self.suites {
            match s {
                SuiteRef::File { path } if !path.is_file() => return bad(format!("suite file {} not found", path.display())),
                SuiteRef::Generate { cases: 0, .. } => return bad("generated suite needs at least 1 case".into()),
                _ => {}
            }
        }
        match &self.policy {
            PolicySource::Weights { path } if !path.is_file() => {
                return bad(format!("weights file {} not found", path.display()))
            }
            PolicySource::Train(t) => {
                if t.scenes == 0 || t.epochs == 0 || t.d == 0 || t.layers == 0 || t.heads == 0 || t.d % t.heads != 0 {
                    return bad(format!("invalid training spec {t:?}"));
                }
                if !(0.0..=1.0).contains(&t.dropout) || !(t.lr.is_finite() && t.lr > 0.0) {
                    return bad(format!("invalid training spec {t:?}"));
                }
            }
            _ => {}
        }
        let r = &self.recal;
        if !(0.0..=1.0).contains(&r.p) || !(0.0..=1.0).contains(&r.rho) || !(r.alpha >= 0.0) {
            return bad(format!("recalibration parameters out of range: {r:?}"));
        }
        let s = &self.sink;
        if s.k == 0 || !(s.gamma.is_finite() && s.tau.is_finite() && s.epsilon > 0.0) {
            return bad(format!("sink detection parameters out of range: {s:?}"));
        }
        Ok(())
    }

    /// The intervention applied to the policy, if enabled.
    pub fn intervention(&self) -> Option<Intervention> {
        self.intervention.then_some(Intervention { sink: self.sink, recal: self.recal })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// Canonical JSON (sorted keys) of every field that can change results.
    /// Output location and thread-pool use are excluded.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.parallel = true;
        let value = serde_json::to_value(&c).expect("config serialises");
        serde_json::to_string(&value).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    P,
    Rho,
    Layers,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::P => "p",
            Axis::Rho => "rho",
            Axis::Layers => "layers",
        })
    }
}

impl std::str::FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p" => Ok(Axis::P),
            "rho" => Ok(Axis::Rho),
            "layers" | "L" => Ok(Axis::Layers),
            _ => Err(HarnessError::Config(format!("unknown sweep axis `{s}` (p, rho, layers)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.values.is_empty() {
            return Err(HarnessError::Config("sweep grid is empty".into()));
        }
        for &v in &self.values {
            let ok = match self.axis {
                Axis::P | Axis::Rho => (0.0..=1.0).contains(&v),
                Axis::Layers => v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64,
            };
            if !ok {
                return Err(HarnessError::Config(format!("{} = {v} is outside the parameter's domain", self.axis)));
            }
        }
        Ok(())
    }

    /// `base` with the axis set to `value` and the intervention switched on.
    pub fn apply(&self, base: &RunConfig, value: f64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.intervention = true;
        match self.axis {
            Axis::P => cfg.recal.p = value,
            Axis::Rho => cfg.recal.rho = value,
            Axis::Layers => cfg.recal.layers = value as usize,
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_documented_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.rollouts, 50);
        assert_eq!(c.policy, PolicySource::Sink { seed: 0 });
        assert_eq!(c.suites.len(), 3);
        assert!(!c.intervention);
        assert_eq!(c.recal.p, 0.6);
        assert_eq!(c.recal.rho, 0.4);
        assert_eq!(c.recal.layers, 16);
        assert_eq!(c.sink.tau, 20.0);
        assert_eq!(c.sink.gamma, 3.0);
        c.validate().unwrap();
    }

    #[test]
    fn parses_all_sections() {
        let c = RunConfig::from_toml(
            r#"
            rollouts = 5
            intervention = true
            seed = 9
            suites = [{ generate = "goal", cases = 3, seed = 4 }, { path = "x.json" }]
            policy = { kind = "train", epochs = 2 }
            [recal]
            p = 0.2
            "#,
        )
        .unwrap();
        assert_eq!(c.rollouts, 5);
        assert_eq!(c.recal.p, 0.2);
        assert_eq!(c.recal.rho, 0.4);
        assert_eq!(c.suites[0], SuiteRef::Generate { generate: Suite::Goal, cases: 3, seed: Some(4) });
        assert_eq!(c.suites[1], SuiteRef::File { path: "x.json".into() });
        match c.policy {
            PolicySource::Train(t) => assert_eq!((t.epochs, t.scenes), (2, 1500)),
            p => panic!("{p:?}"),
        }
        // the suite file does not exist
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("rollouts = 0").unwrap().validate().is_err());
        assert!(RunConfig::from_toml("[recal]\np = 1.5").unwrap().validate().is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("policy = { kind = \"weights\", path = \"/nonexistent\" }").unwrap().validate().is_err());
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        b.parallel = false;
        assert_eq!(a.hash(), b.hash());
        b.recal.p = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn sweep_domains() {
        assert!(SweepSpec { axis: Axis::P, values: vec![] }.validate().is_err());
        assert!(SweepSpec { axis: Axis::P, values: vec![1.1] }.validate().is_err());
        assert!(SweepSpec { axis: Axis::Layers, values: vec![1.5] }.validate().is_err());
        let s = SweepSpec { axis: Axis::Layers, values: vec![0.0, 2.0] };
        s.validate().unwrap();
        let c = s.apply(&RunConfig::default(), 2.0);
        assert!(c.intervention);
        assert_eq!(c.recal.layers, 2);
    }
}
