//! Self-consistency audit of a persisted run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use igar_core::metrics::{aggregate, lgs, SuccessRecord, SuiteReport, Variant};
use igar_core::world::sha256_hex;

use crate::run::{EpisodeRecord, RunManifest, EPISODES_FILE, MANIFEST_FILE, REPORT_FILE};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    /// Table recomputed from the episode records.
    pub table: String,
    pub problems: Vec<String>,
}

impl Audit {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }
}

fn read(dir: &Path, name: &str) -> Result<String, HarnessError> {
    let p = dir.join(name);
    fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))
}

/// Recomputes every suite report from `episodes.jsonl` and checks it
/// against `report.csv`, the manifest's config hash and episode count, and
/// LGS = SR(Normal) − SR(variant) on every row.
pub fn audit(dir: &Path) -> Result<Audit, HarnessError> {
    let manifest: RunManifest = serde_json::from_str(&read(dir, MANIFEST_FILE)?)
        .map_err(|e| HarnessError::Audit(format!("{MANIFEST_FILE}: {e}")))?;
    let mut records = Vec::new();
    for (n, line) in read(dir, EPISODES_FILE)?.lines().enumerate() {
        let r: EpisodeRecord = serde_json::from_str(line)
            .map_err(|e| HarnessError::Audit(format!("{EPISODES_FILE}:{}: {e}", n + 1)))?;
        records.push(r);
    }
    let persisted = read(dir, REPORT_FILE)?;

    let mut problems = Vec::new();
    let canonical = serde_json::to_string(&manifest.config).expect("value serialises");
    if sha256_hex(canonical.as_bytes()) != manifest.config_hash {
        problems.push("config hash does not match the embedded config".to_string());
    }
    if records.len() != manifest.episodes {
        problems.push(format!("{} episode records, manifest says {}", records.len(), manifest.episodes));
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed != manifest.failed_episodes {
        problems.push(format!("{failed} failed episodes, manifest says {}", manifest.failed_episodes));
    }

    let mut by_suite: BTreeMap<&str, Vec<SuccessRecord>> = BTreeMap::new();
    for r in &records {
        by_suite.entry(r.suite.as_str()).or_default().push(r.success_record());
    }
    let mut table = String::from(SuiteReport::TABLE_HEADER);
    table.push('\n');
    for entry in &manifest.suites {
        let recs = by_suite.remove(entry.name.as_str()).unwrap_or_default();
        let report = match aggregate(&recs) {
            Ok(r) => r.with_meta(&entry.name, &manifest.config_hash, entry.seed),
            Err(e) => {
                problems.push(format!("suite {}: {e}", entry.name));
                continue;
            }
        };
        let normal = report.sr(Variant::Normal).unwrap_or(f64::NAN);
        for row in &report.rows {
            if row.variant != Variant::Normal && row.lgs != Some(lgs(normal, row.sr)) {
                problems.push(format!("suite {} {}: LGS inconsistent with SR", entry.name, row.variant));
            }
        }
        for line in report.table_rows() {
            table.push_str(&line);
            table.push('\n');
        }
    }
    for name in by_suite.keys() {
        problems.push(format!("episodes for suite {name} missing from the manifest"));
    }
    if table != persisted {
        problems.push(format!("{REPORT_FILE} differs from the table recomputed from {EPISODES_FILE}"));
    }
    Ok(Audit { table, problems })
}
