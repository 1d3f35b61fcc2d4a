//! Attention heatmap export for one benchmark case.
//!
//! For each layer and head two files hold the query × key attention grid as
//! a JSON array of rows, before and after recalibration. Files carry no
//! metadata so that, without an intervention, `pre` and `post` are
//! byte-identical; everything else goes into `tokens.json`.

use std::path::{Path, PathBuf};

use igar_core::metrics::Variant;
use igar_core::policy::{MiniVla, PolicySpec};
use igar_core::sink::Modality;
use igar_core::tensor::Matrix;
use igar_core::world::{Observation, WorldState};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TOOL_VERSION};
use crate::run::{write_file, LoadedSuite};
use crate::HarnessError;

pub const SIDECAR: &str = "tokens.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub tool_version: String,
    pub config_hash: String,
    pub suite: String,
    pub case: String,
    pub variant: Variant,
    pub text: String,
    /// One label per token, in sequence order.
    pub labels: Vec<String>,
    pub modality: Vec<Modality>,
    /// `[layer, head, query]` rows changed by recalibration.
    pub selected: Vec<[usize; 3]>,
    pub action: String,
}

pub fn grid_file(layer: usize, head: usize, stage: &str) -> String {
    format!("layer{layer}_head{head}_{stage}.json")
}

fn grid_json(m: &Matrix) -> String {
    let rows: Vec<&[f64]> = (0..m.rows()).map(|r| m.row(r)).collect();
    let mut s = serde_json::to_string(&rows).expect("finite grid");
    s.push('\n');
    s
}

/// Writes heatmaps for `case_id` under `variant` (initial state, unshuffled
/// scene) into `dir/<case>/<variant>/`. Returns that directory.
pub fn dump_heatmaps(
    cfg: &RunConfig,
    policy: &PolicySpec,
    suites: &[LoadedSuite],
    case_id: &str,
    variant: Variant,
    dir: &Path,
) -> Result<PathBuf, HarnessError> {
    let (ls, case) = suites
        .iter()
        .find_map(|ls| ls.suite.case(case_id).map(|c| (ls, c)))
        .ok_or_else(|| HarnessError::Lookup(format!("case `{case_id}` not found")))?;
    let inst = match variant {
        Variant::Normal => &case.normal,
        v => case
            .contradictions
            .get(&v)
            .ok_or_else(|| HarnessError::Lookup(format!("case `{case_id}` has no {v} variant")))?,
    };
    let scene = ls.suite.scene(case)?;
    let text = inst.render();
    let state = WorldState::new();
    let (input, trace) = MiniVla::new(policy, cfg.intervention()).trace(&Observation { scene, state: &state, text: &text })?;

    let out = dir.join(case_id).join(variant.as_str());
    let mut selected = Vec::new();
    for (l, (pre, post)) in trace.attn_pre.iter().zip(&trace.attn_post).enumerate() {
        for h in 0..pre.num_heads() {
            write_file(&out.join(grid_file(l, h, "pre")), grid_json(pre.head(h)).as_bytes())?;
            write_file(&out.join(grid_file(l, h, "post")), grid_json(post.head(h)).as_bytes())?;
            for q in 0..pre.tokens() {
                if pre.head(h).row(q) != post.head(h).row(q) {
                    selected.push([l, h, q]);
                }
            }
        }
    }
    let sidecar = Sidecar {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: cfg.hash(),
        suite: ls.name(),
        case: case_id.to_string(),
        variant,
        text,
        labels: input.labels.clone(),
        modality: trace.modality.labels().to_vec(),
        selected,
        action: igar_core::world::Action::from_index(trace.action).map(|a| a.to_string()).unwrap_or_default(),
    };
    let mut s = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
    s.push('\n');
    write_file(&out.join(SIDECAR), s.as_bytes())?;
    Ok(out)
}
