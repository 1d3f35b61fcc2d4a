//! Grounding-head selection and text-sink attention redistribution.
//!
//! Operates on post-softmax attention rows. For every (head, query) pair past
//! the visual block, a pair is selected when its visual attention is not
//! dominated by visual sinks and is not negligible. Selected rows have their
//! text-sink entries scaled by `p`; the freed mass goes to the non-sink text
//! tokens in proportion to their current weights. Row sums are conserved, so
//! rows are used downstream without renormalising.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sink::{detect_sinks, ModalityMap, SinkDetectConfig, SinkReport};
use crate::tensor::Matrix;

/// Tolerance used when validating that attention rows are stochastic.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecalConfig {
    /// Upper bound on the visual-sink share of a row's visual mass.
    pub rho: f64,
    /// Minimum visual mass for a row to be considered.
    pub alpha: f64,
    /// Decay factor applied to text-sink entries.
    pub p: f64,
    /// Number of initial layers intervened on.
    pub layers: usize,
    /// Also scale visual-sink entries and hand their mass to non-sink text.
    pub drain_visual_sinks: bool,
}

impl Default for RecalConfig {
    fn default() -> Self {
        Self {
            rho: 0.4,
            alpha: 0.01,
            p: 0.6,
            layers: 16,
            drain_visual_sinks: false,
        }
    }
}

impl RecalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("alpha", self.alpha), ("p", self.p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-head row-stochastic attention maps of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensor {
    heads: Vec<Matrix>,
}

impl AttentionTensor {
    /// Validates shapes, non-negativity and unit row sums.
    pub fn new(heads: Vec<Matrix>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::InvalidInput("attention tensor needs at least one head".into()))?;
        let n = first.rows();
        for (h, m) in heads.iter().enumerate() {
            if m.rows() != n || m.cols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "head {h} is {}x{}, expected {n}x{n}",
                    m.rows(),
                    m.cols()
                )));
            }
            for q in 0..n {
                let row = m.row(q);
                if row.iter().any(|&v| v < 0.0) {
                    return Err(Error::InvalidInput(format!("head {h} row {q} has a negative entry")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidInput(format!("head {h} row {q} sums to {s}")));
                }
            }
        }
        Ok(Self { heads })
    }

    /// Skips validation; callers guarantee rows come from a softmax.
    pub(crate) fn from_softmax(heads: Vec<Matrix>) -> Self {
        Self { heads }
    }

    pub fn heads(&self) -> &[Matrix] {
        &self.heads
    }

    pub fn head(&self, h: usize) -> &Matrix {
        &self.heads[h]
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn tokens(&self) -> usize {
        self.heads[0].rows()
    }

    pub fn into_heads(self) -> Vec<Matrix> {
        self.heads
    }
}

/// Selected (head, query) pairs, sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSet {
    pub pairs: BTreeSet<(usize, usize)>,
}

impl SelectionSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, head: usize, query: usize) -> bool {
        self.pairs.contains(&(head, query))
    }
}

fn mass(row: &[f64], idx: impl IntoIterator<Item = usize>) -> f64 {
    idx.into_iter().map(|j| row[j]).sum()
}

/// Share of a row's visual attention that lands on visual sinks.
pub fn visual_sink_fraction(row: &[f64], s_v: &BTreeSet<usize>, v: &[usize], epsilon: f64) -> f64 {
    if s_v.is_empty() {
        return 0.0;
    }
    mass(row, s_v.iter().copied()) / (mass(row, v.iter().copied()) + epsilon)
}

/// Queries past the visual block: every position not labelled visual.
fn candidate_queries(modality: &ModalityMap) -> Vec<usize> {
    (0..modality.len()).filter(|&q| !modality.is_visual(q)).collect()
}

pub fn select_head_queries(
    a: &AttentionTensor,
    sinks: &SinkReport,
    modality: &ModalityMap,
    cfg: &RecalConfig,
    epsilon: f64,
) -> Result<SelectionSet> {
    if modality.len() != a.tokens() {
        return Err(Error::DimensionMismatch(format!(
            "modality map covers {} tokens, attention has {}",
            modality.len(),
            a.tokens()
        )));
    }
    let visual = modality.visual();
    let queries = candidate_queries(modality);
    let mut sel = SelectionSet::default();
    for (h, m) in a.heads().iter().enumerate() {
        for &q in &queries {
            let row = m.row(q);
            let c1 = visual_sink_fraction(row, &sinks.visual_sinks, &visual, epsilon) <= cfg.rho;
            let c2 = mass(row, visual.iter().copied()) >= cfg.alpha;
            if c1 && c2 {
                sel.pairs.insert((h, q));
            }
        }
    }
    Ok(sel)
}

/// Mass freed by decaying the sink entries of a row by `p`.
pub fn redistribution_budget(row: &[f64], s_t: &BTreeSet<usize>, p: f64) -> f64 {
    (1.0 - p) * mass(row, s_t.iter().copied())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowOutcome {
    pub row: Vec<f64>,
    pub budget: f64,
    /// Budget was positive but there was no non-sink text mass to receive
    /// it; the row is returned unchanged.
    pub starved: bool,
}

/// Decay `sinks` entries by `p` and hand the freed mass to `receivers`
/// proportionally to their current weights.
///
/// The share is normalised by the exact receiver mass, so the row sum is
/// conserved to rounding error.
pub fn redistribute_row(row: &[f64], sinks: &BTreeSet<usize>, receivers: &[usize], p: f64) -> RowOutcome {
    let budget = redistribution_budget(row, sinks, p);
    if p == 1.0 || sinks.is_empty() || budget == 0.0 {
        return RowOutcome {
            row: row.to_vec(),
            budget: 0.0,
            starved: false,
        };
    }
    let receiver_mass = mass(row, receivers.iter().copied());
    if receivers.is_empty() || receiver_mass <= 0.0 {
        return RowOutcome {
            row: row.to_vec(),
            budget,
            starved: true,
        };
    }
    let mut out = row.to_vec();
    for &j in sinks {
        out[j] = p * row[j];
    }
    for &j in receivers {
        out[j] = row[j] + budget * (row[j] / receiver_mass);
    }
    RowOutcome {
        row: out,
        budget,
        starved: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowBudget {
    pub head: usize,
    pub query: usize,
    pub omega: f64,
    pub starved: bool,
}

/// Everything one intervened layer produced, for diagnostics export.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerIntervention {
    pub attention: AttentionTensor,
    pub sinks: SinkReport,
    pub selection: SelectionSet,
    pub budgets: Vec<RowBudget>,
}

/// Detect sinks on `h`, select grounding head-queries and redistribute their
/// rows. Unselected rows are copied bit for bit.
pub fn igar_layer(
    a: &AttentionTensor,
    h: &Matrix,
    modality: &ModalityMap,
    sink_cfg: &SinkDetectConfig,
    recal_cfg: &RecalConfig,
) -> Result<LayerIntervention> {
    recal_cfg.validate()?;
    if h.rows() != a.tokens() {
        return Err(Error::DimensionMismatch(format!(
            "hidden states have {} tokens, attention has {}",
            h.rows(),
            a.tokens()
        )));
    }
    let sinks = detect_sinks(h, modality, sink_cfg)?;
    let selection = select_head_queries(a, &sinks, modality, recal_cfg, sink_cfg.epsilon)?;

    let drained: BTreeSet<usize> = if recal_cfg.drain_visual_sinks {
        sinks.text_sinks.union(&sinks.visual_sinks).copied().collect()
    } else {
        sinks.text_sinks.clone()
    };
    let receivers: Vec<usize> = modality
        .text()
        .into_iter()
        .filter(|j| !sinks.text_sinks.contains(j))
        .collect();

    let mut heads = a.heads().to_vec();
    let mut budgets = Vec::new();
    if !drained.is_empty() {
        for &(hd, q) in &selection.pairs {
            let out = redistribute_row(heads[hd].row(q), &drained, &receivers, recal_cfg.p);
            if out.budget > 0.0 || out.starved {
                budgets.push(RowBudget {
                    head: hd,
                    query: q,
                    omega: out.budget,
                    starved: out.starved,
                });
            }
            if out.starved {
                log::debug!("head {hd} query {q}: budget {} has no receivers", out.budget);
            }
            heads[hd].row_mut(q).copy_from_slice(&out.row);
        }
    }
    Ok(LayerIntervention {
        attention: AttentionTensor::from_softmax(heads),
        sinks,
        selection,
        budgets,
    })
}
