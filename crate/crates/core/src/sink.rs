//! Attention-sink token detection from hidden-state activation spikes.
//!
//! A sink is a token whose activation on one of a handful of "spike"
//! feature dimensions exceeds a fixed threshold. Spike dimensions are those
//! whose peak absolute activation is far above their mean absolute
//! activation, i.e. dimensions where very few tokens carry almost all of the
//! magnitude. Detected sinks are split by modality so the recalibration step
//! can treat visual and text sinks differently.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Visual,
    Text,
    ActionQuery,
    Other,
}

/// Per-token modality labels for one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMap {
    labels: Vec<Modality>,
}

impl ModalityMap {
    pub fn new(labels: Vec<Modality>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Modality] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Modality {
        self.labels[i]
    }

    pub fn relabel(&mut self, i: usize, m: Modality) {
        self.labels[i] = m;
    }

    pub fn indices_of(&self, m: Modality) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn visual(&self) -> Vec<usize> {
        self.indices_of(Modality::Visual)
    }

    pub fn text(&self) -> Vec<usize> {
        self.indices_of(Modality::Text)
    }

    pub fn action_queries(&self) -> Vec<usize> {
        self.indices_of(Modality::ActionQuery)
    }

    pub fn is_visual(&self, i: usize) -> bool {
        self.labels[i] == Modality::Visual
    }

    pub fn is_text(&self, i: usize) -> bool {
        self.labels[i] == Modality::Text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkDetectConfig {
    /// Spike-ratio threshold a dimension must exceed.
    pub gamma: f64,
    /// Maximum number of spike dimensions kept.
    pub k: usize,
    /// Activation magnitude a token needs on a spike dimension to be a sink.
    pub tau: f64,
    /// Denominator stabiliser, also reused by head selection.
    pub epsilon: f64,
}

impl Default for SinkDetectConfig {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            k: 5,
            tau: 20.0,
            epsilon: 1e-6,
        }
    }
}

impl SinkDetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0) || self.k == 0 || !(self.tau > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sink config requires gamma > 1, k >= 1, tau > 0, epsilon > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub spike_dims: Vec<usize>,
    pub sinks: BTreeSet<usize>,
    pub visual_sinks: BTreeSet<usize>,
    pub text_sinks: BTreeSet<usize>,
    /// Peak |H| over the spike dimensions for every token (0 when there are
    /// no spike dimensions).
    pub peak_activation: Vec<f64>,
}

impl SinkReport {
    pub fn empty(tokens: usize) -> Self {
        Self {
            spike_dims: Vec::new(),
            sinks: BTreeSet::new(),
            visual_sinks: BTreeSet::new(),
            text_sinks: BTreeSet::new(),
            peak_activation: vec![0.0; tokens],
        }
    }

    /// One record per token, for diagnostics export.
    pub fn records(&self, modality: &ModalityMap) -> Vec<SinkTokenRecord> {
        self.peak_activation
            .iter()
            .enumerate()
            .map(|(i, &peak)| SinkTokenRecord {
                token: i,
                modality: modality.label(i),
                peak_activation: peak,
                sink: self.sinks.contains(&i),
                visual_sink: self.visual_sinks.contains(&i),
                text_sink: self.text_sinks.contains(&i),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkTokenRecord {
    pub token: usize,
    pub modality: Modality,
    pub peak_activation: f64,
    pub sink: bool,
    pub visual_sink: bool,
    pub text_sink: bool,
}

/// Root-mean-square activation of every token.
pub fn rms_norms(h: &Matrix) -> Vec<f64> {
    let d = h.cols() as f64;
    (0..h.rows())
        .map(|i| (h.row(i).iter().map(|v| v * v).sum::<f64>() / d).sqrt())
        .collect()
}

/// Peak-over-mean absolute activation of every feature dimension.
pub fn spike_ratios(h: &Matrix, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be > 0, got {epsilon}")));
    }
    let n = h.rows() as f64;
    let mut max = vec![0.0f64; h.cols()];
    let mut sum = vec![0.0f64; h.cols()];
    for i in 0..h.rows() {
        for (d, v) in h.row(i).iter().enumerate() {
            let a = v.abs();
            max[d] = max[d].max(a);
            sum[d] += a;
        }
    }
    Ok(max
        .iter()
        .zip(&sum)
        .map(|(m, s)| m / (s / n + epsilon))
        .collect())
}

/// Dimensions with ratio strictly above `gamma`, highest ratio first (lower
/// index wins ties), truncated to `k`.
pub fn select_spike_dims(phi: &[f64], gamma: f64, k: usize) -> Vec<usize> {
    let mut dims: Vec<usize> = (0..phi.len()).filter(|&d| phi[d] > gamma).collect();
    dims.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    dims.truncate(k);
    dims
}

/// Classify sink tokens and split them by modality.
pub fn detect_sinks(h: &Matrix, modality: &ModalityMap, cfg: &SinkDetectConfig) -> Result<SinkReport> {
    cfg.validate()?;
    if modality.len() != h.rows() {
        return Err(Error::DimensionMismatch(format!(
            "modality map covers {} tokens, hidden states have {}",
            modality.len(),
            h.rows()
        )));
    }
    let phi = spike_ratios(h, cfg.epsilon)?;
    let spike_dims = select_spike_dims(&phi, cfg.gamma, cfg.k);
    let mut report = SinkReport::empty(h.rows());
    for i in 0..h.rows() {
        let peak = spike_dims
            .iter()
            .map(|&d| h.get(i, d).abs())
            .fold(0.0, f64::max);
        report.peak_activation[i] = peak;
        if !spike_dims.is_empty() && peak > cfg.tau {
            report.sinks.insert(i);
            match modality.label(i) {
                Modality::Visual => {
                    report.visual_sinks.insert(i);
                }
                Modality::Text => {
                    report.text_sinks.insert(i);
                }
                Modality::ActionQuery | Modality::Other => {}
            }
        }
    }
    report.spike_dims = spike_dims;
    Ok(report)
}
