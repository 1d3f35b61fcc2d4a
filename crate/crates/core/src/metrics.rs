//! Grounding diagnostics: head-averaged attention, the instruction/visual
//! attention ratio, the grounding score and success-rate aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recal::AttentionTensor;
use crate::sink::ModalityMap;
use crate::tensor::Matrix;

/// Instruction variant a rollout was executed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Normal,
    V1,
    V2,
    V3,
    V4,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Normal, Variant::V1, Variant::V2, Variant::V3, Variant::V4];
    pub const CONTRADICTIONS: [Variant; 4] = [Variant::V1, Variant::V2, Variant::V3, Variant::V4];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Normal => "Normal",
            Variant::V1 => "V1",
            Variant::V2 => "V2",
            Variant::V3 => "V3",
            Variant::V4 => "V4",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRecord {
    pub episode: String,
    pub variant: Variant,
    /// Judged against the original instruction, whatever was executed.
    pub success: bool,
    pub steps: usize,
    /// Mean IVAR over the decoding steps; `None` when undefined at every step.
    pub ivar_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    /// Success rate in percent.
    pub sr: f64,
    /// `None` for the Normal row.
    pub lgs: Option<f64>,
    pub ivar_mean: Option<f64>,
    pub rollouts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub rows: Vec<VariantRow>,
    pub config_hash: String,
    pub seed: u64,
}

impl SuiteReport {
    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn sr(&self, v: Variant) -> Option<f64> {
        self.row(v).map(|r| r.sr)
    }

    pub fn lgs(&self, v: Variant) -> Option<f64> {
        self.row(v).and_then(|r| r.lgs)
    }

    pub fn with_meta(mut self, suite: &str, config_hash: &str, seed: u64) -> Self {
        self.suite = suite.to_string();
        self.config_hash = config_hash.to_string();
        self.seed = seed;
        self
    }

    pub const TABLE_HEADER: &'static str = "suite,variant,sr,lgs,ivar_mean,rollouts,seed";

    /// Comma-separated rows (no header). SR and LGS carry one decimal.
    pub fn table_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{:.1},{},{},{},{}",
                    self.suite,
                    r.variant,
                    r.sr,
                    r.lgs.map(|l| format!("{l:.1}")).unwrap_or_default(),
                    r.ivar_mean.map(|v| format!("{v:.4}")).unwrap_or_default(),
                    r.rollouts,
                    self.seed
                )
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from(Self::TABLE_HEADER);
        s.push('\n');
        for line in self.table_rows() {
            s.push_str(&line);
            s.push('\n');
        }
        s
    }
}

/// Mean of the per-head attention maps.
pub fn head_average(a: &AttentionTensor) -> Matrix {
    let n = a.tokens();
    let mut out = Matrix::zeros(n, n);
    for m in a.heads() {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    let h = a.num_heads() as f64;
    for o in out.data_mut() {
        *o /= h;
    }
    out
}

/// Text share of the (text + visual) attention mass of query row `s`.
pub fn ivar(a_bar: &Matrix, s: usize, modality: &ModalityMap) -> Result<f64> {
    if modality.len() != a_bar.cols() || s >= a_bar.rows() {
        return Err(Error::DimensionMismatch(format!(
            "query {s} / {} labels for a {}x{} map",
            modality.len(),
            a_bar.rows(),
            a_bar.cols()
        )));
    }
    let row = a_bar.row(s);
    let text: f64 = modality.text().iter().map(|&j| row[j]).sum();
    let visual: f64 = modality.visual().iter().map(|&j| row[j]).sum();
    let denom = text + visual;
    if denom <= 0.0 {
        return Err(Error::Undefined(format!("query {s} puts no mass on text or visual tokens")));
    }
    Ok(text / denom)
}

/// Arithmetic mean of IVAR over several action-query positions.
pub fn ivar_mean(a_bar: &Matrix, positions: &[usize], modality: &ModalityMap) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::InvalidInput("no action-query positions".into()));
    }
    let mut sum = 0.0;
    for &s in positions {
        sum += ivar(a_bar, s, modality)?;
    }
    Ok(sum / positions.len() as f64)
}

const LGS_SCALE: f64 = 1e6;

/// Grounding score `SR(normal) − SR(contradiction)` in percentage points.
///
/// Both inputs are snapped to a 1e-6 grid before subtracting so that values
/// written with one decimal (96.8 − 90.4) come out as the decimal result
/// (6.4) rather than its binary neighbour.
pub fn lgs(sr_normal: f64, sr_contra: f64) -> f64 {
    ((sr_normal * LGS_SCALE).round() - (sr_contra * LGS_SCALE).round()) / LGS_SCALE
}

/// Per-variant success rates, grounding scores and mean IVAR.
///
/// Records are sorted by (variant, episode) before any summation so the
/// result does not depend on arrival order.
pub fn aggregate(records: &[SuccessRecord]) -> Result<SuiteReport> {
    let mut sorted: Vec<&SuccessRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.variant.cmp(&b.variant).then_with(|| a.episode.cmp(&b.episode)));

    let mut groups: BTreeMap<Variant, Vec<&SuccessRecord>> = BTreeMap::new();
    for r in sorted {
        if let Some(v) = r.ivar_mean {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("episode {} has IVAR {v}", r.episode)));
            }
        }
        groups.entry(r.variant).or_default().push(r);
    }
    let normal_sr = match groups.get(&Variant::Normal) {
        Some(g) => success_rate(g),
        None => return Err(Error::MissingBaseline),
    };
    let rows = groups
        .iter()
        .map(|(&variant, g)| {
            let sr = success_rate(g);
            let ivars: Vec<f64> = g.iter().filter_map(|r| r.ivar_mean).collect();
            VariantRow {
                variant,
                sr,
                lgs: (variant != Variant::Normal).then(|| lgs(normal_sr, sr)),
                ivar_mean: (!ivars.is_empty()).then(|| ivars.iter().sum::<f64>() / ivars.len() as f64),
                rollouts: g.len(),
            }
        })
        .collect();
    Ok(SuiteReport {
        suite: String::new(),
        rows,
        config_hash: String::new(),
        seed: 0,
    })
}

fn success_rate(g: &[&SuccessRecord]) -> f64 {
    let wins = g.iter().filter(|r| r.success).count();
    100.0 * wins as f64 / g.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sink::Modality;

    fn tensor(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn head_average_examples() {
        let a = tensor(&[&[1.0, 0.0], &[0.3, 0.7]]);
        let b = tensor(&[&[0.0, 1.0], &[0.3, 0.7]]);
        let single = AttentionTensor::new(vec![a.clone()]).unwrap();
        assert_eq!(head_average(&single), a);
        let avg = head_average(&AttentionTensor::new(vec![a.clone(), b]).unwrap());
        assert_eq!(avg.row(0), &[0.5, 0.5]);
        let same = head_average(&AttentionTensor::new(vec![a.clone(), a.clone(), a.clone()]).unwrap());
        assert!(same.max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn ivar_examples() {
        let m = ModalityMap::new(vec![Modality::Other, Modality::Visual, Modality::Text, Modality::ActionQuery]);
        let a = Matrix::from_rows(&vec![vec![0.0, 0.0, 1.0, 0.0]; 4]).unwrap();
        assert_eq!(ivar(&a, 3, &m).unwrap(), 1.0);
        let b = Matrix::from_rows(&vec![vec![0.0, 1.0, 0.0, 0.0]; 4]).unwrap();
        assert_eq!(ivar(&b, 3, &m).unwrap(), 0.0);
        let c = Matrix::from_rows(&vec![vec![0.1, 0.6, 0.3, 0.0]; 4]).unwrap();
        assert!((ivar(&c, 3, &m).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let d = Matrix::from_rows(&vec![vec![0.5, 0.0, 0.0, 0.5]; 4]).unwrap();
        assert!(matches!(ivar(&d, 3, &m), Err(Error::Undefined(_))));
    }

    #[test]
    fn lgs_examples() {
        assert_eq!(lgs(96.8, 90.4), 6.4);
        assert_eq!(lgs(95.8, 36.4), 59.4);
        assert_eq!(lgs(70.0, 70.0), 0.0);
        assert_eq!(lgs(0.0, 100.0), -100.0);
    }

    fn rec(ep: &str, v: Variant, success: bool) -> SuccessRecord {
        SuccessRecord {
            episode: ep.into(),
            variant: v,
            success,
            steps: 2,
            ivar_mean: Some(0.25),
        }
    }

    #[test]
    fn aggregate_counts() {
        let mut records: Vec<_> = (0..50).map(|i| rec(&format!("n{i:02}"), Variant::Normal, i < 45)).collect();
        records.extend((0..50).map(|i| rec(&format!("a{i:02}"), Variant::V1, i < 45)));
        let r = aggregate(&records).unwrap();
        assert_eq!(r.sr(Variant::Normal), Some(90.0));
        assert_eq!(r.lgs(Variant::V1), Some(0.0));
        assert_eq!(r.row(Variant::Normal).unwrap().rollouts, 50);
    }

    #[test]
    fn aggregate_mixed_fixture_matches_tally() {
        let fixture = [
            ("e0", Variant::Normal, true),
            ("e1", Variant::Normal, true),
            ("e2", Variant::Normal, true),
            ("e3", Variant::Normal, false),
            ("e4", Variant::V1, true),
            ("e5", Variant::V1, false),
            ("e6", Variant::V1, false),
            ("e7", Variant::V4, false),
            ("e8", Variant::V4, false),
            ("e9", Variant::V4, true),
        ];
        let records: Vec<_> = fixture.iter().map(|&(e, v, s)| rec(e, v, s)).collect();
        // Tally by hand-rolled counting, independent of aggregate().
        let mut tally: BTreeMap<Variant, (usize, usize)> = BTreeMap::new();
        for &(_, v, s) in &fixture {
            let t = tally.entry(v).or_default();
            t.0 += s as usize;
            t.1 += 1;
        }
        let report = aggregate(&records).unwrap();
        for (v, (wins, n)) in tally {
            let expected = 100.0 * wins as f64 / n as f64;
            assert_eq!(report.sr(v), Some(expected));
        }
        assert_eq!(report.sr(Variant::Normal), Some(75.0));
        assert_eq!(report.lgs(Variant::V4), Some(lgs(75.0, 100.0 / 3.0)));
    }

    #[test]
    fn aggregate_requires_normal() {
        let records = vec![rec("x", Variant::V2, true)];
        assert_eq!(aggregate(&records).unwrap_err(), Error::MissingBaseline);
    }

    #[test]
    fn table_format() {
        let records = vec![rec("a", Variant::Normal, true), rec("b", Variant::V3, false)];
        let r = aggregate(&records).unwrap().with_meta("Object", "abc", 7);
        let t = r.to_table();
        assert_eq!(
            t,
            "suite,variant,sr,lgs,ivar_mean,rollouts,seed\nObject,Normal,100.0,,0.2500,1,7\nObject,V3,0.0,100.0,0.2500,1,7\n"
        );
    }
}
