//! One-axis hyperparameter sweeps over the recalibration settings.

use igar_core::policy::PolicySpec;

use crate::config::{RunConfig, SweepSpec};
use crate::run::{run_with, LoadedSuite, RunOutput};
use crate::HarnessError;

pub const SWEEP_HEADER: &str = "axis,value,suite,variant,sr,lgs,ivar_mean,rollouts";

#[derive(Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub result: Result<RunOutput, HarnessError>,
}

#[derive(Debug)]
pub struct SweepReport {
    pub spec: SweepSpec,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Long-format table, one row per (grid value, suite, variant). Failed
    /// grid points contribute no rows.
    pub fn table(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for p in &self.points {
            let Ok(out) = &p.result else { continue };
            for r in &out.reports {
                for row in &r.rows {
                    s.push_str(&format!(
                        "{},{},{},{},{:.1},{},{},{}\n",
                        self.spec.axis,
                        p.value,
                        r.suite,
                        row.variant,
                        row.sr,
                        row.lgs.map(|l| format!("{l:.1}")).unwrap_or_default(),
                        row.ivar_mean.map(|v| format!("{v:.4}")).unwrap_or_default(),
                        row.rollouts
                    ));
                }
            }
        }
        s
    }

    pub fn point(&self, value: f64) -> Option<&RunOutput> {
        self.points.iter().find(|p| p.value == value).and_then(|p| p.result.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = (f64, &HarnessError)> {
        self.points.iter().filter_map(|p| p.result.as_ref().err().map(|e| (p.value, e)))
    }
}

/// Runs `base` once per grid value with the intervention switched on.
/// A failing grid point is kept as an error; the others still run.
pub fn sweep(spec: &SweepSpec, base: &RunConfig, policy: &PolicySpec, suites: &[LoadedSuite]) -> Result<SweepReport, HarnessError> {
    spec.validate()?;
    base.validate()?;
    let points = spec
        .values
        .iter()
        .map(|&value| {
            let cfg = spec.apply(base, value);
            log::info!("sweep {} = {value}", spec.axis);
            SweepPoint { value, result: run_with(&cfg, policy, suites) }
        })
        .collect();
    Ok(SweepReport { spec: spec.clone(), points })
}
