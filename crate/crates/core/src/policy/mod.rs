//! Miniature attention policy over tokenised scenes and instructions.

pub mod io;
pub mod model;
pub mod sink_policy;
pub mod tokenize;
pub mod train;

pub use model::{forward, gradient_check, Arch, ForwardTrace, Intervention, LayerReport, PolicySpec};
pub use sink_policy::build_sink_policy;
pub use tokenize::{tokenize, Token, TokenizedInput};
pub use train::{train, ToyDataset, TrainReport};

use crate::error::{Error, Result};
use crate::world::{Action, Decision, Observation, Policy};

/// A `PolicySpec` bound to an optional intervention, usable in rollouts.
#[derive(Debug, Clone, Copy)]
pub struct MiniVla<'a> {
    pub spec: &'a PolicySpec,
    pub intervention: Option<Intervention>,
}

impl<'a> MiniVla<'a> {
    pub fn new(spec: &'a PolicySpec, intervention: Option<Intervention>) -> Self {
        if let Some(iv) = intervention {
            if iv.recal.layers > spec.arch.layers {
                log::warn!(
                    "intervention requested on {} layers; policy has {}, clamping",
                    iv.recal.layers,
                    spec.arch.layers
                );
            }
        }
        Self { spec, intervention }
    }

    pub fn trace(&self, obs: &Observation<'_>) -> Result<(TokenizedInput, ForwardTrace)> {
        let input = tokenize(obs.scene, obs.state, obs.text);
        let modality = self.spec.modality(&input);
        let trace = forward(self.spec, &input.tokens, &modality, self.intervention.as_ref())?;
        Ok((input, trace))
    }
}

impl Policy for MiniVla<'_> {
    fn decide(&self, obs: &Observation<'_>) -> Result<Decision> {
        let (_, trace) = self.trace(obs)?;
        let action = Action::from_index(trace.action)
            .ok_or_else(|| Error::InvalidInput(format!("policy emitted action index {}", trace.action)))?;
        let ivar = match trace.ivar() {
            Ok(v) => Some(v),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Decision { action, ivar })
    }
}
