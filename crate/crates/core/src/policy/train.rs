//! Shortcut dataset generation and plain mini-batch SGD.

use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, PolicySpec};
use super::tokenize::{tokenize, Token};
use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::world::{feasible, generate_scene, Action, Instruction, Scene, Suite, WorldState};

pub const BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub scene: Scene,
    pub state: WorldState,
    /// Possibly empty (instruction dropout).
    pub text: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub examples: Vec<Example>,
    pub dropout: f64,
}

/// Expert pick and place actions for a Normal instruction.
pub fn expert_actions(scene: &Scene, inst: &Instruction) -> Result<(Action, Action, usize)> {
    let op = inst.operand().ok_or_else(|| Error::InvalidInput("expert needs an operand".into()))?;
    let (t, r) = match (inst.target(), inst.relation()) {
        (Some(t), Some(r)) => (t, r),
        _ => return Err(Error::InvalidInput("expert needs a target clause".into())),
    };
    let obj = scene.objects.iter().position(|o| op.matches(o)).ok_or_else(|| Error::InvalidInput("operand absent".into()))?;
    let loc = scene.locations.iter().position(|l| t.matches(l)).ok_or_else(|| Error::InvalidInput("target absent".into()))?;
    let oslot = scene.object_slots().iter().position(|&i| i == obj).unwrap();
    let lslot = scene.location_slots().iter().position(|&i| i == loc).unwrap();
    Ok((Action::Pick(oslot), Action::Place(lslot, r), obj))
}

impl ToyDataset {
    /// Two examples (pick step, place step) per generated scene. The
    /// instruction text is dropped with probability `dropout`; since the
    /// instructed object is always the most salient one, the visual
    /// shortcut alone explains every label.
    pub fn generate(scenes: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&dropout) {
            return Err(Error::InvalidInput(format!("dropout {dropout} outside [0,1]")));
        }
        let mut examples = Vec::with_capacity(2 * scenes);
        for _ in 0..scenes {
            let suite = Suite::ALL[rng.below(3)];
            let (scene, inst) = generate_scene(suite, rng);
            debug_assert!(feasible(&scene, &inst));
            let (pick, place, obj) = expert_actions(&scene, &inst)?;
            let text = if rng.next_f64() < dropout { String::new() } else { inst.render() };
            examples.push(Example { scene: scene.clone(), state: WorldState::new(), text: text.clone(), action: pick });
            let held = WorldState { held: Some(obj), placements: Vec::new() };
            examples.push(Example { scene, state: held, text, action: place });
        }
        Ok(Self { examples, dropout })
    }

    fn tokenized(&self) -> Vec<(Vec<Token>, usize)> {
        self.examples
            .iter()
            .map(|e| (tokenize(&e.scene, &e.state, &e.text).tokens, e.action.index()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean loss of `spec` over the whole dataset.
pub fn dataset_loss(spec: &PolicySpec, data: &ToyDataset) -> Result<f64> {
    let toks = data.tokenized();
    let mut sum = 0.0;
    for (t, a) in &toks {
        sum += super::model::cross_entropy(&super::model::forward(spec, t, &modality_of(t), None)?.logits, *a);
    }
    Ok(sum / toks.len().max(1) as f64)
}

fn modality_of(t: &[Token]) -> crate::sink::ModalityMap {
    crate::sink::ModalityMap::new(vec![crate::sink::Modality::Other; t.len()])
}

/// Cross-entropy minimisation by plain mini-batch SGD with full
/// backpropagation. Examples are reshuffled every epoch.
pub fn train(spec: &PolicySpec, data: &ToyDataset, lr: f64, epochs: usize, rng: &mut Rng) -> Result<(PolicySpec, TrainReport)> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidInput(format!("learning rate {lr} must be finite and non-negative")));
    }
    if epochs == 0 {
        return Err(Error::InvalidInput("epochs must be at least 1".into()));
    }
    if data.examples.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let toks = data.tokenized();
    let mut spec = spec.clone();
    let mut order: Vec<usize> = (0..toks.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(BATCH_SIZE) {
            let mut acc: Option<PolicySpec> = None;
            for &i in batch {
                let (loss, g) = loss_and_grad(&spec, &toks[i].0, toks[i].1).map_err(|e| match e {
                    Error::InvalidInput(m) if m.contains("non-finite") => Error::Divergence { epoch, loss: f64::NAN },
                    e => e,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, loss });
                }
                total += loss;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (dst, src) in a.params_mut().into_iter().zip(g.params()) {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            let step = lr / batch.len() as f64;
            let acc = acc.expect("non-empty batch");
            for (w, g) in spec.params_mut().into_iter().zip(acc.params()) {
                for (wv, gv) in w.iter_mut().zip(g) {
                    *wv -= step * gv;
                }
            }
            if !spec.all_finite() {
                return Err(Error::Divergence { epoch, loss: f64::NAN });
            }
        }
        let mean = total / toks.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        if let Some(&prev) = losses.last() {
            if mean > prev * 1.05 {
                log::warn!("epoch {epoch}: loss rose from {prev:.4} to {mean:.4}");
            }
        }
        log::info!("epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    Ok((spec, TrainReport { epoch_losses: losses }))
}
