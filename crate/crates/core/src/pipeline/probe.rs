use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::action::Action;
use crate::diffnet::{argmax, cosine_similarity};
use crate::model::{one_hot, ModelError, MuZeroModel, NetKind};
use crate::replay::GameSegment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTransition {
    pub obs: Vec<f64>,
    pub action: Action,
    pub next_obs: Vec<f64>,
    /// Chance outcome that followed the action, for stochastic models.
    pub chance: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

/// The first `limit` transitions of `segments`, in order.
pub fn probe_transitions<'a>(segments: impl IntoIterator<Item = &'a GameSegment>, limit: usize) -> Vec<ProbeTransition> {
    let mut out = Vec::with_capacity(limit);
    for seg in segments {
        for t in 0..seg.len() {
            if out.len() == limit {
                return out;
            }
            out.push(ProbeTransition {
                obs: seg.observations[t].clone(),
                action: seg.actions[t].clone(),
                next_obs: seg.observations[t + 1].clone(),
                chance: seg.chance_outcomes[t],
            });
        }
    }
    out
}

fn predicted_next(model: &MuZeroModel, tr: &ProbeTransition) -> Result<Vec<f64>, ModelError> {
    let latent = model.represent(&tr.obs)?;
    if model.has(NetKind::Dynamics) {
        return Ok(model.recurrent_inference(&latent, &tr.action)?.latent);
    }
    let Some(c) = model.shape().chance_dim else {
        return Err(ModelError::Missing(NetKind::Dynamics));
    };
    let after = model.afterstate_inference(&latent, &tr.action)?;
    let outcome = tr.chance.unwrap_or_else(|| argmax(&after.chance_logits).unwrap_or(0));
    Ok(model.chance_recurrent_inference(&after.afterstate, &one_hot(outcome, c))?.latent)
}

/// Cosine between the latent the model predicts for `(o_t, a_t)` and the
/// representation of `o_{t+1}`, over the probe set.
pub fn alignment_probe(model: &MuZeroModel, transitions: &[ProbeTransition]) -> Result<ProbeStats, PipelineError> {
    if transitions.is_empty() {
        return Err(PipelineError::EmptyProbe);
    }
    let mut cos = Vec::with_capacity(transitions.len());
    for tr in transitions {
        let predicted = predicted_next(model, tr)?;
        let actual = model.represent(&tr.next_obs)?;
        cos.push(cosine_similarity(&predicted, &actual).map_err(ModelError::from)?);
    }
    let n = cos.len() as f64;
    let mean = cos.iter().sum::<f64>() / n;
    let var = cos.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    Ok(ProbeStats {
        mean,
        std: var.sqrt(),
        min: cos.iter().copied().fold(f64::INFINITY, f64::min),
        max: cos.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: cos.len(),
    })
}
