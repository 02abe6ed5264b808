//! Unrolled multi-step loss with hand-written backpropagation through the
//! model, gradient clipping and the learner iteration.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, PolicyKind, LOG_STD_MAX, LOG_STD_MIN};
use crate::diffnet::{
    cosine_similarity_grad, cross_entropy, log_softmax, DiffnetError, ForwardCache, OptimizerConfig,
    OptimizerState, ParamStore,
};
use crate::explore::{ExploreError, RndModule};
use crate::model::{one_hot, EmbeddingBranch, ModelError, MuZeroModel, NetKind};
use crate::replay::{PolicyTarget, ReplayBuffer, ReplayError, Sample, TransitionBatch};
use crate::search::SearchConfig;

/// Share of the gradient passed from a dynamics step back into the latent
/// that fed it.
pub const DYNAMICS_GRAD_SCALE: f64 = 0.5;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] DiffnetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error("non-finite {what} at sample {sample}, unroll step {step}")]
    NonFinite {
        what: &'static str,
        sample: usize,
        step: usize,
    },
    #[error("sample {sample} has {got} targets, expected {expected}")]
    UnrollMismatch { sample: usize, expected: usize, got: usize },
    #[error("policy target does not match a {0:?} head")]
    PolicyTarget(PolicyKind),
    #[error("buffer holds {have} transitions, training needs {need}")]
    Cold { have: usize, need: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    pub consistency: f64,
    pub entropy: f64,
    /// Chance-outcome cross entropy and afterstate value, stochastic models
    /// only.
    pub chance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            policy: 1.0,
            value: 1.0,
            reward: 1.0,
            consistency: 0.0,
            entropy: 0.0,
            chance: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.policy, self.value, self.reward, self.consistency, self.entropy, self.chance];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err("loss weights must be finite and non-negative".into())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    /// Buffer warm-up; `2 * batch_size` when unset.
    pub min_transitions: Option<usize>,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            min_transitions: None,
            max_grad_norm: 10.0,
            optimizer: OptimizerConfig::adam(3e-3),
            weights: LossWeights::default(),
        }
    }
}

impl TrainerConfig {
    pub fn warmup(&self) -> usize {
        self.min_transitions.unwrap_or(2 * self.batch_size)
    }
}

/// Batch loss components. Each is averaged over the batch with importance
/// weights and unroll scaling applied, before the loss weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    pub consistency: f64,
    pub entropy: f64,
    pub chance: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// `|value_target - v|` at the first unroll step, per sample.
    pub td_errors: Vec<f64>,
    /// Consistency terms dropped because an embedding had zero norm.
    pub zero_norm_skips: usize,
}

/// Per-network gradients laid out like [`MuZeroModel::nets`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub nets: Vec<ParamStore>,
}

impl ModelGrads {
    pub fn zeros(model: &MuZeroModel) -> Self {
        Self {
            nets: model.nets().iter().map(|n| n.params().zeros_like()).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.nets.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.nets.iter_mut().for_each(|g| g.scale(factor));
    }

    pub fn flat(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
    }
}

/// Rescales `grads` to norm `max_norm` when larger; returns the norm before.
pub fn clip_grad_norm(grads: &mut ModelGrads, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Policy cross entropy against a stored target, with its logits gradient.
pub fn policy_loss(policy: PolicyKind, target: &PolicyTarget, logits: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
    let bad = || TrainError::PolicyTarget(policy);
    match (policy, target) {
        (PolicyKind::Gaussian { dims }, PolicyTarget::Sampled { actions, probs }) => {
            let mut loss = 0.0;
            let mut grad = vec![0.0; 2 * dims];
            for (a, p) in actions.iter().zip(probs) {
                let Action::Continuous(a) = a else { return Err(bad()) };
                if a.len() != dims {
                    return Err(bad());
                }
                for d in 0..dims {
                    let (mean, raw) = (logits[d], logits[dims + d]);
                    let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                    let z2 = ((a[d] - mean) / ls.exp()).powi(2);
                    loss += p * (0.5 * z2 + ls + HALF_LN_2PI);
                    grad[d] -= p * (a[d] - mean) / (2.0 * ls).exp();
                    if raw > LOG_STD_MIN && raw < LOG_STD_MAX {
                        grad[dims + d] += p * (1.0 - z2);
                    }
                }
            }
            Ok((loss, grad))
        }
        (PolicyKind::Gaussian { .. }, PolicyTarget::Dense(_)) => Err(bad()),
        (_, target) => {
            let n = policy.joint_actions().expect("discrete policy");
            let dense = match target {
                PolicyTarget::Dense(p) if p.len() == n => p.clone(),
                PolicyTarget::Dense(_) => return Err(bad()),
                PolicyTarget::Sampled { actions, probs } => {
                    let mut d = vec![0.0; n];
                    for (a, p) in actions.iter().zip(probs) {
                        match a.index() {
                            Some(i) if i < n => d[i] += p,
                            _ => return Err(bad()),
                        }
                    }
                    d
                }
            };
            match policy {
                PolicyKind::Factored { dims, bins } => {
                    // The joint log-probability is a sum over dimensions, so
                    // the cross entropy splits into per-dimension marginals.
                    let mut marginals = vec![vec![0.0; bins]; dims];
                    for (j, p) in dense.iter().enumerate() {
                        for (d, b) in policy.joint_to_bins(j).into_iter().enumerate() {
                            marginals[d][b] += p;
                        }
                    }
                    let mut loss = 0.0;
                    let mut grad = Vec::with_capacity(dims * bins);
                    for (m, chunk) in marginals.iter().zip(logits.chunks(bins)) {
                        let (l, g) = cross_entropy(m, chunk)?;
                        loss += l;
                        grad.extend(g);
                    }
                    Ok((loss, grad))
                }
                _ => Ok(cross_entropy(&dense, logits)?),
            }
        }
    }
}

/// Entropy of the policy head and its logits gradient.
pub fn policy_head_entropy(policy: PolicyKind, logits: &[f64]) -> (f64, Vec<f64>) {
    fn categorical(logits: &[f64]) -> (f64, Vec<f64>) {
        let lp = log_softmax(logits);
        let h = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
        (h, lp.iter().map(|l| -l.exp() * (l + h)).collect())
    }
    match policy {
        PolicyKind::Categorical { .. } => categorical(logits),
        PolicyKind::Factored { bins, .. } => {
            let mut h = 0.0;
            let mut grad = Vec::with_capacity(logits.len());
            for chunk in logits.chunks(bins) {
                let (hc, g) = categorical(chunk);
                h += hc;
                grad.extend(g);
            }
            (h, grad)
        }
        PolicyKind::Gaussian { dims } => {
            let mut h = 0.0;
            let mut grad = vec![0.0; 2 * dims];
            for d in 0..dims {
                let raw = logits[dims + d];
                h += raw.clamp(LOG_STD_MIN, LOG_STD_MAX) + 0.5 + HALF_LN_2PI;
                if raw > LOG_STD_MIN && raw < LOG_STD_MAX {
                    grad[dims + d] = 1.0;
                }
            }
            (h, grad)
        }
    }
}

struct Transition {
    cache: ForwardCache,
    afterstate: Option<AfterstateStep>,
}

struct AfterstateStep {
    dyn_cache: ForwardCache,
    pred_cache: ForwardCache,
    raw_pred_grad: Vec<f64>,
}

struct Consistency {
    proj_cache: ForwardCache,
    head_cache: ForwardCache,
    grad: Vec<f64>,
}

struct Step {
    latent: Vec<f64>,
    pred_cache: ForwardCache,
    raw_pred_grad: Vec<f64>,
    /// How this latent was produced; `None` at the first step.
    transition: Option<(Transition, Vec<f64>)>,
    consistency: Option<Consistency>,
}

#[derive(Default)]
struct Totals {
    policy: f64,
    value: f64,
    reward: f64,
    consistency: f64,
    entropy: f64,
    chance: f64,
    zero_norm_skips: usize,
}

fn index(model: &MuZeroModel, kind: NetKind) -> Result<usize, TrainError> {
    model.index_of(kind).ok_or(TrainError::Model(ModelError::Missing(kind)))
}

fn finite(x: f64, what: &'static str, sample: usize, step: usize) -> Result<f64, TrainError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(TrainError::NonFinite { what, sample, step })
    }
}

struct Ctx<'a> {
    model: &'a MuZeroModel,
    /// Supplies the consistency targets, which are constants to the loss.
    frozen: &'a MuZeroModel,
    weights: &'a LossWeights,
    unroll: usize,
    discount: f64,
    dynamics_grad_scale: f64,
}

impl Ctx<'_> {
    fn step_scale(&self, u: usize) -> f64 {
        if u == 0 {
            1.0
        } else {
            1.0 / self.unroll as f64
        }
    }

    /// Adds one sample's loss (scaled by `sw`) to `totals` and its gradient
    /// to `grads`; returns the first-step TD error.
    fn sample(
        &self,
        k: usize,
        s: &Sample,
        sw: f64,
        totals: &mut Totals,
        grads: &mut ModelGrads,
    ) -> Result<f64, TrainError> {
        let m = self.model;
        let w = self.weights;
        let policy = m.shape().policy;
        let latent_dim = m.latent_dim();
        let stochastic = m.has(NetKind::AfterstateDynamics);
        let use_ssl = w.consistency > 0.0 && self.unroll > 0;
        let repr = m.net(NetKind::Representation)?;
        let pred = m.net(NetKind::Prediction)?;
        let (latent0, repr_cache) = repr.forward(&s.observation)?;

        let mut steps: Vec<Step> = Vec::with_capacity(self.unroll + 1);
        let mut td = 0.0;
        for u in 0..=self.unroll {
            let sc = sw * self.step_scale(u);
            let target = &s.targets[u];
            let (latent, transition, reward_hat) = if u == 0 {
                (latent0.clone(), None, 0.0)
            } else {
                let prev = &steps[u - 1].latent;
                let mut input = prev.clone();
                input.extend(m.encode_action(&s.actions[u - 1])?);
                if stochastic {
                    let (afterstate, dyn_cache) = m.net(NetKind::AfterstateDynamics)?.forward(&input)?;
                    let (araw, pred_cache) = m.net(NetKind::AfterstatePrediction)?.forward(&afterstate)?;
                    let mut raw_pred_grad = vec![0.0; araw.len()];
                    let v_as = m.squash_value(araw[0]);
                    if target.value_mask {
                        let z_as = target.reward + self.discount * target.value;
                        let l = (v_as - z_as).powi(2);
                        totals.chance += sc * finite(l, "afterstate value", k, u)?;
                        raw_pred_grad[0] = w.chance * sc * 2.0 * (v_as - z_as) * m.value_derivative(v_as);
                    }
                    let code = s.chance_outcomes[u - 1].unwrap_or(0);
                    let c = araw.len() - 1;
                    if let Some(o) = s.chance_outcomes[u - 1] {
                        let (l, g) = cross_entropy(&one_hot(o, c), &araw[1..])?;
                        totals.chance += sc * finite(l, "chance loss", k, u)?;
                        for (dst, gi) in raw_pred_grad[1..].iter_mut().zip(g) {
                            *dst = w.chance * sc * gi;
                        }
                    }
                    let mut cin = afterstate;
                    cin.extend(one_hot(code, c));
                    let (raw, cache) = m.net(NetKind::ChanceDynamics)?.forward(&cin)?;
                    let next: Vec<f64> = raw[..latent_dim].iter().map(|x| x.tanh()).collect();
                    let t = Transition {
                        cache,
                        afterstate: Some(AfterstateStep {
                            dyn_cache,
                            pred_cache,
                            raw_pred_grad,
                        }),
                    };
                    (next, Some(t), raw[latent_dim])
                } else {
                    let (raw, cache) = m.net(NetKind::Dynamics)?.forward(&input)?;
                    let next: Vec<f64> = raw[..latent_dim].iter().map(|x| x.tanh()).collect();
                    (next, Some(Transition { cache, afterstate: None }), raw[latent_dim])
                }
            };
            let transition = match transition {
                Some(t) => {
                    let l = (reward_hat - target.reward).powi(2);
                    totals.reward += sc * finite(l, "reward loss", k, u)?;
                    Some((t, vec![w.reward * sc * 2.0 * (reward_hat - target.reward)]))
                }
                None => None,
            };

            let (raw, pred_cache) = pred.forward(&latent)?;
            let (logits, value) = m.split_prediction(&raw);
            let mut raw_pred_grad = vec![0.0; raw.len()];
            if target.policy_mask {
                let (l, g) = policy_loss(policy, &target.policy, &logits)?;
                totals.policy += sc * finite(l, "policy loss", k, u)?;
                for (dst, gi) in raw_pred_grad.iter_mut().zip(g) {
                    *dst += w.policy * sc * gi;
                }
                if w.entropy > 0.0 {
                    let (h, g) = policy_head_entropy(policy, &logits);
                    totals.entropy += sc * h;
                    for (dst, gi) in raw_pred_grad.iter_mut().zip(g) {
                        *dst -= w.entropy * sc * gi;
                    }
                }
            }
            if target.value_mask {
                let l = (value - target.value).powi(2);
                totals.value += sc * finite(l, "value loss", k, u)?;
                raw_pred_grad[logits.len()] = w.value * sc * 2.0 * (value - target.value) * m.value_derivative(value);
            }
            if u == 0 {
                td = (target.value - value).abs();
            }

            let mut consistency = None;
            if use_ssl && u > 0 {
                if let Some(next_obs) = &s.next_observations[u - 1] {
                    let proj = m.net(NetKind::Projection)?;
                    let head = m.net(NetKind::ProjectionHead)?;
                    let target_embed = self.frozen.ssl_embed(&self.frozen.represent(next_obs)?, EmbeddingBranch::Target)?;
                    let (projected, proj_cache) = proj.forward(&latent)?;
                    let (online, head_cache) = head.forward(&projected)?;
                    match cosine_similarity_grad(&online, &target_embed) {
                        Ok((cos, g)) => {
                            totals.consistency -= sc * cos;
                            consistency = Some(Consistency {
                                proj_cache,
                                head_cache,
                                grad: g.iter().map(|x| -w.consistency * sc * x).collect(),
                            });
                        }
                        Err(DiffnetError::ZeroNorm) => totals.zero_norm_skips += 1,
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            steps.push(Step {
                latent,
                pred_cache,
                raw_pred_grad,
                transition,
                consistency,
            });
        }

        let i_repr = index(m, NetKind::Representation)?;
        let i_pred = index(m, NetKind::Prediction)?;
        let mut carry = vec![0.0; latent_dim];
        for u in (0..=self.unroll).rev() {
            let step = &steps[u];
            let mut g = carry;
            let gp = pred.backward_into(&step.pred_cache, &step.raw_pred_grad, &mut grads.nets[i_pred])?;
            g.iter_mut().zip(gp).for_each(|(a, b)| *a += b);
            if let Some(c) = &step.consistency {
                let i_proj = index(m, NetKind::Projection)?;
                let i_head = index(m, NetKind::ProjectionHead)?;
                let gh = m
                    .net(NetKind::ProjectionHead)?
                    .backward_into(&c.head_cache, &c.grad, &mut grads.nets[i_head])?;
                let gl = m
                    .net(NetKind::Projection)?
                    .backward_into(&c.proj_cache, &gh, &mut grads.nets[i_proj])?;
                g.iter_mut().zip(gl).for_each(|(a, b)| *a += b);
            }
            let Some((t, reward_grad)) = &step.transition else {
                repr.backward_into(&repr_cache, &g, &mut grads.nets[i_repr])?;
                break;
            };
            let mut raw_grad: Vec<f64> = g.iter().zip(&step.latent).map(|(gi, s)| gi * (1.0 - s * s)).collect();
            raw_grad.push(reward_grad[0]);
            let input_grad = match &t.afterstate {
                None => {
                    let i_dyn = index(m, NetKind::Dynamics)?;
                    m.net(NetKind::Dynamics)?
                        .backward_into(&t.cache, &raw_grad, &mut grads.nets[i_dyn])?
                }
                Some(a) => {
                    let i_c = index(m, NetKind::ChanceDynamics)?;
                    let i_ap = index(m, NetKind::AfterstatePrediction)?;
                    let i_ad = index(m, NetKind::AfterstateDynamics)?;
                    let gc = m
                        .net(NetKind::ChanceDynamics)?
                        .backward_into(&t.cache, &raw_grad, &mut grads.nets[i_c])?;
                    let mut g_as = gc[..latent_dim].to_vec();
                    let gap = m
                        .net(NetKind::AfterstatePrediction)?
                        .backward_into(&a.pred_cache, &a.raw_pred_grad, &mut grads.nets[i_ap])?;
                    g_as.iter_mut().zip(gap).for_each(|(x, y)| *x += y);
                    m.net(NetKind::AfterstateDynamics)?
                        .backward_into(&a.dyn_cache, &g_as, &mut grads.nets[i_ad])?
                }
            };
            carry = input_grad[..latent_dim].iter().map(|x| self.dynamics_grad_scale * x).collect();
        }
        Ok(td)
    }
}

/// Unroll depth the model supports: `unroll_steps` with a dynamics path,
/// 0 without one.
pub fn effective_unroll(model: &MuZeroModel, unroll_steps: usize) -> usize {
    if model.has(NetKind::Dynamics) || model.has(NetKind::AfterstateDynamics) {
        unroll_steps
    } else {
        0
    }
}

/// Importance-weighted batch loss and its exact gradient. Consistency
/// targets are stop-gradient.
pub fn unrolled_loss(
    model: &MuZeroModel,
    batch: &TransitionBatch,
    weights: &LossWeights,
    unroll_steps: usize,
    discount: f64,
) -> Result<(LossBreakdown, ModelGrads), TrainError> {
    unrolled_loss_with(model, model, batch, weights, unroll_steps, discount, DYNAMICS_GRAD_SCALE)
}

/// As [`unrolled_loss`], with consistency targets computed by `frozen` and
/// an explicit dynamics gradient scale (1 gives the plain loss gradient).
pub fn unrolled_loss_with(
    model: &MuZeroModel,
    frozen: &MuZeroModel,
    batch: &TransitionBatch,
    weights: &LossWeights,
    unroll_steps: usize,
    discount: f64,
    dynamics_grad_scale: f64,
) -> Result<(LossBreakdown, ModelGrads), TrainError> {
    let unroll = effective_unroll(model, unroll_steps);
    let ctx = Ctx {
        model,
        frozen,
        weights,
        unroll,
        discount,
        dynamics_grad_scale,
    };
    let mut grads = ModelGrads::zeros(model);
    let mut totals = Totals::default();
    let mut td_errors = Vec::with_capacity(batch.len());
    let n = batch.len().max(1) as f64;
    for (k, s) in batch.samples.iter().enumerate() {
        if s.targets.len() < unroll + 1 || s.actions.len() < unroll {
            return Err(TrainError::UnrollMismatch {
                sample: k,
                expected: unroll_steps + 1,
                got: s.targets.len(),
            });
        }
        td_errors.push(ctx.sample(k, s, s.weight / n, &mut totals, &mut grads)?);
    }
    let total = weights.policy * totals.policy + weights.value * totals.value + weights.reward * totals.reward
        + weights.consistency * totals.consistency
        + weights.chance * totals.chance
        - weights.entropy * totals.entropy;
    let breakdown = LossBreakdown {
        total: finite(total, "total loss", 0, 0)?,
        policy: totals.policy,
        value: totals.value,
        reward: totals.reward,
        consistency: totals.consistency,
        entropy: totals.entropy,
        chance: totals.chance,
        grad_norm: grads.norm(),
        td_errors,
        zero_norm_skips: totals.zero_norm_skips,
    };
    Ok((breakdown, grads))
}

/// Optimiser state and iteration counter owned by the learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub optimizer: OptimizerState,
    pub step: u64,
}

impl Learner {
    pub fn new(model: &MuZeroModel, optimizer: OptimizerConfig) -> Self {
        Self {
            optimizer: OptimizerState::new(optimizer, model.param_count()),
            step: 0,
        }
    }

    /// Clips `grads` and applies one optimiser step; returns the norm before
    /// clipping.
    pub fn apply(&mut self, model: &mut MuZeroModel, mut grads: ModelGrads, max_norm: f64) -> Result<f64, TrainError> {
        let norm = clip_grad_norm(&mut grads, max_norm);
        let mut params: Vec<&mut [f64]> = model.nets_mut().iter_mut().map(|n| n.params_mut().as_mut_slice()).collect();
        let g: Vec<&[f64]> = grads.nets.iter().map(|g| g.as_slice()).collect();
        self.optimizer.apply(&mut params, &g)?;
        self.step += 1;
        Ok(norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetrics {
    pub step: u64,
    pub loss: LossBreakdown,
    pub rnd_loss: Option<f64>,
    pub batch_size: usize,
    pub buffer_len: usize,
}

/// Sample, optionally reanalyse, compute the loss, clip, step, refresh
/// priorities and train the RND predictor on the batch observations.
#[allow(clippy::too_many_arguments)]
pub fn train_iteration<R: Rng + ?Sized>(
    buffer: &mut ReplayBuffer,
    model: &mut MuZeroModel,
    learner: &mut Learner,
    rnd: Option<&mut RndModule>,
    cfg: &TrainerConfig,
    reanalyze: Option<&SearchConfig>,
    rng: &mut R,
) -> Result<TrainMetrics, TrainError> {
    let need = cfg.warmup().max(cfg.batch_size);
    if buffer.len() < need {
        return Err(TrainError::Cold {
            have: buffer.len(),
            need,
        });
    }
    let unroll = buffer.config().unroll_steps;
    let discount = buffer.config().discount;
    let batch = match reanalyze {
        Some(search) if buffer.config().reanalyze_fraction() > 0.0 => {
            buffer.sample_batch_with(cfg.batch_size, Some((model, search)), rng)?
        }
        _ => buffer.sample_batch(cfg.batch_size, rng)?,
    };
    let (mut loss, grads) = unrolled_loss(model, &batch, &cfg.weights, unroll, discount)?;
    loss.grad_norm = learner.apply(model, grads, cfg.max_grad_norm)?;
    buffer.update_priorities(&batch.ids(), &loss.td_errors);
    let rnd_loss = match rnd {
        Some(r) => {
            let obs: Vec<Vec<f64>> = batch.samples.iter().map(|s| s.observation.clone()).collect();
            Some(r.train_step(&obs)?)
        }
        None => None,
    };
    Ok(TrainMetrics {
        step: learner.step,
        loss,
        rnd_loss,
        batch_size: batch.len(),
        buffer_len: buffer.len(),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{ModelConfig, ModelShape, ValueHeadKind};
    use crate::replay::StepTarget;

    fn tiny(policy: PolicyKind, chance: Option<usize>, value_head: ValueHeadKind) -> MuZeroModel {
        let shape = ModelShape {
            obs_dim: 3,
            policy,
            value_head,
            dynamics: chance.is_none(),
            projection: true,
            chance_dim: chance,
        };
        let cfg = ModelConfig {
            latent_dim: 4,
            hidden: 5,
            projection_dim: 3,
        };
        MuZeroModel::new(shape, cfg, 11).unwrap()
    }

    fn target(policy: PolicyTarget, value: f64, reward: f64, mask: bool) -> StepTarget {
        StepTarget {
            value,
            reward,
            policy,
            policy_mask: mask,
            value_mask: true,
        }
    }

    fn sample(policy: PolicyKind, unroll: usize) -> Sample {
        let (actions, pt): (Vec<Action>, Vec<PolicyTarget>) = match policy {
            PolicyKind::Gaussian { .. } => (
                vec![Action::Continuous(vec![0.3]); unroll],
                (0..=unroll)
                    .map(|u| PolicyTarget::Sampled {
                        actions: vec![Action::Continuous(vec![0.2 * u as f64 - 0.1]), Action::Continuous(vec![0.5])],
                        probs: vec![0.7, 0.3],
                    })
                    .collect(),
            ),
            _ => {
                let n = policy.joint_actions().unwrap();
                (
                    (0..unroll).map(|u| Action::Discrete((u + 1) % n)).collect(),
                    (0..=unroll)
                        .map(|u| {
                            let mut p = vec![0.1 / (n - 1) as f64; n];
                            p[u % n] = 0.9;
                            PolicyTarget::Dense(p)
                        })
                        .collect(),
                )
            }
        };
        Sample {
            id: 0,
            observation: vec![0.4, -0.7, 0.2],
            to_play: 0,
            actions,
            chance_outcomes: (0..unroll).map(|u| Some(u % 3)).collect(),
            next_observations: (0..unroll).map(|u| Some(vec![0.1 * u as f64, 0.5, -0.3])).collect(),
            targets: pt
                .into_iter()
                .enumerate()
                .map(|(u, p)| target(p, 0.3 - 0.2 * u as f64, 0.5 * u as f64, u < unroll.max(1)))
                .collect(),
            weight: 1.0,
        }
    }

    fn all_weights() -> LossWeights {
        LossWeights {
            policy: 1.0,
            value: 1.0,
            reward: 1.0,
            consistency: 2.0,
            entropy: 0.05,
            chance: 1.0,
        }
    }

    /// Central differences over every parameter, consistency targets held
    /// by `frozen` (or moving with the perturbed model when `None`).
    fn numeric_gradient(
        model: &MuZeroModel,
        frozen: Option<&MuZeroModel>,
        batch: &TransitionBatch,
        w: &LossWeights,
        unroll: usize,
    ) -> Vec<f64> {
        let loss_of = |m: &MuZeroModel| {
            unrolled_loss_with(m, frozen.unwrap_or(m), batch, w, unroll, 0.9, 1.0)
                .unwrap()
                .0
                .total
        };
        let mut numeric = Vec::new();
        let h = 1e-6;
        let mut m = model.clone();
        for net in 0..m.nets().len() {
            for i in 0..m.nets()[net].params().len() {
                let orig = m.nets()[net].params().as_slice()[i];
                m.nets_mut()[net].params_mut().as_mut_slice()[i] = orig + h;
                let up = loss_of(&m);
                m.nets_mut()[net].params_mut().as_mut_slice()[i] = orig - h;
                let down = loss_of(&m);
                m.nets_mut()[net].params_mut().as_mut_slice()[i] = orig;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        numeric
    }

    fn exact_grads(model: &MuZeroModel, batch: &TransitionBatch, w: &LossWeights, unroll: usize) -> ModelGrads {
        unrolled_loss_with(model, model, batch, w, unroll, 0.9, 1.0).unwrap().1
    }

    fn check_gradient(model: &MuZeroModel, batch: &TransitionBatch, w: &LossWeights, unroll: usize) {
        let grads = exact_grads(model, batch, w, unroll);
        let analytic = grads.flat();
        let numeric = numeric_gradient(model, Some(model), batch, w, unroll);
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grads.norm().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!(diff / scale <= 1e-4, "relative error {}", diff / scale);
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let policy = PolicyKind::Categorical { n: 3 };
        let model = tiny(policy, None, ValueHeadKind::TanhBounded);
        let batch = TransitionBatch {
            samples: vec![sample(policy, 2)],
        };
        check_gradient(&model, &batch, &all_weights(), 2);
    }

    #[test]
    fn factored_and_gaussian_gradients() {
        let f = PolicyKind::Factored { dims: 2, bins: 3 };
        let batch = TransitionBatch {
            samples: vec![sample(f, 2)],
        };
        check_gradient(&tiny(f, None, ValueHeadKind::Linear), &batch, &all_weights(), 2);
        let g = PolicyKind::Gaussian { dims: 1 };
        let batch = TransitionBatch {
            samples: vec![sample(g, 2)],
        };
        check_gradient(&tiny(g, None, ValueHeadKind::Linear), &batch, &all_weights(), 2);
    }

    #[test]
    fn stochastic_gradient() {
        let policy = PolicyKind::Categorical { n: 3 };
        let model = tiny(policy, Some(3), ValueHeadKind::Linear);
        let mut s = sample(policy, 2);
        s.weight = 0.6;
        let batch = TransitionBatch {
            samples: vec![s, sample(policy, 2)],
        };
        let w = LossWeights {
            consistency: 0.0,
            ..all_weights()
        };
        check_gradient(&model, &batch, &w, 2);
    }

    #[test]
    fn zero_unroll_is_policy_plus_value() {
        let policy = PolicyKind::Categorical { n: 3 };
        let model = tiny(policy, None, ValueHeadKind::TanhBounded);
        let s = sample(policy, 0);
        let out = model.initial_inference(&s.observation).unwrap();
        let (ce, _) = policy_loss(policy, &s.targets[0].policy, &out.policy_logits).unwrap();
        let expected = ce + (out.value - s.targets[0].value).powi(2);
        let (b, _) = unrolled_loss(&model, &TransitionBatch { samples: vec![s.clone()] }, &all_weights(), 0, 0.9).unwrap();
        assert!((b.total - expected + 0.05 * b.entropy).abs() < 1e-12);
        assert_eq!((b.reward, b.consistency), (0.0, 0.0));
        assert_eq!(b.td_errors, vec![(s.targets[0].value - out.value).abs()]);
    }

    #[test]
    fn total_is_weighted_sum() {
        let policy = PolicyKind::Categorical { n: 3 };
        let model = tiny(policy, None, ValueHeadKind::TanhBounded);
        let batch = TransitionBatch {
            samples: vec![sample(policy, 2)],
        };
        let w = all_weights();
        let (b, _) = unrolled_loss(&model, &batch, &w, 2, 0.9).unwrap();
        let sum = b.policy + b.value + b.reward + 2.0 * b.consistency - 0.05 * b.entropy + b.chance;
        assert!((b.total - sum).abs() < 1e-12);
        let plain = LossWeights {
            consistency: 0.0,
            entropy: 0.0,
            ..w
        };
        let (p, _) = unrolled_loss(&model, &batch, &plain, 2, 0.9).unwrap();
        assert!((p.total - (p.policy + p.value + p.reward)).abs() < 1e-12);
    }

    #[test]
    fn target_branch_carries_no_gradient() {
        let policy = PolicyKind::Categorical { n: 3 };
        let model = tiny(policy, None, ValueHeadKind::TanhBounded);
        let w = LossWeights {
            policy: 0.0,
            value: 0.0,
            reward: 0.0,
            consistency: 1.0,
            entropy: 0.0,
            chance: 0.0,
        };
        let batch = TransitionBatch {
            samples: vec![sample(policy, 2)],
        };
        let g = exact_grads(&model, &batch, &w, 2);
        // Perturbing only the target-side copy moves the loss, yet the
        // analytic gradient ignores that path: it matches differences taken
        // with the target frozen and differs from ones where it moves.
        let frozen = numeric_gradient(&model, Some(&model), &batch, &w, 2);
        let moving = numeric_gradient(&model, None, &batch, &w, 2);
        let analytic = g.flat();
        let err = |n: &[f64]| analytic.iter().zip(n).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err(&frozen) <= 1e-6 * g.norm());
        assert!(err(&moving) > 1e-3 * g.norm());
        let i_pred = model.index_of(NetKind::Prediction).unwrap();
        assert_eq!(g.nets[i_pred].squared_norm(), 0.0);
    }

    #[test]
    fn dynamics_scale_only_touches_earlier_steps() {
        let policy = PolicyKind::Categorical { n: 3 };
        let model = tiny(policy, None, ValueHeadKind::TanhBounded);
        let batch = TransitionBatch {
            samples: vec![sample(policy, 1)],
        };
        let w = LossWeights::default();
        let full = exact_grads(&model, &batch, &w, 1);
        let (_, half) = unrolled_loss(&model, &batch, &w, 1, 0.9).unwrap();
        let i_dyn = model.index_of(NetKind::Dynamics).unwrap();
        let i_pred = model.index_of(NetKind::Prediction).unwrap();
        let i_repr = model.index_of(NetKind::Representation).unwrap();
        assert_eq!(full.nets[i_dyn], half.nets[i_dyn]);
        assert_eq!(full.nets[i_pred], half.nets[i_pred]);
        // The representation gradient is the step-0 part plus half of the
        // part carried back through the dynamics step.
        let zero = exact_grads(&model, &batch, &w, 0);
        let through = |g: &ModelGrads, k: usize| g.nets[i_repr].as_slice()[k] - zero.nets[i_repr].as_slice()[k];
        for k in 0..zero.nets[i_repr].len() {
            assert!((through(&half, k) - 0.5 * through(&full, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let policy = PolicyKind::Categorical { n: 3 };
        let model = tiny(policy, None, ValueHeadKind::TanhBounded);
        let batch = TransitionBatch {
            samples: vec![sample(policy, 2)],
        };
        let (_, mut g) = unrolled_loss(&model, &batch, &all_weights(), 2, 0.9).unwrap();
        let before = g.norm();
        let max = before / 3.0;
        assert_eq!(clip_grad_norm(&mut g, max), before);
        assert!((g.norm() - max).abs() <= 1e-9);
        let mut small = g.clone();
        clip_grad_norm(&mut small, 1e9);
        assert_eq!(small, g);
    }

    #[test]
    fn overfits_a_frozen_batch() {
        for (policy, chance) in [
            (PolicyKind::Categorical { n: 3 }, None),
            (PolicyKind::Categorical { n: 3 }, Some(3)),
            (PolicyKind::Factored { dims: 2, bins: 3 }, None),
            (PolicyKind::Gaussian { dims: 1 }, None),
        ] {
            let mut model = tiny(policy, chance, ValueHeadKind::Linear);
            let batch = TransitionBatch {
                samples: vec![sample(policy, 2), sample(policy, 2)],
            };
            let w = LossWeights {
                consistency: if chance.is_none() { 2.0 } else { 0.0 },
                ..LossWeights::default()
            };
            let mut learner = Learner::new(&model, OptimizerConfig::adam(1e-2));
            let first = unrolled_loss(&model, &batch, &w, 2, 0.9).unwrap().0.total;
            for _ in 0..200 {
                let (_, g) = unrolled_loss(&model, &batch, &w, 2, 0.9).unwrap();
                learner.apply(&mut model, g, 10.0).unwrap();
            }
            let last = unrolled_loss(&model, &batch, &w, 2, 0.9).unwrap().0.total;
            assert!(last < first, "{policy:?} {chance:?}: {first} -> {last}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let policy = PolicyKind::Categorical { n: 3 };
        let mut model = tiny(policy, None, ValueHeadKind::TanhBounded);
        let before = model.clone();
        let batch = TransitionBatch {
            samples: vec![sample(policy, 2)],
        };
        let mut learner = Learner::new(&model, OptimizerConfig::adam(0.0));
        let (_, g) = unrolled_loss(&model, &batch, &all_weights(), 2, 0.9).unwrap();
        learner.apply(&mut model, g, 10.0).unwrap();
        assert_eq!(model, before);
        assert_eq!(learner.step, 1);
    }

    #[test]
    fn train_iteration_refreshes_priorities() {
        use crate::replay::{BufferConfig, GameSegment};
        let policy = PolicyKind::Categorical { n: 3 };
        let mut model = tiny(policy, None, ValueHeadKind::TanhBounded);
        let mut buffer = ReplayBuffer::new(BufferConfig {
            unroll_steps: 2,
            n_step: 3,
            ..BufferConfig::default()
        })
        .unwrap();
        let len = 12;
        buffer
            .push_segment(GameSegment {
                observations: (0..=len).map(|i| vec![i as f64 / 10.0, 0.5, -0.5]).collect(),
                actions: (0..len).map(|i| Action::Discrete(i % 3)).collect(),
                rewards_ext: vec![0.1; len],
                rewards_int: vec![0.0; len],
                policy_targets: vec![PolicyTarget::Dense(vec![0.2, 0.3, 0.5]); len],
                root_values: vec![0.2; len],
                to_play: vec![0; len + 1],
                legal: vec![Some(vec![true; 3]); len],
                chance_outcomes: vec![None; len],
                terminal: true,
                final_value: 0.0,
                winner: None,
            })
            .unwrap();
        let cfg = TrainerConfig {
            batch_size: 4,
            ..TrainerConfig::default()
        };
        let mut learner = Learner::new(&model, cfg.optimizer);
        let mut rnd = RndModule::new(3, &Default::default(), cfg.optimizer, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let metrics = train_iteration(&mut buffer, &mut model, &mut learner, Some(&mut rnd), &cfg, None, &mut rng).unwrap();
        assert_eq!(metrics.step, 1);
        assert!(metrics.rnd_loss.unwrap() >= 0.0);
        assert_eq!(metrics.loss.td_errors.len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = buffer.clone().sample_batch(4, &mut rng).unwrap();
        assert_eq!(ids.len(), 4);
        let small = TrainerConfig {
            batch_size: 8,
            ..TrainerConfig::default()
        };
        assert!(matches!(
            train_iteration(&mut buffer, &mut model, &mut learner, None, &small, None, &mut rng),
            Err(TrainError::Cold { .. })
        ));
    }
}
