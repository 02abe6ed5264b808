//! Learned world model: representation, dynamics and prediction networks,
//! the self-supervised projection heads, and the optional afterstate/chance
//! heads for stochastic environments.
//!
//! Latent states are `tanh`-squashed outputs of the representation and
//! dynamics networks. Heads whose output mixes several quantities (dynamics:
//! latent then reward; prediction: policy logits then value) use an identity
//! final layer; the squashing of the latent and bounded-value parts happens
//! here so the trainer can apply the matching derivatives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionError, PolicyKind};
use crate::diffnet::{self, Activation, DiffnetError, Mlp, MlpSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] DiffnetError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error("model has no {0:?} network")]
    Missing(NetKind),
    #[error("chance code must be one-hot over {0} outcomes")]
    NotOneHot(usize),
    #[error("zero-norm embedding in consistency loss")]
    ZeroNormEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueHeadKind {
    /// `tanh` output, for zero-sum games with outcomes in [-1, 1].
    TanhBounded,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Representation,
    Dynamics,
    Prediction,
    Projection,
    ProjectionHead,
    AfterstateDynamics,
    AfterstatePrediction,
    ChanceDynamics,
}

pub const NET_KINDS: [NetKind; 8] = [
    NetKind::Representation,
    NetKind::Dynamics,
    NetKind::Prediction,
    NetKind::Projection,
    NetKind::ProjectionHead,
    NetKind::AfterstateDynamics,
    NetKind::AfterstatePrediction,
    NetKind::ChanceDynamics,
];

impl NetKind {
    fn slot(self) -> usize {
        NET_KINDS.iter().position(|k| *k == self).expect("listed")
    }
}

/// Network widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden: 128,
            projection_dim: 64,
        }
    }
}

/// Which networks exist and how they connect to the environment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub obs_dim: usize,
    pub policy: PolicyKind,
    pub value_head: ValueHeadKind,
    /// Dynamics network present (false for perfect-simulator search).
    pub dynamics: bool,
    /// Projection heads for the consistency loss.
    pub projection: bool,
    /// Afterstate and chance heads with this many chance outcomes.
    pub chance_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    pub latent: Vec<f64>,
    pub value: f64,
    pub reward: f64,
    pub policy_logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AfterstateOutput {
    pub afterstate: Vec<f64>,
    pub value: f64,
    pub chance_logits: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingBranch {
    /// Projection followed by the prediction head; gradients flow.
    Online,
    /// Projection only; treated as a constant target.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuZeroModel {
    shape: ModelShape,
    config: ModelConfig,
    nets: Vec<Mlp>,
    slots: Vec<Option<usize>>,
}

impl MuZeroModel {
    pub fn new(shape: ModelShape, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let l = config.latent_dim;
        let h = config.hidden;
        let e = config.projection_dim;
        let enc = shape.policy.encoding_dim();
        let logits = shape.policy.logits_dim();
        let relu = Activation::Relu;
        let id = Activation::Identity;
        let mut specs: Vec<(NetKind, MlpSpec)> = vec![
            (NetKind::Representation, MlpSpec::dense(&[shape.obs_dim, h, l], relu, Activation::Tanh)?),
            (NetKind::Prediction, MlpSpec::dense(&[l, h, logits + 1], relu, id)?),
        ];
        if shape.dynamics {
            specs.push((NetKind::Dynamics, MlpSpec::dense(&[l + enc, h, l + 1], relu, id)?));
        }
        if shape.projection {
            specs.push((NetKind::Projection, MlpSpec::dense(&[l, h, e], relu, id)?));
            specs.push((NetKind::ProjectionHead, MlpSpec::dense(&[e, h, e], relu, id)?));
        }
        if let Some(c) = shape.chance_dim {
            specs.push((
                NetKind::AfterstateDynamics,
                MlpSpec::dense(&[l + enc, h, l], relu, Activation::Tanh)?,
            ));
            specs.push((NetKind::AfterstatePrediction, MlpSpec::dense(&[l, h, 1 + c], relu, id)?));
            specs.push((NetKind::ChanceDynamics, MlpSpec::dense(&[l + c, h, l + 1], relu, id)?));
        }
        specs.sort_by_key(|(k, _)| k.slot());
        let mut slots = vec![None; NET_KINDS.len()];
        let mut nets = Vec::with_capacity(specs.len());
        for (kind, spec) in specs {
            let net_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(kind.slot() as u64 + 1);
            slots[kind.slot()] = Some(nets.len());
            nets.push(Mlp::init(spec, net_seed)?);
        }
        Ok(Self {
            shape,
            config,
            nets,
            slots,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn net(&self, kind: NetKind) -> Result<&Mlp, ModelError> {
        self.slots[kind.slot()]
            .map(|i| &self.nets[i])
            .ok_or(ModelError::Missing(kind))
    }

    pub fn has(&self, kind: NetKind) -> bool {
        self.slots[kind.slot()].is_some()
    }

    /// Networks present, in slot order.
    pub fn kinds(&self) -> Vec<NetKind> {
        NET_KINDS.iter().copied().filter(|k| self.has(*k)).collect()
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [Mlp] {
        &mut self.nets
    }

    /// Position of `kind` within [`Self::nets`].
    pub fn index_of(&self, kind: NetKind) -> Option<usize> {
        self.slots[kind.slot()]
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|n| n.params().len()).sum()
    }

    pub(crate) fn squash_value(&self, raw: f64) -> f64 {
        match self.shape.value_head {
            ValueHeadKind::TanhBounded => raw.tanh(),
            ValueHeadKind::Linear => raw,
        }
    }

    /// Derivative of the value squashing, expressed through its output.
    pub(crate) fn value_derivative(&self, value: f64) -> f64 {
        match self.shape.value_head {
            ValueHeadKind::TanhBounded => 1.0 - value * value,
            ValueHeadKind::Linear => 1.0,
        }
    }

    /// Splits a prediction-net output into `(logits, value)`.
    pub(crate) fn split_prediction(&self, raw: &[f64]) -> (Vec<f64>, f64) {
        let n = raw.len() - 1;
        (raw[..n].to_vec(), self.squash_value(raw[n]))
    }

    /// Splits a dynamics-style output into `(tanh latent, reward)`.
    pub(crate) fn split_transition(raw: &[f64]) -> (Vec<f64>, f64) {
        let n = raw.len() - 1;
        (raw[..n].iter().map(|x| x.tanh()).collect(), raw[n])
    }

    pub fn encode_action(&self, action: &Action) -> Result<Vec<f64>, ModelError> {
        Ok(self.shape.policy.encode(action)?)
    }

    fn predict(&self, latent: Vec<f64>, reward: f64) -> Result<NetworkOutput, ModelError> {
        let raw = self.net(NetKind::Prediction)?.predict(&latent)?;
        let (policy_logits, value) = self.split_prediction(&raw);
        Ok(NetworkOutput {
            latent,
            value,
            reward,
            policy_logits,
        })
    }

    pub fn represent(&self, obs: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.net(NetKind::Representation)?.predict(obs)?)
    }

    pub fn initial_inference(&self, obs: &[f64]) -> Result<NetworkOutput, ModelError> {
        let latent = self.represent(obs)?;
        self.predict(latent, 0.0)
    }

    pub fn recurrent_inference(&self, latent: &[f64], action: &Action) -> Result<NetworkOutput, ModelError> {
        let mut input = latent.to_vec();
        input.extend(self.encode_action(action)?);
        let raw = self.net(NetKind::Dynamics)?.predict(&input)?;
        let (next, reward) = Self::split_transition(&raw);
        self.predict(next, reward)
    }

    pub fn afterstate_inference(&self, latent: &[f64], action: &Action) -> Result<AfterstateOutput, ModelError> {
        let mut input = latent.to_vec();
        input.extend(self.encode_action(action)?);
        let afterstate = self.net(NetKind::AfterstateDynamics)?.predict(&input)?;
        let raw = self.net(NetKind::AfterstatePrediction)?.predict(&afterstate)?;
        Ok(AfterstateOutput {
            afterstate,
            value: self.squash_value(raw[0]),
            chance_logits: raw[1..].to_vec(),
        })
    }

    pub fn chance_recurrent_inference(&self, afterstate: &[f64], chance_code: &[f64]) -> Result<NetworkOutput, ModelError> {
        let c = self.shape.chance_dim.ok_or(ModelError::Missing(NetKind::ChanceDynamics))?;
        if !is_one_hot(chance_code, c) {
            return Err(ModelError::NotOneHot(c));
        }
        let mut input = afterstate.to_vec();
        input.extend_from_slice(chance_code);
        let raw = self.net(NetKind::ChanceDynamics)?.predict(&input)?;
        let (next, reward) = Self::split_transition(&raw);
        self.predict(next, reward)
    }

    pub fn ssl_embed(&self, latent: &[f64], branch: EmbeddingBranch) -> Result<Vec<f64>, ModelError> {
        let projected = self.net(NetKind::Projection)?.predict(latent)?;
        match branch {
            EmbeddingBranch::Target => Ok(projected),
            EmbeddingBranch::Online => Ok(self.net(NetKind::ProjectionHead)?.predict(&projected)?),
        }
    }

    /// Latent predicted by the dynamics net for `(obs, action)` versus the
    /// representation of `next_obs`, as a raw-latent cosine.
    pub fn alignment_cosine(&self, obs: &[f64], action: &Action, next_obs: &[f64]) -> Result<f64, ModelError> {
        let latent = self.represent(obs)?;
        let predicted = self.recurrent_inference(&latent, action)?.latent;
        let actual = self.represent(next_obs)?;
        Ok(diffnet::cosine_similarity(&predicted, &actual)?)
    }
}

pub fn is_one_hot(code: &[f64], dim: usize) -> bool {
    code.len() == dim && code.iter().filter(|x| **x == 1.0).count() == 1 && code.iter().all(|x| *x == 0.0 || *x == 1.0)
}

pub fn one_hot(index: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    v
}

/// Negative cosine similarity between the online and target embeddings.
pub fn consistency_loss(online: &[f64], target: &[f64]) -> Result<f64, ModelError> {
    match diffnet::cosine_similarity(online, target) {
        Ok(c) => Ok(-c),
        Err(DiffnetError::ZeroNorm) => Err(ModelError::ZeroNormEmbedding),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(value_head: ValueHeadKind) -> ModelShape {
        ModelShape {
            obs_dim: 6,
            policy: PolicyKind::Categorical { n: 3 },
            value_head,
            dynamics: true,
            projection: true,
            chance_dim: Some(4),
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            latent_dim: 5,
            hidden: 8,
            projection_dim: 4,
        }
    }

    fn model() -> MuZeroModel {
        MuZeroModel::new(shape(ValueHeadKind::TanhBounded), small(), 3).unwrap()
    }

    #[test]
    fn initial_inference_has_zero_reward_and_bounded_value() {
        let m = model();
        let obs = [5.0, -4.0, 3.0, 9.0, -7.0, 1.0];
        let a = m.initial_inference(&obs).unwrap();
        assert_eq!(a.reward, 0.0);
        assert!(a.value.abs() <= 1.0);
        assert_eq!(a, m.initial_inference(&obs).unwrap());
        assert_eq!(a.latent.len(), 5);
        assert_eq!(a.policy_logits.len(), 3);
        assert!(m.initial_inference(&[0.0; 5]).is_err());
    }

    #[test]
    fn recurrent_inference_is_deterministic_and_checks_actions() {
        let m = model();
        let s = m.initial_inference(&[0.1; 6]).unwrap().latent;
        let a = m.recurrent_inference(&s, &Action::Discrete(2)).unwrap();
        assert_eq!(a, m.recurrent_inference(&s, &Action::Discrete(2)).unwrap());
        assert!(m.recurrent_inference(&s, &Action::Discrete(3)).is_err());
        assert!(m.recurrent_inference(&s, &Action::Continuous(vec![0.0])).is_err());
        assert_eq!(m.encode_action(&Action::Discrete(1)).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn continuous_actions_append_raw_components() {
        let shape = ModelShape {
            obs_dim: 3,
            policy: PolicyKind::Gaussian { dims: 2 },
            value_head: ValueHeadKind::Linear,
            dynamics: true,
            projection: false,
            chance_dim: None,
        };
        let m = MuZeroModel::new(shape, small(), 0).unwrap();
        assert_eq!(m.net(NetKind::Dynamics).unwrap().input_dim(), 5 + 2);
        assert_eq!(m.encode_action(&Action::Continuous(vec![0.5, -0.25])).unwrap(), vec![0.5, -0.25]);
        assert!(matches!(
            m.ssl_embed(&[0.0; 5], EmbeddingBranch::Online),
            Err(ModelError::Missing(NetKind::Projection))
        ));
        assert!(matches!(
            m.afterstate_inference(&[0.0; 5], &Action::Continuous(vec![0.0, 0.0])),
            Err(ModelError::Missing(_))
        ));
    }

    #[test]
    fn afterstate_and_chance_heads() {
        let m = model();
        let s = m.initial_inference(&[0.2; 6]).unwrap().latent;
        let a = m.afterstate_inference(&s, &Action::Discrete(0)).unwrap();
        assert_eq!(a.chance_logits.len(), 4);
        let p = diffnet::softmax(&a.chance_logits, 1.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a, m.afterstate_inference(&s, &Action::Discrete(0)).unwrap());
        let out = m.chance_recurrent_inference(&a.afterstate, &one_hot(2, 4)).unwrap();
        assert!(out.reward.is_finite());
        assert_eq!(out, m.chance_recurrent_inference(&a.afterstate, &one_hot(2, 4)).unwrap());
        assert_eq!(
            m.chance_recurrent_inference(&a.afterstate, &[0.5, 0.5, 0.0, 0.0]),
            Err(ModelError::NotOneHot(4))
        );
    }

    #[test]
    fn embeddings_and_consistency() {
        let m = model();
        let s = m.initial_inference(&[0.3; 6]).unwrap().latent;
        let online = m.ssl_embed(&s, EmbeddingBranch::Online).unwrap();
        let target = m.ssl_embed(&s, EmbeddingBranch::Target).unwrap();
        assert_eq!(online.len(), target.len());
        assert!(online.iter().chain(&target).all(|x| x.is_finite()));
        assert!((consistency_loss(&online, &online).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(consistency_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(consistency_loss(&[0.0, 0.0], &[0.0, 1.0]), Err(ModelError::ZeroNormEmbedding));
    }

    #[test]
    fn alignment_cosine_is_bounded() {
        let m = model();
        let c = m.alignment_cosine(&[0.1; 6], &Action::Discrete(1), &[0.2; 6]).unwrap();
        assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn serde_round_trip() {
        let m = model();
        let text = serde_json::to_string(&m).unwrap();
        let back: MuZeroModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
