use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::noise::sample_categorical;
use super::tree::{Edge, EdgeLabel};
use super::SearchError;
use crate::action::{Action, PolicyKind, LOG_STD_MAX, LOG_STD_MIN};
use crate::diffnet::log_softmax;

/// Means and clamped log standard deviations of a Gaussian policy head.
pub fn gaussian_params(logits: &[f64], dims: usize) -> (Vec<f64>, Vec<f64>) {
    let means = logits[..dims].to_vec();
    let log_stds = logits[dims..2 * dims].iter().map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
    (means, log_stds)
}

fn check_finite(logits: &[f64], policy: PolicyKind) -> Result<(), SearchError> {
    if logits.len() != policy.logits_dim() || logits.iter().any(|x| !x.is_finite()) {
        return Err(SearchError::DegeneratePolicy);
    }
    Ok(())
}

fn legal_at(legal: Option<&[bool]>, i: usize) -> bool {
    legal.is_none_or(|m| m.get(i).copied().unwrap_or(false))
}

/// Log-probability of every joint discrete action under the policy head.
fn joint_log_probs(policy: PolicyKind, logits: &[f64]) -> Vec<f64> {
    match policy {
        PolicyKind::Categorical { .. } => log_softmax(logits),
        PolicyKind::Factored { dims, bins } => {
            let per_dim: Vec<Vec<f64>> = logits.chunks(bins).map(log_softmax).collect();
            (0..bins.pow(dims as u32))
                .map(|j| {
                    policy
                        .joint_to_bins(j)
                        .iter()
                        .enumerate()
                        .map(|(d, b)| per_dim[d][*b])
                        .sum()
                })
                .collect()
        }
        PolicyKind::Gaussian { .. } => Vec::new(),
    }
}

/// Draws `k` actions i.i.d. from the policy, deduplicates them in order of
/// first appearance and returns each with its empirical frequency.
pub fn sample_root_actions<R: Rng + ?Sized>(
    policy: PolicyKind,
    logits: &[f64],
    legal: Option<&[bool]>,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<Action>, Vec<f64>), SearchError> {
    check_finite(logits, policy)?;
    if k == 0 {
        return Err(SearchError::InvalidConfig("k must be at least 1".into()));
    }
    let mut draws = Vec::with_capacity(k);
    match policy {
        PolicyKind::Categorical { .. } => {
            let lp = log_softmax(logits);
            let w: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(i, l)| if legal_at(legal, i) { l.exp() } else { 0.0 })
                .collect();
            for _ in 0..k {
                draws.push(Action::Discrete(sample_categorical(&w, rng).ok_or(SearchError::NoLegalActions)?));
            }
        }
        PolicyKind::Factored { bins, .. } => {
            let per_dim: Vec<Vec<f64>> = logits
                .chunks(bins)
                .map(|c| log_softmax(c).iter().map(|l| l.exp()).collect())
                .collect();
            for _ in 0..k {
                let b: Vec<usize> = per_dim
                    .iter()
                    .map(|p| sample_categorical(p, rng).expect("softmax has mass"))
                    .collect();
                draws.push(Action::Discrete(policy.bins_to_joint(&b)));
            }
        }
        PolicyKind::Gaussian { dims } => {
            let (means, log_stds) = gaussian_params(logits, dims);
            for _ in 0..k {
                let x = means
                    .iter()
                    .zip(&log_stds)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s.exp() * z
                    })
                    .collect();
                draws.push(Action::Continuous(x));
            }
        }
    }
    let mut actions: Vec<Action> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for a in draws {
        match actions.iter().position(|b| *b == a) {
            Some(i) => counts[i] += 1,
            None => {
                actions.push(a);
                counts.push(1);
            }
        }
    }
    let priors = counts.iter().map(|c| *c as f64 / k as f64).collect();
    Ok((actions, priors))
}

/// Outgoing edges of a freshly expanded decision node. With `sample_k`
/// the node holds a sampled subset; otherwise every legal joint action.
pub fn expand_priors<R: Rng + ?Sized>(
    policy: PolicyKind,
    logits: &[f64],
    legal: Option<&[bool]>,
    sample_k: Option<usize>,
    rng: &mut R,
) -> Result<Vec<Edge>, SearchError> {
    check_finite(logits, policy)?;
    if let Some(k) = sample_k {
        let (actions, priors) = sample_root_actions(policy, logits, legal, k, rng)?;
        return Ok(actions
            .into_iter()
            .zip(priors)
            .map(|(a, p)| Edge {
                label: EdgeLabel::Action(a),
                prior: p,
                logit: p.ln(),
                child: None,
            })
            .collect());
    }
    if matches!(policy, PolicyKind::Gaussian { .. }) {
        return Err(SearchError::InvalidConfig("Gaussian policies need the sampled variant".into()));
    }
    let lp = joint_log_probs(policy, logits);
    let idx: Vec<usize> = (0..lp.len()).filter(|i| legal_at(legal, *i)).collect();
    if idx.is_empty() {
        return Err(SearchError::NoLegalActions);
    }
    let max = idx.iter().map(|i| lp[*i]).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = idx.iter().map(|i| (lp[*i] - max).exp()).sum();
    let log_z = max + total.ln();
    Ok(idx
        .into_iter()
        .map(|i| Edge {
            label: EdgeLabel::Action(Action::Discrete(i)),
            prior: (lp[i] - log_z).exp(),
            logit: lp[i] - log_z,
            child: None,
        })
        .collect())
}
