use std::collections::BTreeMap;

use rand::Rng;

use super::{BufferConfig, GameSegment, PolicyTarget, ReplayError, StepTarget};
use crate::action::PolicyKind;
use crate::model::MuZeroModel;
use crate::search::{run_search, LearnedWorld, SearchConfig, SearchResult, SearchVariant};

/// Policy targets and root values recomputed with a newer model, keyed by
/// position in the segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefreshedTargets {
    pub entries: BTreeMap<usize, (PolicyTarget, f64)>,
}

fn perspective(seg: &GameSegment, from: usize, at: usize) -> f64 {
    if seg.to_play[from] == seg.to_play[at] {
        1.0
    } else {
        -1.0
    }
}

/// `sum_{j<n} g^j r_{t+j} + g^n v_{t+n}` with per-ply sign flips, cut at the
/// end of the segment. Returns `(value, known)`; `known` is false past a
/// truncated end.
pub fn n_step_value(
    seg: &GameSegment,
    t: usize,
    cfg: &BufferConfig,
    value_at: &dyn Fn(usize) -> f64,
) -> (f64, bool) {
    let len = seg.len();
    if t >= len {
        return match (seg.terminal, t == len) {
            (true, _) => (0.0, true),
            (false, true) => (seg.final_value, true),
            (false, false) => (0.0, false),
        };
    }
    let end = (t + cfg.n_step).min(len);
    let mut z = 0.0;
    let mut disc = 1.0;
    for j in t..end {
        z += disc * perspective(seg, t, j) * seg.reward(j, cfg.intrinsic_weight);
        disc *= cfg.discount;
    }
    if end < len {
        z += disc * perspective(seg, t, end) * value_at(end);
    } else if !seg.terminal {
        z += disc * perspective(seg, t, len) * seg.final_value;
    }
    (z, true)
}

fn absorbing_policy(seg: &GameSegment) -> PolicyTarget {
    let last = seg.len() - 1;
    match (&seg.legal[last], &seg.policy_targets[last]) {
        (Some(mask), _) => PolicyTarget::uniform_over(mask),
        (None, PolicyTarget::Dense(p)) => PolicyTarget::Dense(vec![1.0 / p.len() as f64; p.len()]),
        (None, sampled) => sampled.clone(),
    }
}

/// Targets for unroll steps `0..=U` starting at `pos`.
pub fn compute_targets(
    seg: &GameSegment,
    pos: usize,
    cfg: &BufferConfig,
    refreshed: Option<&RefreshedTargets>,
) -> Vec<StepTarget> {
    let len = seg.len();
    let value_at = |i: usize| {
        refreshed
            .and_then(|r| r.entries.get(&i))
            .map_or(seg.root_values[i], |(_, v)| *v)
    };
    (0..=cfg.unroll_steps)
        .map(|u| {
            let idx = pos + u;
            let (value, value_mask) = n_step_value(seg, idx, cfg, &value_at);
            let reward = if u == 0 || idx > len {
                0.0
            } else {
                seg.reward(idx - 1, cfg.intrinsic_weight)
            };
            let (policy, policy_mask) = if idx < len {
                let p = refreshed
                    .and_then(|r| r.entries.get(&idx))
                    .map_or_else(|| seg.policy_targets[idx].clone(), |(p, _)| p.clone());
                (p, true)
            } else {
                (absorbing_policy(seg), false)
            };
            StepTarget {
                value,
                reward,
                policy,
                policy_mask,
                value_mask,
            }
        })
        .collect()
}

/// Stored form of a search result's policy target.
pub fn policy_target_from_search(result: &SearchResult, variant: SearchVariant, policy: PolicyKind) -> PolicyTarget {
    let probs = result.policy_target(variant);
    match (variant, policy.joint_actions()) {
        (SearchVariant::Sampled, _) | (_, None) => PolicyTarget::Sampled {
            actions: result.actions.clone(),
            probs: probs.to_vec(),
        },
        (_, Some(n)) => PolicyTarget::Dense(result.dense(probs, n)),
    }
}

/// Reruns search without exploration noise at every position the targets
/// of `(seg, pos)` read from.
pub fn reanalyze_sample<R: Rng + ?Sized>(
    seg: &GameSegment,
    pos: usize,
    cfg: &BufferConfig,
    model: &MuZeroModel,
    search: &SearchConfig,
    rng: &mut R,
) -> Result<RefreshedTargets, ReplayError> {
    let len = seg.len();
    let obs_dim = model.shape().obs_dim;
    if seg.observations[pos].len() != obs_dim {
        return Err(ReplayError::InvalidConfig(format!(
            "model expects {obs_dim}-dim observations, segment has {}",
            seg.observations[pos].len()
        )));
    }
    let mut needed: Vec<usize> = Vec::new();
    for u in 0..=cfg.unroll_steps {
        let idx = pos + u;
        if idx < len {
            needed.push(idx);
        }
        if idx + cfg.n_step < len {
            needed.push(idx + cfg.n_step);
        }
    }
    needed.sort_unstable();
    needed.dedup();
    let mut out = RefreshedTargets::default();
    for idx in needed {
        let mut world = LearnedWorld {
            model,
            observation: seg.observations[idx].clone(),
            legal: seg.legal[idx].clone(),
            to_play: seg.to_play[idx],
            two_player: search.two_player,
        };
        let result = run_search(&mut world, search, false, rng)?;
        let target = policy_target_from_search(&result, search.variant, model.shape().policy);
        out.entries.insert(idx, (target, result.root_value));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Action;

    fn segment(rewards: &[f64], to_play: &[usize], terminal: bool) -> GameSegment {
        let t = rewards.len();
        GameSegment {
            observations: vec![vec![0.0]; t + 1],
            actions: vec![Action::Discrete(0); t],
            rewards_ext: rewards.to_vec(),
            rewards_int: vec![0.0; t],
            policy_targets: vec![PolicyTarget::Dense(vec![1.0, 0.0]); t],
            root_values: vec![0.0; t],
            to_play: to_play.to_vec(),
            legal: vec![Some(vec![true, true]); t],
            chance_outcomes: vec![None; t],
            terminal,
            final_value: 0.0,
            winner: None,
        }
    }

    fn cfg(n: usize, discount: f64, unroll: usize) -> BufferConfig {
        BufferConfig {
            n_step: n,
            discount,
            unroll_steps: unroll,
            ..BufferConfig::default()
        }
    }

    #[test]
    fn hand_n_step_value() {
        let mut seg = segment(&[0.0, 0.0, 1.0, 0.0], &[0; 5], false);
        seg.root_values[3] = 0.8;
        let (z, known) = n_step_value(&seg, 0, &cfg(3, 0.5, 0), &|i| seg.root_values[i]);
        assert!(known);
        assert_eq!(z, 0.35);
    }

    #[test]
    fn truncated_end_bootstraps_from_final_value() {
        let mut seg = segment(&[0.0, 0.0, 1.0], &[0; 4], false);
        seg.final_value = 0.8;
        let t = compute_targets(&seg, 0, &cfg(3, 0.5, 4), None);
        assert_eq!(t[0].value, 0.35);
        assert_eq!(t[3].value, 0.8);
        assert!(t[3].value_mask && !t[3].policy_mask);
        assert!(!t[4].value_mask);
    }

    #[test]
    fn two_player_terminal_targets() {
        // Players alternate; the mover at t=2 wins.
        let seg = segment(&[0.0, 0.0, 1.0], &[0, 1, 0, 1], true);
        let t = compute_targets(&seg, 0, &cfg(10, 1.0, 4), None);
        let values: Vec<f64> = t.iter().map(|s| s.value).collect();
        assert_eq!(values, vec![1.0, -1.0, 1.0, 0.0, 0.0]);
        let rewards: Vec<f64> = t.iter().map(|s| s.reward).collect();
        assert_eq!(rewards, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(t[3].policy, PolicyTarget::Dense(vec![0.5, 0.5]));
        assert!(t.iter().take(3).all(|s| s.policy_mask));
        assert!(t.iter().all(|s| s.value_mask));
    }

    #[test]
    fn intrinsic_rewards_are_weighted() {
        let mut seg = segment(&[1.0], &[0, 0], true);
        seg.rewards_int[0] = 0.5;
        let c = BufferConfig {
            intrinsic_weight: 1.0 / 300.0,
            ..cfg(1, 1.0, 1)
        };
        let t = compute_targets(&seg, 0, &c, None);
        assert!((t[0].value - (1.0 + 1.0 / 600.0)).abs() < 1e-15);
        assert_eq!(t[1].reward, t[0].value);
    }

    #[test]
    fn refreshed_values_replace_bootstraps() {
        let seg = segment(&[0.0; 4], &[0; 5], true);
        let mut r = RefreshedTargets::default();
        r.entries.insert(2, (PolicyTarget::Dense(vec![0.0, 1.0]), 0.5));
        let t = compute_targets(&seg, 0, &cfg(2, 1.0, 2), Some(&r));
        assert_eq!(t[0].value, 0.5);
        assert_eq!(t[2].policy, PolicyTarget::Dense(vec![0.0, 1.0]));
        assert_eq!(t[1].policy, PolicyTarget::Dense(vec![1.0, 0.0]));
    }
}
