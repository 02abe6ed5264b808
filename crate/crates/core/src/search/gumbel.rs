//! Gumbel-Top-k root search with sequential halving and completed-Q policy
//! improvement.

use rand::Rng;

use super::mcts::Search;
use super::noise::sample_gumbel;
use super::tree::{first_argmax, Tree};
use super::world::World;
use super::{GumbelConfig, SearchError, SearchResult};
use crate::diffnet::softmax;

/// `(c_visit + max_child_visit) * c_scale * q`.
pub fn sigma_transform(q: f64, max_child_visit: u32, c_visit: f64, c_scale: f64) -> f64 {
    (c_visit + max_child_visit as f64) * c_scale * q
}

/// Visited actions keep their normalised Q; unvisited ones get
/// `v_mix = (value_estimate + sum N Q) / (1 + sum N)`.
pub fn completed_q(q: &[Option<f64>], visits: &[u32], value_estimate: f64) -> Vec<f64> {
    let (mut weighted, mut total) = (0.0, 0u32);
    for (q, n) in q.iter().zip(visits) {
        if let (Some(q), true) = (q, *n > 0) {
            weighted += *n as f64 * q;
            total += n;
        }
    }
    let v_mix = (value_estimate + weighted) / (1.0 + total as f64);
    q.iter().map(|x| x.unwrap_or(v_mix)).collect()
}

fn prev_power_of_two(x: usize) -> usize {
    if x == 0 {
        0
    } else {
        1 << (usize::BITS - 1 - x.leading_zeros())
    }
}

/// `(candidates, sims per candidate)` per phase. Candidates are rounded
/// down to a power of two; each phase gets `max(1, budget / (phases *
/// count))` visits per candidate, cut short once the budget runs out.
pub fn sequential_halving_schedule(m_top: usize, budget: usize) -> Result<Vec<(usize, usize)>, SearchError> {
    if m_top < 2 {
        return Err(SearchError::InvalidConfig("sequential halving needs at least 2 candidates".into()));
    }
    let m = prev_power_of_two(m_top);
    if budget < m {
        return Err(SearchError::InvalidConfig(format!("budget {budget} below {m} candidates")));
    }
    let phases = m.trailing_zeros() as usize;
    let mut out = Vec::with_capacity(phases);
    let (mut used, mut count) = (0, m);
    for _ in 0..phases {
        let sims = (budget / (phases * count)).max(1).min((budget - used) / count);
        if sims == 0 {
            break;
        }
        out.push((count, sims));
        used += count * sims;
        count /= 2;
    }
    Ok(out)
}

fn node_completed_q<S>(tree: &Tree<S>, node: usize) -> (Vec<f64>, Vec<u32>) {
    let visits = tree.edge_visits(node);
    let v_hat = tree.minmax.normalize(tree.nodes[node].value_estimate);
    (completed_q(&tree.edge_q(node), &visits, v_hat), visits)
}

/// `softmax(logits + sigma(completedQ))` over every edge of `node`.
pub(crate) fn improved_policy<S>(tree: &Tree<S>, node: usize, cfg: &GumbelConfig) -> Vec<f64> {
    let (cq, visits) = node_completed_q(tree, node);
    let max_n = visits.iter().copied().max().unwrap_or(0);
    let scores: Vec<f64> = tree.nodes[node]
        .edges
        .iter()
        .zip(&cq)
        .map(|(e, q)| e.logit + sigma_transform(*q, max_n, cfg.c_visit, cfg.c_scale))
        .collect();
    softmax(&scores, 1.0).expect("finite scores")
}

/// Non-root selection: the action whose visit share lags its improved
/// policy mass the most.
pub(crate) fn interior_select<S>(tree: &Tree<S>, node: usize, cfg: &GumbelConfig) -> usize {
    let pi = improved_policy(tree, node, cfg);
    let visits = tree.edge_visits(node);
    let total: u32 = visits.iter().sum();
    let scores: Vec<f64> = pi
        .iter()
        .zip(&visits)
        .map(|(p, n)| p - *n as f64 / (1.0 + total as f64))
        .collect();
    first_argmax(&scores)
}

pub(crate) fn gumbel_root_search<W: World, R: Rng + ?Sized>(
    search: &mut Search<'_, W>,
    rng: &mut R,
) -> Result<SearchResult, SearchError> {
    let cfg = search.cfg.gumbel.clone();
    let budget = search.cfg.num_simulations;
    let logits: Vec<f64> = search.tree.root().edges.iter().map(|e| e.logit).collect();
    let g: Vec<f64> = if search.explore {
        logits.iter().map(|_| sample_gumbel(rng)).collect()
    } else {
        vec![0.0; logits.len()]
    };
    let base: Vec<f64> = g.iter().zip(&logits).map(|(a, b)| a + b).collect();
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.sort_by(|a, b| base[*b].total_cmp(&base[*a]));
    let m = prev_power_of_two(cfg.m_top.min(base.len()).min(budget));
    let mut done = 0;
    let selected = if m < 2 {
        for _ in 0..budget {
            search.simulate_indexed(done, Some(order[0]), rng)?;
            done += 1;
        }
        order[0]
    } else {
        let mut candidates = order[..m].to_vec();
        for (count, sims) in sequential_halving_schedule(m, budget)? {
            candidates.truncate(count);
            for &c in &candidates {
                for _ in 0..sims {
                    search.simulate_indexed(done, Some(c), rng)?;
                    done += 1;
                }
            }
            let (cq, visits) = node_completed_q(&search.tree, 0);
            let max_n = visits.iter().copied().max().unwrap_or(0);
            let score = |a: usize| base[a] + sigma_transform(cq[a], max_n, cfg.c_visit, cfg.c_scale);
            candidates.sort_by(|a, b| score(*b).total_cmp(&score(*a)));
        }
        candidates[0]
    };
    let improved = improved_policy(&search.tree, 0, &cfg);
    Ok(search.result(selected, Some(improved), done))
}
