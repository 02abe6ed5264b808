use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::tree::{first_argmax, Node, NodeKind};
use super::SearchError;

/// `(1 - weight) * p + weight * d` with `d ~ Dir(alpha)`.
pub fn add_dirichlet_noise<R: Rng + ?Sized>(
    priors: &[f64],
    alpha: f64,
    weight: f64,
    rng: &mut R,
) -> Result<Vec<f64>, SearchError> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(SearchError::InvalidConfig(format!("noise weight {weight} outside [0, 1]")));
    }
    if weight == 0.0 || priors.is_empty() {
        return Ok(priors.to_vec());
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| SearchError::InvalidConfig(e.to_string()))?;
    let mut d: Vec<f64> = (0..priors.len()).map(|_| gamma.sample(rng)).collect();
    let total: f64 = d.iter().sum();
    if total > 0.0 && total.is_finite() {
        d.iter_mut().for_each(|x| *x /= total);
    } else {
        d.fill(1.0 / priors.len() as f64);
    }
    Ok(priors.iter().zip(&d).map(|(p, n)| (1.0 - weight) * p + weight * n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionSelection {
    /// Most visited, lowest index on ties.
    Argmax,
    Temperature(f64),
}

/// `N(a)^(1/T) / sum N^(1/T)`, computed in the log domain.
pub fn visit_probabilities(visits: &[u32], temperature: f64) -> Result<Vec<f64>, SearchError> {
    if visits.iter().all(|n| *n == 0) {
        return Err(SearchError::NoVisits);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(SearchError::InvalidConfig(format!("temperature {temperature}")));
    }
    let logs: Vec<f64> = visits
        .iter()
        .map(|n| if *n == 0 { f64::NEG_INFINITY } else { (*n as f64).ln() / temperature })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / total).collect())
}

pub fn sample_action_from_visits<R: Rng + ?Sized>(
    visits: &[u32],
    selection: ActionSelection,
    rng: &mut R,
) -> Result<usize, SearchError> {
    match selection {
        ActionSelection::Argmax => {
            if visits.iter().all(|n| *n == 0) {
                return Err(SearchError::NoVisits);
            }
            let v: Vec<f64> = visits.iter().map(|n| *n as f64).collect();
            Ok(first_argmax(&v))
        }
        ActionSelection::Temperature(t) => {
            let p = visit_probabilities(visits, t)?;
            Ok(sample_categorical(&p, rng).expect("non-empty distribution"))
        }
    }
}

/// Index drawn with probability proportional to `weights`.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Outcome edge of a chance node, drawn from the outcome priors.
pub fn chance_node_select<S, R: Rng + ?Sized>(node: &Node<S>, rng: &mut R) -> Result<usize, SearchError> {
    if node.kind != NodeKind::Chance {
        return Err(SearchError::WrongNodeKind);
    }
    let priors: Vec<f64> = node.edges.iter().map(|e| e.prior).collect();
    sample_categorical(&priors, rng).ok_or(SearchError::EmptyOutcomes)
}

/// Standard Gumbel(0, 1) draw.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}
