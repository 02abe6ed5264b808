use std::fmt::Write as _;

use crate::action::Action;

use super::SearchError;

/// Running bounds of backed-up Q values for normalisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMaxStats {
    pub min: f64,
    pub max: f64,
}

impl Default for MinMaxStats {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl MinMaxStats {
    pub fn update(&mut self, q: f64) {
        self.min = self.min.min(q);
        self.max = self.max.max(q);
    }

    /// `(q - min) / (max - min)`, or `q` itself when the bounds are unset or
    /// degenerate.
    pub fn normalize(&self, q: f64) -> f64 {
        if self.max > self.min {
            (q - self.min) / (self.max - self.min)
        } else {
            q
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Decision,
    Chance,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EdgeLabel {
    Action(Action),
    Outcome(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub label: EdgeLabel,
    pub prior: f64,
    /// Raw policy logit (log prior for sampled and factored policies).
    pub logit: f64,
    pub child: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Node<S> {
    pub parent: Option<usize>,
    pub kind: NodeKind,
    pub visit_count: u32,
    /// Sum of backed-up values, each from this node's `to_play` perspective.
    pub value_sum: f64,
    /// Reward on the edge into this node, to the player who moved.
    pub reward: f64,
    pub to_play: usize,
    pub terminal: bool,
    /// Value estimate produced when the node was expanded.
    pub value_estimate: f64,
    pub edges: Vec<Edge>,
    pub state: Option<S>,
}

impl<S> Node<S> {
    pub fn mean_value(&self) -> Option<f64> {
        (self.visit_count > 0).then(|| self.value_sum / self.visit_count as f64)
    }
}

/// Arena of search nodes; the root is node 0.
#[derive(Clone, Debug)]
pub struct Tree<S> {
    pub nodes: Vec<Node<S>>,
    pub minmax: MinMaxStats,
    pub discount: f64,
    pub two_player: bool,
}

impl<S> Tree<S> {
    pub fn new(discount: f64, two_player: bool) -> Self {
        Self {
            nodes: Vec::new(),
            minmax: MinMaxStats::default(),
            discount,
            two_player,
        }
    }

    pub fn root(&self) -> &Node<S> {
        &self.nodes[0]
    }

    pub fn push(&mut self, node: Node<S>) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn edge_factors(&self, parent: usize, child: usize) -> (f64, f64) {
        let c = &self.nodes[child];
        let disc = match c.kind {
            NodeKind::Chance => 1.0,
            NodeKind::Decision => self.discount,
        };
        let sign = if self.two_player && c.to_play != self.nodes[parent].to_play {
            -1.0
        } else {
            1.0
        };
        (disc, sign)
    }

    /// Q of the edge `parent -> child` from the parent's perspective.
    pub fn child_q(&self, parent: usize, child: usize) -> Option<f64> {
        let c = &self.nodes[child];
        let v = c.mean_value()?;
        let (disc, sign) = self.edge_factors(parent, child);
        Some(c.reward + disc * sign * v)
    }

    /// Normalised Q of every edge of `node`; `None` where unvisited.
    pub fn edge_q(&self, node: usize) -> Vec<Option<f64>> {
        self.nodes[node]
            .edges
            .iter()
            .map(|e| e.child.and_then(|c| self.child_q(node, c)).map(|q| self.minmax.normalize(q)))
            .collect()
    }

    pub fn edge_visits(&self, node: usize) -> Vec<u32> {
        self.nodes[node]
            .edges
            .iter()
            .map(|e| e.child.map_or(0, |c| self.nodes[c].visit_count))
            .collect()
    }

    /// PUCT selection with unvisited children valued at the visit-weighted
    /// mean of their visited siblings (0.5 when none is visited).
    pub fn puct_select(&self, node: usize, c1: f64, c2: f64) -> Result<usize, SearchError> {
        let n = &self.nodes[node];
        if n.kind != NodeKind::Decision {
            return Err(SearchError::WrongNodeKind);
        }
        if n.edges.is_empty() {
            return Err(SearchError::Unexpanded);
        }
        let qs = self.edge_q(node);
        let visits = self.edge_visits(node);
        let scores = puct_scores(&n.edges.iter().map(|e| e.prior).collect::<Vec<_>>(), &visits, &qs, n.visit_count, c1, c2);
        Ok(first_argmax(&scores))
    }

    /// Propagates `leaf_value` (from the leaf's perspective) up `path`.
    pub fn backup(&mut self, path: &[usize], leaf_value: f64) {
        let mut g = leaf_value;
        for i in (0..path.len()).rev() {
            let id = path[i];
            self.nodes[id].visit_count += 1;
            self.nodes[id].value_sum += g;
            if i > 0 {
                let parent = path[i - 1];
                let (disc, sign) = self.edge_factors(parent, id);
                g = self.nodes[id].reward + disc * sign * g;
                let q = self.child_q(parent, id).expect("just visited");
                self.minmax.update(q);
            }
        }
    }

    /// Flat text dump: id, parent, edge label, N, W/N, P, reward.
    pub fn dump(&self) -> String {
        let mut out = String::from("id\tparent\tlabel\tN\tQ\tP\treward\n");
        let mut incoming: Vec<Option<(&EdgeLabel, f64)>> = vec![None; self.nodes.len()];
        for node in &self.nodes {
            for e in &node.edges {
                if let Some(c) = e.child {
                    incoming[c] = Some((&e.label, e.prior));
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            let (label, prior) = match incoming[id] {
                Some((EdgeLabel::Action(Action::Discrete(a)), p)) => (format!("a{a}"), p),
                Some((EdgeLabel::Action(Action::Continuous(v)), p)) => (format!("{v:.3?}"), p),
                Some((EdgeLabel::Outcome(o), p)) => (format!("c{o}"), p),
                None => ("-".into(), 1.0),
            };
            let parent = node.parent.map_or("-".into(), |p| p.to_string());
            let _ = writeln!(
                out,
                "{id}\t{parent}\t{label}\t{}\t{:.6}\t{:.6}\t{:.6}",
                node.visit_count,
                node.mean_value().unwrap_or(0.0),
                prior,
                node.reward
            );
        }
        out
    }
}

/// PUCT score of every edge:
/// `Q + P * sqrt(N_parent) / (1 + N) * (c1 + ln((N_parent + c2 + 1) / c2))`.
pub fn puct_scores(priors: &[f64], visits: &[u32], qs: &[Option<f64>], parent_visits: u32, c1: f64, c2: f64) -> Vec<f64> {
    let (mut weighted, mut total) = (0.0, 0u32);
    for (q, n) in qs.iter().zip(visits) {
        if let Some(q) = q {
            weighted += q * *n as f64;
            total += n;
        }
    }
    let fallback = if total > 0 { weighted / total as f64 } else { 0.5 };
    let np = parent_visits as f64;
    let c = c1 + ((np + c2 + 1.0) / c2).ln();
    priors
        .iter()
        .zip(visits)
        .zip(qs)
        .map(|((p, n), q)| q.unwrap_or(fallback) + p * np.sqrt() / (1.0 + *n as f64) * c)
        .collect()
}

/// Index of the largest value, lowest index on ties.
pub fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
