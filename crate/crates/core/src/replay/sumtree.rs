use serde::{Deserialize, Serialize};

/// Binary sum tree over a fixed number of non-negative leaves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumTree {
    leaves: usize,
    width: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(leaves: usize) -> Self {
        let width = leaves.max(1).next_power_of_two();
        Self {
            leaves,
            width,
            nodes: vec![0.0; 2 * width],
        }
    }

    pub fn len(&self) -> usize {
        self.leaves
    }

    pub fn is_empty(&self) -> bool {
        self.leaves == 0
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.width + leaf]
    }

    pub fn set(&mut self, leaf: usize, value: f64) {
        assert!(leaf < self.leaves && value >= 0.0 && value.is_finite());
        let mut i = self.width + leaf;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass` in `[0, total)`.
    pub fn find(&self, mass: f64) -> usize {
        let mut m = mass.clamp(0.0, self.total());
        let mut i = 1;
        while i < self.width {
            let left = self.nodes[2 * i];
            if m < left || self.nodes[2 * i + 1] <= 0.0 {
                i *= 2;
            } else {
                m -= left;
                i = 2 * i + 1;
            }
        }
        let mut leaf = i - self.width;
        // Guard against landing on an empty leaf through rounding.
        while self.get(leaf) <= 0.0 && leaf > 0 {
            leaf -= 1;
        }
        leaf
    }
}

/// Binary max tree over a fixed number of non-negative leaves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxTree {
    width: usize,
    nodes: Vec<f64>,
}

impl MaxTree {
    pub fn new(leaves: usize) -> Self {
        let width = leaves.max(1).next_power_of_two();
        Self {
            width,
            nodes: vec![0.0; 2 * width],
        }
    }

    pub fn max(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.width + leaf]
    }

    pub fn set(&mut self, leaf: usize, value: f64) {
        let mut i = self.width + leaf;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i].max(self.nodes[2 * i + 1]);
        }
    }
}
