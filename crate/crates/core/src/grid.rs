//! Time partitions of [0, T] with geometric refinement toward the horizon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Construction parameters for [`TimeGrid::graded`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Uniform intervals covering `[0, (1 - tail_fraction) T]`.
    pub uniform_intervals: usize,
    /// Geometrically graded nodes inside the tail.
    pub graded_nodes: usize,
    /// Fraction of the horizon covered by the graded tail.
    pub tail_fraction: f64,
    /// Distance of the last graded node from `T`, relative to `T`.
    pub min_gap: f64,
    /// Terminal cutoff relative to `T`.
    pub eps_fraction: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            uniform_intervals: 2000,
            graded_nodes: 200,
            tail_fraction: 0.01,
            min_gap: 1e-7,
            eps_fraction: 1e-4,
        }
    }
}

impl GridSpec {
    /// Same layout with twice as many nodes in both parts.
    pub fn doubled(&self) -> Self {
        Self {
            uniform_intervals: 2 * self.uniform_intervals,
            graded_nodes: 2 * self.graded_nodes,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    nodes: Vec<f64>,
    eps_t: f64,
}

impl TimeGrid {
    /// Validate and wrap an explicit node list.
    pub fn from_nodes(nodes: Vec<f64>, eps_t: f64) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Grid("at least two nodes are required".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::Grid(format!("first node must be 0, got {}", nodes[0])));
        }
        if let Some(i) = nodes.iter().position(|t| !t.is_finite()) {
            return Err(Error::Grid(format!("node {i} is not finite")));
        }
        if let Some(i) = nodes.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Grid(format!(
                "nodes must be strictly increasing (node {} = {} >= node {} = {})",
                i,
                nodes[i],
                i + 1,
                nodes[i + 1]
            )));
        }
        let horizon = nodes[nodes.len() - 1];
        if !(eps_t > 0.0 && eps_t < horizon / 10.0) {
            return Err(Error::Grid(format!(
                "eps_T = {eps_t} must lie in (0, T/10) with T = {horizon}"
            )));
        }
        Ok(Self { horizon, nodes, eps_t })
    }

    /// Uniform nodes on the bulk of the horizon followed by a geometric tail.
    pub fn graded(horizon: f64, spec: &GridSpec) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Grid(format!("horizon must be positive, got {horizon}")));
        }
        if spec.uniform_intervals == 0 {
            return Err(Error::Grid("uniform_intervals must be positive".into()));
        }
        if !(spec.tail_fraction >= 0.0 && spec.tail_fraction < 1.0) {
            return Err(Error::Grid("tail_fraction must lie in [0, 1)".into()));
        }
        if spec.graded_nodes > 0 && !(spec.min_gap > 0.0 && spec.min_gap < spec.tail_fraction) {
            return Err(Error::Grid("min_gap must lie in (0, tail_fraction)".into()));
        }
        let bulk = horizon * (1.0 - spec.tail_fraction);
        let n = spec.uniform_intervals;
        let mut nodes: Vec<f64> = (0..=n).map(|i| bulk * i as f64 / n as f64).collect();
        if spec.graded_nodes > 0 && spec.tail_fraction > 0.0 {
            let tail = horizon * spec.tail_fraction;
            let ratio = (spec.min_gap / spec.tail_fraction).powf(1.0 / spec.graded_nodes as f64);
            for k in 1..=spec.graded_nodes {
                nodes.push(horizon - tail * ratio.powi(k as i32));
            }
        }
        if spec.tail_fraction > 0.0 {
            nodes.push(horizon);
        }
        Self::from_nodes(nodes, spec.eps_fraction * horizon)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn eps_t(&self) -> f64 {
        self.eps_t
    }

    /// Latest time at which singular quantities are evaluated.
    pub fn cutoff(&self) -> f64 {
        self.horizon - self.eps_t
    }

    /// Number of leading nodes with `t <= T - eps_T`.
    pub fn interior_len(&self) -> usize {
        let cut = self.cutoff();
        self.nodes.partition_point(|&t| t <= cut)
    }

    /// Largest spacing between consecutive nodes.
    pub fn max_step(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// `t0` followed by every node strictly after it.
    pub fn restart_nodes(&self, t0: f64) -> Vec<f64> {
        let first = self.nodes.partition_point(|&t| t <= t0);
        let mut out = Vec::with_capacity(self.nodes.len() - first + 1);
        out.push(t0);
        out.extend_from_slice(&self.nodes[first..]);
        out
    }

    /// Index of the node equal to `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.nodes.partition_point(|&s| s < t);
        (i < self.nodes.len() && self.nodes[i] == t).then_some(i)
    }

    /// Index of the node nearest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let i = self.nodes.partition_point(|&s| s < t);
        if i == 0 {
            return 0;
        }
        if i >= self.nodes.len() {
            return self.nodes.len() - 1;
        }
        if (self.nodes[i] - t) < (t - self.nodes[i - 1]) {
            i
        } else {
            i - 1
        }
    }

    /// Linear interpolation of nodal `values` at `t`.
    pub fn interpolate(&self, values: &[f64], t: f64) -> f64 {
        debug_assert_eq!(values.len(), self.nodes.len());
        if t <= 0.0 {
            return values[0];
        }
        if t >= self.horizon {
            return values[values.len() - 1];
        }
        let i = self.nodes.partition_point(|&s| s <= t) - 1;
        let w = (t - self.nodes[i]) / (self.nodes[i + 1] - self.nodes[i]);
        (1.0 - w) * values[i] + w * values[i + 1]
    }

    /// True when both grids carry identical nodes and cutoff.
    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.eps_t == other.eps_t && self.nodes == other.nodes
    }
}

pub(crate) fn ensure_same_grid(a: &TimeGrid, b: &TimeGrid, what: &str) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch(what.to_string()))
    }
}
