//! The 4D motion scaffold: SE(3) trajectory nodes connected by a KNN graph.
//!
//! Dense Gaussians are bound to the scaffold through their nearest node and
//! that node's neighbors. The same interpolation weights drive both the
//! blended deformation and the blended base features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{blend_dual_quaternions, DualQuaternion, SE3Pose, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaffoldError {
    #[error("trajectory lengths differ ({0} vs {1})")]
    TrajectoryLength(usize, usize),
    #[error("K = {k} requires more than {k} nodes, got {nodes}")]
    KTooLarge { k: usize, nodes: usize },
    #[error("K must be positive")]
    ZeroK,
    #[error("scaffold has no nodes")]
    EmptyGraph,
    #[error("timestep {timestep} out of range (scaffold has {count})")]
    TimestepOutOfRange { timestep: usize, count: usize },
    #[error("anchor node {0} out of range")]
    InvalidAnchor(usize),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid scaffold: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryNode {
    /// One pose per timestep.
    pub poses: Vec<SE3Pose>,
    pub radius: f64,
}

impl TrajectoryNode {
    pub fn new(poses: Vec<SE3Pose>, radius: f64) -> Self {
        Self { poses, radius }
    }

    /// A node that stays at `p` with identity rotation for `timesteps` frames.
    pub fn stationary(p: Vec3, timesteps: usize, radius: f64) -> Self {
        Self { poses: vec![SE3Pose::from_translation(p.x, p.y, p.z); timesteps], radius }
    }

    pub fn translation(&self, timestep: usize) -> Vec3 {
        self.poses[timestep].translation
    }
}

/// Chebyshev-over-time distance: the largest translation gap at any timestep.
pub fn trajectory_distance(a: &TrajectoryNode, b: &TrajectoryNode) -> Result<f64, ScaffoldError> {
    if a.poses.len() != b.poses.len() {
        return Err(ScaffoldError::TrajectoryLength(a.poses.len(), b.poses.len()));
    }
    Ok(a.poses
        .iter()
        .zip(&b.poses)
        .map(|(pa, pb)| (pa.translation - pb.translation).norm())
        .fold(0.0, f64::max))
}

/// K nearest neighbors of every node under [`trajectory_distance`], ties
/// broken by lower index. Self-edges are excluded.
pub fn build_knn(nodes: &[TrajectoryNode], k: usize) -> Result<Vec<Vec<usize>>, ScaffoldError> {
    if k == 0 {
        return Err(ScaffoldError::ZeroK);
    }
    if k >= nodes.len() {
        return Err(ScaffoldError::KTooLarge { k, nodes: nodes.len() });
    }
    let m = nodes.len();
    let mut dist = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = trajectory_distance(&nodes[i], &nodes[j])?;
            dist[i * m + j] = d;
            dist[j * m + i] = d;
        }
    }
    Ok((0..m)
        .map(|i| {
            let mut others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| dist[i * m + a].total_cmp(&dist[i * m + b]).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaffoldGraph {
    pub nodes: Vec<TrajectoryNode>,
    pub edges: Vec<Vec<usize>>,
    pub k: usize,
    pub latent_dim: usize,
    /// Row-major `nodes.len() × latent_dim` base features.
    pub base_features: Vec<f64>,
}

impl ScaffoldGraph {
    /// Builds the KNN edges and validates the result.
    pub fn new(
        nodes: Vec<TrajectoryNode>,
        k: usize,
        latent_dim: usize,
        base_features: Vec<f64>,
    ) -> Result<Self, ScaffoldError> {
        let edges = build_knn(&nodes, k)?;
        let graph = Self { nodes, edges, k, latent_dim, base_features };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<(), ScaffoldError> {
        let m = self.nodes.len();
        if m == 0 {
            return Err(ScaffoldError::EmptyGraph);
        }
        let t = self.nodes[0].poses.len();
        if t == 0 {
            return Err(ScaffoldError::Invalid("trajectories are empty".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.poses.len() != t {
                return Err(ScaffoldError::TrajectoryLength(t, node.poses.len()));
            }
            if !(node.radius > 0.0) || !node.radius.is_finite() {
                return Err(ScaffoldError::Invalid(format!("node {i} has radius {}", node.radius)));
            }
        }
        if self.edges.len() != m {
            return Err(ScaffoldError::Invalid(format!("{} edge lists for {m} nodes", self.edges.len())));
        }
        for (i, list) in self.edges.iter().enumerate() {
            if list.len() != self.k {
                return Err(ScaffoldError::Invalid(format!("node {i} has {} edges, K = {}", list.len(), self.k)));
            }
            if list.iter().any(|&j| j >= m || j == i) {
                return Err(ScaffoldError::Invalid(format!("node {i} has an invalid edge")));
            }
        }
        if self.base_features.len() != m * self.latent_dim {
            return Err(ScaffoldError::LengthMismatch {
                expected: m * self.latent_dim,
                got: self.base_features.len(),
            });
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn timesteps(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.poses.len())
    }

    pub fn base_feature(&self, node: usize) -> &[f64] {
        let d = self.latent_dim;
        &self.base_features[node * d..(node + 1) * d]
    }

    /// KNN edges as unordered pairs `(i, j)` with `i < j`, each listed once.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .edges
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().map(move |&j| (i.min(j), i.max(j))))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    pub fn check_timestep(&self, timestep: usize) -> Result<(), ScaffoldError> {
        let count = self.timesteps();
        if timestep >= count {
            Err(ScaffoldError::TimestepOutOfRange { timestep, count })
        } else {
            Ok(())
        }
    }

    /// Node translations flattened node-major, then timestep, then xyz.
    pub fn translations_flat(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .flat_map(|n| n.poses.iter().flat_map(|p| [p.translation.x, p.translation.y, p.translation.z]))
            .collect()
    }

    pub fn set_translations_flat(&mut self, flat: &[f64]) -> Result<(), ScaffoldError> {
        let expected = self.nodes.len() * self.timesteps() * 3;
        if flat.len() != expected {
            return Err(ScaffoldError::LengthMismatch { expected, got: flat.len() });
        }
        let mut chunks = flat.chunks_exact(3);
        for node in &mut self.nodes {
            for pose in &mut node.poses {
                let c = chunks.next().expect("length checked");
                pose.translation = Vec3::new(c[0], c[1], c[2]);
            }
        }
        Ok(())
    }

    /// Interpolated feature of a bound Gaussian.
    pub fn binding_feature(&self, binding: &GaussianBinding) -> Vec<f64> {
        let rows: Vec<&[f64]> = self.edges[binding.anchor].iter().map(|&i| self.base_feature(i)).collect();
        interp_feature(&binding.neighbor_weights, &rows).expect("binding validated against graph")
    }
}

/// Index of the node nearest to `x` at `timestep`, ties broken by lower index.
pub fn nearest_node(x: &Vec3, timestep: usize, graph: &ScaffoldGraph) -> Result<usize, ScaffoldError> {
    if graph.nodes.is_empty() {
        return Err(ScaffoldError::EmptyGraph);
    }
    graph.check_timestep(timestep)?;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, node) in graph.nodes.iter().enumerate() {
        let d = (node.translation(timestep) - x).norm_squared();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

/// Pre-normalization weight terms for one binding.
#[derive(Debug, Clone)]
pub(crate) struct WeightTerms {
    /// Clamped terms `max(0, exp(-d²/2r) + Δw)`.
    pub terms: Vec<f64>,
    /// Whether each term was above the clamp.
    pub active: Vec<bool>,
    pub sum: f64,
}

impl WeightTerms {
    pub fn weights(&self) -> Vec<f64> {
        if self.sum > 0.0 {
            self.terms.iter().map(|t| t / self.sum).collect()
        } else {
            vec![1.0 / self.terms.len() as f64; self.terms.len()]
        }
    }

    /// Chain rule from weight gradients to offset gradients through the
    /// clamp and the normalization.
    pub fn offset_grad(&self, weight_grad: &[f64]) -> Vec<f64> {
        if self.sum <= 0.0 {
            return vec![0.0; self.terms.len()];
        }
        let weights = self.weights();
        let mean: f64 = weight_grad.iter().zip(&weights).map(|(g, w)| g * w).sum();
        weight_grad
            .iter()
            .zip(&self.active)
            .map(|(g, &on)| if on { (g - mean) / self.sum } else { 0.0 })
            .collect()
    }
}

pub(crate) fn weight_terms(
    mu: &Vec3,
    timestep: usize,
    anchor: usize,
    offsets: &[f64],
    graph: &ScaffoldGraph,
) -> Result<WeightTerms, ScaffoldError> {
    graph.check_timestep(timestep)?;
    let neighbors = graph.edges.get(anchor).ok_or(ScaffoldError::InvalidAnchor(anchor))?;
    if offsets.len() != neighbors.len() {
        return Err(ScaffoldError::LengthMismatch { expected: neighbors.len(), got: offsets.len() });
    }
    let mut terms = Vec::with_capacity(neighbors.len());
    let mut active = Vec::with_capacity(neighbors.len());
    for (&i, &dw) in neighbors.iter().zip(offsets) {
        let node = &graph.nodes[i];
        let d2 = (mu - node.translation(timestep)).norm_squared();
        // The exponent divides by 2r (radius, not radius squared).
        let raw = (-d2 / (2.0 * node.radius)).exp() + dw;
        active.push(raw > 0.0);
        terms.push(raw.max(0.0));
    }
    let sum = terms.iter().sum();
    Ok(WeightTerms { terms, active, sum })
}

/// Interpolation weights over the anchor's K neighbors. Terms are clamped at
/// zero before normalizing; if every term clamps, the weights are uniform.
pub fn interp_weights(
    mu: &Vec3,
    timestep: usize,
    anchor: usize,
    offsets: &[f64],
    graph: &ScaffoldGraph,
) -> Result<Vec<f64>, ScaffoldError> {
    Ok(weight_terms(mu, timestep, anchor, offsets, graph)?.weights())
}

/// Binding of a dynamic Gaussian to the scaffold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBinding {
    pub anchor: usize,
    pub neighbor_weights: Vec<f64>,
    pub weight_offsets: Vec<f64>,
}

impl GaussianBinding {
    /// Binds a Gaussian at `mu` (observed at `timestep`) with zero offsets.
    pub fn bind(mu: &Vec3, timestep: usize, graph: &ScaffoldGraph) -> Result<Self, ScaffoldError> {
        let anchor = nearest_node(mu, timestep, graph)?;
        let weight_offsets = vec![0.0; graph.k];
        let neighbor_weights = interp_weights(mu, timestep, anchor, &weight_offsets, graph)?;
        Ok(Self { anchor, neighbor_weights, weight_offsets })
    }

    /// Recomputes the weights after offsets or node translations changed.
    pub fn refresh(&mut self, mu: &Vec3, timestep: usize, graph: &ScaffoldGraph) -> Result<(), ScaffoldError> {
        self.neighbor_weights = interp_weights(mu, timestep, self.anchor, &self.weight_offsets, graph)?;
        Ok(())
    }

    pub fn neighbors<'a>(&self, graph: &'a ScaffoldGraph) -> &'a [usize] {
        &graph.edges[self.anchor]
    }
}

/// Blended relative transform `DQB({w_i, Q_to Q_from⁻¹})` for a bound Gaussian.
///
/// `mu` is accepted for interface symmetry with [`interp_weights`]; the
/// binding's cached weights are assumed current for `(mu, from)`.
pub fn warp_transform(
    _mu: &Vec3,
    from: usize,
    to: usize,
    binding: &GaussianBinding,
    graph: &ScaffoldGraph,
) -> Result<SE3Pose, ScaffoldError> {
    graph.check_timestep(from)?;
    graph.check_timestep(to)?;
    let neighbors = graph.edges.get(binding.anchor).ok_or(ScaffoldError::InvalidAnchor(binding.anchor))?;
    if binding.neighbor_weights.len() != neighbors.len() {
        return Err(ScaffoldError::LengthMismatch {
            expected: neighbors.len(),
            got: binding.neighbor_weights.len(),
        });
    }
    if from == to {
        return Ok(SE3Pose::identity());
    }
    let relative = neighbors.iter().map(|&i| {
        let node = &graph.nodes[i];
        DualQuaternion::from_pose(&node.poses[to].compose(&node.poses[from].inverse()))
    });
    Ok(blend_dual_quaternions(&binding.neighbor_weights, relative))
}

/// Convex combination `Σ w_i h_i` of neighbor features.
pub fn interp_feature(weights: &[f64], neighbor_features: &[&[f64]]) -> Result<Vec<f64>, ScaffoldError> {
    if weights.len() != neighbor_features.len() {
        return Err(ScaffoldError::LengthMismatch { expected: neighbor_features.len(), got: weights.len() });
    }
    let dim = neighbor_features.first().map_or(0, |r| r.len());
    let mut out = vec![0.0; dim];
    for (&w, row) in weights.iter().zip(neighbor_features) {
        if row.len() != dim {
            return Err(ScaffoldError::LengthMismatch { expected: dim, got: row.len() });
        }
        for (o, h) in out.iter_mut().zip(*row) {
            *o += w * h;
        }
    }
    Ok(out)
}

/// Loss value with its gradient w.r.t. node translations (layout of
/// [`ScaffoldGraph::translations_flat`]).
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn flat_index(node: usize, timestep: usize, timesteps: usize) -> usize {
    (node * timesteps + timestep) * 3
}

fn add3(grad: &mut [f64], at: usize, v: &Vec3, s: f64) {
    grad[at] += s * v.x;
    grad[at + 1] += s * v.y;
    grad[at + 2] += s * v.z;
}

/// Edge-length preservation between consecutive frames, summed over the
/// undirected KNN edges: `Σ_{i,j} Σ_τ (‖t_τ^i − t_τ^j‖ − ‖t_τ+1^i − t_τ+1^j‖)²`.
pub fn arap_loss(graph: &ScaffoldGraph) -> GeometricLoss {
    let t = graph.timesteps();
    let mut grad = vec![0.0; graph.nodes.len() * t * 3];
    let mut value = 0.0;
    for (i, j) in graph.undirected_edges() {
        for tau in 0..t.saturating_sub(1) {
            let d0v = graph.nodes[i].translation(tau) - graph.nodes[j].translation(tau);
            let d1v = graph.nodes[i].translation(tau + 1) - graph.nodes[j].translation(tau + 1);
            let (d0, d1) = (d0v.norm(), d1v.norm());
            let r = d0 - d1;
            value += r * r;
            if d0 > 0.0 {
                let u = d0v / d0;
                add3(&mut grad, flat_index(i, tau, t), &u, 2.0 * r);
                add3(&mut grad, flat_index(j, tau, t), &u, -2.0 * r);
            }
            if d1 > 0.0 {
                let u = d1v / d1;
                add3(&mut grad, flat_index(i, tau + 1, t), &u, -2.0 * r);
                add3(&mut grad, flat_index(j, tau + 1, t), &u, 2.0 * r);
            }
        }
    }
    GeometricLoss { value, grad }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessLosses {
    pub velocity: GeometricLoss,
    pub acceleration: GeometricLoss,
}

/// Squared first and second temporal differences of node translations.
pub fn smoothness_losses(graph: &ScaffoldGraph) -> SmoothnessLosses {
    let t = graph.timesteps();
    let n = graph.nodes.len() * t * 3;
    let mut velocity = GeometricLoss { value: 0.0, grad: vec![0.0; n] };
    let mut acceleration = GeometricLoss { value: 0.0, grad: vec![0.0; n] };
    for (i, node) in graph.nodes.iter().enumerate() {
        for tau in 0..t.saturating_sub(1) {
            let v = node.translation(tau + 1) - node.translation(tau);
            velocity.value += v.norm_squared();
            add3(&mut velocity.grad, flat_index(i, tau + 1, t), &v, 2.0);
            add3(&mut velocity.grad, flat_index(i, tau, t), &v, -2.0);
        }
        for tau in 1..t.saturating_sub(1) {
            let a = node.translation(tau + 1) - 2.0 * node.translation(tau) + node.translation(tau - 1);
            acceleration.value += a.norm_squared();
            add3(&mut acceleration.grad, flat_index(i, tau + 1, t), &a, 2.0);
            add3(&mut acceleration.grad, flat_index(i, tau, t), &a, -4.0);
            add3(&mut acceleration.grad, flat_index(i, tau - 1, t), &a, 2.0);
        }
    }
    SmoothnessLosses { velocity, acceleration }
}
