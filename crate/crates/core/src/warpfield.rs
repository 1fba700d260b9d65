//! Embedded-deformation node graph: construction, skinning weights, and
//! warping of points and normals.
//!
//! A warp is the composition of a per-point blend of node affine
//! transforms with a global rigid pose:
//!
//! ```text
//! warped(v) = R * sum_j w_j(v) * [A_j (v - g_j) + g_j + t_j] + T
//! ```

use std::collections::BTreeMap;
use std::io::Write;

use crate::{Error, Mat3, Result, Vec3};

/// One embedded-deformation node.
#[derive(Debug, Clone, PartialEq)]
pub struct EdNode {
    /// Node position in the model frame.
    pub position: Vec3,
    /// Quasi-rotation affine; kept near-orthonormal by the rotation energy
    /// term, not by construction.
    pub affine: Mat3,
    pub translation: Vec3,
    /// Indices of the nearest other nodes; never contains the node itself.
    pub neighbors: Vec<usize>,
}

impl EdNode {
    pub fn at(position: Vec3) -> Self {
        Self { position, affine: Mat3::identity(), translation: Vec3::zeros(), neighbors: Vec::new() }
    }
}

/// Full deformation state: node graph plus global rigid pose.
#[derive(Debug, Clone)]
pub struct WarpField {
    pub nodes: Vec<EdNode>,
    /// Global rotation (model frame to camera frame).
    pub rotation: Mat3,
    /// Global translation in mm.
    pub translation: Vec3,
    /// Nodes blended per point.
    pub skin_count: usize,
    /// Node grid cell size in mm.
    pub grid: f64,
}

/// Blend weights of one point over its nearest nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Skinning {
    pub node_ids: Vec<usize>,
    /// Non-negative, sums to one.
    pub weights: Vec<f64>,
}

/// Nodes at the centroids of occupied grid cells, each wired to its
/// `neighbor_count` nearest other nodes (ties to the lower index).
pub fn build_node_graph(points: &[Vec3], grid: f64, neighbor_count: usize) -> Result<Vec<EdNode>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("node graph needs at least one point"));
    }
    if grid <= 0.0 {
        return Err(Error::Config(format!("node grid must be positive, got {grid}")));
    }
    let mut cells: BTreeMap<(i64, i64, i64), (Vec3, usize)> = BTreeMap::new();
    for p in points {
        let key = (
            (p.x / grid).floor() as i64,
            (p.y / grid).floor() as i64,
            (p.z / grid).floor() as i64,
        );
        let entry = cells.entry(key).or_insert((Vec3::zeros(), 0));
        entry.0 += p;
        entry.1 += 1;
    }
    let mut nodes: Vec<EdNode> =
        cells.values().map(|(sum, n)| EdNode::at(sum / *n as f64)).collect();
    let count = nodes.len();
    let positions: Vec<Vec3> = nodes.iter().map(|n| n.position).collect();
    for (j, node) in nodes.iter_mut().enumerate() {
        let mut others: Vec<(f64, usize)> = positions
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != j)
            .map(|(i, p)| ((p - positions[j]).norm(), i))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        node.neighbors = others.iter().take(neighbor_count.min(count - 1)).map(|&(_, i)| i).collect();
    }
    Ok(nodes)
}

impl WarpField {
    /// Identity pose over a freshly built node graph.
    pub fn from_points(
        points: &[Vec3],
        grid: f64,
        skin_count: usize,
        neighbor_count: usize,
    ) -> Result<Self> {
        Ok(Self {
            nodes: build_node_graph(points, grid, neighbor_count)?,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            skin_count,
            grid,
        })
    }

    /// Replace the node graph, keeping the global pose. Used after fusing a
    /// frame, once the deformation has been committed into the points.
    pub fn regenerate_nodes(&mut self, points: &[Vec3], neighbor_count: usize) -> Result<()> {
        self.nodes = build_node_graph(points, self.grid, neighbor_count)?;
        Ok(())
    }

    /// Apply the global rigid pose only.
    pub fn rigid(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Invert the global rigid pose.
    pub fn rigid_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Number of scalar optimization variables: 12 per node plus the
    /// 6-dof global pose.
    pub fn variable_count(&self) -> usize {
        12 * self.nodes.len() + 6
    }

    /// Plain-text dump of the deformation state, for fixtures and
    /// debugging.
    pub fn write_debug_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "nodes {} skin {} grid {}", self.nodes.len(), self.skin_count, self.grid)?;
        let fmt_mat = |m: &Mat3| {
            let mut s = String::new();
            for r in 0..3 {
                for c in 0..3 {
                    s.push_str(&format!("{} ", m[(r, c)]));
                }
            }
            s
        };
        writeln!(w, "pose {}{} {} {}", fmt_mat(&self.rotation), self.translation.x, self.translation.y, self.translation.z)?;
        for (i, n) in self.nodes.iter().enumerate() {
            writeln!(
                w,
                "node {i} g {} {} {} A {}t {} {} {} nbr {}",
                n.position.x,
                n.position.y,
                n.position.z,
                fmt_mat(&n.affine),
                n.translation.x,
                n.translation.y,
                n.translation.z,
                n.neighbors.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
            )?;
        }
        Ok(())
    }
}

/// Blend weights of `v` over the `skin_count` nearest nodes, per the
/// distance falloff `1 - d/d_max` with `d_max` the distance to the
/// `(k+1)`-th nearest node, then normalized to sum one.
///
/// With fewer than `k+1` nodes, all nodes contribute and `d_max` is padded
/// to 1.05x the farthest distance. Degenerate all-zero raw weights fall
/// back to a uniform blend.
pub fn compute_skinning(v: &Vec3, field: &WarpField) -> Skinning {
    let mut dists: Vec<(f64, usize)> = field
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| ((n.position - v).norm(), i))
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = field.skin_count.max(1);
    let (selected, d_max) = if dists.len() > k {
        (&dists[..k], dists[k].0)
    } else {
        (&dists[..], dists.last().map(|d| d.0 * 1.05).unwrap_or(1.0))
    };
    let node_ids: Vec<usize> = selected.iter().map(|&(_, i)| i).collect();
    let mut weights: Vec<f64> = if d_max < 1e-12 {
        vec![1.0; node_ids.len()]
    } else {
        selected.iter().map(|&(d, _)| 1.0 - d / d_max).collect()
    };
    let sum: f64 = weights.iter().sum();
    if sum < 1e-12 {
        weights = vec![1.0 / node_ids.len() as f64; node_ids.len()];
    } else {
        for w in &mut weights {
            *w /= sum;
        }
    }
    Skinning { node_ids, weights }
}

/// Node-blend part of the warp, without the global rigid pose.
pub fn deform_point(v: &Vec3, skin: &Skinning, field: &WarpField) -> Vec3 {
    let mut out = Vec3::zeros();
    for (&j, &w) in skin.node_ids.iter().zip(&skin.weights) {
        let node = &field.nodes[j];
        out += w * (node.affine * (v - node.position) + node.position + node.translation);
    }
    out
}

/// Full warp: node blend followed by the global rigid pose.
pub fn warp_point(v: &Vec3, skin: &Skinning, field: &WarpField) -> Vec3 {
    field.rotation * deform_point(v, skin, field) + field.translation
}

/// Node-blend part of the normal warp (inverse-transpose of each affine),
/// not normalized and without the global rotation.
pub fn deform_normal(n: &Vec3, skin: &Skinning, field: &WarpField) -> Vec3 {
    let mut out = Vec3::zeros();
    for (&j, &w) in skin.node_ids.iter().zip(&skin.weights) {
        let a = &field.nodes[j].affine;
        let transformed = if a.determinant().abs() < 1e-9 {
            a * n
        } else {
            a.try_inverse().unwrap().transpose() * n
        };
        out += w * transformed;
    }
    out
}

/// Warp a unit normal: blended inverse-transpose affines, rotated by the
/// global pose and re-normalized.
pub fn warp_normal(n: &Vec3, skin: &Skinning, field: &WarpField) -> Result<Vec3> {
    let out = field.rotation * deform_normal(n, skin, field);
    let len = out.norm();
    if len < 1e-12 {
        return Err(Error::DegenerateWarp);
    }
    Ok(out / len)
}
