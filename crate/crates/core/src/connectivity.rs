//! Functional connectivity on node time series: nuisance regression, Pearson
//! correlation matrices, degrees, split-half reproducibility, QC-FC, seed
//! maps and carpet matrices.

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Volume3, Volume4};

const CORRELATION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub label: String,
    /// world coordinates, mm
    pub coords: [f64; 3],
    /// linear voxel indices of the member voxels
    pub voxels: Vec<usize>,
}

/// Nodes with unique labels and at least one member voxel each.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct NodeSet {
    nodes: Vec<Node>,
}

impl<'de> Deserialize<'de> for NodeSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let nodes = Vec::<Node>::deserialize(d)?;
        NodeSet::new(nodes).map_err(serde::de::Error::custom)
    }
}

impl NodeSet {
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &nodes {
            if !seen.insert(n.label.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate node label '{}'", n.label)));
            }
            if n.voxels.is_empty() {
                return Err(Error::InvalidArgument(format!("node '{}' has no voxels", n.label)));
            }
            if n.coords.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("coordinates of node '{}'", n.label)));
            }
        }
        Ok(NodeSet { nodes })
    }

    /// One node per positive integer label, at the centroid of its voxels.
    /// Nodes are ordered by label.
    pub fn from_label_volume(labels: &Volume3) -> Result<Self> {
        let grid = labels.grid();
        let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &v) in labels.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite("label volume".into()));
            }
            let l = v.round() as i64;
            if l > 0 {
                members.entry(l).or_default().push(i);
            }
        }
        let nodes = members
            .into_iter()
            .map(|(l, voxels)| {
                let sum = voxels.iter().fold(nalgebra::Vector3::zeros(), |acc, &i| acc + grid.voxel_center(i));
                let c = sum / voxels.len() as f64;
                Node { label: l.to_string(), coords: [c[0], c[1], c[2]], voxels }
            })
            .collect();
        NodeSet::new(nodes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The nodes at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let nodes = indices
            .iter()
            .map(|&i| {
                self.nodes
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("node index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        NodeSet::new(nodes)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        self.nodes.iter().map(|n| n.coords).collect()
    }
}

/// N × M matrix of node time courses (rows = nodes, columns = frames).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTimeSeries {
    values: DMatrix<f64>,
    nodes: NodeSet,
}

impl NodeTimeSeries {
    pub fn new(values: DMatrix<f64>, nodes: NodeSet) -> Result<Self> {
        if values.nrows() != nodes.len() {
            return Err(Error::LengthMismatch { expected: nodes.len(), found: values.nrows() });
        }
        if values.ncols() < 2 {
            return Err(Error::InvalidArgument("node time series need at least 2 frames".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("node time series".into()));
        }
        Ok(NodeTimeSeries { values, nodes })
    }

    /// Series with nodes labeled "0", "1", … and no voxel membership beyond
    /// a placeholder, for data that does not come from an image.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidArgument("rows of unequal length".into()));
        }
        let nodes = (0..rows.len())
            .map(|i| Node { label: i.to_string(), coords: [0.0; 3], voxels: vec![i] })
            .collect();
        let values = DMatrix::from_fn(rows.len(), m, |i, t| rows[i][t]);
        NodeTimeSeries::new(values, NodeSet::new(nodes)?)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nodes(&self) -> &NodeSet {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Frames `start..start + len` of every node.
    pub fn frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_frames() {
            return Err(Error::InvalidArgument("frame range out of bounds".into()));
        }
        NodeTimeSeries::new(self.values.columns(start, len).into_owned(), self.nodes.clone())
    }
}

/// Symmetric N × N Pearson matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    values: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::InvalidArgument("correlation matrix must be square".into()));
        }
        for i in 0..n {
            if values[(i, i)] != 1.0 {
                return Err(Error::InvalidArgument("correlation matrix diagonal must be 1".into()));
            }
            for j in 0..n {
                let v = values[(i, j)];
                if !v.is_finite() || v.abs() > 1.0 + CORRELATION_SLACK || (v - values[(j, i)]).abs() > CORRELATION_SLACK {
                    return Err(Error::InvalidArgument(format!("invalid correlation entry ({i}, {j})")));
                }
            }
        }
        Ok(CorrelationMatrix { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Entries (i, j) with i < j, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.n();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).collect()
    }
}

/// Mean over each node's member voxels, per frame.
pub fn extract_node_series(series: &Volume4, nodes: &NodeSet) -> Result<NodeTimeSeries> {
    let len = series.grid().len();
    for n in nodes.nodes() {
        if let Some(&bad) = n.voxels.iter().find(|&&i| i >= len) {
            return Err(Error::InvalidArgument(format!(
                "voxel index {bad} of node '{}' outside grid of {len} voxels",
                n.label
            )));
        }
    }
    let frames = series.frames();
    let values = DMatrix::from_fn(nodes.len(), frames.len(), |i, t| {
        let n = &nodes.nodes()[i];
        let d = frames[t].data();
        n.voxels.iter().map(|&v| d[v]).sum::<f64>() / n.voxels.len() as f64
    });
    NodeTimeSeries::new(values, nodes.clone())
}

/// Regress an intercept and the leading `n_components` principal components
/// of the row-demeaned `nuisance` matrix (K signals × M frames) out of every
/// node time course; returns the residuals. Components with a singular value
/// below `1e-12` times the largest (or all, for an all-zero matrix) carry no
/// signal and are skipped.
pub fn nuisance_regress(series: &NodeTimeSeries, nuisance: &DMatrix<f64>, n_components: usize) -> Result<NodeTimeSeries> {
    let m = series.n_frames();
    if nuisance.ncols() != m {
        return Err(Error::LengthMismatch { expected: m, found: nuisance.ncols() });
    }
    if m < n_components + 1 {
        return Err(Error::InvalidArgument(format!(
            "{m} frames cannot support {n_components} components plus an intercept"
        )));
    }
    if nuisance.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("nuisance signals".into()));
    }
    let mut centered = nuisance.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let mut design = vec![nalgebra::DVector::from_element(m, 1.0)];
    if n_components > 0 && centered.nrows() > 0 {
        let svd = centered.clone().svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let top = svd.singular_values.max();
        for &k in order.iter().take(n_components) {
            if svd.singular_values[k] > 1e-12 * top && top > 0.0 {
                design.push(v_t.row(k).transpose());
            }
        }
    }
    let x = DMatrix::from_columns(&design);
    let q = x.qr().q();
    let y = series.values().transpose();
    let residual = &y - &q * (q.transpose() * &y);
    NodeTimeSeries::new(residual.transpose(), series.nodes().clone())
}

fn centered_rows(series: &NodeTimeSeries) -> Result<Vec<(Vec<f64>, f64)>> {
    (0..series.n_nodes())
        .map(|i| {
            let row = series.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let c: Vec<f64> = row.iter().map(|v| v - mean).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || norm <= 1e-12 * mean.abs() * (row.len() as f64).sqrt() {
                return Err(Error::ZeroVariance(series.nodes().nodes()[i].label.clone()));
            }
            Ok((c, norm))
        })
        .collect()
}

/// Pearson correlation of every pair of node time courses over all frames.
pub fn correlation_matrix(series: &NodeTimeSeries) -> Result<CorrelationMatrix> {
    let rows = centered_rows(series)?;
    let n = rows.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    let dot: f64 = rows[i].0.iter().zip(&rows[j].0).map(|(a, b)| a * b).sum();
                    let r = dot / (rows[i].1 * rows[j].1);
                    debug_assert!(r.abs() <= 1.0 + CORRELATION_SLACK, "correlation {r} out of range");
                    r.clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();
    let mut values = DMatrix::identity(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (k, &r) in row.iter().enumerate() {
            values[(i, i + 1 + k)] = r;
            values[(i + 1 + k, i)] = r;
        }
    }
    CorrelationMatrix::new(values)
}

/// Mean absolute difference of the off-diagonal correlations of the first
/// and second halves. With odd M the middle frame belongs to the first half.
pub fn correlation_difference(series: &NodeTimeSeries) -> Result<f64> {
    let m = series.n_frames();
    if m < 4 {
        return Err(Error::InvalidArgument("correlation difference needs at least 4 frames".into()));
    }
    if series.n_nodes() < 2 {
        return Err(Error::InvalidArgument("correlation difference needs at least 2 nodes".into()));
    }
    let first = m.div_ceil(2);
    let u = correlation_matrix(&series.frames(0, first)?)?.upper_triangle();
    let v = correlation_matrix(&series.frames(first, m - first)?)?.upper_triangle();
    Ok(u.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum::<f64>() / u.len() as f64)
}

/// Number of other nodes each node correlates with at `threshold` or above.
pub fn degree_values(cm: &CorrelationMatrix, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("degree threshold {threshold} outside (0, 1)")));
    }
    let n = cm.n();
    Ok((0..n).map(|i| (0..n).filter(|&j| j != i && cm.get(i, j) >= threshold).count()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcFcEdge {
    pub i: usize,
    pub j: usize,
    /// Euclidean distance between the node coordinates, mm
    pub distance: f64,
    /// correlation across subjects of edge FC with mean FD; `None` when the
    /// edge FC (or FD) does not vary across subjects
    pub qcfc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcFc {
    pub edges: Vec<QcFcEdge>,
    /// least-squares slope of QC-FC against distance, per mm
    pub slope: f64,
    pub intercept: f64,
    /// edges without a defined QC-FC value
    pub excluded: usize,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let scale_a = 1e-12 * ma.abs() * n.sqrt();
    let scale_b = 1e-12 * mb.abs() * n.sqrt();
    if saa.sqrt() <= scale_a || sbb.sqrt() <= scale_b || saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-edge correlation of FC with mean framewise displacement across
/// subjects, and its linear trend with inter-node distance.
pub fn qcfc_slope(fc: &[CorrelationMatrix], mean_fd: &[f64], coords: &[[f64; 3]]) -> Result<QcFc> {
    if fc.len() < 3 {
        return Err(Error::InvalidArgument(format!("QC-FC needs at least 3 subjects, got {}", fc.len())));
    }
    if mean_fd.len() != fc.len() {
        return Err(Error::LengthMismatch { expected: fc.len(), found: mean_fd.len() });
    }
    let n = fc[0].n();
    if let Some(m) = fc.iter().find(|m| m.n() != n) {
        return Err(Error::LengthMismatch { expected: n, found: m.n() });
    }
    if coords.len() != n {
        return Err(Error::LengthMismatch { expected: n, found: coords.len() });
    }
    let edges: Vec<QcFcEdge> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| {
            let values: Vec<f64> = fc.iter().map(|m| m.get(i, j)).collect();
            let d = coords[i].iter().zip(&coords[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            QcFcEdge { i, j, distance: d, qcfc: pearson(&values, mean_fd) }
        })
        .collect();
    let pts: Vec<(f64, f64)> = edges.iter().filter_map(|e| e.qcfc.map(|q| (e.distance, q))).collect();
    let excluded = edges.len() - pts.len();
    if pts.len() < 2 {
        return Err(Error::IllPosed(format!("only {} edges with defined QC-FC", pts.len())));
    }
    let k = pts.len() as f64;
    let md = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let mq = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sdd: f64 = pts.iter().map(|p| (p.0 - md) * (p.0 - md)).sum();
    if sdd <= 0.0 {
        return Err(Error::IllPosed("all edges have the same length".into()));
    }
    let slope = pts.iter().map(|p| (p.0 - md) * (p.1 - mq)).sum::<f64>() / sdd;
    Ok(QcFc { edges, slope, intercept: mq - slope * md, excluded })
}

/// Pearson correlation of every brain voxel with the mean seed time course.
/// Voxels outside the brain, and brain voxels with a constant time course,
/// map to 0.
pub fn seed_correlation_map(series: &Volume4, seed_mask: &Volume3, brain_mask: &Volume3) -> Result<Volume3> {
    let grid = series.grid();
    for m in [seed_mask, brain_mask] {
        if m.grid().dims() != grid.dims() {
            return Err(Error::InvalidGrid("masks must share the series grid".into()));
        }
    }
    let seed: Vec<usize> = seed_mask.mask_bits().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    let brain = brain_mask.mask_bits();
    if seed.is_empty() || !brain.iter().any(|&b| b) {
        return Err(Error::InvalidArgument("seed and brain masks must be nonempty".into()));
    }
    let frames = series.frames();
    let seed_series: Vec<f64> = frames
        .iter()
        .map(|f| seed.iter().map(|&i| f.data()[i]).sum::<f64>() / seed.len() as f64)
        .collect();
    if pearson(&seed_series, &seed_series).is_none() {
        return Err(Error::ZeroVariance("seed".into()));
    }
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if !brain[i] {
                return 0.0;
            }
            pearson(&series.voxel_series(i), &seed_series).unwrap_or(0.0)
        })
        .collect();
    Volume3::new(grid.clone(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Carpet {
    /// rows z-scored over time (population standard deviation)
    pub values: DMatrix<f64>,
    /// rows that were constant and are emitted as zeros
    pub constant_rows: Vec<bool>,
}

/// Z-score every node time course for carpet plotting.
pub fn carpet_matrix(series: &NodeTimeSeries) -> Carpet {
    let m = series.n_frames();
    let mut values = series.values().clone();
    let mut constant_rows = Vec::with_capacity(series.n_nodes());
    for mut row in values.row_iter_mut() {
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let sd = var.sqrt();
        let constant = sd == 0.0 || sd <= 1e-12 * mean.abs();
        constant_rows.push(constant);
        for v in row.iter_mut() {
            *v = if constant { 0.0 } else { (*v - mean) / sd };
        }
    }
    Carpet { values, constant_rows }
}
