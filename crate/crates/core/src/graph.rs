//! Spatial structure: point clouds, kNN graphs (spatial and feature space),
//! farthest point sampling, neighborhood max-pooling and nearest upsampling.
//!
//! All neighbor searches are exact brute force with partial selection; desk
//! scale needs no spatial index. Distance ties always resolve to the smaller
//! index so results are deterministic and testable.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A point set with optional per-point attributes and labels.
///
/// When attributes are present their first three columns are the xyz
/// positions; columns 3..6, when present, hold unit normals.
#[derive(Clone, Debug)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    attr_width: usize,
    attributes: Vec<f64>,
    point_labels: Option<Vec<usize>>,
    shape_label: Option<usize>,
    category_onehot: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<PointCloud> {
        if positions.is_empty() {
            return Err(Error::config("point cloud needs at least one point"));
        }
        Ok(PointCloud {
            positions,
            attr_width: 0,
            attributes: Vec::new(),
            point_labels: None,
            shape_label: None,
            category_onehot: None,
        })
    }

    /// Attach an attribute matrix; width >= 3 and the first three columns
    /// must be the positions.
    pub fn with_attributes(mut self, width: usize, attributes: Vec<f64>) -> Result<PointCloud> {
        if width < 3 || attributes.len() != self.positions.len() * width {
            return Err(Error::dim(format!(
                "attributes: {} values for {} points at width {width}",
                attributes.len(),
                self.positions.len()
            )));
        }
        for (i, p) in self.positions.iter().enumerate() {
            let row = &attributes[i * width..i * width + 3];
            if row != p.as_slice() {
                return Err(Error::contract(format!(
                    "attribute row {i} does not start with the point position"
                )));
            }
        }
        self.attr_width = width;
        self.attributes = attributes;
        Ok(self)
    }

    /// Convenience: attributes = xyz followed by unit normals.
    pub fn with_normals(self, normals: &[[f64; 3]]) -> Result<PointCloud> {
        if normals.len() != self.positions.len() {
            return Err(Error::dim(format!(
                "{} normals for {} points",
                normals.len(),
                self.positions.len()
            )));
        }
        let mut attrs = Vec::with_capacity(self.positions.len() * 6);
        for (p, n) in self.positions.iter().zip(normals) {
            attrs.extend_from_slice(p);
            attrs.extend_from_slice(n);
        }
        let width = 6;
        self.with_attributes(width, attrs)
    }

    pub fn with_point_labels(mut self, labels: Vec<usize>) -> Result<PointCloud> {
        if labels.len() != self.positions.len() {
            return Err(Error::dim(format!(
                "{} labels for {} points",
                labels.len(),
                self.positions.len()
            )));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    pub fn with_shape_label(mut self, label: usize) -> PointCloud {
        self.shape_label = Some(label);
        self
    }

    pub fn with_category_onehot(mut self, onehot: Vec<f64>) -> Result<PointCloud> {
        let ones = onehot.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || onehot.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(
                "category one-hot must contain exactly one 1",
            ));
        }
        self.category_onehot = Some(onehot);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn attributes(&self) -> Option<(usize, &[f64])> {
        if self.attr_width == 0 {
            None
        } else {
            Some((self.attr_width, &self.attributes))
        }
    }

    pub fn normals(&self) -> Option<Vec<[f64; 3]>> {
        if self.attr_width < 6 {
            return None;
        }
        Some(
            (0..self.len())
                .map(|i| {
                    let r = &self.attributes[i * self.attr_width + 3..i * self.attr_width + 6];
                    [r[0], r[1], r[2]]
                })
                .collect(),
        )
    }

    pub fn point_labels(&self) -> Option<&[usize]> {
        self.point_labels.as_deref()
    }

    pub fn shape_label(&self) -> Option<usize> {
        self.shape_label
    }

    pub fn category_onehot(&self) -> Option<&[f64]> {
        self.category_onehot.as_deref()
    }

    /// Category index recovered from the one-hot vector.
    pub fn category(&self) -> Option<usize> {
        self.category_onehot
            .as_ref()
            .and_then(|v| v.iter().position(|&x| x == 1.0))
    }

    /// Apply a rigid/per-point transform to the positions, keeping the xyz
    /// attribute prefix in sync. Normals and other columns are untouched.
    pub fn map_positions(&mut self, mut f: impl FnMut(usize, [f64; 3]) -> [f64; 3]) {
        for (i, p) in self.positions.iter_mut().enumerate() {
            *p = f(i, *p);
            if self.attr_width >= 3 {
                self.attributes[i * self.attr_width..i * self.attr_width + 3]
                    .copy_from_slice(p.as_slice());
            }
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.positions {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        for a in c.iter_mut() {
            *a /= self.positions.len() as f64;
        }
        c
    }

    /// Radius of the bounding sphere around the centroid.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.positions
            .iter()
            .map(|p| dist2(p, &c).sqrt())
            .fold(0.0, f64::max)
    }

    /// Positions as an [N, 3] tensor.
    pub fn positions_tensor(&self) -> Tensor {
        let mut v = Vec::with_capacity(self.len() * 3);
        for p in &self.positions {
            v.extend_from_slice(p);
        }
        Tensor::from_vec(v, &[self.len(), 3]).expect("positions tensor")
    }

    /// Keep only the points at `indices` (labels/attributes follow).
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let mut positions = Vec::with_capacity(indices.len());
        let mut attributes = Vec::with_capacity(indices.len() * self.attr_width);
        let mut labels = self.point_labels.as_ref().map(|_| Vec::new());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    len: self.len(),
                });
            }
            positions.push(self.positions[i]);
            if self.attr_width > 0 {
                attributes
                    .extend_from_slice(&self.attributes[i * self.attr_width..(i + 1) * self.attr_width]);
            }
            if let (Some(out), Some(src)) = (labels.as_mut(), self.point_labels.as_ref()) {
                out.push(src[i]);
            }
        }
        let mut cloud = PointCloud::new(positions)?;
        if self.attr_width > 0 {
            cloud = cloud.with_attributes(self.attr_width, attributes)?;
        }
        if let Some(l) = labels {
            cloud = cloud.with_point_labels(l)?;
        }
        if let Some(s) = self.shape_label {
            cloud = cloud.with_shape_label(s);
        }
        if let Some(oh) = &self.category_onehot {
            cloud = cloud.with_category_onehot(oh.clone())?;
        }
        Ok(cloud)
    }
}

pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// k nearest neighbors per point, self-loop stored first in every row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    pub k: usize,
    pub idx: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn from_rows(k: usize, idx: Vec<Vec<usize>>) -> Result<NeighborGraph> {
        let n = idx.len();
        for (i, row) in idx.iter().enumerate() {
            if row.len() != k {
                return Err(Error::dim(format!(
                    "neighbor row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            if row[0] != i {
                return Err(Error::contract(format!(
                    "neighbor row {i} must start with its own index"
                )));
            }
            for (a, &j) in row.iter().enumerate() {
                if j >= n {
                    return Err(Error::Index { index: j, len: n });
                }
                if row[..a].contains(&j) {
                    return Err(Error::contract(format!(
                        "duplicate neighbor {j} in row {i}"
                    )));
                }
            }
        }
        Ok(NeighborGraph { k, idx })
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }
}

/// Nearest rows of `rows` (width `d`, count `n`) to the `query` row, by
/// squared Euclidean distance, ties to the smaller index. Returns `take`
/// indices excluding `skip` (the query itself when searching in-set).
fn nearest_indices(
    rows: &[f64],
    n: usize,
    d: usize,
    query: &[f64],
    skip: Option<usize>,
    take: usize,
) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for j in 0..n {
        if skip == Some(j) {
            continue;
        }
        let row = &rows[j * d..(j + 1) * d];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(query) {
            let t = a - b;
            acc += t * t;
        }
        cand.push((acc, j));
    }
    let take = take.min(cand.len());
    if take == 0 {
        return Vec::new();
    }
    let by = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    };
    if take < cand.len() {
        cand.select_nth_unstable_by(take - 1, by);
        cand.truncate(take);
    }
    cand.sort_unstable_by(by);
    cand.into_iter().map(|(_, j)| j).collect()
}

fn knn_rows(rows: &[f64], n: usize, d: usize, k: usize) -> Result<NeighborGraph> {
    if k < 1 || k > n {
        return Err(Error::config(format!(
            "k = {k} must satisfy 1 <= k <= {n} points"
        )));
    }
    let mut idx = Vec::with_capacity(n);
    for i in 0..n {
        let query = &rows[i * d..(i + 1) * d];
        let mut row = Vec::with_capacity(k);
        row.push(i);
        row.extend(nearest_indices(rows, n, d, query, Some(i), k - 1));
        idx.push(row);
    }
    NeighborGraph::from_rows(k, idx)
}

/// kNN in xyz space: row i is the point itself followed by its k-1 nearest
/// other points.
pub fn knn_spatial(points: &[[f64; 3]], k: usize) -> Result<NeighborGraph> {
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    knn_rows(&flat, points.len(), 3, k)
}

/// kNN in feature space over the rows of an [N, D] matrix.
pub fn knn_feature(features: &[f64], n: usize, d: usize, k: usize) -> Result<NeighborGraph> {
    if features.len() != n * d {
        return Err(Error::dim(format!(
            "knn_feature: {} values for {n} x {d}",
            features.len()
        )));
    }
    knn_rows(features, n, d, k)
}

/// Greedy farthest point sampling starting from `seed`: each pick maximizes
/// the minimum distance to the already-selected set, ties to the smaller
/// index. Output is in selection order.
pub fn farthest_point_sample(
    points: &[[f64; 3]],
    count: usize,
    seed: usize,
) -> Result<Vec<usize>> {
    let n = points.len();
    if count < 1 || count > n {
        return Err(Error::config(format!(
            "sample count {count} must satisfy 1 <= count <= {n}"
        )));
    }
    if seed >= n {
        return Err(Error::Index {
            index: seed,
            len: n,
        });
    }
    let mut selected = Vec::with_capacity(count);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut last = seed;
    selected.push(seed);
    for _ in 1..count {
        let lp = &points[last];
        let mut best = f64::NEG_INFINITY;
        let mut best_j = usize::MAX;
        for j in 0..n {
            let d = dist2(&points[j], lp);
            if d < min_d2[j] {
                min_d2[j] = d;
            }
            if !selected.contains(&j) && min_d2[j] > best {
                best = min_d2[j];
                best_j = j;
            }
        }
        selected.push(best_j);
        last = best_j;
    }
    Ok(selected)
}

/// Index of the point farthest from the centroid; a permutation-stable seed
/// for farthest point sampling when all pairwise distances are distinct.
pub fn centroid_farthest_index(points: &[[f64; 3]]) -> usize {
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for a in c.iter_mut() {
        *a /= points.len() as f64;
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_i = 0;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &c);
        if d > best {
            best = d;
            best_i = i;
        }
    }
    best_i
}

/// Channel-wise max of `features` over each sampled center's k nearest
/// points in the full pre-pool cloud (self included). Positions pass
/// through. Differentiable in `features`.
pub fn pool_max(
    features: &Tensor,
    points: &[[f64; 3]],
    sampled: &[usize],
    k: usize,
) -> Result<(Tensor, Vec<[f64; 3]>)> {
    let n = points.len();
    if features.shape().len() != 2 || features.shape()[0] != n {
        return Err(Error::dim(format!(
            "pool_max: features {:?} for {n} points",
            features.shape()
        )));
    }
    if k < 1 || k > n {
        return Err(Error::config(format!(
            "k = {k} must satisfy 1 <= k <= {n} points"
        )));
    }
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    let mut rows = Vec::with_capacity(sampled.len());
    let mut out_points = Vec::with_capacity(sampled.len());
    for &c in sampled {
        if c >= n {
            return Err(Error::Index { index: c, len: n });
        }
        let mut row = Vec::with_capacity(k);
        row.push(c);
        row.extend(nearest_indices(&flat, n, 3, &flat[c * 3..c * 3 + 3], Some(c), k - 1));
        rows.push(row);
        out_points.push(points[c]);
    }
    let gathered = features.gather_rows(&rows)?; // [S, k, D]
    let (pooled, _) = gathered.reduce_max_axis(1)?;
    Ok((pooled, out_points))
}

/// Copy each full-resolution point's feature from its nearest sampled point
/// (ties to the smaller sampled index). Differentiable in `features_sub`.
pub fn nearest_upsample(
    features_sub: &Tensor,
    points_sub: &[[f64; 3]],
    points_full: &[[f64; 3]],
) -> Result<Tensor> {
    let s = points_sub.len();
    if s == 0 {
        return Err(Error::config("nearest_upsample: empty sub-cloud"));
    }
    if features_sub.shape().len() != 2 || features_sub.shape()[0] != s {
        return Err(Error::dim(format!(
            "nearest_upsample: features {:?} for {s} sub points",
            features_sub.shape()
        )));
    }
    let d = features_sub.shape()[1];
    let rows: Vec<Vec<usize>> = points_full
        .iter()
        .map(|p| {
            let mut best = f64::INFINITY;
            let mut best_j = 0usize;
            for (j, q) in points_sub.iter().enumerate() {
                let dd = dist2(p, q);
                if dd < best {
                    best = dd;
                    best_j = j;
                }
            }
            vec![best_j]
        })
        .collect();
    features_sub
        .gather_rows(&rows)?
        .reshape(&[points_full.len(), d])
}
