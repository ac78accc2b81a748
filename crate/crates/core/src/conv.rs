//! Graph convolution layers over point neighborhoods.
//!
//! `AdaptConvLayer` generates a per-edge kernel from the edge's feature pair
//! and convolves it with the edge's geometric vector; `GraphConvLayer` is the
//! fixed-kernel baseline sharing the same feature input, and
//! `AttentionLayer` covers the two attentional-weighting baselines. All
//! layers aggregate edge features with a channel-wise max (attention uses a
//! weighted sum) and share the normalization-then-activation ordering.
//!
//! Every layer can process a batch of clouds in one application: the
//! per-cloud edge batches are stacked so batch normalization sees the whole
//! batch (training statistics then match what eval-mode running statistics
//! describe), and the stacked result is split back per cloud before the
//! neighborhood aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NeighborGraph, PointCloud};
use crate::layers::{Affine, BatchNorm};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Pass, Tensor};

/// What the generated kernel is convolved with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvolveWith {
    /// Edge vectors of the xyz positions (width 6).
    Spatial,
    /// Edge vectors of the current layer features (width 2 * d_in).
    Feature,
    /// Edge vectors of the point normals (width 6).
    Normal,
    /// Edge vectors of xyz plus normals (width 12).
    InitialAttributes,
}

impl ConvolveWith {
    /// Width of the per-edge geometry vector (and so of each kernel row).
    pub fn geometry_width(&self, d_in: usize) -> usize {
        match self {
            ConvolveWith::Spatial | ConvolveWith::Normal => 6,
            ConvolveWith::Feature => 2 * d_in,
            ConvolveWith::InitialAttributes => 12,
        }
    }
}

/// Geometry sources a layer can convolve against at one resolution scale.
/// Positions/normals follow the current (possibly pooled) point set.
pub struct GeometryCtx<'a> {
    pub positions: &'a [[f64; 3]],
    pub normals: Option<&'a [[f64; 3]]>,
}

impl<'a> GeometryCtx<'a> {
    pub fn from_cloud(cloud: &'a PointCloud, normals: Option<&'a [[f64; 3]]>) -> GeometryCtx<'a> {
        GeometryCtx {
            positions: cloud.positions(),
            normals,
        }
    }

    fn values(&self, variant: ConvolveWith, features: &Tensor) -> Result<Tensor> {
        let n = self.positions.len();
        let xyz = || -> Tensor {
            let mut v = Vec::with_capacity(n * 3);
            for p in self.positions {
                v.extend_from_slice(p);
            }
            Tensor::from_vec(v, &[n, 3]).expect("xyz tensor")
        };
        let normals = || -> Result<Tensor> {
            let nm = self.normals.ok_or_else(|| {
                Error::config("variant needs point normals but the cloud has none")
            })?;
            let mut v = Vec::with_capacity(n * 3);
            for p in nm {
                v.extend_from_slice(p);
            }
            Tensor::from_vec(v, &[n, 3])
        };
        match variant {
            ConvolveWith::Spatial => Ok(xyz()),
            ConvolveWith::Feature => Ok(features.clone()),
            ConvolveWith::Normal => normals(),
            ConvolveWith::InitialAttributes => Tensor::concat(&[xyz(), normals()?], 1),
        }
    }
}

/// One cloud's contribution to a batched layer application. The index rows
/// describe the output neighborhoods (first entry is each row's center) and
/// point into this cloud's feature rows.
pub struct ConvInput<'a> {
    pub geom: GeometryCtx<'a>,
    pub features: &'a Tensor,
    pub idx: &'a [Vec<usize>],
}

/// Per-edge pair encoding: out[i][j] = [v_center, v_neighbor - v_center]
/// over the rows of `idx` (the center is each row's first entry).
pub fn delta_pairs(values: &Tensor, idx: &[Vec<usize>]) -> Result<Tensor> {
    if values.shape().len() != 2 {
        return Err(Error::dim(format!(
            "delta_pairs: expected [N, W] values, got {:?}",
            values.shape()
        )));
    }
    values.gather_pairs(idx)
}

/// Neighbor-minus-center differences as a flat [N*k, W] matrix.
fn edge_differences(values: &Tensor, idx: &[Vec<usize>], width: usize) -> Result<Tensor> {
    let k = idx.first().map(|r| r.len()).unwrap_or(0);
    let center_rows: Vec<Vec<usize>> = idx.iter().map(|row| vec![row[0]; k]).collect();
    let center = values.gather_rows(&center_rows)?;
    let diff = values.gather_rows(idx)?.sub(&center)?;
    diff.reshape(&[idx.len() * k, width])
}

/// Rough forward-pass footprint of the per-edge kernel tensor, in bytes.
/// The feature-convolving variant grows with the layer width and is the one
/// worth warning about.
pub fn kernel_memory_estimate(n: usize, k: usize, m: usize, c: usize) -> usize {
    n * k * m * c * std::mem::size_of::<f64>()
}

fn concat_rows(mut parts: Vec<Tensor>) -> Result<Tensor> {
    if parts.len() == 1 {
        Ok(parts.pop().unwrap())
    } else {
        Tensor::concat(&parts, 0)
    }
}

/// Split a stacked [sum(r*k), m] tensor back into per-input [r, k, m] blocks
/// and max-pool each over its neighborhoods.
fn split_and_max(stacked: &Tensor, shapes: &[(usize, usize)], m: usize) -> Result<Vec<Tensor>> {
    let mut outs = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(r, k) in shapes {
        let block = if shapes.len() == 1 {
            stacked.clone()
        } else {
            stacked.slice_rows(offset, r * k)?
        };
        outs.push(block.reshape(&[r, k, m])?.reduce_max_axis(1)?.0);
        offset += r * k;
    }
    Ok(outs)
}

/// Adaptive-kernel convolution layer.
///
/// The kernel generator is a two-layer MLP (2*d_in -> hidden -> m*c) with a
/// parallel affine projection (2*d_in -> m*c) added to its output as the
/// residual path. Per edge, the generated kernel is reshaped to [m, c] and
/// contracted with the edge's geometry vector; edge responses are batch
/// normalized per output channel, activated, then max-pooled over each
/// neighborhood.
#[derive(Clone, Debug)]
pub struct AdaptConvLayer {
    pub d_in: usize,
    pub m: usize,
    pub c: usize,
    pub hidden: usize,
    pub variant: ConvolveWith,
    pub slope: f64,
    kernel_l1: Affine,
    kernel_l2: Affine,
    residual: Affine,
    norm: BatchNorm,
}

impl AdaptConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        m: usize,
        hidden: Option<usize>,
        variant: ConvolveWith,
        norm_enabled: bool,
        slope: f64,
    ) -> Result<AdaptConvLayer> {
        let c = variant.geometry_width(d_in);
        let hidden = hidden.unwrap_or((m * c) / 2).max(1);
        Ok(AdaptConvLayer {
            d_in,
            m,
            c,
            hidden,
            variant,
            slope,
            kernel_l1: Affine::new(store, rng, &format!("{name}.kernel1"), 2 * d_in, hidden)?,
            kernel_l2: Affine::new(store, rng, &format!("{name}.kernel2"), hidden, m * c)?,
            residual: Affine::new(store, rng, &format!("{name}.residual"), 2 * d_in, m * c)?,
            norm: BatchNorm::new(store, &format!("{name}.norm"), m, norm_enabled)?,
        })
    }

    /// Kernel generator on a flat [E, 2*d_in] edge batch -> [E, m*c].
    fn kernel_flat(&self, pass: &Pass, flat: &Tensor) -> Result<Tensor> {
        let h = self.kernel_l1.forward(pass, flat)?.leaky_relu(self.slope);
        // main path and residual projection land in one output buffer
        let w2 = pass.param(&format!("{}.w", self.kernel_l2.name))?;
        let b2 = pass.param(&format!("{}.b", self.kernel_l2.name))?;
        let wr = pass.param(&format!("{}.w", self.residual.name))?;
        let br = pass.param(&format!("{}.b", self.residual.name))?;
        let bias = b2.add(&br)?;
        Tensor::linear2(&h, &w2, flat, &wr, Some(&bias))
    }

    /// Generate the per-edge kernels: [N, k, 2*d_in] -> [N, k, m, c].
    /// Edges with identical feature pairs get identical kernels; the same
    /// weights are shared across all edges.
    pub fn adaptive_kernel(&self, pass: &Pass, delta_f: &Tensor) -> Result<Tensor> {
        let s = delta_f.shape();
        if s.len() != 3 || s[2] != 2 * self.d_in {
            return Err(Error::dim(format!(
                "adaptive_kernel: expected [N, k, {}], got {s:?}",
                2 * self.d_in
            )));
        }
        let (n, k) = (s[0], s[1]);
        let flat = delta_f.reshape(&[n * k, 2 * self.d_in])?;
        self.kernel_flat(pass, &flat)?
            .reshape(&[n, k, self.m, self.c])
    }

    pub fn forward(
        &self,
        pass: &Pass,
        geom: &GeometryCtx,
        features: &Tensor,
        graph: &NeighborGraph,
        variant: ConvolveWith,
    ) -> Result<Tensor> {
        if variant != self.variant {
            return Err(Error::config(format!(
                "layer was built for {:?}, asked to convolve with {:?}",
                self.variant, variant
            )));
        }
        let input = ConvInput {
            geom: GeometryCtx {
                positions: geom.positions,
                normals: geom.normals,
            },
            features,
            idx: &graph.idx,
        };
        Ok(self.forward_many(pass, &[input])?.pop().unwrap())
    }

    /// Apply the layer to a batch of clouds. Edge responses from all inputs
    /// share one normalization batch.
    pub fn forward_many(&self, pass: &Pass, inputs: &[ConvInput]) -> Result<Vec<Tensor>> {
        let mut shapes = Vec::with_capacity(inputs.len());
        let mut delta_fs = Vec::with_capacity(inputs.len());
        let mut delta_geos = Vec::with_capacity(inputs.len());
        for inp in inputs {
            if inp.features.shape().len() != 2 || inp.features.shape()[1] != self.d_in {
                return Err(Error::dim(format!(
                    "adaptive conv: expected [N, {}] features, got {:?}",
                    self.d_in,
                    inp.features.shape()
                )));
            }
            let df = delta_pairs(inp.features, inp.idx)?;
            let geo_values = inp.geom.values(self.variant, inp.features)?;
            let dg = delta_pairs(&geo_values, inp.idx)?;
            if dg.shape()[2] != self.c {
                return Err(Error::dim(format!(
                    "geometry width {} does not match kernel width {}",
                    dg.shape()[2],
                    self.c
                )));
            }
            let (r, k) = (df.shape()[0], df.shape()[1]);
            shapes.push((r, k));
            delta_fs.push(df.reshape(&[r * k, 2 * self.d_in])?);
            delta_geos.push(dg.reshape(&[r * k, self.c])?);
        }
        let flat = concat_rows(delta_fs)?;
        let geo = concat_rows(delta_geos)?;
        let edges = flat.shape()[0];
        let kernel = self.kernel_flat(pass, &flat)?;
        let responses = Tensor::edge_inner_product(
            &kernel.reshape(&[edges, 1, self.m, self.c])?,
            &geo.reshape(&[edges, 1, self.c])?,
        )?
        .reshape(&[edges, self.m])?;
        let normed = self.norm.forward(pass, &responses)?;
        let activated = normed.leaky_relu(self.slope);
        split_and_max(&activated, &shapes, self.m)
    }

    /// Aggregate onto a subset of centers: `idx` rows index into the full
    /// value rows, the first entry being each output row's center.
    pub fn forward_rows(
        &self,
        pass: &Pass,
        geom: &GeometryCtx,
        features: &Tensor,
        idx: &[Vec<usize>],
    ) -> Result<Tensor> {
        let input = ConvInput {
            geom: GeometryCtx {
                positions: geom.positions,
                normals: geom.normals,
            },
            features,
            idx,
        };
        Ok(self.forward_many(pass, &[input])?.pop().unwrap())
    }

    pub fn param_count(&self) -> usize {
        self.kernel_l1.param_count()
            + self.kernel_l2.param_count()
            + self.residual.param_count()
            + self.norm.param_count()
    }

    /// Closed form of `param_count` from the widths.
    pub fn param_count_formula(d_in: usize, hidden: usize, m: usize, c: usize, norm: bool) -> usize {
        let mc = m * c;
        hidden * (2 * d_in + 1) + mc * (hidden + 1) + mc * (2 * d_in + 1) + if norm { 2 * m } else { 0 }
    }
}

/// Fixed-kernel graph convolution: one shared affine edge function over the
/// same [center, neighbor - center] feature input, then norm, activation and
/// neighborhood max.
#[derive(Clone, Debug)]
pub struct GraphConvLayer {
    pub d_in: usize,
    pub m: usize,
    pub slope: f64,
    edge_mlp: Affine,
    norm: BatchNorm,
}

impl GraphConvLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        m: usize,
        norm_enabled: bool,
        slope: f64,
    ) -> Result<GraphConvLayer> {
        Ok(GraphConvLayer {
            d_in,
            m,
            slope,
            edge_mlp: Affine::with_bias(store, rng, &format!("{name}.edge"), 2 * d_in, m, !norm_enabled)?,
            norm: BatchNorm::new(store, &format!("{name}.norm"), m, norm_enabled)?,
        })
    }

    pub fn forward(&self, pass: &Pass, features: &Tensor, graph: &NeighborGraph) -> Result<Tensor> {
        let input = ConvInput {
            geom: GeometryCtx {
                positions: &[],
                normals: None,
            },
            features,
            idx: &graph.idx,
        };
        Ok(self.forward_many(pass, &[input])?.pop().unwrap())
    }

    pub fn forward_many(&self, pass: &Pass, inputs: &[ConvInput]) -> Result<Vec<Tensor>> {
        let mut shapes = Vec::with_capacity(inputs.len());
        let mut delta_fs = Vec::with_capacity(inputs.len());
        for inp in inputs {
            if inp.features.shape().len() != 2 || inp.features.shape()[1] != self.d_in {
                return Err(Error::dim(format!(
                    "graph conv: expected [N, {}] features, got {:?}",
                    self.d_in,
                    inp.features.shape()
                )));
            }
            let df = delta_pairs(inp.features, inp.idx)?;
            let (r, k) = (df.shape()[0], df.shape()[1]);
            shapes.push((r, k));
            delta_fs.push(df.reshape(&[r * k, 2 * self.d_in])?);
        }
        let flat = concat_rows(delta_fs)?;
        let edges = self.edge_mlp.forward(pass, &flat)?;
        let normed = self.norm.forward(pass, &edges)?;
        let activated = normed.leaky_relu(self.slope);
        split_and_max(&activated, &shapes, self.m)
    }

    pub fn param_count(&self) -> usize {
        self.edge_mlp.param_count() + self.norm.param_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// One scalar weight per edge.
    Point,
    /// One weight per edge and output channel.
    Channel,
}

/// Attention-weighted baseline: candidate edge features from a shared affine
/// map over the full [center, difference] pair, weights from a softmax over
/// each neighborhood, aggregation by weighted sum, then norm and activation
/// on the point features.
///
/// The scores read only the difference half of the pair: the center half is
/// constant within a neighborhood and a per-neighborhood softmax is invariant
/// to constant shifts, so weights on it would be unidentifiable.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub d_in: usize,
    pub m: usize,
    pub mode: AttentionMode,
    pub slope: f64,
    edge_mlp: Affine,
    score_mlp: Affine,
    norm: BatchNorm,
}

impl AttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        m: usize,
        mode: AttentionMode,
        norm_enabled: bool,
        slope: f64,
    ) -> Result<AttentionLayer> {
        let score_width = match mode {
            AttentionMode::Point => 1,
            AttentionMode::Channel => m,
        };
        Ok(AttentionLayer {
            d_in,
            m,
            mode,
            slope,
            edge_mlp: Affine::with_bias(
                store, rng, &format!("{name}.edge"), 2 * d_in, m, !norm_enabled,
            )?,
            // no bias: a per-neighborhood softmax ignores score offsets
            score_mlp: Affine::with_bias(
                store, rng, &format!("{name}.score"), d_in, score_width, false,
            )?,
            norm: BatchNorm::new(store, &format!("{name}.norm"), m, norm_enabled)?,
        })
    }

    pub fn forward(&self, pass: &Pass, features: &Tensor, graph: &NeighborGraph) -> Result<Tensor> {
        let input = ConvInput {
            geom: GeometryCtx {
                positions: &[],
                normals: None,
            },
            features,
            idx: &graph.idx,
        };
        Ok(self.forward_many(pass, &[input])?.pop().unwrap())
    }

    pub fn forward_many(&self, pass: &Pass, inputs: &[ConvInput]) -> Result<Vec<Tensor>> {
        let mut shapes = Vec::with_capacity(inputs.len());
        let mut delta_fs = Vec::with_capacity(inputs.len());
        let mut diffs = Vec::with_capacity(inputs.len());
        for inp in inputs {
            if inp.features.shape().len() != 2 || inp.features.shape()[1] != self.d_in {
                return Err(Error::dim(format!(
                    "attention conv: expected [N, {}] features, got {:?}",
                    self.d_in,
                    inp.features.shape()
                )));
            }
            let df = delta_pairs(inp.features, inp.idx)?;
            let (r, k) = (df.shape()[0], df.shape()[1]);
            shapes.push((r, k));
            delta_fs.push(df.reshape(&[r * k, 2 * self.d_in])?);
            diffs.push(edge_differences(inp.features, inp.idx, self.d_in)?);
        }
        let flat = concat_rows(delta_fs)?;
        let diff = concat_rows(diffs)?;
        let candidates = self.edge_mlp.forward(pass, &flat)?;
        let scores = self.score_mlp.forward(pass, &diff)?;
        let mut aggregated = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for &(r, k) in &shapes {
            let (cand, score) = if shapes.len() == 1 {
                (candidates.clone(), scores.clone())
            } else {
                (
                    candidates.slice_rows(offset, r * k)?,
                    scores.slice_rows(offset, r * k)?,
                )
            };
            let cand = cand.reshape(&[r, k, self.m])?;
            let weights = match self.mode {
                AttentionMode::Point => score
                    .reshape(&[r, k, 1])?
                    .softmax(1)
                    .repeat_last(self.m)?,
                AttentionMode::Channel => score.reshape(&[r, k, self.m])?.softmax(1),
            };
            aggregated.push(cand.mul(&weights)?.reduce_sum_axis(1)?);
            offset += r * k;
        }
        let stacked = concat_rows(aggregated)?;
        let normed = self.norm.forward(pass, &stacked)?;
        let activated = normed.leaky_relu(self.slope);
        let mut outs = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for &(r, _) in &shapes {
            outs.push(if shapes.len() == 1 {
                activated.clone()
            } else {
                activated.slice_rows(offset, r)?
            });
            offset += r;
        }
        Ok(outs)
    }

    /// Neighborhood weights as used by `forward`, exposed for tests.
    pub fn attention_weights(
        &self,
        pass: &Pass,
        features: &Tensor,
        graph: &NeighborGraph,
    ) -> Result<Tensor> {
        let (n, k) = (graph.idx.len(), graph.k);
        let scores = self
            .score_mlp
            .forward(pass, &edge_differences(features, &graph.idx, self.d_in)?)?;
        Ok(match self.mode {
            AttentionMode::Point => scores.reshape(&[n, k, 1])?.softmax(1),
            AttentionMode::Channel => scores.reshape(&[n, k, self.m])?.softmax(1),
        })
    }

    pub fn param_count(&self) -> usize {
        self.edge_mlp.param_count() + self.score_mlp.param_count() + self.norm.param_count()
    }
}
