//! Network assembly: a classification net over dynamic feature-space graphs
//! and a segmentation net with hierarchical pooling and nearest-neighbor
//! interpolation back to full resolution.
//!
//! Both nets run a whole batch of clouds through each layer at once so batch
//! normalization sees batch-wide statistics; eval mode (running statistics,
//! no dropout) processes clouds independently with identical per-cloud
//! results.

use crate::config::{EncoderKind, FeatureSource, ModelConfig};
use crate::conv::{AdaptConvLayer, AttentionLayer, ConvInput, ConvolveWith, GeometryCtx, GraphConvLayer};
use crate::error::{Error, Result};
use crate::graph::{
    centroid_farthest_index, farthest_point_sample, knn_feature, knn_spatial, pool_max,
    NeighborGraph, PointCloud,
};
use crate::layers::{Affine, BatchNorm};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Pass, Tensor};

/// One encoder convolution of any of the supported kinds.
#[derive(Clone, Debug)]
pub enum EncoderConv {
    Adapt(AdaptConvLayer),
    Graph(GraphConvLayer),
    Attention(AttentionLayer),
}

impl EncoderConv {
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        kind: EncoderKind,
        d_in: usize,
        m: usize,
        cfg: &ModelConfig,
    ) -> Result<EncoderConv> {
        Ok(match kind {
            EncoderKind::Adapt => EncoderConv::Adapt(AdaptConvLayer::new(
                store,
                rng,
                name,
                d_in,
                m,
                cfg.kernel_hidden,
                cfg.variant,
                cfg.norm,
                cfg.leaky_slope,
            )?),
            EncoderKind::GraphConv => EncoderConv::Graph(GraphConvLayer::new(
                store,
                rng,
                name,
                d_in,
                m,
                cfg.norm,
                cfg.leaky_slope,
            )?),
            EncoderKind::AttentionPoint | EncoderKind::AttentionChannel => {
                EncoderConv::Attention(AttentionLayer::new(
                    store,
                    rng,
                    name,
                    d_in,
                    m,
                    kind.attention_mode().unwrap(),
                    cfg.norm,
                    cfg.leaky_slope,
                )?)
            }
        })
    }

    fn forward_many(&self, pass: &Pass, inputs: &[ConvInput]) -> Result<Vec<Tensor>> {
        match self {
            EncoderConv::Adapt(l) => l.forward_many(pass, inputs),
            EncoderConv::Graph(l) => l.forward_many(pass, inputs),
            EncoderConv::Attention(l) => l.forward_many(pass, inputs),
        }
    }

    fn out_width(&self) -> usize {
        match self {
            EncoderConv::Adapt(l) => l.m,
            EncoderConv::Graph(l) => l.m,
            EncoderConv::Attention(l) => l.m,
        }
    }

    fn param_count(&self) -> usize {
        match self {
            EncoderConv::Adapt(l) => l.param_count(),
            EncoderConv::Graph(l) => l.param_count(),
            EncoderConv::Attention(l) => l.param_count(),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            EncoderConv::Adapt(_) => "adapt_conv",
            EncoderConv::Graph(_) => "graph_conv",
            EncoderConv::Attention(l) => match l.mode {
                crate::conv::AttentionMode::Point => "attention_point",
                crate::conv::AttentionMode::Channel => "attention_channel",
            },
        }
    }
}

/// A line in the model-info report.
#[derive(Clone, Debug)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub detail: String,
    pub params: usize,
}

fn initial_features(cloud: &PointCloud, source: FeatureSource) -> Result<Tensor> {
    let n = cloud.len();
    match source {
        FeatureSource::Xyz => Ok(cloud.positions_tensor()),
        FeatureSource::XyzNormals => {
            let normals = cloud.normals().ok_or_else(|| {
                Error::config("feature_source xyz_normals needs normals in the cloud")
            })?;
            let mut v = Vec::with_capacity(n * 6);
            for (p, nm) in cloud.positions().iter().zip(&normals) {
                v.extend_from_slice(p);
                v.extend_from_slice(nm);
            }
            Tensor::from_vec(v, &[n, 6])
        }
    }
}

fn stack_rows(mut parts: Vec<Tensor>) -> Result<Tensor> {
    if parts.len() == 1 {
        Ok(parts.pop().unwrap())
    } else {
        Tensor::concat(&parts, 0)
    }
}

fn unstack_rows(stacked: &Tensor, row_counts: &[usize]) -> Result<Vec<Tensor>> {
    if row_counts.len() == 1 {
        return Ok(vec![stacked.clone()]);
    }
    let mut out = Vec::with_capacity(row_counts.len());
    let mut offset = 0;
    for &r in row_counts {
        out.push(stacked.slice_rows(offset, r)?);
        offset += r;
    }
    Ok(out)
}

/// Classification network: encoder convolutions with shortcut connections,
/// a shared fully connected aggregation layer, channel-wise global max over
/// the points, then a classifier MLP with dropout.
pub struct ClassificationNet {
    pub convs: Vec<EncoderConv>,
    agg: Affine,
    agg_norm: BatchNorm,
    head: Vec<(Affine, BatchNorm)>,
    out: Affine,
    pub k: usize,
    pub class_count: usize,
    dynamic_graph: bool,
    dropout: f64,
    slope: f64,
    feature_source: FeatureSource,
}

impl ClassificationNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        cfg: &ModelConfig,
        class_count: usize,
    ) -> Result<ClassificationNet> {
        let d0 = match cfg.feature_source {
            FeatureSource::Xyz => 3,
            FeatureSource::XyzNormals => 6,
        };
        let mut convs = Vec::new();
        let mut d_in = d0;
        for (i, &m) in cfg.conv_widths.iter().enumerate() {
            convs.push(EncoderConv::new(
                store,
                rng,
                &format!("cls.conv{i}"),
                cfg.encoder_kind,
                d_in,
                m,
                cfg,
            )?);
            d_in = m;
        }
        let concat_width: usize = cfg.conv_widths.iter().sum();
        let agg = Affine::with_bias(
            store, rng, "cls.agg", concat_width, cfg.aggregate_width, !cfg.norm,
        )?;
        let agg_norm = BatchNorm::new(store, "cls.agg.norm", cfg.aggregate_width, cfg.norm)?;
        let mut head = Vec::new();
        let mut w_in = cfg.aggregate_width;
        for (i, &w) in cfg.head_widths.iter().enumerate() {
            head.push((
                Affine::with_bias(store, rng, &format!("cls.head{i}"), w_in, w, !cfg.norm)?,
                BatchNorm::new(store, &format!("cls.head{i}.norm"), w, cfg.norm)?,
            ));
            w_in = w;
        }
        let out = Affine::new(store, rng, "cls.out", w_in, class_count)?;
        Ok(ClassificationNet {
            convs,
            agg,
            agg_norm,
            head,
            out,
            k: cfg.k,
            class_count,
            dynamic_graph: cfg.dynamic_graph,
            dropout: cfg.dropout,
            slope: cfg.leaky_slope,
            feature_source: cfg.feature_source,
        })
    }

    /// Per-layer full-resolution features for every cloud in the batch.
    pub fn trunk_features_many(
        &self,
        pass: &Pass,
        clouds: &[&PointCloud],
    ) -> Result<Vec<Vec<Tensor>>> {
        if clouds.is_empty() {
            return Err(Error::contract("forward on an empty batch"));
        }
        for cloud in clouds {
            if cloud.len() < self.k {
                return Err(Error::config(format!(
                    "cloud has {} points but k = {}",
                    cloud.len(),
                    self.k
                )));
            }
        }
        let normals: Vec<Option<Vec<[f64; 3]>>> = clouds.iter().map(|c| c.normals()).collect();
        let spatial: Vec<NeighborGraph> = clouds
            .iter()
            .map(|c| knn_spatial(c.positions(), self.k))
            .collect::<Result<_>>()?;
        let mut feats: Vec<Tensor> = clouds
            .iter()
            .map(|c| initial_features(c, self.feature_source))
            .collect::<Result<_>>()?;
        let mut outputs: Vec<Vec<Tensor>> = vec![Vec::new(); clouds.len()];
        for (li, conv) in self.convs.iter().enumerate() {
            let graphs: Vec<NeighborGraph> = if li == 0 || !self.dynamic_graph {
                spatial.clone()
            } else {
                feats
                    .iter()
                    .zip(clouds)
                    .map(|(f, c)| knn_feature(f.values(), c.len(), f.shape()[1], self.k))
                    .collect::<Result<_>>()?
            };
            let outs = {
                let items: Vec<ConvInput> = clouds
                    .iter()
                    .enumerate()
                    .map(|(i, c)| ConvInput {
                        geom: GeometryCtx {
                            positions: c.positions(),
                            normals: normals[i].as_deref(),
                        },
                        features: &feats[i],
                        idx: &graphs[i].idx,
                    })
                    .collect();
                conv.forward_many(pass, &items)?
            };
            for (i, out) in outs.into_iter().enumerate() {
                outputs[i].push(out.clone());
                feats[i] = out;
            }
        }
        Ok(outputs)
    }

    /// Per-layer point features of a single cloud (feature-map export).
    pub fn trunk_features(&self, pass: &Pass, cloud: &PointCloud) -> Result<Vec<Tensor>> {
        Ok(self.trunk_features_many(pass, &[cloud])?.pop().unwrap())
    }

    /// Logits for a batch of clouds, shape [B, class_count].
    pub fn forward(&self, pass: &Pass, clouds: &[&PointCloud]) -> Result<Tensor> {
        let per_cloud = self.trunk_features_many(pass, clouds)?;
        let cats: Vec<Tensor> = per_cloud
            .iter()
            .map(|layers| Tensor::concat(layers, 1))
            .collect::<Result<_>>()?;
        let row_counts: Vec<usize> = clouds.iter().map(|c| c.len()).collect();
        let stacked = stack_rows(cats)?;
        let agg = self
            .agg_norm
            .forward(pass, &self.agg.forward(pass, &stacked)?)?
            .leaky_relu(self.slope);
        let globals: Vec<Tensor> = unstack_rows(&agg, &row_counts)?
            .into_iter()
            .map(|t| {
                let (m, _) = t.reduce_max_axis(0)?;
                m.reshape(&[1, self.agg.d_out])
            })
            .collect::<Result<_>>()?;
        let mut x = stack_rows(globals)?;
        for (affine, norm) in &self.head {
            x = norm
                .forward(pass, &affine.forward(pass, &x)?)?
                .leaky_relu(self.slope);
            x = pass.dropout(&x, self.dropout)?;
        }
        self.out.forward(pass, &x)
    }

    pub fn layer_infos(&self) -> Vec<LayerInfo> {
        let mut infos = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            infos.push(LayerInfo {
                name: format!("cls.conv{i}"),
                kind: c.kind_name().to_string(),
                detail: format!("-> {}", c.out_width()),
                params: c.param_count(),
            });
        }
        infos.push(LayerInfo {
            name: "cls.agg".into(),
            kind: "affine+norm".into(),
            detail: format!("{} -> {}", self.agg.d_in, self.agg.d_out),
            params: self.agg.param_count() + self.agg_norm.param_count(),
        });
        for (i, (a, n)) in self.head.iter().enumerate() {
            infos.push(LayerInfo {
                name: format!("cls.head{i}"),
                kind: "affine+norm".into(),
                detail: format!("{} -> {}", a.d_in, a.d_out),
                params: a.param_count() + n.param_count(),
            });
        }
        infos.push(LayerInfo {
            name: "cls.out".into(),
            kind: "affine".into(),
            detail: format!("{} -> {}", self.out.d_in, self.out.d_out),
            params: self.out.param_count(),
        });
        infos
    }

    pub fn count_parameters(&self) -> usize {
        self.layer_infos().iter().map(|l| l.params).sum()
    }
}

/// Sizes produced by repeated rate-`rate` pooling (ceil division).
pub fn pooled_sizes(n: usize, rate: usize, pools: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(pools);
    let mut cur = n;
    for _ in 0..pools {
        cur = cur.div_ceil(rate);
        sizes.push(cur);
    }
    sizes
}

struct CloudState {
    positions: Vec<[f64; 3]>,
    normals: Option<Vec<[f64; 3]>>,
    feats: Tensor,
    graph: Option<NeighborGraph>,
    recorded: Vec<(Tensor, Vec<[f64; 3]>)>,
}

/// Segmentation network: encoder convolutions (the last one a fixed-kernel
/// graph convolution) interleaved with farthest-point-sampling pooling;
/// every scale's output is upsampled back to full resolution, concatenated
/// with the per-shape category one-hot, and decoded per point.
pub struct SegmentationNet {
    pub convs: Vec<EncoderConv>,
    pool_after: Vec<usize>,
    pool_rate: usize,
    pooled_agg: Vec<Option<AdaptConvLayer>>,
    decoder: Vec<(Affine, BatchNorm)>,
    out: Affine,
    pub k: usize,
    pub part_count: usize,
    pub onehot_width: usize,
    slope: f64,
    feature_source: FeatureSource,
}

impl SegmentationNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        cfg: &ModelConfig,
        part_count: usize,
        onehot_width: usize,
    ) -> Result<SegmentationNet> {
        if cfg.conv_widths.len() < 2 {
            return Err(Error::config(
                "segmentation encoder needs at least two conv layers",
            ));
        }
        let d0 = match cfg.feature_source {
            FeatureSource::Xyz => 3,
            FeatureSource::XyzNormals => 6,
        };
        let mut convs = Vec::new();
        let mut d_in = d0;
        let last = cfg.conv_widths.len() - 1;
        for (i, &m) in cfg.conv_widths.iter().enumerate() {
            // the final encoder layer is always a standard graph convolution
            let kind = if i == last {
                EncoderKind::GraphConv
            } else {
                cfg.encoder_kind
            };
            convs.push(EncoderConv::new(
                store,
                rng,
                &format!("seg.conv{i}"),
                kind,
                d_in,
                m,
                cfg,
            )?);
            d_in = m;
        }
        let mut pooled_agg = Vec::new();
        for (pi, &layer_idx) in cfg.pool_after.iter().enumerate() {
            if cfg.pooled_aggregation_conv {
                let width = cfg.conv_widths[layer_idx];
                pooled_agg.push(Some(AdaptConvLayer::new(
                    store,
                    rng,
                    &format!("seg.pool{pi}"),
                    width,
                    width,
                    cfg.kernel_hidden,
                    ConvolveWith::Spatial,
                    cfg.norm,
                    cfg.leaky_slope,
                )?));
            } else {
                pooled_agg.push(None);
            }
        }
        // one recorded scale per pooling layer plus the final output
        let concat_width: usize = cfg
            .pool_after
            .iter()
            .map(|&i| cfg.conv_widths[i])
            .sum::<usize>()
            + cfg.conv_widths[last]
            + onehot_width;
        let mut decoder = Vec::new();
        let mut w_in = concat_width;
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            decoder.push((
                Affine::with_bias(store, rng, &format!("seg.dec{i}"), w_in, w, !cfg.norm)?,
                BatchNorm::new(store, &format!("seg.dec{i}.norm"), w, cfg.norm)?,
            ));
            w_in = w;
        }
        let out = Affine::new(store, rng, "seg.out", w_in, part_count)?;
        Ok(SegmentationNet {
            convs,
            pool_after: cfg.pool_after.clone(),
            pool_rate: cfg.pool_rate,
            pooled_agg,
            decoder,
            out,
            k: cfg.k,
            part_count,
            onehot_width,
            slope: cfg.leaky_slope,
            feature_source: cfg.feature_source,
        })
    }

    /// Point counts at each pooled scale for an input of `n` points.
    pub fn scale_sizes(&self, n: usize) -> Vec<usize> {
        pooled_sizes(n, self.pool_rate, self.pool_after.len())
    }

    fn onehot_for(&self, cloud: &PointCloud) -> Result<Option<Vec<f64>>> {
        if self.onehot_width == 0 {
            return Ok(None);
        }
        let oh = cloud.category_onehot().ok_or_else(|| {
            Error::config("segmentation net expects a category one-hot on the cloud")
        })?;
        if oh.len() != self.onehot_width {
            return Err(Error::config(format!(
                "one-hot width {} does not match the net's {}",
                oh.len(),
                self.onehot_width
            )));
        }
        Ok(Some(oh.to_vec()))
    }

    /// Per-point logits for each cloud of the batch.
    pub fn forward_many(&self, pass: &Pass, clouds: &[&PointCloud]) -> Result<Vec<Tensor>> {
        Ok(self
            .forward_many_with_scales(pass, clouds)?
            .into_iter()
            .map(|(logits, _)| logits)
            .collect())
    }

    /// Per-point logits, shape [N, part_count].
    pub fn forward(&self, pass: &Pass, cloud: &PointCloud) -> Result<Tensor> {
        Ok(self.forward_many(pass, &[cloud])?.pop().unwrap())
    }

    /// Forward pass also returning each cloud's per-scale features upsampled
    /// to full resolution.
    pub fn forward_with_scales(
        &self,
        pass: &Pass,
        cloud: &PointCloud,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        Ok(self
            .forward_many_with_scales(pass, &[cloud])?
            .pop()
            .unwrap())
    }

    fn forward_many_with_scales(
        &self,
        pass: &Pass,
        clouds: &[&PointCloud],
    ) -> Result<Vec<(Tensor, Vec<Tensor>)>> {
        if clouds.is_empty() {
            return Err(Error::contract("forward on an empty batch"));
        }
        let onehots: Vec<Option<Vec<f64>>> = clouds
            .iter()
            .map(|c| self.onehot_for(c))
            .collect::<Result<_>>()?;
        let mut states: Vec<CloudState> = clouds
            .iter()
            .map(|c| {
                if c.len() < self.k {
                    return Err(Error::config(format!(
                        "cloud has {} points but k = {}",
                        c.len(),
                        self.k
                    )));
                }
                Ok(CloudState {
                    positions: c.positions().to_vec(),
                    normals: c.normals(),
                    feats: initial_features(c, self.feature_source)?,
                    graph: None,
                    recorded: Vec::new(),
                })
            })
            .collect::<Result<_>>()?;

        let mut pool_cursor = 0;
        for (i, conv) in self.convs.iter().enumerate() {
            for st in states.iter_mut() {
                // neighborhoods shrink with the point set on deep scales
                let k_eff = self.k.min(st.positions.len());
                let stale = match &st.graph {
                    Some(g) => g.k != k_eff || g.len() != st.positions.len(),
                    None => true,
                };
                if stale {
                    st.graph = Some(knn_spatial(&st.positions, k_eff)?);
                }
            }
            let outs = {
                let items: Vec<ConvInput> = states
                    .iter()
                    .map(|st| ConvInput {
                        geom: GeometryCtx {
                            positions: &st.positions,
                            normals: st.normals.as_deref(),
                        },
                        features: &st.feats,
                        idx: &st.graph.as_ref().unwrap().idx,
                    })
                    .collect();
                conv.forward_many(pass, &items)?
            };
            for (st, out) in states.iter_mut().zip(outs) {
                st.feats = out;
            }

            if pool_cursor < self.pool_after.len() && self.pool_after[pool_cursor] == i {
                // record this scale, then subsample every cloud
                let agg_layer = &self.pooled_agg[pool_cursor];
                let mut sampled_all = Vec::with_capacity(states.len());
                for st in states.iter_mut() {
                    st.recorded.push((st.feats.clone(), st.positions.clone()));
                    let count = st.positions.len().div_ceil(self.pool_rate);
                    let seed = centroid_farthest_index(&st.positions);
                    sampled_all.push(farthest_point_sample(&st.positions, count, seed)?);
                }
                match agg_layer {
                    None => {
                        for (st, sampled) in states.iter_mut().zip(&sampled_all) {
                            let k_pool = self.k.min(st.positions.len());
                            st.feats =
                                pool_max(&st.feats, &st.positions, sampled, k_pool)?.0;
                        }
                    }
                    Some(layer) => {
                        let rows_all: Vec<Vec<Vec<usize>>> = states
                            .iter()
                            .zip(&sampled_all)
                            .map(|(st, sampled)| {
                                let k_pool = self.k.min(st.positions.len());
                                let full = knn_spatial(&st.positions, k_pool)?;
                                Ok(sampled.iter().map(|&c| full.idx[c].clone()).collect())
                            })
                            .collect::<Result<_>>()?;
                        let outs = {
                            let items: Vec<ConvInput> = states
                                .iter()
                                .zip(&rows_all)
                                .map(|(st, rows)| ConvInput {
                                    geom: GeometryCtx {
                                        positions: &st.positions,
                                        normals: st.normals.as_deref(),
                                    },
                                    features: &st.feats,
                                    idx: rows,
                                })
                                .collect();
                            layer.forward_many(pass, &items)?
                        };
                        for (st, out) in states.iter_mut().zip(outs) {
                            st.feats = out;
                        }
                    }
                }
                for (st, sampled) in states.iter_mut().zip(&sampled_all) {
                    st.positions = sampled.iter().map(|&j| st.positions[j]).collect();
                    st.normals = st
                        .normals
                        .take()
                        .map(|nm| sampled.iter().map(|&j| nm[j]).collect());
                    st.graph = None;
                }
                pool_cursor += 1;
            }
        }

        // interpolate every recorded scale back to full resolution
        let mut per_cloud_scales: Vec<Vec<Tensor>> = Vec::with_capacity(states.len());
        let mut decoder_inputs = Vec::with_capacity(states.len());
        for ((st, cloud), onehot) in states.iter().zip(clouds).zip(&onehots) {
            let full = cloud.positions();
            let n = full.len();
            let mut upsampled = Vec::with_capacity(st.recorded.len() + 2);
            for (t, pts) in st
                .recorded
                .iter()
                .chain(std::iter::once(&(st.feats.clone(), st.positions.clone())))
            {
                if pts.len() == n {
                    upsampled.push(t.clone());
                } else {
                    upsampled.push(crate::graph::nearest_upsample(t, pts, full)?);
                }
            }
            per_cloud_scales.push(upsampled.clone());
            if let Some(oh) = onehot {
                let mut v = Vec::with_capacity(n * oh.len());
                for _ in 0..n {
                    v.extend_from_slice(oh);
                }
                upsampled.push(Tensor::from_vec(v, &[n, oh.len()])?);
            }
            decoder_inputs.push(Tensor::concat(&upsampled, 1)?);
        }
        let row_counts: Vec<usize> = clouds.iter().map(|c| c.len()).collect();
        let mut x = stack_rows(decoder_inputs)?;
        for (affine, norm) in &self.decoder {
            x = norm
                .forward(pass, &affine.forward(pass, &x)?)?
                .leaky_relu(self.slope);
        }
        let logits = self.out.forward(pass, &x)?;
        let per_cloud = unstack_rows(&logits, &row_counts)?;
        Ok(per_cloud.into_iter().zip(per_cloud_scales).collect())
    }

    pub fn layer_infos(&self) -> Vec<LayerInfo> {
        let mut infos = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            infos.push(LayerInfo {
                name: format!("seg.conv{i}"),
                kind: c.kind_name().to_string(),
                detail: format!("-> {}", c.out_width()),
                params: c.param_count(),
            });
        }
        for (pi, agg) in self.pooled_agg.iter().enumerate() {
            if let Some(l) = agg {
                infos.push(LayerInfo {
                    name: format!("seg.pool{pi}"),
                    kind: "adapt_conv".into(),
                    detail: format!("{} -> {}", l.d_in, l.m),
                    params: l.param_count(),
                });
            }
        }
        for (i, (a, n)) in self.decoder.iter().enumerate() {
            infos.push(LayerInfo {
                name: format!("seg.dec{i}"),
                kind: "affine+norm".into(),
                detail: format!("{} -> {}", a.d_in, a.d_out),
                params: a.param_count() + n.param_count(),
            });
        }
        infos.push(LayerInfo {
            name: "seg.out".into(),
            kind: "affine".into(),
            detail: format!("{} -> {}", self.out.d_in, self.out.d_out),
            params: self.out.param_count(),
        });
        infos
    }

    pub fn count_parameters(&self) -> usize {
        self.layer_infos().iter().map(|l| l.params).sum()
    }
}

/// Plain-text table of layers and parameter counts.
pub fn model_info_report(infos: &[LayerInfo], total: usize) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<14} {:<18} {:<14} {:>10}\n",
        "layer", "kind", "shape", "params"
    ));
    for l in infos {
        s.push_str(&format!(
            "{:<14} {:<18} {:<14} {:>10}\n",
            l.name, l.kind, l.detail, l.params
        ));
    }
    s.push_str(&format!("total parameters: {total}\n"));
    s
}
