//! Training and evaluation: SGD with momentum under a cosine learning-rate
//! schedule, cross-entropy loss, point-cloud augmentation, classification
//! and segmentation metrics, robustness sweeps, and feature-space distance
//! maps. Training loops are bit-deterministic given a config and seed.

use std::collections::BTreeMap;

use crate::config::{AugmentParams, RunConfig, Task};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::PointCloud;
use crate::net::{ClassificationNet, SegmentationNet};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Pass, Tensor};

/// Cosine annealing from lr_max at step 0 to lr_min at total_steps.
#[derive(Clone, Debug)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::contract(format!(
                "schedule step {step} beyond total {}",
                self.total_steps
            )));
        }
        let t = if self.total_steps == 0 {
            1.0
        } else {
            step as f64 / self.total_steps as f64
        };
        Ok(self.lr_min
            + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// SGD with momentum: v <- mu * v + g; p <- p - lr * v.
pub struct SgdMomentum {
    pub momentum: f64,
    buffers: BTreeMap<String, Vec<f64>>,
    pub steps_taken: usize,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> SgdMomentum {
        SgdMomentum {
            momentum,
            buffers: BTreeMap::new(),
            steps_taken: 0,
        }
    }

    pub fn step(&mut self, store: &ParamStore, lr: f64) -> Result<()> {
        for (name, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.borrow();
            let mut value = p.value.borrow_mut();
            let buf = self
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; value.len()]);
            if buf.len() != grad.len() || value.len() != grad.len() {
                return Err(Error::dim(format!(
                    "optimizer state for {name}: value {}, grad {}, buffer {}",
                    value.len(),
                    grad.len(),
                    buf.len()
                )));
            }
            for ((v, b), g) in value.iter_mut().zip(buf.iter_mut()).zip(grad.iter()) {
                *b = self.momentum * *b + g;
                *v -= lr * *b;
            }
        }
        self.steps_taken += 1;
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(|v| v.as_slice())
    }
}

/// Batched mean of -log softmax(logits)[label].
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim(format!(
            "cross_entropy: logits {s:?} with {} labels",
            labels.len()
        )));
    }
    // log-sum-exp with a detached per-row max: the derivative of
    // log(sum(exp(x - c))) in x is softmax(x) for any constant c.
    let row_max = logits.reduce_max_axis(1)?.0.detach();
    let shifted = logits.sub_col(&row_max)?;
    let lse = shifted.exp().reduce_sum_axis(1)?.ln().add(&row_max)?;
    let picked = logits.pick_rows(labels)?;
    Ok(lse.sub(&picked)?.mean_all())
}

/// Shift, scale and jitter a cloud's positions (and the xyz attribute
/// prefix). Normals are left untouched: the transforms are isotropic.
pub fn augment(cloud: &PointCloud, rng: &mut Rng, p: &AugmentParams) -> PointCloud {
    let mut out = cloud.clone();
    if !p.enabled {
        return out;
    }
    let shift = [
        rng.uniform(-p.shift, p.shift),
        rng.uniform(-p.shift, p.shift),
        rng.uniform(-p.shift, p.shift),
    ];
    let scale = rng.uniform(p.scale_lo, p.scale_hi);
    out.map_positions(|_, pt| {
        let mut q = [0.0; 3];
        for a in 0..3 {
            let jitter = (rng.normal() * p.jitter_std).clamp(-p.jitter_clip, p.jitter_clip);
            q[a] = pt[a] * scale + shift[a] + jitter;
        }
        q
    });
    out
}

/// Metrics for one evaluation. Classification fills the accuracy fields;
/// segmentation fills everything.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub mean_class_accuracy: f64,
    /// Mean IoU per part id, over the shapes whose category includes it.
    pub per_class_iou: Vec<f64>,
    pub mean_instance_iou: Option<f64>,
    pub mean_class_iou: Option<f64>,
}

impl MetricsReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "overall accuracy:    {:.4}\nmean class accuracy: {:.4}\n",
            self.overall_accuracy, self.mean_class_accuracy
        );
        if let Some(miou) = self.mean_instance_iou {
            s.push_str(&format!("mean instance IoU:   {miou:.4}\n"));
        }
        if let Some(mciou) = self.mean_class_iou {
            s.push_str(&format!("mean class IoU:      {mciou:.4}\n"));
        }
        if !self.per_class_iou.is_empty() {
            let parts: Vec<String> = self
                .per_class_iou
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect();
            s.push_str(&format!("per-part IoU:        [{}]\n", parts.join(", ")));
        }
        s
    }
}

/// Overall accuracy and unweighted mean of per-class recalls (classes with
/// zero support excluded).
pub fn evaluate_classification(preds: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::contract("evaluate_classification on empty input"));
    }
    if preds.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().chain(preds).max().unwrap() + 1;
    let mut support = vec![0usize; classes];
    let mut correct_per = vec![0usize; classes];
    let mut correct = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        support[l] += 1;
        if p == l {
            correct += 1;
            correct_per[l] += 1;
        }
    }
    let recalls: Vec<f64> = (0..classes)
        .filter(|&c| support[c] > 0)
        .map(|c| correct_per[c] as f64 / support[c] as f64)
        .collect();
    Ok(MetricsReport {
        overall_accuracy: correct as f64 / preds.len() as f64,
        mean_class_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        per_class_iou: vec![],
        mean_instance_iou: None,
        mean_class_iou: None,
    })
}

/// Part-segmentation metrics. Per shape, IoU is averaged over the legal
/// parts of its category with the empty-vs-empty convention IoU = 1; the
/// instance mIoU averages over shapes and the class mcIoU averages the
/// per-category means. Labels or predictions outside the shape's legal part
/// set are contract errors.
pub fn evaluate_segmentation(
    preds: &[Vec<usize>],
    labels: &[Vec<usize>],
    categories: &[usize],
    part_sets: &[Vec<usize>],
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::contract("evaluate_segmentation on empty input"));
    }
    if preds.len() != labels.len() || preds.len() != categories.len() {
        return Err(Error::dim(format!(
            "{} predictions, {} labels, {} categories",
            preds.len(),
            labels.len(),
            categories.len()
        )));
    }
    let part_count: usize = part_sets.iter().map(|s| s.len()).sum();
    let mut shape_ious = Vec::with_capacity(preds.len());
    let mut per_category: Vec<Vec<f64>> = vec![Vec::new(); part_sets.len()];
    let mut part_iou_sums = vec![0.0f64; part_count];
    let mut part_iou_counts = vec![0usize; part_count];
    let mut point_correct = 0usize;
    let mut point_total = 0usize;
    let mut part_support = vec![0usize; part_count];
    let mut part_correct = vec![0usize; part_count];

    for (shape, ((pred, label), &cat)) in preds.iter().zip(labels).zip(categories).enumerate() {
        if pred.len() != label.len() {
            return Err(Error::dim(format!(
                "shape {shape}: {} predictions vs {} labels",
                pred.len(),
                label.len()
            )));
        }
        let legal = part_sets.get(cat).ok_or_else(|| {
            Error::contract(format!("shape {shape}: category {cat} out of range"))
        })?;
        for (&p, &l) in pred.iter().zip(label) {
            if !legal.contains(&p) {
                return Err(Error::contract(format!(
                    "shape {shape}: predicted part {p} not legal for category {cat}"
                )));
            }
            if !legal.contains(&l) {
                return Err(Error::contract(format!(
                    "shape {shape}: label part {l} not legal for category {cat}"
                )));
            }
            point_total += 1;
            part_support[l] += 1;
            if p == l {
                point_correct += 1;
                part_correct[l] += 1;
            }
        }
        let mut iou_sum = 0.0;
        for &part in legal {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&p, &l) in pred.iter().zip(label) {
                let in_p = p == part;
                let in_l = l == part;
                if in_p && in_l {
                    inter += 1;
                }
                if in_p || in_l {
                    union += 1;
                }
            }
            let iou = if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            };
            iou_sum += iou;
            part_iou_sums[part] += iou;
            part_iou_counts[part] += 1;
        }
        let shape_iou = iou_sum / legal.len() as f64;
        shape_ious.push(shape_iou);
        per_category[cat].push(shape_iou);
    }

    let miou = shape_ious.iter().sum::<f64>() / shape_ious.len() as f64;
    let cat_means: Vec<f64> = per_category
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let mciou = cat_means.iter().sum::<f64>() / cat_means.len() as f64;
    let recalls: Vec<f64> = (0..part_count)
        .filter(|&p| part_support[p] > 0)
        .map(|p| part_correct[p] as f64 / part_support[p] as f64)
        .collect();
    Ok(MetricsReport {
        overall_accuracy: point_correct as f64 / point_total as f64,
        mean_class_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        per_class_iou: (0..part_count)
            .map(|p| {
                if part_iou_counts[p] == 0 {
                    0.0
                } else {
                    part_iou_sums[p] / part_iou_counts[p] as f64
                }
            })
            .collect(),
        mean_instance_iou: Some(miou),
        mean_class_iou: Some(mciou),
    })
}

/// Mean part IoU of each shape (the constituents of the instance mIoU).
pub fn per_shape_iou(
    preds: &[Vec<usize>],
    labels: &[Vec<usize>],
    categories: &[usize],
    part_sets: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(preds.len());
    for ((pred, label), &cat) in preds.iter().zip(labels).zip(categories) {
        let report = evaluate_segmentation(
            std::slice::from_ref(pred),
            std::slice::from_ref(label),
            &[cat],
            part_sets,
        )?;
        out.push(report.mean_instance_iou.unwrap_or(0.0));
    }
    Ok(out)
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_metric: f64,
}

pub struct ClassificationRun {
    pub net: ClassificationNet,
    pub store: ParamStore,
    pub log: Vec<EpochRow>,
    pub final_metrics: MetricsReport,
    pub epochs_run: usize,
}

pub struct SegmentationRun {
    pub net: SegmentationNet,
    pub store: ParamStore,
    pub log: Vec<EpochRow>,
    pub final_metrics: MetricsReport,
    pub epochs_run: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_i = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > best {
            best = v;
            best_i = i;
        }
    }
    best_i
}

fn argmax_restricted(row: &[f64], legal: &[usize]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_p = legal[0];
    for &p in legal {
        if row[p] > best {
            best = row[p];
            best_p = p;
        }
    }
    best_p
}

/// Predicted class per cloud, eval mode.
pub fn classify_clouds(
    net: &ClassificationNet,
    store: &ParamStore,
    clouds: &[PointCloud],
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(clouds.len());
    for cloud in clouds {
        let pass = Pass::eval(store);
        let logits = net.forward(&pass, &[cloud])?;
        preds.push(argmax(logits.values()));
    }
    Ok(preds)
}

/// Per-point predictions restricted to each shape's legal parts, eval mode.
pub fn segment_clouds(
    net: &SegmentationNet,
    store: &ParamStore,
    clouds: &[PointCloud],
    part_sets: &[Vec<usize>],
) -> Result<Vec<Vec<usize>>> {
    let mut preds = Vec::with_capacity(clouds.len());
    for cloud in clouds {
        let cat = cloud
            .category()
            .ok_or_else(|| Error::config("cloud is missing its category one-hot"))?;
        let legal = &part_sets[cat];
        let pass = Pass::eval(store);
        let logits = net.forward(&pass, cloud)?;
        let l = logits.shape()[1];
        preds.push(
            (0..cloud.len())
                .map(|i| argmax_restricted(&logits.values()[i * l..(i + 1) * l], legal))
                .collect(),
        );
    }
    Ok(preds)
}

fn check_finite(loss: f64, epoch: usize) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::contract(format!(
            "training loss is not finite ({loss}) at epoch {epoch}"
        )));
    }
    Ok(loss)
}

/// Train the classification network described by `cfg` on `data`.
pub fn train_classification(cfg: &RunConfig, data: &Dataset) -> Result<ClassificationRun> {
    cfg.validate()?;
    if cfg.task != Task::Classification {
        return Err(Error::config("train_classification needs a classification task"));
    }
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.stream("init");
    let mut store = ParamStore::new();
    let net = ClassificationNet::new(&mut store, &mut init_rng, &cfg.model, data.class_count)?;
    let schedule = CosineSchedule {
        lr_max: cfg.train.lr_max,
        lr_min: cfg.train.lr_min,
        total_steps: cfg.train.epochs,
    };
    let mut opt = SgdMomentum::new(cfg.train.momentum);
    let mut shuffle_rng = root.stream("shuffle");
    let mut aug_rng = root.stream("augment");
    let mut dropout_rng = root.stream("dropout");
    let test_labels: Vec<usize> = data
        .test
        .iter()
        .map(|c| c.shape_label().unwrap_or(0))
        .collect();

    let mut log = Vec::new();
    let mut epochs_run = 0;
    let mut last_metric = 0.0;
    for epoch in 0..cfg.train.epochs {
        let lr = schedule.lr(epoch)?;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            // the classifier head normalizes over the batch
            if chunk.len() < 2 && cfg.model.norm {
                continue;
            }
            let augmented: Vec<PointCloud> = chunk
                .iter()
                .map(|&i| augment(&data.train[i], &mut aug_rng, &cfg.train.augment))
                .collect();
            let refs: Vec<&PointCloud> = augmented.iter().collect();
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| data.train[i].shape_label().unwrap_or(0))
                .collect();
            let pass = Pass::train(&store, dropout_rng.split());
            let logits = net.forward(&pass, &refs)?;
            let loss = cross_entropy(&logits, &labels)?;
            loss_sum += check_finite(loss.item(), epoch)?;
            batches += 1;
            pass.backward(&loss)?;
            opt.step(&store, lr)?;
            store.zero_grads();
        }
        epochs_run = epoch + 1;
        if epochs_run % cfg.train.eval_every == 0 || epochs_run == cfg.train.epochs {
            let preds = classify_clouds(&net, &store, &data.test)?;
            last_metric = evaluate_classification(&preds, &test_labels)?.overall_accuracy;
        }
        log.push(EpochRow {
            epoch: epochs_run,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            test_metric: last_metric,
        });
        if cfg
            .train
            .early_stop_metric
            .is_some_and(|target| last_metric >= target)
        {
            break;
        }
    }
    let preds = classify_clouds(&net, &store, &data.test)?;
    let final_metrics = evaluate_classification(&preds, &test_labels)?;
    Ok(ClassificationRun {
        net,
        store,
        log,
        final_metrics,
        epochs_run,
    })
}

/// Train the segmentation network described by `cfg` on `data`.
pub fn train_segmentation(cfg: &RunConfig, data: &Dataset) -> Result<SegmentationRun> {
    cfg.validate()?;
    if cfg.task != Task::Segmentation {
        return Err(Error::config("train_segmentation needs a segmentation task"));
    }
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.stream("init");
    let mut store = ParamStore::new();
    let net = SegmentationNet::new(
        &mut store,
        &mut init_rng,
        &cfg.model,
        data.part_count,
        data.category_count,
    )?;
    let schedule = CosineSchedule {
        lr_max: cfg.train.lr_max,
        lr_min: cfg.train.lr_min,
        total_steps: cfg.train.epochs,
    };
    let mut opt = SgdMomentum::new(cfg.train.momentum);
    let mut shuffle_rng = root.stream("shuffle");
    let mut aug_rng = root.stream("augment");
    let mut dropout_rng = root.stream("dropout");
    let test_labels: Vec<Vec<usize>> = data
        .test
        .iter()
        .map(|c| c.point_labels().unwrap_or_default().to_vec())
        .collect();
    let test_categories: Vec<usize> = data
        .test
        .iter()
        .map(|c| c.category().unwrap_or(0))
        .collect();

    let mut log = Vec::new();
    let mut epochs_run = 0;
    let mut last_metric = 0.0;
    for epoch in 0..cfg.train.epochs {
        let lr = schedule.lr(epoch)?;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let pass = Pass::train(&store, dropout_rng.split());
            let augmented: Vec<PointCloud> = chunk
                .iter()
                .map(|&i| augment(&data.train[i], &mut aug_rng, &cfg.train.augment))
                .collect();
            let refs: Vec<&PointCloud> = augmented.iter().collect();
            let all_logits = net.forward_many(&pass, &refs)?;
            let mut total: Option<Tensor> = None;
            for (cloud, logits) in augmented.iter().zip(&all_logits) {
                let labels = cloud
                    .point_labels()
                    .ok_or_else(|| Error::config("segmentation cloud without point labels"))?
                    .to_vec();
                let loss = cross_entropy(logits, &labels)?;
                total = Some(match total {
                    None => loss,
                    Some(t) => t.add(&loss)?,
                });
            }
            let loss = total.unwrap().scale(1.0 / chunk.len() as f64);
            loss_sum += check_finite(loss.item(), epoch)?;
            batches += 1;
            pass.backward(&loss)?;
            opt.step(&store, lr)?;
            store.zero_grads();
        }
        epochs_run = epoch + 1;
        if epochs_run % cfg.train.eval_every == 0 || epochs_run == cfg.train.epochs {
            let preds = segment_clouds(&net, &store, &data.test, &data.part_sets)?;
            last_metric = evaluate_segmentation(
                &preds,
                &test_labels,
                &test_categories,
                &data.part_sets,
            )?
            .mean_instance_iou
            .unwrap_or(0.0);
        }
        log.push(EpochRow {
            epoch: epochs_run,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            test_metric: last_metric,
        });
        if cfg
            .train
            .early_stop_metric
            .is_some_and(|target| last_metric >= target)
        {
            break;
        }
    }
    let preds = segment_clouds(&net, &store, &data.test, &data.part_sets)?;
    let final_metrics =
        evaluate_segmentation(&preds, &test_labels, &test_categories, &data.part_sets)?;
    Ok(SegmentationRun {
        net,
        store,
        log,
        final_metrics,
        epochs_run,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RobustnessMode {
    /// Keep a random subset of each cloud; levels are kept point counts.
    Dropout,
    /// Add Gaussian position noise; levels scale each cloud's bounding radius.
    Noise,
}

/// Evaluate a trained classifier under point dropout or position noise.
/// Returns one (level, overall accuracy) pair per level, deterministic in
/// `seed`.
pub fn robustness_sweep(
    net: &ClassificationNet,
    store: &ParamStore,
    test: &[PointCloud],
    mode: RobustnessMode,
    levels: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let labels: Vec<usize> = test.iter().map(|c| c.shape_label().unwrap_or(0)).collect();
    let mut curve = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut rng = Rng::new(seed).stream(&format!("robustness.{level}"));
        let mut preds = Vec::with_capacity(test.len());
        for cloud in test {
            let perturbed = match mode {
                RobustnessMode::Dropout => {
                    let keep = level as usize;
                    if keep < net.k {
                        return Err(Error::config(format!(
                            "dropout level {keep} leaves fewer points than k = {}",
                            net.k
                        )));
                    }
                    if keep > cloud.len() {
                        return Err(Error::config(format!(
                            "dropout level {keep} exceeds cloud size {}",
                            cloud.len()
                        )));
                    }
                    let kept = rng.subset(cloud.len(), keep);
                    cloud.select(&kept)?
                }
                RobustnessMode::Noise => {
                    let std = level * cloud.bounding_radius();
                    let mut out = cloud.clone();
                    out.map_positions(|_, p| {
                        [
                            p[0] + std * rng.normal(),
                            p[1] + std * rng.normal(),
                            p[2] + std * rng.normal(),
                        ]
                    });
                    out
                }
            };
            let pass = Pass::eval(store);
            let logits = net.forward(&pass, &[&perturbed])?;
            preds.push(argmax(logits.values()));
        }
        let oa = evaluate_classification(&preds, &labels)?.overall_accuracy;
        curve.push((level, oa));
    }
    Ok(curve)
}

/// Euclidean distance from the target point's feature vector at conv layer
/// `layer` to every point's feature vector, eval mode.
pub fn feature_distance_map(
    net: &ClassificationNet,
    store: &ParamStore,
    cloud: &PointCloud,
    layer: usize,
    target: usize,
) -> Result<Vec<f64>> {
    if target >= cloud.len() {
        return Err(Error::Index {
            index: target,
            len: cloud.len(),
        });
    }
    let pass = Pass::eval(store);
    let features = net.trunk_features(&pass, cloud)?;
    let f = features.get(layer).ok_or_else(|| {
        Error::contract(format!(
            "layer index {layer} out of range ({} conv layers)",
            features.len()
        ))
    })?;
    let d = f.shape()[1];
    let vals = f.values();
    let t = &vals[target * d..(target + 1) * d];
    Ok((0..cloud.len())
        .map(|i| {
            let row = &vals[i * d..(i + 1) * d];
            row.iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// As `feature_distance_map`, over a segmentation net's per-scale features
/// (upsampled to full resolution).
pub fn feature_distance_map_seg(
    net: &SegmentationNet,
    store: &ParamStore,
    cloud: &PointCloud,
    scale: usize,
    target: usize,
) -> Result<Vec<f64>> {
    if target >= cloud.len() {
        return Err(Error::Index {
            index: target,
            len: cloud.len(),
        });
    }
    let pass = Pass::eval(store);
    let (_, scales) = net.forward_with_scales(&pass, cloud)?;
    let f = scales.get(scale).ok_or_else(|| {
        Error::contract(format!(
            "scale index {scale} out of range ({} scales)",
            scales.len()
        ))
    })?;
    let d = f.shape()[1];
    let vals = f.values();
    let t = &vals[target * d..(target + 1) * d];
    Ok((0..cloud.len())
        .map(|i| {
            let row = &vals[i * d..(i + 1) * d];
            row.iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}
