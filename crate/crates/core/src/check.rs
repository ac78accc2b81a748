//! Finite-difference gradient verification.
//!
//! Central differences with step 1e-5 in double precision against the
//! tape's gradients, with the relative error taken as
//! |g_ad - g_fd| / (|g_fd| + 1e-8). Coordinates whose perturbation flips a
//! recorded kink decision (a LeakyReLU sign or a max argmax) between the
//! +step and -step evaluations are skipped rather than compared across the
//! non-differentiable point.

use crate::conv::{
    AdaptConvLayer, AttentionLayer, AttentionMode, ConvolveWith, GeometryCtx, GraphConvLayer,
};
use crate::error::Result;
use crate::graph::{knn_spatial, PointCloud};
use crate::layers::{BatchNorm, LEAKY_SLOPE};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Pass, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub worst_coord: usize,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= FD_TOLERANCE
    }
}

fn finite_diff(
    name: &str,
    x0: &[f64],
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> (f64, Vec<u32>),
) -> CheckReport {
    assert_eq!(
        x0.len(),
        analytic.len(),
        "{name}: analytic gradient length mismatch"
    );
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    let mut worst_coord = 0;
    let mut checked = 0;
    let mut skipped = 0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let (f_plus, sig_plus) = eval(&x);
        x[i] = orig - FD_STEP;
        let (f_minus, sig_minus) = eval(&x);
        x[i] = orig;
        if sig_plus != sig_minus {
            skipped += 1;
            continue;
        }
        let g_fd = (f_plus - f_minus) / (2.0 * FD_STEP);
        let rel = (analytic[i] - g_fd).abs() / (g_fd.abs() + 1e-8);
        if rel > worst {
            worst = rel;
            worst_coord = i;
        }
        checked += 1;
    }
    CheckReport {
        name: name.to_string(),
        worst_rel_err: worst,
        worst_coord,
        checked,
        skipped,
    }
}

/// Builds a loss from the flat input vector, returning the watched leaves
/// in the order their slices were consumed.
pub type GraphBuilder = dyn Fn(&Tape, &[f64]) -> (Tensor, Vec<Tensor>);

/// Check a tape-level graph. `build` receives the flat input vector and a
/// tape, watches whatever leaves it wants (consuming `x` in a fixed order),
/// and returns the scalar loss plus the watched leaves in that same order.
pub fn check_graph(name: &str, x0: &[f64], build: &GraphBuilder) -> CheckReport {
    let tape = Tape::new();
    tape.set_kink_tracking(true);
    let (loss, leaves) = build(&tape, x0);
    tape.backward(&loss).expect("backward in gradient check");
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|t| tape.grad(t).expect("leaf gradient"))
        .collect();
    finite_diff(name, x0, &analytic, |x| {
        let tape = Tape::new();
        tape.set_kink_tracking(true);
        let (loss, _) = build(&tape, x);
        (loss.item(), tape.kink_signature())
    })
}

/// Check a forward function that reads parameters from a store. The check
/// differentiates with respect to every trainable parameter (in name order)
/// followed by the extra watched inputs. Store values are restored afterward.
pub fn check_store_graph(
    name: &str,
    store: &ParamStore,
    inputs: &[(Vec<usize>, Vec<f64>)],
    forward: &dyn Fn(&Pass, &[Tensor]) -> Result<Tensor>,
) -> CheckReport {
    let saved: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.borrow().clone()))
        .collect();
    let trainable: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut x0 = Vec::new();
    for n in &trainable {
        x0.extend(store.value(n).unwrap());
    }
    for (_, v) in inputs {
        x0.extend_from_slice(v);
    }

    let apply = |x: &[f64]| {
        let mut off = 0;
        for n in &trainable {
            let len = store.get(n).unwrap().value.borrow().len();
            store.set_value(n, x[off..off + len].to_vec()).unwrap();
            off += len;
        }
        off
    };
    let run = |x: &[f64], want_grads: bool| -> (f64, Vec<u32>, Vec<f64>) {
        let mut off = apply(x);
        let pass = Pass::train(store, Rng::new(0));
        pass.tape().set_kink_tracking(true);
        let mut bound_inputs = Vec::new();
        for (shape, _) in inputs {
            let len: usize = shape.iter().product();
            let t = pass
                .tape()
                .var(x[off..off + len].to_vec(), shape)
                .expect("input leaf");
            off += len;
            bound_inputs.push(t);
        }
        let loss = forward(&pass, &bound_inputs).expect("forward in gradient check");
        let mut grads = Vec::new();
        if want_grads {
            store.zero_grads();
            pass.backward(&loss).expect("backward in gradient check");
            for n in &trainable {
                grads.extend(store.get(n).unwrap().grad.borrow().clone());
            }
            for t in &bound_inputs {
                grads.extend(pass.tape().grad(t).expect("input gradient"));
            }
        }
        (loss.item(), pass.tape().kink_signature(), grads)
    };

    let (_, _, analytic) = run(&x0, true);
    let report = finite_diff(name, &x0, &analytic, |x| {
        let (loss, sig, _) = run(x, false);
        (loss, sig)
    });

    for (n, v) in saved {
        store.set_value(&n, v).unwrap();
    }
    store.zero_grads();
    report
}

/// Fixed pseudo-random projection to turn a tensor-valued output into a
/// scalar loss that exercises every output coordinate.
pub fn weighted_loss(out: &Tensor, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let w: Vec<f64> = (0..out.len()).map(|_| rng.uniform(0.25, 1.75)).collect();
    let weights = Tensor::from_vec(w, out.shape()).unwrap();
    out.mul(&weights).unwrap().sum_all()
}

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn op_checks(reports: &mut Vec<CheckReport>) {
    let mut rng = Rng::new(0x5eed);

    let x = randn(&mut rng, 12);
    let y = randn(&mut rng, 8);
    reports.push(check_graph("matmul", &[x, y].concat(), &|tape, v| {
        let a = tape.var(v[..12].to_vec(), &[3, 4]).unwrap();
        let b = tape.var(v[12..].to_vec(), &[4, 2]).unwrap();
        let out = a.matmul(&b).unwrap();
        (weighted_loss(&out, 1), vec![a, b])
    }));

    let x = randn(&mut rng, 12);
    reports.push(check_graph("add_sub_mul", &x.repeat(2), &|tape, v| {
        let a = tape.var(v[..12].to_vec(), &[3, 4]).unwrap();
        let b = tape.var(v[12..].to_vec(), &[3, 4]).unwrap();
        let out = a.add(&b).unwrap().mul(&b).unwrap().sub(&a).unwrap();
        (weighted_loss(&out, 2), vec![a, b])
    }));

    let x = randn(&mut rng, 10);
    reports.push(check_graph("scale_add_scalar", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[10]).unwrap();
        let out = a.scale(-1.7).add_scalar(0.3);
        (weighted_loss(&out, 3), vec![a])
    }));

    let x: Vec<f64> = randn(&mut rng, 9).iter().map(|v| 0.5 + v * v).collect();
    reports.push(check_graph("exp_ln_sqrt", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[9]).unwrap();
        let out = a.sqrt().ln().exp();
        (weighted_loss(&out, 4), vec![a])
    }));

    let x = randn(&mut rng, 6 + 9);
    reports.push(check_graph("concat", &x, &|tape, v| {
        let a = tape.var(v[..6].to_vec(), &[2, 3]).unwrap();
        let b = tape.var(v[6..].to_vec(), &[3, 3]).unwrap();
        let out = Tensor::concat(&[a.clone(), b.clone()], 0).unwrap();
        (weighted_loss(&out, 5), vec![a, b])
    }));

    let x = randn(&mut rng, 5 * 2);
    reports.push(check_graph("gather_rows", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[5, 2]).unwrap();
        let idx = vec![vec![0, 0, 3], vec![1, 2, 2], vec![4, 0, 1]];
        let out = a.gather_rows(&idx).unwrap();
        (weighted_loss(&out, 6), vec![a])
    }));

    let x = randn(&mut rng, 14);
    reports.push(check_graph("leaky_relu", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[14]).unwrap();
        let out = a.leaky_relu(0.2);
        (weighted_loss(&out, 7), vec![a])
    }));

    let x = randn(&mut rng, 4 * 3 + 3 * 5 + 4 * 2 + 2 * 5 + 5);
    reports.push(check_graph("linear2", &x, &|tape, v| {
        let x1 = tape.var(v[..12].to_vec(), &[4, 3]).unwrap();
        let w1 = tape.var(v[12..27].to_vec(), &[3, 5]).unwrap();
        let x2 = tape.var(v[27..35].to_vec(), &[4, 2]).unwrap();
        let w2 = tape.var(v[35..45].to_vec(), &[2, 5]).unwrap();
        let b = tape.var(v[45..].to_vec(), &[5]).unwrap();
        let out = Tensor::linear2(&x1, &w1, &x2, &w2, Some(&b)).unwrap();
        (weighted_loss(&out, 23), vec![x1, w1, x2, w2, b])
    }));

    let x = randn(&mut rng, 5 * 3);
    reports.push(check_graph("gather_pairs", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[5, 3]).unwrap();
        let idx = vec![vec![0, 2, 4], vec![1, 1, 3], vec![4, 0, 2]];
        let out = a.gather_pairs(&idx).unwrap();
        (weighted_loss(&out, 24), vec![a])
    }));

    let x = randn(&mut rng, 2 * 4 * 3);
    reports.push(check_graph("reduce_max_axis", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[2, 4, 3]).unwrap();
        let out = a.reduce_max_axis(1).unwrap().0;
        (weighted_loss(&out, 8), vec![a])
    }));

    let x = randn(&mut rng, 2 * 3 * 4);
    reports.push(check_graph("reduce_sum_mean_axis", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[2, 3, 4]).unwrap();
        let out = a.reduce_sum_axis(2).unwrap().reduce_mean_axis(0).unwrap();
        (weighted_loss(&out, 9), vec![a])
    }));

    let kernel = randn(&mut rng, 2 * 3 * 3 * 4);
    let geo = randn(&mut rng, 2 * 3 * 4);
    reports.push(check_graph(
        "edge_inner_product",
        &[kernel, geo].concat(),
        &|tape, v| {
            let k = tape.var(v[..72].to_vec(), &[2, 3, 3, 4]).unwrap();
            let g = tape.var(v[72..].to_vec(), &[2, 3, 4]).unwrap();
            let out = Tensor::edge_inner_product(&k, &g).unwrap();
            (weighted_loss(&out, 10), vec![k, g])
        },
    ));

    let x = randn(&mut rng, 4 * 5);
    reports.push(check_graph("softmax", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[4, 5]).unwrap();
        let out = a.softmax(1).mul(&a.softmax(0)).unwrap();
        (weighted_loss(&out, 11), vec![a])
    }));

    let mut x = randn(&mut rng, 3 * 4 + 4 + 3);
    for v in x[12..16].iter_mut() {
        // keep the division denominators away from zero
        *v = 1.5 + *v * *v;
    }
    reports.push(check_graph("row_col_broadcasts", &x, &|tape, v| {
        let a = tape.var(v[..12].to_vec(), &[3, 4]).unwrap();
        let row = tape.var(v[12..16].to_vec(), &[4]).unwrap();
        let col = tape.var(v[16..].to_vec(), &[3]).unwrap();
        let out1 = a
            .add_row(&row)
            .unwrap()
            .mul_row(&row)
            .unwrap()
            .sub_col(&col)
            .unwrap();
        let out2 = a.div_row(&row).unwrap().sub_row(&row).unwrap();
        let loss = weighted_loss(&out1, 12).add(&weighted_loss(&out2, 22)).unwrap();
        (loss, vec![a, row, col])
    }));

    let x = randn(&mut rng, 3 * 4);
    reports.push(check_graph("pick_rows", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[3, 4]).unwrap();
        let out = a.pick_rows(&[2, 0, 3]).unwrap();
        (weighted_loss(&out, 13), vec![a])
    }));

    let x = randn(&mut rng, 5);
    reports.push(check_graph("repeat_last_reshape", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[5, 1]).unwrap();
        let out = a.repeat_last(3).unwrap().reshape(&[3, 5]).unwrap();
        (weighted_loss(&out, 14), vec![a])
    }));

    let x = randn(&mut rng, 6 * 3);
    reports.push(check_graph("normalize_rows", &x, &|tape, v| {
        let a = tape.var(v.to_vec(), &[6, 3]).unwrap();
        let out = a.normalize_rows(crate::layers::BN_EPSILON).unwrap().0;
        (weighted_loss(&out, 15), vec![a])
    }));
}

fn layer_store(seed: u64) -> (ParamStore, Rng) {
    (ParamStore::new(), Rng::new(seed))
}

fn conv_fixture(n: usize, seed: u64) -> (PointCloud, Vec<[f64; 3]>) {
    let mut rng = Rng::new(seed);
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.normal(), rng.normal(), rng.normal()])
        .collect();
    let normals: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / len, v[1] / len, v[2] / len]
        })
        .collect();
    let cloud = PointCloud::new(pts).unwrap().with_normals(&normals).unwrap();
    (cloud, normals)
}

fn adaptconv_check(variant: ConvolveWith, reports: &mut Vec<CheckReport>) {
    let (mut store, mut rng) = layer_store(21 + variant.geometry_width(4) as u64);
    let (n, k, d_in, m) = (5, 3, 4, 3);
    let layer = AdaptConvLayer::new(
        &mut store, &mut rng, "l", d_in, m, None, variant, true, LEAKY_SLOPE,
    )
    .unwrap();
    let (cloud, normals) = conv_fixture(n, 31);
    let graph = knn_spatial(cloud.positions(), k).unwrap();
    let mut frng = Rng::new(77);
    let feats = randn(&mut frng, n * d_in);
    let name = format!("adaptconv_{:?}", variant).to_lowercase();
    reports.push(check_store_graph(
        &name,
        &store,
        &[(vec![n, d_in], feats)],
        &move |pass, inputs| {
            let geom = GeometryCtx {
                positions: cloud.positions(),
                normals: Some(&normals),
            };
            let out = layer.forward(pass, &geom, &inputs[0], &graph, variant)?;
            Ok(weighted_loss(&out, 16))
        },
    ));
}

fn layer_checks(reports: &mut Vec<CheckReport>) {
    for variant in [
        ConvolveWith::Spatial,
        ConvolveWith::Feature,
        ConvolveWith::Normal,
        ConvolveWith::InitialAttributes,
    ] {
        adaptconv_check(variant, reports);
    }

    {
        let (mut store, mut rng) = layer_store(41);
        let (n, k, d_in, m) = (6, 3, 3, 4);
        let layer =
            GraphConvLayer::new(&mut store, &mut rng, "g", d_in, m, true, LEAKY_SLOPE).unwrap();
        let (cloud, _) = conv_fixture(n, 42);
        let graph = knn_spatial(cloud.positions(), k).unwrap();
        let mut frng = Rng::new(43);
        let feats = randn(&mut frng, n * d_in);
        reports.push(check_store_graph(
            "graphconv",
            &store,
            &[(vec![n, d_in], feats)],
            &move |pass, inputs| {
                let out = layer.forward(pass, &inputs[0], &graph)?;
                Ok(weighted_loss(&out, 17))
            },
        ));
    }

    for (mode, name) in [
        (AttentionMode::Point, "attention_point"),
        (AttentionMode::Channel, "attention_channel"),
    ] {
        let (mut store, mut rng) = layer_store(51);
        let (n, k, d_in, m) = (5, 3, 3, 4);
        let layer =
            AttentionLayer::new(&mut store, &mut rng, "a", d_in, m, mode, true, LEAKY_SLOPE)
                .unwrap();
        let (cloud, _) = conv_fixture(n, 52);
        let graph = knn_spatial(cloud.positions(), k).unwrap();
        let mut frng = Rng::new(53);
        let feats = randn(&mut frng, n * d_in);
        reports.push(check_store_graph(
            name,
            &store,
            &[(vec![n, d_in], feats)],
            &move |pass, inputs| {
                let out = layer.forward(pass, &inputs[0], &graph)?;
                Ok(weighted_loss(&out, 18))
            },
        ));
    }

    {
        let (mut store, _) = layer_store(61);
        let bn = BatchNorm::new(&mut store, "bn", 3, true).unwrap();
        let mut frng = Rng::new(62);
        let x = randn(&mut frng, 6 * 3);
        reports.push(check_store_graph(
            "batch_norm_layer",
            &store,
            &[(vec![6, 3], x)],
            &move |pass, inputs| {
                let out = bn.forward(pass, &inputs[0])?;
                Ok(weighted_loss(&out, 19))
            },
        ));
    }

    {
        let mut frng = Rng::new(63);
        let logits = randn(&mut frng, 4 * 5);
        reports.push(check_graph("cross_entropy", &logits, &|tape, v| {
            let a = tape.var(v.to_vec(), &[4, 5]).unwrap();
            let loss = crate::train::cross_entropy(&a, &[1, 0, 4, 2]).unwrap();
            (loss, vec![a])
        }));
    }

    {
        let (mut store, mut rng) = layer_store(71);
        let (n, k, d_in) = (6, 3, 3);
        let layer = AdaptConvLayer::new(
            &mut store,
            &mut rng,
            "pool",
            d_in,
            d_in,
            Some(6),
            ConvolveWith::Spatial,
            true,
            LEAKY_SLOPE,
        )
        .unwrap();
        let (cloud, normals) = conv_fixture(n, 72);
        let graph = knn_spatial(cloud.positions(), k).unwrap();
        // aggregate onto a subset of centers, neighborhoods in the full cloud
        let rows: Vec<Vec<usize>> = [1usize, 4].iter().map(|&c| graph.idx[c].clone()).collect();
        let mut frng = Rng::new(73);
        let feats = randn(&mut frng, n * d_in);
        reports.push(check_store_graph(
            "adaptconv_pooled_centers",
            &store,
            &[(vec![n, d_in], feats)],
            &move |pass, inputs| {
                let geom = GeometryCtx {
                    positions: cloud.positions(),
                    normals: Some(&normals),
                };
                let out = layer.forward_rows(pass, &geom, &inputs[0], &rows)?;
                Ok(weighted_loss(&out, 20))
            },
        ));
    }
}

/// Run the full finite-difference suite: every differentiable op, batch
/// normalization, the loss, and the convolution layers for all four
/// geometry variants. `inject_fault` corrupts one analytic gradient to prove
/// the harness can fail.
pub fn gradcheck_suite(inject_fault: bool) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    op_checks(&mut reports);
    layer_checks(&mut reports);
    if inject_fault {
        if let Some(r) = reports.first_mut() {
            r.worst_rel_err += 1.0;
            r.name = format!("{} [injected fault]", r.name);
        }
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_within_tolerance() {
        let reports = gradcheck_suite(false);
        assert!(reports.len() >= 20);
        for r in &reports {
            assert!(
                r.passed(),
                "{}: worst rel err {:.3e} at coord {} (checked {}, skipped {})",
                r.name,
                r.worst_rel_err,
                r.worst_coord,
                r.checked,
                r.skipped
            );
            assert!(r.checked > 0, "{}: nothing checked", r.name);
        }
    }

    #[test]
    fn suite_covers_all_variants() {
        let names: Vec<String> = gradcheck_suite(false).into_iter().map(|r| r.name).collect();
        for needle in [
            "adaptconv_spatial",
            "adaptconv_feature",
            "adaptconv_normal",
            "adaptconv_initialattributes",
        ] {
            assert!(names.iter().any(|n| n == needle), "missing {needle}");
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let reports = gradcheck_suite(true);
        assert!(reports.iter().any(|r| !r.passed()));
    }

    #[test]
    fn kink_skipping_handles_exact_kinks() {
        // a coordinate sitting exactly on the ReLU kink is skipped, the rest
        // are checked
        let x0 = vec![0.0, 1.0, -1.0];
        let report = check_graph("kink_fixture", &x0, &|tape, v| {
            let a = tape.var(v.to_vec(), &[3]).unwrap();
            let out = a.leaky_relu(0.2);
            (weighted_loss(&out, 30), vec![a])
        });
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 2);
        assert!(report.passed());
    }
}
