//! Synthetic desk-scale datasets and point-cloud file I/O.
//!
//! Three generators stand in for the benchmark datasets: `shapes3`
//! (classification over sphere/cube/cylinder surfaces), `parts2` (two-part
//! shapes in two categories for part segmentation), and `parts_adaptive`
//! (two coplanar half-disks distinguished mostly by local surface
//! statistics, built so feature-adaptive kernels have something to exploit).
//! Every generator is a pure function of (spec, seed): clouds are sampled on
//! exact surfaces with unit normals, displaced along the normal by clipped
//! Gaussian noise, then recentered and scaled into the unit sphere.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, GeneratorKind};
use crate::error::{Error, Result};
use crate::graph::PointCloud;
use crate::rng::Rng;

#[derive(Debug)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    /// Classification classes; for segmentation this equals the category count.
    pub class_count: usize,
    /// Legal part ids per category (empty for classification datasets).
    pub part_sets: Vec<Vec<usize>>,
    /// Total number of distinct part labels.
    pub part_count: usize,
    pub category_count: usize,
}

struct SurfacePoint {
    position: [f64; 3],
    normal: [f64; 3],
    part: Option<usize>,
}

fn unit_normal3(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-9 {
            return [v[0] / len, v[1] / len, v[2] / len];
        }
    }
}

fn sample_sphere(rng: &mut Rng, radius: f64, center: [f64; 3]) -> SurfacePoint {
    let n = unit_normal3(rng);
    SurfacePoint {
        position: [
            center[0] + radius * n[0],
            center[1] + radius * n[1],
            center[2] + radius * n[2],
        ],
        normal: n,
        part: None,
    }
}

fn sample_cube(rng: &mut Rng, half: f64) -> SurfacePoint {
    let face = rng.below(6);
    let axis = face / 2;
    let sign = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
    let u = rng.uniform(-half, half);
    let v = rng.uniform(-half, half);
    let mut p = [0.0; 3];
    p[axis] = sign * half;
    p[(axis + 1) % 3] = u;
    p[(axis + 2) % 3] = v;
    let mut n = [0.0; 3];
    n[axis] = sign;
    SurfacePoint {
        position: p,
        normal: n,
        part: None,
    }
}

/// Cylinder along `axis` (0, 1 or 2) covering [lo, hi], caps included,
/// sampled proportionally to surface area.
fn sample_cylinder(rng: &mut Rng, radius: f64, axis: usize, lo: f64, hi: f64) -> SurfacePoint {
    let h = hi - lo;
    let lateral = 2.0 * std::f64::consts::PI * radius * h;
    let caps = 2.0 * std::f64::consts::PI * radius * radius;
    let theta = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut p = [0.0; 3];
    let mut n = [0.0; 3];
    if rng.next_f64() < lateral / (lateral + caps) {
        p[axis] = rng.uniform(lo, hi);
        p[a1] = radius * theta.cos();
        p[a2] = radius * theta.sin();
        n[a1] = theta.cos();
        n[a2] = theta.sin();
    } else {
        let top = rng.next_f64() < 0.5;
        let r = radius * rng.next_f64().sqrt();
        p[axis] = if top { hi } else { lo };
        p[a1] = r * theta.cos();
        p[a2] = r * theta.sin();
        n[axis] = if top { 1.0 } else { -1.0 };
    }
    SurfacePoint {
        position: p,
        normal: n,
        part: None,
    }
}

/// Displace along normals by clipped Gaussian noise, recenter at the
/// centroid, and scale down if anything left the unit sphere.
fn finish_cloud(mut points: Vec<SurfacePoint>, noise_std: f64, rng: &mut Rng) -> Vec<SurfacePoint> {
    for sp in points.iter_mut() {
        let d = (rng.normal() * noise_std).clamp(-3.0 * noise_std, 3.0 * noise_std);
        for a in 0..3 {
            sp.position[a] += d * sp.normal[a];
        }
    }
    let mut c = [0.0; 3];
    for sp in &points {
        for (ca, pa) in c.iter_mut().zip(&sp.position) {
            *ca += pa;
        }
    }
    for a in c.iter_mut() {
        *a /= points.len() as f64;
    }
    let mut max_r2: f64 = 0.0;
    for sp in points.iter_mut() {
        for (pa, ca) in sp.position.iter_mut().zip(&c) {
            *pa -= ca;
        }
        let r2 = sp.position.iter().map(|x| x * x).sum();
        max_r2 = max_r2.max(r2);
    }
    let max_r = max_r2.sqrt();
    let limit = 1.0 + 3.0 * noise_std;
    if max_r > limit {
        let s = limit / max_r;
        for sp in points.iter_mut() {
            for a in 0..3 {
                sp.position[a] *= s;
            }
        }
    }
    points
}

fn build_cloud(points: Vec<SurfacePoint>) -> Result<PointCloud> {
    let positions: Vec<[f64; 3]> = points.iter().map(|p| p.position).collect();
    let normals: Vec<[f64; 3]> = points.iter().map(|p| p.normal).collect();
    let cloud = PointCloud::new(positions)?.with_normals(&normals)?;
    if points.iter().all(|p| p.part.is_some()) {
        cloud.with_point_labels(points.iter().map(|p| p.part.unwrap()).collect())
    } else {
        Ok(cloud)
    }
}

/// Sphere, cube and cylinder surfaces with class labels 0/1/2. Samples are
/// drawn antithetically (every second point mirrors the previous one) so the
/// clean shape's centroid is exactly zero and recentering stays benign.
pub fn generate_shapes3_cloud(class: usize, n: usize, noise_std: f64, rng: &mut Rng) -> Result<PointCloud> {
    let cube_half = 1.0 / 3.0f64.sqrt();
    let mut points: Vec<SurfacePoint> = Vec::with_capacity(n);
    while points.len() < n {
        let sp = match class {
            0 => sample_sphere(rng, 1.0, [0.0; 3]),
            1 => sample_cube(rng, cube_half),
            _ => sample_cylinder(rng, 0.6, 2, -0.8, 0.8),
        };
        let mirror = SurfacePoint {
            position: [-sp.position[0], -sp.position[1], -sp.position[2]],
            normal: [-sp.normal[0], -sp.normal[1], -sp.normal[2]],
            part: None,
        };
        points.push(sp);
        if points.len() < n {
            points.push(mirror);
        }
    }
    Ok(build_cloud(finish_cloud(points, noise_std, rng))?.with_shape_label(class))
}

/// Two-part shapes in two categories: a sphere body with a side handle
/// (parts 0/1) and a cube body with a top handle (parts 2/3).
pub fn generate_parts2_cloud(category: usize, n: usize, noise_std: f64, rng: &mut Rng) -> Result<PointCloud> {
    let n_body = ((n as f64) * 0.65).round().max(1.0) as usize;
    let n_handle = (n - n_body).max(1);
    let n_body = n - n_handle;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n_body {
        let mut sp = if category == 0 {
            sample_sphere(rng, 0.62, [0.0; 3])
        } else {
            sample_cube(rng, 0.5)
        };
        sp.part = Some(if category == 0 { 0 } else { 2 });
        points.push(sp);
    }
    for _ in 0..n_handle {
        let mut sp = if category == 0 {
            sample_cylinder(rng, 0.16, 0, 0.55, 1.35)
        } else {
            sample_cylinder(rng, 0.16, 2, 0.45, 1.3)
        };
        sp.part = Some(if category == 0 { 1 } else { 3 });
        points.push(sp);
    }
    let cloud = build_cloud(finish_cloud(points, noise_std, rng))?;
    let onehot = if category == 0 {
        vec![1.0, 0.0]
    } else {
        vec![0.0, 1.0]
    };
    cloud.with_shape_label(category).with_category_onehot(onehot)
}

/// Two coplanar half-disks: one flat, one carrying a low-amplitude ripple,
/// so the parts differ mostly in local curvature and normal statistics
/// rather than in gross position. Categories differ in ripple frequency.
pub fn generate_parts_adaptive_cloud(
    category: usize,
    n: usize,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<PointCloud> {
    let (freq, amp) = if category == 0 { (4.0, 0.08) } else { (7.0, 0.06) };
    let n_flat = n / 2;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let flat = i < n_flat;
        let r = rng.next_f64().sqrt();
        // angle restricted to one half-plane per part
        let theta = if flat {
            rng.uniform(0.5 * std::f64::consts::PI, 1.5 * std::f64::consts::PI)
        } else {
            rng.uniform(-0.5 * std::f64::consts::PI, 0.5 * std::f64::consts::PI)
        };
        let x = r * theta.cos();
        let y = r * theta.sin();
        let (z, normal) = if flat {
            (0.0, [0.0, 0.0, 1.0])
        } else {
            let fp = freq * std::f64::consts::PI;
            let z = amp * (fp * x).sin() * (fp * y).sin();
            let dzdx = amp * fp * (fp * x).cos() * (fp * y).sin();
            let dzdy = amp * fp * (fp * x).sin() * (fp * y).cos();
            let len = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            (z, [-dzdx / len, -dzdy / len, 1.0 / len])
        };
        points.push(SurfacePoint {
            position: [x, y, z],
            normal,
            part: Some(if category == 0 {
                usize::from(!flat)
            } else {
                2 + usize::from(!flat)
            }),
        });
    }
    let cloud = build_cloud(finish_cloud(points, noise_std, rng))?;
    let onehot = if category == 0 {
        vec![1.0, 0.0]
    } else {
        vec![0.0, 1.0]
    };
    cloud.with_shape_label(category).with_category_onehot(onehot)
}

/// Generate the dataset a spec describes. `fallback_seed` is used when the
/// spec carries no seed of its own.
pub fn generate(spec: &DatasetSpec, fallback_seed: u64) -> Result<Dataset> {
    let seed = spec.seed.unwrap_or(fallback_seed);
    let mut rng = Rng::new(seed).stream("data");
    let train_per_class = spec.train_count_per_class();
    if train_per_class == 0 || train_per_class >= spec.samples_per_class {
        return Err(Error::config(format!(
            "split {:?} leaves no train or no test samples",
            spec.split
        )));
    }
    let (class_count, categories, part_sets): (usize, usize, Vec<Vec<usize>>) = match spec.generator
    {
        GeneratorKind::Shapes3 => (3, 0, vec![]),
        GeneratorKind::Parts2 | GeneratorKind::PartsAdaptive => {
            (2, 2, vec![vec![0, 1], vec![2, 3]])
        }
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..class_count {
        for s in 0..spec.samples_per_class {
            let cloud = match spec.generator {
                GeneratorKind::Shapes3 => {
                    generate_shapes3_cloud(class, spec.points, spec.noise_std, &mut rng)?
                }
                GeneratorKind::Parts2 => {
                    generate_parts2_cloud(class, spec.points, spec.noise_std, &mut rng)?
                }
                GeneratorKind::PartsAdaptive => {
                    generate_parts_adaptive_cloud(class, spec.points, spec.noise_std, &mut rng)?
                }
            };
            if s < train_per_class {
                train.push(cloud);
            } else {
                test.push(cloud);
            }
        }
    }
    let part_count = part_sets.iter().map(|s| s.len()).sum();
    Ok(Dataset {
        train,
        test,
        class_count,
        part_sets,
        part_count,
        category_count: categories,
    })
}

/// Write a cloud as plain text: a `N E L` header, then one line per point
/// with E float columns (17 significant digits) and L integer labels.
pub fn save_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (width, attrs) = match cloud.attributes() {
        Some((w, a)) => (w, a.to_vec()),
        None => {
            let mut a = Vec::with_capacity(cloud.len() * 3);
            for p in cloud.positions() {
                a.extend_from_slice(p);
            }
            (3, a)
        }
    };
    let labels = cloud.point_labels();
    let l = usize::from(labels.is_some());
    writeln!(f, "{} {} {}", cloud.len(), width, l)?;
    for i in 0..cloud.len() {
        let row = &attrs[i * width..(i + 1) * width];
        let mut line = String::new();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{v:.16e}"));
        }
        if let Some(ls) = labels {
            line.push_str(&format!(" {}", ls[i]));
        }
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn load_points(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))??;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(parse_err(1, format!("expected header `N E L`, got `{header}`")));
    }
    let n: usize = head[0]
        .parse()
        .map_err(|_| parse_err(1, format!("bad N `{}`", head[0])))?;
    let e: usize = head[1]
        .parse()
        .map_err(|_| parse_err(1, format!("bad E `{}`", head[1])))?;
    let l: usize = head[2]
        .parse()
        .map_err(|_| parse_err(1, format!("bad L `{}`", head[2])))?;
    if e < 3 {
        return Err(parse_err(1, format!("E = {e} must be at least 3")));
    }
    if l > 1 {
        return Err(parse_err(1, format!("L = {l} label columns unsupported (0 or 1)")));
    }
    let mut positions = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n * e);
    let mut labels = Vec::new();
    let mut body_rows = 0usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if body_rows == n {
            return Err(parse_err(
                line_no,
                format!("expected {n} rows from the header, found more"),
            ));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != e + l {
            return Err(parse_err(
                line_no,
                format!("expected {} columns, got {}", e + l, fields.len()),
            ));
        }
        let mut row = Vec::with_capacity(e);
        for fld in &fields[..e] {
            row.push(
                fld.parse::<f64>()
                    .map_err(|_| parse_err(line_no, format!("bad float `{fld}`")))?,
            );
        }
        positions.push([row[0], row[1], row[2]]);
        attrs.extend_from_slice(&row);
        if l == 1 {
            labels.push(
                fields[e]
                    .parse::<usize>()
                    .map_err(|_| parse_err(line_no, format!("bad label `{}`", fields[e])))?,
            );
        }
        body_rows += 1;
    }
    if body_rows != n {
        return Err(parse_err(
            body_rows + 1,
            format!("header says {n} rows, body has {body_rows}"),
        ));
    }
    let mut cloud = PointCloud::new(positions)?.with_attributes(e, attrs)?;
    if l == 1 {
        cloud = cloud.with_point_labels(labels)?;
    }
    Ok(cloud)
}

#[derive(Serialize, Deserialize)]
struct ManifestCloud {
    path: String,
    split: String,
    shape_label: usize,
    category: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    class_count: usize,
    category_count: usize,
    part_sets: Vec<Vec<usize>>,
    clouds: Vec<ManifestCloud>,
}

/// Write every cloud as a .pts file plus a JSON manifest in `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut clouds = Vec::new();
    for (split, set) in [("train", &data.train), ("test", &data.test)] {
        for (i, cloud) in set.iter().enumerate() {
            let name = format!("{split}-{i:04}.pts");
            save_points(&dir.join(&name), cloud)?;
            clouds.push(ManifestCloud {
                path: name,
                split: split.to_string(),
                shape_label: cloud.shape_label().unwrap_or(0),
                category: cloud.category(),
            });
        }
    }
    let manifest = Manifest {
        version: 1,
        class_count: data.class_count,
        category_count: data.category_count,
        part_sets: data.part_sets.clone(),
        clouds,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mc in &manifest.clouds {
        let mut cloud = load_points(&dir.join(&mc.path))?.with_shape_label(mc.shape_label);
        if let Some(cat) = mc.category {
            if manifest.category_count > 0 {
                let mut onehot = vec![0.0; manifest.category_count];
                if cat >= manifest.category_count {
                    return Err(Error::config(format!(
                        "manifest category {cat} out of range"
                    )));
                }
                onehot[cat] = 1.0;
                cloud = cloud.with_category_onehot(onehot)?;
            }
        }
        match mc.split.as_str() {
            "train" => train.push(cloud),
            "test" => test.push(cloud),
            other => {
                return Err(Error::config(format!("manifest split `{other}` unknown")));
            }
        }
    }
    let part_count = manifest.part_sets.iter().map(|s| s.len()).sum();
    Ok(Dataset {
        train,
        test,
        class_count: manifest.class_count,
        part_sets: manifest.part_sets,
        part_count,
        category_count: manifest.category_count,
    })
}
