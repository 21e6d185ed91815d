//! Synthetic scenes, hold-out evaluation of virtual-point quality, and
//! retrieval benchmarks.
//!
//! Hold-out evaluation hides a fraction of each instance's reference points,
//! uses their pixels as seeds, lifts them with depths retrieved from the
//! remaining references, and compares the virtual points to the hidden real
//! points. Each mask holds out `floor(fraction * n)` of its `n` references
//! (at most `n - 1`), chosen uniformly without replacement from the stream
//! `rng::stream(rng_seed, &[2, view, mask])`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, unproject, Camera, InstanceMask, Point3, ReferencePoint};
use crate::gma::assign_references;
use crate::mdu::{knn_depths, FeatureMap, Seed};
use crate::rng::stream;
use crate::scene::{CameraView, Scene};
use crate::voxelgrid::{Modality, SparseVoxelTensor, VoxelEntry, VoxelKey};

/// Recall neighborhood radius in meters: the diagonal of the finest voxel
/// (0.075 m, 0.075 m, 0.2 m), rounded.
pub const RECALL_RADIUS: f64 = 0.23;

pub const IMAGE_WIDTH: u32 = 800;
pub const IMAGE_HEIGHT: u32 = 448;

const PLACEMENT_RETRIES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SceneKind {
    /// Points filling an ellipsoid per instance.
    Ellipsoid,
    /// Points on `layers` stacked fronto-parallel rectangles per instance,
    /// spaced along the viewing direction.
    Planar { layers: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub instances: usize,
    pub points_per_instance: usize,
    /// Instance size scale in meters.
    pub spread: f64,
    #[serde(flatten)]
    pub kind: SceneKind,
    /// Channels of the synthetic feature maps.
    pub channels: usize,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn new(instances: usize, points_per_instance: usize, spread: f64, rng_seed: u64) -> Self {
        Self {
            instances,
            points_per_instance,
            spread,
            kind: SceneKind::Ellipsoid,
            channels: 4,
            rng_seed,
        }
    }

    pub fn with_kind(mut self, kind: SceneKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene,
    /// Instance id of every point.
    pub labels: Vec<u32>,
    pub rng_seed: u64,
}

/// Forward-looking camera 1 m above the world origin. World axes: x forward,
/// y left, z up.
pub fn default_camera() -> Camera {
    let rotation = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
    // t = -R * (0, 0, 1)
    Camera::new(
        560.0,
        560.0,
        f64::from(IMAGE_WIDTH) / 2.0,
        f64::from(IMAGE_HEIGHT) / 2.0,
        rotation,
        [0.0, 1.0, 0.0],
        IMAGE_WIDTH,
        IMAGE_HEIGHT,
    )
    .expect("valid camera")
}

fn instance_points<R: Rng>(rng: &mut R, spec: &SceneSpec) -> Vec<Point3> {
    let depth = rng.gen_range(8.0..30.0);
    let lateral = rng.gen_range(-0.45..0.45) * depth;
    let height = rng.gen_range(0.0..1.2);
    let s = spec.spread;
    let n = spec.points_per_instance;
    match spec.kind {
        SceneKind::Ellipsoid => {
            let axes = [
                s * rng.gen_range(0.8..1.4),
                s * rng.gen_range(0.6..1.2),
                s * rng.gen_range(0.4..0.8),
            ];
            let mut pts = Vec::with_capacity(n);
            while pts.len() < n {
                let q: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                if q.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                    pts.push(Point3::new(
                        depth + q[0] * axes[0],
                        lateral + q[1] * axes[1],
                        height + q[2] * axes[2],
                    ));
                }
            }
            pts
        }
        SceneKind::Planar { layers } => {
            let layers = layers.max(1);
            let half_w = s * rng.gen_range(1.0..1.5);
            let half_h = s * rng.gen_range(0.6..0.9);
            let gaps: Vec<f64> = (0..layers)
                .scan(0.0, |acc, l| {
                    if l > 0 {
                        *acc += rng.gen_range(1.5..3.0);
                    }
                    Some(*acc)
                })
                .collect();
            (0..n)
                .map(|i| {
                    Point3::new(
                        depth + gaps[i % layers],
                        lateral + rng.gen_range(-half_w..half_w),
                        height + rng.gen_range(-half_h..half_h),
                    )
                })
                .collect()
        }
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull in counter-clockwise order (monotone chain).
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside_hull(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    hull.len() >= 3 && (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// Mask covering the convex pixel hull of the projections, plus every cell
/// holding a projection, dilated by one cell and clipped to the image.
pub fn hull_mask(instance_id: u32, refs: &[ReferencePoint], cam: &Camera) -> Result<InstanceMask> {
    let pix: Vec<(f64, f64)> = refs.iter().map(|r| (r.u, r.v)).collect();
    let hull = convex_hull(&pix);
    let mut cells: BTreeSet<(i64, i64)> = refs.iter().map(ReferencePoint::cell).collect();
    if hull.len() >= 3 {
        let (mut u0, mut v0, mut u1, mut v1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(u, v) in &hull {
            u0 = u0.min(u);
            v0 = v0.min(v);
            u1 = u1.max(u);
            v1 = v1.max(v);
        }
        for v in v0.floor() as i64..=v1.floor() as i64 {
            for u in u0.floor() as i64..=u1.floor() as i64 {
                if inside_hull(&hull, (u as f64 + 0.5, v as f64 + 0.5)) {
                    cells.insert((u, v));
                }
            }
        }
    }
    let (w, h) = (i64::from(cam.width()), i64::from(cam.height()));
    let dilated = cells.iter().flat_map(|&(u, v)| {
        (-1..=1).flat_map(move |dv| (-1..=1).map(move |du| (u + du, v + dv)))
    });
    InstanceMask::from_cells(
        instance_id,
        dilated
            .filter(|&(u, v)| u >= 0 && v >= 0 && u < w && v < h)
            .map(|(u, v)| (u as u32, v as u32)),
    )
}

/// Smooth deterministic feature map standing in for image backbone output.
pub fn synthetic_features(width: usize, height: usize, channels: usize, rng_seed: u64) -> Result<FeatureMap> {
    let mut rng = stream(rng_seed, &[0xFEA7]);
    let waves: Vec<(f64, f64, f64)> = (0..channels)
        .map(|_| (rng.gen_range(0.005..0.05), rng.gen_range(0.005..0.05), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let mut data = Vec::with_capacity(width * height * channels);
    for v in 0..height {
        for u in 0..width {
            for &(a, b, phi) in &waves {
                data.push((a * u as f64 + b * v as f64 + phi).sin());
            }
        }
    }
    FeatureMap::new(width, height, channels, data)
}

/// Clustered synthetic scene seen by [`default_camera`]. Instances that fail
/// to project into the image are re-placed a bounded number of times.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.instances == 0 || spec.points_per_instance == 0 {
        return Err(Error::invalid("instance and point counts must be at least 1"));
    }
    if !(spec.spread > 0.0) || spec.channels == 0 {
        return Err(Error::invalid("spread and channels must be positive"));
    }
    let cam = default_camera();
    let mut points = Vec::with_capacity(spec.instances * spec.points_per_instance);
    let mut labels = Vec::with_capacity(points.capacity());
    let mut masks = Vec::with_capacity(spec.instances);
    for inst in 0..spec.instances {
        let mut rng = stream(spec.rng_seed, &[1, inst as u64]);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let pts = instance_points(&mut rng, spec);
            let refs = project(&pts, &cam);
            if !refs.is_empty() {
                placed = Some((pts, refs));
                break;
            }
        }
        let Some((pts, refs)) = placed else {
            return Err(Error::Generation(format!(
                "instance {inst} never projected into the image after {PLACEMENT_RETRIES} placements"
            )));
        };
        masks.push(hull_mask(inst as u32, &refs, &cam)?);
        labels.extend(std::iter::repeat_n(inst as u32, pts.len()));
        points.extend(pts);
    }
    let features = synthetic_features(cam.width() as usize, cam.height() as usize, spec.channels, spec.rng_seed)?;
    Ok(SyntheticScene {
        scene: Scene {
            points,
            views: vec![CameraView {
                id: "0".into(),
                camera: cam,
                masks,
                features: Some(features),
            }],
        },
        labels,
        rng_seed: spec.rng_seed,
    })
}

/// How a held-out point is matched to virtual points for the error metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Nearest among the virtual points lifted from its own seed.
    #[default]
    OwnSeed,
    /// Nearest among all virtual points.
    GlobalNearest,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MduReport {
    pub k: usize,
    pub mean_error: f64,
    pub recall: f64,
    pub nvpf: usize,
    pub held_out: usize,
}

struct HeldOut {
    truth: Point3,
    seed: Seed,
    camera: usize,
    /// Depths of the nearest remaining references, nearest first.
    depths: Vec<f64>,
}

fn split_references(scene: &Scene, holdout_fraction: f64, max_k: usize, rng_seed: u64) -> Result<Vec<HeldOut>> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let mut held = Vec::new();
    for (vi, view) in scene.views.iter().enumerate() {
        let refs = project(&scene.points, &view.camera);
        for (mi, mask) in view.masks.iter().enumerate() {
            let inst: Vec<ReferencePoint> = refs.iter().filter(|r| mask.contains(r.u, r.v)).copied().collect();
            let count = ((holdout_fraction * inst.len() as f64).floor() as usize).min(inst.len().saturating_sub(1));
            if count == 0 {
                continue;
            }
            let mut rng = stream(rng_seed, &[2, vi as u64, mi as u64]);
            let mut picked = rand::seq::index::sample(&mut rng, inst.len(), count).into_vec();
            picked.sort_unstable();
            let picked_set: HashSet<usize> = picked.iter().copied().collect();
            let remaining: Vec<ReferencePoint> = (0..inst.len())
                .filter(|i| !picked_set.contains(i))
                .map(|i| inst[i])
                .collect();
            for i in picked {
                let r = inst[i];
                let seed = Seed {
                    u: r.u,
                    v: r.v,
                    instance_id: mask.instance_id(),
                };
                let depths = knn_depths(&seed, &remaining, max_k)?
                    .into_iter()
                    .map(|(d, _)| d)
                    .collect();
                held.push(HeldOut {
                    truth: scene.points[r.source_index],
                    seed,
                    camera: vi,
                    depths,
                });
            }
        }
    }
    if held.is_empty() {
        return Err(Error::invalid("hold-out split is empty"));
    }
    Ok(held)
}

/// Uniform hash grid over 3D points for fixed-radius queries.
struct PointGrid {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<Point3>>,
}

impl PointGrid {
    fn new(cell: f64, points: impl IntoIterator<Item = Point3>) -> Self {
        let mut buckets: HashMap<_, Vec<Point3>> = HashMap::new();
        for p in points {
            buckets.entry(Self::key(cell, &p)).or_default().push(p);
        }
        Self { cell, buckets }
    }

    fn key(cell: f64, p: &Point3) -> (i64, i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    fn any_within(&self, p: &Point3, radius: f64) -> bool {
        let (x, y, z) = Self::key(self.cell, p);
        let r2 = radius * radius;
        (-1..=1).any(|dx| {
            (-1..=1).any(|dy| {
                (-1..=1).any(|dz| {
                    self.buckets
                        .get(&(x + dx, y + dy, z + dz))
                        .is_some_and(|b| b.iter().any(|q| q.distance_squared(p) <= r2))
                })
            })
        })
    }
}

/// Hold-out evaluation for each K in `ks`, sharing one split so results are
/// directly comparable across K.
pub fn holdout_sweep(
    scene: &Scene,
    holdout_fraction: f64,
    ks: &[usize],
    pairing: Pairing,
    rng_seed: u64,
) -> Result<Vec<MduReport>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("K values must be non-empty and at least 1"));
    }
    let max_k = *ks.iter().max().unwrap();
    let held = split_references(scene, holdout_fraction, max_k, rng_seed)?;
    ks.iter()
        .map(|&k| {
            let per_seed: Vec<Vec<Point3>> = held
                .iter()
                .map(|h| {
                    let cam = &scene.views[h.camera].camera;
                    h.depths
                        .iter()
                        .take(k)
                        .map(|&d| unproject(h.seed.u, h.seed.v, d, cam))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let all: Vec<Point3> = per_seed.iter().flatten().copied().collect();
            let grid = PointGrid::new(RECALL_RADIUS, all.iter().copied());
            let recalled = held.iter().filter(|h| grid.any_within(&h.truth, RECALL_RADIUS)).count();
            let total_error: f64 = held
                .iter()
                .zip(&per_seed)
                .map(|(h, own)| {
                    let pool: &[Point3] = match pairing {
                        Pairing::OwnSeed => own,
                        Pairing::GlobalNearest => &all,
                    };
                    pool.iter()
                        .map(|p| p.distance(&h.truth))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum();
            Ok(MduReport {
                k,
                mean_error: total_error / held.len() as f64,
                recall: recalled as f64 / held.len() as f64,
                nvpf: all.len(),
                held_out: held.len(),
            })
        })
        .collect()
}

pub fn holdout_eval(scene: &SyntheticScene, holdout_fraction: f64, k: usize) -> Result<MduReport> {
    holdout_sweep(&scene.scene, holdout_fraction, &[k], Pairing::OwnSeed, scene.rng_seed).map(|r| r[0])
}

pub fn reports_to_csv(reports: &[MduReport]) -> String {
    let mut s = String::from("k,mean_error,recall,nvpf,held_out\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{},{}", r.k, r.mean_error, r.recall, r.nvpf, r.held_out);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub m: usize,
    pub n: usize,
    pub median_seconds: f64,
    /// Median time relative to the previous row.
    pub ratio_to_previous: Option<f64>,
}

/// `count` distinct random keys in a cube sized for roughly constant density.
pub fn random_keys(count: usize, rng_seed: u64, label: u64) -> Vec<VoxelKey> {
    let side = ((count as f64 / 0.05).cbrt().ceil() as i32).max(1);
    let mut rng = stream(rng_seed, &[3, label, count as u64]);
    let mut set = BTreeSet::new();
    while set.len() < count {
        set.insert(VoxelKey::new(
            rng.gen_range(0..side),
            rng.gen_range(0..side),
            rng.gen_range(0..side),
        ));
    }
    set.into_iter().collect()
}

pub fn keys_to_tensor(keys: &[VoxelKey], modality: Modality) -> SparseVoxelTensor {
    let map = keys.iter().map(|k| (*k, VoxelEntry::new(vec![0.0], modality, 1))).collect();
    SparseVoxelTensor::from_map([1.0; 3], Point3::default(), 1, map).expect("valid tensor")
}

/// Times reference assignment on random voxel sets of each `(M, N)` size.
/// Runs on a single thread; reports the median of `repeats` runs.
pub fn bench_retrieval(sizes: &[(usize, usize)], l: usize, radius: f64, repeats: usize, rng_seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    if sizes.windows(2).any(|w| w[0].0 + w[0].1 > w[1].0 + w[1].1) {
        return Err(Error::invalid("benchmark sizes must be ascending"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut rows: Vec<BenchRow> = Vec::with_capacity(sizes.len());
    for &(m, n) in sizes {
        let camera = keys_to_tensor(&random_keys(m, rng_seed, 0), Modality::Camera);
        let lidar = keys_to_tensor(&random_keys(n, rng_seed, 1), Modality::Lidar);
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let a = pool.install(|| assign_references(&camera, &lidar, l, radius))?;
            times.push(start.elapsed().as_secs_f64());
            std::hint::black_box(a);
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        rows.push(BenchRow {
            m,
            n,
            median_seconds: median,
            ratio_to_previous: rows.last().map(|p| median / p.median_seconds),
        });
    }
    Ok(rows)
}

pub fn bench_to_csv(rows: &[BenchRow], l: usize, radius: f64, repeats: usize) -> String {
    let mut s = String::from("m,n,l,radius,repeats,median_seconds,ratio_to_previous\n");
    for r in rows {
        let ratio = r.ratio_to_previous.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{l},{radius},{repeats},{},{ratio}", r.m, r.n, r.median_seconds);
    }
    s
}
