//! End-to-end fusion run: fixtures, per-scale execution, cascade, BEV, and
//! on-disk outputs.
//!
//! Output directory layout:
//! - `scale<i>_lidar.csv`, `scale<i>_fused.csv`: per-scale LiDAR and cascaded
//!   multi-modal tensors
//! - `scale<i>_assignments.csv`: reference assignments of camera voxels
//! - `bev_lidar.bin`, `bev_fused.bin`: BEV maps of the coarsest scale
//! - `metrics.json`: voxel and virtual point counts
//!
//! Every file in the directory is a pure function of the configuration.
//! Wall-clock stage timings are written separately by
//! [`PipelineOutput::write_timings`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{
    cascade, flatten_to_bev, lidar_pyramid, run_scale, scale_voxel_size, BevMap, CameraInputs, MduSettings, ScaleConfig,
};
use crate::gma::{assignments_to_csv, GmaParams, ReferenceAssignment};
use crate::harness::generate_scene;
use crate::linear::LinearParams;
use crate::mdu::count_nvpf;
use crate::rng::stream;
use crate::scene::{require_file, write_json, Scene};
use crate::sparseconv::ConvKernel;
use crate::voxelgrid::SparseVoxelTensor;

/// Parameters of one scale, standing in for trained weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleFixtures {
    pub depth_aware: LinearParams,
    pub depth_gate: LinearParams,
    pub lidar_kernel: ConvKernel,
    pub gate: LinearParams,
    pub pair_projection: LinearParams,
    pub joint_lidar: ConvKernel,
    pub joint_camera: ConvKernel,
    pub joint_both: ConvKernel,
    pub fuse: ConvKernel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixtures {
    pub scales: Vec<ScaleFixtures>,
}

fn random_linear<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64, bias: f64) -> LinearParams {
    let w = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    LinearParams::new(rows, cols, w, vec![bias; rows]).expect("consistent shape")
}

/// Identity at the center plus small random weights everywhere; zero bias.
fn random_kernel<R: Rng>(rng: &mut R, channels: usize, scale: f64) -> ConvKernel {
    let mut k = ConvKernel::identity(3, channels).expect("valid kernel");
    for o in 0..27 {
        for r in 0..channels {
            for c in 0..channels {
                *k.weight_mut(o, r, c) += rng.gen_range(-scale..scale);
            }
        }
    }
    k
}

const FIXTURE_FILES: [&str; 9] = [
    "params_depth_aware",
    "params_depth_gate",
    "kernel_lidar",
    "params_gma_gate",
    "params_pair_projection",
    "kernel_joint_lidar",
    "kernel_joint_camera",
    "kernel_joint_both",
    "kernel_fuse",
];

fn read_fixture<T: for<'de> serde::Deserialize<'de>>(dir: &Path, stem: &str, scale: usize) -> Result<T> {
    let path = require_file(dir, &format!("{stem}_s{scale}.json"))?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "fixture",
        path: path.clone(),
        message: e.to_string(),
    })
}

impl Fixtures {
    /// Deterministic fixture set derived from `rng_seed`.
    pub fn generate(num_scales: usize, channels: usize, rng_seed: u64) -> Self {
        let c = channels;
        let scales = (0..num_scales)
            .map(|s| {
                let mut rng = stream(rng_seed, &[4, s as u64]);
                let mut depth_aware = random_linear(&mut rng, c, c + 1, 0.1, 0.0);
                for i in 0..c {
                    depth_aware.weight_mut()[i * (c + 1) + i] += 1.0;
                }
                let mut pair_projection = random_linear(&mut rng, c, 2 * c, 0.05, 0.0);
                for i in 0..c {
                    pair_projection.weight_mut()[i * 2 * c + i] += 0.5;
                    pair_projection.weight_mut()[i * 2 * c + c + i] += 0.5;
                }
                ScaleFixtures {
                    depth_aware,
                    depth_gate: random_linear(&mut rng, 1, c + 1, 0.2, 0.0),
                    lidar_kernel: random_kernel(&mut rng, c, 0.05),
                    gate: random_linear(&mut rng, c, c, 0.3, 0.5),
                    pair_projection,
                    joint_lidar: random_kernel(&mut rng, c, 0.05),
                    joint_camera: random_kernel(&mut rng, c, 0.05),
                    joint_both: random_kernel(&mut rng, c, 0.05),
                    fuse: random_kernel(&mut rng, c, 0.05),
                }
            })
            .collect();
        Self { scales }
    }

    /// Reads `<name>_s<scale>.json` fixture files for every scale.
    pub fn read_dir(dir: &Path, num_scales: usize) -> Result<Self> {
        let scales = (0..num_scales)
            .map(|s| {
                Ok(ScaleFixtures {
                    depth_aware: read_fixture(dir, FIXTURE_FILES[0], s)?,
                    depth_gate: read_fixture(dir, FIXTURE_FILES[1], s)?,
                    lidar_kernel: read_fixture(dir, FIXTURE_FILES[2], s)?,
                    gate: read_fixture(dir, FIXTURE_FILES[3], s)?,
                    pair_projection: read_fixture(dir, FIXTURE_FILES[4], s)?,
                    joint_lidar: read_fixture(dir, FIXTURE_FILES[5], s)?,
                    joint_camera: read_fixture(dir, FIXTURE_FILES[6], s)?,
                    joint_both: read_fixture(dir, FIXTURE_FILES[7], s)?,
                    fuse: read_fixture(dir, FIXTURE_FILES[8], s)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { scales })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, f) in self.scales.iter().enumerate() {
            let path = |stem: &str| dir.join(format!("{stem}_s{s}.json"));
            write_json(&path(FIXTURE_FILES[0]), &f.depth_aware)?;
            write_json(&path(FIXTURE_FILES[1]), &f.depth_gate)?;
            write_json(&path(FIXTURE_FILES[2]), &f.lidar_kernel)?;
            write_json(&path(FIXTURE_FILES[3]), &f.gate)?;
            write_json(&path(FIXTURE_FILES[4]), &f.pair_projection)?;
            write_json(&path(FIXTURE_FILES[5]), &f.joint_lidar)?;
            write_json(&path(FIXTURE_FILES[6]), &f.joint_camera)?;
            write_json(&path(FIXTURE_FILES[7]), &f.joint_both)?;
            write_json(&path(FIXTURE_FILES[8]), &f.fuse)?;
        }
        Ok(())
    }

    pub fn scale_config(&self, cfg: &RunConfig, scale_id: usize) -> ScaleConfig {
        let f = &self.scales[scale_id];
        let (samples, radius) = cfg.gma.for_scale(scale_id);
        ScaleConfig {
            scale_id,
            voxel_size: scale_voxel_size(cfg.base_voxel_size, scale_id),
            channels: cfg.channels,
            depth_aware: f.depth_aware.clone(),
            depth_gate: f.depth_gate.clone(),
            gma: GmaParams {
                gate: f.gate.clone(),
                pair_projection: f.pair_projection.clone(),
                joint_lidar: f.joint_lidar.clone(),
                joint_camera: f.joint_camera.clone(),
                joint_both: f.joint_both.clone(),
                fuse: f.fuse.clone(),
                samples,
                radius,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleMetrics {
    pub scale_id: usize,
    pub voxel_size: [f64; 3],
    pub samples: usize,
    pub radius_voxels: f64,
    pub lidar_voxels: usize,
    pub camera_voxels: usize,
    pub camera_only_voxels: usize,
    pub both_voxels: usize,
    pub fused_voxels: usize,
    pub cascaded_voxels: usize,
    pub assigned_camera_voxels: usize,
    pub dropped_virtual_points: usize,
    pub nvpf: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BevMetrics {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub min_ix: i32,
    pub min_iy: i32,
    pub occupied_cells: usize,
}

impl BevMetrics {
    fn of(b: &BevMap, t: &SparseVoxelTensor) -> Self {
        let mut cols: Vec<(i32, i32)> = t.keys().iter().map(|k| (k.ix, k.iy)).collect();
        cols.sort_unstable();
        cols.dedup();
        Self {
            width: b.width,
            height: b.height,
            channels: b.channels,
            min_ix: b.min_ix,
            min_iy: b.min_iy,
            occupied_cells: cols.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// Measured virtual points per frame, before voxel deduplication.
    pub nvpf: usize,
    /// `instances * seeds_per_instance * k`.
    pub nvpf_expected: u64,
    pub instances: usize,
    pub seeds_per_instance: usize,
    pub k: usize,
    pub lidar_points: usize,
    pub scales: Vec<ScaleMetrics>,
    pub bev_lidar: BevMetrics,
    pub bev_fused: BevMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub lidar: Vec<SparseVoxelTensor>,
    /// Per-scale GMA-Conv outputs before the cascade.
    pub fused: Vec<SparseVoxelTensor>,
    /// Cascaded multi-modal tensors.
    pub cascaded: Vec<SparseVoxelTensor>,
    pub assignments: Vec<Vec<ReferenceAssignment>>,
    pub lidar_bev: BevMap,
    pub fused_bev: BevMap,
    pub metrics: Metrics,
    pub timings: Vec<StageTiming>,
}

struct Stopwatch(Vec<StageTiming>);

impl Stopwatch {
    fn time<T>(&mut self, stage: impl Into<String>, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.0.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// Runs the multi-scale fusion pipeline on a loaded scene.
pub fn run_pipeline(scene: &Scene, fixtures: &Fixtures, cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    if fixtures.scales.len() < cfg.num_scales {
        return Err(Error::invalid(format!(
            "{} scales configured but fixtures cover {}",
            cfg.num_scales,
            fixtures.scales.len()
        )));
    }
    let mut watch = Stopwatch(Vec::new());
    let kernels: Vec<ConvKernel> = fixtures.scales[..cfg.num_scales]
        .iter()
        .map(|f| f.lidar_kernel.clone())
        .collect();
    let lidar = watch.time("lidar_pyramid", || {
        lidar_pyramid(&scene.points, cfg.base_voxel_size, &cfg.grid, cfg.channels, &kernels)
    })?;
    let inputs = CameraInputs {
        scene,
        mdu: MduSettings {
            seeds_per_instance: cfg.mdu.seeds_per_instance,
            k: cfg.mdu.k,
            rng_seed: cfg.rng_seed,
        },
        bounds: cfg.grid,
    };

    let mut fused = Vec::with_capacity(cfg.num_scales);
    let mut assignments = Vec::with_capacity(cfg.num_scales);
    let mut scale_metrics = Vec::with_capacity(cfg.num_scales);
    let mut instances = 0;
    for (s, lidar_s) in lidar.iter().enumerate() {
        let scale = fixtures.scale_config(cfg, s);
        let out = watch.time(format!("scale{s}"), || run_scale(&scale, lidar_s, &inputs))?;
        let [_, camera_only, both] = out.merged.count_by_modality();
        scale_metrics.push(ScaleMetrics {
            scale_id: s,
            voxel_size: scale.voxel_size,
            samples: scale.gma.samples,
            radius_voxels: scale.gma.radius,
            lidar_voxels: lidar_s.len(),
            camera_voxels: out.camera.len(),
            camera_only_voxels: camera_only,
            both_voxels: both,
            fused_voxels: out.fused.len(),
            cascaded_voxels: 0,
            assigned_camera_voxels: out.assignments.iter().filter(|a| a.lidar_key.is_some()).count(),
            dropped_virtual_points: out.dropped_virtual_points,
            nvpf: out.nvpf,
        });
        instances = out.instances;
        fused.push(out.fused);
        assignments.push(out.assignments);
    }
    let cascaded = watch.time("cascade", || cascade(&fused))?;
    for (m, t) in scale_metrics.iter_mut().zip(&cascaded) {
        m.cascaded_voxels = t.len();
    }
    let last = cfg.num_scales - 1;
    let (lidar_bev, fused_bev) = watch.time("bev", || {
        Ok((flatten_to_bev(&lidar[last]), flatten_to_bev(&cascaded[last])))
    })?;
    let metrics = Metrics {
        nvpf: scale_metrics[0].nvpf,
        nvpf_expected: count_nvpf(instances as u64, cfg.mdu.seeds_per_instance as u64, cfg.mdu.k as u64),
        instances,
        seeds_per_instance: cfg.mdu.seeds_per_instance,
        k: cfg.mdu.k,
        lidar_points: scene.points.len(),
        scales: scale_metrics,
        bev_lidar: BevMetrics::of(&lidar_bev, &lidar[last]),
        bev_fused: BevMetrics::of(&fused_bev, &cascaded[last]),
    };
    Ok(PipelineOutput {
        lidar,
        fused,
        cascaded,
        assignments,
        lidar_bev,
        fused_bev,
        metrics,
        timings: watch.0,
    })
}

/// Scene named by the config: a directory, or a generated scene.
pub fn load_scene(cfg: &RunConfig) -> Result<(Scene, Option<PathBuf>)> {
    match (&cfg.scene.path, &cfg.scene.generate) {
        (Some(dir), _) => {
            let scene = Scene::read_dir(dir)?;
            for v in &scene.views {
                v.require_features(Some(dir))?;
            }
            Ok((scene, Some(dir.clone())))
        }
        (None, Some(g)) => Ok((generate_scene(&g.to_spec(cfg.channels, cfg.rng_seed))?.scene, None)),
        (None, None) => Err(Error::invalid("config names no scene: set scene.path or scene.generate")),
    }
}

pub fn load_fixtures(cfg: &RunConfig) -> Result<Fixtures> {
    match &cfg.fixtures_dir {
        Some(dir) => Fixtures::read_dir(dir, cfg.num_scales),
        None => Ok(Fixtures::generate(cfg.num_scales, cfg.channels, cfg.rng_seed)),
    }
}

/// Loads the scene and fixtures named by `cfg` and runs the pipeline.
pub fn run_from_config(cfg: &RunConfig) -> Result<PipelineOutput> {
    let (scene, _) = load_scene(cfg)?;
    let fixtures = load_fixtures(cfg)?;
    run_pipeline(&scene, &fixtures, cfg)
}

impl PipelineOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, bytes: &[u8]| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        for (s, ((l, f), a)) in self.lidar.iter().zip(&self.cascaded).zip(&self.assignments).enumerate() {
            put(format!("scale{s}_lidar.csv"), l.to_csv().as_bytes())?;
            put(format!("scale{s}_fused.csv"), f.to_csv().as_bytes())?;
            put(format!("scale{s}_assignments.csv"), assignments_to_csv(a).as_bytes())?;
        }
        put("bev_lidar.bin".into(), &self.lidar_bev.to_bytes())?;
        put("bev_fused.bin".into(), &self.fused_bev.to_bytes())?;
        write_json(&dir.join("metrics.json"), &self.metrics)
    }

    pub fn write_timings(&self, path: &Path) -> Result<()> {
        write_json(path, &self.timings)
    }
}
