//! End-to-end acceptance checks. Each criterion prints one `PASS` or `FAIL`
//! line with its measured figures; the process exits nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use voxfuse_core::config::{GenerateConfig, RunConfig};
use voxfuse_core::fusion::{cascade, scale_voxel_size, BASE_VOXEL_SIZE};
use voxfuse_core::geometry::{project, unproject, Camera, Point3};
use voxfuse_core::gma::{assign_references, gate_camera, gma_conv};
use voxfuse_core::harness::{bench_retrieval, generate_scene, holdout_eval, MduReport, SceneKind, SceneSpec};
use voxfuse_core::linear::LinearParams;
use voxfuse_core::mdu::{
    build_depth_aware_features, count_nvpf, depth_gate, modulate_and_unproject, sigmoid, DepthAwareFeatureMap,
    FeatureMap, Seed,
};
use voxfuse_core::pipeline::{load_scene, run_pipeline, Fixtures};
use voxfuse_core::sparseconv::submanifold_conv;
use voxfuse_core::voxelgrid::{downsample, voxelize, GridBounds, Modality, SparseVoxelTensor, VoxelKey};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)*));
        }
    };
}

fn fail<E: Display>(e: E) -> String {
    e.to_string()
}

/// Relative closeness with a unit floor, as used throughout the suites.
fn close(a: f64, b: f64, rel: f64) -> bool {
    common::close(a, b, rel)
}

const KS: [usize; 4] = [1, 3, 6, 10];
const SCENES: u64 = 5;

fn fig5_trend() -> Outcome {
    let start = Instant::now();
    let mut min_gain = f64::INFINITY;
    let mut worst_ratio: f64 = 0.0;
    let mut scenes = 0;
    for seed in 0..SCENES {
        for (kind, spread) in [(SceneKind::Planar { layers: 3 }, 2.0), (SceneKind::Ellipsoid, 1.0)] {
            let scene = generate_scene(&SceneSpec::new(10, 200, spread, seed).with_kind(kind)).map_err(fail)?;
            let reports: Vec<MduReport> = KS
                .iter()
                .map(|&k| holdout_eval(&scene, 0.5, k))
                .collect::<Result<_, _>>()
                .map_err(fail)?;
            for w in reports.windows(2) {
                ensure!(
                    w[1].recall >= w[0].recall,
                    "seed {seed} {kind:?}: recall {} at K={} drops to {} at K={}",
                    w[0].recall,
                    w[0].k,
                    w[1].recall,
                    w[1].k
                );
            }
            let (r1, r6) = (reports[0], reports[2]);
            let ratio = r6.mean_error / r1.mean_error;
            ensure!(ratio <= 2.0, "seed {seed} {kind:?}: mean error ratio {ratio}");
            worst_ratio = worst_ratio.max(ratio);
            if matches!(kind, SceneKind::Planar { .. }) {
                let gain = r6.recall - r1.recall;
                ensure!(gain >= 0.10, "seed {seed}: planar recall gain {gain} < 0.10");
                min_gain = min_gain.min(gain);
            }
            scenes += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!(
        "{scenes} scenes, min planar recall gain K1->K6 {min_gain:.3}, worst error ratio K6/K1 {worst_ratio:.3}"
    ))
}

fn nvpf_accounting() -> Outcome {
    let mut rows = 0;
    for seed in 0..3 {
        let scene = generate_scene(&SceneSpec::new(10, 200, 1.0, seed)).map_err(fail)?;
        for &k in &KS {
            let r = holdout_eval(&scene, 0.5, k).map_err(fail)?;
            ensure!(r.nvpf == r.held_out * k, "hold-out K={k}: nvpf {} != {} x {k}", r.nvpf, r.held_out);
            rows += 1;
        }
    }
    let mut cfg = RunConfig::default();
    cfg.scene.generate = Some(GenerateConfig {
        instances: 4,
        ..GenerateConfig::default()
    });
    cfg.mdu.seeds_per_instance = 50;
    let (scene, _) = load_scene(&cfg).map_err(fail)?;
    let fixtures = Fixtures::generate(cfg.num_scales, cfg.channels, cfg.rng_seed);
    let mut at_six = 0;
    for &k in &KS {
        cfg.mdu.k = k;
        let out = run_pipeline(&scene, &fixtures, &cfg).map_err(fail)?;
        let m = &out.metrics;
        let expected = 4 * 50 * k;
        ensure!(m.nvpf == expected, "pipeline K={k}: nvpf {} != {expected}", m.nvpf);
        ensure!(m.nvpf_expected == count_nvpf(4, 50, k as u64), "pipeline K={k}: expected count mismatch");
        for s in &m.scales {
            ensure!(s.nvpf == expected, "pipeline K={k} scale {}: nvpf {}", s.scale_id, s.nvpf);
        }
        if k == 6 {
            at_six = m.nvpf;
        }
        rows += 1;
    }
    ensure!(at_six == 1200, "4 instances, N=50, K=6 gave {at_six}");
    Ok(format!("{rows} sweep rows exact, 4x50x6 -> {at_six}"))
}

fn gma_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(300);
    let mut compared = 0;
    for scene in 0..20 {
        let m = rng.gen_range(50..=500);
        let n = rng.gen_range(50..=400);
        let channels = rng.gen_range(1..=4);
        let (lidar, camera, merged) = common::random_modalities(&mut rng, m, n, 10, channels);
        let radius = rng.gen_range(0.0..5.0);
        let assigned = assign_references(&camera, &lidar, camera.len(), radius).map_err(fail)?;
        for a in &assigned {
            let expected = common::nearest_oracle(a.camera_key, lidar.keys());
            ensure!(
                a.lidar_key == expected,
                "scene {scene}: voxel {} assigned {:?}, nearest is {:?}",
                a.camera_key,
                a.lidar_key,
                expected
            );
        }
        let samples = rng.gen_range(8..=64);
        let ball = rng.gen_range(1.0..5.0);
        let params = common::random_gma_params(&mut rng, channels, samples, ball, true);
        let got = gma_conv(&merged, &lidar, &params).map_err(fail)?;
        let want = common::gma_oracle(&merged, &lidar, &params);
        ensure!(got.len() == want.len(), "scene {scene}: {} voxels vs oracle {}", got.len(), want.len());
        for ((k, e), (wk, wf)) in got.iter().zip(&want) {
            ensure!(k == *wk, "scene {scene}: key {k} vs oracle {wk}");
            for (x, y) in e.feature.iter().zip(wf) {
                ensure!(close(*x, *y, 1e-6), "scene {scene} voxel {k}: {x} vs oracle {y}");
            }
        }
        compared += got.len();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("20 scenes, exact nearest assignment, {compared} fused voxels within 1e-6"))
}

fn linear_complexity() -> Outcome {
    let start = Instant::now();
    let rows = bench_retrieval(&[(50_000, 50_000), (100_000, 100_000)], 256, 4.0, 5, 0).map_err(fail)?;
    let ratio = rows[1].ratio_to_previous.ok_or("missing ratio")?;
    ensure!(ratio <= 2.5, "median time ratio {ratio:.3} > 2.5");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "median {:.4}s at 1e5, {:.4}s at 2e5, ratio {ratio:.3}",
        rows[0].median_seconds, rows[1].median_seconds
    ))
}

fn random_map<R: Rng>(rng: &mut R, width: usize, height: usize, channels: usize) -> FeatureMap {
    let data = (0..width * height * channels).map(|_| rng.gen_range(-2.0..2.0)).collect();
    FeatureMap::new(width, height, channels, data).unwrap()
}

fn gate_suites() -> Outcome {
    let mut rng = common::rng(500);
    let (w, h, c) = (6, 5, 3);
    let cdmap = DepthAwareFeatureMap(random_map(&mut rng, w, h, c));
    let seeds: Vec<Seed> = (0..10)
        .map(|i| Seed {
            u: rng.gen_range(0.0..w as f64),
            v: rng.gen_range(0.0..h as f64),
            instance_id: i,
        })
        .collect();
    let depths: Vec<Vec<(f64, usize)>> = seeds
        .iter()
        .map(|_| (0..3).map(|j| (rng.gen_range(1.0..40.0), j)).collect())
        .collect();
    let cam = Camera::with_identity_pose(4.0, 4.0, 3.0, 2.5, w as u32, h as u32).map_err(fail)?;

    let zero = LinearParams::zeros(1, c + 1).map_err(fail)?;
    ensure!(sigmoid(0.0) == 0.5, "sigmoid(0) = {}", sigmoid(0.0));
    for vp in modulate_and_unproject(&seeds, &depths, &cdmap, &zero, &cam).map_err(fail)? {
        let s = &seeds[vp.seed_index];
        let base = cdmap.0.at(s.u, s.v).unwrap();
        let half: Vec<f64> = base.iter().map(|x| 0.5 * x).collect();
        ensure!(vp.feature == half, "zero depth gate: {:?} != 0.5 x {:?}", vp.feature, base);
    }

    let mut saturated = zero.clone();
    saturated.bias_mut()[0] = 20.0;
    for vp in modulate_and_unproject(&seeds, &depths, &cdmap, &saturated, &cam).map_err(fail)? {
        let s = &seeds[vp.seed_index];
        let base = cdmap.0.at(s.u, s.v).unwrap();
        for (x, y) in vp.feature.iter().zip(base) {
            ensure!((x - y).abs() <= 1e-8 * y.abs().max(1.0), "saturated depth gate: {x} vs {y}");
        }
    }
    let s = depth_gate(&[1.0, -1.0, 0.5], 10.0, &saturated).map_err(fail)?;
    ensure!((1.0 - s).abs() <= 1e-8, "bias +20 gives s = {s}");

    let mut identity = LinearParams::zeros(c, c + 1).map_err(fail)?;
    for i in 0..c {
        identity.weight_mut()[i * (c + 1) + i] = 1.0;
    }
    let cmap = random_map(&mut rng, w, h, c);
    let refs = project(&[Point3::from([0.1, 0.2, 5.0])], &cam);
    let passthrough = build_depth_aware_features(&cmap, &refs, &identity).map_err(fail)?;
    ensure!(passthrough.0 == cmap, "[I | 0] depth-aware map changed the features");

    let camera = [0.5, -2.0, 3.0];
    let reference = [1.0, 7.0, -4.0];
    let open = LinearParams::new(3, 3, vec![0.0; 9], vec![1.0; 3]).map_err(fail)?;
    ensure!(
        gate_camera(&camera, Some(&reference), &open).map_err(fail)? == camera.to_vec(),
        "identity camera gate altered the feature"
    );
    let shut = LinearParams::new(3, 3, vec![0.0; 9], vec![-1.0; 3]).map_err(fail)?;
    ensure!(
        gate_camera(&camera, Some(&reference), &shut).map_err(fail)? == vec![0.0; 3],
        "zero camera gate let features through"
    );

    for case in 0..1000 {
        let channels = rng.gen_range(1..=6);
        let feature = common::random_feature(&mut rng, channels);
        let depth = rng.gen_range(0.5..60.0);
        let params = common::random_linear(&mut rng, 1, channels + 1);
        let mut logit = params.bias()[0];
        for (i, x) in feature.iter().chain(std::iter::once(&depth)).enumerate() {
            logit += params.weight()[i] * x;
        }
        let expected = 1.0 / (1.0 + (-logit).exp());
        let s = depth_gate(&feature, depth, &params).map_err(fail)?;
        ensure!(close(s, expected, 1e-6), "depth gate case {case}: {s} vs {expected}");
        if logit.abs() < 30.0 {
            ensure!(s > 0.0 && s < 1.0, "depth gate case {case}: s = {s} outside (0, 1)");
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scaled: Vec<f64> = feature.iter().map(|x| x * s).collect();
            ensure!(norm(&scaled) < norm(&feature), "depth gate case {case}: norm did not shrink");
        }

        let cout = rng.gen_range(1..=6);
        let cin = rng.gen_range(1..=6);
        let camera = common::random_feature(&mut rng, cout);
        let lidar = common::random_feature(&mut rng, cin);
        let gate = common::random_linear(&mut rng, cout, cin);
        let got = gate_camera(&camera, Some(&lidar), &gate).map_err(fail)?;
        let want = common::gate_oracle(&camera, Some(&lidar), &gate);
        for (x, y) in got.iter().zip(&want) {
            ensure!(close(*x, *y, 1e-6), "camera gate case {case}: {x} vs {y}");
        }
        for (x, y) in got.iter().zip(&camera) {
            ensure!(x * y >= 0.0, "camera gate case {case}: sign flipped");
        }
    }
    Ok("fixed cases exact, 1000 depth-gate and 1000 camera-gate oracle cases within 1e-6".into())
}

fn rotation(yaw: f64, pitch: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    [[cy, -sy * cp, sy * sp], [sy, cy * cp, -cy * sp], [0.0, sp, cp]]
}

fn random_points<R: Rng>(rng: &mut R, count: usize, half_extent: f64) -> Vec<(Point3, Vec<f64>)> {
    (0..count)
        .map(|_| {
            let p = Point3::from([
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-6.0..4.0),
            ]);
            (p, vec![f64::from(rng.gen_range(-20i32..20)), 1.0])
        })
        .collect()
}

fn voxelize_at(points: &[(Point3, Vec<f64>)], scale: usize) -> Result<(SparseVoxelTensor, usize), String> {
    let v = voxelize(
        points.iter().map(|(p, f)| (*p, f.as_slice())),
        2,
        scale_voxel_size(BASE_VOXEL_SIZE, scale),
        Point3::default(),
        &GridBounds::default(),
        Modality::Lidar,
    )
    .map_err(fail)?;
    Ok((v.tensor, v.dropped))
}

fn total_count(t: &SparseVoxelTensor) -> u64 {
    t.entries().iter().map(|e| u64::from(e.count)).sum()
}

fn geometric_invariants() -> Outcome {
    let mut rng = common::rng(600);

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let cam = Camera::new(
            rng.gen_range(300.0..900.0),
            rng.gen_range(300.0..900.0),
            400.0,
            224.0,
            rotation(rng.gen_range(-3.1..3.1), rng.gen_range(-1.5..1.5)),
            [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-2.0..2.0)],
            800,
            448,
        )
        .map_err(fail)?;
        let p = unproject(rng.gen_range(0.0..800.0), rng.gen_range(0.0..448.0), rng.gen_range(0.5..60.0), &cam)
            .map_err(fail)?;
        let r = project(&[p], &cam);
        ensure!(r.len() == 1, "in-frustum point failed to project");
        let back = unproject(r[0].u, r[0].v, r[0].d, &cam).map_err(fail)?;
        worst = worst.max(back.distance(&p));
    }
    ensure!(worst < 1e-9, "worst round-trip error {worst}");

    let points = random_points(&mut rng, 20_000, 70.0);
    let (fine, dropped) = voxelize_at(&points, 0)?;
    ensure!(
        total_count(&fine) + dropped as u64 == points.len() as u64,
        "voxelization: {} kept + {dropped} dropped != {}",
        total_count(&fine),
        points.len()
    );
    let mut coarse = fine.clone();
    for step in 1..=3 {
        coarse = downsample(&coarse);
        ensure!(total_count(&coarse) == total_count(&fine), "downsample step {step} changed the point count");
    }

    let mut cube = Vec::new();
    for x in 0..8 {
        for y in 0..8 {
            for z in 0..8 {
                cube.push((VoxelKey::new(x, y, z), common::random_feature(&mut rng, 3), Modality::Lidar));
            }
        }
    }
    let cube = common::tensor_of(3, cube);
    for extent in [3, 5] {
        let kernel = common::random_kernel(&mut rng, extent, 3, 4, true);
        let got = submanifold_conv(&cube, &kernel).map_err(fail)?;
        let want = common::dense_conv_oracle(&common::features(&cube), &kernel);
        ensure!(got.len() == 512 && want.len() == 512, "8^3 conv active set changed");
        for ((k, e), (_, wf)) in got.iter().zip(&want) {
            for (x, y) in e.feature.iter().zip(wf) {
                ensure!(close(*x, *y, 1e-6), "8^3 conv extent {extent} voxel {k}: {x} vs {y}");
            }
        }
    }

    let scales: Vec<SparseVoxelTensor> = (0..4)
        .map(|s| voxelize_at(&random_points(&mut rng, 3000 >> s, 50.0), s).map(|v| v.0))
        .collect::<Result<_, _>>()?;
    let out = cascade(&scales).map_err(fail)?;
    let mut expected: BTreeSet<VoxelKey> = BTreeSet::new();
    for (i, f) in scales.iter().enumerate() {
        let mut t = f.clone();
        for _ in i..3 {
            t = downsample(&t);
        }
        expected.extend(t.keys().iter().copied());
    }
    ensure!(
        out[3].keys().iter().copied().eq(expected.iter().copied()),
        "cascade keys at the coarsest scale differ from the telescoped union"
    );
    let empties: Vec<SparseVoxelTensor> = std::iter::once(Ok(scales[0].clone()))
        .chain((1..4).map(|s| SparseVoxelTensor::empty(scale_voxel_size(BASE_VOXEL_SIZE, s), Point3::default(), 2)))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    let only_fine = cascade(&empties).map_err(fail)?;
    let thrice = downsample(&downsample(&downsample(&scales[0])));
    ensure!(only_fine[3].keys() == thrice.keys(), "cascade of one scale differs from downsampling three times");
    for (a, b) in only_fine[3].entries().iter().zip(thrice.entries()) {
        for (x, y) in a.feature.iter().zip(&b.feature) {
            ensure!(close(*x, *y, 1e-6), "telescoped feature {x} vs {y}");
        }
    }

    Ok(format!(
        "round-trip worst {worst:.2e}, {} points conserved, 8^3 conv within 1e-6, cascade keys exact",
        points.len()
    ))
}

fn dir_snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(fail)? {
        let path = entry.map_err(fail)?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.push((name, std::fs::read(&path).map_err(fail)?));
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        "rng_seed = 17\n[gma]\nl = 256\n[scene.generate]\ninstances = 6\nkind = \"planar\"\n",
    )
    .map_err(fail)?;
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_voxfuse"))
            .arg("run")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(fail)?;
        ensure!(
            status.status.success(),
            "run {run} failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
        snapshots.push(dir_snapshot(&out)?);
    }
    ensure!(snapshots[0].len() >= 4, "only {} output files", snapshots[0].len());
    let names: Vec<&str> = snapshots[0].iter().map(|f| f.0.as_str()).collect();
    ensure!(names.contains(&"metrics.json"), "metrics.json missing");
    for (a, b) in snapshots[0].iter().zip(&snapshots[1]) {
        ensure!(a.0 == b.0, "file sets differ: {} vs {}", a.0, b.0);
        ensure!(a.1 == b.1, "{} differs between runs", a.0);
    }
    ensure!(snapshots[0].len() == snapshots[1].len(), "file counts differ");
    let bytes: usize = snapshots[0].iter().map(|f| f.1.len()).sum();
    Ok(format!("{} files, {bytes} bytes identical across two runs", names.len()))
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| (*s).to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("recall and error trend over K", fig5_trend),
        ("virtual point count accounting", nvpf_accounting),
        ("GMA oracle equivalence", gma_oracle_equivalence),
        ("linear retrieval complexity", linear_complexity),
        ("depth and camera gate suites", gate_suites),
        ("numerical and geometric invariants", geometric_invariants),
        ("byte-identical runs", determinism),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| Err(panic_message(p)));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.2}s)", i + 1),
            Err(reason) => {
                failures += 1;
                println!("FAIL [{}] {name}: {reason} ({secs:.2}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
