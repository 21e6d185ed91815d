//! Brute-force reference implementations shared by the integration tests.
//!
//! Each oracle is written directly from the definition of the operation it
//! checks, favouring obviousness over speed.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxfuse_core::geometry::Point3;
use voxfuse_core::gma::GmaParams;
use voxfuse_core::linear::LinearParams;
use voxfuse_core::sparseconv::ConvKernel;
use voxfuse_core::voxelgrid::{Modality, SparseVoxelTensor, VoxelEntry, VoxelKey};

pub type FeatureMapOracle = BTreeMap<VoxelKey, Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

pub fn assert_close_vec(a: &[f64], b: &[f64], rel: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(close(*x, *y, rel), "{what}[{i}]: {x} vs {y}");
    }
}

pub fn assert_close_maps(actual: &SparseVoxelTensor, expected: &FeatureMapOracle, rel: f64) {
    assert_eq!(actual.len(), expected.len(), "key count");
    for ((k, e), (ek, ef)) in actual.iter().zip(expected) {
        assert_eq!(k, *ek, "key order");
        assert_close_vec(&e.feature, ef, rel, &format!("voxel {k}"));
    }
}

pub fn features(t: &SparseVoxelTensor) -> FeatureMapOracle {
    t.iter().map(|(k, e)| (k, e.feature.clone())).collect()
}

pub fn tensor_of(channels: usize, entries: impl IntoIterator<Item = (VoxelKey, Vec<f64>, Modality)>) -> SparseVoxelTensor {
    let map = entries
        .into_iter()
        .map(|(k, f, m)| (k, VoxelEntry::new(f, m, 1)))
        .collect();
    SparseVoxelTensor::from_map([1.0; 3], Point3::default(), channels, map).unwrap()
}

pub fn random_feature<R: Rng>(rng: &mut R, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random sparse tensor with keys drawn from `[0, side)^3`.
pub fn random_tensor<R: Rng>(rng: &mut R, count: usize, side: i32, channels: usize, modality: Modality) -> SparseVoxelTensor {
    let mut map = BTreeMap::new();
    while map.len() < count {
        let k = VoxelKey::new(rng.gen_range(0..side), rng.gen_range(0..side), rng.gen_range(0..side));
        map.insert(k, VoxelEntry::new(random_feature(rng, channels), modality, rng.gen_range(1..4)));
    }
    SparseVoxelTensor::from_map([1.0; 3], Point3::default(), channels, map).unwrap()
}

pub fn random_linear<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> LinearParams {
    let w = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = (0..rows).map(|_| rng.gen_range(-0.5..0.5)).collect();
    LinearParams::new(rows, cols, w, b).unwrap()
}

pub fn random_kernel<R: Rng>(rng: &mut R, extent: usize, cin: usize, cout: usize, with_bias: bool) -> ConvKernel {
    let w = (0..extent.pow(3) * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = (0..cout)
        .map(|_| if with_bias { rng.gen_range(-0.5..0.5) } else { 0.0 })
        .collect();
    ConvKernel::new(extent, cin, cout, w, b).unwrap()
}

/// `y = W x + b` with explicit loops.
pub fn linear_oracle(p: &LinearParams, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (p.rows(), p.cols());
    assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| {
            let mut acc = p.bias()[r];
            for c in 0..cols {
                acc += p.weight()[r * cols + c] * x[c];
            }
            acc
        })
        .collect()
}

/// Index of offset `(dx, dy, dz)` in kernel storage: dx slowest, dz fastest.
pub fn offset_index(extent: usize, d: [i32; 3]) -> usize {
    let r = (extent / 2) as i32;
    let e = extent as i32;
    (((d[0] + r) * e + (d[1] + r)) * e + (d[2] + r)) as usize
}

/// Dense convolution evaluated at active sites. The input is scattered into
/// a zero-filled dense box (padded by the kernel radius), every window is
/// read from the box, and results are kept only where the input was active.
pub fn dense_conv_oracle(input: &FeatureMapOracle, k: &ConvKernel) -> FeatureMapOracle {
    if input.is_empty() {
        return BTreeMap::new();
    }
    let cin = k.in_channels();
    let cout = k.out_channels();
    let r = (k.extent() / 2) as i32;
    let lo = [
        input.keys().map(|k| k.ix).min().unwrap() - r,
        input.keys().map(|k| k.iy).min().unwrap() - r,
        input.keys().map(|k| k.iz).min().unwrap() - r,
    ];
    let hi = [
        input.keys().map(|k| k.ix).max().unwrap() + r,
        input.keys().map(|k| k.iy).max().unwrap() + r,
        input.keys().map(|k| k.iz).max().unwrap() + r,
    ];
    let dims = [(hi[0] - lo[0] + 1) as usize, (hi[1] - lo[1] + 1) as usize, (hi[2] - lo[2] + 1) as usize];
    let cell = |x: i32, y: i32, z: i32| -> usize {
        (((x - lo[0]) as usize * dims[1] + (y - lo[1]) as usize) * dims[2] + (z - lo[2]) as usize) * cin
    };
    let mut dense = vec![0.0; dims[0] * dims[1] * dims[2] * cin];
    for (key, f) in input {
        let at = cell(key.ix, key.iy, key.iz);
        dense[at..at + cin].copy_from_slice(f);
    }
    input
        .keys()
        .map(|key| {
            let mut out = k.bias().to_vec();
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        let o = offset_index(k.extent(), [dx, dy, dz]);
                        let at = cell(key.ix + dx, key.iy + dy, key.iz + dz);
                        for (oc, acc) in out.iter_mut().enumerate().take(cout) {
                            for ic in 0..cin {
                                *acc += k.weight(o, oc, ic) * dense[at + ic];
                            }
                        }
                    }
                }
            }
            (*key, out)
        })
        .collect()
}

fn dist2(a: VoxelKey, b: VoxelKey) -> i64 {
    let d = [
        i64::from(a.ix) - i64::from(b.ix),
        i64::from(a.iy) - i64::from(b.iy),
        i64::from(a.iz) - i64::from(b.iz),
    ];
    d.iter().map(|x| x * x).sum()
}

/// Farthest point sampling recomputing every min-distance from scratch at
/// every step.
pub fn fps_oracle(keys: &[VoxelKey], l: usize, start: usize) -> Vec<usize> {
    let mut selected = vec![start];
    while selected.len() < l.min(keys.len()) {
        let mut best: Option<(i64, usize)> = None;
        for i in 0..keys.len() {
            if selected.contains(&i) {
                continue;
            }
            let d = selected.iter().map(|&s| dist2(keys[i], keys[s])).min().unwrap();
            if best.is_none() || d > best.unwrap().0 {
                best = Some((d, i));
            }
        }
        selected.push(best.unwrap().1);
    }
    selected
}

/// Exact nearest by sorting all candidates by (distance, key).
pub fn nearest_oracle(target: VoxelKey, keys: &[VoxelKey]) -> Option<VoxelKey> {
    let mut all: Vec<(i64, VoxelKey)> = keys.iter().map(|k| (dist2(*k, target), *k)).collect();
    all.sort();
    all.first().map(|x| x.1)
}

/// Reference assignment straight from its three-step definition.
pub fn assign_oracle(camera_keys: &[VoxelKey], lidar_keys: &[VoxelKey], l: usize, radius: f64) -> Vec<Option<VoxelKey>> {
    if camera_keys.is_empty() || lidar_keys.is_empty() {
        return vec![None; camera_keys.len()];
    }
    let mut sorted = camera_keys.to_vec();
    sorted.sort();
    let samples: Vec<VoxelKey> = fps_oracle(&sorted, l, 0).into_iter().map(|i| sorted[i]).collect();
    let refs: Vec<VoxelKey> = samples.iter().map(|s| nearest_oracle(*s, lidar_keys).unwrap()).collect();
    camera_keys
        .iter()
        .map(|c| {
            let mut covering: Vec<(f64, usize)> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| ((dist2(*c, *s) as f64).sqrt(), i))
                .filter(|(d, _)| *d <= radius)
                .collect();
            covering.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            covering.first().map(|&(_, i)| refs[i])
        })
        .collect()
}

/// `max(0, W l + b) * c` per component.
pub fn gate_oracle(c: &[f64], l: Option<&[f64]>, p: &LinearParams) -> Vec<f64> {
    match l {
        None => c.to_vec(),
        Some(l) => {
            let g = linear_oracle(p, l);
            c.iter().zip(g).map(|(x, g)| if g > 0.0 { g * x } else { 0.0 }).collect()
        }
    }
}

fn sum_maps(maps: &[FeatureMapOracle]) -> FeatureMapOracle {
    let mut out: FeatureMapOracle = BTreeMap::new();
    for m in maps {
        for (k, f) in m {
            match out.get_mut(k) {
                Some(acc) => acc.iter_mut().zip(f).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(*k, f.clone());
                }
            }
        }
    }
    out
}

/// Gated modality-aware convolution composed from its documented stages,
/// each evaluated with the oracles above.
pub fn gma_oracle(merged: &SparseVoxelTensor, lidar: &SparseVoxelTensor, p: &GmaParams) -> FeatureMapOracle {
    let lidar_only: FeatureMapOracle = merged
        .iter()
        .filter(|(_, e)| e.modality == Modality::Lidar)
        .map(|(k, e)| (k, e.feature.clone()))
        .collect();
    let camera_only: Vec<(VoxelKey, Vec<f64>)> = merged
        .iter()
        .filter(|(_, e)| e.modality == Modality::Camera)
        .map(|(k, e)| (k, e.feature.clone()))
        .collect();
    let cam_keys: Vec<VoxelKey> = camera_only.iter().map(|x| x.0).collect();
    let refs = assign_oracle(&cam_keys, lidar.keys(), p.samples, p.radius);
    let gated: FeatureMapOracle = camera_only
        .iter()
        .zip(&refs)
        .map(|((k, f), r)| {
            let reference = r.map(|rk| lidar.get(&rk).unwrap().feature.clone());
            (*k, gate_oracle(f, reference.as_deref(), &p.gate))
        })
        .collect();
    let both: FeatureMapOracle = merged
        .iter()
        .filter(|(_, e)| e.modality == Modality::Both)
        .map(|(k, e)| {
            let cam = e.camera_part.as_ref().unwrap();
            let g = gate_oracle(cam, Some(&e.feature), &p.gate);
            let mut pair = e.feature.clone();
            pair.extend(g);
            (k, linear_oracle(&p.pair_projection, &pair))
        })
        .collect();
    let joint = sum_maps(&[
        dense_conv_oracle(&lidar_only, &p.joint_lidar),
        dense_conv_oracle(&gated, &p.joint_camera),
        dense_conv_oracle(&both, &p.joint_both),
    ]);
    dense_conv_oracle(&joint, &p.fuse)
}

/// Count-weighted grouping of keys under `div_euclid(factor)`.
pub fn grouping_oracle(t: &SparseVoxelTensor, factor: i32) -> BTreeMap<VoxelKey, (Vec<f64>, u32)> {
    let mut groups: BTreeMap<VoxelKey, Vec<(Vec<f64>, u32)>> = BTreeMap::new();
    for (k, e) in t.iter() {
        let parent = VoxelKey::new(k.ix.div_euclid(factor), k.iy.div_euclid(factor), k.iz.div_euclid(factor));
        groups.entry(parent).or_default().push((e.feature.clone(), e.count));
    }
    groups
        .into_iter()
        .map(|(k, members)| {
            let n: u32 = members.iter().map(|m| m.1).sum();
            let mut mean = vec![0.0; t.channels()];
            for (f, c) in &members {
                for (m, x) in mean.iter_mut().zip(f) {
                    *m += x * f64::from(*c);
                }
            }
            mean.iter_mut().for_each(|m| *m /= f64::from(n));
            (k, (mean, n))
        })
        .collect()
}

/// Random LiDAR tensor, camera tensor, and their merge on a shared grid.
pub fn random_modalities<R: Rng>(
    rng: &mut R,
    camera: usize,
    lidar: usize,
    side: i32,
    channels: usize,
) -> (SparseVoxelTensor, SparseVoxelTensor, SparseVoxelTensor) {
    let l = random_tensor(rng, lidar, side, channels, Modality::Lidar);
    let c = random_tensor(rng, camera, side, channels, Modality::Camera);
    let merged = voxfuse_core::voxelgrid::merge_modalities(&l, &c).unwrap();
    (l, c, merged)
}

pub fn random_gma_params<R: Rng>(rng: &mut R, channels: usize, samples: usize, radius: f64, with_bias: bool) -> GmaParams {
    GmaParams {
        gate: random_linear(rng, channels, channels),
        pair_projection: random_linear(rng, channels, 2 * channels),
        joint_lidar: random_kernel(rng, 3, channels, channels, with_bias),
        joint_camera: random_kernel(rng, 3, channels, channels, with_bias),
        joint_both: random_kernel(rng, 3, channels, channels, with_bias),
        fuse: random_kernel(rng, 3, channels, channels, with_bias),
        samples,
        radius,
    }
}
