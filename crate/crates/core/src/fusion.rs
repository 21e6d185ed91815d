//! Multi-scale orchestration: per-scale unprojection and gated fusion, cascade
//! connections from fine to coarse scales, and height compression to BEV.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{filter_by_masks, project, Point3, ReferencePoint};
use crate::gma::{gma_conv_detailed, GmaParams, ReferenceAssignment};
use crate::gridfile;
use crate::linear::LinearParams;
use crate::mdu::{build_depth_aware_features, knn_depths, modulate_and_unproject, sample_seeds, VirtualPoint};
use crate::rng::derive_seed;
use crate::scene::Scene;
use crate::sparseconv::{strided_conv, submanifold_conv, ConvKernel};
use crate::voxelgrid::{add, downsample, merge_modalities, voxelize, GridBounds, Modality, SparseVoxelTensor};

/// Finest-scale voxel size in meters.
pub const BASE_VOXEL_SIZE: [f64; 3] = [0.075, 0.075, 0.2];

/// Voxel size of scale `scale_id`: the base size doubled once per level.
pub fn scale_voxel_size(base: [f64; 3], scale_id: usize) -> [f64; 3] {
    let f = (1u64 << scale_id) as f64;
    [base[0] * f, base[1] * f, base[2] * f]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MduSettings {
    pub seeds_per_instance: usize,
    pub k: usize,
    pub rng_seed: u64,
}

/// Everything one scale needs: its resolution and fixture parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleConfig {
    pub scale_id: usize,
    pub voxel_size: [f64; 3],
    pub channels: usize,
    /// `channels x (channels + 1)`, fuses image features with sparse depth.
    pub depth_aware: LinearParams,
    /// `1 x (channels + 1)`, per-depth modulation gate.
    pub depth_gate: LinearParams,
    pub gma: GmaParams,
}

/// Scene-level inputs shared by every scale.
#[derive(Clone, Copy, Debug)]
pub struct CameraInputs<'a> {
    pub scene: &'a Scene,
    pub mdu: MduSettings,
    pub bounds: GridBounds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MduOutput {
    pub virtual_points: Vec<VirtualPoint>,
    /// (view, mask) pairs that produced virtual points.
    pub instances: usize,
}

/// References of a view landing in the masks, deduplicated and in source
/// order.
pub fn masked_references(refs: &[ReferencePoint], masks: &[crate::geometry::InstanceMask]) -> Vec<ReferencePoint> {
    let mut seen = BTreeMap::new();
    for (_, r) in filter_by_masks(refs, masks) {
        seen.entry(r.source_index).or_insert(r);
    }
    seen.into_values().collect()
}

/// Multi-depth unprojection over every view and instance mask. Masks with no
/// reference points produce nothing. Seed sampling for mask `m` of view `v`
/// draws from a stream derived from `(rng_seed, v, m)`.
pub fn run_mdu(inputs: &CameraInputs<'_>, depth_aware: &LinearParams, depth_gate: &LinearParams) -> Result<MduOutput> {
    let mut virtual_points = Vec::new();
    let mut instances = 0;
    let mut seed_offset = 0;
    for (vi, view) in inputs.scene.views.iter().enumerate() {
        let features = view.require_features(None)?;
        let cam = &view.camera;
        if features.width() != cam.width() as usize || features.height() != cam.height() as usize {
            return Err(Error::shape(format!(
                "camera {} is {}x{} but its feature map is {}x{}",
                view.id,
                cam.width(),
                cam.height(),
                features.width(),
                features.height()
            )));
        }
        let refs = project(&inputs.scene.points, cam);
        let masked = masked_references(&refs, &view.masks);
        let cdmap = build_depth_aware_features(features, &masked, depth_aware)?;
        for (mi, mask) in view.masks.iter().enumerate() {
            let inst_refs: Vec<ReferencePoint> = masked.iter().filter(|r| mask.contains(r.u, r.v)).copied().collect();
            if inst_refs.is_empty() {
                continue;
            }
            let seeds = sample_seeds(
                mask,
                inputs.mdu.seeds_per_instance,
                derive_seed(inputs.mdu.rng_seed, &[vi as u64, mi as u64]),
            )?;
            let depths = seeds
                .iter()
                .map(|s| knn_depths(s, &inst_refs, inputs.mdu.k))
                .collect::<Result<Vec<_>>>()?;
            let mut vps = modulate_and_unproject(&seeds, &depths, &cdmap, depth_gate, cam)?;
            for vp in &mut vps {
                vp.seed_index += seed_offset;
            }
            seed_offset += seeds.len();
            virtual_points.extend(vps);
            instances += 1;
        }
    }
    Ok(MduOutput {
        virtual_points,
        instances,
    })
}

/// Hand-crafted LiDAR point feature standing in for a learned encoder:
/// `[1, z, range / 10, 0, ...]`, truncated to `channels`.
pub fn lidar_point_feature(p: &Point3, channels: usize) -> Vec<f64> {
    let base = [1.0, p.z, (p.x * p.x + p.y * p.y).sqrt() / 10.0];
    (0..channels).map(|c| base.get(c).copied().unwrap_or(0.0)).collect()
}

/// Toy LiDAR backbone: voxelize at the base resolution and apply a
/// submanifold convolution, then one stride-2 convolution per coarser level.
pub fn lidar_pyramid(
    points: &[Point3],
    base_voxel_size: [f64; 3],
    bounds: &GridBounds,
    channels: usize,
    kernels: &[ConvKernel],
) -> Result<Vec<SparseVoxelTensor>> {
    let feats: Vec<Vec<f64>> = points.iter().map(|p| lidar_point_feature(p, channels)).collect();
    let origin = Point3::from(bounds.min);
    let v = voxelize(
        points.iter().copied().zip(feats.iter().map(Vec::as_slice)),
        channels,
        base_voxel_size,
        origin,
        bounds,
        Modality::Lidar,
    )?;
    let mut out: Vec<SparseVoxelTensor> = Vec::with_capacity(kernels.len());
    for (i, k) in kernels.iter().enumerate() {
        let t = if i == 0 {
            submanifold_conv(&v.tensor, k)?
        } else {
            strided_conv(out.last().unwrap(), k, 2)?
        };
        out.push(t);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ScaleOutput {
    pub fused: SparseVoxelTensor,
    pub camera: SparseVoxelTensor,
    pub merged: SparseVoxelTensor,
    pub assignments: Vec<ReferenceAssignment>,
    pub nvpf: usize,
    pub instances: usize,
    pub dropped_virtual_points: usize,
}

/// One scale of fusion: unproject, voxelize virtual points at this scale's
/// resolution, merge with the LiDAR voxels, and apply GMA-Conv.
pub fn run_scale(scale: &ScaleConfig, lidar: &SparseVoxelTensor, inputs: &CameraInputs<'_>) -> Result<ScaleOutput> {
    if lidar.voxel_size() != scale.voxel_size {
        return Err(Error::GeometryMismatch(format!(
            "scale {} expects voxel size {:?}, LiDAR tensor has {:?}",
            scale.scale_id,
            scale.voxel_size,
            lidar.voxel_size()
        )));
    }
    let mdu = run_mdu(inputs, &scale.depth_aware, &scale.depth_gate)?;
    let v = voxelize(
        mdu.virtual_points.iter().map(|vp| (vp.position, vp.feature.as_slice())),
        scale.channels,
        scale.voxel_size,
        lidar.origin(),
        &inputs.bounds,
        Modality::Camera,
    )?;
    let merged = merge_modalities(lidar, &v.tensor)?;
    let out = gma_conv_detailed(&merged, lidar, &scale.gma)?;
    Ok(ScaleOutput {
        fused: out.fused,
        camera: v.tensor,
        merged,
        assignments: out.assignments,
        nvpf: mdu.virtual_points.len(),
        instances: mdu.instances,
        dropped_virtual_points: v.dropped,
    })
}

/// Cascade connections: `out[0] = f[0]`, `out[i+1] = f[i+1] + downsample(out[i])`.
pub fn cascade(per_scale: &[SparseVoxelTensor]) -> Result<Vec<SparseVoxelTensor>> {
    let mut out: Vec<SparseVoxelTensor> = Vec::with_capacity(per_scale.len());
    for (i, f) in per_scale.iter().enumerate() {
        let next = match out.last() {
            None => f.clone(),
            Some(prev) => {
                let down = downsample(prev);
                if !down.same_geometry(f) {
                    return Err(Error::GeometryMismatch(format!(
                        "scale {i} does not sit one downsampling step above scale {}",
                        i - 1
                    )));
                }
                add(f, &down)?
            }
        };
        out.push(next);
    }
    Ok(out)
}

/// Dense bird's-eye-view grid covering the key bounding box of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BevMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Voxel x index of column 0.
    pub min_ix: i32,
    /// Voxel y index of row 0.
    pub min_iy: i32,
    /// Row-major over (iy, ix), channels innermost.
    pub data: Vec<f64>,
}

impl BevMap {
    pub fn cell(&self, ix: i32, iy: i32) -> Option<&[f64]> {
        let col = usize::try_from(ix - self.min_ix).ok()?;
        let row = usize::try_from(iy - self.min_iy).ok()?;
        if col >= self.width || row >= self.height {
            return None;
        }
        let start = (row * self.width + col) * self.channels;
        Some(&self.data[start..start + self.channels])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        gridfile::encode(self.width, self.height, self.channels, &self.data)
    }
}

/// Compresses the vertical axis by taking the per-channel maximum over the
/// occupied voxels of each (ix, iy) column; empty columns are zero.
pub fn flatten_to_bev(t: &SparseVoxelTensor) -> BevMap {
    let c = t.channels();
    let Some((min_ix, max_ix, min_iy, max_iy)) = t.keys().iter().fold(None, |acc, k| {
        Some(match acc {
            None => (k.ix, k.ix, k.iy, k.iy),
            Some((a, b, c, d)) => (k.ix.min(a), k.ix.max(b), k.iy.min(c), k.iy.max(d)),
        })
    }) else {
        return BevMap {
            width: 0,
            height: 0,
            channels: c,
            min_ix: 0,
            min_iy: 0,
            data: Vec::new(),
        };
    };
    let width = (max_ix - min_ix + 1) as usize;
    let height = (max_iy - min_iy + 1) as usize;
    let mut data = vec![0.0; width * height * c];
    let mut seen = vec![false; width * height];
    for (k, e) in t.iter() {
        let cell = (k.iy - min_iy) as usize * width + (k.ix - min_ix) as usize;
        let slot = &mut data[cell * c..(cell + 1) * c];
        if seen[cell] {
            slot.iter_mut().zip(&e.feature).for_each(|(s, x): (&mut f64, &f64)| *s = s.max(*x));
        } else {
            slot.copy_from_slice(&e.feature);
            seen[cell] = true;
        }
    }
    BevMap {
        width,
        height,
        channels: c,
        min_ix,
        min_iy,
        data,
    }
}
