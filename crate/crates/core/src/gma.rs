//! Gated modality-aware convolution.
//!
//! Voxels are grouped by modality. Camera features are gated by a ReLU-affine
//! function of a reference LiDAR feature, each group is lifted into a joint
//! space by its own submanifold convolution, and the groups are combined and
//! fused by a final convolution.
//!
//! Reference retrieval avoids an all-pairs search: farthest point sampling
//! picks `l` camera voxels, each finds its exact nearest LiDAR voxel, and
//! hands that reference to every camera voxel within `radius` of it. The cost
//! is `O(l * (M + N))` for `M` camera and `N` LiDAR voxels.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linear::LinearParams;
use crate::sparseconv::{submanifold_conv, ConvKernel};
use crate::voxelgrid::{add, Modality, SparseVoxelTensor, VoxelEntry, VoxelKey};

/// Default ball radius, in voxel units.
pub const DEFAULT_RADIUS: f64 = 4.0;

/// Default number of farthest-point samples at full scale.
pub const DEFAULT_SAMPLES: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceAssignment {
    pub camera_key: VoxelKey,
    /// Nearest LiDAR voxel of the sample that covered this camera voxel.
    pub lidar_key: Option<VoxelKey>,
    /// Position in farthest-point selection order of the covering sample.
    pub via_sample: Option<usize>,
    /// Camera key of the covering sample.
    pub sample_key: Option<VoxelKey>,
}

/// Farthest point sampling in voxel-index space. Starts at `start_index` and
/// repeatedly takes the key farthest from everything selected so far (ties
/// to the smallest index). Returns `min(l, keys.len())` indices in selection
/// order.
pub fn fps(keys: &[VoxelKey], l: usize, start_index: usize) -> Result<Vec<usize>> {
    if keys.is_empty() {
        return Err(Error::invalid("farthest point sampling needs at least one key"));
    }
    if l == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if start_index >= keys.len() {
        return Err(Error::invalid(format!(
            "start index {start_index} out of range for {} keys",
            keys.len()
        )));
    }
    let n = keys.len();
    let m = l.min(n);
    let mut min_d2 = vec![i64::MAX; n];
    let mut chosen = vec![false; n];
    let mut out = Vec::with_capacity(m);
    let mut current = start_index;
    chosen[current] = true;
    out.push(current);
    while out.len() < m {
        let c = keys[current];
        let mut best: Option<(i64, usize)> = None;
        for (i, k) in keys.iter().enumerate() {
            let d = k.dist2(c);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if !chosen[i] && best.is_none_or(|(bd, _)| min_d2[i] > bd) {
                best = Some((min_d2[i], i));
            }
        }
        current = best.expect("fewer than n selected").1;
        chosen[current] = true;
        out.push(current);
    }
    Ok(out)
}

/// Exact nearest key by squared distance; ties go to the earliest key, which
/// for a tensor's sorted keys is the lexicographically smallest.
pub fn nearest_key(target: VoxelKey, keys: &[VoxelKey]) -> Option<VoxelKey> {
    keys.iter()
        .enumerate()
        .min_by_key(|(i, k)| (k.dist2(target), *i))
        .map(|(_, k)| *k)
}

/// Assigns a LiDAR reference voxel to every camera voxel via farthest point
/// sampling and ball distribution. Camera voxels outside every ball, or any
/// voxel when `lidar` is empty, get no reference. Output follows the camera
/// tensor's key order.
pub fn assign_references(
    camera: &SparseVoxelTensor,
    lidar: &SparseVoxelTensor,
    l: usize,
    radius: f64,
) -> Result<Vec<ReferenceAssignment>> {
    if l == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("radius must be non-negative, got {radius}")));
    }
    let cam_keys = camera.keys();
    let unassigned = |k: &VoxelKey| ReferenceAssignment {
        camera_key: *k,
        lidar_key: None,
        via_sample: None,
        sample_key: None,
    };
    if cam_keys.is_empty() || lidar.is_empty() {
        return Ok(cam_keys.iter().map(unassigned).collect());
    }

    let samples: Vec<VoxelKey> = fps(cam_keys, l, 0)?.into_iter().map(|i| cam_keys[i]).collect();
    let lidar_keys = lidar.keys();
    let references: Vec<VoxelKey> = samples
        .par_iter()
        .map(|s| nearest_key(*s, lidar_keys).expect("lidar is non-empty"))
        .collect();

    let r2 = radius * radius;
    Ok(cam_keys
        .par_iter()
        .map(|k| {
            let mut best: Option<(i64, usize)> = None;
            for (si, s) in samples.iter().enumerate() {
                let d = k.dist2(*s);
                if d as f64 <= r2 && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, si));
                }
            }
            match best {
                Some((_, si)) => ReferenceAssignment {
                    camera_key: *k,
                    lidar_key: Some(references[si]),
                    via_sample: Some(si),
                    sample_key: Some(samples[si]),
                },
                None => unassigned(k),
            }
        })
        .collect())
}

/// `ReLU(W * lidar_reference + b) ⊙ camera_feature`; the camera feature
/// passes through unchanged when there is no reference.
pub fn gate_camera(camera_feature: &[f64], lidar_reference: Option<&[f64]>, params: &LinearParams) -> Result<Vec<f64>> {
    let Some(reference) = lidar_reference else {
        return Ok(camera_feature.to_vec());
    };
    params.expect_shape(camera_feature.len(), reference.len(), "camera gate")?;
    let gate = params.apply(reference)?;
    Ok(gate
        .iter()
        .zip(camera_feature)
        .map(|(g, c)| g.max(0.0) * c)
        .collect())
}

/// Fixture parameters of one GMA-Conv block.
#[derive(Clone, Debug, PartialEq)]
pub struct GmaParams {
    /// LiDAR channels to camera channels.
    pub gate: LinearParams,
    /// Projects `[lidar ; gated camera]` of combined voxels to the common width.
    pub pair_projection: LinearParams,
    pub joint_lidar: ConvKernel,
    pub joint_camera: ConvKernel,
    pub joint_both: ConvKernel,
    pub fuse: ConvKernel,
    pub samples: usize,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct GmaOutput {
    pub fused: SparseVoxelTensor,
    pub assignments: Vec<ReferenceAssignment>,
}

/// Select-then-aggregate fusion of a merged tensor. `lidar` supplies the
/// reference features for camera-only voxels.
pub fn gma_conv(merged: &SparseVoxelTensor, lidar: &SparseVoxelTensor, params: &GmaParams) -> Result<SparseVoxelTensor> {
    gma_conv_detailed(merged, lidar, params).map(|o| o.fused)
}

pub fn gma_conv_detailed(merged: &SparseVoxelTensor, lidar: &SparseVoxelTensor, params: &GmaParams) -> Result<GmaOutput> {
    if !merged.same_geometry(lidar) {
        return Err(Error::GeometryMismatch(
            "gma_conv: merged and lidar tensors differ in geometry".into(),
        ));
    }
    let lidar_only = merged.select(Modality::Lidar);
    let camera_only = merged.select(Modality::Camera);
    let both = merged.select(Modality::Both);

    let assignments = assign_references(&camera_only, lidar, params.samples, params.radius)?;
    let gated_camera = camera_only
        .iter()
        .zip(&assignments)
        .map(|((k, e), a)| {
            let reference = a
                .lidar_key
                .map(|lk| lidar.get(&lk).expect("assigned key exists").feature.as_slice());
            let f = gate_camera(&e.feature, reference, &params.gate)?;
            Ok((k, VoxelEntry::new(f, e.modality, e.count)))
        })
        .collect::<Result<_>>()?;
    let gated_camera = camera_only.with_entries(gated_camera)?;

    let width = params.pair_projection.rows();
    let projected_both = both
        .iter()
        .map(|(k, e)| {
            let camera_part = e.camera_part.as_deref().ok_or_else(|| {
                Error::invalid(format!("combined voxel {k} carries no camera part"))
            })?;
            let gated = gate_camera(camera_part, Some(&e.feature), &params.gate)?;
            let f = params.pair_projection.apply_concat(&[&e.feature, &gated])?;
            Ok((k, VoxelEntry::new(f, e.modality, e.count)))
        })
        .collect::<Result<_>>()?;
    let projected_both = SparseVoxelTensor::from_map(merged.voxel_size(), merged.origin(), width, projected_both)?;

    let joint_l = submanifold_conv(&lidar_only, &params.joint_lidar)?;
    let joint_c = submanifold_conv(&gated_camera, &params.joint_camera)?;
    let joint_lc = submanifold_conv(&projected_both, &params.joint_both)?;
    let joint = add(&add(&joint_l, &joint_c)?, &joint_lc)?;
    Ok(GmaOutput {
        fused: submanifold_conv(&joint, &params.fuse)?,
        assignments,
    })
}

pub fn assignments_to_csv(assignments: &[ReferenceAssignment]) -> String {
    let mut s = String::from("camera_ix,camera_iy,camera_iz,lidar_ix,lidar_iy,lidar_iz,via_sample\n");
    for a in assignments {
        let c = a.camera_key;
        let _ = write!(s, "{},{},{},", c.ix, c.iy, c.iz);
        match a.lidar_key {
            Some(l) => {
                let _ = write!(s, "{},{},{},", l.ix, l.iy, l.iz);
            }
            None => s.push_str(",,,"),
        }
        if let Some(v) = a.via_sample {
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_assignments_csv(assignments: &[ReferenceAssignment], path: &Path) -> Result<()> {
    std::fs::write(path, assignments_to_csv(assignments)).map_err(|e| Error::io(path, e))
}
