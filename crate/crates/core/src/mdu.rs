//! Multi-depth unprojection.
//!
//! Seeds sampled from each instance mask look up their K nearest reference
//! points in the image plane and are lifted to 3D once per retrieved depth.
//! Each virtual point is decorated with the depth-aware image feature at its
//! seed pixel, scaled by a sigmoid gate conditioned on that feature and the
//! depth being used.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{unproject, Camera, InstanceMask, Point3, ReferencePoint};
use crate::gridfile;
use crate::linear::LinearParams;

/// A pixel sampled from an instance mask, to be lifted to 3D.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Seed {
    pub u: f64,
    pub v: f64,
    pub instance_id: u32,
}

/// Dense per-pixel feature vectors, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::shape("feature map dimensions must be positive"));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "feature map {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let start = (v * self.width + u) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let start = (v * self.width + u) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Feature at the cell containing the continuous pixel coordinate.
    pub fn at(&self, u: f64, v: f64) -> Option<&[f64]> {
        let (cu, cv) = (u.floor(), v.floor());
        if cu < 0.0 || cv < 0.0 || cu >= self.width as f64 || cv >= self.height as f64 {
            return None;
        }
        Some(self.pixel(cu as usize, cv as usize))
    }

    pub fn read_bin(path: &Path) -> Result<Self> {
        let (w, h, c, data) = gridfile::read(path)?;
        Self::new(w, h, c, data).map_err(|e| Error::Format {
            what: "feature map",
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn write_bin(&self, path: &Path) -> Result<()> {
        gridfile::write(path, self.width, self.height, self.channels, &self.data)
    }
}

/// Image features fused with the sparse reference depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthAwareFeatureMap(pub FeatureMap);

impl std::ops::Deref for DepthAwareFeatureMap {
    type Target = FeatureMap;
    fn deref(&self) -> &FeatureMap {
        &self.0
    }
}

/// A seed lifted to 3D at one of its retrieved depths.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualPoint {
    pub position: Point3,
    pub feature: Vec<f64>,
    pub seed_index: usize,
    /// Rank of the depth among the seed's nearest references (0 = nearest).
    pub depth_rank: usize,
}

/// Samples `n` seeds uniformly from the mask cells, without replacement when
/// the mask has at least `n` cells and with replacement otherwise. Seeds sit
/// at cell centers.
pub fn sample_seeds(mask: &InstanceMask, n: usize, rng_seed: u64) -> Result<Vec<Seed>> {
    if n == 0 {
        return Err(Error::invalid("seed count must be at least 1"));
    }
    if mask.is_empty() {
        return Err(Error::invalid("cannot sample seeds from an empty mask"));
    }
    let cells = mask.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let picks: Vec<usize> = if cells.len() >= n {
        rand::seq::index::sample(&mut rng, cells.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..cells.len())).collect()
    };
    Ok(picks
        .into_iter()
        .map(|i| {
            let (u, v) = cells[i];
            Seed {
                u: f64::from(u) + 0.5,
                v: f64::from(v) + 0.5,
                instance_id: mask.instance_id(),
            }
        })
        .collect())
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Depths of the `min(k, refs.len())` references nearest to the seed in
/// pixel space, ascending by distance with ties broken by reference index.
/// Returns `(depth, ref_index)` pairs.
pub fn knn_depths(seed: &Seed, refs: &[ReferencePoint], k: usize) -> Result<Vec<(f64, usize)>> {
    if refs.is_empty() {
        return Err(Error::invalid("no reference points to retrieve depth from"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for (index, r) in refs.iter().enumerate() {
        let du = r.u - seed.u;
        let dv = r.v - seed.v;
        let cand = Candidate {
            dist2: du * du + dv * dv,
            index,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if heap.peek().is_some_and(|worst| cand < *worst) {
            heap.pop();
            heap.push(cand);
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|c| (refs[c.index].d, c.index))
        .collect())
}

/// Sparse depth map with one value per pixel cell: the smallest reference
/// depth landing in the cell, or 0 where no reference lands.
pub fn sparse_depth_map(width: usize, height: usize, refs: &[ReferencePoint]) -> Result<Vec<f64>> {
    let mut depth = vec![0.0; width * height];
    for r in refs {
        let (u, v) = r.cell();
        if u < 0 || v < 0 || u as usize >= width || v as usize >= height {
            return Err(Error::invalid(format!(
                "reference at ({}, {}) lies outside the {width}x{height} feature map",
                r.u, r.v
            )));
        }
        let slot = &mut depth[v as usize * width + u as usize];
        if *slot == 0.0 || r.d < *slot {
            *slot = r.d;
        }
    }
    Ok(depth)
}

/// Per-pixel affine fusion of image features with the sparse depth map:
/// `out = W [c ; depth] + b`.
pub fn build_depth_aware_features(
    cmap: &FeatureMap,
    refs: &[ReferencePoint],
    params: &LinearParams,
) -> Result<DepthAwareFeatureMap> {
    let c = cmap.channels();
    params.expect_shape(c, c + 1, "depth-aware fusion")?;
    let depth = sparse_depth_map(cmap.width(), cmap.height(), refs)?;
    let data: Vec<f64> = (0..cmap.width() * cmap.height())
        .into_par_iter()
        .flat_map_iter(|p| {
            let feat = &cmap.data()[p * c..(p + 1) * c];
            params
                .apply_concat(&[feat, &[depth[p]]])
                .expect("shape checked above")
        })
        .collect();
    Ok(DepthAwareFeatureMap(FeatureMap::new(
        cmap.width(),
        cmap.height(),
        c,
        data,
    )?))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Depth-conditioned scale factor for one (feature, depth) pair.
pub fn depth_gate(feature: &[f64], depth: f64, gate: &LinearParams) -> Result<f64> {
    Ok(sigmoid(gate.apply_concat(&[feature, &[depth]])?[0]))
}

/// Lifts every seed at each of its retrieved depths and decorates the
/// resulting virtual points with gated depth-aware features. Output is in
/// seed order, then depth-rank order.
pub fn modulate_and_unproject(
    seeds: &[Seed],
    depths_per_seed: &[Vec<(f64, usize)>],
    cdmap: &DepthAwareFeatureMap,
    gate_params: &LinearParams,
    cam: &Camera,
) -> Result<Vec<VirtualPoint>> {
    if seeds.len() != depths_per_seed.len() {
        return Err(Error::shape(format!(
            "{} seeds but {} depth lists",
            seeds.len(),
            depths_per_seed.len()
        )));
    }
    gate_params.expect_shape(1, cdmap.channels() + 1, "depth gate")?;
    let per_seed: Vec<Vec<VirtualPoint>> = seeds
        .par_iter()
        .zip(depths_per_seed.par_iter())
        .enumerate()
        .map(|(seed_index, (seed, depths))| {
            let feature = cdmap.at(seed.u, seed.v).ok_or_else(|| {
                Error::invalid(format!("seed ({}, {}) lies outside the feature map", seed.u, seed.v))
            })?;
            depths
                .iter()
                .enumerate()
                .map(|(depth_rank, &(d, _))| {
                    let s = depth_gate(feature, d, gate_params)?;
                    Ok(VirtualPoint {
                        position: unproject(seed.u, seed.v, d, cam)?,
                        feature: feature.iter().map(|x| x * s).collect(),
                        seed_index,
                        depth_rank,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Virtual points per frame before any deduplication.
pub fn count_nvpf(instances: u64, seeds_per_instance: u64, k: u64) -> u64 {
    instances * seeds_per_instance * k
}
