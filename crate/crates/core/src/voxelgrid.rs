//! Hash-indexed sparse voxel tensors with modality tags.
//!
//! Entries are kept in ascending key order so every traversal, dump, and
//! floating-point reduction is reproducible; a side hash index gives O(1)
//! neighbor probes.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Integer voxel index. Ordering is lexicographic on (ix, iy, iz).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelKey {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelKey {
    pub const fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    pub fn offset(self, d: [i32; 3]) -> Self {
        Self::new(self.ix + d[0], self.iy + d[1], self.iz + d[2])
    }

    /// Parent key after halving the resolution (floor division).
    pub fn coarsen(self, factor: i32) -> Self {
        Self::new(
            self.ix.div_euclid(factor),
            self.iy.div_euclid(factor),
            self.iz.div_euclid(factor),
        )
    }

    pub fn dist2(self, other: VoxelKey) -> i64 {
        let dx = i64::from(self.ix) - i64::from(other.ix);
        let dy = i64::from(self.iy) - i64::from(other.iy);
        let dz = i64::from(self.iz) - i64::from(other.iz);
        dx * dx + dy * dy + dz * dz
    }
}

impl std::fmt::Display for VoxelKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.ix, self.iy, self.iz)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lidar,
    Camera,
    Both,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Lidar => "lidar",
            Modality::Camera => "camera",
            Modality::Both => "both",
        }
    }

    /// Tag of a voxel assembled from parts with tags `self` and `other`.
    pub fn combine(self, other: Modality) -> Modality {
        if self == other {
            self
        } else {
            Modality::Both
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelEntry {
    /// Voxel feature. For entries produced by [`merge_modalities`] this is the
    /// LiDAR part.
    pub feature: Vec<f64>,
    pub modality: Modality,
    /// Number of input points that contributed to this voxel.
    pub count: u32,
    /// Camera part of a merged LiDAR+camera voxel. Only
    /// [`merge_modalities`] sets this; derived tensors carry `None`.
    pub camera_part: Option<Vec<f64>>,
}

impl VoxelEntry {
    pub fn new(feature: Vec<f64>, modality: Modality, count: u32) -> Self {
        Self {
            feature,
            modality,
            count,
            camera_part: None,
        }
    }
}

/// Axis-aligned world-space region `[min, max)` that voxelization accepts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for GridBounds {
    fn default() -> Self {
        Self {
            min: [-54.0, -54.0, -5.0],
            max: [54.0, 54.0, 3.0],
        }
    }
}

impl GridBounds {
    pub fn contains(&self, p: &Point3) -> bool {
        let a = p.to_array();
        (0..3).all(|i| a[i] >= self.min[i] && a[i] < self.max[i])
    }
}

#[derive(Clone, Debug)]
pub struct SparseVoxelTensor {
    voxel_size: [f64; 3],
    origin: Point3,
    channels: usize,
    keys: Vec<VoxelKey>,
    entries: Vec<VoxelEntry>,
    index: HashMap<VoxelKey, usize>,
}

impl PartialEq for SparseVoxelTensor {
    fn eq(&self, other: &Self) -> bool {
        self.voxel_size == other.voxel_size
            && self.origin == other.origin
            && self.channels == other.channels
            && self.keys == other.keys
            && self.entries == other.entries
    }
}

fn check_voxel_size(voxel_size: [f64; 3]) -> Result<()> {
    if voxel_size.iter().all(|s| *s > 0.0 && s.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "voxel size components must be positive, got {voxel_size:?}"
        )))
    }
}

impl SparseVoxelTensor {
    pub fn empty(voxel_size: [f64; 3], origin: Point3, channels: usize) -> Result<Self> {
        Self::from_map(voxel_size, origin, channels, BTreeMap::new())
    }

    pub fn from_map(
        voxel_size: [f64; 3],
        origin: Point3,
        channels: usize,
        map: BTreeMap<VoxelKey, VoxelEntry>,
    ) -> Result<Self> {
        check_voxel_size(voxel_size)?;
        if channels == 0 {
            return Err(Error::shape("voxel features need at least one channel"));
        }
        for (k, e) in &map {
            if e.feature.len() != channels || e.camera_part.as_ref().is_some_and(|c| c.len() != channels) {
                return Err(Error::shape(format!(
                    "voxel {k} has {} channels, tensor has {channels}",
                    e.feature.len()
                )));
            }
            if e.count == 0 {
                return Err(Error::invalid(format!("voxel {k} has zero count")));
            }
        }
        let (keys, entries): (Vec<_>, Vec<_>) = map.into_iter().unzip();
        let index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Ok(Self {
            voxel_size,
            origin,
            channels,
            keys,
            entries,
            index,
        })
    }

    /// Same geometry and channel count as `self`, with new contents.
    pub fn with_entries(&self, map: BTreeMap<VoxelKey, VoxelEntry>) -> Result<Self> {
        Self::from_map(self.voxel_size, self.origin, self.channels, map)
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }
    pub fn origin(&self) -> Point3 {
        self.origin
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn len(&self) -> usize {
        self.keys.len()
    }
    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keys in ascending order.
    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    pub fn entries(&self) -> &[VoxelEntry] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (VoxelKey, &VoxelEntry)> {
        self.keys.iter().copied().zip(self.entries.iter())
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelEntry> {
        self.index.get(key).map(|&i| &self.entries[i])
    }

    pub fn position(&self, key: &VoxelKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn to_map(&self) -> BTreeMap<VoxelKey, VoxelEntry> {
        self.iter().map(|(k, e)| (k, e.clone())).collect()
    }

    pub fn same_geometry(&self, other: &SparseVoxelTensor) -> bool {
        self.voxel_size == other.voxel_size && self.origin == other.origin
    }

    pub fn check_compatible(&self, other: &SparseVoxelTensor, what: &str) -> Result<()> {
        if !self.same_geometry(other) {
            return Err(Error::GeometryMismatch(format!(
                "{what}: voxel size {:?} / origin {:?} vs {:?} / {:?}",
                self.voxel_size, self.origin, other.voxel_size, other.origin
            )));
        }
        if self.channels != other.channels {
            return Err(Error::shape(format!(
                "{what}: {} vs {} channels",
                self.channels, other.channels
            )));
        }
        Ok(())
    }

    pub fn key_of(&self, p: &Point3) -> VoxelKey {
        key_of(p, self.voxel_size, self.origin)
    }

    pub fn voxel_center(&self, key: VoxelKey) -> Point3 {
        let s = self.voxel_size;
        Point3::new(
            self.origin.x + (f64::from(key.ix) + 0.5) * s[0],
            self.origin.y + (f64::from(key.iy) + 0.5) * s[1],
            self.origin.z + (f64::from(key.iz) + 0.5) * s[2],
        )
    }

    /// Entries restricted to one modality tag.
    pub fn select(&self, modality: Modality) -> Self {
        let map = self
            .iter()
            .filter(|(_, e)| e.modality == modality)
            .map(|(k, e)| (k, e.clone()))
            .collect();
        self.with_entries(map).expect("subset of a valid tensor")
    }

    pub fn count_by_modality(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for e in &self.entries {
            counts[match e.modality {
                Modality::Lidar => 0,
                Modality::Camera => 1,
                Modality::Both => 2,
            }] += 1;
        }
        counts
    }

    /// Multiplies every feature (and camera part) by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let map = self
            .iter()
            .map(|(k, e)| {
                let mut e = e.clone();
                e.feature.iter_mut().for_each(|x| *x *= alpha);
                if let Some(c) = e.camera_part.as_mut() {
                    c.iter_mut().for_each(|x| *x *= alpha);
                }
                (k, e)
            })
            .collect();
        self.with_entries(map).expect("same shape")
    }

    /// CSV dump `ix,iy,iz,modality,count,f0..f{c-1}`, sorted by key.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ix,iy,iz,modality,count");
        for c in 0..self.channels {
            let _ = write!(s, ",f{c}");
        }
        s.push('\n');
        for (k, e) in self.iter() {
            let _ = write!(s, "{},{},{},{},{}", k.ix, k.iy, k.iz, e.modality.as_str(), e.count);
            for x in &e.feature {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn key_of(p: &Point3, voxel_size: [f64; 3], origin: Point3) -> VoxelKey {
    VoxelKey::new(
        ((p.x - origin.x) / voxel_size[0]).floor() as i32,
        ((p.y - origin.y) / voxel_size[1]).floor() as i32,
        ((p.z - origin.z) / voxel_size[2]).floor() as i32,
    )
}

/// Voxelization result with the number of inputs rejected for lying outside
/// the grid bounds (or being non-finite).
#[derive(Clone, Debug, PartialEq)]
pub struct Voxelized {
    pub tensor: SparseVoxelTensor,
    pub dropped: usize,
}

/// Averages the features of points sharing a voxel.
pub fn voxelize<'a, I>(
    points: I,
    channels: usize,
    voxel_size: [f64; 3],
    origin: Point3,
    bounds: &GridBounds,
    modality: Modality,
) -> Result<Voxelized>
where
    I: IntoIterator<Item = (Point3, &'a [f64])>,
{
    check_voxel_size(voxel_size)?;
    let mut acc: BTreeMap<VoxelKey, (Vec<f64>, u32)> = BTreeMap::new();
    let mut dropped = 0;
    for (p, f) in points {
        if f.len() != channels {
            return Err(Error::shape(format!(
                "point feature has {} channels, expected {channels}",
                f.len()
            )));
        }
        if !p.is_finite() || !bounds.contains(&p) {
            dropped += 1;
            continue;
        }
        let slot = acc
            .entry(key_of(&p, voxel_size, origin))
            .or_insert_with(|| (vec![0.0; channels], 0));
        slot.0.iter_mut().zip(f).for_each(|(s, x)| *s += x);
        slot.1 += 1;
    }
    let map = acc
        .into_iter()
        .map(|(k, (sum, n))| {
            let mean = sum.into_iter().map(|s| s / f64::from(n)).collect();
            (k, VoxelEntry::new(mean, modality, n))
        })
        .collect();
    Ok(Voxelized {
        tensor: SparseVoxelTensor::from_map(voxel_size, origin, channels, map)?,
        dropped,
    })
}

/// Unions LiDAR and camera voxels. Keys present in both become `Both`
/// entries holding the LiDAR feature in `feature` and the camera feature in
/// `camera_part`.
pub fn merge_modalities(lidar: &SparseVoxelTensor, camera: &SparseVoxelTensor) -> Result<SparseVoxelTensor> {
    lidar.check_compatible(camera, "merge_modalities")?;
    let mut map = lidar.to_map();
    for (k, c) in camera.iter() {
        match map.get_mut(&k) {
            Some(l) => {
                l.modality = Modality::Both;
                l.count += c.count;
                l.camera_part = Some(c.feature.clone());
            }
            None => {
                map.insert(k, c.clone());
            }
        }
    }
    lidar.with_entries(map)
}

/// Halves the resolution: children `2k` and `2k+1` fold into parent `k` on
/// every axis, with count-weighted mean features.
pub fn downsample(t: &SparseVoxelTensor) -> SparseVoxelTensor {
    let mut acc: BTreeMap<VoxelKey, (Vec<f64>, u32, Modality)> = BTreeMap::new();
    for (k, e) in t.iter() {
        let w = f64::from(e.count);
        match acc.entry(k.coarsen(2)) {
            std::collections::btree_map::Entry::Vacant(slot) => {
                slot.insert((e.feature.iter().map(|x| x * w).collect(), e.count, e.modality));
            }
            std::collections::btree_map::Entry::Occupied(mut slot) => {
                let (sum, n, m) = slot.get_mut();
                sum.iter_mut().zip(&e.feature).for_each(|(s, x)| *s += x * w);
                *n += e.count;
                *m = m.combine(e.modality);
            }
        }
    }
    let map = acc
        .into_iter()
        .map(|(k, (sum, n, m))| {
            let mean = sum.into_iter().map(|s| s / f64::from(n)).collect();
            (k, VoxelEntry::new(mean, m, n))
        })
        .collect();
    let s = t.voxel_size;
    SparseVoxelTensor::from_map([s[0] * 2.0, s[1] * 2.0, s[2] * 2.0], t.origin, t.channels, map)
        .expect("downsample preserves validity")
}

/// Voxel addition: union of keys, features summed where keys coincide.
pub fn add(a: &SparseVoxelTensor, b: &SparseVoxelTensor) -> Result<SparseVoxelTensor> {
    a.check_compatible(b, "add")?;
    let mut map = a.to_map();
    for (k, e) in b.iter() {
        match map.get_mut(&k) {
            Some(x) => {
                x.feature.iter_mut().zip(&e.feature).for_each(|(s, y)| *s += y);
                x.count += e.count;
                x.modality = x.modality.combine(e.modality);
                x.camera_part = None;
            }
            None => {
                map.insert(k, e.clone());
            }
        }
    }
    a.with_entries(map)
}
