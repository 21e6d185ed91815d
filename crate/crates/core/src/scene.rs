//! Scene directories.
//!
//! A scene directory holds `points.csv` (header `x,y,z`, one point per row,
//! meters), and per camera `<id>`: `camera_<id>.json`, `masks_<id>.json`
//! (a list of `{instance_id, rects: [[u0, v0, u1, v1], ...]}` with half-open
//! rectangles), and optionally `features_<id>.bin`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, InstanceMask, Point3};
use crate::mdu::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub id: String,
    pub camera: Camera,
    pub masks: Vec<InstanceMask>,
    pub features: Option<FeatureMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<Point3>,
    pub views: Vec<CameraView>,
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    instance_id: u32,
    rects: Vec<[u32; 4]>,
}

fn format_err(what: &'static str, path: &Path, message: impl ToString) -> Error {
    Error::Format {
        what,
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(what, path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_points_csv(path: &Path) -> Result<Vec<Point3>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => format_err("point cloud", path, format!("{other:?}")),
        })?;
    reader
        .deserialize::<(f64, f64, f64)>()
        .map(|row| {
            let (x, y, z) = row.map_err(|e| format_err("point cloud", path, e))?;
            let p = Point3::new(x, y, z);
            if !p.is_finite() {
                return Err(format_err("point cloud", path, "non-finite coordinate"));
            }
            Ok(p)
        })
        .collect()
}

pub fn points_to_csv(points: &[Point3]) -> String {
    let mut s = String::from("x,y,z\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.x, p.y, p.z);
    }
    s
}

pub fn read_masks(path: &Path, cam: &Camera) -> Result<Vec<InstanceMask>> {
    let reprs: Vec<MaskRepr> = read_json(path, "mask list")?;
    reprs
        .into_iter()
        .map(|m| {
            let mask = InstanceMask::from_rects(m.instance_id, &m.rects)
                .map_err(|e| format_err("mask list", path, e))?;
            if !mask.fits_in(cam) {
                return Err(format_err(
                    "mask list",
                    path,
                    format!("instance {} extends outside the image", m.instance_id),
                ));
            }
            Ok(mask)
        })
        .collect()
}

pub fn masks_to_json(masks: &[InstanceMask]) -> String {
    let reprs: Vec<MaskRepr> = masks
        .iter()
        .map(|m| MaskRepr {
            instance_id: m.instance_id(),
            rects: m.to_rects(),
        })
        .collect();
    serde_json::to_string(&reprs).expect("serializable")
}

impl CameraView {
    /// Feature map of this view, or an error naming the file it should have
    /// been loaded from.
    pub fn require_features(&self, scene_dir: Option<&Path>) -> Result<&FeatureMap> {
        self.features.as_ref().ok_or_else(|| match scene_dir {
            Some(dir) => Error::MissingFile(dir.join(format!("features_{}.bin", self.id))),
            None => Error::invalid(format!("camera {} has no feature map", self.id)),
        })
    }
}

impl Scene {
    /// Loads a scene directory. Cameras are discovered from `camera_<id>.json`
    /// files and ordered by id.
    pub fn read_dir(dir: &Path) -> Result<Scene> {
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir.to_path_buf()));
        }
        let points = read_points_csv(&dir.join("points.csv"))?;
        let mut ids: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| {
                let name = entry.ok()?.file_name().into_string().ok()?;
                let id = name.strip_prefix("camera_")?.strip_suffix(".json")?;
                Some(id.to_string())
            })
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(format_err("scene", dir, "no camera_<id>.json files"));
        }
        let views = ids
            .into_iter()
            .map(|id| {
                let camera: Camera = read_json(&dir.join(format!("camera_{id}.json")), "camera")?;
                let masks = read_masks(&dir.join(format!("masks_{id}.json")), &camera)?;
                let feature_path = dir.join(format!("features_{id}.bin"));
                let features = if feature_path.exists() {
                    Some(FeatureMap::read_bin(&feature_path)?)
                } else {
                    None
                };
                Ok(CameraView {
                    id,
                    camera,
                    masks,
                    features,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Scene { points, views })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, body: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        write("points.csv".into(), points_to_csv(&self.points))?;
        for v in &self.views {
            write_json(&dir.join(format!("camera_{}.json", v.id)), &v.camera)?;
            write(format!("masks_{}.json", v.id), masks_to_json(&v.masks) + "\n")?;
            if let Some(f) = &v.features {
                f.write_bin(&dir.join(format!("features_{}.bin", v.id)))?;
            }
        }
        Ok(())
    }
}

/// Resolves `name` inside `dir`, failing with the full path when absent.
pub fn require_file(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path))
    }
}
