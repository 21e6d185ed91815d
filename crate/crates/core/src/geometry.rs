//! Pinhole camera model: projection of world points to pixels, unprojection
//! of pixels with depth back to world space, and instance-mask membership.
//!
//! Conventions: the camera frame has +z along the optical axis, +x to the
//! right and +y down the image. `rotation` maps world to camera coordinates,
//! so `p_cam = R * p_world + t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the world frame, in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        self.distance_squared(other).sqrt()
    }

    pub fn distance_squared(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Raw on-disk layout of a camera. Rotation is row-major.
#[derive(Serialize, Deserialize)]
struct CameraRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    width: u32,
    height: u32,
}

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRepr", into = "CameraRepr")]
pub struct Camera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    width: u32,
    height: u32,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl Camera {
    /// Builds a camera, checking that the rotation is orthonormal and the
    /// intrinsics are positive.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        width: u32,
        height: u32,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) || translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("camera parameters must be finite"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHONORMAL_TOL || !dot.is_finite() {
                    return Err(Error::invalid("rotation is not orthonormal"));
                }
            }
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera at the world origin with identity rotation.
    pub fn with_identity_pose(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            fx,
            fy,
            cx,
            cy,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            width,
            height,
        )
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }
    pub fn translation(&self) -> &[f64; 3] {
        &self.translation
    }

    /// World point expressed in the camera frame.
    pub fn to_camera_frame(&self, p: &Point3) -> [f64; 3] {
        let w = p.to_array();
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * w[0] + r[i][1] * w[1] + r[i][2] * w[2];
        }
        out
    }

    /// Camera-frame point expressed in the world frame.
    pub fn to_world_frame(&self, c: [f64; 3]) -> Point3 {
        let d = [
            c[0] - self.translation[0],
            c[1] - self.translation[1],
            c[2] - self.translation[2],
        ];
        let r = &self.rotation;
        Point3::new(
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        )
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < f64::from(self.width) && v < f64::from(self.height)
    }

    /// Direction of the viewing ray through (u, v), scaled so that its
    /// camera-frame z component is 1.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

impl TryFrom<CameraRepr> for Camera {
    type Error = Error;

    fn try_from(r: CameraRepr) -> Result<Self> {
        let m = r.rotation;
        Camera::new(
            r.fx,
            r.fy,
            r.cx,
            r.cy,
            [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]],
            r.translation,
            r.width,
            r.height,
        )
    }
}

impl From<Camera> for CameraRepr {
    fn from(c: Camera) -> Self {
        let r = c.rotation;
        CameraRepr {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: c.translation,
            width: c.width,
            height: c.height,
        }
    }
}

/// A LiDAR point projected into an image, carrying its real depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferencePoint {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth in meters.
    pub d: f64,
    /// Index of the originating point in the input cloud.
    pub source_index: usize,
}

impl ReferencePoint {
    /// Integer pixel cell containing this reference (floor rule).
    pub fn cell(&self) -> (i64, i64) {
        (self.u.floor() as i64, self.v.floor() as i64)
    }
}

/// Projects world points into the camera. Points behind the camera or
/// outside the image are dropped; survivors keep ascending source order.
pub fn project(points: &[Point3], cam: &Camera) -> Vec<ReferencePoint> {
    points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let c = cam.to_camera_frame(p);
            if !(c[2] > 0.0) {
                return None;
            }
            let u = cam.fx * c[0] / c[2] + cam.cx;
            let v = cam.fy * c[1] / c[2] + cam.cy;
            cam.in_image(u, v).then_some(ReferencePoint {
                u,
                v,
                d: c[2],
                source_index: i,
            })
        })
        .collect()
}

/// World-frame point on the ray through (u, v) at camera depth `d`.
pub fn unproject(u: f64, v: f64, d: f64, cam: &Camera) -> Result<Point3> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::invalid(format!("depth must be positive, got {d}")));
    }
    let ray = cam.ray(u, v);
    Ok(cam.to_world_frame([ray[0] * d, ray[1] * d, d]))
}

/// A 2D foreground instance region, stored as sorted unique pixel cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    instance_id: u32,
    cells: Vec<(u32, u32)>,
}

impl InstanceMask {
    pub fn from_cells(instance_id: u32, cells: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut cells: Vec<(u32, u32)> = cells.into_iter().collect();
        cells.sort_unstable();
        cells.dedup();
        if cells.is_empty() {
            return Err(Error::invalid(format!("instance {instance_id} has an empty mask")));
        }
        Ok(Self { instance_id, cells })
    }

    /// Builds a mask from half-open rectangles `[u0, u1) x [v0, v1)`.
    pub fn from_rects(instance_id: u32, rects: &[[u32; 4]]) -> Result<Self> {
        let cells = rects
            .iter()
            .flat_map(|&[u0, v0, u1, v1]| (v0..v1).flat_map(move |v| (u0..u1).map(move |u| (u, v))));
        Self::from_cells(instance_id, cells)
    }

    /// Run-length encoding of the mask as one half-open rectangle per
    /// horizontal run.
    pub fn to_rects(&self) -> Vec<[u32; 4]> {
        let mut by_row: Vec<(u32, u32)> = self.cells.iter().map(|&(u, v)| (v, u)).collect();
        by_row.sort_unstable();
        let mut rects: Vec<[u32; 4]> = Vec::new();
        for (v, u) in by_row {
            match rects.last_mut() {
                Some(r) if r[1] == v && r[2] == u => r[2] = u + 1,
                _ => rects.push([u, v, u + 1, v + 1]),
            }
        }
        rects
    }

    pub fn instance_id(&self) -> u32 {
        self.instance_id
    }

    /// Cells in ascending (u, v) order.
    pub fn cells(&self) -> &[(u32, u32)] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains_cell(&self, u: i64, v: i64) -> bool {
        let (Ok(u), Ok(v)) = (u32::try_from(u), u32::try_from(v)) else {
            return false;
        };
        self.cells.binary_search(&(u, v)).is_ok()
    }

    /// Membership of a continuous pixel coordinate under the floor rule.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        self.contains_cell(u.floor() as i64, v.floor() as i64)
    }

    pub fn fits_in(&self, cam: &Camera) -> bool {
        self.cells
            .iter()
            .all(|&(u, v)| u < cam.width() && v < cam.height())
    }
}

/// Pairs each reference with every mask containing its pixel cell.
///
/// Output is ordered by reference, then by mask order. References covered by
/// several masks appear once per mask.
pub fn filter_by_masks(refs: &[ReferencePoint], masks: &[InstanceMask]) -> Vec<(u32, ReferencePoint)> {
    let mut out = Vec::new();
    for r in refs {
        let (u, v) = r.cell();
        for m in masks {
            if m.contains_cell(u, v) {
                out.push((m.instance_id, *r));
            }
        }
    }
    out
}
