//! Camera projection, robust depth estimation, and ground-plane coverage
//! footprints with occlusion.
//!
//! Camera-frame convention: `x` points up (derived from the vertical pixel
//! coordinate, positive for pixels above the image center), `y` points to the
//! right of the optical axis, `z` is depth along the axis. World frames are
//! z-up with the ground plane spanned by (x, y).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    InvalidDepth(f64),
    #[error("focal length {focal_px} inconsistent with fov {fov_deg} deg (expected {expected})")]
    InconsistentIntrinsics { focal_px: f64, fov_deg: f64, expected: f64 },
    #[error("pixel box degenerates below 5x5 after clamping to the image")]
    DegenerateBox,
    #[error("no valid depth returns inside the sampled squares")]
    NoDepth,
    #[error("grid specs differ (origin, cell size, or dimensions)")]
    IncompatibleGrids,
    #[error("pose is not a rigid camera-to-world transform")]
    InvalidPose,
}

/// Pinhole camera description. `focal_px` and `fov_deg` are kept mutually
/// consistent: focal = (width/2) / tan(fov/2).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CameraIntrinsics {
    pub image_width_px: u32,
    pub image_height_px: u32,
    pub fov_deg: f64,
    pub focal_px: f64,
    pub max_range_m: f64,
}

impl CameraIntrinsics {
    pub fn from_fov(width: u32, height: u32, fov_deg: f64, max_range_m: f64) -> Self {
        assert!(fov_deg > 0.0 && fov_deg < 180.0, "fov out of range");
        assert!(max_range_m > 0.0);
        let focal_px = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self { image_width_px: width, image_height_px: height, fov_deg, focal_px, max_range_m }
    }

    pub fn from_focal(width: u32, height: u32, focal_px: f64, max_range_m: f64) -> Self {
        assert!(focal_px > 0.0);
        assert!(max_range_m > 0.0);
        let fov_deg = 2.0 * ((width as f64 / 2.0) / focal_px).atan().to_degrees();
        Self { image_width_px: width, image_height_px: height, fov_deg, focal_px, max_range_m }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let expected = (self.image_width_px as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan();
        if (self.focal_px - expected).abs() > 1e-6 * expected.abs() {
            return Err(GeometryError::InconsistentIntrinsics {
                focal_px: self.focal_px,
                fov_deg: self.fov_deg,
                expected,
            });
        }
        Ok(())
    }
}

/// Point in the camera frame: x up, y lateral (right), z depth. Meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Point in the world frame, z up. Meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dist(&self, other: &WorldPoint) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(&self, other: &WorldPoint) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        dx * dx + dy * dy + dz * dz
    }
}

/// Rigid camera-to-world transform as a row-major 4x4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub cam_to_world: [[f64; 4]; 4],
}

impl Pose {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { cam_to_world: m }
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        let mut p = Self::identity();
        p.cam_to_world[0][3] = x;
        p.cam_to_world[1][3] = y;
        p.cam_to_world[2][3] = z;
        p
    }

    /// Pose of a forward-looking camera mounted on a ground vehicle at
    /// (x, y), lens `cam_height` above ground, heading `yaw_rad` in the
    /// world ground plane. Maps camera-up to world +z and the optical axis
    /// to the heading direction.
    pub fn ground_vehicle(x: f64, y: f64, cam_height: f64, yaw_rad: f64) -> Self {
        let (s, c) = yaw_rad.sin_cos();
        // Columns are the camera axes expressed in world coordinates:
        // up = (0,0,1), right = (sin, -cos, 0), forward = (cos, sin, 0).
        Self {
            cam_to_world: [
                [0.0, s, c, x],
                [0.0, -c, s, y],
                [1.0, 0.0, 0.0, cam_height],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let m = &self.cam_to_world;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidPose);
        }
        // Upper-left 3x3 must be orthonormal within 1e-6.
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for (k, row) in m.iter().take(3).enumerate() {
                    let _ = k;
                    dot += row[i] * row[j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(GeometryError::InvalidPose);
                }
            }
        }
        Ok(())
    }

    /// Camera position in world coordinates.
    pub fn position(&self) -> WorldPoint {
        WorldPoint::new(self.cam_to_world[0][3], self.cam_to_world[1][3], self.cam_to_world[2][3])
    }

    /// Optical-axis direction projected onto the ground plane, normalized.
    /// Returns `None` for a camera looking straight up or down.
    pub fn forward_ground(&self) -> Option<(f64, f64)> {
        let fx = self.cam_to_world[0][2];
        let fy = self.cam_to_world[1][2];
        let n = (fx * fx + fy * fy).sqrt();
        if n < 1e-9 {
            None
        } else {
            Some((fx / n, fy / n))
        }
    }

    pub fn transform(&self, p: CameraPoint) -> WorldPoint {
        let m = &self.cam_to_world;
        WorldPoint::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z + m[0][3],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z + m[1][3],
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z + m[2][3],
        )
    }

    /// Inverse transform, valid because the rotation block is orthonormal.
    pub fn inverse_transform(&self, w: WorldPoint) -> CameraPoint {
        let m = &self.cam_to_world;
        let (dx, dy, dz) = (w.x - m[0][3], w.y - m[1][3], w.z - m[2][3]);
        CameraPoint {
            x: m[0][0] * dx + m[1][0] * dy + m[2][0] * dz,
            y: m[0][1] * dx + m[1][1] * dy + m[2][1] * dz,
            z: m[0][2] * dx + m[1][2] * dy + m[2][2] * dz,
        }
    }
}

/// Back-projects an image detection center at depth `d` into the camera frame.
///
/// x = -(d * (v0 - H/2)) / f, y = (d * (u0 - W/2)) / f, z = d.
pub fn pixel_to_camera(
    u0: f64,
    v0: f64,
    d: f64,
    intr: &CameraIntrinsics,
) -> Result<CameraPoint, GeometryError> {
    if d <= 0.0 {
        return Err(GeometryError::InvalidDepth(d));
    }
    let f = intr.focal_px;
    Ok(CameraPoint {
        x: -(d * (v0 - 0.5 * intr.image_height_px as f64)) / f,
        y: (d * (u0 - 0.5 * intr.image_width_px as f64)) / f,
        z: d,
    })
}

/// Applies the camera-to-world transform to a camera-frame point.
pub fn camera_to_world(p: CameraPoint, pose: &Pose) -> WorldPoint {
    pose.transform(p)
}

/// Projects a world point into pixel coordinates plus depth. `None` when the
/// point is at or behind the camera plane.
pub fn world_to_pixel(w: WorldPoint, pose: &Pose, intr: &CameraIntrinsics) -> Option<(f64, f64, f64)> {
    let c = pose.inverse_transform(w);
    if c.z <= 0.0 {
        return None;
    }
    let u0 = 0.5 * intr.image_width_px as f64 + intr.focal_px * c.y / c.z;
    let v0 = 0.5 * intr.image_height_px as f64 - intr.focal_px * c.x / c.z;
    Some((u0, v0, c.z))
}

/// Axis-aligned detection box in pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct PixelBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl PixelBox {
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))
    }
}

/// Depth image in meters; 0 marks a missing return.
#[derive(Debug, Clone)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    depths: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, depths: vec![0.0; width * height] }
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        assert!(depth >= 0.0);
        Self { width, height, depths: vec![depth; width * height] }
    }

    pub fn set(&mut self, u: usize, v: usize, depth: f64) {
        assert!(depth >= 0.0, "depth entries must be >= 0");
        self.depths[v * self.width + u] = depth;
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.depths[v * self.width + u]
    }
}

const SQUARE_HALF: i64 = 2; // 5x5 squares
const SQUARE_OFFSET: i64 = 5;

/// Trimmed-mean object depth from 5x5 squares near the box center.
///
/// Samples the center square plus four neighbors offset by 5 px, averages
/// the valid (positive) returns of each square, drops the single largest
/// and single smallest square average, and returns the mean of the rest.
pub fn robust_depth(depth: &DepthImage, bx: &PixelBox) -> Result<f64, GeometryError> {
    let u_lo = bx.u_min.max(0.0);
    let v_lo = bx.v_min.max(0.0);
    let u_hi = bx.u_max.min(depth.width as f64);
    let v_hi = bx.v_max.min(depth.height as f64);
    if u_hi - u_lo < 5.0 || v_hi - v_lo < 5.0 {
        return Err(GeometryError::DegenerateBox);
    }
    let (cu, cv) = (0.5 * (u_lo + u_hi), 0.5 * (v_lo + v_hi));
    let offsets: [(i64, i64); 5] =
        [(0, 0), (-SQUARE_OFFSET, 0), (SQUARE_OFFSET, 0), (0, -SQUARE_OFFSET), (0, SQUARE_OFFSET)];

    let mut square_means: Vec<f64> = Vec::with_capacity(offsets.len());
    for (du, dv) in offsets {
        // Clamp the square center so the full 5x5 window stays in the image.
        let su = (cu as i64 + du).clamp(SQUARE_HALF, depth.width as i64 - SQUARE_HALF - 1);
        let sv = (cv as i64 + dv).clamp(SQUARE_HALF, depth.height as i64 - SQUARE_HALF - 1);
        let mut sum = 0.0;
        let mut n = 0u32;
        for v in (sv - SQUARE_HALF)..=(sv + SQUARE_HALF) {
            for u in (su - SQUARE_HALF)..=(su + SQUARE_HALF) {
                let d = depth.get(u as usize, v as usize);
                if d > 0.0 {
                    sum += d;
                    n += 1;
                }
            }
        }
        if n > 0 {
            square_means.push(sum / n as f64);
        }
    }
    if square_means.is_empty() {
        return Err(GeometryError::NoDepth);
    }
    if square_means.len() >= 3 {
        square_means.sort_by(|a, b| a.total_cmp(b));
        square_means.pop();
        square_means.remove(0);
    }
    Ok(square_means.iter().sum::<f64>() / square_means.len() as f64)
}

/// Geometry of a rasterized coverage grid: shared by all grids that take part
/// in set arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_m: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(origin_x: f64, origin_y: f64, cell_m: f64, width: usize, height: usize) -> Self {
        assert!(cell_m > 0.0);
        Self { origin_x, origin_y, cell_m, width, height }
    }

    /// Square grid centered on the origin spanning `half_extent_m` each way.
    pub fn centered(half_extent_m: f64, cell_m: f64) -> Self {
        let n = (2.0 * half_extent_m / cell_m).ceil() as usize;
        Self::new(-half_extent_m, -half_extent_m, cell_m, n, n)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin_x + (ix as f64 + 0.5) * self.cell_m,
            self.origin_y + (iy as f64 + 0.5) * self.cell_m,
        )
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let ix = ((x - self.origin_x) / self.cell_m).floor();
        let iy = ((y - self.origin_y) / self.cell_m).floor();
        if ix < 0.0 || iy < 0.0 || ix >= self.width as f64 || iy >= self.height as f64 {
            None
        } else {
            Some((ix as usize, iy as usize))
        }
    }
}

/// Occupancy bitmap over a [`GridSpec`] representing a sensing footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageGrid {
    spec: GridSpec,
    words: Vec<u64>,
}

impl CoverageGrid {
    pub fn empty(spec: GridSpec) -> Self {
        let bits = spec.width * spec.height;
        Self { spec, words: vec![0; bits.div_ceil(64)] }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    fn bit(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.spec.width && iy < self.spec.height);
        iy * self.spec.width + ix
    }

    pub fn set(&mut self, ix: usize, iy: usize) {
        let b = self.bit(ix, iy);
        self.words[b / 64] |= 1 << (b % 64);
    }

    pub fn clear(&mut self, ix: usize, iy: usize) {
        let b = self.bit(ix, iy);
        self.words[b / 64] &= !(1 << (b % 64));
    }

    pub fn get(&self, ix: usize, iy: usize) -> bool {
        let b = self.bit(ix, iy);
        self.words[b / 64] & (1 << (b % 64)) != 0
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.spec.cell_of(x, y).is_some_and(|(ix, iy)| self.get(ix, iy))
    }

    pub fn cell_count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn check_compatible(&self, other: &CoverageGrid) -> Result<(), GeometryError> {
        if self.spec != other.spec {
            return Err(GeometryError::IncompatibleGrids);
        }
        Ok(())
    }

    pub fn union(&self, other: &CoverageGrid) -> Result<CoverageGrid, GeometryError> {
        self.check_compatible(other)?;
        let words = self.words.iter().zip(&other.words).map(|(a, b)| a | b).collect();
        Ok(CoverageGrid { spec: self.spec, words })
    }

    pub fn union_with(&mut self, other: &CoverageGrid) -> Result<(), GeometryError> {
        self.check_compatible(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn intersection(&self, other: &CoverageGrid) -> Result<CoverageGrid, GeometryError> {
        self.check_compatible(other)?;
        let words = self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect();
        Ok(CoverageGrid { spec: self.spec, words })
    }
}

/// Area covered by a grid, in square meters.
pub fn grid_area(grid: &CoverageGrid) -> f64 {
    grid.cell_count() as f64 * grid.spec.cell_m * grid.spec.cell_m
}

pub fn grid_union(a: &CoverageGrid, b: &CoverageGrid) -> Result<CoverageGrid, GeometryError> {
    a.union(b)
}

pub fn grid_intersection(a: &CoverageGrid, b: &CoverageGrid) -> Result<CoverageGrid, GeometryError> {
    a.intersection(b)
}

/// Vertical-cylinder obstacle used for shadow casting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Occluder {
    pub base: WorldPoint,
    pub height_m: f64,
    pub radius_m: f64,
}

#[derive(Debug, Clone, Copy)]
struct Shadow {
    dir: (f64, f64),
    cos_half: f64,
    dist: f64,
}

/// Ground-plane visibility predicate for one camera: the sensing sector with
/// occluder shadows removed. `vehicle_coverage` rasterizes this; observation
/// generation evaluates it directly so the two stay consistent.
#[derive(Debug, Clone)]
pub struct SensorFootprint {
    apex: (f64, f64),
    forward: Option<(f64, f64)>,
    cos_half_fov: f64,
    range: f64,
    shadows: Vec<Shadow>,
}

impl SensorFootprint {
    pub fn new(pose: &Pose, intr: &CameraIntrinsics, occluders: &[Occluder]) -> Self {
        let pos = pose.position();
        let apex = (pos.x, pos.y);
        let forward = pose.forward_ground();
        let cos_half_fov = (intr.fov_deg.to_radians() / 2.0).cos();
        let range = intr.max_range_m;

        let mut shadows = Vec::new();
        if forward.is_some() {
            for occ in occluders {
                // Only obstacles reaching camera height cast a shadow: the
                // cylinder top must have x >= 0 in the camera frame.
                let top =
                    WorldPoint::new(occ.base.x, occ.base.y, occ.base.z + occ.height_m);
                if pose.inverse_transform(top).x < 0.0 {
                    continue;
                }
                let (dx, dy) = (occ.base.x - apex.0, occ.base.y - apex.1);
                let dist = (dx * dx + dy * dy).sqrt();
                if dist < 1e-9 || dist >= range {
                    continue;
                }
                let half = (occ.radius_m / dist).min(1.0).asin();
                shadows.push(Shadow {
                    dir: (dx / dist, dy / dist),
                    cos_half: half.cos(),
                    dist,
                });
            }
        }
        Self { apex, forward, cos_half_fov, range, shadows }
    }

    /// True when the ground point (x, y) is inside the sector and not in any
    /// occluder's shadow.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        let Some(fwd) = self.forward else { return false };
        let (dx, dy) = (x - self.apex.0, y - self.apex.1);
        let dist = (dx * dx + dy * dy).sqrt();
        if dist > self.range {
            return false;
        }
        if dist < 1e-9 {
            return true;
        }
        let (ux, uy) = (dx / dist, dy / dist);
        if ux * fwd.0 + uy * fwd.1 < self.cos_half_fov {
            return false;
        }
        // Shadowed iff strictly behind the occluder within its angular span.
        for s in &self.shadows {
            if dist > s.dist && ux * s.dir.0 + uy * s.dir.1 >= s.cos_half {
                return false;
            }
        }
        true
    }
}

/// Rasterizes a vehicle's sensing footprint onto `spec`: the horizontal
/// sector with apex at the camera ground position, half-angle fov/2 and
/// radius `max_range_m`, minus occluder shadows.
pub fn vehicle_coverage(
    pose: &Pose,
    intr: &CameraIntrinsics,
    occluders: &[Occluder],
    spec: GridSpec,
) -> CoverageGrid {
    let footprint = SensorFootprint::new(pose, intr, occluders);
    let mut grid = CoverageGrid::empty(spec);

    // Restrict the scan to the cells that can intersect the sensing disc.
    let pos = pose.position();
    let r = intr.max_range_m + spec.cell_m;
    let ix0 = (((pos.x - r) - spec.origin_x) / spec.cell_m).floor().max(0.0) as usize;
    let iy0 = (((pos.y - r) - spec.origin_y) / spec.cell_m).floor().max(0.0) as usize;
    let ix1 = ((((pos.x + r) - spec.origin_x) / spec.cell_m).ceil() as usize).min(spec.width);
    let iy1 = ((((pos.y + r) - spec.origin_y) / spec.cell_m).ceil() as usize).min(spec.height);

    for iy in iy0..iy1 {
        for ix in ix0..ix1 {
            let (cx, cy) = spec.cell_center(ix, iy);
            if footprint.covers(cx, cy) {
                grid.set(ix, iy);
            }
        }
    }
    grid
}
