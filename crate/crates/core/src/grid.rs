//! Physical-space geometry: image grids, rigid transforms, scalar volumes and
//! trilinear resampling.
//!
//! Voxel data is stored flat with x varying fastest:
//! `index = x + nx * (y + ny * z)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling grid of a volume in world (mm) coordinates.
///
/// A voxel with continuous index `i` sits at `origin + direction * (spacing ∘ i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    direction: Matrix3<f64>,
}

impl ImageGrid {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: Matrix3<f64>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        let gram = direction.transpose() * direction - Matrix3::identity();
        if gram.amax() >= 1e-9 {
            return Err(Error::InvalidGrid(format!(
                "direction matrix is not orthonormal (max |DᵀD - I| = {:e})",
                gram.amax()
            )));
        }
        Ok(ImageGrid {
            dims,
            spacing,
            origin,
            direction,
        })
    }

    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, origin, Matrix3::identity())
    }

    /// Axis-aligned grid whose geometric center sits at `center`.
    pub fn centered_at(dims: [usize; 3], spacing: [f64; 3], center: [f64; 3]) -> Result<Self> {
        let origin = [
            center[0] - 0.5 * (dims[0].max(1) - 1) as f64 * spacing[0],
            center[1] - 0.5 * (dims[1].max(1) - 1) as f64 * spacing[1],
            center[2] - 0.5 * (dims[2].max(1) - 1) as f64 * spacing[2],
        ];
        Self::axis_aligned(dims, spacing, origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn direction(&self) -> &Matrix3<f64> {
        &self.direction
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// World position of a (possibly fractional) voxel index.
    #[inline]
    pub fn voxel_to_world(&self, ci: [f64; 3]) -> Vector3<f64> {
        let scaled = Vector3::new(
            ci[0] * self.spacing[0],
            ci[1] * self.spacing[1],
            ci[2] * self.spacing[2],
        );
        Vector3::from(self.origin) + self.direction * scaled
    }

    #[inline]
    pub fn world_to_voxel(&self, p: &Vector3<f64>) -> [f64; 3] {
        let local = self.direction.transpose() * (p - Vector3::from(self.origin));
        [
            local[0] / self.spacing[0],
            local[1] / self.spacing[1],
            local[2] / self.spacing[2],
        ]
    }

    pub fn voxel_center(&self, index: usize) -> Vector3<f64> {
        let [x, y, z] = self.coords(index);
        self.voxel_to_world([x as f64, y as f64, z as f64])
    }

    /// Geometric center of the voxel lattice in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.voxel_to_world([
            0.5 * (self.dims[0] - 1) as f64,
            0.5 * (self.dims[1] - 1) as f64,
            0.5 * (self.dims[2] - 1) as f64,
        ])
    }

    /// Physical size covered by the voxels (dims × spacing) per axis.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Single-slice grid (dims_z = 1) sharing this grid's in-plane geometry.
    pub fn slice_grid(&self, z: usize) -> ImageGrid {
        let origin = self.voxel_to_world([0.0, 0.0, z as f64]);
        ImageGrid {
            dims: [self.dims[0], self.dims[1], 1],
            spacing: self.spacing,
            origin: [origin[0], origin[1], origin[2]],
            direction: self.direction,
        }
    }

    /// Grid with the same orientation and center, voxel size multiplied by
    /// `factor` and dims shrunk accordingly (at least one voxel per axis).
    pub fn coarsened(&self, factor: usize) -> ImageGrid {
        let f = factor.max(1);
        let dims = [
            self.dims[0].div_ceil(f),
            self.dims[1].div_ceil(f),
            self.dims[2].div_ceil(f),
        ];
        let spacing = [
            self.spacing[0] * f as f64,
            self.spacing[1] * f as f64,
            self.spacing[2] * f as f64,
        ];
        // first coarse voxel is centered on the first f×f×f block
        let half = 0.5 * (f as f64 - 1.0);
        let origin = self.voxel_to_world([half, half, half]);
        ImageGrid {
            dims,
            spacing,
            origin: [origin[0], origin[1], origin[2]],
            direction: self.direction,
        }
    }

    pub fn approx_eq(&self, other: &ImageGrid, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
            && self
                .origin
                .iter()
                .zip(other.origin.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
            && (self.direction - other.direction).amax() <= tol
    }
}

fn wrap_degrees(a: f64) -> f64 {
    let mut w = a % 360.0;
    if w > 180.0 {
        w -= 360.0;
    } else if w <= -180.0 {
        w += 360.0;
    }
    w
}

/// Rigid motion with Euler angles in degrees and translation in mm.
///
/// The rotation matrix is `R = Rx · Ry · Rz` (intrinsic x→y→z) and acts about
/// `center`: `p ↦ R (p − c) + c + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform3D {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    #[serde(default)]
    pub center: [f64; 3],
}

impl Default for RigidTransform3D {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform3D {
    pub fn identity() -> Self {
        RigidTransform3D {
            rotation: [0.0; 3],
            translation: [0.0; 3],
            center: [0.0; 3],
        }
    }

    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        RigidTransform3D {
            rotation,
            translation,
            center: [0.0; 3],
        }
    }

    /// Six parameters `[rx, ry, rz, tx, ty, tz]`.
    pub fn from_params(p: [f64; 6], center: [f64; 3]) -> Self {
        RigidTransform3D {
            rotation: [p[0], p[1], p[2]],
            translation: [p[3], p[4], p[5]],
            center,
        }
    }

    pub fn params(&self) -> [f64; 6] {
        [
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    pub fn with_center(mut self, center: Vector3<f64>) -> Self {
        self.center = [center[0], center[1], center[2]];
        self
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.params().iter().all(|p| p.abs() <= tol)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [rx, ry, rz] = self.rotation.map(f64::to_radians);
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let mx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
        let my = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let mz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
        mx * my * mz
    }

    /// Affine form `p ↦ R p + d`.
    pub fn affine(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.rotation_matrix();
        let c = Vector3::from(self.center);
        let d = c - r * c + Vector3::from(self.translation);
        (r, d)
    }

    /// Rebuild parameters about `center` from an affine rigid map.
    pub fn from_affine(r: &Matrix3<f64>, d: &Vector3<f64>, center: [f64; 3]) -> Self {
        let rotation = euler_from_matrix(r);
        let c = Vector3::from(center);
        let t = d - (c - r * c);
        RigidTransform3D {
            rotation,
            translation: [t[0], t[1], t[2]],
            center,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (r, d) = self.affine();
        r * p + d
    }

    pub fn inverse(&self) -> Self {
        let (r, d) = self.affine();
        let rt = r.transpose();
        Self::from_affine(&rt, &(-(rt * d)), self.center)
    }

    /// Parameters with every angle wrapped into (−180°, 180°].
    pub fn wrapped(&self) -> Self {
        let mut out = *self;
        out.rotation = self.rotation.map(wrap_degrees);
        out
    }
}

/// Euler angles (degrees) of `R = Rx · Ry · Rz`.
pub fn euler_from_matrix(r: &Matrix3<f64>) -> [f64; 3] {
    let sy = r[(0, 2)].clamp(-1.0, 1.0);
    let ry = sy.asin();
    let (rx, rz) = if sy.abs() < 1.0 - 1e-12 {
        ((-r[(1, 2)]).atan2(r[(2, 2)]), (-r[(0, 1)]).atan2(r[(0, 0)]))
    } else {
        // gimbal lock: only rx ± rz is defined, put it all on rx
        (r[(2, 1)].atan2(r[(1, 1)]), 0.0)
    };
    [rx.to_degrees(), ry.to_degrees(), rz.to_degrees()]
}

/// Transform equivalent to applying `b` first, then `a`. The result is
/// expressed about `a`'s center.
pub fn compose(a: &RigidTransform3D, b: &RigidTransform3D) -> RigidTransform3D {
    let (ra, da) = a.affine();
    let (rb, db) = b.affine();
    RigidTransform3D::from_affine(&(ra * rb), &(ra * db + da), a.center)
}

/// Component-wise mean absolute parameter error `[rx, ry, rz, tx, ty, tz]`.
/// Angle differences are wrapped into (−180°, 180°].
pub fn transform_mae(
    estimated: &[RigidTransform3D],
    truth: &[RigidTransform3D],
) -> Result<[f64; 6]> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: estimated.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("transform lists are empty".into()));
    }
    let mut acc = [0.0; 6];
    for (e, t) in estimated.iter().zip(truth) {
        let (pe, pt) = (e.params(), t.params());
        for k in 0..6 {
            let diff = pe[k] - pt[k];
            acc[k] += if k < 3 { wrap_degrees(diff).abs() } else { diff.abs() };
        }
    }
    let n = truth.len() as f64;
    Ok(acc.map(|a| a / n))
}

/// Scalar field on an [`ImageGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    grid: ImageGrid,
    data: Vec<f64>,
}

impl Volume3 {
    pub fn new(grid: ImageGrid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Volume3 { grid, data })
    }

    pub fn zeros(grid: ImageGrid) -> Self {
        let n = grid.len();
        Volume3 {
            grid,
            data: vec![0.0; n],
        }
    }

    pub fn filled(grid: ImageGrid, value: f64) -> Self {
        let n = grid.len();
        Volume3 {
            grid,
            data: vec![value; n],
        }
    }

    /// Evaluate `f` at every voxel center (world coordinates).
    pub fn from_world_fn(grid: ImageGrid, f: impl Fn(&Vector3<f64>) -> f64) -> Self {
        let data = (0..grid.len()).map(|i| f(&grid.voxel_center(i))).collect();
        Volume3 { grid, data }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Trilinear interpolation at a continuous voxel index; 0 outside
    /// `[0, n−1]` on any axis.
    #[inline]
    pub fn interpolate_index(&self, ci: [f64; 3]) -> f64 {
        trilinear(&self.data, self.grid.dims, ci)
    }

    #[inline]
    pub fn sample_world(&self, p: &Vector3<f64>) -> f64 {
        self.interpolate_index(self.grid.world_to_voxel(p))
    }

    /// Voxels with value > 0.5.
    pub fn mask_bits(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v > 0.5).collect()
    }
}

const DOMAIN_EPS: f64 = 1e-9;

/// Per-axis base index and fractional weight for trilinear sampling, or
/// `None` when the coordinate is outside `[0, n−1]`.
#[inline]
pub(crate) fn axis_weights(c: f64, n: usize) -> Option<(usize, f64)> {
    let hi = (n - 1) as f64;
    if c < -DOMAIN_EPS || c > hi + DOMAIN_EPS || c.is_nan() {
        return None;
    }
    if n == 1 {
        return Some((0, 0.0));
    }
    let c = c.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    Some((i0, c - i0 as f64))
}

#[inline]
pub(crate) fn trilinear(data: &[f64], dims: [usize; 3], ci: [f64; 3]) -> f64 {
    let Some((x0, fx)) = axis_weights(ci[0], dims[0]) else {
        return 0.0;
    };
    let Some((y0, fy)) = axis_weights(ci[1], dims[1]) else {
        return 0.0;
    };
    let Some((z0, fz)) = axis_weights(ci[2], dims[2]) else {
        return 0.0;
    };
    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let x1 = (x0 + 1).min(dims[0] - 1);
    let y1 = (y0 + 1).min(dims[1] - 1);
    let z1 = (z0 + 1).min(dims[2] - 1);
    let at = |x: usize, y: usize, z: usize| data[x + nx * y + nxy * z];
    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Trilinear stencil: up to 8 `(index, weight)` pairs, appended to `out`
/// scaled by `scale`. Nothing is appended outside the domain.
#[inline]
pub(crate) fn trilinear_stencil(
    dims: [usize; 3],
    ci: [f64; 3],
    scale: f64,
    out: &mut Vec<(u32, f64)>,
) {
    let Some((x0, fx)) = axis_weights(ci[0], dims[0]) else {
        return;
    };
    let Some((y0, fy)) = axis_weights(ci[1], dims[1]) else {
        return;
    };
    let Some((z0, fz)) = axis_weights(ci[2], dims[2]) else {
        return;
    };
    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let xs = [(x0, 1.0 - fx), ((x0 + 1).min(dims[0] - 1), fx)];
    let ys = [(y0, 1.0 - fy), ((y0 + 1).min(dims[1] - 1), fy)];
    let zs = [(z0, 1.0 - fz), ((z0 + 1).min(dims[2] - 1), fz)];
    for &(z, wz) in &zs {
        for &(y, wy) in &ys {
            for &(x, wx) in &xs {
                let w = wx * wy * wz * scale;
                if w != 0.0 {
                    out.push(((x + nx * y + nxy * z) as u32, w));
                }
            }
        }
    }
}

/// Trilinear resampling of `src` onto `target`: each target voxel center `p`
/// takes the value of `src` at `transform(p)`; samples outside `src` are 0.
pub fn resample(src: &Volume3, target: &ImageGrid, transform: &RigidTransform3D) -> Volume3 {
    let (r, d) = transform.affine();
    let data = (0..target.len())
        .map(|i| {
            let p = target.voxel_center(i);
            src.sample_world(&(r * p + d))
        })
        .collect();
    Volume3 {
        grid: target.clone(),
        data,
    }
}

/// Ordered frames sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4 {
    frames: Vec<Volume3>,
}

impl Volume4 {
    pub fn new(frames: Vec<Volume3>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidArgument("a 4D series needs at least one frame".into()));
        };
        let grid = first.grid.clone();
        if let Some(bad) = frames.iter().position(|f| !f.grid.approx_eq(&grid, 1e-9)) {
            return Err(Error::InvalidGrid(format!(
                "frame {bad} does not share the grid of frame 0"
            )));
        }
        Ok(Volume4 { frames })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.frames[0].grid
    }

    pub fn t_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Volume3] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Volume3 {
        &self.frames[t]
    }

    pub fn into_frames(self) -> Vec<Volume3> {
        self.frames
    }

    /// Time course of one voxel.
    pub fn voxel_series(&self, index: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f.data[index]).collect()
    }

    /// Rescale all frames jointly to [0, 1]. A constant series maps to 0.
    pub fn normalized(&self) -> Volume4 {
        let (lo, hi) = self
            .frames
            .iter()
            .flat_map(|f| f.data.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        let frames = self
            .frames
            .iter()
            .map(|f| Volume3 {
                grid: f.grid.clone(),
                data: f
                    .data
                    .iter()
                    .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
                    .collect(),
            })
            .collect();
        Volume4 { frames }
    }
}

/// One acquired slice of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2 {
    pub parent_grid: ImageGrid,
    pub slice_index: usize,
    pub shot_index: usize,
    pub data: Vec<f64>,
    pub transform: RigidTransform3D,
}

impl Slice2 {
    pub fn new(
        parent_grid: ImageGrid,
        slice_index: usize,
        interleave: usize,
        data: Vec<f64>,
        transform: RigidTransform3D,
    ) -> Result<Self> {
        let [nx, ny, nz] = parent_grid.dims();
        if slice_index >= nz {
            return Err(Error::InvalidArgument(format!(
                "slice index {slice_index} outside 0..{nz}"
            )));
        }
        if interleave == 0 {
            return Err(Error::InvalidArgument("interleave must be >= 1".into()));
        }
        if data.len() != nx * ny {
            return Err(Error::LengthMismatch {
                expected: nx * ny,
                found: data.len(),
            });
        }
        Ok(Slice2 {
            parent_grid,
            slice_index,
            shot_index: slice_index % interleave,
            data,
            transform,
        })
    }

    pub fn grid(&self) -> ImageGrid {
        self.parent_grid.slice_grid(self.slice_index)
    }

    /// Split a frame into its slices, all carrying `transform`.
    pub fn from_frame(
        frame: &Volume3,
        interleave: usize,
        transform: &RigidTransform3D,
    ) -> Result<Vec<Slice2>> {
        let [nx, ny, nz] = frame.grid.dims();
        let plane = nx * ny;
        (0..nz)
            .map(|z| {
                Slice2::new(
                    frame.grid.clone(),
                    z,
                    interleave,
                    frame.data[z * plane..(z + 1) * plane].to_vec(),
                    *transform,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rot_z(deg: f64) -> Matrix3<f64> {
        let (s, c) = deg.to_radians().sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert!(ImageGrid::axis_aligned([0, 2, 2], [1.0; 3], [0.0; 3]).is_err());
        assert!(ImageGrid::axis_aligned([2, 2, 2], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
        let shear = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(ImageGrid::new([2, 2, 2], [1.0; 3], [0.0; 3], shear).is_err());
    }

    #[test]
    fn world_voxel_round_trip() {
        let g = ImageGrid::new([5, 6, 7], [1.5, 2.0, 3.0], [-3.0, 4.0, 1.0], rot_z(30.0)).unwrap();
        let p = g.voxel_to_world([1.25, 3.5, 6.0]);
        let ci = g.world_to_voxel(&p);
        assert_abs_diff_eq!(ci[0], 1.25, epsilon = 1e-12);
        assert_abs_diff_eq!(ci[1], 3.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ci[2], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn compose_identity() {
        let id = RigidTransform3D::identity();
        assert!(compose(&id, &id).is_identity(1e-12));
    }

    #[test]
    fn compose_translations_add() {
        let a = RigidTransform3D::new([0.0; 3], [1.0, 0.0, 0.0]);
        let b = RigidTransform3D::new([0.0; 3], [2.0, 0.0, 0.0]);
        let c = compose(&a, &b);
        assert_abs_diff_eq!(c.translation[0], 3.0, epsilon = 1e-12);
        assert!(c.rotation.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn compose_quarter_turns_matches_matrix_product() {
        let q = RigidTransform3D::new([0.0, 0.0, 90.0], [0.0; 3]);
        let c = compose(&q, &q);
        let expected = rot_z(90.0) * rot_z(90.0);
        assert!((c.rotation_matrix() - expected).amax() < 1e-12);
        assert_abs_diff_eq!(c.wrapped().rotation[2].abs(), 180.0, epsilon = 1e-9);
    }

    #[test]
    fn rotation_matrix_is_proper() {
        let t = RigidTransform3D::new([12.0, -33.0, 71.0], [0.0; 3]);
        let r = t.rotation_matrix();
        assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn full_turn_is_identity() {
        for axis in 0..3 {
            let mut rot = [0.0; 3];
            rot[axis] = 360.0;
            let t = RigidTransform3D::new(rot, [0.0; 3]);
            assert!(t.wrapped().is_identity(1e-9));
            assert!((t.rotation_matrix() - Matrix3::identity()).amax() < 1e-12);
        }
    }

    #[test]
    fn resample_identity_is_exact() {
        let g = ImageGrid::axis_aligned([5, 4, 3], [1.0, 1.5, 2.0], [1.0, 2.0, 3.0]).unwrap();
        let v = Volume3::from_world_fn(g.clone(), |p| (p[0] * 0.3).sin() + p[1] * p[2]);
        let r = resample(&v, &g, &RigidTransform3D::identity());
        for (a, b) in v.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_constant_stays_constant() {
        let g = ImageGrid::centered_at([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3::filled(g.clone(), 2.5);
        let t = RigidTransform3D::new([3.0, -2.0, 5.0], [0.4, -0.3, 0.2]);
        let r = resample(&v, &g, &t);
        // interior: voxels whose mapped point stays inside the source
        for x in 2..6 {
            for y in 2..6 {
                for z in 2..6 {
                    assert!((r.get(x, y, z) - 2.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resample_ramp_half_voxel_shift() {
        // f(x) = 2x mm; shift by half a voxel along x
        let g = ImageGrid::axis_aligned([4, 4, 4], [1.5, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = Volume3::from_world_fn(g.clone(), |p| 2.0 * p[0]);
        let t = RigidTransform3D::new([0.0; 3], [0.75, 0.0, 0.0]);
        let r = resample(&v, &g, &t);
        for x in 0..3 {
            let expected = 2.0 * (x as f64 * 1.5 + 0.75);
            assert!((r.get(x, 1, 1) - expected).abs() < 1e-12);
        }
        // beyond the last voxel the sample leaves the domain
        assert_eq!(r.get(3, 1, 1), 0.0);
    }

    #[test]
    fn mae_examples() {
        let a = RigidTransform3D::new([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]);
        assert_eq!(transform_mae(&[a], &[a]).unwrap(), [0.0; 6]);
        let mut b = a;
        b.rotation[0] += 2.0;
        let m = transform_mae(&[b], &[a]).unwrap();
        assert_abs_diff_eq!(m[0], 2.0, epsilon = 1e-12);
        assert!(m[1..].iter().all(|&e| e.abs() < 1e-12));
        assert!(transform_mae(&[a, b], &[a]).is_err());
    }

    #[test]
    fn mae_matches_hand_summed_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut draw = || {
            let mut p = [0.0; 6];
            for v in p.iter_mut() {
                *v = rng.random_range(-10.0..10.0);
            }
            RigidTransform3D::from_params(p, [0.0; 3])
        };
        let est: Vec<_> = (0..10).map(|_| draw()).collect();
        let truth: Vec<_> = (0..10).map(|_| draw()).collect();
        let mae = transform_mae(&est, &truth).unwrap();
        for k in 0..6 {
            let mut s = 0.0;
            for i in 0..10 {
                s += (est[i].params()[k] - truth[i].params()[k]).abs();
            }
            assert!((mae[k] - s / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_shot_index_follows_interleave() {
        let g = ImageGrid::axis_aligned([2, 2, 7], [1.0; 3], [0.0; 3]).unwrap();
        let s = Slice2::new(g.clone(), 5, 3, vec![0.0; 4], RigidTransform3D::identity()).unwrap();
        assert_eq!(s.shot_index, 2);
        assert!(Slice2::new(g, 7, 3, vec![0.0; 4], RigidTransform3D::identity()).is_err());
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform3D> {
        (
            prop::array::uniform3(-80.0f64..80.0),
            prop::array::uniform3(-20.0f64..20.0),
            prop::array::uniform3(-5.0f64..5.0),
        )
            .prop_map(|(r, t, c)| RigidTransform3D {
                rotation: r,
                translation: t,
                center: c,
            })
    }

    proptest! {
        #[test]
        fn compose_applies_b_then_a(a in arb_transform(), b in arb_transform(),
                                    p in prop::array::uniform3(-50.0f64..50.0)) {
            let p = Vector3::from(p);
            let lhs = compose(&a, &b).apply(&p);
            let rhs = a.apply(&b.apply(&p));
            prop_assert!((lhs - rhs).amax() < 1e-9);
        }

        #[test]
        fn inverse_composes_to_identity(a in arb_transform()) {
            let id = compose(&a, &a.inverse());
            prop_assert!(id.wrapped().is_identity(1e-9));
            let r = a.rotation_matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn mae_is_symmetric(a in arb_transform(), b in arb_transform()) {
            let ab = transform_mae(&[a], &[b]).unwrap();
            let ba = transform_mae(&[b], &[a]).unwrap();
            for k in 0..6 {
                prop_assert!((ab[k] - ba[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_round_trip_smooth_volume() {
        let g = ImageGrid::centered_at([24, 24, 24], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3::from_world_fn(g.clone(), |p| {
            (-(p[0] * p[0] + 1.3 * p[1] * p[1] + 0.8 * p[2] * p[2]) / 40.0).exp()
        });
        let t = RigidTransform3D::new([4.0, -3.0, 6.0], [0.7, -1.2, 0.5]);
        let there = resample(&v, &g, &t);
        let back = resample(&there, &g, &t.inverse());
        let (mut num, mut den) = (0.0, 0.0);
        for x in 5..19 {
            for y in 5..19 {
                for z in 5..19 {
                    let d = back.get(x, y, z) - v.get(x, y, z);
                    num += d * d;
                    den += v.get(x, y, z).powi(2);
                }
            }
        }
        assert!((num / den).sqrt() < 0.02);
    }

    #[test]
    fn full_turn_resample_matches_identity() {
        let g = ImageGrid::centered_at([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3::from_world_fn(g.clone(), |p| (p[0] * 0.4).cos() * (p[1] * 0.2).sin() + p[2]);
        let t = RigidTransform3D::new([0.0, 360.0, 0.0], [0.0; 3]).with_center(g.center());
        let r = resample(&v, &g, &t);
        for x in 1..9 {
            for y in 1..9 {
                for z in 1..9 {
                    assert!((r.get(x, y, z) - v.get(x, y, z)).abs() < 1e-6);
                }
            }
        }
    }
}
