//! Slice acquisition operator: rigid warp, Gaussian PSF blur and sampling at
//! slice voxel centers, stored as a sparse matrix so the adjoint is exact.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{trilinear_stencil, ImageGrid, RigidTransform3D, Volume3};

/// σ = FWHM / (2·√(2 ln 2)).
pub const FWHM_TO_SIGMA: f64 = 1.0 / 2.354_820_045_030_949;

/// Anisotropic Gaussian point spread function, axes aligned with the slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psf {
    /// mm, along both in-plane axes
    pub sigma_inplane: f64,
    /// mm, along the slice normal
    pub sigma_through: f64,
}

impl Psf {
    /// In-plane FWHM of 1.2× the in-plane spacing, through-plane FWHM equal
    /// to the slice thickness.
    pub fn for_spacing(spacing: [f64; 3]) -> Psf {
        let inplane = 0.5 * (spacing[0] + spacing[1]);
        Psf {
            sigma_inplane: 1.2 * inplane * FWHM_TO_SIGMA,
            sigma_through: spacing[2] * FWHM_TO_SIGMA,
        }
    }

    pub fn scaled(self, factor: f64) -> Psf {
        Psf {
            sigma_inplane: self.sigma_inplane * factor,
            sigma_through: self.sigma_through * factor,
        }
    }

    pub fn sigmas(&self) -> [f64; 3] {
        [self.sigma_inplane, self.sigma_inplane, self.sigma_through]
    }
}

// Three-point Gauss–Hermite rule for a unit Gaussian: exact for
// polynomials up to degree five.
pub(crate) const GH_NODES: [f64; 3] = [-1.732_050_807_568_877_2, 0.0, 1.732_050_807_568_877_2];
pub(crate) const GH_WEIGHTS: [f64; 3] = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMatrix {
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len().saturating_sub(1)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    #[inline]
    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.cols[a..b]
            .iter()
            .zip(&self.vals[a..b])
            .map(|(&c, &w)| w * x[c as usize])
            .sum()
    }

    /// `out = self · x`, parallel over rows.
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        out.par_iter_mut()
            .enumerate()
            .with_min_len(256)
            .for_each(|(r, o)| *o = self.row_dot(r, x));
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows()];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ · y` by scattering; sequential.
    pub fn transpose_mul_add(&self, y: &[f64], out: &mut [f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.cols[k] as usize] += self.vals[k] * yr;
            }
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.n_cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut cols = vec![0u32; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        for r in 0..self.n_rows() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k] as usize;
                let dst = next[c];
                cols[dst] = r as u32;
                vals[dst] = self.vals[k];
                next[c] += 1;
            }
        }
        SparseMatrix {
            n_cols: self.n_rows(),
            row_ptr,
            cols,
            vals,
        }
    }

    /// Stack row blocks that share a column space.
    pub fn vstack(blocks: &[&SparseMatrix]) -> SparseMatrix {
        let n_cols = blocks.first().map_or(0, |b| b.n_cols);
        let mut out = SparseMatrix {
            n_cols,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        };
        for b in blocks {
            debug_assert_eq!(b.n_cols, n_cols);
            let base = out.cols.len();
            out.cols.extend_from_slice(&b.cols);
            out.vals.extend_from_slice(&b.vals);
            out.row_ptr.extend(b.row_ptr[1..].iter().map(|p| p + base));
        }
        out
    }
}

/// Linear map from a volume on `hr_grid` to one slice.
///
/// `transform` follows the registration convention (reference space →
/// acquisition space): slice pixel `q` observes the volume around
/// `transform⁻¹(q)`.
#[derive(Debug, Clone)]
pub struct ForwardOperator {
    slice_grid: ImageGrid,
    transform: RigidTransform3D,
    psf: Psf,
    hr_grid: ImageGrid,
    matrix: SparseMatrix,
}

impl ForwardOperator {
    pub fn new(
        slice_grid: ImageGrid,
        transform: RigidTransform3D,
        psf: Psf,
        hr_grid: ImageGrid,
    ) -> Self {
        let matrix = assemble(&slice_grid, &transform, &psf, &hr_grid);
        ForwardOperator {
            slice_grid,
            transform,
            psf,
            hr_grid,
            matrix,
        }
    }

    pub fn slice_grid(&self) -> &ImageGrid {
        &self.slice_grid
    }

    pub fn hr_grid(&self) -> &ImageGrid {
        &self.hr_grid
    }

    pub fn transform(&self) -> &RigidTransform3D {
        &self.transform
    }

    pub fn psf(&self) -> Psf {
        self.psf
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> SparseMatrix {
        self.matrix
    }

    pub fn apply(&self, hr: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(hr)
    }

    pub fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.hr_grid.len()];
        self.matrix.transpose_mul_add(y, &mut out);
        out
    }
}

fn assemble(
    slice_grid: &ImageGrid,
    transform: &RigidTransform3D,
    psf: &Psf,
    hr_grid: &ImageGrid,
) -> SparseMatrix {
    let (r_inv, d_inv) = transform.inverse().affine();
    let sig = psf.sigmas();
    // node offsets along the slice axes, in world coordinates
    let dir = slice_grid.direction();
    let mut nodes = Vec::with_capacity(27);
    for (a, wa) in GH_NODES.iter().zip(GH_WEIGHTS) {
        for (b, wb) in GH_NODES.iter().zip(GH_WEIGHTS) {
            for (c, wc) in GH_NODES.iter().zip(GH_WEIGHTS) {
                let local = nalgebra::Vector3::new(a * sig[0], b * sig[1], c * sig[2]);
                nodes.push((dir * local, wa * wb * wc));
            }
        }
    }
    let dims = hr_grid.dims();
    let n_rows = slice_grid.len();
    let per_row: Vec<Vec<(u32, f64)>> = (0..n_rows)
        .into_par_iter()
        .with_min_len(64)
        .map(|i| {
            let q = slice_grid.voxel_center(i);
            let mut raw = Vec::with_capacity(27 * 8);
            for (off, w) in &nodes {
                let p = r_inv * (q + off) + d_inv;
                trilinear_stencil(dims, hr_grid.world_to_voxel(&p), *w, &mut raw);
            }
            raw.sort_unstable_by_key(|e| e.0);
            let mut merged: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
            for (c, w) in raw {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += w,
                    _ => merged.push((c, w)),
                }
            }
            merged
        })
        .collect();
    let mut m = SparseMatrix {
        n_cols: hr_grid.len(),
        row_ptr: Vec::with_capacity(n_rows + 1),
        cols: Vec::new(),
        vals: Vec::new(),
    };
    m.row_ptr.push(0);
    for row in per_row {
        for (c, w) in row {
            m.cols.push(c);
            m.vals.push(w);
        }
        m.row_ptr.push(m.cols.len());
    }
    m
}

/// Simulated slice values `A · hr`.
pub fn forward(op: &ForwardOperator, hr: &Volume3) -> Vec<f64> {
    op.apply(hr.data())
}

/// `Aᵀ · slice_data` as a volume on the operator's high-resolution grid.
pub fn adjoint(op: &ForwardOperator, slice_data: &[f64]) -> Volume3 {
    Volume3::new(op.hr_grid.clone(), op.apply_adjoint(slice_data))
        .expect("adjoint output matches grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn grid(dims: [usize; 3], spacing: [f64; 3]) -> ImageGrid {
        ImageGrid::centered_at(dims, spacing, [0.0; 3]).unwrap()
    }

    #[test]
    fn constant_volume_gives_constant_slice() {
        let hr = grid([16, 16, 12], [1.0; 3]);
        let lr = grid([8, 8, 4], [1.736, 1.736, 3.0]);
        let t = RigidTransform3D::new([2.0, -1.0, 3.0], [0.5, 0.2, -0.3]).with_center(lr.center());
        let op = ForwardOperator::new(lr.slice_grid(2), t, Psf::for_spacing(lr.spacing()), hr.clone());
        let y = forward(&op, &Volume3::filled(hr, 0.7));
        for yy in 2..6 {
            for xx in 2..6 {
                assert!((y[xx + 8 * yy] - 0.7).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn impulse_response_is_separable_gaussian_quadrature() {
        // identity geometry: slice pixels coincide with hr voxel centers
        let g = grid([9, 9, 5], [1.0, 1.0, 2.0]);
        let psf = Psf { sigma_inplane: 0.6, sigma_through: 0.9 };
        let op = ForwardOperator::new(g.slice_grid(2), RigidTransform3D::identity(), psf, g.clone());
        let mut hr = Volume3::zeros(g.clone());
        let centre = g.index(4, 4, 2);
        hr.data_mut()[centre] = 1.0;
        let y = forward(&op, &hr);
        // oracle: per-axis sums of node weight × linear hat, multiplied
        let axis = |d: f64, sigma: f64, h: f64| -> f64 {
            GH_NODES
                .iter()
                .zip(GH_WEIGHTS)
                .map(|(n, w)| w * (1.0 - ((d + n * sigma) / h).abs()).max(0.0))
                .sum()
        };
        let mut total = 0.0;
        for yy in 0..9 {
            for xx in 0..9 {
                let expected = axis(xx as f64 - 4.0, 0.6, 1.0)
                    * axis(yy as f64 - 4.0, 0.6, 1.0)
                    * axis(0.0, 0.9, 2.0);
                let got = y[xx + 9 * yy];
                assert!((got - expected).abs() < 1e-12, "{xx},{yy}: {got} vs {expected}");
                total += got;
            }
        }
        assert!(total <= 1.0 + 1e-12);
    }

    #[test]
    fn narrow_psf_is_trilinear_reslice() {
        let hr = grid([10, 10, 10], [1.0; 3]);
        let lr = grid([6, 6, 3], [1.5, 1.5, 3.0]);
        let v = Volume3::from_world_fn(hr.clone(), |p| (0.3 * p[0]).sin() + 0.1 * p[1] * p[2]);
        let psf = Psf { sigma_inplane: 0.01, sigma_through: 0.01 };
        for z in 0..3 {
            let sg = lr.slice_grid(z);
            let op = ForwardOperator::new(sg.clone(), RigidTransform3D::identity(), psf, hr.clone());
            let y = forward(&op, &v);
            let direct = crate::grid::resample(&v, &sg, &RigidTransform3D::identity());
            for (a, b) in y.iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn adjoint_of_zero_is_zero() {
        let g = grid([6, 6, 4], [1.0; 3]);
        let op = ForwardOperator::new(g.slice_grid(1), RigidTransform3D::identity(), Psf::for_spacing([1.0; 3]), g);
        assert!(adjoint(&op, &vec![0.0; 36]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_matches_dense_transpose() {
        let g = grid([6, 6, 4], [1.0, 1.0, 2.0]);
        let t = RigidTransform3D::new([3.0, 2.0, -4.0], [0.3, -0.2, 0.1]).with_center(g.center());
        let op = ForwardOperator::new(g.slice_grid(1), t, Psf::for_spacing(g.spacing()), g.clone());
        let n = g.len();
        // dense forward matrix, one impulse column at a time
        let mut dense = vec![vec![0.0; n]; 36];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = op.apply(&e);
            for (i, v) in col.into_iter().enumerate() {
                dense[i][j] = v;
            }
        }
        for i in [0usize, 7, 14, 21, 35] {
            let mut e = vec![0.0; 36];
            e[i] = 1.0;
            let back = op.apply_adjoint(&e);
            for j in 0..n {
                assert!((back[j] - dense[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn adjoint_identity_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let hr = grid([20, 20, 16], [1.0; 3]);
        let lr = grid([12, 12, 6], [1.736, 1.736, 3.0]);
        for _ in 0..10 {
            let t = RigidTransform3D::new(
                [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)],
                [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            )
            .with_center(lr.center());
            let op = ForwardOperator::new(lr.slice_grid(rng.random_range(0..6)), t, Psf::for_spacing(lr.spacing()), hr.clone());
            let x: Vec<f64> = (0..hr.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..144).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ax = op.apply(&x);
            let aty = op.apply_adjoint(&y);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            let scale = ax.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((lhs - rhs).abs() / scale < 1e-10);
        }
    }

    #[test]
    fn transpose_and_vstack() {
        let g = grid([5, 5, 3], [1.0; 3]);
        let psf = Psf::for_spacing([1.0; 3]);
        let a = ForwardOperator::new(g.slice_grid(0), RigidTransform3D::identity(), psf, g.clone()).into_matrix();
        let b = ForwardOperator::new(g.slice_grid(2), RigidTransform3D::identity(), psf, g.clone()).into_matrix();
        let s = SparseMatrix::vstack(&[&a, &b]);
        assert_eq!(s.n_rows(), 50);
        let st = s.transpose();
        let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut scatter = vec![0.0; g.len()];
        s.transpose_mul_add(&y, &mut scatter);
        let gather = st.mul_vec(&y);
        for (p, q) in scatter.iter().zip(&gather) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
