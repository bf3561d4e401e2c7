//! Rigid volume-to-volume and slice-to-volume registration by normalized
//! cross-correlation, optimized with a deterministic pattern search.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{axis_weights, ImageGrid, RigidTransform3D, Volume3};
use crate::srr::operator::{GH_NODES, GH_WEIGHTS};
use crate::srr::Psf;

pub const MIN_OVERLAP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationSettings {
    /// 1 = full resolution only; each extra level halves the resolution
    pub pyramid_levels: usize,
    /// pattern-search sweeps per level
    pub max_iterations: usize,
    /// final step size, degrees and mm
    pub parameter_tolerance: f64,
    /// first step size, degrees and mm
    pub initial_step: f64,
    /// Gaussian pre-smoothing of both volumes in V2V, in voxels of the
    /// moving grid; 0 disables
    pub smoothing: f64,
}

impl Default for RegistrationSettings {
    fn default() -> Self {
        RegistrationSettings {
            pyramid_levels: 2,
            max_iterations: 100,
            parameter_tolerance: 0.01,
            initial_step: 1.0,
            smoothing: 1.0,
        }
    }
}

impl RegistrationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidArgument("pyramid levels and iterations must be >= 1".into()));
        }
        if !(self.parameter_tolerance > 0.0 && self.initial_step > 0.0 && self.smoothing >= 0.0) {
            return Err(Error::InvalidArgument("registration step sizes must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform3D,
    pub similarity_final: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// similarity after each accepted step; V2V lists every level from coarse
    /// to fine, S2V only the full-resolution pass
    #[serde(skip)]
    pub similarity_history: Vec<f64>,
}

/// Pearson correlation of the paired values where `mask` is set (all pairs
/// when `mask` is `None`).
pub fn ncc(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), found: b.len() });
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::LengthMismatch { expected: a.len(), found: m.len() });
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let mut n = 0usize;
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in (0..a.len()).filter(|&i| keep(i)) {
        n += 1;
        sa += a[i];
        sb += b[i];
    }
    if n < 2 {
        return Err(Error::UndefinedSimilarity(format!("{n} masked samples")));
    }
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in (0..a.len()).filter(|&i| keep(i)) {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 1e-24 * n as f64 || sbb <= 1e-24 * n as f64 {
        return Err(Error::UndefinedSimilarity("zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// [`ncc`] of two volumes on the same grid, inside `mask > 0.5`.
pub fn ncc_volumes(a: &Volume3, b: &Volume3, mask: &Volume3) -> Result<f64> {
    if a.grid().len() != b.grid().len() || a.grid().len() != mask.grid().len() {
        return Err(Error::InvalidGrid("volumes differ in size".into()));
    }
    ncc(a.data(), b.data(), Some(&mask.mask_bits()))
}

/// Correlation against fixed reference samples, with the reference
/// statistics precomputed. Degenerate samples score −1.
struct FixedSamples {
    points: Vec<Vector3<f64>>,
    centered: Vec<f64>,
    norm: f64,
}

impl FixedSamples {
    fn new(points: Vec<Vector3<f64>>, values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
        let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
        FixedSamples { points, centered, norm }
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn score(&self, sample: impl Fn(&Vector3<f64>) -> f64) -> f64 {
        let n = self.points.len() as f64;
        let (mut s, mut ss, mut sr) = (0.0, 0.0, 0.0);
        for (p, r) in self.points.iter().zip(&self.centered) {
            let v = sample(p);
            s += v;
            ss += v * v;
            sr += v * r;
        }
        let var = ss - s * s / n;
        if var <= 1e-24 * n || self.norm == 0.0 {
            return -1.0;
        }
        (sr / (var.sqrt() * self.norm)).clamp(-1.0, 1.0)
    }
}

struct SearchOutcome {
    params: [f64; 6],
    value: f64,
    iterations: usize,
    converged: bool,
}

/// Compass search over (rx, ry, rz, tx, ty, tz). Each sweep visits the
/// axes in that order and takes the first improving direction (+ before −)
/// on each; the step halves after a sweep without improvement. Converged
/// once a sweep with step below `tol / 4` finds nothing.
fn pattern_search(
    f: impl Fn(&[f64; 6]) -> f64,
    start: [f64; 6],
    step0: f64,
    tol: f64,
    max_iterations: usize,
    history: &mut Vec<f64>,
) -> SearchOutcome {
    let mut x = start;
    let mut best = f(&x);
    history.push(best);
    let mut step = step0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        iterations += 1;
        let mut improved = false;
        for axis in 0..6 {
            for sign in [1.0, -1.0] {
                let mut cand = x;
                cand[axis] += sign * step;
                let v = f(&cand);
                if v > best {
                    x = cand;
                    best = v;
                    history.push(best);
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            if step < 0.25 * tol {
                converged = true;
                break;
            }
            step *= 0.5;
        }
    }
    SearchOutcome { params: x, value: best, iterations, converged }
}

/// Block average by `factor` onto [`ImageGrid::coarsened`].
pub fn block_average(v: &Volume3, factor: usize) -> Volume3 {
    if factor <= 1 {
        return v.clone();
    }
    let g = v.grid().coarsened(factor);
    let [nx, ny, nz] = v.grid().dims();
    let [cx, cy, _] = g.dims();
    let mut sum = vec![0.0; g.len()];
    let mut cnt = vec![0usize; g.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = x / factor + cx * (y / factor + cy * (z / factor));
                sum[c] += v.get(x, y, z);
                cnt[c] += 1;
            }
        }
    }
    let data = sum.iter().zip(&cnt).map(|(s, c)| s / *c as f64).collect();
    Volume3::new(g, data).expect("coarse data matches grid")
}

fn masked_points(reference: &Volume3, mask: &Volume3) -> FixedSamples {
    let g = reference.grid();
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for (i, (&r, &m)) in reference.data().iter().zip(mask.data()).enumerate() {
        if m >= 0.5 {
            pts.push(g.voxel_center(i));
            vals.push(r);
        }
    }
    FixedSamples::new(pts, vals)
}

/// The same map expressed about `center`.
pub fn recentered(t: &RigidTransform3D, center: &Vector3<f64>) -> RigidTransform3D {
    let (r, d) = t.affine();
    RigidTransform3D::from_affine(&r, &d, [center[0], center[1], center[2]])
}

/// Rigid transform `T` (about the moving grid center) maximizing the NCC of
/// `moving ∘ T` against `reference` inside `mask`, which lives on the
/// reference grid. `moving(T p) ≈ reference(p)`.
pub fn register_v2v(
    moving: &Volume3,
    reference: &Volume3,
    mask: &Volume3,
    init: &RigidTransform3D,
    settings: &RegistrationSettings,
) -> Result<RegistrationResult> {
    settings.validate()?;
    if mask.grid().dims() != reference.grid().dims() {
        return Err(Error::InvalidGrid("mask must share the reference grid".into()));
    }
    let center = moving.grid().center();
    let start = recentered(init, &center);
    let sigma = moving.grid().spacing().map(|h| h * settings.smoothing);
    let (moving, reference) = if settings.smoothing > 0.0 {
        (&gaussian_blur(moving, sigma), &gaussian_blur(reference, sigma))
    } else {
        (moving, reference)
    };
    let fine = masked_points(reference, mask);
    if fine.len() < MIN_OVERLAP {
        return Err(Error::InsufficientOverlap { voxels: fine.len(), required: MIN_OVERLAP });
    }
    let mut params = start.params();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut outcome = None;
    for level in (0..settings.pyramid_levels).rev() {
        let factor = 1usize << level;
        let (samples, mov) = if factor == 1 {
            (None, None)
        } else {
            let samples = masked_points(&block_average(reference, factor), &block_average(mask, factor));
            if samples.len() < MIN_OVERLAP {
                continue;
            }
            (Some(samples), Some(block_average(moving, factor)))
        };
        let samples = samples.as_ref().unwrap_or(&fine);
        let mov = mov.as_ref().unwrap_or(moving);
        let step = if level + 1 == settings.pyramid_levels {
            settings.initial_step
        } else {
            settings.initial_step * 0.5
        };
        let f = |p: &[f64; 6]| {
            let (r, d) = RigidTransform3D::from_params(*p, [center[0], center[1], center[2]]).affine();
            samples.score(|x| mov.sample_world(&(r * x + d)))
        };
        let o = pattern_search(f, params, step, settings.parameter_tolerance, settings.max_iterations, &mut history);
        params = o.params;
        iterations += o.iterations;
        outcome = Some(o);
    }
    let o = outcome.expect("finest level always runs");
    Ok(RegistrationResult {
        transform: RigidTransform3D::from_params(params, [center[0], center[1], center[2]]),
        similarity_final: o.value,
        iterations_used: iterations,
        converged: o.converged,
        similarity_history: history,
    })
}

/// Separable Gaussian blur along the grid axes; taps outside the volume are
/// dropped and the kernel renormalized.
pub fn gaussian_blur(v: &Volume3, sigma_mm: [f64; 3]) -> Volume3 {
    let g = v.grid();
    let dims = g.dims();
    let sp = g.spacing();
    let mut data = v.data().to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for a in 0..3 {
        let s = sigma_mm[a] / sp[a];
        if s < 1e-3 || dims[a] == 1 {
            continue;
        }
        let r = (3.0 * s).ceil() as isize;
        let kernel: Vec<f64> = (-r..=r).map(|k| (-0.5 * (k as f64 / s).powi(2)).exp()).collect();
        let src = data.clone();
        for (i, out) in data.iter_mut().enumerate() {
            let c = (i / strides[a]) % dims[a];
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, w) in kernel.iter().enumerate() {
                let cc = c as isize + j as isize - r;
                if cc < 0 || cc >= dims[a] as isize {
                    continue;
                }
                let idx = (i as isize + (cc - c as isize) * strides[a] as isize) as usize;
                acc += w * src[idx];
                wsum += w;
            }
            *out = acc / wsum;
        }
    }
    Volume3::new(g.clone(), data).expect("blur keeps grid")
}

/// The PSF quadrature of the acquisition operator applied along the grid
/// axes: each axis pass averages linearly interpolated samples at the
/// quadrature nodes. Matches the slice operator exactly for axis-aligned
/// slices.
pub fn psf_blur(v: &Volume3, psf: &Psf) -> Volume3 {
    let g = v.grid();
    let dims = g.dims();
    let sp = g.spacing();
    let sig = psf.sigmas();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut data = v.data().to_vec();
    for a in 0..3 {
        let src = data.clone();
        let n = dims[a];
        for (i, out) in data.iter_mut().enumerate() {
            let c = (i / strides[a]) % n;
            let base = i - c * strides[a];
            let mut acc = 0.0;
            for (node, w) in GH_NODES.iter().zip(GH_WEIGHTS) {
                let pos = c as f64 + node * sig[a] / sp[a];
                if let Some((i0, f)) = axis_weights(pos, n) {
                    let i1 = (i0 + 1).min(n - 1);
                    acc += w * ((1.0 - f) * src[base + i0 * strides[a]] + f * src[base + i1 * strides[a]]);
                }
            }
            *out = acc;
        }
    }
    Volume3::new(g.clone(), data).expect("blur keeps grid")
}

/// Reference volume pre-blurred by the slice PSF, ready for repeated
/// slice-to-volume registration.
#[derive(Debug, Clone)]
pub struct S2vReference {
    blurred: Volume3,
}

impl S2vReference {
    pub fn new(reference: &Volume3, psf: &Psf) -> Self {
        S2vReference { blurred: psf_blur(reference, psf) }
    }

    pub fn for_frame_grid(reference: &Volume3, frame_grid: &ImageGrid) -> Self {
        Self::new(reference, &Psf::for_spacing(frame_grid.spacing()))
    }

    pub fn volume(&self) -> &Volume3 {
        &self.blurred
    }

    /// The reference as slice pixel `q` would see it under `t`.
    pub fn simulate(&self, t: &RigidTransform3D, q: &Vector3<f64>) -> f64 {
        let (r, d) = t.inverse().affine();
        self.blurred.sample_world(&(r * q + d))
    }
}

/// Per-slice rigid registration of `frame` to the reference. `mask` lives on
/// the frame grid; slices with fewer than 32 masked pixels keep `init`.
pub fn register_s2v_frame(
    frame: &Volume3,
    reference: &Volume3,
    mask: &Volume3,
    init: &RigidTransform3D,
    settings: &RegistrationSettings,
) -> Result<Vec<RegistrationResult>> {
    let prepared = S2vReference::for_frame_grid(reference, frame.grid());
    register_s2v_prepared(frame, &prepared, mask, &vec![*init; frame.grid().dims()[2]], settings)
}

/// As [`register_s2v_frame`] with a pre-blurred reference and one starting
/// transform per slice.
pub fn register_s2v_prepared(
    frame: &Volume3,
    reference: &S2vReference,
    mask: &Volume3,
    inits: &[RigidTransform3D],
    settings: &RegistrationSettings,
) -> Result<Vec<RegistrationResult>> {
    settings.validate()?;
    let g = frame.grid();
    if mask.grid().dims() != g.dims() {
        return Err(Error::InvalidGrid("mask must share the frame grid".into()));
    }
    let [nx, ny, nz] = g.dims();
    if inits.len() != nz {
        return Err(Error::LengthMismatch { expected: nz, found: inits.len() });
    }
    let plane = nx * ny;
    let center = g.center();
    let c = [center[0], center[1], center[2]];
    let blurred = &reference.blurred;
    // coarse pass: reference and slices smoothed in-plane
    let coarse = if settings.pyramid_levels >= 2 && settings.smoothing > 0.0 {
        let sp = g.spacing();
        let sigma = [sp[0] * settings.smoothing, sp[1] * settings.smoothing, 0.0];
        Some((gaussian_blur(blurred, sigma), gaussian_blur(frame, sigma)))
    } else {
        None
    };
    let results = (0..nz)
        .into_par_iter()
        .map(|z| {
            let init = recentered(&inits[z], &center);
            let mut pts = Vec::new();
            let mut vals = Vec::new();
            let mut coarse_vals = Vec::new();
            for i in z * plane..(z + 1) * plane {
                if mask.data()[i] >= 0.5 {
                    pts.push(g.voxel_center(i));
                    vals.push(frame.data()[i]);
                    if let Some((_, cf)) = &coarse {
                        coarse_vals.push(cf.data()[i]);
                    }
                }
            }
            if pts.len() < MIN_OVERLAP {
                return RegistrationResult {
                    transform: init,
                    similarity_final: 0.0,
                    iterations_used: 0,
                    converged: false,
                    similarity_history: Vec::new(),
                };
            }
            let mut history = Vec::new();
            let mut params = init.params();
            let mut iterations = 0;
            let mut step = settings.initial_step;
            if let Some((cr, _)) = &coarse {
                let samples = FixedSamples::new(pts.clone(), coarse_vals);
                let f = |p: &[f64; 6]| {
                    let (r, d) = RigidTransform3D::from_params(*p, c).inverse().affine();
                    samples.score(|q| cr.sample_world(&(r * q + d)))
                };
                let o = pattern_search(f, params, step, settings.parameter_tolerance, settings.max_iterations, &mut Vec::new());
                params = o.params;
                iterations += o.iterations;
                step *= 0.5;
            }
            let samples = FixedSamples::new(pts, vals);
            let f = |p: &[f64; 6]| {
                let (r, d) = RigidTransform3D::from_params(*p, c).inverse().affine();
                samples.score(|q| blurred.sample_world(&(r * q + d)))
            };
            let o = pattern_search(f, params, step, settings.parameter_tolerance, settings.max_iterations, &mut history);
            RegistrationResult {
                transform: RigidTransform3D::from_params(o.params, c),
                similarity_final: o.value,
                iterations_used: iterations + o.iterations,
                converged: o.converged,
                similarity_history: history,
            }
        })
        .collect();
    Ok(results)
}

/// Rotation part equality helper for callers comparing results.
pub fn rotation_distance_deg(a: &RigidTransform3D, b: &RigidTransform3D) -> f64 {
    let r: Matrix3<f64> = a.rotation_matrix().transpose() * b.rotation_matrix();
    (((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0)).acos().to_degrees()
}
