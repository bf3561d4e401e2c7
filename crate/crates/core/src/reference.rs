//! High-resolution reference volume from the first frames of a series:
//! V2V alignment to a bootstrap frame, L2 reconstruction, then rounds of
//! slice-to-volume alignment with slice rejection.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{compose, resample, ImageGrid, RigidTransform3D, Slice2, Volume3, Volume4};
use crate::registration::{ncc, recentered, register_s2v_prepared, register_v2v, RegistrationSettings, S2vReference};
use crate::srr::{reconstruct_timepoint, Regularizer, SolverSettings};

/// Reject the build when more than this fraction of slices is rejected.
pub const MAX_REJECTED_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceBuildSettings {
    pub n_stacks: usize,
    /// total cycles including the V2V cycle 0
    pub cycles: usize,
    pub slice_outlier_ncc_threshold: f64,
    /// mm; the mean in-plane spacing of the series when unset
    pub target_isotropic_spacing: Option<f64>,
    /// TK1 weight per stack: the data term is averaged over the stacks used
    pub reference_alpha: f64,
    pub registration: RegistrationSettings,
    pub solver: SolverSettings,
}

impl Default for ReferenceBuildSettings {
    fn default() -> Self {
        ReferenceBuildSettings {
            n_stacks: 15,
            cycles: 2,
            slice_outlier_ncc_threshold: 0.6,
            target_isotropic_spacing: None,
            reference_alpha: 0.02,
            registration: RegistrationSettings::default(),
            solver: SolverSettings::default(),
        }
    }
}

impl ReferenceBuildSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_stacks < 2 {
            return Err(Error::InvalidArgument("n_stacks must be >= 2".into()));
        }
        if self.cycles < 1 {
            return Err(Error::InvalidArgument("cycles must be >= 1".into()));
        }
        let th = self.slice_outlier_ncc_threshold;
        if !(th > 0.0 && th < 1.0) {
            return Err(Error::InvalidArgument(format!("slice outlier threshold {th} not in (0,1)")));
        }
        if let Some(s) = self.target_isotropic_spacing {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument("target spacing must be > 0".into()));
            }
        }
        if !(self.reference_alpha >= 0.0 && self.reference_alpha.is_finite()) {
            return Err(Error::InvalidArgument("reference alpha must be >= 0".into()));
        }
        self.registration.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceFlag {
    pub frame: usize,
    pub slice: usize,
    pub kept: bool,
    /// NCC against the simulated reference in the last S2V cycle; `None`
    /// when never assessed (V2V only, or too few mask pixels)
    pub ncc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ReferenceBuild {
    pub reference: Volume3,
    /// one flag per slice, frame-major
    pub flags: Vec<SliceFlag>,
    pub bootstrap_frame: usize,
    /// final per-slice transforms, frame-major, reference → acquisition
    pub transforms: Vec<RigidTransform3D>,
    /// kept slice count after each cycle
    pub kept_per_cycle: Vec<usize>,
}

impl ReferenceBuild {
    pub fn kept_count(&self) -> usize {
        self.flags.iter().filter(|f| f.kept).count()
    }

    pub fn rejected_count(&self) -> usize {
        self.flags.len() - self.kept_count()
    }
}

/// Isotropic grid along the axes of `frame_grid` covering the bounding box of
/// `mask > 0.5` plus a margin of `margin` voxels.
pub fn reference_grid(mask: &Volume3, spacing: f64, margin: usize) -> Result<ImageGrid> {
    let g = mask.grid();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &m) in mask.data().iter().enumerate() {
        if m > 0.5 {
            any = true;
            let c = g.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return Err(Error::InvalidArgument("mask is empty".into()));
    }
    let h = g.spacing();
    let dims = [0, 1, 2].map(|a| {
        let ext = (hi[a] - lo[a]) as f64 * h[a];
        (ext / spacing - 1e-9).ceil() as usize + 1 + 2 * margin
    });
    let mid = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]) as f64);
    let center = g.voxel_to_world(mid);
    let half = Vector3::new(
        0.5 * (dims[0] - 1) as f64 * spacing,
        0.5 * (dims[1] - 1) as f64 * spacing,
        0.5 * (dims[2] - 1) as f64 * spacing,
    );
    let origin = center - g.direction() * half;
    ImageGrid::new(dims, [spacing; 3], [origin[0], origin[1], origin[2]], *g.direction())
}

/// Mean NCC of each frame with its temporal neighbors inside `mask`.
pub fn neighbor_ncc(frames: &[Volume3], mask: &[bool]) -> Vec<f64> {
    let pair = |a: usize, b: usize| ncc(frames[a].data(), frames[b].data(), Some(mask)).unwrap_or(-1.0);
    let n = frames.len();
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            let mut k = 0;
            if i > 0 {
                s += pair(i, i - 1);
                k += 1;
            }
            if i + 1 < n {
                s += pair(i, i + 1);
                k += 1;
            }
            if k == 0 { -1.0 } else { s / k as f64 }
        })
        .collect()
}

/// Build the reference from the first `n_stacks` frames. `mask` lives on the
/// frame grid.
pub fn build_reference(series: &Volume4, mask: &Volume3, settings: &ReferenceBuildSettings) -> Result<ReferenceBuild> {
    settings.validate()?;
    let n = settings.n_stacks;
    if series.t_count() < n {
        return Err(Error::InvalidArgument(format!(
            "series has {} frames, reference needs {n}",
            series.t_count()
        )));
    }
    let fg = series.grid().clone();
    if mask.grid().dims() != fg.dims() {
        return Err(Error::InvalidGrid("mask must share the frame grid".into()));
    }
    let frames = &series.frames()[..n];
    let nz = fg.dims()[2];
    let total = n * nz;
    let sp = fg.spacing();
    let iso = settings.target_isotropic_spacing.unwrap_or(0.5 * (sp[0] + sp[1]));
    let rgrid = reference_grid(mask, iso, 2)?;
    let identity = RigidTransform3D::identity();
    let ref_mask = resample(mask, &rgrid, &identity);

    // cycle 0
    let scores = neighbor_ncc(frames, &mask.mask_bits());
    let bootstrap = (0..n).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    let target = resample(&frames[bootstrap], &rgrid, &identity);
    let v2v: Vec<(RigidTransform3D, f64)> = (0..n)
        .into_par_iter()
        .map(|t| {
            if t == bootstrap {
                return Ok((identity, 1.0));
            }
            register_v2v(&frames[t], &target, &ref_mask, &identity, &settings.registration)
                .map(|r| (r.transform, r.similarity_final))
        })
        .collect::<Result<_>>()?;
    let frame_t: Vec<RigidTransform3D> = v2v.iter().map(|r| r.0).collect();
    let mut transforms: Vec<RigidTransform3D> = (0..total).map(|i| frame_t[i / nz]).collect();
    // frames that do not resemble the bootstrap target are left out from the start
    let mut flags: Vec<SliceFlag> = (0..total)
        .map(|i| SliceFlag {
            frame: i / nz,
            slice: i % nz,
            kept: v2v[i / nz].1 >= settings.slice_outlier_ncc_threshold,
            ncc: None,
        })
        .collect();
    let mut kept_per_cycle = Vec::new();
    check_rejection(&flags, &mut kept_per_cycle)?;
    let mut reference = reconstruct(frames, &transforms, &flags, &rgrid, settings)?;

    for _ in 1..settings.cycles {
        let prepared = S2vReference::for_frame_grid(&reference, &fg);
        let previous = transforms.clone();
        let mut moved = vec![false; total];
        for t in 0..n {
            let inv = frame_t[t].inverse();
            let frame_mask = resample(&ref_mask, &fg, &inv);
            let results = register_s2v_prepared(
                &frames[t],
                &prepared,
                &frame_mask,
                &transforms[t * nz..(t + 1) * nz],
                &settings.registration,
            )?;
            for (z, r) in results.into_iter().enumerate() {
                let i = t * nz + z;
                transforms[i] = r.transform;
                if r.iterations_used > 0 {
                    moved[i] = true;
                    flags[i].ncc = Some(r.similarity_final);
                    if r.similarity_final < settings.slice_outlier_ncc_threshold {
                        flags[i].kept = false;
                    }
                }
            }
        }
        check_rejection(&flags, &mut kept_per_cycle)?;
        remove_common_drift(&mut transforms, &previous, &moved, &rgrid.center());
        reference = reconstruct(frames, &transforms, &flags, &rgrid, settings)?;
    }

    Ok(ReferenceBuild {
        reference,
        flags,
        bootstrap_frame: bootstrap,
        transforms,
        kept_per_cycle,
    })
}

/// Slice registration can move all slices and the reference together; take
/// out the mean rigid change so the reference stays put on its grid.
fn remove_common_drift(
    transforms: &mut [RigidTransform3D],
    previous: &[RigidTransform3D],
    moved: &[bool],
    center: &Vector3<f64>,
) {
    let mut mean = [0.0; 6];
    let mut count = 0.0;
    for i in (0..transforms.len()).filter(|&i| moved[i]) {
        let d = recentered(&compose(&previous[i].inverse(), &transforms[i]), center).params();
        for k in 0..6 {
            mean[k] += d[k];
        }
        count += 1.0;
    }
    if count == 0.0 {
        return;
    }
    let c = [center[0], center[1], center[2]];
    let drift = RigidTransform3D::from_params(mean.map(|m| m / count), c).inverse();
    for i in (0..transforms.len()).filter(|&i| moved[i]) {
        let own = Vector3::from(transforms[i].center);
        transforms[i] = recentered(&compose(&transforms[i], &drift), &own);
    }
}

fn check_rejection(flags: &[SliceFlag], kept_per_cycle: &mut Vec<usize>) -> Result<()> {
    let total = flags.len();
    let kept = flags.iter().filter(|f| f.kept).count();
    kept_per_cycle.push(kept);
    let rejected = total - kept;
    if rejected as f64 > MAX_REJECTED_FRACTION * total as f64 {
        return Err(Error::ReferenceBuildFailed { rejected, total });
    }
    Ok(())
}

fn reconstruct(
    frames: &[Volume3],
    transforms: &[RigidTransform3D],
    flags: &[SliceFlag],
    grid: &ImageGrid,
    settings: &ReferenceBuildSettings,
) -> Result<Volume3> {
    let fg = frames[0].grid();
    let [nx, ny, nz] = fg.dims();
    let plane = nx * ny;
    let slices = flags
        .iter()
        .zip(transforms)
        .filter(|(f, _)| f.kept)
        .map(|(f, tr)| {
            let data = frames[f.frame].data()[f.slice * plane..(f.slice + 1) * plane].to_vec();
            Slice2::new(fg.clone(), f.slice, 1, data, *tr)
        })
        .collect::<Result<Vec<_>>>()?;
    let stacks = slices.len() as f64 / nz as f64;
    let reg = Regularizer::tk1(settings.reference_alpha * stacks)?;
    Ok(reconstruct_timepoint(&slices, &reg, grid, &settings.solver)?.0)
}
