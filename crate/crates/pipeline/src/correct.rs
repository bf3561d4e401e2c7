//! Motion correction of a whole series against a reference volume.

use moco_core::grid::{resample, RigidTransform3D, Slice2, Volume3, Volume4};
use moco_core::registration::{recentered, register_s2v_prepared, register_v2v, RegistrationSettings, S2vReference};
use moco_core::srr::{reconstruct_timepoint, Regularizer, SolveReport, SolverSettings};
use rayon::prelude::*;

use crate::config::Method;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Correction {
    pub series: Volume4,
    /// per frame, reference → acquisition
    pub frame_transforms: Vec<RigidTransform3D>,
    /// per slice, frame-major; V2V repeats the frame transform
    pub slice_transforms: Vec<RigidTransform3D>,
    /// one per reconstructed frame, empty for the uncorrected baseline
    pub reports: Vec<SolveReport>,
}

/// The binary frame mask carried onto the reference grid.
pub fn reference_mask(mask: &Volume3, reference: &Volume3) -> Volume3 {
    let m = resample(mask, reference.grid(), &RigidTransform3D::identity());
    let bits = m.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    Volume3::new(reference.grid().clone(), bits).expect("same grid")
}

/// V2V of every frame to `reference`. Frame `t` starts from the result of
/// frame `t − 1`, so the chain is sequential.
pub fn register_frames(
    series: &Volume4,
    reference: &Volume3,
    ref_mask: &Volume3,
    settings: &RegistrationSettings,
) -> Result<Vec<RigidTransform3D>> {
    let mut out = Vec::with_capacity(series.t_count());
    let mut init = RigidTransform3D::identity();
    for frame in series.frames() {
        init = register_v2v(frame, reference, ref_mask, &init, settings)?.transform;
        out.push(init);
    }
    Ok(out)
}

/// S2V of every slice, starting from the frame's V2V transform. Frames run
/// in parallel; results come back in frame order.
pub fn register_slices(
    series: &Volume4,
    reference: &Volume3,
    ref_mask: &Volume3,
    frame_transforms: &[RigidTransform3D],
    settings: &RegistrationSettings,
) -> Result<Vec<RigidTransform3D>> {
    let fg = series.grid();
    let nz = fg.dims()[2];
    let prepared = S2vReference::for_frame_grid(reference, fg);
    let per_frame: Vec<Vec<RigidTransform3D>> = series
        .frames()
        .par_iter()
        .zip(frame_transforms)
        .map(|(frame, ft)| {
            let frame_mask = resample(ref_mask, fg, &ft.inverse());
            let results = register_s2v_prepared(frame, &prepared, &frame_mask, &vec![*ft; nz], settings)?;
            Ok(results.into_iter().map(|r| r.transform).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_frame.concat())
}

/// Reconstruct every frame on its own grid, in reference space.
pub fn reconstruct_frames(
    series: &Volume4,
    slice_transforms: &[RigidTransform3D],
    interleave: usize,
    reg: &Regularizer,
    solver: &SolverSettings,
) -> Result<(Volume4, Vec<SolveReport>)> {
    let fg = series.grid();
    let [nx, ny, nz] = fg.dims();
    let plane = nx * ny;
    let solved: Vec<(Volume3, SolveReport)> = series
        .frames()
        .par_iter()
        .enumerate()
        .map(|(t, frame)| {
            let slices = (0..nz)
                .map(|z| {
                    let data = frame.data()[z * plane..(z + 1) * plane].to_vec();
                    Slice2::new(fg.clone(), z, interleave, data, slice_transforms[t * nz + z])
                })
                .collect::<moco_core::Result<Vec<_>>>()?;
            Ok(reconstruct_timepoint(&slices, reg, fg, solver)?)
        })
        .collect::<Result<_>>()?;
    let (frames, reports): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    Ok((Volume4::new(frames)?, reports))
}

pub struct CorrectionSettings<'a> {
    pub method: Method,
    pub interleave: usize,
    pub regularizer: &'a Regularizer,
    pub registration: &'a RegistrationSettings,
    pub solver: &'a SolverSettings,
}

/// UNC copies the series; V2V and S2V register then reconstruct.
pub fn correct_series(
    series: &Volume4,
    mask: &Volume3,
    reference: &Volume3,
    settings: &CorrectionSettings<'_>,
) -> Result<Correction> {
    let nz = series.grid().dims()[2];
    if settings.method == Method::Unc {
        let identity = vec![RigidTransform3D::identity(); series.t_count()];
        return Ok(Correction {
            series: series.clone(),
            slice_transforms: vec![RigidTransform3D::identity(); series.t_count() * nz],
            frame_transforms: identity,
            reports: Vec::new(),
        });
    }
    let ref_mask = reference_mask(mask, reference);
    let frame_transforms = register_frames(series, reference, &ref_mask, settings.registration)?;
    let slice_transforms = match settings.method {
        Method::S2v => register_slices(series, reference, &ref_mask, &frame_transforms, settings.registration)?,
        _ => frame_transforms.iter().flat_map(|t| std::iter::repeat_n(*t, nz)).collect(),
    };
    let (corrected, reports) =
        reconstruct_frames(series, &slice_transforms, settings.interleave, settings.regularizer, settings.solver)?;
    Ok(Correction { series: corrected, frame_transforms, slice_transforms, reports })
}

/// Per-frame summary of slice transforms: the mean of each parameter, taken
/// about the center of the frame's first slice transform.
pub fn mean_frame_transforms(slice_transforms: &[RigidTransform3D], slices_per_frame: usize) -> Vec<RigidTransform3D> {
    slice_transforms
        .chunks(slices_per_frame)
        .map(|chunk| {
            let c = chunk[0].center;
            let mut p = [0.0; 6];
            for t in chunk {
                let q = recentered(t, &c.into()).params();
                for k in 0..6 {
                    p[k] += q[k];
                }
            }
            RigidTransform3D::from_params(p.map(|v| v / chunk.len() as f64), c)
        })
        .collect()
}
