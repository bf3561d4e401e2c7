//! Synthetic interleaved-motion series with per-slice ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RigidTransform3D, Volume3, Volume4};
use crate::srr::{ForwardOperator, Psf};

/// Sinusoidal rigid motion, with slice shots offset in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    /// degrees, per axis
    pub rot_amplitude: [f64; 3],
    /// mm, per axis
    pub trans_amplitude: [f64; 3],
    /// timepoints per cycle
    pub period: f64,
    pub interleave: usize,
    /// radians
    pub phase: f64,
}

impl MotionProfile {
    pub fn still(interleave: usize) -> Self {
        MotionProfile {
            rot_amplitude: [0.0; 3],
            trans_amplitude: [0.0; 3],
            period: 1.0,
            interleave,
            phase: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .rot_amplitude
            .iter()
            .chain(&self.trans_amplitude)
            .any(|a| !(a.is_finite() && *a >= 0.0))
        {
            return Err(Error::InvalidArgument("motion amplitudes must be finite and >= 0".into()));
        }
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(Error::InvalidArgument("motion period must be > 0".into()));
        }
        if self.interleave == 0 {
            return Err(Error::InvalidArgument("interleave must be >= 1".into()));
        }
        if !self.phase.is_finite() {
            return Err(Error::InvalidArgument("motion phase must be finite".into()));
        }
        Ok(())
    }
}

/// Pose of slice `slice_index` at timepoint `t`, about the origin.
/// Shot `s mod k` is acquired `(s mod k)/k` of a timepoint after shot 0.
pub fn sample_profile(profile: &MotionProfile, t: usize, slice_index: usize) -> RigidTransform3D {
    let k = profile.interleave.max(1);
    let shot = (slice_index % k) as f64 / k as f64;
    let w = (2.0 * std::f64::consts::PI * (t as f64 + shot) / profile.period + profile.phase).sin();
    let r = profile.rot_amplitude;
    let d = profile.trans_amplitude;
    RigidTransform3D::new(
        [r[0] * w, r[1] * w, r[2] * w],
        [d[0] * w, d[1] * w, d[2] * w],
    )
}

/// How frames are blurred on acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionBlur {
    /// trilinear sampling only
    None,
    /// the reconstruction PSF exactly
    Matched,
    /// the reconstruction PSF with widths scaled by a factor
    Scaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSettings {
    pub blur: AcquisitionBlur,
    /// content must stay this far (mm) inside the target grid
    pub fov_margin: f64,
    /// additive Gaussian noise standard deviation, 0 for none
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            blur: AcquisitionBlur::Scaled(0.9),
            fov_margin: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SimulationSettings {
    pub fn psf_for(&self, target: &ImageGrid) -> Option<Psf> {
        let base = Psf::for_spacing(target.spacing());
        match self.blur {
            AcquisitionBlur::None => None,
            AcquisitionBlur::Matched => Some(base),
            AcquisitionBlur::Scaled(f) => Some(base.scaled(f)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedSeries {
    pub series: Volume4,
    /// `truth[t * slices + z]`, about the target grid center
    pub truth: Vec<RigidTransform3D>,
    pub hr_source: Volume3,
    pub interleave: usize,
}

impl SimulatedSeries {
    pub fn slices_per_frame(&self) -> usize {
        self.series.grid().dims()[2]
    }

    pub fn frame_truth(&self, t: usize) -> &[RigidTransform3D] {
        let n = self.slices_per_frame();
        &self.truth[t * n..(t + 1) * n]
    }
}

/// Grid with the given spacing covering the same physical extent and
/// center as `hr`.
pub fn downsampled_grid(hr: &ImageGrid, spacing: [f64; 3]) -> Result<ImageGrid> {
    let ext = hr.extent();
    let dims = [0, 1, 2].map(|a| ((ext[a] / spacing[a]).round() as usize).max(1));
    let c = hr.center();
    let origin_local = nalgebra::Vector3::new(
        -0.5 * (dims[0] - 1) as f64 * spacing[0],
        -0.5 * (dims[1] - 1) as f64 * spacing[1],
        -0.5 * (dims[2] - 1) as f64 * spacing[2],
    );
    let origin = c + hr.direction() * origin_local;
    ImageGrid::new(dims, spacing, [origin[0], origin[1], origin[2]], *hr.direction())
}

/// One frame whose slice `z` sees `hr` moved by `slice_transforms[z]`.
pub fn acquire_frame(
    hr: &Volume3,
    target: &ImageGrid,
    slice_transforms: &[RigidTransform3D],
    psf: Option<Psf>,
) -> Result<Volume3> {
    let [nx, ny, nz] = target.dims();
    if slice_transforms.len() != nz {
        return Err(Error::LengthMismatch { expected: nz, found: slice_transforms.len() });
    }
    let plane = nx * ny;
    let mut data = vec![0.0; target.len()];
    for (z, t) in slice_transforms.iter().enumerate() {
        // the object moves by t, so pixel q shows hr at t⁻¹(q)
        let moved = t.inverse();
        let out = &mut data[z * plane..(z + 1) * plane];
        match psf {
            Some(psf) => {
                // forward operators take the reference→acquisition map
                let op = ForwardOperator::new(target.slice_grid(z), *t, psf, hr.grid().clone());
                out.copy_from_slice(&op.apply(hr.data()));
            }
            None => {
                let sg = target.slice_grid(z);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = hr.sample_world(&moved.apply(&sg.voxel_center(i)));
                }
            }
        }
    }
    Volume3::new(target.clone(), data)
}

fn check_field_of_view(
    hr: &Volume3,
    target: &ImageGrid,
    transforms: &[RigidTransform3D],
    margin: f64,
) -> Result<()> {
    let hr_ext = hr.grid().extent();
    let t_ext = target.extent();
    for a in 0..3 {
        if t_ext[a] > hr_ext[a] + hr.grid().spacing()[a] + 1e-9 {
            return Err(Error::FieldOfView(format!(
                "target extent {:.2} mm exceeds source extent {:.2} mm on axis {a}",
                t_ext[a], hr_ext[a]
            )));
        }
    }
    let content: Vec<_> = hr
        .data()
        .iter()
        .enumerate()
        .filter(|(i, v)| **v != 0.0 && {
            let c = hr.grid().coords(*i);
            c[0].is_multiple_of(2) && c[1].is_multiple_of(2) && c[2].is_multiple_of(2)
        })
        .map(|(i, _)| hr.grid().voxel_center(i))
        .collect();
    let dims = target.dims();
    let sp = target.spacing();
    let mut distinct: Vec<RigidTransform3D> = Vec::new();
    for t in transforms {
        if !distinct.iter().any(|d| d == t) {
            distinct.push(*t);
        }
    }
    for t in &distinct {
        for p in &content {
            let ci = target.world_to_voxel(&t.apply(p));
            for a in 0..3 {
                let lo = -0.5 + margin / sp[a];
                let hi = dims[a] as f64 - 0.5 - margin / sp[a];
                if ci[a] < lo || ci[a] > hi {
                    return Err(Error::FieldOfView(format!(
                        "object leaves the sampling grid under motion {:?}",
                        t.params()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Simulate `t_count` frames with default settings.
pub fn simulate_series(
    hr: &Volume3,
    profile: &MotionProfile,
    target: &ImageGrid,
    t_count: usize,
) -> Result<SimulatedSeries> {
    simulate_series_with(hr, profile, target, t_count, &SimulationSettings::default())
}

pub fn simulate_series_with(
    hr: &Volume3,
    profile: &MotionProfile,
    target: &ImageGrid,
    t_count: usize,
    settings: &SimulationSettings,
) -> Result<SimulatedSeries> {
    simulate_dynamic_series(hr, |_| None, profile, target, t_count, settings)
}

/// Like [`simulate_series_with`] for a source that changes over time:
/// `source_at(t)` returns the high-resolution content of frame `t` on the
/// grid of `hr`, or `None` to use `hr` itself. `hr` defines the grid and the
/// field-of-view check.
pub fn simulate_dynamic_series<F>(
    hr: &Volume3,
    source_at: F,
    profile: &MotionProfile,
    target: &ImageGrid,
    t_count: usize,
    settings: &SimulationSettings,
) -> Result<SimulatedSeries>
where
    F: Fn(usize) -> Option<Volume3> + Sync,
{
    profile.validate()?;
    if t_count == 0 {
        return Err(Error::InvalidArgument("t_count must be >= 1".into()));
    }
    let hs = hr.grid().spacing();
    let ts = target.spacing();
    if (0..3).any(|a| hs[a] > ts[a] + 1e-9) {
        return Err(Error::InvalidArgument(
            "source volume must be at least as fine as the target grid".into(),
        ));
    }
    let nz = target.dims()[2];
    let center = target.center();
    let truth: Vec<RigidTransform3D> = (0..t_count)
        .flat_map(|t| (0..nz).map(move |z| (t, z)))
        .map(|(t, z)| sample_profile(profile, t, z).with_center(center))
        .collect();
    check_field_of_view(hr, target, &truth, settings.fov_margin)?;
    let psf = settings.psf_for(target);
    let frames: Vec<Volume3> = (0..t_count)
        .into_par_iter()
        .map(|t| {
            let dynamic = source_at(t);
            let source = match &dynamic {
                Some(v) if v.grid().dims() != hr.grid().dims() => {
                    return Err(Error::InvalidGrid("dynamic source must share the grid of hr".into()))
                }
                Some(v) => v,
                None => hr,
            };
            let mut frame = acquire_frame(source, target, &truth[t * nz..(t + 1) * nz], psf)?;
            if settings.noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
                rng.set_stream(t as u64);
                let normal = Normal::new(0.0, settings.noise_sigma)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                frame.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            Ok(frame)
        })
        .collect::<Result<_>>()?;
    Ok(SimulatedSeries {
        series: Volume4::new(frames)?,
        truth,
        hr_source: hr.clone(),
        interleave: profile.interleave,
    })
}
