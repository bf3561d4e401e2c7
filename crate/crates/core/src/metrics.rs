//! Intensity quality metrics: temporal standard deviation, SSIM, robust
//! outlier flagging, framewise displacement and PSNR.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::{RigidTransform3D, Volume3, Volume4};

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_FD_RADIUS: f64 = 35.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierConfig {
    pub voxel_p: f64,
    pub reject_fraction: f64,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig { voxel_p: 0.001, reject_fraction: 0.03 }
    }
}

impl OutlierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_p > 0.0 && self.voxel_p < 1.0) || !(self.reject_fraction > 0.0 && self.reject_fraction < 1.0) {
            return Err(Error::InvalidArgument("outlier p and reject fraction must lie in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    /// fraction of masked voxels flagged, per frame
    pub frame_fraction: Vec<f64>,
    pub rejected: Vec<bool>,
    /// percentage of rejected frames
    pub ratio: f64,
}

fn masked_indices(mask: &Volume3, len: usize) -> Result<Vec<usize>> {
    if mask.grid().len() != len {
        return Err(Error::InvalidGrid("mask does not match the series grid".into()));
    }
    let idx: Vec<usize> = (0..len).filter(|&i| mask.data()[i] > 0.5).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("mask is empty".into()));
    }
    Ok(idx)
}

/// Per-voxel population standard deviation over time inside `mask`, zero
/// outside, and its mean over the mask.
pub fn temporal_std_map(series: &Volume4, mask: &Volume3) -> Result<(Volume3, f64)> {
    let tc = series.t_count();
    if tc < 2 {
        return Err(Error::InvalidArgument("temporal std needs >= 2 frames".into()));
    }
    let g = series.grid().clone();
    let idx = masked_indices(mask, g.len())?;
    let frames = series.frames();
    let stds: Vec<f64> = idx
        .par_iter()
        .map(|&i| {
            let mean = frames.iter().map(|f| f.data()[i]).sum::<f64>() / tc as f64;
            let var = frames.iter().map(|f| (f.data()[i] - mean).powi(2)).sum::<f64>() / tc as f64;
            var.sqrt()
        })
        .collect();
    let mut out = vec![0.0; g.len()];
    for (&i, &s) in idx.iter().zip(&stds) {
        out[i] = s;
    }
    let mean = stds.iter().sum::<f64>() / stds.len() as f64;
    Ok((Volume3::new(g, out)?, mean))
}

fn gaussian_taps() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Separable Gaussian window average, truncated at the volume border and
/// renormalized over the in-bounds part.
fn window_mean(data: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let taps = gaussian_taps();
    let mut cur = data.to_vec();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for a in 0..3 {
        let (n, st) = (dims[a], strides[a]);
        let src = cur.clone();
        cur.par_iter_mut().enumerate().for_each(|(i, out)| {
            let pos = (i / st) % n;
            let (mut s, mut w) = (0.0, 0.0);
            for (k, &tap) in taps.iter().enumerate() {
                let q = pos as isize + k as isize - SSIM_RADIUS as isize;
                if q >= 0 && (q as usize) < n {
                    let j = i - pos * st + q as usize * st;
                    s += tap * src[j];
                    w += tap;
                }
            }
            *out = s / w;
        });
    }
    cur
}

/// Local SSIM at every voxel.
pub fn ssim_map(a: &Volume3, b: &Volume3) -> Result<Volume3> {
    if !a.grid().approx_eq(b.grid(), 1e-6) {
        return Err(Error::InvalidGrid("ssim needs volumes on the same grid".into()));
    }
    let dims = a.grid().dims();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let mx = window_mean(x, dims);
    let my = window_mean(y, dims);
    let mxx = window_mean(&prod(&|i| x[i] * x[i]), dims);
    let myy = window_mean(&prod(&|i| y[i] * y[i]), dims);
    let mxy = window_mean(&prod(&|i| x[i] * y[i]), dims);
    let out = (0..x.len())
        .map(|i| {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cxy = mxy[i] - mx[i] * my[i];
            ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .collect();
    Volume3::new(a.grid().clone(), out)
}

/// Mean local SSIM over `mask`.
pub fn ssim(a: &Volume3, b: &Volume3, mask: &Volume3) -> Result<f64> {
    let map = ssim_map(a, b)?;
    let idx = masked_indices(mask, map.grid().len())?;
    Ok(idx.iter().map(|&i| map.data()[i]).sum::<f64>() / idx.len() as f64)
}

/// Mean SSIM over consecutive frame pairs.
pub fn series_ssim(series: &Volume4, mask: &Volume3) -> Result<f64> {
    let f = series.frames();
    if f.len() < 2 {
        return Err(Error::InvalidArgument("series SSIM needs >= 2 frames".into()));
    }
    let vals = (0..f.len() - 1)
        .into_par_iter()
        .map(|t| ssim(&f[t], &f[t + 1], mask))
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

/// `Q(1 − p/N) · √(π/2) · MAD` with `Q` the standard normal quantile.
pub fn outlier_threshold(timeseries: &[f64], p: f64) -> Result<f64> {
    let n = timeseries.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("outlier threshold needs >= 3 samples, got {n}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("p = {p} not in (0,1)")));
    }
    let normal = Normal::standard();
    let q = normal.inverse_cdf(1.0 - p / n as f64);
    Ok(q * (std::f64::consts::PI / 2.0).sqrt() * mad(timeseries))
}

/// Samples with `|x − median| > threshold`.
pub fn outlier_flags(timeseries: &[f64], p: f64) -> Result<Vec<bool>> {
    let th = outlier_threshold(timeseries, p)?;
    let m = median(timeseries);
    Ok(timeseries.iter().map(|x| (x - m).abs() > th).collect())
}

pub fn outlier_ratio(series: &Volume4, mask: &Volume3, config: &OutlierConfig) -> Result<OutlierReport> {
    config.validate()?;
    let tc = series.t_count();
    if tc < 3 {
        return Err(Error::InvalidArgument("outlier ratio needs >= 3 frames".into()));
    }
    let idx = masked_indices(mask, series.grid().len())?;
    let counts = idx
        .par_iter()
        .map(|&i| outlier_flags(&series.voxel_series(i), config.voxel_p))
        .try_fold(
            || vec![0usize; tc],
            |mut acc, flags| {
                for (c, f) in acc.iter_mut().zip(flags?) {
                    *c += f as usize;
                }
                Ok::<_, Error>(acc)
            },
        )
        .try_reduce(
            || vec![0usize; tc],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    let frame_fraction: Vec<f64> = counts.iter().map(|&c| c as f64 / idx.len() as f64).collect();
    let rejected: Vec<bool> = frame_fraction.iter().map(|&f| f > config.reject_fraction).collect();
    let ratio = 100.0 * rejected.iter().filter(|&&r| r).count() as f64 / tc as f64;
    Ok(OutlierReport { frame_fraction, rejected, ratio })
}

/// `FD_t = Σ|Δ parameter|` with rotations as arc length at `radius` mm.
/// `FD_0 = 0`, so the output aligns with the frame index.
pub fn framewise_displacement(transforms: &[RigidTransform3D], radius: f64) -> Result<Vec<f64>> {
    if transforms.len() < 2 {
        return Err(Error::InvalidArgument("framewise displacement needs >= 2 frames".into()));
    }
    let params: Vec<[f64; 6]> = transforms.iter().map(|t| t.params()).collect();
    Ok(std::iter::once(0.0)
        .chain(params.windows(2).map(|w| fd_step(&w[0], &w[1], radius)))
        .collect())
}

fn fd_step(a: &[f64; 6], b: &[f64; 6], radius: f64) -> f64 {
    let rot: f64 = (0..3).map(|k| (b[k] - a[k]).abs().to_radians() * radius).sum();
    let tr: f64 = (3..6).map(|k| (b[k] - a[k]).abs()).sum();
    rot + tr
}

/// `10·log10(peak² / MSE)` with the peak taken from `truth`.
pub fn psnr(estimate: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::LengthMismatch { expected: truth.len(), found: estimate.len() });
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let (mut se, mut n, mut peak) = (0.0, 0usize, 0.0f64);
    for i in (0..truth.len()).filter(|&i| keep(i)) {
        se += (estimate[i] - truth[i]).powi(2);
        peak = peak.max(truth[i].abs());
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("psnr over an empty set".into()));
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
