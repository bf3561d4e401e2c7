//! Gradient-based penalties: first-order Tikhonov, smoothed total variation
//! and Huber.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Volume3};

pub const DEFAULT_TV_EPSILON: f64 = 1e-3;
pub const DEFAULT_HUBER_GAMMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    Tk1,
    Tv,
    Huber,
}

impl RegularizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            RegularizerKind::Tk1 => "tk1",
            RegularizerKind::Tv => "tv",
            RegularizerKind::Huber => "huber",
        }
    }
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tk1" => Ok(RegularizerKind::Tk1),
            "tv" => Ok(RegularizerKind::Tv),
            "huber" => Ok(RegularizerKind::Huber),
            other => Err(Error::InvalidArgument(format!("unknown regularizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub alpha: f64,
    /// Huber threshold on the gradient magnitude
    pub gamma: f64,
    /// TV smoothing
    pub tv_epsilon: f64,
}

impl Regularizer {
    pub fn new(kind: RegularizerKind, alpha: f64, gamma: f64) -> Result<Self> {
        let r = Regularizer {
            kind,
            alpha,
            gamma,
            tv_epsilon: DEFAULT_TV_EPSILON,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn tk1(alpha: f64) -> Result<Self> {
        Self::new(RegularizerKind::Tk1, alpha, DEFAULT_HUBER_GAMMA)
    }

    pub fn tv(alpha: f64) -> Result<Self> {
        Self::new(RegularizerKind::Tv, alpha, DEFAULT_HUBER_GAMMA)
    }

    pub fn huber(alpha: f64, gamma: f64) -> Result<Self> {
        Self::new(RegularizerKind::Huber, alpha, gamma)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.kind == RegularizerKind::Huber && !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.kind == RegularizerKind::Tv && !(self.tv_epsilon.is_finite() && self.tv_epsilon > 0.0) {
            return Err(Error::InvalidArgument("tv epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Forward differences between neighboring voxels, zero on the last plane
/// of each axis.
pub fn gradient_field(data: &[f64], grid: &ImageGrid) -> [Vec<f64>; 3] {
    let [nx, ny, nz] = grid.dims();
    let n = data.len();
    let (mut gx, mut gy, mut gz) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for z in 0..nz {
        for y in 0..ny {
            let row = nx * (y + ny * z);
            for x in 0..nx {
                let i = row + x;
                let v = data[i];
                if x + 1 < nx {
                    gx[i] = data[i + 1] - v;
                }
                if y + 1 < ny {
                    gy[i] = data[i + nx] - v;
                }
                if z + 1 < nz {
                    gz[i] = data[i + nx * ny] - v;
                }
            }
        }
    }
    [gx, gy, gz]
}

/// Adjoint of [`gradient_field`] (the negative divergence).
pub fn gradient_adjoint(field: &[Vec<f64>; 3], grid: &ImageGrid) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims();
    let mut out = vec![0.0; grid.len()];
    let strides = [1, nx, nx * ny];
    let dims = [nx, ny, nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let c = [x, y, z];
                let mut acc = 0.0;
                for a in 0..3 {
                    let p = &field[a];
                    if c[a] + 1 < dims[a] {
                        acc -= p[i];
                    }
                    if c[a] > 0 {
                        acc += p[i - strides[a]];
                    }
                }
                out[i] = acc;
            }
        }
    }
    out
}

/// Unweighted penalty value and its gradient with respect to the voxel values.
pub fn penalty_raw(reg: &Regularizer, data: &[f64], grid: &ImageGrid) -> (f64, Vec<f64>) {
    let [gx, gy, gz] = gradient_field(data, grid);
    let n = data.len();
    let mut value = 0.0;
    let mut w = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let g = [gx[i], gy[i], gz[i]];
        let m2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
        // d value / d g = s · g
        let s = match reg.kind {
            RegularizerKind::Tk1 => {
                value += m2;
                2.0
            }
            RegularizerKind::Tv => {
                let e = reg.tv_epsilon;
                let r = (m2 + e * e).sqrt();
                value += r - e;
                1.0 / r
            }
            RegularizerKind::Huber => {
                let m = m2.sqrt();
                if m < reg.gamma {
                    value += m2;
                    2.0
                } else {
                    value += 2.0 * reg.gamma * m - reg.gamma * reg.gamma;
                    2.0 * reg.gamma / m
                }
            }
        };
        for a in 0..3 {
            w[a][i] = s * g[a];
        }
    }
    (value, gradient_adjoint(&w, grid))
}

/// Penalty `R(ξ)` of the regularizer's kind and its gradient. The weight
/// `alpha` is applied by the solver, not here.
pub fn penalty(reg: &Regularizer, xi: &Volume3) -> (f64, Volume3) {
    let (v, g) = penalty_raw(reg, xi.data(), xi.grid());
    (v, Volume3::new(xi.grid().clone(), g).expect("gradient matches grid"))
}
