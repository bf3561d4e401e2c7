//! Regularized least-squares reconstruction of one timepoint and L-curve sweeps.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::operator::{ForwardOperator, Psf, SparseMatrix};
use super::penalty::{penalty_raw, Regularizer, RegularizerKind};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Slice2, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub gradient_tolerance: f64,
    /// L-BFGS memory
    pub history: usize,
    /// PSF override; by default derived from each slice's spacing
    pub psf: Option<Psf>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 400,
            relative_tolerance: 1e-6,
            gradient_tolerance: 1e-6,
            history: 7,
            psf: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub data_residual_norm: f64,
    pub regularizer_value: f64,
    pub objective: f64,
    pub converged: bool,
    /// objective after each accepted step, starting with the initial guess
    #[serde(skip)]
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LCurvePoint {
    pub alpha: f64,
    pub residual_norm: f64,
    pub solution_seminorm: f64,
}

/// Stacked slice operators and observations for one timepoint. Assembly is
/// the expensive part, so the same problem can be solved for many
/// regularizers.
#[derive(Debug, Clone)]
pub struct ReconstructionProblem {
    hr_grid: ImageGrid,
    a: SparseMatrix,
    at: SparseMatrix,
    y: Vec<f64>,
    settings: SolverSettings,
}

impl ReconstructionProblem {
    pub fn new(slices: &[Slice2], hr_grid: &ImageGrid, settings: &SolverSettings) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::InvalidArgument("no slices to reconstruct from".into()));
        }
        let ops: Vec<SparseMatrix> = slices
            .par_iter()
            .map(|s| {
                let sg = s.grid();
                let psf = settings.psf.unwrap_or_else(|| Psf::for_spacing(s.parent_grid.spacing()));
                ForwardOperator::new(sg, s.transform, psf, hr_grid.clone()).into_matrix()
            })
            .collect();
        let refs: Vec<&SparseMatrix> = ops.iter().collect();
        let a = SparseMatrix::vstack(&refs);
        let y: Vec<f64> = slices.iter().flat_map(|s| s.data.iter().copied()).collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("slice data".into()));
        }
        let at = a.transpose();
        Ok(ReconstructionProblem {
            hr_grid: hr_grid.clone(),
            a,
            at,
            y,
            settings: *settings,
        })
    }

    pub fn observation_count(&self) -> usize {
        self.y.len()
    }

    /// Data term `Σ‖Aξ − y‖²` and its gradient.
    fn data_term(&self, x: &[f64], residual: &mut [f64], grad: &mut [f64]) -> f64 {
        self.a.mul_vec_into(x, residual);
        let f: f64 = residual
            .iter_mut()
            .zip(&self.y)
            .map(|(r, y)| {
                *r -= y;
                *r * *r
            })
            .sum();
        self.at.mul_vec_into(residual, grad);
        grad.iter_mut().for_each(|g| *g *= 2.0);
        f
    }

    fn initial_guess(&self) -> Vec<f64> {
        let back = self.at.mul_vec(&self.y);
        let ones = vec![1.0; self.y.len()];
        let weight = self.at.mul_vec(&ones);
        let mut x: Vec<f64> = back
            .iter()
            .zip(&weight)
            .map(|(b, w)| if *w > 1e-8 { b / w } else { 0.0 })
            .collect();
        // fill voxels no slice sees with the mean of those observed
        let seen: Vec<f64> = x.iter().zip(&weight).filter(|(_, w)| **w > 1e-8).map(|(v, _)| *v).collect();
        if !seen.is_empty() && seen.len() < x.len() {
            let mean = seen.iter().sum::<f64>() / seen.len() as f64;
            for (v, w) in x.iter_mut().zip(&weight) {
                if *w <= 1e-8 {
                    *v = mean;
                }
            }
        }
        x
    }

    pub fn solve(&self, reg: &Regularizer) -> Result<(Volume3, SolveReport)> {
        reg.validate()?;
        if reg.alpha == 0.0 && self.y.len() < self.hr_grid.len() {
            return Err(Error::IllPosed(format!(
                "alpha = 0 with {} observations for {} unknowns",
                self.y.len(),
                self.hr_grid.len()
            )));
        }
        let n = self.hr_grid.len();
        let mut residual = vec![0.0; self.y.len()];
        let mut dgrad = vec![0.0; n];
        let mut eval = |x: &[f64], grad: &mut [f64]| -> (f64, f64, f64) {
            let d = self.data_term(x, &mut residual, &mut dgrad);
            let (r, rg) = if reg.alpha > 0.0 {
                penalty_raw(reg, x, &self.hr_grid)
            } else {
                (0.0, vec![0.0; n])
            };
            for i in 0..n {
                grad[i] = dgrad[i] + reg.alpha * rg[i];
            }
            (d + reg.alpha * r, d, r)
        };
        let x0 = self.initial_guess();
        let out = lbfgs(&mut eval, x0, &self.settings)?;
        let volume = Volume3::new(self.hr_grid.clone(), out.x)?;
        Ok((
            volume,
            SolveReport {
                iterations: out.iterations,
                data_residual_norm: out.data.max(0.0).sqrt(),
                regularizer_value: out.reg,
                objective: out.f,
                converged: out.converged,
                objective_history: out.history,
            },
        ))
    }
}

struct LbfgsOutcome {
    x: Vec<f64>,
    f: f64,
    data: f64,
    reg: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lbfgs<F>(eval: &mut F, mut x: Vec<f64>, settings: &SolverSettings) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> (f64, f64, f64),
{
    let n = x.len();
    let mut g = vec![0.0; n];
    let (mut f, mut fd, mut fr) = eval(&x, &mut g);
    if !f.is_finite() {
        return Err(Error::Numerical("objective not finite at initial guess".into()));
    }
    let g0 = dot(&g, &g).sqrt();
    let mut history = vec![f];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = g0 == 0.0;
    let mut iterations = 0;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    while !converged && iterations < settings.max_iterations {
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        let mut step = 1.0;
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            step = 1.0 / dot(&g, &g).sqrt().max(1.0);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (a - b) * s[i];
            }
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            step = 1.0 / (-slope).sqrt().max(1.0);
        }

        // backtracking Armijo search
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let (fn_, dn, rn) = eval(&x_new, &mut g_new);
            if fn_.is_finite() && fn_ <= f + 1e-4 * step * slope {
                accepted = Some((fn_, dn, rn));
                break;
            }
            step *= 0.5;
        }
        let Some((fn_, dn, rn)) = accepted else {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        };
        iterations += 1;

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let yv: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &yv);
        let decrease = (f - fn_) / f.abs().max(1e-300);
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = fn_;
        fd = dn;
        fr = rn;
        history.push(f);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
            if mem.len() == settings.history.max(1) {
                mem.pop_front();
            }
            mem.push_back((s, yv, 1.0 / sy));
        }
        let gn = dot(&g, &g).sqrt();
        if decrease < settings.relative_tolerance || gn < settings.gradient_tolerance * g0 {
            converged = true;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("solution not finite".into()));
    }
    Ok(LbfgsOutcome {
        x,
        f,
        data: fd,
        reg: fr,
        iterations,
        converged,
        history,
    })
}

/// Minimize `Σ_k ‖A_k ξ − y_k‖² + α·R(ξ)` on `hr_grid`.
pub fn reconstruct_timepoint(
    slices: &[Slice2],
    reg: &Regularizer,
    hr_grid: &ImageGrid,
    settings: &SolverSettings,
) -> Result<(Volume3, SolveReport)> {
    reg.validate()?;
    ReconstructionProblem::new(slices, hr_grid, settings)?.solve(reg)
}

/// One reconstruction per α; residual norm against the penalty value.
pub fn l_curve(
    slices: &[Slice2],
    kind: RegularizerKind,
    gamma: f64,
    alphas: &[f64],
    hr_grid: &ImageGrid,
    settings: &SolverSettings,
) -> Result<Vec<LCurvePoint>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("no alpha values".into()));
    }
    if alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::InvalidArgument("alpha values must be > 0".into()));
    }
    if alphas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("alpha values must be ascending".into()));
    }
    let problem = ReconstructionProblem::new(slices, hr_grid, settings)?;
    alphas
        .iter()
        .map(|&alpha| {
            let reg = Regularizer::new(kind, alpha, gamma)?;
            let (_, report) = problem.solve(&reg)?;
            Ok(LCurvePoint {
                alpha,
                residual_norm: report.data_residual_norm,
                solution_seminorm: report.regularizer_value,
            })
        })
        .collect()
}

/// Index of the point of maximum curvature of the log–log curve, or `None`
/// for fewer than three points.
pub fn l_curve_corner(points: &[LCurvePoint]) -> Option<usize> {
    if points.len() < 3 {
        return None;
    }
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.residual_norm.max(1e-300).ln(), p.solution_seminorm.max(1e-300).ln()))
        .collect();
    let mut best = None;
    let mut best_k = f64::NEG_INFINITY;
    for i in 1..xy.len() - 1 {
        let (a, b, c) = (xy[i - 1], xy[i], xy[i + 1]);
        // Menger curvature of three consecutive points
        let area2 = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        let ab = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let bc = ((c.0 - b.0).powi(2) + (c.1 - b.1).powi(2)).sqrt();
        let ca = ((a.0 - c.0).powi(2) + (a.1 - c.1).powi(2)).sqrt();
        let denom = ab * bc * ca;
        let k = if denom > 0.0 { 2.0 * area2.abs() / denom } else { 0.0 };
        if k > best_k {
            best_k = k;
            best = Some(i);
        }
    }
    best
}
