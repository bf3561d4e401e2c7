//! Synthetic brain-like test object: nested smooth-edged ellipsoids with
//! asymmetric inclusions so rigid poses are identifiable.

use nalgebra::Vector3;

use crate::grid::{ImageGrid, Volume3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrainPhantom {
    pub center: Vector3<f64>,
    /// semi-axes of the outer boundary, mm
    pub radii: [f64; 3],
    /// half-width of the smoothstep edge, mm
    pub edge: f64,
}

struct Blob {
    at: [f64; 3],
    radii: [f64; 3],
    delta: f64,
}

const BLOBS: [Blob; 6] = [
    // white matter
    Blob { at: [0.0, 0.05, 0.0], radii: [0.72, 0.7, 0.68], delta: 0.25 },
    // ventricles
    Blob { at: [-0.17, 0.12, 0.05], radii: [0.11, 0.3, 0.22], delta: -0.6 },
    Blob { at: [0.15, 0.1, 0.05], radii: [0.1, 0.26, 0.2], delta: -0.55 },
    // bright inclusions
    Blob { at: [0.45, -0.38, 0.25], radii: [0.14, 0.12, 0.2], delta: 0.3 },
    Blob { at: [-0.34, 0.52, -0.32], radii: [0.12, 0.14, 0.16], delta: 0.28 },
    Blob { at: [0.08, -0.58, -0.42], radii: [0.16, 0.1, 0.12], delta: -0.25 },
];

// scattered cortical lumps, normalized coordinates
const LUMPS: [[f64; 3]; 16] = [
    [0.62, 0.21, -0.12],
    [-0.55, -0.30, 0.18],
    [0.18, 0.66, 0.10],
    [-0.20, -0.64, -0.15],
    [0.48, -0.05, 0.48],
    [-0.42, 0.30, 0.44],
    [0.05, 0.30, -0.62],
    [-0.10, -0.25, 0.64],
    [0.70, -0.30, -0.05],
    [-0.68, 0.05, -0.22],
    [0.30, 0.45, -0.45],
    [-0.35, -0.50, -0.40],
    [0.25, -0.30, 0.58],
    [-0.60, 0.45, 0.05],
    [0.40, 0.60, 0.25],
    [0.00, -0.72, 0.20],
];

impl BrainPhantom {
    pub fn new(center: Vector3<f64>, radii: [f64; 3]) -> Self {
        BrainPhantom { center, radii, edge: 1.5 }
    }

    /// Phantom centered in `grid` with semi-axes 38% of its extent.
    pub fn fitted(grid: &ImageGrid) -> Self {
        let e = grid.extent();
        Self::new(grid.center(), [0.38 * e[0], 0.38 * e[1], 0.38 * e[2]])
    }

    fn local(&self, p: &Vector3<f64>) -> [f64; 3] {
        let d = p - self.center;
        [d[0] / self.radii[0], d[1] / self.radii[1], d[2] / self.radii[2]]
    }

    fn min_radius(&self) -> f64 {
        self.radii.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn soft_inside(&self, u: [f64; 3], at: [f64; 3], radii: [f64; 3]) -> f64 {
        let r = (((u[0] - at[0]) / radii[0]).powi(2)
            + ((u[1] - at[1]) / radii[1]).powi(2)
            + ((u[2] - at[2]) / radii[2]).powi(2))
        .sqrt();
        let scale = self.min_radius() * radii.iter().copied().fold(f64::INFINITY, f64::min);
        let t = (((r - 1.0) * scale + self.edge) / (2.0 * self.edge)).clamp(0.0, 1.0);
        1.0 - t * t * (3.0 - 2.0 * t)
    }

    pub fn value(&self, p: &Vector3<f64>) -> f64 {
        let u = self.local(p);
        let brain = self.soft_inside(u, [0.0; 3], [1.0; 3]);
        if brain == 0.0 {
            return 0.0;
        }
        let mut v = 0.5;
        for b in &BLOBS {
            v += b.delta * self.soft_inside(u, b.at, b.radii);
        }
        for (k, at) in LUMPS.iter().enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            v += sign * 0.3 * self.soft_inside(u, *at, [0.16; 3]);
        }
        let texture = 0.04 * (5.1 * u[0] + 1.3).sin() * (4.3 * u[1] - 0.7).sin() * (3.7 * u[2] + 0.4).cos();
        (brain * (v + texture)).max(0.0)
    }

    pub fn inside(&self, p: &Vector3<f64>) -> bool {
        let u = self.local(p);
        u[0] * u[0] + u[1] * u[1] + u[2] * u[2] < 1.0
    }

    pub fn render(&self, grid: &ImageGrid) -> Volume3 {
        Volume3::from_world_fn(grid.clone(), |p| self.value(p))
    }

    /// Binary brain mask (1 inside the outer ellipsoid).
    pub fn mask(&self, grid: &ImageGrid) -> Volume3 {
        Volume3::from_world_fn(grid.clone(), |p| if self.inside(p) { 1.0 } else { 0.0 })
    }

    /// Label volume with `n` compact parcels (labels 1..=n, 0 outside the
    /// brain), each voxel assigned to the nearest of `n` seeds spread over a
    /// shell at half the brain radius.
    pub fn parcels(&self, grid: &ImageGrid, n: usize) -> Volume3 {
        let seeds = self.parcel_seeds(n);
        Volume3::from_world_fn(grid.clone(), |p| {
            if !self.inside(p) || n == 0 {
                return 0.0;
            }
            let u = self.local(p);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, s) in seeds.iter().enumerate() {
                let d = (u[0] - s[0]).powi(2) + (u[1] - s[1]).powi(2) + (u[2] - s[2]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            (best + 1) as f64
        })
    }

    /// Seed positions in normalized phantom coordinates (Fibonacci sphere).
    pub fn parcel_seeds(&self, n: usize) -> Vec<[f64; 3]> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|k| {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let th = golden * k as f64;
                [0.55 * r * th.cos(), 0.55 * r * th.sin(), 0.55 * z]
            })
            .collect()
    }

    /// Seed position of parcel `k` (0-based) in world coordinates.
    pub fn seed_world(&self, n: usize, k: usize) -> Vector3<f64> {
        let s = self.parcel_seeds(n)[k];
        self.center + Vector3::new(s[0] * self.radii[0], s[1] * self.radii[1], s[2] * self.radii[2])
    }
}

/// Planted periodic activity of network `network` at frame `t`, in [−1, 1].
/// Networks differ in period and phase.
pub fn network_signal(network: usize, t: usize) -> f64 {
    let period = 6.0 + 2.5 * network as f64;
    (2.0 * std::f64::consts::PI * t as f64 / period + 0.9 * network as f64).sin()
}

/// `base` with every parcel scaled by `1 + amplitude · s(t)`, where parcel
/// label `l` follows network `(l − 1) mod n_networks`. Voxels with label 0
/// are unchanged.
pub fn modulate_parcels(base: &Volume3, parcels: &Volume3, n_networks: usize, amplitude: f64, t: usize) -> Volume3 {
    let gains: Vec<f64> = (0..n_networks.max(1)).map(|n| 1.0 + amplitude * network_signal(n, t)).collect();
    let data = base
        .data()
        .iter()
        .zip(parcels.data())
        .map(|(&v, &l)| {
            let l = l.round() as usize;
            if l == 0 {
                v
            } else {
                v * gains[(l - 1) % gains.len()]
            }
        })
        .collect();
    Volume3::new(base.grid().clone(), data).expect("same grid")
}
