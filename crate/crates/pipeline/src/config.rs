//! Run configuration, presets and the reproducibility stamp.

use std::path::{Path, PathBuf};

use moco_core::metrics::OutlierConfig;
use moco_core::reference::ReferenceBuildSettings;
use moco_core::registration::RegistrationSettings;
use moco_core::sim::{MotionProfile, SimulationSettings};
use moco_core::srr::{Regularizer, RegularizerKind, SolverSettings};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// uncorrected input, copied unchanged
    Unc,
    /// one rigid transform per frame
    V2v,
    /// one rigid transform per slice
    S2v,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Unc, Method::V2v, Method::S2v];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unc => "unc",
            Method::V2v => "v2v",
            Method::S2v => "s2v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub alpha: f64,
    /// Huber threshold, intensity units per voxel step
    pub gamma: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig { kind: RegularizerKind::Huber, alpha: 0.1, gamma: 0.05 }
    }
}

impl RegularizerConfig {
    pub fn regularizer(&self) -> Result<Regularizer> {
        Ok(Regularizer::new(self.kind, self.alpha, self.gamma)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Rotation,
    Translation,
}

/// One dataset per amplitude, applied on all three axes of the swept kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub kind: SweepKind,
    pub amplitudes: Vec<f64>,
}

impl Sweep {
    /// 0 to ±14° in steps of 2°.
    pub fn rotation() -> Sweep {
        Sweep { kind: SweepKind::Rotation, amplitudes: (0..=7).map(|k| 2.0 * k as f64).collect() }
    }

    /// 0 to ±8 mm in steps of 2 mm.
    pub fn translation() -> Sweep {
        Sweep { kind: SweepKind::Translation, amplitudes: (0..=4).map(|k| 2.0 * k as f64).collect() }
    }

    pub fn dataset_name(&self, amplitude: f64) -> String {
        let prefix = match self.kind {
            SweepKind::Rotation => "rot",
            SweepKind::Translation => "trans",
        };
        format!("{prefix}_{amplitude}")
    }

    pub fn profile(&self, base: &MotionProfile, amplitude: f64) -> MotionProfile {
        match self.kind {
            SweepKind::Rotation => MotionProfile { rot_amplitude: [amplitude; 3], trans_amplitude: [0.0; 3], ..*base },
            SweepKind::Translation => MotionProfile { rot_amplitude: [0.0; 3], trans_amplitude: [amplitude; 3], ..*base },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub hr_dims: [usize; 3],
    /// mm
    pub hr_spacing: [f64; 3],
    /// mm, spacing of the simulated acquisition
    pub lr_spacing: [f64; 3],
    pub frames: usize,
    /// phantom semi-axes as fractions of the source extent
    pub phantom_radii_fraction: [f64; 3],
    pub motion: MotionProfile,
    pub acquisition: SimulationSettings,
    /// parcels written as the node label volume
    pub parcels: usize,
    pub networks: usize,
    /// relative amplitude of the planted periodic parcel activity
    pub signal_amplitude: f64,
    pub sweep: Option<Sweep>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            hr_dims: [128, 128, 64],
            hr_spacing: [1.5; 3],
            lr_spacing: [3.0; 3],
            frames: 96,
            phantom_radii_fraction: [0.31, 0.35, 0.35],
            motion: MotionProfile {
                rot_amplitude: [4.0; 3],
                trans_amplitude: [2.0; 3],
                period: 8.0,
                interleave: 3,
                phase: 0.0,
            },
            acquisition: SimulationSettings { noise_sigma: 0.01, ..Default::default() },
            parcels: 24,
            networks: 3,
            signal_amplitude: 0.05,
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub std: bool,
    pub ssim: bool,
    pub outliers: bool,
    pub motion: bool,
    pub connectivity: bool,
    pub outlier: OutlierConfig,
    /// mm, head radius for framewise displacement
    pub fd_radius: f64,
    pub degree_threshold: f64,
    /// voxel mask whose time courses are the nuisance signals
    pub nuisance_mask: Option<PathBuf>,
    pub nuisance_components: usize,
    /// node index used as seed for the seed correlation map
    pub seed_node: Option<usize>,
    /// node subset (downsampled node mode), by index
    pub node_subset: Option<Vec<usize>>,
    /// edge length in voxels of the cubic nodes used when no node set exists
    pub node_block: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            std: true,
            ssim: true,
            outliers: true,
            motion: true,
            connectivity: true,
            outlier: OutlierConfig::default(),
            fd_radius: moco_core::metrics::DEFAULT_FD_RADIUS,
            degree_threshold: 0.3,
            nuisance_mask: None,
            nuisance_components: 5,
            seed_node: None,
            node_subset: None,
            node_block: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LCurveConfig {
    /// ascending
    pub alphas: Vec<f64>,
    pub kinds: Vec<RegularizerKind>,
    pub frame: usize,
}

impl Default for LCurveConfig {
    fn default() -> Self {
        LCurveConfig {
            alphas: (0..=12).map(|k| 10f64.powf(-3.0 + 0.5 * k as f64)).collect(),
            kinds: vec![RegularizerKind::Tk1, RegularizerKind::Tv, RegularizerKind::Huber],
            frame: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// evaluated run directories to aggregate; the output directory when empty
    pub subjects: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// 4D series; the simulated series in the output directory when unset
    pub input: Option<PathBuf>,
    /// brain mask on the series grid
    pub mask: Option<PathBuf>,
    /// node set as a NIfTI label volume or a JSON node list
    pub nodes: Option<PathBuf>,
    /// simulated ground truth transform table
    pub truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub subject: String,
    /// interleave factor of the acquisition (shots per frame)
    pub interleave: usize,
    pub method: Method,
    pub regularizer: RegularizerConfig,
    pub reference: ReferenceBuildSettings,
    pub registration: RegistrationSettings,
    pub solver: SolverSettings,
    pub simulation: SimulationConfig,
    pub metrics: MetricsConfig,
    pub lcurve: LCurveConfig,
    pub report: ReportConfig,
    pub seed: u64,
    /// not part of the config hash; outputs do not depend on it
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: None,
            mask: None,
            nodes: None,
            truth: None,
            output_dir: PathBuf::from("out"),
            subject: "sub-01".into(),
            interleave: 3,
            method: Method::S2v,
            regularizer: RegularizerConfig::default(),
            reference: ReferenceBuildSettings::default(),
            registration: RegistrationSettings::default(),
            solver: SolverSettings::default(),
            simulation: SimulationConfig::default(),
            metrics: MetricsConfig::default(),
            lcurve: LCurveConfig::default(),
            report: ReportConfig::default(),
            seed: 0,
            workers: None,
        }
    }
}

/// Named starting points.
pub const PRESETS: [&str; 4] = ["best-s2v", "best-v2v", "rotation-sweep", "translation-sweep"];

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = PipelineConfig::default();
        match name {
            "best-s2v" => {}
            "best-v2v" => {
                c.method = Method::V2v;
                c.regularizer = RegularizerConfig { kind: RegularizerKind::Tk1, alpha: 0.05, ..c.regularizer };
            }
            "rotation-sweep" => c.simulation.sweep = Some(Sweep::rotation()),
            "translation-sweep" => c.simulation.sweep = Some(Sweep::translation()),
            other => {
                return Err(PipelineError::Usage(format!("unknown preset '{other}', expected one of {PRESETS:?}")))
            }
        }
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: PipelineConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Usage(format!("invalid config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: moco_core::Error| PipelineError::Usage(e.to_string());
        if self.method != Method::Unc {
            self.regularizer.regularizer().map_err(|e| PipelineError::Usage(e.to_string()))?;
            if self.regularizer.alpha <= 0.0 {
                return Err(PipelineError::Usage("alpha must be > 0 for V2V and S2V".into()));
            }
        }
        self.reference.validate().map_err(usage)?;
        self.registration.validate().map_err(usage)?;
        self.simulation.motion.validate().map_err(usage)?;
        self.metrics.outlier.validate().map_err(usage)?;
        let t = self.metrics.degree_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(PipelineError::Usage(format!("degree threshold {t} outside (0, 1)")));
        }
        if self.metrics.node_block == 0 {
            return Err(PipelineError::Usage("node_block must be >= 1".into()));
        }
        if self.simulation.frames == 0 || self.simulation.hr_dims.contains(&0) {
            return Err(PipelineError::Usage("simulation sizes must be >= 1".into()));
        }
        if self.simulation.acquisition.noise_sigma < 0.0 || self.simulation.signal_amplitude < 0.0 {
            return Err(PipelineError::Usage("noise and signal amplitude must be >= 0".into()));
        }
        if self.interleave == 0 {
            return Err(PipelineError::Usage("interleave must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(PipelineError::Usage("workers must be >= 1".into()));
        }
        Ok(())
    }

    /// First 128 bits of the SHA-256 of the canonical JSON of everything that
    /// can change outputs: the worker count and the output directory are left
    /// out. The truncation keeps the stamp within the 80-byte NIfTI description.
    pub fn hash(&self) -> String {
        let canonical = PipelineConfig { workers: None, output_dir: PathBuf::new(), ..self.clone() };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..16])
    }

    /// Tool name, version and config hash, written into every output.
    pub fn stamp(&self) -> String {
        format!("moco {} config {}", env!("CARGO_PKG_VERSION"), self.hash())
    }

    pub fn sim_dir(&self) -> PathBuf {
        self.output_dir.join("sim")
    }

    pub fn input_path(&self) -> PathBuf {
        self.input.clone().unwrap_or_else(|| self.sim_dir().join("series.nii"))
    }

    pub fn mask_path(&self) -> PathBuf {
        self.mask.clone().unwrap_or_else(|| self.sim_dir().join("mask.nii"))
    }

    /// Explicit node set, else the simulated parcels when present.
    pub fn nodes_path(&self) -> Option<PathBuf> {
        self.nodes.clone().or_else(|| {
            let p = self.sim_dir().join("parcels.nii");
            (self.input.is_none() && p.exists()).then_some(p)
        })
    }

    pub fn truth_path(&self) -> Option<PathBuf> {
        self.truth.clone().or_else(|| {
            let p = self.sim_dir().join("truth.csv");
            (self.input.is_none() && p.exists()).then_some(p)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(PipelineConfig::from_json(&json).unwrap(), c);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn hash_ignores_workers_and_output_dir() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { workers: Some(3), output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 32);
        assert!(a.stamp().len() <= 80);
    }

    #[test]
    fn presets_and_bad_configs() {
        let v = PipelineConfig::preset("best-v2v").unwrap();
        assert_eq!(v.method, Method::V2v);
        assert_eq!(v.regularizer.kind, RegularizerKind::Tk1);
        assert_eq!(v.regularizer.alpha, 0.05);
        let s = PipelineConfig::preset("best-s2v").unwrap();
        assert_eq!((s.method, s.regularizer.kind, s.regularizer.alpha), (Method::S2v, RegularizerKind::Huber, 0.1));
        assert_eq!(s.reference.n_stacks, 15);
        let sweep = PipelineConfig::preset("rotation-sweep").unwrap().simulation.sweep.unwrap();
        assert_eq!(sweep.amplitudes, vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0]);
        assert_eq!(Sweep::translation().amplitudes, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert!(PipelineConfig::preset("nope").is_err());
        assert!(PipelineConfig::from_json(r#"{"unknown": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"regularizer": {"alpha": -1}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"method": "unc", "regularizer": {"alpha": 0}}"#).is_ok());
    }
}
