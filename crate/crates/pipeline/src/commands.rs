//! The subcommands. Each reads its inputs from files and writes its outputs
//! to the output directory, so a run can be resumed at any step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use moco_core::connectivity::{
    carpet_matrix, correlation_difference, correlation_matrix, degree_values, extract_node_series, nuisance_regress,
    qcfc_slope, seed_correlation_map, CorrelationMatrix, Node, NodeSet, NodeTimeSeries,
};
use moco_core::grid::{compose, ImageGrid, RigidTransform3D, Slice2, Volume3, Volume4};
use moco_core::io::report::fmt_f64;
use moco_core::io::{read_report_csv, write_report, MetricKey, MetricValue, MetricsReport, ReportFormat};
use moco_core::metrics::{framewise_displacement, outlier_ratio, series_ssim, temporal_std_map};
use moco_core::phantom::{modulate_parcels, BrainPhantom};
use moco_core::reference::build_reference;
use moco_core::registration::recentered;
use moco_core::sim::{downsampled_grid, simulate_dynamic_series, MotionProfile};
use moco_core::srr::{l_curve, l_curve_corner, RegularizerKind};
use moco_core::{transform_mae, Error};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{Method, PipelineConfig, RegularizerConfig};
use crate::correct::{correct_series, mean_frame_transforms, CorrectionSettings};
use crate::error::{PipelineError, Result};
use crate::files::*;

pub const REFERENCE_FILE: &str = "reference.nii";
pub const SUMMARY_FILE: &str = "summary.csv";
const METRIC_FAMILIES: [&str; 3] = ["quality", "motion", "connectivity"];

pub fn corrected_file(m: Method) -> String {
    format!("corrected_{}.nii", m.name())
}

pub fn transforms_file(m: Method) -> String {
    format!("transforms_{}.csv", m.name())
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

/// Render the phantom and simulate one dataset (or one per sweep amplitude).
pub fn simulate(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let sim = &cfg.simulation;
    let stamp = cfg.stamp();
    let hg = ImageGrid::centered_at(sim.hr_dims, sim.hr_spacing, [0.0; 3])?;
    let lg = downsampled_grid(&hg, sim.lr_spacing)?;
    let e = hg.extent();
    let f = sim.phantom_radii_fraction;
    let ph = BrainPhantom::new(hg.center(), [f[0] * e[0], f[1] * e[1], f[2] * e[2]]);
    let hr = ph.render(&hg);
    let hr_parcels = ph.parcels(&hg, sim.parcels);
    let acquisition = moco_core::sim::SimulationSettings { seed: cfg.seed, ..sim.acquisition };
    let datasets: Vec<(PathBuf, MotionProfile)> = match &sim.sweep {
        None => vec![(cfg.sim_dir(), sim.motion)],
        Some(sw) => sw
            .amplitudes
            .iter()
            .map(|&a| (cfg.sim_dir().join(sw.dataset_name(a)), sw.profile(&sim.motion, a)))
            .collect(),
    };
    for (dir, profile) in &datasets {
        ensure_dir(dir)?;
        let active = |t: usize| {
            (sim.signal_amplitude > 0.0).then(|| modulate_parcels(&hr, &hr_parcels, sim.networks, sim.signal_amplitude, t))
        };
        let s = simulate_dynamic_series(&hr, active, profile, &lg, sim.frames, &acquisition)?;
        write_series_stamped(&dir.join("series.nii"), &s.series, &stamp, None, None)?;
        write_volume_stamped(&dir.join("mask.nii"), &ph.mask(&lg), &stamp)?;
        write_volume_stamped(&dir.join("parcels.nii"), &ph.parcels(&lg, sim.parcels), &stamp)?;
        write_volume_stamped(&dir.join("hr_source.nii"), &hr, &stamp)?;
        let c = lg.center();
        write_transforms(&dir.join("truth.csv"), &s.truth, lg.dims()[2], [c[0], c[1], c[2]], &stamp)?;
    }
    Ok(datasets.into_iter().map(|d| d.0).collect())
}

fn load_input(cfg: &PipelineConfig) -> Result<(Volume4, moco_core::io::nifti::NiftiInfo, Volume3)> {
    let (series, info) = read_series(&cfg.input_path())?;
    let mask = read_mask(&cfg.mask_path(), &series)?;
    Ok((series, info, mask))
}

fn center_of(g: &ImageGrid) -> [f64; 3] {
    let c = g.center();
    [c[0], c[1], c[2]]
}

/// Reference volume, per-slice keep flags and the reference-building transforms.
pub fn build_ref(cfg: &PipelineConfig) -> Result<Volume3> {
    let (series, _, mask) = load_input(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let stamp = cfg.stamp();
    let b = build_reference(&series, &mask, &cfg.reference)?;
    write_volume_stamped(&cfg.output_dir.join(REFERENCE_FILE), &b.reference, &stamp)?;
    let rows: Vec<Vec<String>> = b
        .flags
        .iter()
        .map(|f| {
            vec![
                f.frame.to_string(),
                f.slice.to_string(),
                u8::from(f.kept).to_string(),
                f.ncc.map_or_else(String::new, fmt_f64),
            ]
        })
        .collect();
    write_csv(&cfg.output_dir.join("reference_flags.csv"), &["frame", "slice", "kept", "ncc"], &rows, &stamp)?;
    let g = series.grid();
    write_transforms(&cfg.output_dir.join("reference_transforms.csv"), &b.transforms, g.dims()[2], center_of(g), &stamp)?;
    Ok(b.reference)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorrectionMeta {
    method: Method,
    regularizer: Option<RegularizerConfig>,
}

/// Motion-correct the input with `cfg.method`. The reference from
/// `build-ref` is used when present, otherwise it is built first.
pub fn correct(cfg: &PipelineConfig) -> Result<()> {
    let (series, info, mask) = load_input(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let stamp = cfg.stamp();
    let m = cfg.method;
    let out = |name: String| cfg.output_dir.join(name);
    if m == Method::Unc {
        write_series_stamped(&out(corrected_file(m)), &series, &stamp, Some(info.datatype), info.repetition_time_ms)?;
        write_json(&out("correction_unc.json".into()), CorrectionMeta { method: m, regularizer: None }, &stamp)?;
        return Ok(());
    }
    let ref_path = out(REFERENCE_FILE.into());
    let reference = if ref_path.exists() { read_volume(&ref_path)? } else { build_ref(cfg)? };
    let reg = cfg.regularizer.regularizer()?;
    let settings = CorrectionSettings {
        method: m,
        interleave: cfg.interleave,
        regularizer: &reg,
        registration: &cfg.registration,
        solver: &cfg.solver,
    };
    let c = correct_series(&series, &mask, &reference, &settings)?;
    let g = series.grid();
    write_series_stamped(&out(corrected_file(m)), &c.series, &stamp, None, info.repetition_time_ms)?;
    write_transforms(&out(transforms_file(m)), &c.slice_transforms, g.dims()[2], center_of(g), &stamp)?;
    let rows: Vec<Vec<String>> = c
        .reports
        .iter()
        .enumerate()
        .map(|(t, r)| {
            vec![
                t.to_string(),
                r.iterations.to_string(),
                fmt_f64(r.data_residual_norm),
                fmt_f64(r.regularizer_value),
                fmt_f64(r.objective),
                u8::from(r.converged).to_string(),
            ]
        })
        .collect();
    let header = ["t", "iterations", "residual_norm", "regularizer_value", "objective", "converged"];
    write_csv(&out(format!("solve_{}.csv", m.name())), &header, &rows, &stamp)?;
    let meta = CorrectionMeta { method: m, regularizer: Some(cfg.regularizer) };
    write_json(&out(format!("correction_{}.json", m.name())), meta, &stamp)
}

/// Cubes of `block` voxels over the mask, each holding at least one masked voxel.
pub fn block_nodes(mask: &Volume3, block: usize) -> Result<NodeSet> {
    let g = mask.grid();
    let mut cubes: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
    for (i, &m) in mask.data().iter().enumerate() {
        if m > 0.5 {
            let c = g.coords(i);
            cubes.entry([c[2] / block, c[1] / block, c[0] / block]).or_default().push(i);
        }
    }
    let nodes = cubes
        .into_iter()
        .map(|(k, voxels)| {
            let sum = voxels.iter().fold(nalgebra::Vector3::zeros(), |acc, &i| acc + g.voxel_center(i));
            let c = sum / voxels.len() as f64;
            Node { label: format!("b{}_{}_{}", k[2], k[1], k[0]), coords: [c[0], c[1], c[2]], voxels }
        })
        .collect();
    Ok(NodeSet::new(nodes)?)
}

fn node_set(cfg: &PipelineConfig, mask: &Volume3) -> Result<NodeSet> {
    let nodes = match cfg.nodes_path() {
        Some(p) => read_nodes(&p)?,
        None => block_nodes(mask, cfg.metrics.node_block)?,
    };
    match &cfg.metrics.node_subset {
        Some(idx) => Ok(nodes.subset(idx)?),
        None => Ok(nodes),
    }
}

/// Estimated transforms are relative to the reference space, which sits at
/// an unknown constant pose of the phantom. Remove the mean relative pose
/// before comparing with the ground truth.
pub fn align_to_truth(estimated: &[RigidTransform3D], truth: &[RigidTransform3D], center: [f64; 3]) -> Vec<RigidTransform3D> {
    let c = center.into();
    let mut p = [0.0; 6];
    for (e, t) in estimated.iter().zip(truth) {
        let q = recentered(&compose(&t.inverse(), e), &c).params();
        for k in 0..6 {
            p[k] += q[k];
        }
    }
    let offset = RigidTransform3D::from_params(p.map(|v| v / estimated.len() as f64), center);
    let undo = offset.inverse();
    estimated.iter().map(|e| recentered(&compose(e, &undo), &c)).collect()
}

#[derive(Serialize, Deserialize)]
struct NodesDoc {
    nodes: NodeSet,
}

fn key(cfg: &PipelineConfig, meta: &CorrectionMeta) -> MetricKey {
    match meta.regularizer {
        Some(r) if meta.method != Method::Unc => {
            MetricKey::new(&cfg.subject, meta.method.name(), r.kind.name(), fmt_f64(r.alpha))
        }
        _ => MetricKey::new(&cfg.subject, meta.method.name(), "none", "none"),
    }
}

/// Quality, motion and connectivity metrics of every available method.
pub fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let (input, _, mask) = load_input(cfg)?;
    let stamp = cfg.stamp();
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let wanted = dir.join(corrected_file(cfg.method));
    if cfg.method != Method::Unc {
        require(&wanted)?;
    }
    let g = input.grid().clone();
    let nz = g.dims()[2];
    let center = center_of(&g);
    let truth = match cfg.truth_path() {
        Some(p) => Some(read_transforms(&p, nz, center)?),
        None => None,
    };
    let nodes = if cfg.metrics.connectivity { Some(node_set(cfg, &mask)?) } else { None };
    if let Some(n) = &nodes {
        write_json(&dir.join("nodes.json"), NodesDoc { nodes: n.clone() }, &stamp)?;
    }
    let nuisance_mask = match &cfg.metrics.nuisance_mask {
        Some(p) => Some(read_mask(p, &input)?),
        None => None,
    };
    let mut reports: BTreeMap<&str, MetricsReport> = METRIC_FAMILIES.iter().map(|f| (*f, MetricsReport::new())).collect();
    for m in Method::ALL {
        let path = dir.join(corrected_file(m));
        let (series, meta) = if path.exists() {
            let meta_path = dir.join(format!("correction_{}.json", m.name()));
            let meta = if meta_path.exists() {
                read_json::<CorrectionMeta>(&meta_path)?
            } else {
                CorrectionMeta { method: m, regularizer: None }
            };
            (read_series(&path)?.0, meta)
        } else if m == Method::Unc {
            (input.clone(), CorrectionMeta { method: m, regularizer: None })
        } else {
            continue;
        };
        if series.grid().dims() != g.dims() || series.t_count() != input.t_count() {
            return Err(Error::InvalidGrid(format!("{} does not match the input series", path.display())).into());
        }
        let k = key(cfg, &meta);
        let mq = reports.get_mut("quality").expect("family");
        let diff = input_difference(&series, &input, &mask);
        mq.insert_scalar(k.clone(), "input_difference", diff)?;
        if cfg.metrics.std {
            let (map, mean) = temporal_std_map(&series, &mask)?;
            write_volume_stamped(&dir.join(format!("std_{}.nii", m.name())), &map, &stamp)?;
            mq.insert_scalar(k.clone(), "temporal_std", mean)?;
        }
        if cfg.metrics.ssim {
            mq.insert_scalar(k.clone(), "ssim", series_ssim(&series, &mask)?)?;
        }
        if cfg.metrics.outliers {
            let o = outlier_ratio(&series, &mask, &cfg.metrics.outlier)?;
            mq.insert_scalar(k.clone(), "outlier_ratio", o.ratio)?;
            mq.insert_vector(k.clone(), "outlier_voxel_fraction", o.frame_fraction)?;
        }
        let tpath = dir.join(transforms_file(m));
        if cfg.metrics.motion && m != Method::Unc && tpath.exists() {
            let slices = read_transforms(&tpath, nz, center)?;
            let mmo = reports.get_mut("motion").expect("family");
            let frames = mean_frame_transforms(&slices, nz);
            let fd = framewise_displacement(&frames, cfg.metrics.fd_radius)?;
            mmo.insert_scalar(k.clone(), "mean_fd", fd.iter().sum::<f64>() / fd.len() as f64)?;
            mmo.insert_vector(k.clone(), "fd", fd)?;
            if let Some(tr) = &truth {
                if tr.len() == slices.len() {
                    let aligned = align_to_truth(&slices, tr, center);
                    mmo.insert_vector(k.clone(), "mae", transform_mae(&aligned, tr)?.to_vec())?;
                }
            }
        }
        if let Some(nodes) = &nodes {
            let mut ts = extract_node_series(&series, nodes)?;
            if let Some(nm) = &nuisance_mask {
                let idx: Vec<usize> = (0..g.len()).filter(|&i| nm.data()[i] > 0.5).collect();
                let nuisance = DMatrix::from_fn(idx.len(), series.t_count(), |r, t| series.frame(t).data()[idx[r]]);
                ts = nuisance_regress(&ts, &nuisance, cfg.metrics.nuisance_components)?;
            }
            connectivity_metrics(cfg, m, &k, &series, &mask, &ts, reports.get_mut("connectivity").expect("family"), &stamp)?;
        }
    }
    for (family, report) in &reports {
        write_report(report, dir.join(format!("metrics_{family}.csv")), ReportFormat::Csv, Some(&stamp))?;
    }
    Ok(())
}

fn input_difference(series: &Volume4, input: &Volume4, mask: &Volume3) -> f64 {
    let idx: Vec<usize> = (0..mask.data().len()).filter(|&i| mask.data()[i] > 0.5).collect();
    let mut acc = 0.0;
    for (a, b) in series.frames().iter().zip(input.frames()) {
        acc += idx.iter().map(|&i| (a.data()[i] - b.data()[i]).abs()).sum::<f64>();
    }
    acc / (idx.len() * series.t_count()).max(1) as f64
}

#[allow(clippy::too_many_arguments)]
fn connectivity_metrics(
    cfg: &PipelineConfig,
    m: Method,
    k: &MetricKey,
    series: &Volume4,
    mask: &Volume3,
    ts: &NodeTimeSeries,
    report: &mut MetricsReport,
    stamp: &str,
) -> Result<()> {
    let dir = &cfg.output_dir;
    let labels: Vec<String> = ts.nodes().nodes().iter().map(|n| n.label.clone()).collect();
    let carpet = carpet_matrix(ts);
    write_matrix_rows(&dir.join(format!("carpet_{}.csv", m.name())), &labels, &carpet.values, stamp)?;
    if carpet.constant_rows.iter().any(|&c| c) {
        // correlations are undefined for constant nodes
        eprintln!("warning: {} has constant nodes; connectivity metrics skipped", m.name());
        return Ok(());
    }
    let cm = correlation_matrix(ts)?;
    write_matrix(&dir.join(format!("fc_{}.csv", m.name())), &labels, cm.values().row_iter().map(|r| r.iter().copied().collect()), stamp)?;
    let degrees = degree_values(&cm, cfg.metrics.degree_threshold)?;
    let degrees: Vec<f64> = degrees.into_iter().map(|d| d as f64).collect();
    report.insert_scalar(k.clone(), "mean_degree", degrees.iter().sum::<f64>() / degrees.len() as f64)?;
    report.insert_vector(k.clone(), "degree", degrees)?;
    if ts.n_frames() >= 4 && ts.n_nodes() >= 2 {
        report.insert_scalar(k.clone(), "correlation_difference", correlation_difference(ts)?)?;
    }
    if let Some(s) = cfg.metrics.seed_node {
        let node = ts
            .nodes()
            .nodes()
            .get(s)
            .ok_or_else(|| PipelineError::Usage(format!("seed node {s} out of range")))?;
        let mut seed = Volume3::zeros(mask.grid().clone());
        for &v in &node.voxels {
            seed.data_mut()[v] = 1.0;
        }
        let map = seed_correlation_map(series, &seed, mask)?;
        write_volume_stamped(&dir.join(format!("seed_{}.nii", m.name())), &map, stamp)?;
    }
    Ok(())
}

fn write_matrix_rows(path: &Path, labels: &[String], values: &DMatrix<f64>, stamp: &str) -> Result<()> {
    let header: Vec<String> = std::iter::once("node".to_string()).chain((0..values.ncols()).map(|t| t.to_string())).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = values
        .row_iter()
        .zip(labels)
        .map(|(r, l)| std::iter::once(l.clone()).chain(r.iter().map(|v| fmt_f64(*v))).collect())
        .collect();
    write_csv(path, &header, &rows, stamp)
}

/// One L-curve per configured regularizer, on one frame of the input.
pub fn lcurve(cfg: &PipelineConfig) -> Result<()> {
    let (series, _, _) = load_input(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let stamp = cfg.stamp();
    let g = series.grid().clone();
    let nz = g.dims()[2];
    let t = cfg.lcurve.frame;
    if t >= series.t_count() {
        return Err(PipelineError::Usage(format!("L-curve frame {t} outside the series")));
    }
    let tpath = cfg.output_dir.join(transforms_file(cfg.method));
    let transforms = if cfg.method != Method::Unc && tpath.exists() {
        read_transforms(&tpath, nz, center_of(&g))?[t * nz..(t + 1) * nz].to_vec()
    } else {
        vec![RigidTransform3D::identity(); nz]
    };
    let frame = series.frame(t);
    let plane = g.dims()[0] * g.dims()[1];
    let slices = (0..nz)
        .map(|z| Slice2::new(g.clone(), z, cfg.interleave, frame.data()[z * plane..(z + 1) * plane].to_vec(), transforms[z]))
        .collect::<moco_core::Result<Vec<_>>>()?;
    for kind in &cfg.lcurve.kinds {
        let points = l_curve(&slices, *kind, cfg.regularizer.gamma, &cfg.lcurve.alphas, &g, &cfg.solver)?;
        let corner = l_curve_corner(&points);
        let rows: Vec<Vec<String>> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                vec![
                    fmt_f64(p.alpha),
                    fmt_f64(p.residual_norm),
                    fmt_f64(p.solution_seminorm),
                    u8::from(corner == Some(i)).to_string(),
                ]
            })
            .collect();
        let header = ["alpha", "residual_norm", "solution_seminorm", "corner"];
        write_csv(&cfg.output_dir.join(format!("lcurve_{}.csv", kind.name())), &header, &rows, &stamp)?;
    }
    Ok(())
}

fn scalar_of(v: &MetricValue) -> f64 {
    match v {
        MetricValue::Scalar(x) => *x,
        MetricValue::Vector(xs) => xs.iter().sum::<f64>() / xs.len().max(1) as f64,
    }
}

/// Summary table over evaluated runs, plus QC-FC when three or more
/// subjects are given.
pub fn report(cfg: &PipelineConfig) -> Result<()> {
    let stamp = cfg.stamp();
    let subjects: Vec<PathBuf> =
        if cfg.report.subjects.is_empty() { vec![cfg.output_dir.clone()] } else { cfg.report.subjects.clone() };
    ensure_dir(&cfg.output_dir)?;
    let mut merged = MetricsReport::new();
    for dir in &subjects {
        let mut found = false;
        for family in METRIC_FAMILIES {
            let p = dir.join(format!("metrics_{family}.csv"));
            if p.exists() {
                merged.extend(read_report_csv(&p)?)?;
                found = true;
            }
        }
        if !found {
            return Err(PipelineError::Missing(format!("metrics in {}", dir.display())));
        }
    }
    // metric → (method, regularizer, parameter) → values across subjects
    type Row = (String, String, String, String);
    let mut table: BTreeMap<Row, Vec<f64>> = BTreeMap::new();
    for (k, name, v) in merged.iter() {
        let row = (name.to_string(), k.method.clone(), k.regularizer.clone(), k.parameter.clone());
        table.entry(row).or_default().push(scalar_of(v));
    }
    let mut extra: Vec<(Row, usize, f64)> = Vec::new();
    if subjects.len() >= 3 {
        for m in Method::ALL {
            if let Some((slope, excluded)) = qcfc_for(m, &subjects, &merged, &stamp, &cfg.output_dir)? {
                let row = |n: &str| (n.to_string(), m.name().to_string(), String::new(), String::new());
                extra.push((row("qcfc_slope"), subjects.len(), slope));
                extra.push((row("qcfc_excluded_edges"), subjects.len(), excluded as f64));
            }
        }
    }
    let mut rows: Vec<Vec<String>> = table
        .into_iter()
        .map(|((name, method, reg, par), vals)| {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vec![name, method, reg, par, vals.len().to_string(), fmt_f64(mean)]
        })
        .collect();
    rows.extend(extra.into_iter().map(|((n, m, r, p), s, v)| vec![n, m, r, p, s.to_string(), fmt_f64(v)]));
    let header = ["metric", "method", "regularizer", "parameter", "subjects", "mean"];
    write_csv(&cfg.output_dir.join(SUMMARY_FILE), &header, &rows, &stamp)
}

/// Subject name recorded in the metric tables of an evaluated run.
fn subject_of(dir: &Path) -> Result<String> {
    for family in METRIC_FAMILIES {
        let p = dir.join(format!("metrics_{family}.csv"));
        if p.exists() {
            if let Some((k, _, _)) = read_report_csv(&p)?.iter().next() {
                return Ok(k.subject.clone());
            }
        }
    }
    Err(PipelineError::Missing(format!("metrics in {}", dir.display())))
}

/// Mean FD of a subject from its best available motion estimate.
fn subject_mean_fd(report: &MetricsReport, subject: &str) -> Option<f64> {
    for m in [Method::S2v, Method::V2v] {
        for (k, name, v) in report.iter() {
            if k.subject == subject && k.method == m.name() && name == "mean_fd" {
                return Some(scalar_of(v));
            }
        }
    }
    None
}

fn qcfc_for(
    m: Method,
    subjects: &[PathBuf],
    merged: &MetricsReport,
    stamp: &str,
    out: &Path,
) -> Result<Option<(f64, usize)>> {
    let mut fcs = Vec::new();
    let mut fds = Vec::new();
    let mut coords = None;
    for dir in subjects {
        let fc_path = dir.join(format!("fc_{}.csv", m.name()));
        if !fc_path.exists() {
            return Ok(None);
        }
        let subject = subject_of(dir)?;
        let Some(fd) = subject_mean_fd(merged, &subject) else {
            return Ok(None);
        };
        let (_, values) = read_matrix(&fc_path)?;
        let n = values.len();
        let cm = CorrelationMatrix::new(DMatrix::from_fn(n, n, |i, j| values[i][j]))?;
        if coords.is_none() {
            let doc: NodesDoc = read_json(&dir.join("nodes.json"))?;
            coords = Some(doc.nodes.coords());
        }
        fcs.push(cm);
        fds.push(fd);
    }
    let coords = coords.unwrap_or_default();
    let q = qcfc_slope(&fcs, &fds, &coords)?;
    let rows: Vec<Vec<String>> = q
        .edges
        .iter()
        .map(|e| vec![e.i.to_string(), e.j.to_string(), fmt_f64(e.distance), e.qcfc.map_or_else(String::new, fmt_f64)])
        .collect();
    write_csv(&out.join(format!("qcfc_{}.csv", m.name())), &["i", "j", "distance", "qcfc"], &rows, stamp)?;
    Ok(Some((q.slope, q.excluded)))
}

/// Regularizer kind by name, for flag parsing.
pub fn parse_kind(s: &str) -> std::result::Result<RegularizerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}
