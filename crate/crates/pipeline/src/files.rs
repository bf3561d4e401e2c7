//! Stamped reading and writing of the files exchanged between subcommands.

use std::path::Path;

use moco_core::connectivity::NodeSet;
use moco_core::grid::{RigidTransform3D, Volume3, Volume4};
use moco_core::io::nifti::NiftiInfo;
use moco_core::io::report::{fmt_f64, read_table, read_transforms_csv, write_table, write_transforms_csv, TransformRow};
use moco_core::io::{read_nifti_with_info, write_series, write_volume, NiftiDatatype, WriteOptions};
use moco_core::registration::recentered;
use moco_core::Error;

use crate::error::{PipelineError, Result};

pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing(path.display().to_string()))
    }
}

pub fn read_series(path: &Path) -> Result<(Volume4, NiftiInfo)> {
    require(path)?;
    let (image, info) = read_nifti_with_info(path)?;
    Ok((image.into_series(), info))
}

pub fn read_volume(path: &Path) -> Result<Volume3> {
    require(path)?;
    Ok(read_nifti_with_info(path)?.0.into_volume()?)
}

/// Mask binarized at 0.5; must share the dimensions of `like`.
pub fn read_mask(path: &Path, like: &Volume4) -> Result<Volume3> {
    let m = read_volume(path)?;
    if m.grid().dims() != like.grid().dims() {
        return Err(Error::InvalidGrid(format!("mask {} does not match the series grid", path.display())).into());
    }
    let bits = m.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(Volume3::new(like.grid().clone(), bits)?)
}

fn options(stamp: &str) -> WriteOptions {
    WriteOptions { descrip: stamp.to_string(), ..Default::default() }
}

pub fn write_volume_stamped(path: &Path, v: &Volume3, stamp: &str) -> Result<()> {
    Ok(write_volume(path, v, &options(stamp))?)
}

pub fn write_series_stamped(
    path: &Path,
    s: &Volume4,
    stamp: &str,
    datatype: Option<NiftiDatatype>,
    repetition_time_ms: Option<f64>,
) -> Result<()> {
    let opts = WriteOptions {
        datatype: datatype.unwrap_or(NiftiDatatype::Float32),
        repetition_time_ms,
        ..options(stamp)
    };
    Ok(write_series(path, s, &opts)?)
}

/// Rows `(t, slice)` with parameters about `center`.
pub fn write_transforms(path: &Path, transforms: &[RigidTransform3D], slices_per_frame: usize, center: [f64; 3], stamp: &str) -> Result<()> {
    let rows: Vec<TransformRow> = transforms
        .iter()
        .enumerate()
        .map(|(i, t)| TransformRow {
            t: i / slices_per_frame,
            slice: i % slices_per_frame,
            transform: recentered(t, &center.into()),
        })
        .collect();
    Ok(write_transforms_csv(path, &rows, Some(stamp))?)
}

/// Slice transforms in frame-major order; the table must list every slice.
pub fn read_transforms(path: &Path, slices_per_frame: usize, center: [f64; 3]) -> Result<Vec<RigidTransform3D>> {
    require(path)?;
    let rows = read_transforms_csv(path, center)?;
    for (i, r) in rows.iter().enumerate() {
        if r.t != i / slices_per_frame || r.slice != i % slices_per_frame {
            return Err(Error::InvalidArgument(format!("{}: rows must be frame-major, one per slice", path.display())).into());
        }
    }
    Ok(rows.into_iter().map(|r| r.transform).collect())
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>], stamp: &str) -> Result<()> {
    Ok(write_table(path, header, rows, Some(stamp))?)
}

/// Square matrix with node labels as header and first column.
pub fn write_matrix(path: &Path, labels: &[String], rows: impl Iterator<Item = Vec<f64>>, stamp: &str) -> Result<()> {
    let mut header = vec!["node"];
    header.extend(labels.iter().map(String::as_str));
    let body: Vec<Vec<String>> = rows
        .zip(labels)
        .map(|(r, l)| std::iter::once(l.clone()).chain(r.iter().map(|v| fmt_f64(*v))).collect())
        .collect();
    write_csv(path, &header, &body, stamp)
}

pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    require(path)?;
    let (header, rows) = read_table(path)?;
    let labels = header[1..].to_vec();
    let values = rows
        .iter()
        .map(|r| {
            r[1..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number '{v}' in {}", path.display())).into()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok((labels, values))
}

/// Node set from a NIfTI label volume, or a JSON node list (`.json`).
pub fn read_nodes(path: &Path) -> Result<NodeSet> {
    require(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let text = std::fs::read_to_string(path)?;
        Ok(NodeSet::from_json(&text)?)
    } else {
        Ok(NodeSet::from_label_volume(&read_volume(path)?)?)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct StampedJson<T> {
    pub stamp: String,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: serde::Serialize>(path: &Path, body: T, stamp: &str) -> Result<()> {
    let doc = StampedJson { stamp: stamp.to_string(), body };
    let mut text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    let text = std::fs::read_to_string(path)?;
    let doc: StampedJson<T> = serde_json::from_str(&text).map_err(Error::from)?;
    Ok(doc.body)
}
