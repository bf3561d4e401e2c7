//! NIfTI-1 reader/writer.
//!
//! Supports single-file `.nii` (magic `n+1\0`), header/image pairs
//! (`.hdr` + `.img`, magic `ni1\0`) and gzip-compressed `.nii.gz`. Voxel
//! values are converted to `f64`, with `scl_slope`/`scl_inter` applied.
//! Orientation comes from the sform when `sform_code > 0`, else from the
//! qform when `qform_code > 0`, else from `pixdim` alone.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Volume3, Volume4};

pub const HEADER_SIZE: usize = 348;
const SINGLE_FILE_OFFSET: usize = 352;

/// On-disk voxel type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int8,
    Int16,
    Uint16,
    Int32,
    Float32,
    Float64,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Int32 => 8,
            NiftiDatatype::Float32 => 16,
            NiftiDatatype::Float64 => 64,
            NiftiDatatype::Int8 => 256,
            NiftiDatatype::Uint16 => 512,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => NiftiDatatype::Uint8,
            4 => NiftiDatatype::Int16,
            8 => NiftiDatatype::Int32,
            16 => NiftiDatatype::Float32,
            64 => NiftiDatatype::Float64,
            256 => NiftiDatatype::Int8,
            512 => NiftiDatatype::Uint16,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 | NiftiDatatype::Int8 => 1,
            NiftiDatatype::Int16 | NiftiDatatype::Uint16 => 2,
            NiftiDatatype::Int32 | NiftiDatatype::Float32 => 4,
            NiftiDatatype::Float64 => 8,
        }
    }
}

/// A decoded image: a single volume or a time series.
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiVolume {
    Volume3(Volume3),
    Volume4(Volume4),
}

impl NiftiVolume {
    pub fn grid(&self) -> &ImageGrid {
        match self {
            NiftiVolume::Volume3(v) => v.grid(),
            NiftiVolume::Volume4(v) => v.grid(),
        }
    }

    /// 3D images become a one-frame series.
    pub fn into_series(self) -> Volume4 {
        match self {
            NiftiVolume::Volume3(v) => Volume4::new(vec![v]).expect("one frame"),
            NiftiVolume::Volume4(s) => s,
        }
    }

    /// Single volume; a 4D image is accepted only if it holds one frame.
    pub fn into_volume(self) -> Result<Volume3> {
        match self {
            NiftiVolume::Volume3(v) => Ok(v),
            NiftiVolume::Volume4(s) if s.t_count() == 1 => Ok(s.into_frames().remove(0)),
            NiftiVolume::Volume4(s) => Err(Error::Nifti(format!(
                "expected a 3D volume, found {} frames",
                s.t_count()
            ))),
        }
    }
}

/// Header fields that do not fit into the volume types.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiInfo {
    pub datatype: NiftiDatatype,
    /// `pixdim[4]` converted to milliseconds when time units are set.
    pub repetition_time_ms: Option<f64>,
    pub descrip: String,
}

#[derive(Debug, Clone)]
pub struct WriteOptions {
    pub datatype: NiftiDatatype,
    pub descrip: String,
    pub repetition_time_ms: Option<f64>,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions {
            datatype: NiftiDatatype::Float32,
            descrip: String::new(),
            repetition_time_ms: None,
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.to_string_lossy().to_ascii_lowercase().ends_with(".gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if is_gz(path) || (raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) {
        let mut out = Vec::new();
        GzDecoder::new(Cursor::new(raw))
            .read_to_end(&mut out)
            .map_err(|e| Error::Nifti(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn image_path_for(header_path: &Path) -> PathBuf {
    let s = header_path.to_string_lossy();
    let lower = s.to_ascii_lowercase();
    if let Some(stem) = lower.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{}.img.gz", &s[..stem.len()]))
    } else if let Some(stem) = lower.strip_suffix(".hdr") {
        PathBuf::from(format!("{}.img", &s[..stem.len()]))
    } else {
        header_path.with_extension("img")
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    read_nifti_with_info(path).map(|(v, _)| v)
}

pub fn read_nifti_with_info(path: impl AsRef<Path>) -> Result<(NiftiVolume, NiftiInfo)> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!(
            "file holds {} bytes, a NIfTI-1 header needs {HEADER_SIZE}",
            bytes.len()
        )));
    }
    match &bytes[344..348] {
        b"n+1\0" => decode(&bytes, None),
        b"ni1\0" => {
            let img = read_all(&image_path_for(path))?;
            decode(&bytes, Some(&img))
        }
        other => Err(Error::Nifti(format!("bad magic {:?} at offset 344", other))),
    }
}

/// Decode a single-file image held in memory.
pub fn decode_nifti(bytes: &[u8]) -> Result<(NiftiVolume, NiftiInfo)> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!(
            "buffer holds {} bytes, a NIfTI-1 header needs {HEADER_SIZE}",
            bytes.len()
        )));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::Nifti("in-memory decoding needs a single-file image".into()));
    }
    decode(bytes, None)
}

struct Fields<'a> {
    b: &'a [u8],
    big: bool,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        if self.big {
            BigEndian::read_i16(&self.b[at..])
        } else {
            LittleEndian::read_i16(&self.b[at..])
        }
    }
    fn f32(&self, at: usize) -> f64 {
        (if self.big {
            BigEndian::read_f32(&self.b[at..])
        } else {
            LittleEndian::read_f32(&self.b[at..])
        }) as f64
    }
}

fn decode(bytes: &[u8], image: Option<&[u8]>) -> Result<(NiftiVolume, NiftiInfo)> {
    let big = match (
        LittleEndian::read_i32(&bytes[0..4]),
        BigEndian::read_i32(&bytes[0..4]),
    ) {
        (348, _) => false,
        (_, 348) => true,
        (other, _) => return Err(Error::Nifti(format!("sizeof_hdr is {other}, expected 348"))),
    };
    let h = Fields { b: bytes, big };

    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("dim[0] = {ndim} outside 1..7")));
    }
    let mut dims = [1usize; 7];
    for (k, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = h.i16(42 + 2 * k);
        if v < 1 {
            return Err(Error::Nifti(format!("dim[{}] = {v} must be >= 1", k + 1)));
        }
        *d = v as usize;
    }
    if dims[4..].iter().any(|&d| d > 1) {
        return Err(Error::Nifti(format!(
            "only 3D and 4D images are supported, dims are {:?}",
            &dims[..ndim as usize]
        )));
    }
    let datatype = NiftiDatatype::from_code(h.i16(70))?;
    let bitpix = h.i16(72);
    if bitpix as usize != 8 * datatype.bytes() {
        return Err(Error::Nifti(format!(
            "bitpix {bitpix} does not match datatype {:?}",
            datatype
        )));
    }

    let mut pixdim = [0.0f64; 8];
    for (k, p) in pixdim.iter_mut().enumerate() {
        *p = h.f32(76 + 4 * k);
    }
    let spacing_raw = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
    let spacing_or_unit = spacing_raw.map(|s| if s > 0.0 { s } else { 1.0 });

    let vox_offset = h.f32(108);
    let mut slope = h.f32(112);
    let inter = h.f32(116);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let xyzt_units = bytes[123];
    let descrip = String::from_utf8_lossy(&bytes[148..228])
        .trim_end_matches('\0')
        .to_string();
    let qform_code = h.i16(252);
    let sform_code = h.i16(254);

    let (spacing, origin, direction) = if sform_code > 0 {
        let mut m = Matrix3::zeros();
        let mut o = [0.0; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[(r, c)] = h.f32(280 + 16 * r + 4 * c);
            }
            o[r] = h.f32(280 + 16 * r + 12);
        }
        let spacing = [
            m.column(0).norm(),
            m.column(1).norm(),
            m.column(2).norm(),
        ];
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Nifti("sform has a zero-length axis".into()));
        }
        let mut d = m;
        for c in 0..3 {
            let s = spacing[c];
            d.column_mut(c).scale_mut(1.0 / s);
        }
        (spacing, o, orthonormalize(&d)?)
    } else if qform_code > 0 {
        let (qb, qc, qd) = (h.f32(256), h.f32(260), h.f32(264));
        let o = [h.f32(268), h.f32(272), h.f32(276)];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let mut r = quaternion_to_matrix(qb, qc, qd);
        r.column_mut(2).scale_mut(qfac);
        (spacing_or_unit, o, orthonormalize(&r)?)
    } else {
        (spacing_or_unit, [0.0; 3], Matrix3::identity())
    };

    let grid = ImageGrid::new([dims[0], dims[1], dims[2]], spacing, origin, direction)?;
    let t_count = dims[3];
    let voxels = grid.len() * t_count;
    let need = voxels * datatype.bytes();

    let payload: &[u8] = match image {
        Some(img) => img,
        None => {
            let off = vox_offset.max(0.0) as usize;
            if off < HEADER_SIZE {
                return Err(Error::Nifti(format!("vox_offset {vox_offset} inside the header")));
            }
            if off > bytes.len() {
                return Err(Error::Nifti("payload shorter than header promise".into()));
            }
            &bytes[off..]
        }
    };
    if payload.len() < need {
        return Err(Error::Nifti("payload shorter than header promise".into()));
    }

    let mut values = Vec::with_capacity(voxels);
    let sz = datatype.bytes();
    for i in 0..voxels {
        let chunk = &payload[i * sz..(i + 1) * sz];
        let raw = match (datatype, big) {
            (NiftiDatatype::Uint8, _) => chunk[0] as f64,
            (NiftiDatatype::Int8, _) => chunk[0] as i8 as f64,
            (NiftiDatatype::Int16, false) => LittleEndian::read_i16(chunk) as f64,
            (NiftiDatatype::Int16, true) => BigEndian::read_i16(chunk) as f64,
            (NiftiDatatype::Uint16, false) => LittleEndian::read_u16(chunk) as f64,
            (NiftiDatatype::Uint16, true) => BigEndian::read_u16(chunk) as f64,
            (NiftiDatatype::Int32, false) => LittleEndian::read_i32(chunk) as f64,
            (NiftiDatatype::Int32, true) => BigEndian::read_i32(chunk) as f64,
            (NiftiDatatype::Float32, false) => LittleEndian::read_f32(chunk) as f64,
            (NiftiDatatype::Float32, true) => BigEndian::read_f32(chunk) as f64,
            (NiftiDatatype::Float64, false) => LittleEndian::read_f64(chunk),
            (NiftiDatatype::Float64, true) => BigEndian::read_f64(chunk),
        };
        let v = raw * slope + inter;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("voxel {i} of NIfTI payload")));
        }
        values.push(v);
    }

    let repetition_time_ms = if ndim >= 4 && pixdim[4] > 0.0 {
        Some(match xyzt_units & 0x38 {
            8 => pixdim[4] * 1000.0,
            24 => pixdim[4] / 1000.0,
            _ => pixdim[4],
        })
    } else {
        None
    };
    let info = NiftiInfo {
        datatype,
        repetition_time_ms,
        descrip,
    };

    let n = grid.len();
    let volume = if ndim >= 4 {
        let frames = values
            .chunks(n)
            .map(|c| Volume3::new(grid.clone(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        NiftiVolume::Volume4(Volume4::new(frames)?)
    } else {
        NiftiVolume::Volume3(Volume3::new(grid, values)?)
    };
    Ok((volume, info))
}

/// Nearest orthonormal matrix (polar factor). Headers store geometry in f32,
/// so directions read back are only orthonormal to ~1e-7.
fn orthonormalize(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let err = (m.transpose() * m - Matrix3::identity()).amax();
    if err > 1e-3 {
        return Err(Error::Nifti(format!(
            "orientation matrix is not rigid (max |DᵀD - I| = {err:e})"
        )));
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    Ok(u * vt)
}

fn quaternion_to_matrix(b: f64, c: f64, d: f64) -> Matrix3<f64> {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    Matrix3::new(
        a * a + b * b - c * c - d * d,
        2.0 * (b * c - a * d),
        2.0 * (b * d + a * c),
        2.0 * (b * c + a * d),
        a * a + c * c - b * b - d * d,
        2.0 * (c * d - a * b),
        2.0 * (b * d - a * c),
        2.0 * (c * d + a * b),
        a * a + d * d - c * c - b * b,
    )
}

/// Quaternion (b, c, d) and qfac of an orthonormal matrix.
fn matrix_to_quaternion(m: &Matrix3<f64>) -> ([f64; 3], f64) {
    let mut r = *m;
    let qfac = if r.determinant() < 0.0 {
        r.column_mut(2).scale_mut(-1.0);
        -1.0
    } else {
        1.0
    };
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let (a, b, c, d);
    if trace > 0.0 {
        let s = 0.5 / (trace + 1.0).sqrt();
        a = 0.25 / s;
        b = (r[(2, 1)] - r[(1, 2)]) * s;
        c = (r[(0, 2)] - r[(2, 0)]) * s;
        d = (r[(1, 0)] - r[(0, 1)]) * s;
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt();
        a = (r[(2, 1)] - r[(1, 2)]) / s;
        b = 0.25 * s;
        c = (r[(0, 1)] + r[(1, 0)]) / s;
        d = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt();
        a = (r[(0, 2)] - r[(2, 0)]) / s;
        b = (r[(0, 1)] + r[(1, 0)]) / s;
        c = 0.25 * s;
        d = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = 2.0 * (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt();
        a = (r[(1, 0)] - r[(0, 1)]) / s;
        b = (r[(0, 2)] + r[(2, 0)]) / s;
        c = (r[(1, 2)] + r[(2, 1)]) / s;
        d = 0.25 * s;
    }
    // NIfTI stores a >= 0 implicitly
    let sign = if a < 0.0 { -1.0 } else { 1.0 };
    ([b * sign, c * sign, d * sign], qfac)
}

fn encode(frames: &[&Volume3], ndim: i16, opts: &WriteOptions) -> Result<Vec<u8>> {
    let grid = frames[0].grid();
    let [nx, ny, nz] = grid.dims();
    let dt = opts.datatype;
    let mut buf = Vec::with_capacity(SINGLE_FILE_OFFSET + grid.len() * frames.len() * dt.bytes());
    let mut hdr = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut hdr[0..], HEADER_SIZE as i32);
    hdr[38] = b'r';
    let dim = [
        ndim,
        nx as i16,
        ny as i16,
        nz as i16,
        frames.len() as i16,
        1,
        1,
        1,
    ];
    for (k, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * k..], if k > ndim as usize { 1 } else { *d });
    }
    LittleEndian::write_i16(&mut hdr[70..], dt.code());
    LittleEndian::write_i16(&mut hdr[72..], (8 * dt.bytes()) as i16);

    let spacing = grid.spacing();
    let (quat, qfac) = matrix_to_quaternion(grid.direction());
    let tr_s = opts.repetition_time_ms.unwrap_or(0.0) / 1000.0;
    let pixdim = [qfac, spacing[0], spacing[1], spacing[2], tr_s, 0.0, 0.0, 0.0];
    for (k, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * k..], *p as f32);
    }
    LittleEndian::write_f32(&mut hdr[108..], SINGLE_FILE_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..], 1.0);
    LittleEndian::write_f32(&mut hdr[116..], 0.0);
    // mm + seconds
    hdr[123] = 2 | 8;

    let descrip = opts.descrip.as_bytes();
    let n = descrip.len().min(79);
    hdr[148..148 + n].copy_from_slice(&descrip[..n]);

    LittleEndian::write_i16(&mut hdr[252..], 1);
    LittleEndian::write_i16(&mut hdr[254..], 1);
    let origin = grid.origin();
    for (k, q) in quat.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[256 + 4 * k..], *q as f32);
    }
    for (k, o) in origin.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[268 + 4 * k..], *o as f32);
    }
    let d = grid.direction();
    for r in 0..3 {
        for c in 0..3 {
            LittleEndian::write_f32(&mut hdr[280 + 16 * r + 4 * c..], (d[(r, c)] * spacing[c]) as f32);
        }
        LittleEndian::write_f32(&mut hdr[280 + 16 * r + 12..], origin[r] as f32);
    }
    hdr[344..348].copy_from_slice(b"n+1\0");
    buf.extend_from_slice(&hdr);
    buf.extend_from_slice(&[0u8; 4]);

    for f in frames {
        for &v in f.data() {
            match dt {
                NiftiDatatype::Uint8 => buf.push(v.round().clamp(0.0, 255.0) as u8),
                NiftiDatatype::Int8 => buf.push(v.round().clamp(-128.0, 127.0) as i8 as u8),
                NiftiDatatype::Int16 => buf.write_i16::<LittleEndian>(v.round().clamp(-32768.0, 32767.0) as i16)?,
                NiftiDatatype::Uint16 => buf.write_u16::<LittleEndian>(v.round().clamp(0.0, 65535.0) as u16)?,
                NiftiDatatype::Int32 => buf.write_i32::<LittleEndian>(v.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)?,
                NiftiDatatype::Float32 => buf.write_f32::<LittleEndian>(v as f32)?,
                NiftiDatatype::Float64 => buf.write_f64::<LittleEndian>(v)?,
            }
        }
    }
    Ok(buf)
}

fn check_dims(grid: &ImageGrid, t: usize) -> Result<()> {
    let limit = i16::MAX as usize;
    if grid.dims().iter().any(|&d| d > limit) || t > limit {
        return Err(Error::Nifti("dimension exceeds the NIfTI-1 limit of 32767".into()));
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if is_gz(path) {
        let file = fs::File::create(path)?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume3, opts: &WriteOptions) -> Result<()> {
    check_dims(volume.grid(), 1)?;
    let bytes = encode(&[volume], 3, opts)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn write_series(path: impl AsRef<Path>, series: &Volume4, opts: &WriteOptions) -> Result<()> {
    check_dims(series.grid(), series.t_count())?;
    let frames: Vec<&Volume3> = series.frames().iter().collect();
    let bytes = encode(&frames, 4, opts)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn write_nifti(path: impl AsRef<Path>, image: &NiftiVolume, opts: &WriteOptions) -> Result<()> {
    match image {
        NiftiVolume::Volume3(v) => write_volume(path, v, opts),
        NiftiVolume::Volume4(s) => write_series(path, s, opts),
    }
}
