//! Reading and writing volumes, masks and probability fields.
//!
//! Two on-disk formats are supported:
//!
//! * **raw**: one UTF-8 JSON header line (`shape`, `spacing`, `dtype`, `id`)
//!   terminated by `\n`, followed by the little-endian voxel payload in
//!   (W, H, D) order, W fastest. `dtype` is one of `f32`, `u8`, `u16`.
//! * **NIfTI**: `.nii` or `.nii.gz`, read and written through the `nifti`
//!   crate. Predictions are written as float32, so no quantization occurs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::components::{self, Connectivity};
use crate::error::{Error, Result};
use crate::volume::{CtVolume, FractureMask, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeFormat {
    /// `.nii` / `.nii.gz`
    Nifti,
    /// JSON header line plus raw little-endian payload
    Raw,
}

impl VolumeFormat {
    /// Guess the format from a file name.
    pub fn from_path(path: &Path) -> Self {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            VolumeFormat::Nifti
        } else {
            VolumeFormat::Raw
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    U16,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawPayload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl RawPayload {
    fn len(&self) -> usize {
        match self {
            RawPayload::F32(v) => v.len(),
            RawPayload::U8(v) => v.len(),
            RawPayload::U16(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            RawPayload::F32(_) => Dtype::F32,
            RawPayload::U8(_) => Dtype::U8,
            RawPayload::U16(_) => Dtype::U16,
        }
    }

    fn to_f64(&self) -> Vec<f64> {
        match self {
            RawPayload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RawPayload::U8(v) => v.iter().map(|&x| x as f64).collect(),
            RawPayload::U16(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileMissing(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Read a raw-format file.
pub fn read_raw(path: &Path) -> Result<(RawHeader, RawPayload)> {
    let mut reader = BufReader::new(open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(malformed(path, "missing header terminator"));
    }
    let header: RawHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| malformed(path, e.to_string()))?;
    Shape3(header.shape)
        .validate()
        .map_err(|e| malformed(path, e.to_string()))?;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let expected = Shape3(header.shape).len();
    let size = header.dtype.size();
    if bytes.len() != expected * size {
        return Err(Error::PayloadMismatch {
            expected,
            actual: bytes.len() / size,
        });
    }
    let payload = match header.dtype {
        Dtype::F32 => RawPayload::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::U8 => RawPayload::U8(bytes),
        Dtype::U16 => RawPayload::U16(
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
    };
    Ok((header, payload))
}

/// Write a raw-format file. The header dtype is taken from the payload.
pub fn write_raw(path: &Path, header: &RawHeader, payload: &RawPayload) -> Result<()> {
    let expected = Shape3(header.shape).len();
    if payload.len() != expected {
        return Err(Error::PayloadMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let header = RawHeader {
        dtype: payload.dtype(),
        ..header.clone()
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    match payload {
        RawPayload::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        RawPayload::U8(v) => w.write_all(v)?,
        RawPayload::U16(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct NiftiData {
    shape: Shape3,
    spacing: [f64; 3],
    values: Vec<f64>,
}

fn read_nifti(path: &Path) -> Result<NiftiData> {
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if !(3..=4).contains(&ndim) || (ndim == 4 && header.dim[4] > 1) {
        return Err(malformed(path, format!("expected a 3D volume, dim = {:?}", header.dim)));
    }
    let shape = Shape3::new(
        header.dim[1] as usize,
        header.dim[2] as usize,
        header.dim[3] as usize,
    );
    shape.validate().map_err(|e| malformed(path, e.to_string()))?;
    let spacing = [
        header.pixdim[1].abs().max(f32::MIN_POSITIVE) as f64,
        header.pixdim[2].abs().max(f32::MIN_POSITIVE) as f64,
        header.pixdim[3].abs().max(f32::MIN_POSITIVE) as f64,
    ];
    // scl_slope / scl_inter are applied by the reader.
    let arr = obj.into_volume().into_ndarray::<f64>()?;
    if arr.len() != shape.len() {
        return Err(Error::PayloadMismatch {
            expected: shape.len(),
            actual: arr.len(),
        });
    }
    let rank = arr.ndim();
    let mut values = vec![0.0; shape.len()];
    let mut idx = vec![0usize; rank];
    for z in 0..shape.d() {
        for y in 0..shape.h() {
            for x in 0..shape.w() {
                idx[0] = x;
                idx[1] = y;
                idx[2] = z;
                values[shape.index(x, y, z)] = arr[idx.as_slice()];
            }
        }
    }
    Ok(NiftiData {
        shape,
        spacing,
        values,
    })
}

fn write_nifti_f32(path: &Path, shape: Shape3, spacing: [f64; 3], values: &[f32], descrip: &str) -> Result<()> {
    let arr = Array3::from_shape_vec((shape.w(), shape.h(), shape.d()).f(), values.to_vec())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut header = NiftiHeader::default();
    header.pixdim[1] = spacing[0] as f32;
    header.pixdim[2] = spacing[1] as f32;
    header.pixdim[3] = spacing[2] as f32;
    let mut d = descrip.as_bytes().to_vec();
    d.truncate(79);
    header.descrip = d;
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)?;
    Ok(())
}

fn id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    strip_known_suffix(&name).to_string()
}

/// File-name suffixes used to pair volumes, masks and predictions by id.
pub const VOLUME_SUFFIXES: &[&str] = &["-image.nii.gz", "-image.nii", ".img.raw"];
pub const MASK_SUFFIXES: &[&str] = &["-label.nii.gz", "-label.nii", ".msk.raw"];
pub const PREDICTION_SUFFIXES: &[&str] = &["-pred.nii.gz", "-pred.nii", ".prob.raw"];

/// Strip a known volume/mask/prediction suffix, falling back to the
/// extension-less stem.
pub fn strip_known_suffix(name: &str) -> &str {
    for s in VOLUME_SUFFIXES
        .iter()
        .chain(MASK_SUFFIXES)
        .chain(PREDICTION_SUFFIXES)
        .chain([".nii.gz", ".nii", ".raw"].iter())
    {
        if let Some(stem) = name.strip_suffix(s) {
            return stem;
        }
    }
    name
}

/// Map id -> path for every file in `dir` ending in one of `suffixes`.
pub fn discover(dir: &Path, suffixes: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileMissing(dir.to_path_buf()),
        _ => Error::Io(e),
    })?;
    for entry in entries {
        let path = entry?.path();
        let name = match path.file_name() {
            Some(n) => n.to_string_lossy().into_owned(),
            None => continue,
        };
        for s in suffixes {
            if let Some(id) = name.strip_suffix(s) {
                out.insert(id.to_string(), path.clone());
                break;
            }
        }
    }
    Ok(out)
}

/// Load a CT volume. Intensities are returned exactly as stored.
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<CtVolume> {
    match format {
        VolumeFormat::Raw => {
            let (h, payload) = read_raw(path)?;
            let intensities = match payload {
                RawPayload::F32(v) => v,
                other => other.to_f64().into_iter().map(|x| x as f32).collect(),
            };
            CtVolume::new(h.id, Shape3(h.shape), h.spacing, intensities)
        }
        VolumeFormat::Nifti => {
            let n = read_nifti(path)?;
            let intensities = n.values.iter().map(|&x| x as f32).collect();
            CtVolume::new(id_from_path(path), n.shape, n.spacing, intensities)
        }
    }
}

pub fn save_volume(volume: &CtVolume, path: &Path, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Raw => write_raw(
            path,
            &RawHeader {
                shape: volume.shape.0,
                spacing: volume.spacing,
                dtype: Dtype::F32,
                id: volume.id.clone(),
            },
            &RawPayload::F32(volume.intensities.clone()),
        ),
        VolumeFormat::Nifti => write_nifti_f32(
            path,
            volume.shape,
            volume.spacing,
            &volume.intensities,
            "CT intensities (HU)",
        ),
    }
}

/// Turn raw integer labels into a contiguous instance mask.
///
/// A binary mask (only 0 and one positive value) is split into instances by
/// 26-connected components; otherwise distinct positive values are mapped in
/// ascending order onto `1..=K`.
pub fn relabel(shape: Shape3, values: &[i64]) -> Result<FractureMask> {
    if let Some(&neg) = values.iter().find(|&&v| v < 0) {
        return Err(Error::NegativeLabel(neg));
    }
    let distinct: std::collections::BTreeSet<i64> =
        values.iter().copied().filter(|&v| v > 0).collect();
    if distinct.len() <= 1 {
        let field: Vec<bool> = values.iter().map(|&v| v > 0).collect();
        let l = components::label(&field, shape, Connectivity::TwentySix)?;
        return FractureMask::new(shape, l.labels);
    }
    let map: BTreeMap<i64, u32> = distinct
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i as u32 + 1))
        .collect();
    let labels = values
        .iter()
        .map(|v| if *v > 0 { map[v] } else { 0 })
        .collect();
    FractureMask::new(shape, labels)
}

/// Load a fracture mask (format inferred from the file name) and check it
/// against `expected_shape`.
pub fn load_mask(path: &Path, expected_shape: Shape3) -> Result<FractureMask> {
    let (shape, values): (Shape3, Vec<i64>) = match VolumeFormat::from_path(path) {
        VolumeFormat::Raw => {
            let (h, payload) = read_raw(path)?;
            let values = match payload {
                RawPayload::U8(v) => v.into_iter().map(i64::from).collect(),
                RawPayload::U16(v) => v.into_iter().map(i64::from).collect(),
                RawPayload::F32(v) => float_labels(&v.iter().map(|&x| x as f64).collect::<Vec<_>>())?,
            };
            (Shape3(h.shape), values)
        }
        VolumeFormat::Nifti => {
            let n = read_nifti(path)?;
            (n.shape, float_labels(&n.values)?)
        }
    };
    if shape != expected_shape {
        return Err(Error::ShapeMismatch {
            expected: expected_shape.0.to_vec(),
            actual: shape.0.to_vec(),
        });
    }
    relabel(shape, &values)
}

fn float_labels(values: &[f64]) -> Result<Vec<i64>> {
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() || v.fract() != 0.0 {
                Err(Error::InvalidArgument(format!("non-integer mask label {v}")))
            } else {
                Ok(v as i64)
            }
        })
        .collect()
}

/// Save an instance mask in raw format (u8 when labels fit, else u16).
pub fn save_mask(mask: &FractureMask, id: &str, path: &Path) -> Result<()> {
    let header = RawHeader {
        shape: mask.shape.0,
        spacing: [1.0; 3],
        dtype: Dtype::U8,
        id: id.to_string(),
    };
    let payload = if mask.instance_count() <= u8::MAX as usize {
        RawPayload::U8(mask.labels.iter().map(|&l| l as u8).collect())
    } else if mask.instance_count() <= u16::MAX as usize {
        RawPayload::U16(mask.labels.iter().map(|&l| l as u16).collect())
    } else {
        return Err(Error::InvalidArgument("more than 65535 instances".into()));
    };
    match VolumeFormat::from_path(path) {
        VolumeFormat::Raw => write_raw(path, &header, &payload),
        VolumeFormat::Nifti => {
            let values: Vec<f32> = mask.labels.iter().map(|&l| l as f32).collect();
            write_nifti_f32(path, mask.shape, [1.0; 3], &values, "fracture instance labels")
        }
    }
}

/// Save a probability field. Raw output is bit-exact; NIfTI output is float32.
pub fn save_prediction(
    volume_id: &str,
    shape: Shape3,
    probabilities: &[f32],
    path: &Path,
) -> Result<()> {
    if probabilities.len() != shape.len() {
        return Err(Error::PayloadMismatch {
            expected: shape.len(),
            actual: probabilities.len(),
        });
    }
    if let Some((index, &value)) = probabilities
        .iter()
        .enumerate()
        .find(|(_, &p)| !(0.0..=1.0).contains(&p))
    {
        return Err(Error::OutOfRange {
            index,
            value: value as f64,
        });
    }
    match VolumeFormat::from_path(path) {
        VolumeFormat::Raw => write_raw(
            path,
            &RawHeader {
                shape: shape.0,
                spacing: [1.0; 3],
                dtype: Dtype::F32,
                id: volume_id.to_string(),
            },
            &RawPayload::F32(probabilities.to_vec()),
        ),
        VolumeFormat::Nifti => write_nifti_f32(
            path,
            shape,
            [1.0; 3],
            probabilities,
            "fracture probability, float32, unquantized",
        ),
    }
}

/// Load a probability field written by [`save_prediction`].
pub fn load_prediction(path: &Path) -> Result<(String, Shape3, Vec<f32>)> {
    let (id, shape, values) = match VolumeFormat::from_path(path) {
        VolumeFormat::Raw => {
            let (h, payload) = read_raw(path)?;
            let v = match payload {
                RawPayload::F32(v) => v,
                other => other.to_f64().into_iter().map(|x| x as f32).collect(),
            };
            (h.id, Shape3(h.shape), v)
        }
        VolumeFormat::Nifti => {
            let n = read_nifti(path)?;
            (
                id_from_path(path),
                n.shape,
                n.values.into_iter().map(|x| x as f32).collect(),
            )
        }
    };
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, &p)| !(0.0..=1.0).contains(&p))
    {
        return Err(Error::OutOfRange {
            index,
            value: value as f64,
        });
    }
    Ok((id, shape, values))
}
