//! File formats: volumes, landmarks, parameter maps, reports and transforms.

mod landmarks;
mod metaimage;
mod nifti;
mod parameters;
mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::transform::CompositeTransform;
use crate::volume::Volume;

pub use landmarks::{parse_landmarks, read_landmarks, write_landmarks};
pub use parameters::{read_parameters, ParameterMap};
pub use report::{IterationRecord, LevelRecord, RunReport};

/// On-disk voxel type; integer data is promoted to `f32` on read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    U8,
    I8,
    U16,
    I16,
    I32,
    F32,
    F64,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::U8 | ElementType::I8 => 1,
            ElementType::U16 | ElementType::I16 => 2,
            ElementType::I32 | ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

fn decode(bytes: &[u8], ty: ElementType, big_endian: bool) -> Vec<f32> {
    macro_rules! conv {
        ($read:ident, $n:expr) => {
            bytes
                .chunks_exact($n)
                .map(|b| {
                    if big_endian {
                        BigEndian::$read(b) as f32
                    } else {
                        LittleEndian::$read(b) as f32
                    }
                })
                .collect()
        };
    }
    match ty {
        ElementType::U8 => bytes.iter().map(|&b| f32::from(b)).collect(),
        ElementType::I8 => bytes.iter().map(|&b| f32::from(b as i8)).collect(),
        ElementType::U16 => conv!(read_u16, 2),
        ElementType::I16 => conv!(read_i16, 2),
        ElementType::I32 => conv!(read_i32, 4),
        ElementType::F32 => conv!(read_f32, 4),
        ElementType::F64 => conv!(read_f64, 8),
    }
}

fn encode_f32_le(data: &[f32]) -> Vec<u8> {
    let mut out = vec![0u8; data.len() * 4];
    LittleEndian::write_f32_into(data, &mut out);
    out
}

fn lower_ext(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

/// Reads a MetaImage (`.mha`, `.mhd`) or single-file NIfTI-1 (`.nii`) volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_volume_typed(path).map(|(v, _)| v)
}

/// Like [`read_volume`], also reporting the stored element type.
pub fn read_volume_typed(path: impl AsRef<Path>) -> Result<(Volume, ElementType)> {
    let path = path.as_ref();
    let name = lower_ext(path);
    if name.ends_with(".mha") || name.ends_with(".mhd") {
        metaimage::read(path)
    } else if name.ends_with(".nii") {
        nifti::read(path)
    } else if name.ends_with(".nii.gz") || name.ends_with(".gz") {
        Err(Error::unsupported(path, "compression", "gzip"))
    } else {
        Err(Error::unsupported(path, "extension", name))
    }
}

/// Writes a volume as float32; the format follows the extension.
pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let name = lower_ext(path);
    if name.ends_with(".mha") || name.ends_with(".mhd") {
        metaimage::write(vol, path)
    } else if name.ends_with(".nii") {
        nifti::write(vol, path)
    } else {
        Err(Error::unsupported(path, "extension", name))
    }
}

pub fn write_transform(t: &CompositeTransform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(t)
        .map_err(|e| Error::InvalidData(format!("cannot serialize transform: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<CompositeTransform> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// One entry of a feature-map manifest: layer id, channel count and file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureManifestEntry {
    pub layer: usize,
    pub channels: usize,
    pub file: PathBuf,
}

/// Writes the sidecar listing per-layer channel counts of a feature map set.
/// File names are stored relative to the manifest's directory.
pub fn write_feature_manifest(entries: &[FeatureManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("# layer channels file\n");
    for e in entries {
        text.push_str(&format!("{} {} {}\n", e.layer, e.channels, e.file.display()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_feature_manifest(path: impl AsRef<Path>) -> Result<Vec<FeatureManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(3, char::is_whitespace).collect();
        let bad = || Error::format(path, format!("line {}: expected `layer channels file`", n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(FeatureManifestEntry {
            layer: f[0].parse().map_err(|_| bad())?,
            channels: f[1].parse().map_err(|_| bad())?,
            file: dir.join(f[2].trim()),
        });
    }
    Ok(out)
}
