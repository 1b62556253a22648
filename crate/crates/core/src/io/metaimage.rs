//! MetaImage (`.mha` with inline data, `.mhd` with a detached raw file).

use std::fs;
use std::path::Path;

use super::{decode, encode_f32_le, ElementType};
use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

fn element_type(path: &Path, s: &str) -> Result<ElementType> {
    Ok(match s {
        "MET_UCHAR" => ElementType::U8,
        "MET_CHAR" => ElementType::I8,
        "MET_USHORT" => ElementType::U16,
        "MET_SHORT" => ElementType::I16,
        "MET_INT" => ElementType::I32,
        "MET_FLOAT" => ElementType::F32,
        "MET_DOUBLE" => ElementType::F64,
        other => return Err(Error::unsupported(path, "ElementType", other)),
    })
}

fn numbers<T: std::str::FromStr>(path: &Path, key: &str, value: &str, n: usize) -> Result<Vec<T>> {
    let v: Vec<T> = value
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("{key}: cannot parse {value:?}")))?;
    if v.len() != n {
        return Err(Error::format(
            path,
            format!("{key}: expected {n} values, found {}", v.len()),
        ));
    }
    Ok(v)
}

fn is_true(v: &str) -> bool {
    v.eq_ignore_ascii_case("true") || v == "1"
}

pub(super) fn read(path: &Path) -> Result<(Volume, ElementType)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut dims = None;
    let mut spacing = vec![1.0f64; 3];
    let mut origin = vec![0.0f64; 3];
    let mut channels = 1usize;
    let mut ty = None;
    let mut big_endian = false;
    let mut data_file = None;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |e| pos + e + 1);
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::format(path, "header is not UTF-8"))?
            .trim();
        pos = end;
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("header line without '=': {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                if value != "3" {
                    return Err(Error::unsupported(path, "NDims", value));
                }
            }
            "DimSize" => dims = Some(numbers::<usize>(path, key, value, 3)?),
            "ElementSpacing" | "ElementSize" => spacing = numbers(path, key, value, 3)?,
            "Offset" | "Origin" | "Position" => origin = numbers(path, key, value, 3)?,
            "ElementNumberOfChannels" => channels = numbers::<usize>(path, key, value, 1)?[0],
            "ElementType" => ty = Some(element_type(path, value)?),
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => big_endian = is_true(value),
            "CompressedData" => {
                if is_true(value) {
                    return Err(Error::unsupported(path, "CompressedData", value));
                }
            }
            "BinaryData" => {
                if !is_true(value) {
                    return Err(Error::unsupported(path, "BinaryData", value));
                }
            }
            "TransformMatrix" | "Rotation" | "Orientation" => {
                let m: Vec<f64> = numbers(path, key, value, 9)?;
                let identity = m
                    .iter()
                    .enumerate()
                    .all(|(i, &v)| (v - if i % 4 == 0 { 1.0 } else { 0.0 }).abs() < 1e-6);
                if !identity {
                    return Err(Error::unsupported(path, key, value));
                }
            }
            "ElementDataFile" => {
                data_file = Some(value.to_string());
                break;
            }
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| Error::format(path, "missing DimSize"))?;
    let ty = ty.ok_or_else(|| Error::format(path, "missing ElementType"))?;
    let data_file = data_file.ok_or_else(|| Error::format(path, "missing ElementDataFile"))?;
    let grid = Grid::new(
        [dims[0], dims[1], dims[2]],
        [spacing[0], spacing[1], spacing[2]],
        [origin[0], origin[1], origin[2]],
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    if channels == 0 {
        return Err(Error::format(path, "ElementNumberOfChannels must be >= 1"));
    }
    let need = grid.len() * channels * ty.size();
    let raw = if data_file == "LOCAL" {
        bytes[pos..].to_vec()
    } else {
        if data_file.contains('%') || data_file.starts_with("LIST") {
            return Err(Error::unsupported(path, "ElementDataFile", data_file));
        }
        let raw_path = path.parent().unwrap_or(Path::new(".")).join(&data_file);
        fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?
    };
    if raw.len() < need {
        return Err(Error::format(
            path,
            format!("expected {need} data bytes, found {}", raw.len()),
        ));
    }
    let data = decode(&raw[..need], ty, big_endian);
    Ok((Volume::new(grid, channels, data)?, ty))
}

fn header(vol: &Volume, data_file: &str) -> String {
    let g = &vol.grid;
    let mut h = String::new();
    h.push_str("ObjectType = Image\nNDims = 3\nBinaryData = True\n");
    h.push_str("BinaryDataByteOrderMSB = False\nCompressedData = False\n");
    h.push_str("TransformMatrix = 1 0 0 0 1 0 0 0 1\n");
    h.push_str(&format!("Offset = {} {} {}\n", g.origin[0], g.origin[1], g.origin[2]));
    h.push_str(&format!(
        "ElementSpacing = {} {} {}\n",
        g.spacing[0], g.spacing[1], g.spacing[2]
    ));
    h.push_str(&format!("DimSize = {} {} {}\n", g.dims[0], g.dims[1], g.dims[2]));
    if vol.channels > 1 {
        h.push_str(&format!("ElementNumberOfChannels = {}\n", vol.channels));
    }
    h.push_str("ElementType = MET_FLOAT\n");
    h.push_str(&format!("ElementDataFile = {data_file}\n"));
    h
}

pub(super) fn write(vol: &Volume, path: &Path) -> Result<()> {
    let data = encode_f32_le(&vol.data);
    let detached = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("mhd"));
    if detached {
        let raw_path = path.with_extension("raw");
        let raw_name = raw_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        fs::write(&raw_path, data).map_err(|e| Error::io(&raw_path, e))?;
        fs::write(path, header(vol, &raw_name)).map_err(|e| Error::io(path, e))
    } else {
        let mut out = header(vol, "LOCAL").into_bytes();
        out.extend_from_slice(&data);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
