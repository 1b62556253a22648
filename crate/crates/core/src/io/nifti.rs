//! Uncompressed single-file NIfTI-1 (`.nii`) with axis-aligned geometry.
//!
//! The world frame is taken from the sform when present, else the qform,
//! else `pixdim` with a zero origin. Only diagonal orientations with
//! positive scale are accepted. Vector-valued images store components in
//! the fifth dimension.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::{decode, ElementType};
use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const INTENT_VECTOR: i16 = 1007;

struct Reader<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        if self.big {
            BigEndian::read_i16(&self.bytes[at..])
        } else {
            LittleEndian::read_i16(&self.bytes[at..])
        }
    }

    fn f32(&self, at: usize) -> f32 {
        if self.big {
            BigEndian::read_f32(&self.bytes[at..])
        } else {
            LittleEndian::read_f32(&self.bytes[at..])
        }
    }
}

/// Header geometry is single precision; take the shortest decimal that maps to
/// the stored value, so a spacing written as 0.8 reads back as 0.8.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(f64::from(v))
}

fn datatype(path: &Path, code: i16) -> Result<ElementType> {
    Ok(match code {
        2 => ElementType::U8,
        4 => ElementType::I16,
        8 => ElementType::I32,
        16 => ElementType::F32,
        64 => ElementType::F64,
        256 => ElementType::I8,
        512 => ElementType::U16,
        other => return Err(Error::unsupported(path, "datatype", other.to_string())),
    })
}

pub(super) fn read(path: &Path) -> Result<(Volume, ElementType)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    if bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::unsupported(path, "compression", "gzip"));
    }
    let big = match (LittleEndian::read_i32(&bytes), BigEndian::read_i32(&bytes)) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::format(path, "sizeof_hdr is not 348")),
    };
    let r = Reader { bytes: &bytes, big };
    if &bytes[344..347] != b"n+1" {
        let magic = String::from_utf8_lossy(&bytes[344..348]).into_owned();
        return Err(Error::unsupported(path, "magic", magic));
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("dim[0] = {ndim} out of range")));
    }
    let dim: Vec<usize> = (1..=7)
        .map(|i| if i <= ndim as usize { r.i16(40 + 2 * i).max(1) as usize } else { 1 })
        .collect();
    if dim[3] > 1 {
        return Err(Error::unsupported(path, "dim[4] (time)", dim[3].to_string()));
    }
    if dim[5] > 1 || dim[6] > 1 {
        return Err(Error::unsupported(path, "dim[6..7]", format!("{} {}", dim[5], dim[6])));
    }
    let channels = dim[4];
    let ty = datatype(path, r.i16(70))?;
    let vox_offset = r.f32(108) as usize;
    let slope = r.f32(112);
    let inter = r.f32(116);
    let qform = r.i16(252);
    let sform = r.i16(254);
    let pixdim: Vec<f64> = (1..=3).map(|i| widen(r.f32(76 + 4 * i))).collect();
    let (spacing, origin) = if sform > 0 {
        let mut m = [[0.0f64; 4]; 3];
        for (row, m_row) in m.iter_mut().enumerate() {
            for (col, v) in m_row.iter_mut().enumerate() {
                *v = widen(r.f32(280 + 16 * row + 4 * col));
            }
        }
        for (row, m_row) in m.iter().enumerate() {
            for (col, &v) in m_row.iter().take(3).enumerate() {
                if row != col && v.abs() > 1e-6 * m[row][row].abs().max(1.0) {
                    return Err(Error::unsupported(path, "sform (oblique)", format!("{m:?}")));
                }
            }
            if m_row[row] <= 0.0 {
                return Err(Error::unsupported(path, "sform (axis flip)", format!("{m:?}")));
            }
        }
        ([m[0][0], m[1][1], m[2][2]], [m[0][3], m[1][3], m[2][3]])
    } else if qform > 0 {
        let (b, c, d) = (r.f32(256), r.f32(260), r.f32(264));
        if b.abs() > 1e-6 || c.abs() > 1e-6 || d.abs() > 1e-6 {
            return Err(Error::unsupported(path, "qform (oblique)", format!("quatern {b} {c} {d}")));
        }
        if r.f32(76) < 0.0 {
            return Err(Error::unsupported(path, "qform (axis flip)", "qfac = -1"));
        }
        (
            [pixdim[0], pixdim[1], pixdim[2]],
            [widen(r.f32(268)), widen(r.f32(272)), widen(r.f32(276))],
        )
    } else {
        ([pixdim[0], pixdim[1], pixdim[2]], [0.0; 3])
    };
    let grid = Grid::new([dim[0], dim[1], dim[2]], spacing, origin).map_err(|e| Error::format(path, e.to_string()))?;
    let n = grid.len();
    let need = n * channels * ty.size();
    let start = vox_offset.max(HEADER_SIZE);
    if bytes.len() < start + need {
        return Err(Error::format(
            path,
            format!("expected {need} data bytes after offset {start}, found {}", bytes.len().saturating_sub(start)),
        ));
    }
    let mut raw = decode(&bytes[start..start + need], ty, big);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut raw {
            *v = *v * slope + inter;
        }
    }
    // Components are the slowest axis on disk; volumes interleave channels.
    let data = if channels == 1 {
        raw
    } else {
        let mut data = vec![0.0f32; n * channels];
        for c in 0..channels {
            for i in 0..n {
                data[i * channels + c] = raw[c * n + i];
            }
        }
        data
    };
    Ok((Volume::new(grid, channels, data)?, ty))
}

pub(super) fn write(vol: &Volume, path: &Path) -> Result<()> {
    let g = &vol.grid;
    let n = g.len();
    let nc = vol.channels;
    let mut out = vec![0u8; DATA_OFFSET + n * nc * 4];
    let h = &mut out[..DATA_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    let dims: [i16; 8] = if nc > 1 {
        [5, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, nc as i16, 1, 1]
    } else {
        [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1]
    };
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    if nc > 1 {
        LittleEndian::write_i16(&mut h[68..], INTENT_VECTOR);
    }
    LittleEndian::write_i16(&mut h[70..], 16);
    LittleEndian::write_i16(&mut h[72..], 32);
    let pixdim = [1.0, g.spacing[0], g.spacing[1], g.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p as f32);
    }
    LittleEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    h[123] = 10; // xyzt_units: mm, s
    LittleEndian::write_i16(&mut h[252..], 1);
    LittleEndian::write_i16(&mut h[254..], 1);
    for a in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * a..], g.origin[a] as f32);
        LittleEndian::write_f32(&mut h[280 + 16 * a + 4 * a..], g.spacing[a] as f32);
        LittleEndian::write_f32(&mut h[280 + 16 * a + 12..], g.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    let body = &mut out[DATA_OFFSET..];
    for c in 0..nc {
        for i in 0..n {
            let at = (c * n + i) * 4;
            LittleEndian::write_f32(&mut body[at..], vol.data[i * nc + c]);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
