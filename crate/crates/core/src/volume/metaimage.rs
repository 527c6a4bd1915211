//! MetaImage (`.mhd` + raw, or single-file `.mha`) reading and writing.
//!
//! Only uncompressed, little-endian, single-channel rasters with an identity
//! direction matrix are supported. Payloads are x-fastest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{Grid, MaskVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    UChar,
    Short,
    UShort,
    Float,
    Double,
}

impl ElementType {
    pub fn name(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Short => "MET_SHORT",
            ElementType::UShort => "MET_USHORT",
            ElementType::Float => "MET_FLOAT",
            ElementType::Double => "MET_DOUBLE",
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::UChar => 1,
            ElementType::Short | ElementType::UShort => 2,
            ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "MET_UCHAR" => ElementType::UChar,
            "MET_SHORT" => ElementType::Short,
            "MET_USHORT" => ElementType::UShort,
            "MET_FLOAT" => ElementType::Float,
            "MET_DOUBLE" => ElementType::Double,
            other => {
                return Err(Error::format(
                    "ElementType",
                    format!("unsupported element type `{other}`"),
                ))
            }
        })
    }
}

/// An N-dimensional raster with values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub offset: Vec<f64>,
    pub element_type: ElementType,
    pub values: Vec<f64>,
}

struct Header {
    fields: BTreeMap<String, String>,
    /// Byte offset of the payload for `ElementDataFile = LOCAL`.
    local_payload_start: usize,
}

impl Header {
    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut fields = BTreeMap::new();
        let mut pos = 0usize;
        while pos < bytes.len() {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map_or(bytes.len(), |e| pos + e + 1);
            let line = std::str::from_utf8(&bytes[pos..end])
                .map_err(|_| Error::format("header", "non-UTF-8 header line"))?
                .trim();
            pos = end;
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("header", format!("line without `=`: {line:?}")))?;
            let key = key.trim().to_string();
            let is_data_file = key == "ElementDataFile";
            fields.insert(key, value.trim().to_string());
            // The data-file key terminates the header.
            if is_data_file {
                break;
            }
        }
        Ok(Self {
            fields,
            local_payload_start: pos,
        })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(key, "missing"))
    }

    fn get_any<'a>(&'a self, keys: &[&'a str]) -> Result<(&'a str, &'a str)> {
        keys.iter()
            .find_map(|k| self.fields.get(*k).map(|v| (*k, v.as_str())))
            .ok_or_else(|| Error::format(keys[0], "missing"))
    }

    fn numbers<T: std::str::FromStr>(&self, key: &str, value: &str, n: usize) -> Result<Vec<T>> {
        let parsed: Vec<T> = value
            .split_whitespace()
            .map(|t| {
                t.parse::<T>()
                    .map_err(|_| Error::format(key, format!("cannot parse `{t}`")))
            })
            .collect::<Result<_>>()?;
        if parsed.len() != n {
            return Err(Error::format(
                key,
                format!("expected {n} values, found {}", parsed.len()),
            ));
        }
        Ok(parsed)
    }

    fn flag(&self, key: &str, expected: bool) -> Result<()> {
        if let Some(v) = self.fields.get(key) {
            let b = match v.to_ascii_lowercase().as_str() {
                "true" | "1" => true,
                "false" | "0" => false,
                _ => return Err(Error::format(key, format!("expected True/False, found `{v}`"))),
            };
            if b != expected {
                return Err(Error::format(key, format!("unsupported value `{v}`")));
            }
        }
        Ok(())
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = Header::parse(&bytes)?;

    let object_type = header.get("ObjectType")?;
    if object_type != "Image" {
        return Err(Error::format(
            "ObjectType",
            format!("expected Image, found `{object_type}`"),
        ));
    }
    let ndims: usize = header
        .get("NDims")?
        .parse()
        .map_err(|_| Error::format("NDims", "not an integer"))?;
    if !(1..=3).contains(&ndims) {
        return Err(Error::format("NDims", format!("unsupported dimensionality {ndims}")));
    }
    let dims: Vec<usize> = header.numbers("DimSize", header.get("DimSize")?, ndims)?;
    if dims.contains(&0) {
        return Err(Error::format("DimSize", "zero-length axis"));
    }
    let spacing: Vec<f64> = header.numbers("ElementSpacing", header.get("ElementSpacing")?, ndims)?;
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::format("ElementSpacing", "spacing must be positive"));
    }
    let offset: Vec<f64> = match header.get_any(&["Offset", "Origin", "Position"]) {
        Ok((key, value)) => header.numbers(key, value, ndims)?,
        Err(_) => vec![0.0; ndims],
    };
    if offset.iter().any(|o| !o.is_finite()) {
        return Err(Error::format("Offset", "non-finite origin"));
    }
    if let Ok((key, value)) = header.get_any(&["TransformMatrix", "Rotation", "Orientation"]) {
        let m: Vec<f64> = header.numbers(key, value, ndims * ndims)?;
        let identity = (0..ndims * ndims).all(|i| m[i] == if i % (ndims + 1) == 0 { 1.0 } else { 0.0 });
        if !identity {
            return Err(Error::format(key, "only identity direction matrices are supported"));
        }
    }
    header.flag("BinaryData", true)?;
    header.flag("CompressedData", false)?;
    if let Some(ch) = header.fields.get("ElementNumberOfChannels") {
        if ch != "1" {
            return Err(Error::format(
                "ElementNumberOfChannels",
                "only single-channel data is supported",
            ));
        }
    }
    let element_type = ElementType::parse(header.get("ElementType")?)?;
    if element_type.size() > 1 {
        header.flag("BinaryDataByteOrderMSB", false)?;
        header.flag("ElementByteOrderMSB", false)?;
    }

    let data_file = header.get("ElementDataFile")?;
    let payload: std::borrow::Cow<[u8]> = if data_file == "LOCAL" {
        std::borrow::Cow::Borrowed(&bytes[header.local_payload_start..])
    } else {
        let data_path = path.parent().unwrap_or(Path::new(".")).join(data_file);
        std::borrow::Cow::Owned(fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?)
    };

    let count: usize = dims.iter().product();
    let expected = count * element_type.size();
    if payload.len() != expected {
        return Err(Error::format(
            "ElementDataFile",
            format!(
                "size mismatch: payload has {} bytes, DimSize x {} implies {expected}",
                payload.len(),
                element_type.name()
            ),
        ));
    }
    let values = decode(&payload, element_type);
    Ok(Raster {
        dims,
        spacing,
        offset,
        element_type,
        values,
    })
}

fn decode(payload: &[u8], ty: ElementType) -> Vec<f64> {
    match ty {
        ElementType::UChar => payload.iter().map(|&b| b as f64).collect(),
        ElementType::Short => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        ElementType::UShort => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        ElementType::Float => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        ElementType::Double => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

/// Writes `raster` as MetaImage. A `.mha` path gets an inline payload,
/// anything else a header plus a sibling `.raw` file.
pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = match raster.element_type {
        ElementType::UChar => raster.values.iter().map(|&v| v as u8).collect(),
        ElementType::Double => raster.values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ElementType::Float => raster.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        ElementType::Short => raster.values.iter().flat_map(|&v| (v as i16).to_le_bytes()).collect(),
        ElementType::UShort => raster.values.iter().flat_map(|&v| (v as u16).to_le_bytes()).collect(),
    };
    write_payload(
        &raster.dims,
        &raster.spacing,
        &raster.offset,
        raster.element_type,
        &payload,
        path.as_ref(),
    )
}

fn join(values: impl IntoIterator<Item = impl ToString>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_payload(
    dims: &[usize],
    spacing: &[f64],
    offset: &[f64],
    ty: ElementType,
    payload: &[u8],
    path: &Path,
) -> Result<()> {
    let n = dims.len();
    let inline = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mha"));
    let raw_path: PathBuf = path.with_extension("raw");
    let data_file = if inline {
        "LOCAL".to_string()
    } else {
        raw_path
            .file_name()
            .and_then(|f| f.to_str())
            .ok_or_else(|| Error::format("ElementDataFile", "output path has no file name"))?
            .to_string()
    };
    let identity = (0..n * n).map(|i| if i % (n + 1) == 0 { 1 } else { 0 });

    // f64 Display is the shortest string that parses back to the same value.
    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str(&format!("NDims = {n}\n"));
    header.push_str("BinaryData = True\n");
    header.push_str("BinaryDataByteOrderMSB = False\n");
    header.push_str("CompressedData = False\n");
    header.push_str(&format!("TransformMatrix = {}\n", join(identity)));
    header.push_str(&format!("Offset = {}\n", join(offset.iter())));
    header.push_str(&format!("ElementSpacing = {}\n", join(spacing.iter())));
    header.push_str(&format!("DimSize = {}\n", join(dims.iter())));
    header.push_str(&format!("ElementType = {}\n", ty.name()));
    header.push_str(&format!("ElementDataFile = {data_file}\n"));

    if inline {
        let mut bytes = header.into_bytes();
        bytes.extend_from_slice(payload);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    } else {
        fs::write(path, header).map_err(|e| Error::io(path, e))?;
        fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))
    }
}

/// Reads a 3D `MET_UCHAR` mask; any nonzero voxel is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let raster = read_raster(path)?;
    if raster.dims.len() != 3 {
        return Err(Error::format(
            "NDims",
            format!("mask must be 3D, found {}D", raster.dims.len()),
        ));
    }
    if raster.element_type != ElementType::UChar {
        return Err(Error::format(
            "ElementType",
            format!("mask must be MET_UCHAR, found {}", raster.element_type.name()),
        ));
    }
    let grid = Grid::new(
        [raster.dims[0], raster.dims[1], raster.dims[2]],
        [raster.spacing[0], raster.spacing[1], raster.spacing[2]],
        [raster.offset[0], raster.offset[1], raster.offset[2]],
    )?;
    let voxels = raster.values.iter().map(|&v| (v != 0.0) as u8).collect();
    Ok(MaskVolume { grid, voxels })
}

pub fn write_mask(v: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    let g = &v.grid;
    write_payload(
        &g.dims,
        &g.spacing,
        &g.origin,
        ElementType::UChar,
        &v.voxels,
        path.as_ref(),
    )
}
