//! MetaImage-style `.mhd` header plus little-endian raw data.
//!
//! Headers list `NDims`, `DimSize`, `ElementSpacing`, `Offset`, optionally
//! `Channels`, then `ElementType` and `ElementDataFile`, in that order.
//! Anything else is rejected. Fields are stored as interleaved FLOAT32 with
//! `Channels = 3`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::kv;
use crate::volume::{Grid, LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    Uint16,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::Uint16 => 2,
        }
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementType::Float32 => "FLOAT32",
            ElementType::Uint16 => "UINT16",
        })
    }
}

impl FromStr for ElementType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FLOAT32" => Ok(ElementType::Float32),
            "UINT16" => Ok(ElementType::Uint16),
            other => Err(Error::InvalidValue(format!("unsupported ElementType '{other}'"))),
        }
    }
}

/// Parsed header.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaHeader {
    pub grid: Grid,
    pub channels: usize,
    pub element_type: ElementType,
    pub data_file: String,
}

impl MetaHeader {
    pub fn parse(text: &str) -> Result<MetaHeader> {
        let entries = kv::parse(text)?;
        let mut pos = 0;
        let mut take = |key: &str, optional: bool| -> Result<Option<&kv::Entry>> {
            match entries.get(pos) {
                Some(e) if e.key == key => {
                    pos += 1;
                    Ok(Some(e))
                }
                _ if optional => Ok(None),
                Some(e) => Err(Error::parse(e.line, format!("expected {key}, found {}", e.key))),
                None => Err(Error::parse(0, format!("missing {key}"))),
            }
        };
        let mut next = |key: &str| take(key, false).map(|e| e.expect("required key"));
        let ndims = next("NDims")?;
        if ndims.parse::<usize>()? != 3 {
            return Err(Error::parse(ndims.line, "only NDims = 3 is supported"));
        }
        let dims: [usize; 3] = next("DimSize")?.parse_array()?;
        let spacing: [f64; 3] = next("ElementSpacing")?.parse_array()?;
        let origin: [f64; 3] = next("Offset")?.parse_array()?;
        let grid = Grid::new(dims, spacing, origin)?;
        let channels = match take("Channels", true)? {
            Some(c) => match c.parse::<usize>()? {
                n @ (1 | 3) => n,
                n => return Err(Error::parse(c.line, format!("Channels must be 1 or 3, got {n}"))),
            },
            None => 1,
        };
        let mut next = |key: &str| take(key, false).map(|e| e.expect("required key"));
        let element_type: ElementType = next("ElementType")?.parse()?;
        let data_file = next("ElementDataFile")?.value.clone();
        if let Some(extra) = entries.get(pos) {
            return Err(Error::parse(extra.line, format!("unexpected key {}", extra.key)));
        }
        if channels == 3 && element_type != ElementType::Float32 {
            return Err(Error::InvalidValue("vector fields must be FLOAT32".into()));
        }
        Ok(MetaHeader {
            grid,
            channels,
            element_type,
            data_file,
        })
    }

    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        let mut s = format!(
            "NDims = 3\nDimSize = {} {} {}\nElementSpacing = {}\nOffset = {}\n",
            g.dims[0],
            g.dims[1],
            g.dims[2],
            join(&g.spacing),
            join(&g.origin)
        );
        if self.channels != 1 {
            s += &format!("Channels = {}\n", self.channels);
        }
        s += &format!("ElementType = {}\nElementDataFile = {}\n", self.element_type, self.data_file);
        s
    }

    /// Exact byte length of the raw payload.
    pub fn payload_len(&self) -> Result<usize> {
        self.grid
            .len()
            .checked_mul(self.channels * self.element_type.size())
            .ok_or_else(|| Error::InvalidValue("payload size overflows".into()))
    }

    fn check_payload(&self, bytes: &[u8]) -> Result<()> {
        let want = self.payload_len()?;
        if bytes.len() != want {
            return Err(Error::InvalidValue(format!(
                "raw data has {} bytes, header implies {want}",
                bytes.len()
            )));
        }
        Ok(())
    }
}

fn decode_values(header: &MetaHeader, bytes: &[u8]) -> Result<Vec<f64>> {
    header.check_payload(bytes)?;
    let values: Vec<f64> = match header.element_type {
        ElementType::Float32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        ElementType::Uint16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("raw data contains non-finite values".into()));
    }
    Ok(values)
}

/// Scalar volume from a header and its raw bytes.
pub fn decode_volume(header: &MetaHeader, bytes: &[u8]) -> Result<Volume> {
    if header.channels != 1 {
        return Err(Error::InvalidValue("expected a scalar volume".into()));
    }
    Volume::new(header.grid, decode_values(header, bytes)?)
}

/// Label volume; requires UINT16 data.
pub fn decode_labels(header: &MetaHeader, bytes: &[u8]) -> Result<LabelVolume> {
    if header.channels != 1 || header.element_type != ElementType::Uint16 {
        return Err(Error::InvalidValue("labels must be single-channel UINT16".into()));
    }
    header.check_payload(bytes)?;
    let data = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    LabelVolume::new(header.grid, data)
}

/// Three-channel vector field in voxel units.
pub fn decode_field(header: &MetaHeader, bytes: &[u8]) -> Result<VectorField> {
    if header.channels != 3 {
        return Err(Error::InvalidValue("expected Channels = 3".into()));
    }
    let v = decode_values(header, bytes)?;
    VectorField::new(header.grid, v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    vol.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn encode_labels(labels: &LabelVolume) -> Vec<u8> {
    labels.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode_field(field: &VectorField) -> Vec<u8> {
    field
        .data()
        .iter()
        .flatten()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

fn raw_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn read(path: &Path) -> Result<(MetaHeader, Vec<u8>)> {
    let header = MetaHeader::parse(&fs::read_to_string(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&header.data_file))?;
    Ok((header, bytes))
}

fn write(path: &Path, grid: &Grid, channels: usize, element_type: ElementType, bytes: &[u8]) -> Result<()> {
    let raw = raw_path(path);
    let name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidValue(format!("bad output path {}", path.display())))?;
    let header = MetaHeader {
        grid: *grid,
        channels,
        element_type,
        data_file: name.to_string(),
    };
    fs::write(&raw, bytes)?;
    fs::write(path, header.to_text())?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (h, b) = read(path)?;
    decode_volume(&h, &b)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let (h, b) = read(path)?;
    decode_labels(&h, &b)
}

pub fn read_field(path: &Path) -> Result<VectorField> {
    let (h, b) = read(path)?;
    decode_field(&h, &b)
}

/// Writes `path` and a sibling `.raw` file as FLOAT32.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    write(path, vol.grid(), 1, ElementType::Float32, &encode_volume(vol))
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    write(path, labels.grid(), 1, ElementType::Uint16, &encode_labels(labels))
}

pub fn write_field(path: &Path, field: &VectorField) -> Result<()> {
    write(path, field.grid(), 3, ElementType::Float32, &encode_field(field))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = "NDims = 3\nDimSize = 2 3 4\nElementSpacing = 1 1 2.5\nOffset = 0 -1 0\nElementType = UINT16\nElementDataFile = a.raw\n";

    #[test]
    fn header_round_trip() {
        let h = MetaHeader::parse(SCALAR).unwrap();
        assert_eq!(h.grid.dims, [2, 3, 4]);
        assert_eq!(h.grid.spacing, [1.0, 1.0, 2.5]);
        assert_eq!(h.channels, 1);
        assert_eq!(h.element_type, ElementType::Uint16);
        assert_eq!(MetaHeader::parse(&h.to_text()).unwrap(), h);
        let f = MetaHeader { channels: 3, element_type: ElementType::Float32, ..h };
        assert_eq!(MetaHeader::parse(&f.to_text()).unwrap(), f);
    }

    #[test]
    fn rejects_reordered_unknown_and_bad_keys() {
        let swapped = SCALAR.replace("ElementSpacing = 1 1 2.5\nOffset = 0 -1 0", "Offset = 0 -1 0\nElementSpacing = 1 1 2.5");
        let unknown = SCALAR.replace("ElementDataFile", "Comment = x\nElementDataFile");
        let cases = [
            swapped,
            unknown,
            SCALAR.replace("NDims = 3", "NDims = 2"),
            SCALAR.replace("UINT16", "FLOAT64"),
            SCALAR.replace("DimSize = 2 3 4", "DimSize = 2 3"),
            SCALAR.replace("DimSize = 2 3 4", "DimSize = 1 3 4"),
            SCALAR.replace("ElementType = UINT16", "Channels = 2\nElementType = UINT16"),
            SCALAR.replace("ElementType = UINT16", "Channels = 3\nElementType = UINT16"),
            SCALAR.replace("ElementDataFile = a.raw\n", ""),
            format!("{SCALAR}NDims = 3\n"),
        ];
        for c in &cases {
            assert!(MetaHeader::parse(c).is_err(), "{c}");
        }
    }

    #[test]
    fn decode_checks_length_and_values() {
        let h = MetaHeader::parse(SCALAR).unwrap();
        let bytes: Vec<u8> = (0..24u16).flat_map(|v| v.to_le_bytes()).collect();
        let labels = decode_labels(&h, &bytes).unwrap();
        assert_eq!(labels.get(1, 2, 3), 23);
        assert!(decode_labels(&h, &bytes[..46]).is_err());
        let vol = decode_volume(&h, &bytes).unwrap();
        assert_eq!(vol.get(1, 0, 0), 1.0);
        let fh = MetaHeader { element_type: ElementType::Float32, ..h.clone() };
        let mut nan: Vec<u8> = (0..24).flat_map(|_| 1.0f32.to_le_bytes()).collect();
        nan[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_volume(&fh, &nan).is_err());
        assert!(decode_labels(&fh, &nan).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new([3, 2, 2], [1.0, 2.0, 0.5], [1.0, 0.0, -3.0]).unwrap();
        let vol = Volume::from_fn(grid, |x, y, z| (x + 3 * y + 6 * z) as f64 * 0.25);
        let p = dir.path().join("v.mhd");
        write_volume(&p, &vol).unwrap();
        assert_eq!(read_volume(&p).unwrap(), vol);
        let labels = LabelVolume::from_fn(grid, |x, _, z| (x * z) as u16);
        let p = dir.path().join("l.mhd");
        write_labels(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        let field = VectorField::from_fn(grid, |p| [p[0] * 0.5, -p[1], p[2] + 0.125]);
        let p = dir.path().join("f.mhd");
        write_field(&p, &field).unwrap();
        assert_eq!(read_field(&p).unwrap(), field);
        assert!(read_volume(&p).is_err());
    }
}
