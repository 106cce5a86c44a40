//! MetaImage volumes, candidate/annotation CSV files, and the mapping
//! between world millimeters and voxel indices.
//!
//! Volumes are stored x-fastest, matching the raw MetaImage byte order, and
//! every module downstream indexes them the same way.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Millimeters per voxel step along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let s = Spacing { dx, dy, dz };
        if s.as_array().iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(s)
        } else {
            Err(Error::invalid(format!(
                "spacing components must be positive, got ({dx}, {dy}, {dz})"
            )))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }
}

/// A CT scan: a 3D grid of Hounsfield-unit intensities placed in world space.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: Spacing,
    origin: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: Spacing, origin: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("volume dims must be >= 1, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume data has {} values, dims {:?} need {n}",
                data.len(),
                dims
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: Spacing, origin: [f64; 3], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, origin, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Continuous voxel coordinate of a world point; may fall outside the grid.
    pub fn world_to_voxel(&self, world: [f64; 3]) -> [f64; 3] {
        let s = self.spacing.as_array();
        [
            (world[0] - self.origin[0]) / s[0],
            (world[1] - self.origin[1]) / s[1],
            (world[2] - self.origin[2]) / s[2],
        ]
    }

    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        let s = self.spacing.as_array();
        [
            self.origin[0] + index[0] * s[0],
            self.origin[1] + index[1] * s[1],
            self.origin[2] + index[2] * s[2],
        ]
    }

    /// True when every value is an integer representable as `i16`.
    pub fn fits_short(&self) -> bool {
        self.data
            .iter()
            .all(|&v| v.fract() == 0.0 && v >= i16::MIN as f32 && v <= i16::MAX as f32)
    }
}

/// Payload element types understood by the reader and writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }
}

/// Parsed MetaImage header, without the voxel payload.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaHeader {
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub origin: [f64; 3],
    pub element_type: ElementType,
    pub data_file: PathBuf,
}

fn header_err(path: &Path, key: &str, reason: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_floats(path: &Path, key: &str, value: &str, n: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = value
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| header_err(path, key, format!("expected {n} numbers, got `{value}`")))?;
    if vals.len() != n || vals.iter().any(|v| !v.is_finite()) {
        return Err(header_err(path, key, format!("expected {n} numbers, got `{value}`")));
    }
    Ok(vals)
}

fn parse_bool(path: &Path, key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(header_err(path, key, format!("expected True/False, got `{value}`"))),
    }
}

/// Reads and validates a `.mhd` header.
pub fn read_metaimage_header(path: impl AsRef<Path>) -> Result<MetaHeader> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut fields: HashMap<String, String> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            header_err(path, line, format!("line {} is not `Key = Value`", lineno + 1))
        })?;
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| header_err(path, key, "missing"))
    };

    let ndims = get("NDims")?;
    if ndims.parse::<usize>().ok() != Some(3) {
        return Err(header_err(path, "NDims", format!("only 3-D volumes are supported, got `{ndims}`")));
    }

    let dim_vals = parse_floats(path, "DimSize", get("DimSize")?, 3)?;
    let mut dims = [0usize; 3];
    for (d, v) in dims.iter_mut().zip(&dim_vals) {
        if *v < 1.0 || v.fract() != 0.0 {
            return Err(header_err(path, "DimSize", format!("invalid extent {v}")));
        }
        *d = *v as usize;
    }

    let sp = parse_floats(path, "ElementSpacing", get("ElementSpacing")?, 3)?;
    let spacing = Spacing::new(sp[0], sp[1], sp[2])
        .map_err(|_| header_err(path, "ElementSpacing", "components must be positive"))?;

    let origin_key = ["Offset", "Origin", "Position"]
        .into_iter()
        .find(|k| fields.contains_key(*k));
    let origin = match origin_key {
        Some(k) => {
            let o = parse_floats(path, k, &fields[k], 3)?;
            [o[0], o[1], o[2]]
        }
        None => [0.0; 3],
    };

    let element_type = match get("ElementType")? {
        "MET_SHORT" => ElementType::Short,
        "MET_FLOAT" => ElementType::Float,
        other => {
            return Err(header_err(path, "ElementType", format!("unsupported type `{other}`")))
        }
    };

    for key in ["ElementByteOrderMSB", "BinaryDataByteOrderMSB"] {
        if let Some(v) = fields.get(key) {
            if parse_bool(path, key, v)? {
                return Err(header_err(path, key, "big-endian payloads are not supported"));
            }
        }
    }
    if let Some(v) = fields.get("CompressedData") {
        if parse_bool(path, "CompressedData", v)? {
            return Err(header_err(path, "CompressedData", "compressed payloads are not supported"));
        }
    }
    if let Some(v) = fields.get("TransformMatrix") {
        let m = parse_floats(path, "TransformMatrix", v, 9)?;
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        if m.iter().zip(identity).any(|(a, b)| (a - b).abs() > 1e-6) {
            return Err(header_err(path, "TransformMatrix", "only identity orientation is supported"));
        }
    }

    let data_name = get("ElementDataFile")?;
    if data_name.eq_ignore_ascii_case("LOCAL") || data_name.starts_with("LIST") || data_name.contains('%') {
        return Err(header_err(path, "ElementDataFile", format!("unsupported data file `{data_name}`")));
    }
    let data_file = path.parent().unwrap_or(Path::new(".")).join(data_name);

    Ok(MetaHeader {
        dims,
        spacing,
        origin,
        element_type,
        data_file,
    })
}

/// Reads a MetaImage volume (header plus little-endian raw payload).
pub fn read_metaimage(path: impl AsRef<Path>) -> Result<Volume> {
    let header = read_metaimage_header(path)?;
    let bytes = fs::read(&header.data_file).map_err(|e| Error::io(&header.data_file, e))?;
    let n: usize = header.dims.iter().product();
    let expected = n * header.element_type.size();
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            path: header.data_file.clone(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let data: Vec<f32> = match header.element_type {
        ElementType::Short => bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
            .collect(),
        ElementType::Float => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    };
    Volume::new(header.dims, header.spacing, header.origin, data)
}

/// Writes `volume` as `path` (header) plus a sibling `.raw` payload.
///
/// Integer-valued volumes within `i16` range are stored as `MET_SHORT`,
/// everything else as `MET_FLOAT`.
pub fn write_metaimage(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let element_type = if volume.fits_short() {
        ElementType::Short
    } else {
        ElementType::Float
    };
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("bad output path {}", path.display())))?
        .to_string();

    let [nx, ny, nz] = volume.dims;
    let s = volume.spacing;
    let o = volume.origin;
    let mut header = String::new();
    let _ = writeln!(header, "ObjectType = Image");
    let _ = writeln!(header, "NDims = 3");
    let _ = writeln!(header, "BinaryData = True");
    let _ = writeln!(header, "BinaryDataByteOrderMSB = False");
    let _ = writeln!(header, "CompressedData = False");
    let _ = writeln!(header, "TransformMatrix = 1 0 0 0 1 0 0 0 1");
    let _ = writeln!(header, "Offset = {} {} {}", o[0], o[1], o[2]);
    let _ = writeln!(header, "ElementSpacing = {} {} {}", s.dx, s.dy, s.dz);
    let _ = writeln!(header, "DimSize = {nx} {ny} {nz}");
    let _ = writeln!(header, "ElementType = {}", element_type.tag());
    let _ = writeln!(header, "ElementDataFile = {raw_name}");

    let mut bytes = Vec::with_capacity(volume.data.len() * element_type.size());
    match element_type {
        ElementType::Short => {
            for &v in &volume.data {
                bytes.extend_from_slice(&(v as i16).to_le_bytes());
            }
        }
        ElementType::Float => {
            for &v in &volume.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

/// Scan identifier of a volume file: its file stem (the LUNA16 series UID).
pub fn scan_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// One row of a candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub id: usize,
    pub scan_id: String,
    pub world: [f64; 3],
    pub label: u8,
}

/// One ground-truth nodule.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub nodule_id: usize,
    pub scan_id: String,
    pub world: [f64; 3],
    pub diameter: f64,
}

pub const CANDIDATES_HEADER: &str = "seriesuid,coordX,coordY,coordZ,class";
pub const ANNOTATIONS_HEADER: &str = "seriesuid,coordX,coordY,coordZ,diameter_mm";

/// Splits a headed CSV into numbered data rows, checking the header and column count.
fn csv_rows<'a>(
    path: &Path,
    text: &'a str,
    header: &str,
) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    let expected_cols = header.split(',').count();
    match lines.next() {
        Some((_, first)) if first.trim() == header => {}
        Some((_, first)) => {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("expected header `{header}`, got `{}`", first.trim()),
            })
        }
        None => {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != expected_cols {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected {expected_cols} columns, found {}", cols.len()),
            });
        }
        rows.push((i + 1, cols));
    }
    Ok(rows)
}

fn parse_coord(path: &Path, line: usize, cols: &[&str]) -> Result<[f64; 3]> {
    let mut w = [0.0; 3];
    for (a, c) in w.iter_mut().zip(&cols[1..4]) {
        *a = c
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Csv {
                path: path.to_path_buf(),
                line,
                reason: format!("non-numeric coordinate `{c}`"),
            })?;
    }
    Ok(w)
}

pub fn read_candidates_csv(path: impl AsRef<Path>) -> Result<Vec<CandidateRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_candidates(path, &text)
}

pub(crate) fn parse_candidates(path: &Path, text: &str) -> Result<Vec<CandidateRecord>> {
    csv_rows(path, text, CANDIDATES_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(id, (line, cols))| {
            let world = parse_coord(path, line, &cols)?;
            let label = match cols[4] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Csv {
                        path: path.to_path_buf(),
                        line,
                        reason: format!("class must be 0 or 1, got `{other}`"),
                    })
                }
            };
            Ok(CandidateRecord {
                id,
                scan_id: cols[0].to_string(),
                world,
                label,
            })
        })
        .collect()
}

pub fn read_annotations_csv(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(path, &text)
}

pub(crate) fn parse_annotations(path: &Path, text: &str) -> Result<Vec<AnnotationRecord>> {
    csv_rows(path, text, ANNOTATIONS_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(nodule_id, (line, cols))| {
            let world = parse_coord(path, line, &cols)?;
            let diameter = cols[4]
                .parse::<f64>()
                .ok()
                .filter(|d| d.is_finite() && *d > 0.0)
                .ok_or_else(|| Error::Csv {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("diameter must be a positive number, got `{}`", cols[4]),
                })?;
            Ok(AnnotationRecord {
                nodule_id,
                scan_id: cols[0].to_string(),
                world,
                diameter,
            })
        })
        .collect()
}

/// Writes candidates in file order; reading the file back reassigns ids 0.. in that order.
pub fn write_candidates_csv<'a, I>(path: impl AsRef<Path>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, [f64; 3], u8)>,
{
    let path = path.as_ref();
    let mut out = String::from(CANDIDATES_HEADER);
    out.push('\n');
    for (scan, w, label) in rows {
        let _ = writeln!(out, "{scan},{},{},{},{label}", w[0], w[1], w[2]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_annotations_csv(path: impl AsRef<Path>, rows: &[AnnotationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(ANNOTATIONS_HEADER);
    out.push('\n');
    for a in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            a.scan_id, a.world[0], a.world[1], a.world[2], a.diameter
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a newline-separated list of scan ids, skipping blank lines.
pub fn read_scan_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Spacing {
        Spacing::new(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn zero_volume_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("z.mhd");
        fs::write(
            &hdr,
            "NDims = 3\nDimSize = 4 4 2\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = z.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("z.raw"), vec![0u8; 64]).unwrap();
        let v = read_metaimage(&hdr).unwrap();
        assert_eq!(v.dims(), [4, 4, 2]);
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(v.origin(), [0.0; 3]);
    }

    #[test]
    fn short_payload_is_size_error() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("s.mhd");
        fs::write(
            &hdr,
            "NDims = 3\nDimSize = 4 4 2\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = s.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("s.raw"), vec![0u8; 62]).unwrap();
        match read_metaimage(&hdr) {
            Err(Error::PayloadSize { expected, found, .. }) => {
                assert_eq!((expected, found), (64, 62));
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn header_errors_name_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("NDims = 3\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = a.raw\n", "DimSize"),
            ("NDims = 3\nDimSize = 2 2 x\nElementSpacing = 1 1 1\nElementType = MET_SHORT\nElementDataFile = a.raw\n", "DimSize"),
            ("NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nElementType = MET_UCHAR\nElementDataFile = a.raw\n", "ElementType"),
            ("NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nTransformMatrix = 0 1 0 1 0 0 0 0 1\nElementType = MET_SHORT\nElementDataFile = a.raw\n", "TransformMatrix"),
            ("NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nElementByteOrderMSB = True\nElementType = MET_SHORT\nElementDataFile = a.raw\n", "ElementByteOrderMSB"),
            ("NDims = 2\nDimSize = 2 2\nElementSpacing = 1 1\nElementType = MET_SHORT\nElementDataFile = a.raw\n", "NDims"),
            ("NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 0 1\nElementType = MET_SHORT\nElementDataFile = a.raw\n", "ElementSpacing"),
        ];
        for (i, (text, key)) in cases.iter().enumerate() {
            let hdr = dir.path().join(format!("h{i}.mhd"));
            fs::write(&hdr, text).unwrap();
            match read_metaimage_header(&hdr) {
                Err(Error::Header { key: k, .. }) => assert_eq!(&k, key, "case {i}"),
                other => panic!("case {i}: expected header error, got {other:?}"),
            }
        }
    }

    #[test]
    fn float_volume_declares_met_float() {
        let dir = tempfile::tempdir().unwrap();
        let sp = Spacing::new(0.7, 0.7, 1.0).unwrap();
        let v = Volume::new([2, 1, 1], sp, [-1.5, 2.25, 0.0], vec![0.5, -1000.0]).unwrap();
        let p = dir.path().join("f.mhd");
        write_metaimage(&v, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("ElementType = MET_FLOAT"));
        assert!(text.contains("ElementSpacing = 0.7 0.7 1\n"));
        assert_eq!(read_metaimage(&p).unwrap(), v);
    }

    #[test]
    fn integer_volume_writes_short() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new([2, 2, 1], unit(), [0.0; 3], vec![-1000.0, 0.0, 40.0, 3071.0]).unwrap();
        let p = dir.path().join("i.mhd");
        write_metaimage(&v, &p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("MET_SHORT"));
        assert_eq!(fs::metadata(dir.path().join("i.raw")).unwrap().len(), 8);
        assert_eq!(read_metaimage(&p).unwrap(), v);
    }

    #[test]
    fn world_voxel_mapping() {
        let v = Volume::filled([4, 4, 4], unit(), [0.0; 3], 0.0).unwrap();
        assert_eq!(v.world_to_voxel([3.0, 4.0, 5.0]), [3.0, 4.0, 5.0]);

        let sp = Spacing::new(0.7, 0.7, 1.0).unwrap();
        let v = Volume::filled([4, 4, 4], sp, [-100.0, -100.0, -50.0], 0.0).unwrap();
        assert_eq!(v.world_to_voxel([-100.0, -100.0, -50.0]), [0.0, 0.0, 0.0]);

        let sp = Spacing::new(0.5, 0.5, 2.0).unwrap();
        let v = Volume::filled([4, 4, 4], sp, [0.0; 3], 0.0).unwrap();
        assert_eq!(v.world_to_voxel([1.0, 1.0, 1.0]), [2.0, 2.0, 0.5]);
    }

    #[test]
    fn world_voxel_inverse_on_integer_indices() {
        let sp = Spacing::new(0.7, 0.625, 2.5).unwrap();
        let v = Volume::filled([2, 2, 2], sp, [-172.3, -98.1, -311.25], 0.0).unwrap();
        for i in 0..50 {
            for (j, k) in [(0, 0), (7, 13), (511, 300)] {
                let idx = [i as f64, j as f64, k as f64];
                let back = v.world_to_voxel(v.voxel_to_world(idx));
                for a in 0..3 {
                    assert!((back[a] - idx[a]).abs() < 1e-9, "{idx:?} -> {back:?}");
                }
            }
        }
    }

    #[test]
    fn candidates_csv_parsing() {
        let p = Path::new("c.csv");
        let recs = parse_candidates(
            p,
            "seriesuid,coordX,coordY,coordZ,class\na,1.5,-2,3,0\nb,0,0,0,1\n",
        )
        .unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].id, 1);
        assert_eq!(recs[0].world, [1.5, -2.0, 3.0]);
        assert_eq!(recs[1].label, 1);

        assert!(parse_candidates(p, "seriesuid,coordX,coordY,coordZ,class\n").unwrap().is_empty());

        match parse_candidates(p, "seriesuid,coordX,coordY,coordZ,class\na,1,2,3,0\na,1,2,3,2\n") {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_candidates(p, "seriesuid,coordX,coordY,coordZ,class\na,1,q,3,0\n") {
            Err(Error::Csv { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("non-numeric"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_candidates(p, "seriesuid,coordX,coordY,coordZ,class\na,1,2,0\n"),
            Err(Error::Csv { line: 2, .. })
        ));
        assert!(matches!(
            parse_candidates(p, "id,x,y,z,c\n"),
            Err(Error::Csv { line: 1, .. })
        ));
    }

    #[test]
    fn annotations_csv_parsing() {
        let p = Path::new("a.csv");
        let recs = parse_annotations(
            p,
            "seriesuid,coordX,coordY,coordZ,diameter_mm\ns,0,0,0,3.0\ns,1,1,1,5.5\n",
        )
        .unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].diameter, 3.0);
        assert_ne!(recs[0].nodule_id, recs[1].nodule_id);
        for bad in ["0", "-1", "nan", "x"] {
            let text = format!("seriesuid,coordX,coordY,coordZ,diameter_mm\ns,0,0,0,{bad}\n");
            assert!(matches!(parse_annotations(p, &text), Err(Error::Csv { line: 2, .. })), "{bad}");
        }
    }
}
