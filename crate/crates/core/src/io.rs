//! SemanticKITTI point and label files.
//!
//! Point files are flat sequences of `(x, y, z, intensity)` records, four
//! little-endian `f32` per point. Label files hold one little-endian `u32` per
//! point; the lower 16 bits are the semantic id and the upper 16 bits the
//! instance id. Semantic ids are mapped to training ids through a
//! [`RemapTable`] read from a plain-text file of `raw_id train_id` lines.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::cloud::{Label, Point, PointCloud, IGNORE};
use crate::error::{Error, Result};

/// Bytes per point record.
pub const POINT_RECORD_BYTES: usize = 16;
/// Bytes per label record.
pub const LABEL_RECORD_BYTES: usize = 4;

/// Semantic-id mask of a raw label value.
pub const SEMANTIC_MASK: u32 = 0xFFFF;

/// What ingestion had to repair while decoding a point file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub records: usize,
    pub dropped_non_finite: usize,
    pub clamped_intensity: usize,
    /// Record index of every decoded point.
    pub kept: Vec<usize>,
}

pub fn read_point_file(path: impl AsRef<Path>) -> Result<(PointCloud, IngestReport)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_points(&bytes)
}

/// Decodes point records. Rows with a non-finite field are dropped and
/// intensities outside `[0, 1]` are clamped; both are counted in the report.
pub fn decode_points(bytes: &[u8]) -> Result<(PointCloud, IngestReport)> {
    let whole = bytes.len() / POINT_RECORD_BYTES * POINT_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "truncated point record: {} trailing bytes, records are {POINT_RECORD_BYTES} bytes",
                bytes.len() - whole
            ),
        });
    }
    let mut report = IngestReport {
        records: bytes.len() / POINT_RECORD_BYTES,
        ..Default::default()
    };
    let mut points = Vec::with_capacity(report.records);
    for (ri, rec) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        let mut p = Point::new(f(0), f(1), f(2), f(3));
        if !p.is_finite() {
            report.dropped_non_finite += 1;
            continue;
        }
        if !(0.0..=1.0).contains(&p.intensity) {
            p.intensity = p.intensity.clamp(0.0, 1.0);
            report.clamped_intensity += 1;
        }
        points.push(p);
        report.kept.push(ri);
    }
    Ok((PointCloud::new(points), report))
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_RECORD_BYTES);
    for p in cloud.points() {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_point_file(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_points(cloud)).map_err(|e| Error::io(path, e))
}

/// Reads raw `u32` label values, checking the count against the point file.
pub fn read_raw_labels(path: impl AsRef<Path>, n_points: usize) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw_labels(&bytes, n_points)
}

pub fn decode_raw_labels(bytes: &[u8], n_points: usize) -> Result<Vec<u32>> {
    if bytes.len() % LABEL_RECORD_BYTES != 0 {
        let whole = bytes.len() / LABEL_RECORD_BYTES * LABEL_RECORD_BYTES;
        return Err(Error::Format {
            offset: whole as u64,
            message: format!("truncated label record: {} trailing bytes", bytes.len() - whole),
        });
    }
    let actual = bytes.len() / LABEL_RECORD_BYTES;
    if actual != n_points {
        return Err(Error::LabelCount {
            expected: n_points,
            actual,
        });
    }
    Ok(bytes
        .chunks_exact(LABEL_RECORD_BYTES)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_raw_labels(raw: &[u32]) -> Vec<u8> {
    raw.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_raw_labels(path: impl AsRef<Path>, raw: &[u32]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raw_labels(raw)).map_err(|e| Error::io(path, e))
}

/// Reads a label file and maps every semantic id to its training id.
pub fn read_label_file(
    path: impl AsRef<Path>,
    n_points: usize,
    table: &RemapTable,
) -> Result<Vec<Label>> {
    let raw = read_raw_labels(path, n_points)?;
    Ok(raw.iter().map(|&v| table.to_train(v)).collect())
}

/// Writes training ids as raw semantic ids (instance bits zero).
pub fn write_label_file(path: impl AsRef<Path>, labels: &[Label], table: &RemapTable) -> Result<()> {
    let raw: Vec<u32> = labels.iter().map(|&l| table.to_raw(l)).collect();
    write_raw_labels(path, &raw)
}

/// Raw semantic id to training id mapping.
///
/// Unknown raw ids and ids mapped to `ignore` become [`IGNORE`]. The reverse
/// direction uses the first raw id listed for each training id; [`IGNORE`]
/// maps back to raw id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemapTable {
    forward: HashMap<u16, Label>,
    inverse: Vec<u16>,
}

impl RemapTable {
    /// Default SemanticKITTI mapping: 19 classes, unlabeled/outlier ignored.
    pub fn semantic_kitti() -> Self {
        include_str!("../data/semantic-kitti.remap")
            .parse()
            .expect("bundled remap table is valid")
    }

    /// Each of `classes` raw ids maps to itself.
    pub fn identity(classes: u16) -> Self {
        RemapTable {
            forward: (0..classes).map(|c| (c, c)).collect(),
            inverse: (0..classes).collect(),
        }
    }

    /// Raw id `c + 1` stands for training id `c`; raw id 0 is ignored. Used
    /// for label files of models that are not trained on SemanticKITTI ids.
    pub fn shifted(classes: u16) -> Self {
        RemapTable {
            forward: (0..classes).map(|c| (c + 1, c)).collect(),
            inverse: (1..=classes).collect(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .parse()
    }

    /// Number of training classes (one past the largest training id).
    pub fn classes(&self) -> usize {
        self.inverse.len()
    }

    pub fn to_train(&self, raw: u32) -> Label {
        let semantic = (raw & SEMANTIC_MASK) as u16;
        self.forward.get(&semantic).copied().unwrap_or(IGNORE)
    }

    pub fn to_raw(&self, label: Label) -> u32 {
        self.inverse.get(label as usize).copied().unwrap_or(0) as u32
    }
}

impl FromStr for RemapTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut forward = HashMap::new();
        let mut first_raw: Vec<Option<u16>> = Vec::new();
        for (lineno, line) in s.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("remap line {}: {what}: `{line}`", lineno + 1));
            let mut fields = line.split_whitespace();
            let (Some(raw), Some(train), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(bad("expected `raw_id train_id`"));
            };
            let raw: u16 = raw.parse().map_err(|_| bad("raw id is not a 16-bit integer"))?;
            let train = match train {
                "ignore" | "-" => IGNORE,
                t => {
                    let t: u16 = t.parse().map_err(|_| bad("train id is not an integer"))?;
                    if t == IGNORE {
                        return Err(bad("train id collides with the ignore sentinel"));
                    }
                    t
                }
            };
            if forward.insert(raw, train).is_some() {
                return Err(bad("duplicate raw id"));
            }
            if train != IGNORE {
                let t = train as usize;
                if first_raw.len() <= t {
                    first_raw.resize(t + 1, None);
                }
                first_raw[t].get_or_insert(raw);
            }
        }
        let inverse = first_raw
            .into_iter()
            .enumerate()
            .map(|(t, r)| r.ok_or_else(|| Error::Config(format!("remap table has no raw id for train id {t}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(RemapTable { forward, inverse })
    }
}
