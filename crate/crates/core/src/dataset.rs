//! JSONL dataset files: one metadata header line, then one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationRecord;
use crate::camera::{BoundingBox, Pixel};
use crate::frame::{GazeVec, Point3};
use crate::model::euler::EulerGaze;
use crate::pogz::PlanePoint;
use crate::synth::{GazeSample, Labels, SceneConfig, Subject, FEATURE_DIM};

pub const SCHEMA: &str = "mage-dataset";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}: {msg}", path.display())]
    Schema { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    General,
    Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub version: u32,
    pub kind: DatasetKind,
    pub seed: u64,
    pub config_hash: String,
    pub config: SceneConfig,
    pub subjects: Vec<Subject>,
}

impl DatasetHeader {
    pub fn new(kind: DatasetKind, cfg: &SceneConfig, subjects: &[Subject]) -> Self {
        Self {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
            kind,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            subjects: subjects.to_vec(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleLine {
    features: Vec<f64>,
    bbox: [f64; 3],
    g_n: [f64; 2],
    g_o: [f64; 2],
    pogz: [f64; 2],
    r_on: [f64; 2],
    o_face: [f64; 3],
    subject: u32,
    head_pose: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationLine {
    subject: u32,
    face_px: [f64; 2],
    bbox: [f64; 3],
    g_o: [f64; 3],
    features: Vec<f64>,
}

impl From<&GazeSample> for SampleLine {
    fn from(s: &GazeSample) -> Self {
        Self {
            features: s.features.to_vec(),
            bbox: s.bbox.to_array(),
            g_n: s.labels.g_n.to_array(),
            g_o: s.labels.g_o.to_array(),
            pogz: s.labels.pogz.to_array(),
            r_on: s.labels.r_on,
            o_face: s.labels.o_face.to_array(),
            subject: s.subject,
            head_pose: s.head_pose.to_array(),
        }
    }
}

fn features_of(v: &[f64]) -> Result<[f64; FEATURE_DIM], String> {
    v.try_into()
        .map_err(|_| format!("expected {FEATURE_DIM} features, got {}", v.len()))
}

impl SampleLine {
    fn into_sample(self) -> Result<GazeSample, String> {
        let [x, y, z] = self.o_face;
        Ok(GazeSample {
            subject: self.subject,
            features: features_of(&self.features)?,
            bbox: BoundingBox::from_array(self.bbox).map_err(|e| e.to_string())?,
            head_pose: EulerGaze::from_array(self.head_pose),
            labels: Labels {
                g_n: EulerGaze::from_array(self.g_n),
                g_o: EulerGaze::from_array(self.g_o),
                pogz: PlanePoint::new(self.pogz[0], self.pogz[1]),
                r_on: self.r_on,
                o_face: Point3::new(x, y, z),
            },
        })
    }
}

impl From<&CalibrationRecord> for CalibrationLine {
    fn from(r: &CalibrationRecord) -> Self {
        Self {
            subject: r.subject,
            face_px: [r.face_px.x, r.face_px.y],
            bbox: r.bbox.to_array(),
            g_o: r.g_o.to_array(),
            features: r.features.to_vec(),
        }
    }
}

impl CalibrationLine {
    fn into_record(self) -> Result<CalibrationRecord, String> {
        let g = GazeVec::new(self.g_o[0], self.g_o[1], self.g_o[2]);
        if !((g.norm() - 1.0).abs() < 1e-9) {
            return Err(format!("g_o label is not unit length (|g| = {})", g.norm()));
        }
        Ok(CalibrationRecord {
            subject: self.subject,
            face_px: Pixel::new(self.face_px[0], self.face_px[1]),
            bbox: BoundingBox::from_array(self.bbox).map_err(|e| e.to_string())?,
            g_o: g,
            features: features_of(&self.features)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralDataset {
    pub header: DatasetHeader,
    pub samples: Vec<GazeSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDataset {
    pub header: DatasetHeader,
    pub records: Vec<CalibrationRecord>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_lines<T: Serialize>(
    path: &Path,
    header: &DatasetHeader,
    rows: impl Iterator<Item = T>,
) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    fn put<W: Write, V: Serialize>(w: &mut W, v: &V) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, v)?;
        w.write_all(b"\n")
    }
    put(&mut w, header).map_err(io_err(path))?;
    for r in rows {
        put(&mut w, &r).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_general(
    path: &Path,
    header: &DatasetHeader,
    samples: &[GazeSample],
) -> Result<(), DatasetError> {
    write_lines(path, header, samples.iter().map(SampleLine::from))
}

pub fn write_calibration(
    path: &Path,
    header: &DatasetHeader,
    records: &[CalibrationRecord],
) -> Result<(), DatasetError> {
    write_lines(path, header, records.iter().map(CalibrationLine::from))
}

fn read_lines<T: for<'de> Deserialize<'de>>(
    path: &Path,
    kind: DatasetKind,
) -> Result<(DatasetHeader, Vec<(usize, T)>), DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, msg: String| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (_, first) = lines.next().ok_or_else(|| DatasetError::Schema {
        path: path.to_path_buf(),
        msg: "missing header line".into(),
    })?;
    let header: DatasetHeader = serde_json::from_str(&first.map_err(io_err(path))?)
        .map_err(|e| parse_err(1, format!("header: {e}")))?;
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(DatasetError::Schema {
            path: path.to_path_buf(),
            msg: format!("unsupported schema {} v{}", header.schema, header.version),
        });
    }
    if header.kind != kind {
        return Err(DatasetError::Schema {
            path: path.to_path_buf(),
            msg: format!("expected a {kind:?} dataset, found {:?}", header.kind),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        rows.push((i + 1, row));
    }
    Ok((header, rows))
}

pub fn read_general(path: &Path) -> Result<GeneralDataset, DatasetError> {
    let (header, rows) = read_lines::<SampleLine>(path, DatasetKind::General)?;
    let samples = rows
        .into_iter()
        .map(|(line, r)| {
            r.into_sample().map_err(|msg| DatasetError::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(GeneralDataset { header, samples })
}

pub fn read_calibration(path: &Path) -> Result<CalibrationDataset, DatasetError> {
    let (header, rows) = read_lines::<CalibrationLine>(path, DatasetKind::Calibration)?;
    let records = rows
        .into_iter()
        .map(|(line, r)| {
            r.into_record().map_err(|msg| DatasetError::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(CalibrationDataset { header, records })
}
