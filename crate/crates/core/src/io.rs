//! On-disk formats: binary frame records with an index, IMU CSV, TUM
//! trajectories, the dataset descriptor, labeled maps and JSON lines.
//!
//! A dataset directory holds `dataset.json`, `imu.csv`, `groundtruth.tum`
//! and `frames/` with one binary file per sweep listed in `frames/index.txt`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dataset::{Dataset, DatasetInfo, FramePoint, FrameRecord, PoseRecord};
use crate::geometry::{Pose, Vec3};
use crate::preprocess::ImuSample;
use crate::scc::FinalLabel;

pub const FRAME_MAGIC: [u8; 4] = *b"STNF";
pub const FRAME_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;
const POINT_LEN: usize = 4 * 4 + 2 + 1 + 2;
const NO_MOVER: u16 = u16::MAX;

pub const DATASET_FILE: &str = "dataset.json";
pub const IMU_FILE: &str = "imu.csv";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.tum";
pub const FRAMES_DIR: &str = "frames";
pub const INDEX_FILE: &str = "index.txt";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }

    fn format(path: &Path, msg: impl Into<String>) -> Self {
        DataError::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    fn at_line(path: &Path, line: usize, msg: impl std::fmt::Display) -> Self {
        DataError::Format { path: path.to_path_buf(), msg: format!("line {line}: {msg}") }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, DataError> {
    File::create(path).map(BufWriter::new).map_err(|e| DataError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    File::open(path).map(BufReader::new).map_err(|e| DataError::io(path, e))
}

fn truth_code(label: Option<FinalLabel>) -> u8 {
    match label {
        Some(FinalLabel::Static) => 0,
        Some(FinalLabel::Dynamic) => 1,
        None => 255,
    }
}

pub fn encode_frame(frame: &FrameRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + POINT_LEN * frame.points.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&frame.frame_time.to_le_bytes());
    out.extend_from_slice(&(frame.points.len() as u32).to_le_bytes());
    for p in &frame.points {
        for v in p.position.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(p.t_offset as f32).to_le_bytes());
        out.extend_from_slice(&p.ring.to_le_bytes());
        out.push(truth_code(p.truth));
        out.extend_from_slice(&p.mover_id.unwrap_or(NO_MOVER).to_le_bytes());
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<FrameRecord, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if bytes[..4] != FRAME_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FRAME_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let frame_time = f64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let count = u32_at(16) as usize;
    let expected = HEADER_LEN + count * POINT_LEN;
    if bytes.len() != expected {
        return Err(format!("header declares {count} points ({expected} bytes) but file has {} bytes", bytes.len()));
    }
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64;
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes"));
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let o = HEADER_LEN + i * POINT_LEN;
        let truth = match bytes[o + 18] {
            0 => Some(FinalLabel::Static),
            1 => Some(FinalLabel::Dynamic),
            255 => None,
            c => return Err(format!("point {i}: bad label code {c}")),
        };
        let mover = u16_at(o + 19);
        points.push(FramePoint {
            position: Vec3::new(f32_at(o), f32_at(o + 4), f32_at(o + 8)),
            t_offset: f32_at(o + 12),
            ring: u16_at(o + 16),
            truth,
            mover_id: (mover != NO_MOVER).then_some(mover),
        });
    }
    Ok(FrameRecord { frame_time, points })
}

pub fn write_frame(path: &Path, frame: &FrameRecord) -> Result<(), DataError> {
    fs::write(path, encode_frame(frame)).map_err(|e| DataError::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<FrameRecord, DataError> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| DataError::io(path, e))?;
    decode_frame(&bytes).map_err(|m| DataError::format(path, m))
}

pub fn write_imu_csv(path: &Path, imu: &[ImuSample]) -> Result<(), DataError> {
    let mut w = create(path)?;
    let mut run = || -> std::io::Result<()> {
        writeln!(w, "time,gx,gy,gz,ax,ay,az")?;
        for s in imu {
            let (g, a) = (s.angular_velocity, s.linear_acceleration);
            writeln!(w, "{},{},{},{},{},{},{}", s.time, g.x, g.y, g.z, a.x, a.y, a.z)?;
        }
        w.flush()
    };
    run().map_err(|e| DataError::io(path, e))
}

fn parse_floats<const N: usize>(path: &Path, line_no: usize, fields: &[&str]) -> Result<[f64; N], DataError> {
    if fields.len() != N {
        return Err(DataError::at_line(path, line_no, format!("expected {N} fields, found {}", fields.len())));
    }
    let mut out = [0.0; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f
            .trim()
            .parse()
            .map_err(|_| DataError::at_line(path, line_no, format!("`{}` is not a number", f.trim())))?;
    }
    Ok(out)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, DataError> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("time")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let v: [f64; 7] = parse_floats(path, i + 1, &fields)?;
        if out.last().is_some_and(|s| s.time >= v[0]) {
            return Err(DataError::at_line(path, i + 1, "timestamps must increase"));
        }
        out.push(ImuSample {
            time: v[0],
            angular_velocity: Vec3::new(v[1], v[2], v[3]),
            linear_acceleration: Vec3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

pub fn format_tum(samples: &[(f64, Pose)]) -> String {
    let mut s = String::new();
    for (t, pose) in samples {
        let [x, y, z, qx, qy, qz, qw]: [f64; 7] = PoseRecord(*pose).into();
        s.push_str(&format!("{t} {x} {y} {z} {qx} {qy} {qz} {qw}\n"));
    }
    s
}

pub fn write_tum(path: &Path, samples: &[(f64, Pose)]) -> Result<(), DataError> {
    fs::write(path, format_tum(samples)).map_err(|e| DataError::io(path, e))
}

pub fn read_tum(path: &Path) -> Result<Vec<(f64, Pose)>, DataError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let v: [f64; 8] = parse_floats(path, i + 1, &fields)?;
        let q = nalgebra::Vector4::new(v[4], v[5], v[6], v[7]);
        if !(q.norm() > 1e-6) {
            return Err(DataError::at_line(path, i + 1, "quaternion has zero norm"));
        }
        let pose = PoseRecord::from([v[1], v[2], v[3], v[4], v[5], v[6], v[7]]).0;
        out.push((v[0], pose));
    }
    Ok(out)
}

/// The descriptor stored as `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub frame_count: usize,
    pub info: DatasetInfo,
}

fn frame_file_name(index: usize) -> String {
    format!("{index:06}.bin")
}

/// Writes a dataset directory. Existing files with the same names are
/// replaced.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| DataError::io(&frames_dir, e))?;
    let mut index = String::new();
    for (i, f) in dataset.frames.iter().enumerate() {
        let name = frame_file_name(i);
        write_frame(&frames_dir.join(&name), f)?;
        index.push_str(&format!("{name} {}\n", f.frame_time));
    }
    let index_path = frames_dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| DataError::io(&index_path, e))?;
    write_imu_csv(&dir.join(IMU_FILE), &dataset.imu)?;
    write_tum(&dir.join(GROUND_TRUTH_FILE), &dataset.ground_truth)?;
    let desc = DatasetDescriptor { info: dataset.info.clone(), frame_count: dataset.frames.len() };
    let path = dir.join(DATASET_FILE);
    let json = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
    fs::write(&path, json + "\n").map_err(|e| DataError::io(&path, e))
}

/// A dataset directory opened for streaming: metadata and IMU are loaded,
/// frames are read on demand.
#[derive(Debug, Clone)]
pub struct DatasetReader {
    pub info: DatasetInfo,
    pub imu: Vec<ImuSample>,
    /// Empty when the directory has no ground truth file.
    pub ground_truth: Vec<(f64, Pose)>,
    frames: Vec<(PathBuf, f64)>,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(DATASET_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let desc: DatasetDescriptor = serde_json::from_str(&text).map_err(|e| DataError::format(&path, e.to_string()))?;
        if !(desc.info.scan_period > 0.0) {
            return Err(DataError::format(&path, "scan_period must be positive"));
        }
        let index_path = dir.join(FRAMES_DIR).join(INDEX_FILE);
        let mut frames = Vec::new();
        for (i, line) in open(&index_path)?.lines().enumerate() {
            let line = line.map_err(|e| DataError::io(&index_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(name), Some(time), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(DataError::at_line(&index_path, i + 1, "expected `<file> <frame_time>`"));
            };
            let time: f64 =
                time.parse().map_err(|_| DataError::at_line(&index_path, i + 1, "frame time is not a number"))?;
            if frames.last().is_some_and(|(_, t)| *t >= time) {
                return Err(DataError::at_line(&index_path, i + 1, "frame times must increase"));
            }
            frames.push((dir.join(FRAMES_DIR).join(name), time));
        }
        if frames.len() != desc.frame_count {
            return Err(DataError::format(
                &index_path,
                format!("index lists {} frames, descriptor says {}", frames.len(), desc.frame_count),
            ));
        }
        let imu = read_imu_csv(&dir.join(IMU_FILE))?;
        let gt_path = dir.join(GROUND_TRUTH_FILE);
        let ground_truth = if gt_path.exists() { read_tum(&gt_path)? } else { Vec::new() };
        Ok(Self { info: desc.info, imu, ground_truth, frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, index: usize) -> Result<FrameRecord, DataError> {
        let (path, time) = &self.frames[index];
        let f = read_frame(path)?;
        if f.frame_time != *time {
            return Err(DataError::format(path, format!("frame time {} differs from index ({time})", f.frame_time)));
        }
        Ok(f)
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<FrameRecord, DataError>> + '_ {
        (0..self.frames.len()).map(|i| self.frame(i))
    }

    pub fn load(self) -> Result<Dataset, DataError> {
        let frames = self.frames().collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset { info: self.info, frames, imu: self.imu, ground_truth: self.ground_truth })
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    DatasetReader::open(dir)?.load()
}

/// One frame's block of a labeled map file.
#[derive(Debug, Clone, PartialEq)]
pub struct MapBlock {
    pub frame: usize,
    pub time: f64,
    pub points: Vec<(Vec3, FinalLabel)>,
}

/// Formats a map block: a `# frame <index> <time> <count>` header followed
/// by `x y z label` lines, label 0 static and 1 dynamic.
pub fn format_map_block(frame: usize, time: f64, points: &[Vec3], labels: &[FinalLabel]) -> String {
    let mut s = String::with_capacity(32 * points.len() + 32);
    s.push_str(&format!("# frame {frame} {time} {}\n", points.len()));
    for (p, l) in points.iter().zip(labels) {
        s.push_str(&format!("{:.4} {:.4} {:.4} {}\n", p.x, p.y, p.z, u8::from(l.is_dynamic())));
    }
    s
}

pub fn read_map(path: &Path) -> Result<Vec<MapBlock>, DataError> {
    let mut blocks: Vec<MapBlock> = Vec::new();
    let mut expected = 0usize;
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# frame") {
            if let Some(b) = blocks.last() {
                if b.points.len() != expected {
                    return Err(DataError::at_line(path, i + 1, "previous block is short"));
                }
            }
            let f: Vec<&str> = rest.split_whitespace().collect();
            let v: [f64; 3] = parse_floats(path, i + 1, &f)?;
            expected = v[2] as usize;
            blocks.push(MapBlock { frame: v[0] as usize, time: v[1], points: Vec::with_capacity(expected) });
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let v: [f64; 4] = parse_floats(path, i + 1, &f)?;
        let label = match v[3] {
            0.0 => FinalLabel::Static,
            1.0 => FinalLabel::Dynamic,
            _ => return Err(DataError::at_line(path, i + 1, "label must be 0 or 1")),
        };
        let block = match blocks.last_mut() {
            Some(b) => b,
            None => {
                blocks.push(MapBlock { frame: 0, time: 0.0, points: Vec::new() });
                expected = usize::MAX;
                blocks.last_mut().expect("just pushed")
            }
        };
        block.points.push((Vec3::new(v[0], v[1], v[2]), label));
    }
    if let Some(b) = blocks.last() {
        if expected != usize::MAX && b.points.len() != expected {
            return Err(DataError::format(path, "last block is short"));
        }
    }
    Ok(blocks)
}

pub fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let s = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, s + "\n").map_err(|e| DataError::io(path, e))
}

pub fn read_json_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::at_line(path, i + 1, e))?);
    }
    Ok(out)
}
