//! On-disk formats: binary grid files, sequence manifests, box tracks and
//! proposal score streams.
//!
//! Grid file layout (all little-endian, voxels x-major):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `OCC4DPG1` |
//! | 12    | `nx, ny, nz` as u32 |
//! | 12    | voxel size as 3 x f32 |
//! | 12    | origin as 3 x f32 |
//! | 4     | flags u32: bit 0 visibility present, bit 1 instances omitted |
//! | 2 n   | classes, u16 |
//! | 4 n   | instances, u32 (absent when bit 1 is set) |
//! | ceil(n / 8) | visibility bitset, voxel `v` at bit `v % 8` of byte `v / 8` |
//!
//! Manifests, boxes, scores and configs are TOML documents.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{ClassEntry, ClassTable, GridSpec, PanopticGrid, Pose, TrackedBox, VoxelError};

pub const GRID_MAGIC: &[u8; 8] = b"OCC4DPG1";
pub const HEADER_LEN: usize = 40;
pub const FLAG_VISIBILITY: u32 = 1;
pub const FLAG_NO_INSTANCES: u32 = 1 << 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected OCC4DPG1")]
    BadMagic { found: [u8; 8] },
    #[error("truncated payload: need {expected} bytes, file has {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("trailing bytes: expected {expected} bytes, file has {got}")]
    TrailingBytes { expected: usize, got: usize },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("unexpected file kind: {0}")]
    WrongKind(String),
    #[error("invariant violation at voxel {voxel}: {reason}")]
    InvariantViolation { voxel: usize, reason: String },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: `{field}`: {message}", path.display())]
    Validation {
        path: PathBuf,
        field: String,
        message: String,
    },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn validation(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Self {
        DatasetError::Validation {
            path: path.to_path_buf(),
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<VoxelError> for DatasetError {
    fn from(e: VoxelError) -> Self {
        match e {
            VoxelError::InvariantViolation { voxel, reason } => DatasetError::InvariantViolation { voxel, reason },
            other => DatasetError::Header(other.to_string()),
        }
    }
}

/// f32 header values are widened through their shortest decimal form so that
/// e.g. `0.4f32` reads back as `0.4f64`.
fn widen(x: f32) -> f64 {
    format!("{x}").parse().expect("f32 display is a valid f64 literal")
}

fn encode_header(spec: &GridSpec, flags: u32, out: &mut Vec<u8>) {
    out.extend_from_slice(GRID_MAGIC);
    for d in spec.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spec.voxel_size() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for o in spec.origin() {
        out.extend_from_slice(&(o as f32).to_le_bytes());
    }
    out.extend_from_slice(&flags.to_le_bytes());
}

fn encode_visibility(vis: &[bool], out: &mut Vec<u8>) {
    let mut bytes = vec![0u8; vis.len().div_ceil(8)];
    for (v, _) in vis.iter().enumerate().filter(|(_, &b)| b) {
        bytes[v / 8] |= 1 << (v % 8);
    }
    out.extend_from_slice(&bytes);
}

fn payload_len(n: usize, flags: u32) -> usize {
    let mut len = 2 * n;
    if flags & FLAG_NO_INSTANCES == 0 {
        len += 4 * n;
    }
    if flags & FLAG_VISIBILITY != 0 {
        len += n.div_ceil(8);
    }
    len
}

/// Encodes a panoptic grid. Frame index and pose live in the manifest; spec
/// values are stored as f32.
pub fn encode_grid(grid: &PanopticGrid) -> Vec<u8> {
    let flags = if grid.visibility().is_some() { FLAG_VISIBILITY } else { 0 };
    let n = grid.num_voxels();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 + payload_len(n, flags));
    encode_header(grid.spec(), flags, &mut out);
    for c in grid.classes() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for i in grid.instances() {
        out.extend_from_slice(&i.to_le_bytes());
    }
    if let Some(vis) = grid.visibility() {
        encode_visibility(vis, &mut out);
    }
    out
}

/// Encodes a semantic-only grid (instances omitted).
pub fn encode_semantic(spec: &GridSpec, classes: &[u16], visibility: Option<&[bool]>) -> Vec<u8> {
    let flags = FLAG_NO_INSTANCES | if visibility.is_some() { FLAG_VISIBILITY } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 + payload_len(classes.len(), flags));
    encode_header(spec, flags, &mut out);
    for c in classes {
        out.extend_from_slice(&c.to_le_bytes());
    }
    if let Some(vis) = visibility {
        encode_visibility(vis, &mut out);
    }
    out
}

/// Decoded grid file contents prior to label validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub spec: GridSpec,
    pub classes: Vec<u16>,
    pub instances: Option<Vec<u32>>,
    pub visibility: Option<Vec<bool>>,
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawGrid, DatasetError> {
    if bytes.len() < 8 {
        return Err(DatasetError::TruncatedPayload {
            expected: HEADER_LEN + 8,
            got: bytes.len(),
        });
    }
    if &bytes[..8] != GRID_MAGIC {
        return Err(DatasetError::BadMagic {
            found: bytes[..8].try_into().unwrap(),
        });
    }
    if bytes.len() < 8 + HEADER_LEN {
        return Err(DatasetError::TruncatedPayload {
            expected: HEADER_LEN + 8,
            got: bytes.len(),
        });
    }
    let dims = [u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16)].map(|d| d as usize);
    let voxel_size = [f32_at(bytes, 20), f32_at(bytes, 24), f32_at(bytes, 28)].map(widen);
    let origin = [f32_at(bytes, 32), f32_at(bytes, 36), f32_at(bytes, 40)].map(widen);
    let flags = u32_at(bytes, 44);
    if flags & !(FLAG_VISIBILITY | FLAG_NO_INSTANCES) != 0 {
        return Err(DatasetError::Header(format!("unknown flag bits {flags:#x}")));
    }
    let spec = GridSpec::new(dims, voxel_size, origin).map_err(|e| DatasetError::Header(e.to_string()))?;
    let n = spec.num_voxels();
    let expected = 8 + HEADER_LEN + payload_len(n, flags);
    if bytes.len() < expected {
        return Err(DatasetError::TruncatedPayload {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DatasetError::TrailingBytes {
            expected,
            got: bytes.len(),
        });
    }
    let mut at = 8 + HEADER_LEN;
    let classes: Vec<u16> = bytes[at..at + 2 * n]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    at += 2 * n;
    let instances = if flags & FLAG_NO_INSTANCES == 0 {
        let ids = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        at += 4 * n;
        Some(ids)
    } else {
        None
    };
    let visibility = (flags & FLAG_VISIBILITY != 0).then(|| (0..n).map(|v| bytes[at + v / 8] >> (v % 8) & 1 == 1).collect());
    Ok(RawGrid {
        spec,
        classes,
        instances,
        visibility,
    })
}

/// Decodes and validates a panoptic grid (frame index 0, identity pose).
pub fn decode_grid(bytes: &[u8], table: &ClassTable) -> Result<PanopticGrid, DatasetError> {
    let raw = decode_raw(bytes)?;
    let instances = raw
        .instances
        .ok_or_else(|| DatasetError::WrongKind("semantic grid where a panoptic grid was expected".into()))?;
    Ok(PanopticGrid::new(raw.spec, raw.classes, instances, raw.visibility, 0, Pose::identity(), table)?)
}

pub fn read_grid(path: &Path, table: &ClassTable) -> Result<PanopticGrid, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    decode_grid(&bytes, table)
}

pub fn write_grid(grid: &PanopticGrid, path: &Path) -> Result<(), DatasetError> {
    write_bytes(path, &encode_grid(grid))
}

pub fn read_raw(path: &Path) -> Result<RawGrid, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    decode_raw(&bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| DatasetError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    write_bytes(path, text.as_bytes())
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    toml::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("in-memory values serialize to TOML")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub frame_index: u64,
    /// Relative to the manifest directory.
    pub grid_path: PathBuf,
    pub ego_pose: Pose,
    pub timestamp: f64,
}

/// Ordered frame list plus class table for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub sequence_id: String,
    pub class_table: ClassTable,
    pub frames: Vec<FrameEntry>,
    pub boxes_path: Option<PathBuf>,
    pub scores_path: Option<PathBuf>,
    /// Directory that relative paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    sequence_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores_path: Option<PathBuf>,
    classes: Vec<ClassEntry>,
    frames: Vec<RawFrame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    frame_index: u64,
    grid_path: PathBuf,
    timestamp: f64,
    ego_pose: [[f64; 4]; 4],
}

impl SequenceManifest {
    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn frame_indices(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.frame_index).collect()
    }

    /// Reads frame `pos` (position in the frame list) as a panoptic grid.
    pub fn load_frame(&self, pos: usize) -> Result<PanopticGrid, DatasetError> {
        let entry = &self.frames[pos];
        let grid = read_grid(&self.resolve(&entry.grid_path), &self.class_table)?;
        Ok(grid.with_frame_index(entry.frame_index).with_ego_pose(entry.ego_pose))
    }

    pub fn to_toml(&self) -> String {
        let raw = RawManifest {
            sequence_id: self.sequence_id.clone(),
            boxes_path: self.boxes_path.clone(),
            scores_path: self.scores_path.clone(),
            classes: self.class_table.entries().to_vec(),
            frames: self
                .frames
                .iter()
                .map(|f| RawFrame {
                    frame_index: f.frame_index,
                    grid_path: f.grid_path.clone(),
                    timestamp: f.timestamp,
                    ego_pose: f.ego_pose.to_rows(),
                })
                .collect(),
        };
        to_toml(&raw)
    }
}

pub fn load_manifest(path: &Path) -> Result<SequenceManifest, DatasetError> {
    let raw: RawManifest = parse_toml(path)?;
    let class_table =
        ClassTable::new(raw.classes).map_err(|e| DatasetError::validation(path, "classes", e.to_string()))?;
    if raw.frames.is_empty() {
        return Err(DatasetError::validation(path, "frames", "at least one frame required"));
    }
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (k, f) in raw.frames.into_iter().enumerate() {
        if let Some(prev) = frames.last().map(|p: &FrameEntry| p.frame_index) {
            if f.frame_index <= prev {
                return Err(DatasetError::validation(
                    path,
                    format!("frames[{k}].frame_index"),
                    format!("frame_index not increasing ({prev} then {})", f.frame_index),
                ));
            }
        }
        let ego_pose = Pose::from_rows(f.ego_pose)
            .map_err(|e| DatasetError::validation(path, format!("frames[{k}].ego_pose"), e.to_string()))?;
        if !f.timestamp.is_finite() {
            return Err(DatasetError::validation(path, format!("frames[{k}].timestamp"), "not finite"));
        }
        frames.push(FrameEntry {
            frame_index: f.frame_index,
            grid_path: f.grid_path,
            ego_pose,
            timestamp: f.timestamp,
        });
    }
    Ok(SequenceManifest {
        sequence_id: raw.sequence_id,
        class_table,
        frames,
        boxes_path: raw.boxes_path,
        scores_path: raw.scores_path,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn save_manifest(manifest: &SequenceManifest, path: &Path) -> Result<(), DatasetError> {
    write_text(path, &manifest.to_toml())
}

#[derive(Serialize, Deserialize, Default)]
struct BoxesDoc {
    #[serde(default)]
    boxes: Vec<TrackedBox>,
}

/// Loads and validates a box-track file against `table`.
pub fn load_boxes(path: &Path, table: &ClassTable) -> Result<Vec<TrackedBox>, DatasetError> {
    let doc: BoxesDoc = parse_toml(path)?;
    for (k, b) in doc.boxes.iter().enumerate() {
        b.validate(table).map_err(|e| match e {
            VoxelError::InvalidBox { field, reason } => DatasetError::validation(path, format!("boxes[{k}].{field}"), reason),
            other => DatasetError::validation(path, format!("boxes[{k}]"), other.to_string()),
        })?;
    }
    Ok(doc.boxes)
}

pub fn boxes_to_toml(boxes: &[TrackedBox]) -> String {
    to_toml(&BoxesDoc { boxes: boxes.to_vec() })
}

pub fn save_boxes(boxes: &[TrackedBox], path: &Path) -> Result<(), DatasetError> {
    write_text(path, &boxes_to_toml(boxes))
}

/// Classification score attached to one segment of a predicted frame.
/// Thing segments are keyed by instance id; stuff segments use instance 0
/// and cover every voxel of their class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub frame_index: u64,
    pub instance_id: u32,
    pub class_id: u16,
    pub score: f64,
}

#[derive(Serialize, Deserialize, Default)]
struct ScoresDoc {
    #[serde(default)]
    proposals: Vec<ScoreRecord>,
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>, DatasetError> {
    let doc: ScoresDoc = parse_toml(path)?;
    for (k, r) in doc.proposals.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.score) {
            return Err(DatasetError::validation(
                path,
                format!("proposals[{k}].score"),
                format!("{} outside [0, 1]", r.score),
            ));
        }
    }
    Ok(doc.proposals)
}

pub fn save_scores(records: &[ScoreRecord], path: &Path) -> Result<(), DatasetError> {
    write_text(
        path,
        &to_toml(&ScoresDoc {
            proposals: records.to_vec(),
        }),
    )
}

/// Reads any TOML document into `T` with path-qualified errors.
pub fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    parse_toml(path)
}

pub fn save_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    write_text(path, text)
}
