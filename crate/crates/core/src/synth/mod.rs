//! Deterministic synthetic sequences with known ground truth.
//!
//! A [`Scenario`] describes ego motion, a ground plane, static blocks and
//! box-shaped actors moving along linearly interpolated waypoints. Rendering
//! rasterizes everything by voxel center and builds the panoptic ground
//! truth through [`generate_frame_labels`]. [`corrupt`] then derives noisy
//! predictions from it.

mod noise;
mod random;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{encode_semantic, save_boxes, save_manifest, write_grid, DatasetError, FrameEntry, SequenceManifest};
use crate::label_gen::{box_voxel_range, generate_frame_labels, point_in_box, resolve_nearest, FallbackRecord, LabelError, SemanticGrid};
use crate::voxel::{ClassEntry, ClassTable, GridSpec, PanopticGrid, Point3, Pose, TrackedBox, VoxelError};

pub use noise::{corrupt, ClassFlip, CorruptedSequence, DropEvent, IdSwitch, NoiseSpec, ScoreModel, ScoreOverride};
pub use random::{random_scenario, RandomScenarioParams};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("actor {actor} leaves the grid at frame {frame}")]
    ActorOutOfBounds { actor: usize, frame: u64 },
    #[error("noise event references unknown track {0}")]
    UnknownTrack(u32),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Parse(String),
}

/// Ego trajectory, in meters and radians per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EgoMotion {
    #[default]
    Static,
    Straight { velocity: [f64; 3] },
    /// Constant speed along the heading while turning at `yaw_rate`.
    Arc { speed: f64, yaw_rate: f64 },
}

impl EgoMotion {
    pub fn pose(&self, frame: u64) -> Pose {
        let t = frame as f64;
        match *self {
            EgoMotion::Static => Pose::identity(),
            EgoMotion::Straight { velocity } => Pose::from_yaw_translation(0.0, velocity.map(|v| v * t)),
            EgoMotion::Arc { speed, yaw_rate } => {
                let yaw = yaw_rate * t;
                let (x, y) = if yaw_rate.abs() < 1e-12 {
                    (speed * t, 0.0)
                } else {
                    let r = speed / yaw_rate;
                    (r * yaw.sin(), r * (1.0 - yaw.cos()))
                };
                Pose::from_yaw_translation(yaw, [x, y, 0.0])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ground {
    pub class: String,
    /// World z below which voxel centers are ground.
    pub height: f64,
}

/// Static world-frame axis-aligned stuff region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub class: String,
    pub min: Point3,
    pub max: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub frame: u64,
    pub center: Point3,
    #[serde(default)]
    pub yaw: f64,
}

/// A box-shaped thing present from its first to its last waypoint frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actor {
    pub class: String,
    pub size: [f64; 3],
    /// Defaults to the actor's position in the list plus one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u32>,
    pub waypoints: Vec<Waypoint>,
}

impl Actor {
    /// Center and yaw at `frame`, or `None` outside the waypoint span.
    pub fn state_at(&self, frame: u64) -> Option<(Point3, f64)> {
        let first = self.waypoints.first()?;
        let last = self.waypoints.last()?;
        if frame < first.frame || frame > last.frame {
            return None;
        }
        let k = self.waypoints.iter().rposition(|w| w.frame <= frame)?;
        let a = &self.waypoints[k];
        let Some(b) = self.waypoints.get(k + 1) else {
            return Some((a.center, a.yaw));
        };
        let s = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
        let center = [0, 1, 2].map(|i| a.center[i] + s * (b.center[i] - a.center[i]));
        Some((center, a.yaw + s * (b.yaw - a.yaw)))
    }
}

/// Ego-frame region marked visible; everything else is unobserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibleRegion {
    pub min: Point3,
    pub max: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_sequence_id")]
    pub sequence_id: String,
    #[serde(default)]
    pub seed: u64,
    pub frames: u64,
    /// Seconds between frames, used for manifest timestamps.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Clearance (m) actors must keep from the grid boundary; negative
    /// values allow overhang.
    #[serde(default)]
    pub margin: f64,
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<ClassEntry>>,
    #[serde(default)]
    pub ego: EgoMotion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground: Option<Ground>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<Block>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actors: Vec<Actor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<VisibleRegion>,
}

fn default_sequence_id() -> String {
    "synth".into()
}

fn default_dt() -> f64 {
    0.1
}

impl Scenario {
    /// Empty scene over `grid` with the Occ3D-Waymo class table.
    pub fn empty(grid: GridSpec, frames: u64) -> Self {
        Self {
            sequence_id: default_sequence_id(),
            seed: 0,
            frames,
            dt: default_dt(),
            margin: 0.0,
            grid,
            classes: None,
            ego: EgoMotion::Static,
            ground: None,
            blocks: Vec::new(),
            actors: Vec::new(),
            visibility: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn class_table(&self) -> Result<ClassTable, SynthError> {
        match &self.classes {
            None => Ok(ClassTable::occ3d_waymo()),
            Some(entries) => Ok(ClassTable::new(entries.clone())?),
        }
    }

    fn track_id(&self, k: usize) -> u32 {
        self.actors[k].track_id.unwrap_or(k as u32 + 1)
    }
}

fn resolve_class(table: &ClassTable, name: &str) -> Result<u16, SynthError> {
    table.find(name).ok_or_else(|| SynthError::UnknownClass(name.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSequence {
    pub sequence_id: String,
    pub table: ClassTable,
    pub semantic: Vec<SemanticGrid>,
    /// Boxes per frame.
    pub boxes: Vec<Vec<TrackedBox>>,
    pub gt: Vec<PanopticGrid>,
    pub timestamps: Vec<f64>,
    pub fallbacks: Vec<Vec<FallbackRecord>>,
}

struct ResolvedActor {
    class: u16,
    track_id: u32,
}

fn validate(sc: &Scenario, table: &ClassTable) -> Result<Vec<ResolvedActor>, SynthError> {
    let bad = |m: String| Err(SynthError::InvalidScenario(m));
    if !(sc.dt.is_finite() && sc.dt > 0.0) {
        return bad("dt must be finite and > 0".into());
    }
    if !sc.margin.is_finite() {
        return bad("margin must be finite".into());
    }
    if let Some(g) = &sc.ground {
        if table.is_thing(resolve_class(table, &g.class)?) {
            return bad(format!("ground class `{}` is a thing class", g.class));
        }
    }
    for b in &sc.blocks {
        if table.is_thing(resolve_class(table, &b.class)?) {
            return bad(format!("block class `{}` is a thing class", b.class));
        }
    }
    let mut out = Vec::with_capacity(sc.actors.len());
    let mut ids = std::collections::BTreeSet::new();
    for (k, a) in sc.actors.iter().enumerate() {
        let class = resolve_class(table, &a.class)?;
        if !table.is_thing(class) {
            return bad(format!("actor {k}: class `{}` is not a thing class", a.class));
        }
        if a.size.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return bad(format!("actor {k}: size must be finite and > 0"));
        }
        if a.waypoints.is_empty() {
            return bad(format!("actor {k}: no waypoints"));
        }
        if a.waypoints.windows(2).any(|w| w[1].frame <= w[0].frame) {
            return bad(format!("actor {k}: waypoint frames must increase"));
        }
        let track_id = sc.track_id(k);
        if track_id == 0 || !ids.insert(track_id) {
            return bad(format!("actor {k}: track id {track_id} is zero or repeated"));
        }
        out.push(ResolvedActor { class, track_id });
    }
    Ok(out)
}

fn check_bounds(bx: &TrackedBox, grid_from_world: &Pose, spec: &GridSpec, margin: f64) -> bool {
    let (s, c) = bx.yaw.sin_cos();
    let half = bx.size.map(|x| x / 2.0);
    let (lo, hi) = (spec.origin(), spec.upper());
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let (lx, ly) = (sx * half[0], sy * half[1]);
                let world = [bx.center[0] + c * lx - s * ly, bx.center[1] + s * lx + c * ly, bx.center[2] + sz * half[2]];
                let g = grid_from_world.transform_point(world);
                if (0..3).any(|a| g[a] < lo[a] + margin - 1e-9 || g[a] > hi[a] - margin + 1e-9) {
                    return false;
                }
            }
        }
    }
    true
}

/// Renders every frame of `sc`.
pub fn render_sequence(sc: &Scenario) -> Result<RenderedSequence, SynthError> {
    let table = sc.class_table()?;
    let actors = validate(sc, &table)?;
    let spec = &sc.grid;
    let n = spec.num_voxels();
    let free = table.free_id();
    let ground = sc.ground.as_ref().map(|g| Ok::<_, SynthError>((resolve_class(&table, &g.class)?, g.height))).transpose()?;
    let blocks = sc
        .blocks
        .iter()
        .map(|b| Ok((resolve_class(&table, &b.class)?, b.min, b.max)))
        .collect::<Result<Vec<_>, SynthError>>()?;
    let visibility = sc.visibility.as_ref().map(|r| {
        (0..n)
            .map(|v| {
                let c = spec.voxel_center(spec.unravel(v));
                (0..3).all(|a| c[a] >= r.min[a] && c[a] <= r.max[a])
            })
            .collect::<Vec<bool>>()
    });

    let mut out = RenderedSequence {
        sequence_id: sc.sequence_id.clone(),
        table: table.clone(),
        semantic: Vec::new(),
        boxes: Vec::new(),
        gt: Vec::new(),
        timestamps: Vec::new(),
        fallbacks: Vec::new(),
    };
    for frame in 0..sc.frames {
        let pose = sc.ego.pose(frame);
        let grid_from_world = pose.inverse();
        let mut classes = vec![free; n];
        if ground.is_some() || !blocks.is_empty() {
            for (v, class) in classes.iter_mut().enumerate() {
                let c = pose.transform_point(spec.voxel_center(spec.unravel(v)));
                if let Some((g, h)) = ground {
                    if c[2] < h {
                        *class = g;
                    }
                }
                for &(b, lo, hi) in &blocks {
                    if (0..3).all(|a| c[a] >= lo[a] && c[a] <= hi[a]) {
                        *class = b;
                    }
                }
            }
        }

        let mut boxes = Vec::new();
        for (k, (a, r)) in sc.actors.iter().zip(&actors).enumerate() {
            let Some((center, yaw)) = a.state_at(frame) else {
                continue;
            };
            let bx = TrackedBox {
                center,
                size: a.size,
                yaw,
                class_id: r.class,
                track_id: r.track_id,
                frame_index: frame,
            };
            if !check_bounds(&bx, &grid_from_world, spec, sc.margin) {
                return Err(SynthError::ActorOutOfBounds { actor: k, frame });
            }
            boxes.push(bx);
        }
        boxes.sort_by_key(|b| b.track_id);

        // voxel -> (distance to box center, track id, class)
        let mut hits: std::collections::BTreeMap<usize, Vec<(f64, u32)>> = Default::default();
        for bx in &boxes {
            let Some((lo, hi)) = box_voxel_range(bx, &grid_from_world, spec) else {
                continue;
            };
            for iz in lo[2]..=hi[2] {
                for iy in lo[1]..=hi[1] {
                    for ix in lo[0]..=hi[0] {
                        let v = spec.linear_index([ix, iy, iz]);
                        let c = pose.transform_point(spec.voxel_center([ix, iy, iz]));
                        if point_in_box(bx, c) {
                            let d = (0..3).map(|a| (c[a] - bx.center[a]).powi(2)).sum::<f64>().sqrt();
                            hits.entry(v).or_default().push((d, bx.track_id));
                        }
                    }
                }
            }
        }
        for (v, cands) in hits {
            let id = resolve_nearest(&cands).expect("nonempty");
            classes[v] = boxes.iter().find(|b| b.track_id == id).expect("box").class_id;
        }

        let sem = SemanticGrid::new(spec.clone(), classes, visibility.clone(), frame, pose, &table)?;
        let labels = generate_frame_labels(&sem, &boxes, &table)?;
        out.semantic.push(sem);
        out.boxes.push(boxes);
        out.gt.push(labels.grid);
        out.fallbacks.push(labels.fallbacks);
        out.timestamps.push(frame as f64 * sc.dt);
    }
    Ok(out)
}

/// Paths of the files written by [`RenderedSequence::write`].
#[derive(Debug, Clone, PartialEq)]
pub struct WrittenSequence {
    pub gt_manifest: PathBuf,
    pub semantic_manifest: PathBuf,
    pub boxes: PathBuf,
}

pub fn frame_file_name(frame: u64) -> PathBuf {
    PathBuf::from(format!("frame_{frame:06}.grid"))
}

/// Manifest listing `grids` under `frame_file_name` names.
pub fn manifest_for(sequence_id: &str, table: &ClassTable, grids: &[PanopticGrid], timestamps: &[f64], base_dir: &Path) -> SequenceManifest {
    SequenceManifest {
        sequence_id: sequence_id.to_string(),
        class_table: table.clone(),
        frames: grids
            .iter()
            .zip(timestamps)
            .map(|(g, &t)| FrameEntry {
                frame_index: g.frame_index(),
                grid_path: frame_file_name(g.frame_index()),
                ego_pose: *g.ego_pose(),
                timestamp: t,
            })
            .collect(),
        boxes_path: None,
        scores_path: None,
        base_dir: base_dir.to_path_buf(),
    }
}

/// Writes grids plus manifest into `dir` and returns the manifest path.
pub fn write_grids(
    sequence_id: &str,
    table: &ClassTable,
    grids: &[PanopticGrid],
    timestamps: &[f64],
    dir: &Path,
) -> Result<PathBuf, SynthError> {
    let manifest = manifest_for(sequence_id, table, grids, timestamps, dir);
    for g in grids {
        write_grid(g, &dir.join(frame_file_name(g.frame_index())))?;
    }
    let path = dir.join("manifest.toml");
    save_manifest(&manifest, &path)?;
    Ok(path)
}

impl RenderedSequence {
    /// Writes `gt/` (panoptic grids), `semantic/` (semantic grids) and
    /// `boxes.toml` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<WrittenSequence, SynthError> {
        let gt_manifest = write_grids(&self.sequence_id, &self.table, &self.gt, &self.timestamps, &dir.join("gt"))?;

        let sem_dir = dir.join("semantic");
        let boxes = dir.join("boxes.toml");
        let mut manifest = manifest_for(&self.sequence_id, &self.table, &self.gt, &self.timestamps, &sem_dir);
        manifest.boxes_path = Some(PathBuf::from("../boxes.toml"));
        for s in &self.semantic {
            let bytes = encode_semantic(&s.spec, &s.classes, s.visibility.as_deref());
            let path = sem_dir.join(frame_file_name(s.frame_index));
            std::fs::create_dir_all(&sem_dir).map_err(|e| DatasetError::Io {
                path: sem_dir.clone(),
                source: e,
            })?;
            std::fs::write(&path, bytes).map_err(|e| DatasetError::Io { path, source: e })?;
        }
        let semantic_manifest = sem_dir.join("manifest.toml");
        save_manifest(&manifest, &semantic_manifest)?;
        let all: Vec<TrackedBox> = self.boxes.iter().flatten().cloned().collect();
        save_boxes(&all, &boxes)?;
        Ok(WrittenSequence {
            gt_manifest,
            semantic_manifest,
            boxes,
        })
    }
}
