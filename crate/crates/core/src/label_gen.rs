//! Panoptic ground truth from semantic occupancy plus tracked boxes.
//!
//! Thing voxels inside a same-class box take that box's track id. A voxel
//! inside several boxes goes to the box with the nearest center, and a thing
//! voxel outside every box goes to the nearest same-class box center.
//! Distances within [`TIE_TOLERANCE`] count as ties, resolved toward the
//! smallest track id.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::io::RawGrid;
use crate::voxel::{ClassRole, ClassTable, GridSpec, PanopticGrid, Point3, Pose, TrackedBox, VoxelError, NO_INSTANCE};

/// Distances closer than this (meters) are treated as equal.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Name of the stuff class that absorbs thing voxels with no box of their class.
pub const FALLBACK_CLASS_NAME: &str = "general object";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("box track {track_id} has frame_index {got}, semantic grid is frame {expected}")]
    FrameMismatch { expected: u64, got: u64, track_id: u32 },
    #[error("class {class} is not in the class table")]
    MissingClassTableEntry { class: u16 },
    #[error("box track {track_id}: {source}")]
    InvalidBox {
        track_id: u32,
        #[source]
        source: VoxelError,
    },
    #[error(transparent)]
    Grid(#[from] VoxelError),
}

/// One frame of semantic occupancy without instance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    pub spec: GridSpec,
    pub classes: Vec<u16>,
    pub visibility: Option<Vec<bool>>,
    pub frame_index: u64,
    pub ego_pose: Pose,
}

impl SemanticGrid {
    pub fn new(
        spec: GridSpec,
        classes: Vec<u16>,
        visibility: Option<Vec<bool>>,
        frame_index: u64,
        ego_pose: Pose,
        table: &ClassTable,
    ) -> Result<Self, LabelError> {
        let n = spec.num_voxels();
        if classes.len() != n {
            return Err(VoxelError::LengthMismatch {
                what: "classes",
                got: classes.len(),
                expected: n,
            }
            .into());
        }
        if let Some(vis) = &visibility {
            if vis.len() != n {
                return Err(VoxelError::LengthMismatch {
                    what: "visibility",
                    got: vis.len(),
                    expected: n,
                }
                .into());
            }
        }
        if let Some(&class) = classes.iter().find(|&&c| !table.contains(c)) {
            return Err(LabelError::MissingClassTableEntry { class });
        }
        Ok(Self {
            spec,
            classes,
            visibility,
            frame_index,
            ego_pose,
        })
    }

    /// Semantic view of a raw grid file; any instance array is ignored.
    pub fn from_raw(raw: RawGrid, frame_index: u64, ego_pose: Pose, table: &ClassTable) -> Result<Self, LabelError> {
        Self::new(raw.spec, raw.classes, raw.visibility, frame_index, ego_pose, table)
    }
}

/// True iff `point` lies inside `bx` (boundary inclusive).
pub fn point_in_box(bx: &TrackedBox, point: Point3) -> bool {
    let dx = point[0] - bx.center[0];
    let dy = point[1] - bx.center[1];
    let dz = point[2] - bx.center[2];
    let (s, c) = bx.yaw.sin_cos();
    // rotate by -yaw
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= bx.size[0] / 2.0 && ly.abs() <= bx.size[1] / 2.0 && dz.abs() <= bx.size[2] / 2.0
}

fn distance(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Picks the nearest candidate; near-ties go to the smallest track id.
pub fn resolve_nearest(candidates: &[(f64, u32)]) -> Option<u32> {
    let dmin = candidates.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    candidates
        .iter()
        .filter(|c| c.0 <= dmin + TIE_TOLERANCE)
        .map(|c| c.1)
        .min()
}

/// Thing voxels of one class that had no box of that class in the frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FallbackRecord {
    pub class: u16,
    pub voxels: usize,
    /// Stuff class the voxels were moved to, if the table has one.
    pub demoted_to: Option<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub grid: PanopticGrid,
    pub fallbacks: Vec<FallbackRecord>,
}

pub fn generate_frame_labels(sem: &SemanticGrid, boxes: &[TrackedBox], table: &ClassTable) -> Result<FrameLabels, LabelError> {
    for bx in boxes {
        if bx.frame_index != sem.frame_index {
            return Err(LabelError::FrameMismatch {
                expected: sem.frame_index,
                got: bx.frame_index,
                track_id: bx.track_id,
            });
        }
        if !table.contains(bx.class_id) {
            return Err(LabelError::MissingClassTableEntry { class: bx.class_id });
        }
        bx.validate(table).map_err(|source| LabelError::InvalidBox {
            track_id: bx.track_id,
            source,
        })?;
    }
    if let Some(&class) = sem.classes.iter().find(|&&c| !table.contains(c)) {
        return Err(LabelError::MissingClassTableEntry { class });
    }

    let spec = &sem.spec;
    let n = spec.num_voxels();
    let grid_from_world = sem.ego_pose.inverse();
    let center_of = |v: usize| sem.ego_pose.transform_point(spec.voxel_center(spec.unravel(v)));

    // Containment: rasterize each box over the voxel range its corners span.
    let mut containing: HashMap<usize, Vec<(f64, u32)>> = HashMap::new();
    for bx in boxes {
        let Some((lo, hi)) = box_voxel_range(bx, &grid_from_world, spec) else {
            continue;
        };
        for iz in lo[2]..=hi[2] {
            for iy in lo[1]..=hi[1] {
                for ix in lo[0]..=hi[0] {
                    let v = spec.linear_index([ix, iy, iz]);
                    if sem.classes[v] != bx.class_id {
                        continue;
                    }
                    let c = center_of(v);
                    if point_in_box(bx, c) {
                        containing.entry(v).or_default().push((distance(c, bx.center), bx.track_id));
                    }
                }
            }
        }
    }

    let mut by_class: BTreeMap<u16, Vec<&TrackedBox>> = BTreeMap::new();
    for bx in boxes {
        by_class.entry(bx.class_id).or_default().push(bx);
    }
    let fallback_class = table
        .find(FALLBACK_CLASS_NAME)
        .filter(|&c| table.role(c) == Some(ClassRole::Stuff));

    let mut classes = sem.classes.clone();
    let mut instances = vec![NO_INSTANCE; n];
    let mut fallback_counts: BTreeMap<u16, usize> = BTreeMap::new();
    let mut scratch = Vec::new();
    for v in 0..n {
        let class = sem.classes[v];
        if !table.is_thing(class) {
            continue;
        }
        if let Some(cands) = containing.get(&v) {
            instances[v] = resolve_nearest(cands).expect("non-empty candidate list");
            continue;
        }
        match by_class.get(&class) {
            Some(same_class) => {
                let c = center_of(v);
                scratch.clear();
                scratch.extend(same_class.iter().map(|bx| (distance(c, bx.center), bx.track_id)));
                instances[v] = resolve_nearest(&scratch).expect("class has boxes");
            }
            None => {
                *fallback_counts.entry(class).or_default() += 1;
                if let Some(fb) = fallback_class {
                    classes[v] = fb;
                }
            }
        }
    }

    let grid = PanopticGrid::new(
        spec.clone(),
        classes,
        instances,
        sem.visibility.clone(),
        sem.frame_index,
        sem.ego_pose,
        table,
    )?;
    let fallbacks = fallback_counts
        .into_iter()
        .map(|(class, voxels)| FallbackRecord {
            class,
            voxels,
            demoted_to: fallback_class,
        })
        .collect();
    Ok(FrameLabels { grid, fallbacks })
}

/// Inclusive voxel index range covering the box, or `None` if it misses the grid.
pub(crate) fn box_voxel_range(bx: &TrackedBox, grid_from_world: &Pose, spec: &GridSpec) -> Option<([usize; 3], [usize; 3])> {
    let (s, c) = bx.yaw.sin_cos();
    let half = bx.size.map(|x| x / 2.0);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let (lx, ly, lz) = (sx * half[0], sy * half[1], sz * half[2]);
                let world = [
                    bx.center[0] + c * lx - s * ly,
                    bx.center[1] + s * lx + c * ly,
                    bx.center[2] + lz,
                ];
                let g = grid_from_world.transform_point(world);
                for a in 0..3 {
                    lo[a] = lo[a].min(g[a]);
                    hi[a] = hi[a].max(g[a]);
                }
            }
        }
    }
    let dims = spec.dims();
    let origin = spec.origin();
    let size = spec.voxel_size();
    let mut out_lo = [0usize; 3];
    let mut out_hi = [0usize; 3];
    for a in 0..3 {
        // one voxel of slack absorbs rounding in the corner transform
        let first = ((lo[a] - origin[a]) / size[a]).floor() - 1.0;
        let last = ((hi[a] - origin[a]) / size[a]).floor() + 1.0;
        if last < 0.0 || first >= dims[a] as f64 {
            return None;
        }
        out_lo[a] = first.max(0.0) as usize;
        out_hi[a] = (last.min(dims[a] as f64 - 1.0)) as usize;
    }
    Some((out_lo, out_hi))
}
