//! Grid geometry, panoptic labels and rigid poses.
//!
//! Voxels are stored x-major: the linear index of `(ix, iy, iz)` is
//! `ix + nx * (iy + ny * iz)`. Metric coordinates of a grid are expressed in
//! the grid (ego) frame; `PanopticGrid::ego_pose` maps them into the world.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];
pub type VoxelIndex = [usize; 3];

/// Instance id reserved for voxels that carry no instance.
pub const NO_INSTANCE: u32 = 0;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid class table: {0}")]
    InvalidClassTable(String),
    #[error("singular pose: {0}")]
    SingularPose(String),
    #[error("voxel {voxel}: {reason}")]
    InvariantViolation { voxel: usize, reason: String },
    #[error("invalid box field `{field}`: {reason}")]
    InvalidBox { field: &'static str, reason: String },
    #[error("array length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec", into = "RawGridSpec")]
pub struct GridSpec {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    origin: Point3,
}

#[derive(Serialize, Deserialize)]
struct RawGridSpec {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    origin: Point3,
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = VoxelError;
    fn try_from(raw: RawGridSpec) -> Result<Self, Self::Error> {
        GridSpec::new(raw.dims, raw.voxel_size, raw.origin)
    }
}

impl From<GridSpec> for RawGridSpec {
    fn from(spec: GridSpec) -> Self {
        RawGridSpec {
            dims: spec.dims,
            voxel_size: spec.voxel_size,
            origin: spec.origin,
        }
    }
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], origin: Point3) -> Result<Self, VoxelError> {
        if dims.contains(&0) {
            return Err(VoxelError::InvalidSpec(format!("dims {dims:?} must all be >= 1")));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(VoxelError::InvalidSpec(format!("dims {dims:?} exceed u32 range")));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VoxelError::InvalidSpec(format!(
                "voxel_size {voxel_size:?} must be finite and > 0"
            )));
        }
        for axis in 0..3 {
            let upper = origin[axis] + dims[axis] as f64 * voxel_size[axis];
            if !origin[axis].is_finite() || !upper.is_finite() {
                return Err(VoxelError::InvalidSpec(format!(
                    "extent along axis {axis} is not finite"
                )));
            }
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| VoxelError::InvalidSpec("voxel count overflows".into()))?;
        Ok(Self {
            dims,
            voxel_size,
            origin,
        })
    }

    /// 200 x 200 x 16 voxels of 0.4 m covering [-40, 40] x [-40, 40] x [-1, 5.4] m.
    pub fn occ3d_waymo() -> Self {
        Self::new([200, 200, 16], [0.4; 3], [-40.0, -40.0, -1.0]).expect("static spec is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Upper (exclusive) corner of the grid.
    pub fn upper(&self) -> Point3 {
        std::array::from_fn(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size[a])
    }

    #[inline]
    pub fn linear_index(&self, idx: VoxelIndex) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    #[inline]
    pub fn unravel(&self, linear: usize) -> VoxelIndex {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    /// Voxel containing `point`, or `None` when the point is outside the grid.
    /// The lower boundary is inclusive, the upper one exclusive.
    pub fn world_to_voxel(&self, point: Point3) -> Option<VoxelIndex> {
        let mut out = [0usize; 3];
        for axis in 0..3 {
            let f = ((point[axis] - self.origin[axis]) / self.voxel_size[axis]).floor();
            if !(f >= 0.0) || f >= self.dims[axis] as f64 {
                return None;
            }
            out[axis] = f as usize;
        }
        Some(out)
    }

    #[inline]
    pub fn voxel_center(&self, idx: VoxelIndex) -> Point3 {
        std::array::from_fn(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size[a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Thing,
    Stuff,
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u16,
    pub name: String,
    pub role: ClassRole,
}

/// Semantic classes with their thing / stuff / free roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassTable {
    entries: Vec<ClassEntry>,
    free: u16,
}

impl TryFrom<Vec<ClassEntry>> for ClassTable {
    type Error = VoxelError;
    fn try_from(entries: Vec<ClassEntry>) -> Result<Self, Self::Error> {
        ClassTable::new(entries)
    }
}

impl From<ClassTable> for Vec<ClassEntry> {
    fn from(table: ClassTable) -> Self {
        table.entries
    }
}

impl ClassTable {
    /// Entries may come in any order; ids must be unique and cover `0..n`.
    pub fn new(mut entries: Vec<ClassEntry>) -> Result<Self, VoxelError> {
        entries.sort_by_key(|e| e.id);
        for (pos, entry) in entries.iter().enumerate() {
            if entry.id as usize != pos {
                return Err(VoxelError::InvalidClassTable(format!(
                    "class ids must be unique and contiguous from 0; found {} at position {pos}",
                    entry.id
                )));
            }
        }
        let frees: Vec<u16> = entries
            .iter()
            .filter(|e| e.role == ClassRole::Free)
            .map(|e| e.id)
            .collect();
        if frees.len() != 1 {
            return Err(VoxelError::InvalidClassTable(format!(
                "exactly one free class required, found {}",
                frees.len()
            )));
        }
        if !entries.iter().any(|e| e.role == ClassRole::Thing) {
            return Err(VoxelError::InvalidClassTable("at least one thing class required".into()));
        }
        Ok(Self {
            entries,
            free: frees[0],
        })
    }

    /// Occ3D-Waymo style layout: vehicles, pedestrians and cyclists are things,
    /// the last class is free.
    pub fn occ3d_waymo() -> Self {
        use ClassRole::*;
        let names = [
            ("general object", Stuff),
            ("vehicle", Thing),
            ("pedestrian", Thing),
            ("sign", Stuff),
            ("cyclist", Thing),
            ("traffic light", Stuff),
            ("pole", Stuff),
            ("construction cone", Stuff),
            ("bicycle", Stuff),
            ("motorcycle", Stuff),
            ("building", Stuff),
            ("vegetation", Stuff),
            ("tree trunk", Stuff),
            ("road", Stuff),
            ("walkable", Stuff),
            ("free", Free),
        ];
        let entries = names
            .iter()
            .enumerate()
            .map(|(id, (name, role))| ClassEntry {
                id: id as u16,
                name: name.to_string(),
                role: *role,
            })
            .collect();
        Self::new(entries).expect("static table is valid")
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn free_id(&self) -> u16 {
        self.free
    }

    pub fn role(&self, class: u16) -> Option<ClassRole> {
        self.entries.get(class as usize).map(|e| e.role)
    }

    pub fn contains(&self, class: u16) -> bool {
        (class as usize) < self.entries.len()
    }

    #[inline]
    pub fn is_thing(&self, class: u16) -> bool {
        self.role(class) == Some(ClassRole::Thing)
    }

    pub fn name(&self, class: u16) -> Option<&str> {
        self.entries.get(class as usize).map(|e| e.name.as_str())
    }

    /// Case-insensitive lookup; underscores and spaces are interchangeable.
    pub fn find(&self, name: &str) -> Option<u16> {
        let norm = |s: &str| s.to_ascii_lowercase().replace('_', " ");
        let wanted = norm(name);
        self.entries.iter().find(|e| norm(&e.name) == wanted).map(|e| e.id)
    }

    pub fn ids_with_role(&self, role: ClassRole) -> impl Iterator<Item = u16> + '_ {
        self.entries.iter().filter(move |e| e.role == role).map(|e| e.id)
    }

    /// Per-voxel role lookup table, indexed by class id.
    pub(crate) fn thing_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.role == ClassRole::Thing).collect()
    }
}

/// Rigid 4x4 transform, grid frame to world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, VoxelError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(VoxelError::SingularPose("non-finite entry".into()));
        }
        let last = m.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(VoxelError::SingularPose(format!(
                "last row must be (0,0,0,1), got ({}, {}, {}, {})",
                last[0], last[1], last[2], last[3]
            )));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).amax();
        if err >= ORTHONORMAL_TOL {
            return Err(VoxelError::SingularPose(format!(
                "rotation block is not orthonormal (|R^T R - I| = {err:e})"
            )));
        }
        Ok(Pose(m))
    }

    /// Row-major 4x4 input.
    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self, VoxelError> {
        Self::from_matrix(Matrix4::from_fn(|r, c| rows[r][c]))
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.0[(r, c)]))
    }

    /// Rotation about +z by `yaw` followed by a translation.
    pub fn from_yaw_translation(yaw: f64, t: Point3) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose(Matrix4::new(
            c, -s, 0.0, t[0], //
            s, c, 0.0, t[1], //
            0.0, 0.0, 1.0, t[2], //
            0.0, 0.0, 0.0, 1.0,
        ))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose(m)
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }

    #[inline]
    pub fn transform_point(&self, p: Point3) -> Point3 {
        let m = &self.0;
        std::array::from_fn(|r| m[(r, 0)] * p[0] + m[(r, 1)] * p[1] + m[(r, 2)] * p[2] + m[(r, 3)])
    }

    pub fn is_identity(&self) -> bool {
        self.0 == Matrix4::identity()
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(d)?;
        Pose::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// Oriented world-frame box carrying a persistent track id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedBox {
    pub center: Point3,
    /// Length, width, height in meters.
    pub size: [f64; 3],
    /// Radians about +z.
    pub yaw: f64,
    pub class_id: u16,
    pub track_id: u32,
    pub frame_index: u64,
}

impl TrackedBox {
    pub fn validate(&self, table: &ClassTable) -> Result<(), VoxelError> {
        let bad = |field, reason: String| Err(VoxelError::InvalidBox { field, reason });
        if self.center.iter().any(|c| !c.is_finite()) {
            return bad("center", format!("{:?} is not finite", self.center));
        }
        if self.size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return bad("size", format!("{:?} must be finite and > 0", self.size));
        }
        if !self.yaw.is_finite() {
            return bad("yaw", "not finite".into());
        }
        match table.role(self.class_id) {
            None => return bad("class_id", format!("class {} is not in the class table", self.class_id)),
            Some(ClassRole::Thing) => {}
            Some(_) => return bad("class_id", format!("class {} is not a thing class", self.class_id)),
        }
        if self.track_id == NO_INSTANCE {
            return bad("track_id", "must be >= 1".into());
        }
        Ok(())
    }
}

/// One frame of (class, instance) labels over a dense voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticGrid {
    spec: GridSpec,
    classes: Vec<u16>,
    instances: Vec<u32>,
    visibility: Option<Vec<bool>>,
    frame_index: u64,
    ego_pose: Pose,
}

impl PanopticGrid {
    pub fn new(
        spec: GridSpec,
        classes: Vec<u16>,
        instances: Vec<u32>,
        visibility: Option<Vec<bool>>,
        frame_index: u64,
        ego_pose: Pose,
        table: &ClassTable,
    ) -> Result<Self, VoxelError> {
        let grid = Self::from_parts_unchecked(spec, classes, instances, visibility, frame_index, ego_pose)?;
        grid.validate(table)?;
        Ok(grid)
    }

    /// Checks array lengths only; label invariants are left to `validate`.
    pub(crate) fn from_parts_unchecked(
        spec: GridSpec,
        classes: Vec<u16>,
        instances: Vec<u32>,
        visibility: Option<Vec<bool>>,
        frame_index: u64,
        ego_pose: Pose,
    ) -> Result<Self, VoxelError> {
        let n = spec.num_voxels();
        let check = |what: &'static str, got: usize| {
            if got == n {
                Ok(())
            } else {
                Err(VoxelError::LengthMismatch {
                    what,
                    got,
                    expected: n,
                })
            }
        };
        check("classes", classes.len())?;
        check("instances", instances.len())?;
        if let Some(vis) = &visibility {
            check("visibility", vis.len())?;
        }
        Ok(Self {
            spec,
            classes,
            instances,
            visibility,
            frame_index,
            ego_pose,
        })
    }

    /// All-free grid.
    pub fn empty(spec: GridSpec, table: &ClassTable, frame_index: u64, ego_pose: Pose) -> Self {
        let n = spec.num_voxels();
        Self {
            spec,
            classes: vec![table.free_id(); n],
            instances: vec![NO_INSTANCE; n],
            visibility: None,
            frame_index,
            ego_pose,
        }
    }

    pub fn validate(&self, table: &ClassTable) -> Result<(), VoxelError> {
        for (v, (&c, &id)) in self.classes.iter().zip(&self.instances).enumerate() {
            let role = table.role(c).ok_or_else(|| VoxelError::InvariantViolation {
                voxel: v,
                reason: format!("class {c} is not in the class table"),
            })?;
            if id != NO_INSTANCE && role != ClassRole::Thing {
                return Err(VoxelError::InvariantViolation {
                    voxel: v,
                    reason: format!(
                        "instance id {id} on {} class {c}",
                        if role == ClassRole::Free { "free" } else { "stuff" }
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn instances(&self) -> &[u32] {
        &self.instances
    }

    pub fn visibility(&self) -> Option<&[bool]> {
        self.visibility.as_deref()
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    pub fn ego_pose(&self) -> &Pose {
        &self.ego_pose
    }

    pub fn num_voxels(&self) -> usize {
        self.classes.len()
    }

    #[inline]
    pub fn label(&self, v: usize) -> (u16, u32) {
        (self.classes[v], self.instances[v])
    }

    #[inline]
    pub fn is_visible(&self, v: usize) -> bool {
        self.visibility.as_ref().is_none_or(|m| m[v])
    }

    pub fn with_frame_index(mut self, frame_index: u64) -> Self {
        self.frame_index = frame_index;
        self
    }

    pub fn with_ego_pose(mut self, pose: Pose) -> Self {
        self.ego_pose = pose;
        self
    }

    pub fn with_visibility(mut self, visibility: Option<Vec<bool>>) -> Result<Self, VoxelError> {
        if let Some(vis) = &visibility {
            if vis.len() != self.num_voxels() {
                return Err(VoxelError::LengthMismatch {
                    what: "visibility",
                    got: vis.len(),
                    expected: self.num_voxels(),
                });
            }
        }
        self.visibility = visibility;
        Ok(self)
    }

    pub fn into_parts(self) -> (GridSpec, Vec<u16>, Vec<u32>, Option<Vec<bool>>, u64, Pose) {
        (
            self.spec,
            self.classes,
            self.instances,
            self.visibility,
            self.frame_index,
            self.ego_pose,
        )
    }

    /// Replaces every nonzero instance id through `map`; the map must never
    /// return `NO_INSTANCE` for a nonzero input.
    pub(crate) fn map_instances(&self, mut map: impl FnMut(u32) -> u32) -> PanopticGrid {
        let instances = self
            .instances
            .iter()
            .map(|&id| {
                if id == NO_INSTANCE {
                    NO_INSTANCE
                } else {
                    let out = map(id);
                    debug_assert_ne!(out, NO_INSTANCE);
                    out
                }
            })
            .collect();
        PanopticGrid {
            instances,
            ..self.clone()
        }
    }

    pub(crate) fn labels_mut(&mut self) -> (&mut [u16], &mut [u32]) {
        (&mut self.classes, &mut self.instances)
    }

    /// Sorted distinct nonzero instance ids.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.instances.iter().copied().filter(|&i| i != NO_INSTANCE).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// World-frame center of voxel `v`.
    #[inline]
    pub fn world_center(&self, v: usize) -> Point3 {
        self.ego_pose.transform_point(self.spec.voxel_center(self.spec.unravel(v)))
    }
}

/// Mean world-frame voxel center of instance `id`, or `None` if absent.
pub fn instance_centroid(grid: &PanopticGrid, id: u32) -> Option<Point3> {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for (v, _) in grid.instances().iter().enumerate().filter(|(_, &i)| i == id && id != NO_INSTANCE) {
        let c = grid.spec().voxel_center(grid.spec().unravel(v));
        for a in 0..3 {
            sum[a] += c[a];
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let mean = sum.map(|s| s / count as f64);
    Some(grid.ego_pose().transform_point(mean))
}

/// Resamples `src` into a grid described by `dst_spec` posed at `dst_pose`.
///
/// Each destination voxel center is mapped into the source grid frame and
/// takes the label of the voxel containing it; centers landing outside the
/// source become free. Visibility is not carried over.
pub fn warp_instances(
    src: &PanopticGrid,
    dst_pose: &Pose,
    dst_spec: &GridSpec,
    table: &ClassTable,
) -> Result<PanopticGrid, VoxelError> {
    let relative = src.ego_pose().inverse().compose(dst_pose);
    // Re-validate: the product of two valid poses can still drift.
    let relative = Pose::from_matrix(*relative.matrix())?;
    let n = dst_spec.num_voxels();
    let free = table.free_id();

    if relative.is_identity() && dst_spec == src.spec() {
        return Ok(PanopticGrid {
            spec: dst_spec.clone(),
            classes: src.classes.clone(),
            instances: src.instances.clone(),
            visibility: None,
            frame_index: src.frame_index,
            ego_pose: *dst_pose,
        });
    }

    let mut classes = vec![free; n];
    let mut instances = vec![NO_INSTANCE; n];
    let src_spec = src.spec();
    for v in 0..n {
        let p = relative.transform_point(dst_spec.voxel_center(dst_spec.unravel(v)));
        if let Some(idx) = src_spec.world_to_voxel(p) {
            let s = src_spec.linear_index(idx);
            classes[v] = src.classes[s];
            instances[v] = src.instances[s];
        }
    }
    Ok(PanopticGrid {
        spec: dst_spec.clone(),
        classes,
        instances,
        visibility: None,
        frame_index: src.frame_index,
        ego_pose: *dst_pose,
    })
}
