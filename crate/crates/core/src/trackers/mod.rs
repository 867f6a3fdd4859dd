//! Temporal association of per-frame panoptic grids.
//!
//! Three methods share one sequence driver ([`track_sequence`]): overlap
//! association with ego-motion warping, a constant-velocity box tracker, and
//! the score-driven query lifecycle. Each hands out track ids from a
//! monotonic counter, so ids are never reused within a sequence.

mod boxes;
mod kalman;
mod lifecycle;
mod overlap;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::AssignmentError;
use crate::io::ScoreRecord;
use crate::voxel::{ClassTable, PanopticGrid, VoxelError, NO_INSTANCE};

pub use boxes::{aabb_iou, instances_to_boxes, InstanceBox};
pub use kalman::{KalmanParams, KalmanStep, KalmanTrack, KalmanTracker};
pub use lifecycle::{lifecycle_step, ActiveTrack, Decision, LifecycleParams, LifecycleState, LifecycleStep, Origin, Proposal};
pub use overlap::{overlap_associate, OverlapParams, OverlapState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("consecutive grids have different specs")]
    SpecMismatch,
    #[error("proposal references unknown track {0}")]
    UnknownTrackId(u32),
    #[error("invalid proposal: {0}")]
    InvalidProposal(String),
    #[error("no score for instance {instance} in frame {frame}")]
    MissingScore { frame: u64, instance: u32 },
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Overlap,
    Ab3dmot,
    Lifecycle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Overlap => "overlap",
            Method::Ab3dmot => "ab3dmot",
            Method::Lifecycle => "lifecycle",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "overlap" => Ok(Method::Overlap),
            "ab3dmot" => Ok(Method::Ab3dmot),
            "lifecycle" => Ok(Method::Lifecycle),
            other => Err(format!("unknown tracking method `{other}`")),
        }
    }
}

/// Parameters for all methods, as read from a TOML config file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub overlap: OverlapParams,
    pub ab3dmot: KalmanParams,
    pub lifecycle: LifecycleParams,
}

impl TrackerConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrackerError> {
        let cfg: TrackerConfig = toml::from_str(text).map_err(|e| TrackerError::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(0.0..1.0).contains(&self.overlap.min_iou) {
            return Err(TrackerError::InvalidConfig("overlap.min_iou must lie in [0, 1)".into()));
        }
        self.ab3dmot.validate()?;
        self.lifecycle.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrackSummary {
    /// Distinct output track ids.
    pub tracks: u64,
    pub births: u64,
    pub deaths: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedSequence {
    pub grids: Vec<PanopticGrid>,
    pub summary: TrackSummary,
}

/// Replaces instance ids through `map`; voxels whose id maps to
/// `NO_INSTANCE` become free.
fn relabel(grid: &PanopticGrid, map: &HashMap<u32, u32>, table: &ClassTable) -> PanopticGrid {
    let mut out = grid.clone();
    let free = table.free_id();
    let (classes, ids) = out.labels_mut();
    for (c, id) in classes.iter_mut().zip(ids.iter_mut()) {
        if *id == NO_INSTANCE {
            continue;
        }
        *id = map[id];
        if *id == NO_INSTANCE {
            *c = free;
        }
    }
    out
}

/// Most frequent class of every instance, smallest class id on ties.
pub fn instance_classes(grid: &PanopticGrid) -> BTreeMap<u32, u16> {
    let mut counts: BTreeMap<u32, BTreeMap<u16, usize>> = BTreeMap::new();
    for (&c, &id) in grid.classes().iter().zip(grid.instances()) {
        if id != NO_INSTANCE {
            *counts.entry(id).or_default().entry(c).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(id, by_class)| {
            let best = by_class.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&c, _)| c);
            (id, best.expect("nonempty"))
        })
        .collect()
}

/// Runs one method over a whole sequence. `scores` is required for
/// [`Method::Lifecycle`] and ignored otherwise.
pub fn track_sequence(
    grids: &[PanopticGrid],
    method: Method,
    config: &TrackerConfig,
    scores: Option<&[ScoreRecord]>,
    table: &ClassTable,
) -> Result<TrackedSequence, TrackerError> {
    config.validate()?;
    if let Some(first) = grids.first() {
        if grids.iter().any(|g| g.spec() != first.spec()) {
            return Err(TrackerError::SpecMismatch);
        }
    }
    match method {
        Method::Overlap => run_overlap(grids, config.overlap, table),
        Method::Ab3dmot => run_kalman(grids, config.ab3dmot, table),
        Method::Lifecycle => {
            let scores = scores.ok_or_else(|| TrackerError::InvalidProposal("lifecycle tracking needs proposal scores".into()))?;
            run_lifecycle(grids, scores, config.lifecycle, table)
        }
    }
}

fn run_overlap(grids: &[PanopticGrid], params: OverlapParams, table: &ClassTable) -> Result<TrackedSequence, TrackerError> {
    let mut state = OverlapState::new(params);
    let out = grids.iter().map(|g| overlap_associate(&mut state, g, table)).collect::<Result<Vec<_>, _>>()?;
    Ok(TrackedSequence {
        grids: out,
        summary: TrackSummary {
            tracks: state.tracks_created(),
            births: state.births,
            deaths: state.deaths,
        },
    })
}

fn run_kalman(grids: &[PanopticGrid], params: KalmanParams, table: &ClassTable) -> Result<TrackedSequence, TrackerError> {
    let mut tracker = KalmanTracker::new(params)?;
    let mut summary = TrackSummary::default();
    let mut out = Vec::with_capacity(grids.len());
    for g in grids {
        let dets = instances_to_boxes(g);
        let step = tracker.step(&dets);
        summary.births += step.births.len() as u64;
        summary.deaths += step.deaths.len() as u64;
        let map: HashMap<u32, u32> = dets.iter().zip(&step.assignments).map(|(d, &t)| (d.id, t)).collect();
        out.push(relabel(g, &map, table));
    }
    summary.tracks = tracker.tracks_created();
    Ok(TrackedSequence { grids: out, summary })
}

/// Input instance ids act as persistent query keys: an id already bound to
/// a live track is proposed as tracked, any other id as emerging.
/// Discarded and terminated instances are cleared to free space.
fn run_lifecycle(
    grids: &[PanopticGrid],
    scores: &[ScoreRecord],
    params: LifecycleParams,
    table: &ClassTable,
) -> Result<TrackedSequence, TrackerError> {
    let mut state = LifecycleState::new(params)?;
    let mut by_frame: BTreeMap<u64, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in scores {
        by_frame.entry(r.frame_index).or_default().push(r);
    }
    let mut keys: HashMap<u32, u32> = HashMap::new();
    let mut summary = TrackSummary::default();
    let mut out = Vec::with_capacity(grids.len());

    for g in grids {
        let frame = g.frame_index();
        let present = instance_classes(g);
        let records = by_frame.remove(&frame).unwrap_or_default();
        let mut proposals = Vec::with_capacity(records.len());
        for r in &records {
            if r.instance_id == NO_INSTANCE {
                if table.is_thing(r.class_id) {
                    return Err(TrackerError::InvalidProposal(format!(
                        "frame {frame}: thing class {} proposal without an instance",
                        r.class_id
                    )));
                }
            } else if !present.contains_key(&r.instance_id) {
                return Err(TrackerError::InvalidProposal(format!("frame {frame}: instance {} not in grid", r.instance_id)));
            }
            let origin = match keys.get(&r.instance_id) {
                Some(&t) if r.instance_id != NO_INSTANCE => Origin::Tracked(t),
                _ => Origin::Emerging,
            };
            proposals.push(Proposal {
                frame_index: frame,
                instance_id: r.instance_id,
                class_id: r.class_id,
                score: r.score,
                origin,
            });
        }
        if let Some(&instance) = present.keys().find(|id| !records.iter().any(|r| r.instance_id == **id)) {
            return Err(TrackerError::MissingScore { frame, instance });
        }

        let step = lifecycle_step(&mut state, frame, &proposals, table)?;
        let mut map: HashMap<u32, u32> = present.keys().map(|&id| (id, NO_INSTANCE)).collect();
        for (p, d) in proposals.iter().zip(&step.decisions) {
            if p.instance_id == NO_INSTANCE {
                continue;
            }
            let out_id = match *d {
                Decision::Spawn(t) => {
                    summary.births += 1;
                    keys.insert(p.instance_id, t);
                    t
                }
                Decision::Keep(t) => t,
                Decision::Terminate(_) => {
                    summary.deaths += 1;
                    keys.remove(&p.instance_id);
                    NO_INSTANCE
                }
                Decision::Discard => NO_INSTANCE,
            };
            map.insert(p.instance_id, out_id);
        }
        if !step.expired.is_empty() {
            summary.deaths += step.expired.len() as u64;
            keys.retain(|_, t| !step.expired.contains(t));
        }
        out.push(relabel(g, &map, table));
    }
    summary.tracks = state.tracks_created();
    Ok(TrackedSequence { grids: out, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{GridSpec, Pose};

    fn table() -> ClassTable {
        ClassTable::occ3d_waymo()
    }

    fn strip(frame: u64, blocks: &[(usize, usize, u16, u32)]) -> PanopticGrid {
        let n = 24;
        let spec = GridSpec::new([n, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let mut classes = vec![15u16; n];
        let mut ids = vec![0u32; n];
        for &(s, len, c, id) in blocks {
            for v in s..s + len {
                classes[v] = c;
                ids[v] = id;
            }
        }
        PanopticGrid::new(spec, classes, ids, None, frame, Pose::identity(), &table()).unwrap()
    }

    fn score(frame: u64, instance_id: u32, class_id: u16, score: f64) -> ScoreRecord {
        ScoreRecord {
            frame_index: frame,
            instance_id,
            class_id,
            score,
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrackerConfig::from_toml("[lifecycle]\ntau_enter = 0.5\n").unwrap();
        assert_eq!(cfg.lifecycle.tau_enter, 0.5);
        assert_eq!(cfg.lifecycle.patience, 3);
        assert_eq!(TrackerConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(TrackerConfig::from_toml("[overlap]\nmin_iou = 2.0\n"), Err(TrackerError::InvalidConfig(_))));
        assert!(matches!(TrackerConfig::from_toml("[bogus]\n"), Err(TrackerError::InvalidConfig(_))));
    }

    #[test]
    fn kalman_driver_keeps_ids_on_fresh_input() {
        let grids: Vec<_> = (0..6u64).map(|f| strip(f, &[(2 + f as usize, 4, 1, 10 + f as u32), (16, 3, 2, 50 + f as u32)])).collect();
        let out = track_sequence(&grids, Method::Ab3dmot, &TrackerConfig::default(), None, &table()).unwrap();
        assert_eq!(out.summary.tracks, 2);
        for (g, o) in grids.iter().zip(&out.grids) {
            assert_eq!(g.classes(), o.classes());
            assert_eq!(o.instance_ids(), vec![1, 2]);
        }
    }

    #[test]
    fn lifecycle_driver_clears_rejected_instances() {
        let grids = vec![
            strip(0, &[(0, 2, 1, 7), (5, 2, 2, 8), (20, 2, 13, 0)]),
            strip(1, &[(0, 2, 1, 7), (5, 2, 2, 8)]),
            strip(2, &[(0, 2, 1, 7)]),
        ];
        let scores = vec![
            score(0, 7, 1, 0.9),
            score(0, 8, 2, 0.2),
            score(0, 0, 13, 0.95),
            score(1, 7, 1, 0.1),
            score(1, 8, 2, 0.6),
            score(2, 7, 1, 0.5),
        ];
        let out = track_sequence(&grids, Method::Lifecycle, &TrackerConfig::default(), Some(&scores), &table()).unwrap();
        // instance 8 is too weak at frame 0 and spawns at frame 1
        assert_eq!(out.grids[0].instance_ids(), vec![1]);
        assert_eq!(out.grids[0].classes()[5], 15);
        assert_eq!(out.grids[0].classes()[20], 13);
        assert_eq!(out.grids[1].instance_ids(), vec![1, 2]);
        assert_eq!(out.grids[2].instance_ids(), vec![1]);
        assert_eq!(out.summary, TrackSummary { tracks: 2, births: 2, deaths: 0 });
    }

    #[test]
    fn lifecycle_driver_requires_scores() {
        let grids = vec![strip(0, &[(0, 2, 1, 7)])];
        let cfg = TrackerConfig::default();
        assert!(matches!(track_sequence(&grids, Method::Lifecycle, &cfg, None, &table()), Err(TrackerError::InvalidProposal(_))));
        assert_eq!(
            track_sequence(&grids, Method::Lifecycle, &cfg, Some(&[]), &table()),
            Err(TrackerError::MissingScore { frame: 0, instance: 7 })
        );
    }

    #[test]
    fn method_names() {
        for m in [Method::Overlap, Method::Ab3dmot, Method::Lifecycle] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("kalman".parse::<Method>().is_err());
    }
}
