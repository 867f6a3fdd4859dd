//! Streaming OccSQ / OccAQ / OccSTQ and PQ / PQ*.
//!
//! A [`MetricAccumulator`] holds only integer counts plus per-frame PQ
//! records keyed by frame index, so ingesting frames in any grouping and
//! merging the partial accumulators gives bit-identical reports.

mod pq;
mod report;

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::voxel::{ClassTable, PanopticGrid, NO_INSTANCE};

pub use pq::{mean_pq, pq_frame, pq_frame_stats, pq_frame_with, FramePqStats, PqClassStats, PqFrame, PqMode};
pub use report::{ClassMetrics, FrameMetrics, MetricReport, MetricSummary, TrackMetrics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("gt and pred grids have different specs")]
    SpecMismatch,
    #[error("gt frame {gt} paired with pred frame {pred}")]
    FrameMismatch { gt: u64, pred: u64 },
    #[error("accumulators use different class tables")]
    ClassTableMismatch,
    #[error("accumulators use different evaluation options")]
    OptionsMismatch,
    #[error("gt track {track} has class {first} and class {second}")]
    TrackClassConflict { track: u32, first: u16, second: u16 },
    #[error("frame {0} ingested twice")]
    DuplicateFrame(u64),
    #[error("no frames ingested")]
    EmptyAccumulator,
    #[error("inconsistent counts: {0}")]
    InconsistentCounts(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Only voxels inside the gt visibility mask are evaluated.
    pub visible_only: bool,
    /// Also collect per-frame PQ / PQ* statistics.
    pub panoptic_quality: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            visible_only: true,
            panoptic_quality: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameRecord {
    pub voxels: u64,
    pub pq: Option<FramePqStats>,
}

/// Raw count structures, used to build an accumulator directly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccumulatorParts {
    pub seg_inter: Vec<u64>,
    pub seg_pred: Vec<u64>,
    pub seg_gt: Vec<u64>,
    pub tube_inter: BTreeMap<(u32, u32), u64>,
    pub pred_tube_size: BTreeMap<u32, u64>,
    pub gt_tube_size: BTreeMap<u32, u64>,
    pub gt_track_class: BTreeMap<u32, u16>,
    pub frames_seen: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    table: ClassTable,
    options: EvalOptions,
    thing: Vec<bool>,
    parts: AccumulatorParts,
    frames: BTreeMap<u64, FrameRecord>,
}

impl MetricAccumulator {
    pub fn new(table: ClassTable, options: EvalOptions) -> Self {
        let k = table.len();
        Self {
            thing: table.thing_mask(),
            table,
            options,
            parts: AccumulatorParts {
                seg_inter: vec![0; k],
                seg_pred: vec![0; k],
                seg_gt: vec![0; k],
                ..Default::default()
            },
            frames: BTreeMap::new(),
        }
    }

    /// Builds an accumulator from explicit counts after checking its invariants.
    pub fn from_parts(table: ClassTable, options: EvalOptions, parts: AccumulatorParts) -> Result<Self, MetricError> {
        let k = table.len();
        let bad = |m: String| Err(MetricError::InconsistentCounts(m));
        if parts.seg_inter.len() != k || parts.seg_pred.len() != k || parts.seg_gt.len() != k {
            return bad(format!("per-class arrays must have {k} entries"));
        }
        for c in 0..k {
            if parts.seg_inter[c] > parts.seg_pred[c].min(parts.seg_gt[c]) {
                return bad(format!("class {c}: intersection exceeds a total"));
            }
        }
        let mut pred_sum: BTreeMap<u32, u64> = BTreeMap::new();
        let mut gt_sum: BTreeMap<u32, u64> = BTreeMap::new();
        for (&(p, g), &n) in &parts.tube_inter {
            *pred_sum.entry(p).or_default() += n;
            *gt_sum.entry(g).or_default() += n;
        }
        for (p, s) in pred_sum {
            if s > parts.pred_tube_size.get(&p).copied().unwrap_or(0) {
                return bad(format!("pred track {p}: overlaps exceed tube size"));
            }
        }
        for (g, s) in gt_sum {
            if s > parts.gt_tube_size.get(&g).copied().unwrap_or(0) {
                return bad(format!("gt track {g}: overlaps exceed tube size"));
            }
        }
        if let Some(g) = parts.gt_tube_size.keys().find(|g| !parts.gt_track_class.contains_key(g)) {
            return bad(format!("gt track {g} has no class"));
        }
        if let Some(c) = parts.gt_track_class.values().find(|&&c| !table.is_thing(c)) {
            return bad(format!("gt track class {c} is not a thing class"));
        }
        let mut acc = Self::new(table, options);
        acc.parts = parts;
        Ok(acc)
    }

    pub fn class_table(&self) -> &ClassTable {
        &self.table
    }

    pub fn options(&self) -> EvalOptions {
        self.options
    }

    pub fn parts(&self) -> &AccumulatorParts {
        &self.parts
    }

    pub fn frames(&self) -> &BTreeMap<u64, FrameRecord> {
        &self.frames
    }

    pub fn frames_seen(&self) -> u64 {
        self.parts.frames_seen
    }

    pub fn ingest_frame(&mut self, gt: &PanopticGrid, pred: &PanopticGrid) -> Result<(), MetricError> {
        if gt.spec() != pred.spec() {
            return Err(MetricError::SpecMismatch);
        }
        if gt.frame_index() != pred.frame_index() {
            return Err(MetricError::FrameMismatch {
                gt: gt.frame_index(),
                pred: pred.frame_index(),
            });
        }
        if self.frames.contains_key(&gt.frame_index()) {
            return Err(MetricError::DuplicateFrame(gt.frame_index()));
        }
        let k = self.table.len();
        let mut seg_inter = vec![0u64; k];
        let mut seg_pred = vec![0u64; k];
        let mut seg_gt = vec![0u64; k];
        let mut tube_inter: HashMap<(u32, u32), u64> = HashMap::new();
        let mut pred_tube: HashMap<u32, u64> = HashMap::new();
        let mut gt_tube: HashMap<u32, u64> = HashMap::new();
        let mut gt_class: HashMap<u32, u16> = HashMap::new();
        let mut voxels = 0u64;

        let (gc, gi) = (gt.classes(), gt.instances());
        let (pc, pi) = (pred.classes(), pred.instances());
        let is_thing = |c: u16| self.thing.get(c as usize).copied().unwrap_or(false);
        for v in 0..gt.num_voxels() {
            if self.options.visible_only && !gt.is_visible(v) {
                continue;
            }
            voxels += 1;
            let (g_class, p_class) = (gc[v], pc[v]);
            if g_class as usize >= k || p_class as usize >= k {
                return Err(MetricError::ClassTableMismatch);
            }
            seg_gt[g_class as usize] += 1;
            seg_pred[p_class as usize] += 1;
            if g_class == p_class {
                seg_inter[g_class as usize] += 1;
            }
            let g_id = (is_thing(g_class) && gi[v] != NO_INSTANCE).then_some(gi[v]);
            let p_id = (is_thing(p_class) && pi[v] != NO_INSTANCE).then_some(pi[v]);
            if let Some(g) = g_id {
                *gt_tube.entry(g).or_default() += 1;
                let first = *gt_class.entry(g).or_insert(g_class);
                if first != g_class {
                    return Err(MetricError::TrackClassConflict {
                        track: g,
                        first,
                        second: g_class,
                    });
                }
            }
            if let Some(p) = p_id {
                *pred_tube.entry(p).or_default() += 1;
            }
            if let (Some(g), Some(p)) = (g_id, p_id) {
                *tube_inter.entry((p, g)).or_default() += 1;
            }
        }

        for (&g, &c) in &gt_class {
            if let Some(&first) = self.parts.gt_track_class.get(&g) {
                if first != c {
                    return Err(MetricError::TrackClassConflict {
                        track: g,
                        first,
                        second: c,
                    });
                }
            }
        }
        let pq = if self.options.panoptic_quality {
            Some(pq::pq_frame_stats(gt, pred, &self.table, self.options.visible_only)?)
        } else {
            None
        };

        let parts = &mut self.parts;
        for c in 0..k {
            parts.seg_inter[c] += seg_inter[c];
            parts.seg_pred[c] += seg_pred[c];
            parts.seg_gt[c] += seg_gt[c];
        }
        for (key, n) in tube_inter {
            *parts.tube_inter.entry(key).or_default() += n;
        }
        for (p, n) in pred_tube {
            *parts.pred_tube_size.entry(p).or_default() += n;
        }
        for (g, n) in gt_tube {
            *parts.gt_tube_size.entry(g).or_default() += n;
        }
        parts.gt_track_class.extend(gt_class);
        parts.frames_seen += 1;
        self.frames.insert(gt.frame_index(), FrameRecord { voxels, pq });
        Ok(())
    }

    /// Pointwise sum of two accumulators over disjoint frame sets.
    pub fn merge(mut self, other: &MetricAccumulator) -> Result<MetricAccumulator, MetricError> {
        if self.table != other.table {
            return Err(MetricError::ClassTableMismatch);
        }
        if self.options != other.options {
            return Err(MetricError::OptionsMismatch);
        }
        for (g, &c) in &other.parts.gt_track_class {
            if let Some(&first) = self.parts.gt_track_class.get(g) {
                if first != c {
                    return Err(MetricError::TrackClassConflict {
                        track: *g,
                        first,
                        second: c,
                    });
                }
            }
        }
        if let Some(f) = other.frames.keys().find(|f| self.frames.contains_key(f)) {
            return Err(MetricError::DuplicateFrame(*f));
        }
        let a = &mut self.parts;
        let b = &other.parts;
        for c in 0..a.seg_inter.len() {
            a.seg_inter[c] += b.seg_inter[c];
            a.seg_pred[c] += b.seg_pred[c];
            a.seg_gt[c] += b.seg_gt[c];
        }
        for (&key, &n) in &b.tube_inter {
            *a.tube_inter.entry(key).or_default() += n;
        }
        for (&p, &n) in &b.pred_tube_size {
            *a.pred_tube_size.entry(p).or_default() += n;
        }
        for (&g, &n) in &b.gt_tube_size {
            *a.gt_tube_size.entry(g).or_default() += n;
        }
        a.gt_track_class.extend(b.gt_track_class.iter().map(|(&g, &c)| (g, c)));
        a.frames_seen += b.frames_seen;
        self.frames.extend(other.frames.iter().map(|(&f, r)| (f, r.clone())));
        Ok(self)
    }

    pub fn finalize(&self) -> Result<MetricReport, MetricError> {
        if self.parts.frames_seen == 0 {
            return Err(MetricError::EmptyAccumulator);
        }
        Ok(report::build(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{GridSpec, Pose};
    use proptest::prelude::*;

    fn table() -> ClassTable {
        ClassTable::occ3d_waymo()
    }

    const FREE: u16 = 15;

    fn grid(frame: u64, labels: &[(u16, u32)], vis: Option<Vec<bool>>) -> PanopticGrid {
        let spec = GridSpec::new([labels.len(), 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        PanopticGrid::new(
            spec,
            labels.iter().map(|l| l.0).collect(),
            labels.iter().map(|l| l.1).collect(),
            vis,
            frame,
            Pose::identity(),
            &table(),
        )
        .unwrap()
    }

    fn acc() -> MetricAccumulator {
        MetricAccumulator::new(table(), EvalOptions::default())
    }

    #[test]
    fn identity_frame_counts() {
        let g = grid(0, &[(1, 3), (1, 3), (2, 4), (13, 0), (FREE, 0)], None);
        let mut a = acc();
        a.ingest_frame(&g, &g).unwrap();
        let p = a.parts();
        assert_eq!(p.seg_inter, p.seg_gt);
        assert_eq!(p.seg_inter, p.seg_pred);
        assert!(p.tube_inter.keys().all(|(x, y)| x == y));
        assert_eq!(p.tube_inter[&(3, 3)], 2);
        let r = a.finalize().unwrap();
        assert_eq!((r.summary.occ_sq, r.summary.occ_aq, r.summary.occ_stq), (1.0, 1.0, 1.0));
        assert_eq!(r.summary.pq, Some(1.0));
        assert_eq!(r.summary.pq_star, Some(1.0));
    }

    #[test]
    fn all_free_prediction() {
        let g = grid(0, &[(1, 3), (1, 3), (13, 0), (FREE, 0)], None);
        let p = grid(0, &[(FREE, 0); 4], None);
        let mut a = acc();
        a.ingest_frame(&g, &p).unwrap();
        let parts = a.parts();
        for c in 0..table().len() {
            assert_eq!(parts.seg_inter[c] > 0, c == FREE as usize);
        }
        assert!(parts.tube_inter.is_empty());
        assert!(parts.pred_tube_size.is_empty());
        let r = a.finalize().unwrap();
        assert_eq!(r.summary.occ_aq, 0.0);
        assert_eq!(r.summary.occ_sq, 0.0);
    }

    #[test]
    fn midpoint_id_switch_halves_aq() {
        let mut a = acc();
        for f in 0..6u64 {
            let g = grid(f, &[(1, 1), (1, 1), (FREE, 0)], None);
            let pid = if f < 3 { 10 } else { 11 };
            let p = grid(f, &[(1, pid), (1, pid), (FREE, 0)], None);
            a.ingest_frame(&g, &p).unwrap();
        }
        let r = a.finalize().unwrap();
        assert!((r.summary.occ_aq - 0.5).abs() < 1e-12);
        assert_eq!(r.summary.occ_sq, 1.0);
    }

    #[test]
    fn table_two_marginals() {
        // OccSQ 0.294 from one occupied class, OccAQ 0.135 = 27 / 200 perfect tracks
        let t = table();
        let k = t.len();
        let mut parts = AccumulatorParts {
            seg_inter: vec![0; k],
            seg_pred: vec![0; k],
            seg_gt: vec![0; k],
            frames_seen: 1,
            ..Default::default()
        };
        parts.seg_inter[1] = 294;
        parts.seg_pred[1] = 647;
        parts.seg_gt[1] = 647;
        for g in 1..=200u32 {
            parts.gt_tube_size.insert(g, 10);
            parts.gt_track_class.insert(g, 1);
            if g <= 27 {
                parts.pred_tube_size.insert(g, 10);
                parts.tube_inter.insert((g, g), 10);
            }
        }
        let a = MetricAccumulator::from_parts(t, EvalOptions::default(), parts).unwrap();
        let r = a.finalize().unwrap();
        assert!((r.summary.occ_sq - 0.294).abs() < 1e-12);
        assert!((r.summary.occ_aq - 0.135).abs() < 1e-12);
        assert!((r.summary.occ_stq * 100.0 - 20.0).abs() < 0.15);
    }

    #[test]
    fn invisible_voxels_never_count() {
        let vis = vec![true, false, true];
        let g = grid(0, &[(1, 1), (2, 2), (FREE, 0)], Some(vis.clone()));
        let p = grid(0, &[(1, 1), (13, 0), (FREE, 0)], None);
        let mut a = acc();
        a.ingest_frame(&g, &p).unwrap();
        assert_eq!(a.parts().seg_gt[2], 0);
        assert_eq!(a.parts().seg_pred[13], 0);
        assert_eq!(a.frames()[&0].voxels, 2);
        let mut all = MetricAccumulator::new(
            table(),
            EvalOptions {
                visible_only: false,
                ..Default::default()
            },
        );
        all.ingest_frame(&g, &p).unwrap();
        assert_eq!(all.parts().seg_gt[2], 1);
    }

    #[test]
    fn ingest_errors() {
        let mut a = acc();
        let g = grid(0, &[(FREE, 0)], None);
        assert_eq!(a.ingest_frame(&g, &grid(1, &[(FREE, 0)], None)), Err(MetricError::FrameMismatch { gt: 0, pred: 1 }));
        assert_eq!(a.ingest_frame(&g, &grid(0, &[(FREE, 0), (FREE, 0)], None)), Err(MetricError::SpecMismatch));
        a.ingest_frame(&g, &g).unwrap();
        assert_eq!(a.ingest_frame(&g, &g), Err(MetricError::DuplicateFrame(0)));
        assert_eq!(acc().finalize(), Err(MetricError::EmptyAccumulator));
        let mut a = acc();
        a.ingest_frame(&grid(0, &[(1, 5)], None), &grid(0, &[(1, 5)], None)).unwrap();
        assert!(matches!(
            a.ingest_frame(&grid(1, &[(2, 5)], None), &grid(1, &[(2, 5)], None)),
            Err(MetricError::TrackClassConflict { track: 5, .. })
        ));
    }

    #[test]
    fn merge_identity_and_conflicts() {
        let mut a = acc();
        a.ingest_frame(&grid(0, &[(1, 5), (13, 0)], None), &grid(0, &[(1, 7), (13, 0)], None)).unwrap();
        let merged = a.clone().merge(&acc()).unwrap();
        assert_eq!(merged, a);
        let mut b = acc();
        b.ingest_frame(&grid(1, &[(2, 5)], None), &grid(1, &[(2, 5)], None)).unwrap();
        assert!(matches!(a.clone().merge(&b), Err(MetricError::TrackClassConflict { .. })));
        assert_eq!(a.clone().merge(&a), Err(MetricError::DuplicateFrame(0)));
        let other = MetricAccumulator::new(
            table(),
            EvalOptions {
                visible_only: false,
                panoptic_quality: true,
            },
        );
        assert_eq!(a.merge(&other), Err(MetricError::OptionsMismatch));
    }

    fn labels_strategy(n: usize) -> impl Strategy<Value = Vec<(u16, u32)>> {
        proptest::collection::vec((0u8..5, 1u32..4), n).prop_map(|v| {
            v.into_iter()
                .map(|(k, id)| match k {
                    0 => (FREE, 0),
                    1 => (13, 0),
                    2 => (1, id),
                    3 => (2, id + 3),
                    _ => (1, id + 6),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn merge_is_commutative_and_partition_invariant(
            frames in proptest::collection::vec((labels_strategy(12), labels_strategy(12)), 6)
        ) {
            let mut serial = acc();
            let mut left = acc();
            let mut right = acc();
            for (f, (g, p)) in frames.iter().enumerate() {
                let (g, p) = (grid(f as u64, g, None), grid(f as u64, p, None));
                serial.ingest_frame(&g, &p).unwrap();
                if f < 3 { left.ingest_frame(&g, &p).unwrap() } else { right.ingest_frame(&g, &p).unwrap() }
            }
            let ab = left.clone().merge(&right).unwrap();
            let ba = right.merge(&left).unwrap();
            prop_assert_eq!(&ab, &ba);
            prop_assert_eq!(&ab, &serial);
            let r = ab.finalize().unwrap();
            prop_assert_eq!(r.to_toml(), serial.finalize().unwrap().to_toml());
            prop_assert!((r.summary.occ_stq.powi(2) - r.summary.occ_sq * r.summary.occ_aq).abs() < 1e-12);
        }
    }
}
