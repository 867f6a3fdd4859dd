//! Per-frame panoptic quality.
//!
//! Thing segments are `(class, instance)` groups, each stuff class is a single
//! segment, free space and id-less thing voxels form no segment. Within a
//! class, pred and gt segments are matched either by the strict IoU > 0.5
//! rule (PQ) or by maximum-weight matching on IoU (PQ*). Both share the
//! denominator `|TP| + |FP|/2 + |FN|/2 = (|pred| + |gt|) / 2`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::assignment::{max_weight_matching, threshold_matching, WeightMatrix};
use crate::voxel::{ClassRole, ClassTable, PanopticGrid, NO_INSTANCE};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PqMode {
    /// Standard PQ: a match needs IoU > 0.5.
    Threshold,
    /// PQ*: maximum-weight bipartite matching on IoU.
    MaxWeight,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqClassStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PqClassStats {
    pub fn denominator(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    /// `None` when the class has no segments on either side.
    pub fn pq(&self) -> Option<f64> {
        let d = self.denominator();
        (d > 0.0).then(|| self.iou_sum / d)
    }

    pub fn add(&mut self, other: &PqClassStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }
}

/// Both matching modes for every class present in one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FramePqStats {
    pub threshold: BTreeMap<u16, PqClassStats>,
    pub max_weight: BTreeMap<u16, PqClassStats>,
}

impl FramePqStats {
    pub fn by_mode(&self, mode: PqMode) -> &BTreeMap<u16, PqClassStats> {
        match mode {
            PqMode::Threshold => &self.threshold,
            PqMode::MaxWeight => &self.max_weight,
        }
    }
}

/// PQ values for one frame and one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PqFrame {
    pub per_class: BTreeMap<u16, f64>,
    pub mean: Option<f64>,
}

pub fn mean_pq(stats: &BTreeMap<u16, PqClassStats>) -> (BTreeMap<u16, f64>, Option<f64>) {
    let per_class: BTreeMap<u16, f64> = stats.iter().filter_map(|(&c, s)| s.pq().map(|v| (c, v))).collect();
    let mean = (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64);
    (per_class, mean)
}

fn segment_key(class: u16, id: u32, role: Option<ClassRole>) -> Option<(u16, u32)> {
    match role? {
        ClassRole::Thing if id != NO_INSTANCE => Some((class, id)),
        ClassRole::Stuff => Some((class, 0)),
        _ => None,
    }
}

/// Matching statistics for both modes, restricted to gt-visible voxels when
/// `visible_only` is set.
pub fn pq_frame_stats(
    gt: &PanopticGrid,
    pred: &PanopticGrid,
    table: &ClassTable,
    visible_only: bool,
) -> Result<FramePqStats, MetricError> {
    if gt.spec() != pred.spec() {
        return Err(MetricError::SpecMismatch);
    }
    let roles: Vec<Option<ClassRole>> = (0..table.len() as u16).map(|c| table.role(c)).collect();
    let role = |c: u16| roles.get(c as usize).copied().flatten();

    let mut gt_area: HashMap<(u16, u32), u64> = HashMap::new();
    let mut pred_area: HashMap<(u16, u32), u64> = HashMap::new();
    let mut inter: HashMap<((u16, u32), (u16, u32)), u64> = HashMap::new();
    for v in 0..gt.num_voxels() {
        if visible_only && !gt.is_visible(v) {
            continue;
        }
        let (gc, gi) = gt.label(v);
        let (pc, pi) = pred.label(v);
        let g = segment_key(gc, gi, role(gc));
        let p = segment_key(pc, pi, role(pc));
        if let Some(g) = g {
            *gt_area.entry(g).or_default() += 1;
        }
        if let Some(p) = p {
            *pred_area.entry(p).or_default() += 1;
        }
        if let (Some(g), Some(p)) = (g, p) {
            if g.0 == p.0 {
                *inter.entry((p, g)).or_default() += 1;
            }
        }
    }

    let mut classes: BTreeMap<u16, (Vec<(u32, u64)>, Vec<(u32, u64)>)> = BTreeMap::new();
    for (&(c, id), &a) in &pred_area {
        classes.entry(c).or_default().0.push((id, a));
    }
    for (&(c, id), &a) in &gt_area {
        classes.entry(c).or_default().1.push((id, a));
    }

    let mut out = FramePqStats::default();
    for (class, (mut preds, mut gts)) in classes {
        preds.sort_unstable();
        gts.sort_unstable();
        let mut iou = WeightMatrix::zeros(preds.len(), gts.len());
        for (r, &(pid, pa)) in preds.iter().enumerate() {
            for (c, &(gid, ga)) in gts.iter().enumerate() {
                if let Some(&i) = inter.get(&((class, pid), (class, gid))) {
                    iou.set(r, c, i as f64 / (pa + ga - i) as f64);
                }
            }
        }
        let score = |pairs: &[(usize, usize)]| PqClassStats {
            tp: pairs.len() as u64,
            fp: (preds.len() - pairs.len()) as u64,
            fn_: (gts.len() - pairs.len()) as u64,
            iou_sum: pairs.iter().map(|&(r, c)| iou.get(r, c)).sum(),
        };
        let thr = threshold_matching(&iou).expect("IoU values lie in [0, 1]");
        let opt = max_weight_matching(&iou, 0.0).expect("IoU values are finite");
        out.threshold.insert(class, score(&thr));
        out.max_weight.insert(class, score(&opt));
    }
    Ok(out)
}

/// PQ (threshold mode) or PQ* (max-weight mode) for one frame.
pub fn pq_frame(gt: &PanopticGrid, pred: &PanopticGrid, table: &ClassTable, mode: PqMode) -> Result<PqFrame, MetricError> {
    pq_frame_with(gt, pred, table, mode, true)
}

pub fn pq_frame_with(
    gt: &PanopticGrid,
    pred: &PanopticGrid,
    table: &ClassTable,
    mode: PqMode,
    visible_only: bool,
) -> Result<PqFrame, MetricError> {
    let stats = pq_frame_stats(gt, pred, table, visible_only)?;
    let (per_class, mean) = mean_pq(stats.by_mode(mode));
    Ok(PqFrame { per_class, mean })
}
