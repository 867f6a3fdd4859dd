use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::voxel::ClassRole;

use super::pq::{mean_pq, PqClassStats};
use super::MetricAccumulator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub frames: u64,
    pub voxels: u64,
    pub occ_stq: f64,
    pub occ_sq: f64,
    pub occ_aq: f64,
    pub gt_tracks: u64,
    pub pred_tracks: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub free_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pq_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub id: u16,
    pub name: String,
    /// `None` when the class never occurs in gt or pred.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    /// Mean AQ of the gt tracks of this class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pq_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub gt_track: u32,
    pub class_id: u16,
    pub voxels: u64,
    pub aq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_index: u64,
    pub voxels: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pq_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub summary: MetricSummary,
    #[serde(default)]
    pub classes: Vec<ClassMetrics>,
    #[serde(default)]
    pub tracks: Vec<TrackMetrics>,
    #[serde(default)]
    pub frames: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// One row per frame: `frame_index,voxels,pq,pq_star`.
    pub fn frames_csv(&self) -> String {
        let mut out = String::from("frame_index,voxels,pq,pq_star\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for f in &self.frames {
            let _ = writeln!(out, "{},{},{},{}", f.frame_index, f.voxels, opt(f.pq), opt(f.pq_star));
        }
        out
    }

    /// Percent with one decimal, as printed by the CLI.
    pub fn summary_line(&self) -> String {
        let s = &self.summary;
        let mut line = format!(
            "OccSTQ {:.1}  OccSQ {:.1}  OccAQ {:.1}",
            100.0 * s.occ_stq,
            100.0 * s.occ_sq,
            100.0 * s.occ_aq
        );
        if let (Some(pq), Some(pqs)) = (s.pq, s.pq_star) {
            let _ = write!(line, "  PQ {:.1}  PQ* {:.1}", 100.0 * pq, 100.0 * pqs);
        }
        line
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub(super) fn build(acc: &MetricAccumulator) -> MetricReport {
    let table = acc.class_table();
    let parts = acc.parts();

    let iou: Vec<Option<f64>> = (0..table.len())
        .map(|c| {
            let inter = parts.seg_inter[c];
            let union = parts.seg_pred[c] + parts.seg_gt[c] - inter;
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let free = table.free_id() as usize;
    let occ_sq = mean(iou.iter().enumerate().filter(|&(c, _)| c != free).filter_map(|(_, v)| *v)).unwrap_or(1.0);

    // Sum over pred tubes of TPA * IoU, grouped by gt tube.
    let mut weighted: BTreeMap<u32, f64> = BTreeMap::new();
    for (&(p, g), &tpa) in parts.tube_inter.iter().filter(|(_, &n)| n > 0) {
        let union = parts.pred_tube_size[&p] + parts.gt_tube_size[&g] - tpa;
        *weighted.entry(g).or_default() += tpa as f64 * (tpa as f64 / union as f64);
    }
    let tracks: Vec<TrackMetrics> = parts
        .gt_tube_size
        .iter()
        .map(|(&g, &size)| TrackMetrics {
            gt_track: g,
            class_id: parts.gt_track_class[&g],
            voxels: size,
            aq: weighted.get(&g).copied().unwrap_or(0.0) / size as f64,
        })
        .collect();
    let occ_aq = match mean(tracks.iter().map(|t| t.aq)) {
        Some(v) => v,
        None if parts.pred_tube_size.is_empty() => 1.0,
        None => 0.0,
    };

    let pq_enabled = acc.options().panoptic_quality;
    let mut pq_sum: BTreeMap<u16, PqClassStats> = BTreeMap::new();
    let mut pqs_sum: BTreeMap<u16, PqClassStats> = BTreeMap::new();
    let mut frames = Vec::with_capacity(acc.frames().len());
    for (&f, rec) in acc.frames() {
        let (mut pq, mut pq_star) = (None, None);
        if let Some(stats) = &rec.pq {
            for (c, s) in &stats.threshold {
                pq_sum.entry(*c).or_default().add(s);
            }
            for (c, s) in &stats.max_weight {
                pqs_sum.entry(*c).or_default().add(s);
            }
            pq = mean_pq(&stats.threshold).1;
            pq_star = mean_pq(&stats.max_weight).1;
        }
        frames.push(FrameMetrics {
            frame_index: f,
            voxels: rec.voxels,
            pq,
            pq_star,
        });
    }
    let (pq_class, pq_mean) = mean_pq(&pq_sum);
    let (pqs_class, pqs_mean) = mean_pq(&pqs_sum);

    let classes = table
        .entries()
        .iter()
        .map(|e| ClassMetrics {
            id: e.id,
            name: e.name.clone(),
            iou: iou[e.id as usize],
            aq: (e.role == ClassRole::Thing)
                .then(|| mean(tracks.iter().filter(|t| t.class_id == e.id).map(|t| t.aq)))
                .flatten(),
            pq: pq_class.get(&e.id).copied(),
            pq_star: pqs_class.get(&e.id).copied(),
        })
        .collect();

    let occ_stq = (occ_sq * occ_aq).sqrt();
    MetricReport {
        summary: MetricSummary {
            frames: parts.frames_seen,
            voxels: acc.frames().values().map(|r| r.voxels).sum(),
            occ_stq,
            occ_sq,
            occ_aq,
            gt_tracks: parts.gt_tube_size.len() as u64,
            pred_tracks: parts.pred_tube_size.len() as u64,
            free_iou: iou[free],
            pq: if pq_enabled { Some(pq_mean.unwrap_or(1.0)) } else { None },
            pq_star: if pq_enabled { Some(pqs_mean.unwrap_or(1.0)) } else { None },
        },
        classes,
        tracks,
        frames,
    }
}
