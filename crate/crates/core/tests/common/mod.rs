//! Brute-force oracles and random inputs shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use occ4d::voxel::NO_INSTANCE;
use occ4d::{ClassRole, ClassTable, GridSpec, PanopticGrid, Pose, TrackedBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn table() -> ClassTable {
    ClassTable::occ3d_waymo()
}

pub const FREE: u16 = 15;
pub const ROAD: u16 = 13;
pub const VEHICLE: u16 = 1;
pub const PEDESTRIAN: u16 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveMetrics {
    pub occ_sq: f64,
    pub occ_aq: f64,
    pub occ_stq: f64,
}

/// OccSQ / OccAQ / OccSTQ straight from the set definitions over the whole
/// 4D volume: every tube is materialized as a set of (frame, voxel) pairs.
pub fn naive_metrics(gt: &[PanopticGrid], pred: &[PanopticGrid], table: &ClassTable) -> NaiveMetrics {
    let mut omega: Vec<(usize, usize)> = Vec::new();
    for (t, g) in gt.iter().enumerate() {
        for v in 0..g.num_voxels() {
            if g.visibility().is_none_or(|vis| vis[v]) {
                omega.push((t, v));
            }
        }
    }

    let mut ious = Vec::new();
    for e in table.entries() {
        if e.role == ClassRole::Free {
            continue;
        }
        let gt_set: HashSet<(usize, usize)> = omega.iter().copied().filter(|&(t, v)| gt[t].classes()[v] == e.id).collect();
        let pr_set: HashSet<(usize, usize)> = omega.iter().copied().filter(|&(t, v)| pred[t].classes()[v] == e.id).collect();
        let inter = gt_set.intersection(&pr_set).count();
        let union = gt_set.union(&pr_set).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let occ_sq = if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };

    let tubes = |seq: &[PanopticGrid]| {
        let mut m: BTreeMap<u32, HashSet<(usize, usize)>> = BTreeMap::new();
        for &(t, v) in &omega {
            let (c, id) = seq[t].label(v);
            if id != NO_INSTANCE && table.is_thing(c) {
                m.entry(id).or_default().insert((t, v));
            }
        }
        m
    };
    let gt_tubes = tubes(gt);
    let pr_tubes = tubes(pred);
    let mut aqs = Vec::new();
    for g in gt_tubes.values() {
        let mut s = 0.0;
        for p in pr_tubes.values() {
            let tpa = g.intersection(p).count();
            if tpa > 0 {
                let iou = tpa as f64 / (g.len() + p.len() - tpa) as f64;
                s += tpa as f64 * iou;
            }
        }
        aqs.push(s / g.len() as f64);
    }
    let occ_aq = if aqs.is_empty() {
        if pr_tubes.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        aqs.iter().sum::<f64>() / aqs.len() as f64
    };
    NaiveMetrics {
        occ_sq,
        occ_aq,
        occ_stq: (occ_sq * occ_aq).sqrt(),
    }
}

/// Random small sequence: thing track k always has the same class.
pub fn random_sequence(rng: &mut ChaCha8Rng, dims: [usize; 3], frames: u64, tracks: u32, visibility: bool) -> Vec<PanopticGrid> {
    let table = table();
    let spec = GridSpec::new(dims, [0.4; 3], [0.0; 3]).unwrap();
    let n = spec.num_voxels();
    let track_class: Vec<u16> = (0..=tracks).map(|_| if rng.random_bool(0.5) { VEHICLE } else { PEDESTRIAN }).collect();
    (0..frames)
        .map(|f| {
            let mut classes = vec![FREE; n];
            let mut ids = vec![0u32; n];
            for v in 0..n {
                match rng.random_range(0..10) {
                    0..=3 => {}
                    4 => classes[v] = ROAD,
                    5 => classes[v] = 11,
                    6 if tracks > 0 => classes[v] = VEHICLE, // thing voxel without an id
                    _ if tracks > 0 => {
                        let k = rng.random_range(1..=tracks);
                        classes[v] = track_class[k as usize];
                        ids[v] = k;
                    }
                    _ => {}
                }
            }
            let vis = visibility.then(|| (0..n).map(|_| rng.random_bool(0.8)).collect());
            PanopticGrid::new(spec.clone(), classes, ids, vis, f, Pose::identity(), &table).unwrap()
        })
        .collect()
}

/// Random prediction over the same specs: any class, ids up to `max_id`.
pub fn random_prediction(rng: &mut ChaCha8Rng, gt: &[PanopticGrid], max_id: u32) -> Vec<PanopticGrid> {
    let table = table();
    gt.iter()
        .map(|g| {
            let n = g.num_voxels();
            let mut classes = g.classes().to_vec();
            let mut ids = g.instances().to_vec();
            for v in 0..n {
                if rng.random_bool(0.4) {
                    let c = [FREE, ROAD, 11, VEHICLE, PEDESTRIAN, 4][rng.random_range(0..6)];
                    classes[v] = c;
                    ids[v] = if table.is_thing(c) { rng.random_range(0..=max_id) } else { 0 };
                } else if ids[v] != 0 && rng.random_bool(0.3) {
                    ids[v] = rng.random_range(1..=max_id);
                }
            }
            PanopticGrid::new(g.spec().clone(), classes, ids, None, g.frame_index(), *g.ego_pose(), &table).unwrap()
        })
        .collect()
}

/// Every matching of a small weight matrix, choosing the best by total
/// weight (pairs need weight > `min_weight`), then by number of pairs, then
/// by the lexicographically smallest row-sorted pair list.
pub fn brute_force_matching(w: &[Vec<f64>], min_weight: f64) -> Vec<(usize, usize)> {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    let scale = w.iter().flatten().fold(1.0f64, |m, &x| m.max(x));
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut current = Vec::new();
    let mut used = vec![false; cols];

    fn better(a: &(f64, Vec<(usize, usize)>), b: &(f64, Vec<(usize, usize)>), tol: f64) -> bool {
        if a.0 > b.0 + tol {
            return true;
        }
        if a.0 < b.0 - tol {
            return false;
        }
        if a.1.len() != b.1.len() {
            return a.1.len() > b.1.len();
        }
        a.1 < b.1
    }

    #[allow(clippy::too_many_arguments)]
    fn rec(
        r: usize,
        w: &[Vec<f64>],
        min_weight: f64,
        tol: f64,
        sum: f64,
        current: &mut Vec<(usize, usize)>,
        used: &mut [bool],
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        if r == w.len() {
            let cand = (sum, current.clone());
            if best.as_ref().is_none_or(|b| better(&cand, b, tol)) {
                *best = Some(cand);
            }
            return;
        }
        rec(r + 1, w, min_weight, tol, sum, current, used, best);
        for c in 0..used.len() {
            if !used[c] && w[r][c] > min_weight {
                used[c] = true;
                current.push((r, c));
                rec(r + 1, w, min_weight, tol, sum + w[r][c], current, used, best);
                current.pop();
                used[c] = false;
            }
        }
    }

    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    rec(0, w, min_weight, 1e-9 * scale, 0.0, &mut current, &mut used, &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

fn oracle_in_box(b: &TrackedBox, p: [f64; 3]) -> bool {
    // express p in the box frame via the box's unit axes
    let ax = [b.yaw.cos(), b.yaw.sin()];
    let ay = [-b.yaw.sin(), b.yaw.cos()];
    let d = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
    let u = d[0] * ax[0] + d[1] * ax[1];
    let v = d[0] * ay[0] + d[1] * ay[1];
    2.0 * u.abs() <= b.size[0] && 2.0 * v.abs() <= b.size[1] && 2.0 * d[2].abs() <= b.size[2]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>().sqrt()
}

fn nearest(cands: &[(f64, u32)]) -> u32 {
    let m = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    cands.iter().filter(|c| c.0 <= m + 1e-9).map(|c| c.1).min().unwrap()
}

/// Per-voxel scan over every box: the (class, id) labels the generator must
/// produce for a semantic grid.
pub fn naive_labels(
    spec: &GridSpec,
    classes: &[u16],
    pose: &Pose,
    boxes: &[TrackedBox],
    table: &ClassTable,
) -> (Vec<u16>, Vec<u32>) {
    let fallback = table.find("general object").filter(|&c| table.role(c) == Some(ClassRole::Stuff));
    let mut out_c = classes.to_vec();
    let mut out_i = vec![0u32; classes.len()];
    for v in 0..classes.len() {
        let c = classes[v];
        if !table.is_thing(c) {
            continue;
        }
        let p = pose.transform_point(spec.voxel_center(spec.unravel(v)));
        let same: Vec<&TrackedBox> = boxes.iter().filter(|b| b.class_id == c).collect();
        let inside: Vec<(f64, u32)> = same.iter().filter(|b| oracle_in_box(b, p)).map(|b| (dist(p, b.center), b.track_id)).collect();
        if !inside.is_empty() {
            out_i[v] = nearest(&inside);
        } else if !same.is_empty() {
            let all: Vec<(f64, u32)> = same.iter().map(|b| (dist(p, b.center), b.track_id)).collect();
            out_i[v] = nearest(&all);
        } else if let Some(fb) = fallback {
            out_c[v] = fb;
        }
    }
    (out_c, out_i)
}

/// Random labeling scene: posed grid, up to `max_boxes` rotated boxes of
/// thing classes, semantic classes biased toward box interiors.
pub fn random_label_scene(rng: &mut ChaCha8Rng, max_boxes: usize) -> (GridSpec, Vec<u16>, Pose, Vec<TrackedBox>) {
    let spec = GridSpec::new([12, 12, 4], [0.5, 0.5, 0.5], [-3.0, -3.0, -1.0]).unwrap();
    let pose = Pose::from_yaw_translation(rng.random_range(-3.2..3.2), [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0]);
    let nboxes = rng.random_range(0..=max_boxes);
    let things = [VEHICLE, PEDESTRIAN, 4];
    let mut boxes: Vec<TrackedBox> = Vec::new();
    for k in 0..nboxes {
        let local = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)];
        let mut center = pose.transform_point(local);
        // occasionally stack two boxes on the same center to force ties
        if k > 0 && rng.random_bool(0.2) {
            center = boxes[rng.random_range(0..k)].center;
        }
        boxes.push(TrackedBox {
            center,
            size: [rng.random_range(0.3..3.0), rng.random_range(0.3..3.0), rng.random_range(0.3..2.0)],
            yaw: rng.random_range(-3.2..3.2),
            class_id: things[rng.random_range(0..things.len())],
            track_id: (k as u32 + 1) * 3,
            frame_index: 0,
        });
    }
    let classes = (0..spec.num_voxels())
        .map(|_| match rng.random_range(0..8) {
            0..=2 => FREE,
            3 => ROAD,
            4 => 11,
            _ => things[rng.random_range(0..things.len())],
        })
        .collect();
    (spec, classes, pose, boxes)
}

/// Random single frame pair for PQ checks: gt blobs plus a perturbed copy.
pub fn random_pq_frame(rng: &mut ChaCha8Rng) -> (PanopticGrid, PanopticGrid) {
    let table = table();
    let spec = GridSpec::new([8, 8, 2], [0.4; 3], [0.0; 3]).unwrap();
    let n = spec.num_voxels();
    let mut gc = vec![FREE; n];
    let mut gi = vec![0u32; n];
    let blobs = rng.random_range(1..6);
    for b in 0..blobs {
        let (x0, y0) = (rng.random_range(0..7), rng.random_range(0..7));
        let (w, h) = (rng.random_range(1..4), rng.random_range(1..4));
        let class = [VEHICLE, PEDESTRIAN, ROAD][rng.random_range(0..3)];
        for x in x0..(x0 + w).min(8) {
            for y in y0..(y0 + h).min(8) {
                for z in 0..2 {
                    let v = spec.linear_index([x, y, z]);
                    gc[v] = class;
                    gi[v] = if table.is_thing(class) { b + 1 } else { 0 };
                }
            }
        }
    }
    let mut pc = gc.clone();
    let mut pi: Vec<u32> = gi.iter().map(|&i| if i == 0 { 0 } else { i + 10 }).collect();
    let p_noise = rng.random_range(0.0..0.6);
    let mut shift: HashMap<u32, u32> = HashMap::new();
    for v in 0..n {
        if rng.random_bool(p_noise) {
            let c = [FREE, VEHICLE, PEDESTRIAN, ROAD][rng.random_range(0..4)];
            pc[v] = c;
            pi[v] = if table.is_thing(c) { *shift.entry(v as u32 % 3).or_insert(rng.random_range(11..20)) } else { 0 };
        }
    }
    let g = PanopticGrid::new(spec.clone(), gc, gi, None, 0, Pose::identity(), &table).unwrap();
    let p = PanopticGrid::new(spec, pc, pi, None, 0, Pose::identity(), &table).unwrap();
    (g, p)
}
