use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::io::ScoreRecord;
use crate::trackers::instance_classes;
use crate::voxel::{ClassTable, PanopticGrid, NO_INSTANCE};

use super::{resolve_class, SynthError};

/// Relabels each voxel of `class` with probability `prob` to another class
/// of the same role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassFlip {
    pub class: String,
    pub prob: f64,
}

/// From `frame` on, `track` is predicted under a new id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdSwitch {
    pub track: u32,
    pub frame: u64,
}

/// `track` is missing from the prediction over frames `from..=to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropEvent {
    pub track: u32,
    pub from: u64,
    pub to: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreModel {
    pub mean: f64,
    pub sigma: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        Self { mean: 0.8, sigma: 0.1 }
    }
}

/// Fixed score for one gt track in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreOverride {
    pub track: u32,
    pub frame: u64,
    pub score: f64,
}

/// Corruption applied to a gt sequence, in the order: class flips, erosion,
/// dilation, id switches, drops, per-frame fresh ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub seed: u64,
    pub flips: Vec<ClassFlip>,
    /// Erosion steps in voxels, applied to every thing instance.
    pub erode: u32,
    /// Dilation steps in voxels, growing instances into free space.
    pub dilate: u32,
    pub id_switches: Vec<IdSwitch>,
    pub drops: Vec<DropEvent>,
    /// Give every instance of every frame a never-seen id.
    pub fresh_ids_per_frame: bool,
    pub score: ScoreModel,
    pub score_overrides: Vec<ScoreOverride>,
}

impl NoiseSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("noise spec serializes")
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidNoise(m));
        for f in &self.flips {
            if !(0.0..=1.0).contains(&f.prob) {
                return bad(format!("flip probability {} for `{}` outside [0, 1]", f.prob, f.class));
            }
        }
        for d in &self.drops {
            if d.from > d.to {
                return bad(format!("drop of track {}: from {} > to {}", d.track, d.from, d.to));
            }
        }
        if !(self.score.mean.is_finite() && self.score.sigma.is_finite() && self.score.sigma >= 0.0) {
            return bad("score model needs finite mean and sigma >= 0".into());
        }
        for o in &self.score_overrides {
            if !(0.0..=1.0).contains(&o.score) {
                return bad(format!("score override {} outside [0, 1]", o.score));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSequence {
    pub grids: Vec<PanopticGrid>,
    /// One record per thing instance and per stuff class present, per frame.
    pub scores: Vec<ScoreRecord>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn neighbors(grid: &PanopticGrid, v: usize) -> impl Iterator<Item = usize> + '_ {
    let spec = grid.spec();
    let dims = spec.dims();
    let idx = spec.unravel(v);
    (0..3).flat_map(move |a| {
        [-1i64, 1].into_iter().filter_map(move |d| {
            let x = idx[a] as i64 + d;
            if x < 0 || x >= dims[a] as i64 {
                return None;
            }
            let mut n = idx;
            n[a] = x as usize;
            Some(spec.linear_index(n))
        })
    })
}

fn erode_once(grid: &mut PanopticGrid, free: u16) {
    let snapshot = grid.clone();
    let (classes, ids) = grid.labels_mut();
    for v in 0..ids.len() {
        let id = snapshot.instances()[v];
        if id == NO_INSTANCE {
            continue;
        }
        if neighbors(&snapshot, v).any(|n| snapshot.instances()[n] != id) {
            classes[v] = free;
            ids[v] = NO_INSTANCE;
        }
    }
}

fn dilate_once(grid: &mut PanopticGrid, free: u16) {
    let snapshot = grid.clone();
    let (classes, ids) = grid.labels_mut();
    for v in 0..ids.len() {
        if snapshot.classes()[v] != free {
            continue;
        }
        let best = neighbors(&snapshot, v)
            .filter(|&n| snapshot.instances()[n] != NO_INSTANCE)
            .min_by_key(|&n| snapshot.instances()[n]);
        if let Some(n) = best {
            classes[v] = snapshot.classes()[n];
            ids[v] = snapshot.instances()[n];
        }
    }
}

/// Applies `noise` to a gt sequence and samples proposal scores.
pub fn corrupt(gt: &[PanopticGrid], noise: &NoiseSpec, table: &ClassTable) -> Result<CorruptedSequence, SynthError> {
    noise.validate()?;
    let free = table.free_id();

    let mut flip: HashMap<u16, (f64, Vec<u16>)> = HashMap::new();
    for f in &noise.flips {
        let c = resolve_class(table, &f.class)?;
        let role = table.role(c).expect("resolved class");
        let targets: Vec<u16> = table.ids_with_role(role).filter(|&o| o != c).collect();
        flip.insert(c, (f.prob, targets));
    }

    let known: BTreeSet<u32> = gt.iter().flat_map(|g| g.instance_ids()).collect();
    let events = noise
        .id_switches
        .iter()
        .map(|s| s.track)
        .chain(noise.drops.iter().map(|d| d.track))
        .chain(noise.score_overrides.iter().map(|o| o.track));
    for track in events {
        if !known.contains(&track) {
            return Err(SynthError::UnknownTrack(track));
        }
    }

    // New ids start above every gt id and are never reused.
    let mut next_id = known.last().copied().unwrap_or(0) + 1;
    let mut switches: Vec<&IdSwitch> = noise.id_switches.iter().collect();
    switches.sort_by_key(|s| (s.frame, s.track));
    let mut switch_ids: BTreeMap<u32, Vec<(u64, u32)>> = BTreeMap::new();
    for s in switches {
        switch_ids.entry(s.track).or_default().push((s.frame, next_id));
        next_id += 1;
    }
    let overrides: HashMap<(u32, u64), f64> = noise.score_overrides.iter().map(|o| ((o.track, o.frame), o.score)).collect();
    let normal = Normal::new(noise.score.mean, noise.score.sigma).expect("validated sigma");

    let mut grids = Vec::with_capacity(gt.len());
    let mut scores = Vec::new();
    for g in gt {
        let frame = g.frame_index();
        let mut out = g.clone();

        if !flip.is_empty() {
            let mut rng = rng_for(noise.seed, 2 * frame);
            let (classes, _) = out.labels_mut();
            for c in classes.iter_mut() {
                if let Some((p, targets)) = flip.get(c) {
                    if *p > 0.0 && rng.random::<f64>() < *p && !targets.is_empty() {
                        *c = targets[rng.random_range(0..targets.len())];
                    }
                }
            }
        }
        for _ in 0..noise.erode {
            erode_once(&mut out, free);
        }
        for _ in 0..noise.dilate {
            dilate_once(&mut out, free);
        }

        // output id -> source gt track
        let mut source: HashMap<u32, u32> = HashMap::new();
        {
            let dropped: BTreeSet<u32> = noise
                .drops
                .iter()
                .filter(|d| (d.from..=d.to).contains(&frame))
                .map(|d| d.track)
                .collect();
            let (classes, ids) = out.labels_mut();
            for (c, id) in classes.iter_mut().zip(ids.iter_mut()) {
                if *id == NO_INSTANCE {
                    continue;
                }
                let src = *id;
                if let Some(list) = switch_ids.get(&src) {
                    if let Some(&(_, new)) = list.iter().rev().find(|(f, _)| *f <= frame) {
                        *id = new;
                    }
                }
                if dropped.contains(&src) {
                    *c = free;
                    *id = NO_INSTANCE;
                } else {
                    source.insert(*id, src);
                }
            }
        }
        if noise.fresh_ids_per_frame {
            let present = out.instance_ids();
            let map: HashMap<u32, u32> = present
                .iter()
                .enumerate()
                .map(|(k, &id)| (id, next_id + k as u32))
                .collect();
            next_id += present.len() as u32;
            source = source.into_iter().map(|(id, src)| (map[&id], src)).collect();
            out = out.map_instances(|id| map[&id]);
        }

        let mut rng = rng_for(noise.seed, 2 * frame + 1);
        let sample = |rng: &mut ChaCha8Rng| normal.sample(rng).clamp(0.0, 1.0);
        for (id, class_id) in instance_classes(&out) {
            let s = sample(&mut rng);
            let score = overrides.get(&(source[&id], frame)).copied().unwrap_or(s);
            scores.push(ScoreRecord {
                frame_index: frame,
                instance_id: id,
                class_id,
                score,
            });
        }
        let stuff: BTreeSet<u16> = out.classes().iter().copied().filter(|&c| c != free && !table.is_thing(c)).collect();
        for class_id in stuff {
            scores.push(ScoreRecord {
                frame_index: frame,
                instance_id: NO_INSTANCE,
                class_id,
                score: sample(&mut rng),
            });
        }
        grids.push(out);
    }
    Ok(CorruptedSequence { grids, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{EvalOptions, MetricAccumulator};
    use crate::voxel::{GridSpec, Pose};

    fn table() -> ClassTable {
        ClassTable::occ3d_waymo()
    }

    /// Two 4-voxel tracks over `frames` frames plus a road strip.
    fn sequence(frames: u64) -> Vec<PanopticGrid> {
        let spec = GridSpec::new([12, 3, 1], [1.0; 3], [0.0; 3]).unwrap();
        (0..frames)
            .map(|f| {
                let n = spec.num_voxels();
                let (mut classes, mut ids) = (vec![15u16; n], vec![0u32; n]);
                for x in 0..12 {
                    classes[spec.linear_index([x, 2, 0])] = 13;
                }
                for x in 1..5 {
                    let v = spec.linear_index([x, 1, 0]);
                    classes[v] = 1;
                    ids[v] = 1;
                    let v = spec.linear_index([x + 6, 1, 0]);
                    classes[v] = 2;
                    ids[v] = 2;
                }
                PanopticGrid::new(spec.clone(), classes, ids, None, f, Pose::identity(), &table()).unwrap()
            })
            .collect()
    }

    fn occ_aq(gt: &[PanopticGrid], pred: &[PanopticGrid]) -> f64 {
        let mut acc = MetricAccumulator::new(table(), EvalOptions::default());
        for (g, p) in gt.iter().zip(pred) {
            acc.ingest_frame(g, p).unwrap();
        }
        acc.finalize().unwrap().summary.occ_aq
    }

    #[test]
    fn empty_noise_is_identity() {
        let gt = sequence(4);
        let out = corrupt(&gt, &NoiseSpec::default(), &table()).unwrap();
        assert_eq!(out.grids, gt);
        // two instances and one stuff class per frame
        assert_eq!(out.scores.len(), 12);
        assert!(out.scores.iter().all(|s| (0.0..=1.0).contains(&s.score)));
    }

    #[test]
    fn midpoint_switch_halves_aq() {
        let gt = sequence(6);
        let noise = NoiseSpec {
            id_switches: vec![IdSwitch { track: 1, frame: 3 }, IdSwitch { track: 2, frame: 3 }],
            ..Default::default()
        };
        let out = corrupt(&gt, &noise, &table()).unwrap();
        assert_eq!(out.grids[3].instance_ids(), vec![3, 4]);
        assert!((occ_aq(&gt, &out.grids) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dropping_one_track_halves_aq() {
        let gt = sequence(5);
        let noise = NoiseSpec {
            drops: vec![DropEvent { track: 2, from: 0, to: 4 }],
            ..Default::default()
        };
        let out = corrupt(&gt, &noise, &table()).unwrap();
        assert!((occ_aq(&gt, &out.grids) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_track_is_rejected() {
        let noise = NoiseSpec {
            drops: vec![DropEvent { track: 9, from: 0, to: 1 }],
            ..Default::default()
        };
        assert!(matches!(corrupt(&sequence(2), &noise, &table()), Err(SynthError::UnknownTrack(9))));
    }

    #[test]
    fn fresh_ids_never_repeat() {
        let gt = sequence(4);
        let noise = NoiseSpec {
            fresh_ids_per_frame: true,
            ..Default::default()
        };
        let out = corrupt(&gt, &noise, &table()).unwrap();
        let all: Vec<u32> = out.grids.iter().flat_map(|g| g.instance_ids()).collect();
        let distinct: BTreeSet<u32> = all.iter().copied().collect();
        assert_eq!(all.len(), 8);
        assert_eq!(distinct.len(), 8);
        assert!(occ_aq(&gt, &out.grids) < 0.5);
    }

    #[test]
    fn flips_keep_role_and_ids() {
        let gt = sequence(3);
        let noise = NoiseSpec {
            seed: 3,
            flips: vec![
                ClassFlip {
                    class: "vehicle".into(),
                    prob: 1.0,
                },
                ClassFlip {
                    class: "road".into(),
                    prob: 0.5,
                },
            ],
            ..Default::default()
        };
        let out = corrupt(&gt, &noise, &table()).unwrap();
        for (g, o) in gt.iter().zip(&out.grids) {
            assert_eq!(g.instances(), o.instances());
            for v in 0..g.num_voxels() {
                assert_eq!(table().role(g.classes()[v]), table().role(o.classes()[v]));
                if g.classes()[v] == 1 {
                    assert_ne!(o.classes()[v], 1);
                }
            }
        }
        assert_eq!(occ_aq(&gt, &out.grids), 1.0);
        assert_eq!(corrupt(&gt, &noise, &table()).unwrap(), out);
    }

    #[test]
    fn morphology() {
        let gt = sequence(1);
        let eroded = corrupt(&gt, &NoiseSpec { erode: 1, ..Default::default() }, &table()).unwrap();
        // 4x1 strips touch free space everywhere
        assert!(eroded.grids[0].instance_ids().is_empty());
        let dilated = corrupt(&gt, &NoiseSpec { dilate: 1, ..Default::default() }, &table()).unwrap();
        let count = |g: &PanopticGrid, id| g.instances().iter().filter(|&&i| i == id).count();
        // 4 voxels + 2 ends + 4 below (above is road)
        assert_eq!(count(&dilated.grids[0], 1), 10);
    }

    #[test]
    fn score_overrides_follow_source_track() {
        let gt = sequence(4);
        let noise = NoiseSpec {
            id_switches: vec![IdSwitch { track: 1, frame: 2 }],
            score_overrides: vec![ScoreOverride {
                track: 1,
                frame: 3,
                score: 0.05,
            }],
            ..Default::default()
        };
        let out = corrupt(&gt, &noise, &table()).unwrap();
        let r = out.scores.iter().find(|s| s.frame_index == 3 && s.instance_id == 3).unwrap();
        assert_eq!(r.score, 0.05);
    }
}
