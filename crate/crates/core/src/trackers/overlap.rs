use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::assignment::{max_weight_matching, WeightMatrix};
use crate::voxel::{warp_instances, ClassTable, PanopticGrid, NO_INSTANCE};

use super::TrackerError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlapParams {
    /// Pairs need IoU strictly above this to be linked.
    pub min_iou: f64,
}

impl Default for OverlapParams {
    fn default() -> Self {
        Self { min_iou: 0.1 }
    }
}

/// One frame of history for overlap association.
#[derive(Debug, Clone)]
pub struct OverlapState {
    pub params: OverlapParams,
    prev: Option<PanopticGrid>,
    next_id: u32,
    pub births: u64,
    pub deaths: u64,
}

impl OverlapState {
    pub fn new(params: OverlapParams) -> Self {
        Self {
            params,
            prev: None,
            next_id: 1,
            births: 0,
            deaths: 0,
        }
    }

    /// Number of ids handed out so far.
    pub fn tracks_created(&self) -> u64 {
        u64::from(self.next_id - 1)
    }

    /// Relabeled previous frame, if any.
    pub fn previous(&self) -> Option<&PanopticGrid> {
        self.prev.as_ref()
    }

    fn fresh(&mut self) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        self.births += 1;
        id
    }
}

fn areas(ids: &[u32]) -> BTreeMap<u32, u64> {
    let mut out = BTreeMap::new();
    for &id in ids.iter().filter(|&&i| i != NO_INSTANCE) {
        *out.entry(id).or_default() += 1;
    }
    out
}

/// Relabels `curr` so that instances overlapping a track of the previous
/// frame inherit its id. Classes and masks are left untouched.
pub fn overlap_associate(state: &mut OverlapState, curr: &PanopticGrid, table: &ClassTable) -> Result<PanopticGrid, TrackerError> {
    let curr_area = areas(curr.instances());
    let curr_ids: Vec<u32> = curr_area.keys().copied().collect();
    let mut map: HashMap<u32, u32> = HashMap::with_capacity(curr_ids.len());

    if let Some(prev) = state.prev.take() {
        if prev.spec() != curr.spec() {
            return Err(TrackerError::SpecMismatch);
        }
        let warped = warp_instances(&prev, curr.ego_pose(), curr.spec(), table)?;
        let prev_area = areas(warped.instances());
        let prev_ids: Vec<u32> = areas(prev.instances()).keys().copied().collect();
        let col: HashMap<u32, usize> = prev_ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        let row: HashMap<u32, usize> = curr_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();

        let mut inter: HashMap<(usize, usize), u64> = HashMap::new();
        for (&c, &p) in curr.instances().iter().zip(warped.instances()) {
            if c != NO_INSTANCE && p != NO_INSTANCE {
                *inter.entry((row[&c], col[&p])).or_default() += 1;
            }
        }
        let mut iou = WeightMatrix::zeros(curr_ids.len(), prev_ids.len());
        for (&(r, c), &n) in &inter {
            let union = curr_area[&curr_ids[r]] + prev_area[&prev_ids[c]] - n;
            iou.set(r, c, n as f64 / union as f64);
        }
        let pairs = max_weight_matching(&iou, state.params.min_iou)?;
        for &(r, c) in &pairs {
            map.insert(curr_ids[r], prev_ids[c]);
        }
        state.deaths += (prev_ids.len() - pairs.len()) as u64;
    }

    for &id in &curr_ids {
        map.entry(id).or_insert_with(|| state.fresh());
    }
    let out = curr.map_instances(|id| map[&id]);
    state.prev = Some(out.clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{GridSpec, Pose};

    fn table() -> ClassTable {
        ClassTable::occ3d_waymo()
    }

    /// 1-D strip of voxels; each block is (start, len, id).
    fn strip(n: usize, frame: u64, blocks: &[(usize, usize, u32)], pose: Pose) -> PanopticGrid {
        let spec = GridSpec::new([n, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let mut classes = vec![15u16; n];
        let mut ids = vec![0u32; n];
        for &(s, len, id) in blocks {
            for v in s..s + len {
                classes[v] = 1;
                ids[v] = id;
            }
        }
        PanopticGrid::new(spec, classes, ids, None, frame, pose, &table()).unwrap()
    }

    #[test]
    fn static_scene_is_a_fixpoint() {
        let mut st = OverlapState::new(OverlapParams::default());
        for f in 0..5 {
            let g = strip(20, f, &[(1, 3, 40), (10, 4, 50)], Pose::identity());
            let out = overlap_associate(&mut st, &g, &table()).unwrap();
            assert_eq!(out.instance_ids(), vec![1, 2]);
        }
        assert_eq!((st.births, st.deaths), (2, 0));
    }

    #[test]
    fn moving_block_keeps_its_id() {
        let mut st = OverlapState::new(OverlapParams::default());
        for f in 0..10u64 {
            // fresh input id each frame, shifted one voxel per frame
            let g = strip(30, f, &[(f as usize, 10, 100 + f as u32)], Pose::identity());
            let out = overlap_associate(&mut st, &g, &table()).unwrap();
            assert_eq!(out.instance_ids(), vec![1]);
            assert_eq!(out.classes(), g.classes());
        }
        assert_eq!(st.tracks_created(), 1);
    }

    #[test]
    fn ego_motion_is_compensated() {
        // object static in the world, ego moves +1 m per frame
        let mut st = OverlapState::new(OverlapParams::default());
        for f in 0..5u64 {
            let pose = Pose::from_yaw_translation(0.0, [f as f64, 0.0, 0.0]);
            let g = strip(20, f, &[(10 - f as usize, 2, 7 + f as u32)], pose);
            let out = overlap_associate(&mut st, &g, &table()).unwrap();
            assert_eq!(out.instance_ids(), vec![1]);
        }
    }

    #[test]
    fn swap_without_overlap_gets_fresh_ids() {
        let mut st = OverlapState::new(OverlapParams::default());
        overlap_associate(&mut st, &strip(20, 0, &[(0, 3, 1), (15, 3, 2)], Pose::identity()), &table()).unwrap();
        let out = overlap_associate(&mut st, &strip(20, 1, &[(0, 3, 2), (15, 3, 1)], Pose::identity()), &table()).unwrap();
        // a swap the associator cannot see: ids are carried by position
        assert_eq!(out.instance_ids(), vec![1, 2]);
        let out = overlap_associate(&mut st, &strip(20, 2, &[(6, 3, 1), (11, 3, 2)], Pose::identity()), &table()).unwrap();
        assert_eq!(out.instance_ids(), vec![3, 4]);
        assert_eq!((st.births, st.deaths), (4, 2));
    }
}
