//! Score-driven query lifecycle.
//!
//! Emerging proposals of thing classes spawn a track when their score is
//! strictly above the entrance threshold; stuff proposals are always
//! discarded. A tracked proposal scoring strictly below the exit threshold
//! raises the track's low-score counter, which terminates the track when it
//! reaches the patience limit. Any other score resets the counter.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::voxel::ClassTable;

use super::TrackerError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifecycleParams {
    pub tau_enter: f64,
    pub tau_exit: f64,
    pub patience: u32,
}

impl Default for LifecycleParams {
    fn default() -> Self {
        Self {
            tau_enter: 0.3,
            tau_exit: 0.25,
            patience: 3,
        }
    }
}

impl LifecycleParams {
    pub fn validate(&self) -> Result<(), TrackerError> {
        for (name, v) in [("tau_enter", self.tau_enter), ("tau_exit", self.tau_exit)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrackerError::InvalidConfig(format!("lifecycle.{name} must lie in [0, 1]")));
            }
        }
        if self.patience == 0 {
            return Err(TrackerError::InvalidConfig("lifecycle.patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Emerging,
    Tracked(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub frame_index: u64,
    /// Instance id of the proposal's mask in the frame's grid; 0 for stuff.
    pub instance_id: u32,
    pub class_id: u16,
    pub score: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Spawn(u32),
    Keep(u32),
    Terminate(u32),
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTrack {
    pub class_id: u16,
    pub low_score_count: u32,
    pub last_frame: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifecycleState {
    pub params: LifecycleParams,
    active: BTreeMap<u32, ActiveTrack>,
    next_id: u32,
}

/// Decisions for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LifecycleStep {
    /// One decision per input proposal, in input order.
    pub decisions: Vec<Decision>,
    /// Active tracks with no proposal this frame that reached the patience
    /// limit; a missing proposal counts as a low score.
    pub expired: Vec<u32>,
}

impl LifecycleState {
    pub fn new(params: LifecycleParams) -> Result<Self, TrackerError> {
        params.validate()?;
        Ok(Self {
            params,
            active: BTreeMap::new(),
            next_id: 1,
        })
    }

    pub fn active(&self) -> &BTreeMap<u32, ActiveTrack> {
        &self.active
    }

    pub fn tracks_created(&self) -> u64 {
        u64::from(self.next_id - 1)
    }

    fn low_score(&mut self, id: u32, frame: u64) -> bool {
        let t = self.active.get_mut(&id).expect("active track");
        t.low_score_count += 1;
        t.last_frame = frame;
        if t.low_score_count >= self.params.patience {
            self.active.remove(&id);
            true
        } else {
            false
        }
    }
}

/// Applies the rules to every proposal of frame `frame`.
pub fn lifecycle_step(
    state: &mut LifecycleState,
    frame: u64,
    proposals: &[Proposal],
    table: &ClassTable,
) -> Result<LifecycleStep, TrackerError> {
    let mut seen = BTreeSet::new();
    for p in proposals {
        if p.frame_index != frame {
            return Err(TrackerError::InvalidProposal(format!("proposal for frame {} in frame {frame}", p.frame_index)));
        }
        if !(0.0..=1.0).contains(&p.score) {
            return Err(TrackerError::InvalidProposal(format!("score {} outside [0, 1]", p.score)));
        }
        if !table.contains(p.class_id) {
            return Err(TrackerError::InvalidProposal(format!("class {} is not in the class table", p.class_id)));
        }
        if let Origin::Tracked(id) = p.origin {
            if !state.active.contains_key(&id) {
                return Err(TrackerError::UnknownTrackId(id));
            }
            if !seen.insert(id) {
                return Err(TrackerError::InvalidProposal(format!("track {id} proposed twice")));
            }
        }
    }

    let params = state.params;
    let mut decisions = Vec::with_capacity(proposals.len());
    for p in proposals {
        let d = match p.origin {
            Origin::Emerging if table.is_thing(p.class_id) && p.score > params.tau_enter => {
                let id = state.next_id;
                state.next_id += 1;
                state.active.insert(
                    id,
                    ActiveTrack {
                        class_id: p.class_id,
                        low_score_count: 0,
                        last_frame: p.frame_index,
                    },
                );
                Decision::Spawn(id)
            }
            Origin::Emerging => Decision::Discard,
            Origin::Tracked(id) if p.score < params.tau_exit => {
                if state.low_score(id, p.frame_index) {
                    Decision::Terminate(id)
                } else {
                    Decision::Keep(id)
                }
            }
            Origin::Tracked(id) => {
                let t = state.active.get_mut(&id).expect("checked above");
                t.low_score_count = 0;
                t.last_frame = p.frame_index;
                Decision::Keep(id)
            }
        };
        decisions.push(d);
    }

    let mut expired = Vec::new();
    let absent: Vec<u32> = state
        .active
        .iter()
        .filter(|(id, t)| !seen.contains(id) && t.last_frame < frame)
        .map(|(&id, _)| id)
        .collect();
    for id in absent {
        if state.low_score(id, frame) {
            expired.push(id);
        }
    }
    Ok(LifecycleStep { decisions, expired })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ClassTable {
        ClassTable::occ3d_waymo()
    }

    fn p(frame: u64, class_id: u16, score: f64, origin: Origin) -> Proposal {
        Proposal {
            frame_index: frame,
            instance_id: 1,
            class_id,
            score,
            origin,
        }
    }

    fn state() -> LifecycleState {
        LifecycleState::new(LifecycleParams::default()).unwrap()
    }

    #[test]
    fn entrance_is_strict() {
        let mut s = state();
        let r = lifecycle_step(&mut s, 0, &[p(0, 1, 0.31, Origin::Emerging), p(0, 1, 0.30, Origin::Emerging)], &table()).unwrap();
        assert_eq!(r.decisions, vec![Decision::Spawn(1), Decision::Discard]);
    }

    #[test]
    fn stuff_is_discarded() {
        let mut s = state();
        let r = lifecycle_step(&mut s, 0, &[p(0, 13, 0.9, Origin::Emerging)], &table()).unwrap();
        assert_eq!(r.decisions, vec![Decision::Discard]);
        assert!(s.active().is_empty());
    }

    fn trace(scores: &[f64]) -> Vec<Decision> {
        let mut s = state();
        lifecycle_step(&mut s, 0, &[p(0, 1, 0.9, Origin::Emerging)], &table()).unwrap();
        scores
            .iter()
            .enumerate()
            .map(|(f, &sc)| lifecycle_step(&mut s, f as u64 + 1, &[p(f as u64 + 1, 1, sc, Origin::Tracked(1))], &table()).unwrap().decisions[0])
            .collect()
    }

    #[test]
    fn exit_after_patience() {
        use Decision::*;
        assert_eq!(trace(&[0.2, 0.2, 0.2]), vec![Keep(1), Keep(1), Terminate(1)]);
        assert_eq!(trace(&[0.2, 0.26, 0.2]), vec![Keep(1), Keep(1), Keep(1)]);
        assert_eq!(trace(&[0.2, 0.25, 0.2, 0.2]), vec![Keep(1); 4]);
    }

    #[test]
    fn unknown_and_terminated_tracks_are_rejected() {
        let mut s = state();
        assert_eq!(
            lifecycle_step(&mut s, 0, &[p(0, 1, 0.9, Origin::Tracked(4))], &table()),
            Err(TrackerError::UnknownTrackId(4))
        );
        lifecycle_step(&mut s, 0, &[p(0, 1, 0.9, Origin::Emerging)], &table()).unwrap();
        for f in 1..4 {
            lifecycle_step(&mut s, f, &[p(f, 1, 0.1, Origin::Tracked(1))], &table()).unwrap();
        }
        assert_eq!(
            lifecycle_step(&mut s, 4, &[p(4, 1, 0.9, Origin::Tracked(1))], &table()),
            Err(TrackerError::UnknownTrackId(1))
        );
        // ids are never reused
        let r = lifecycle_step(&mut s, 5, &[p(5, 1, 0.9, Origin::Emerging)], &table()).unwrap();
        assert_eq!(r.decisions, vec![Decision::Spawn(2)]);
    }

    #[test]
    fn absent_track_counts_as_low_score() {
        let mut s = state();
        lifecycle_step(&mut s, 0, &[p(0, 1, 0.9, Origin::Emerging)], &table()).unwrap();
        let mut expired = Vec::new();
        for f in 1..4 {
            expired.push(lifecycle_step(&mut s, f, &[p(f, 13, 0.5, Origin::Emerging)], &table()).unwrap().expired);
        }
        assert_eq!(expired, vec![vec![], vec![], vec![1]]);
    }

    #[test]
    fn deterministic() {
        let props = [p(0, 1, 0.5, Origin::Emerging), p(0, 2, 0.7, Origin::Emerging), p(0, 13, 0.8, Origin::Emerging)];
        let (mut a, mut b) = (state(), state());
        assert_eq!(lifecycle_step(&mut a, 0, &props, &table()), lifecycle_step(&mut b, 0, &props, &table()));
        assert_eq!(a, b);
    }
}
