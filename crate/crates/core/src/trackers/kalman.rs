//! Constant-velocity Kalman tracking of axis-aligned instance boxes.
//!
//! State is `(cx, cy, cz, l, w, h, vx, vy, vz)`; measurements are the box
//! center and size.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::assignment::{max_weight_matching, WeightMatrix};

use super::boxes::{aabb_iou, InstanceBox};
use super::TrackerError;

type State = SVector<f64, 9>;
type Cov = SMatrix<f64, 9, 9>;
type Meas = SVector<f64, 6>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanParams {
    pub min_iou: f64,
    /// Matches needed before a track is confirmed.
    pub min_hits: u32,
    /// A track is dropped after this many consecutive missed frames.
    pub max_age: u32,
    /// Time step between frames, in the unit velocities are expressed in.
    pub dt: f64,
    /// Standard deviations (m, m, m per dt) for initial and process noise.
    pub sigma_position: f64,
    pub sigma_size: f64,
    pub sigma_velocity: f64,
    /// Measurement standard deviations (m).
    pub meas_position: f64,
    pub meas_size: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            min_iou: 0.01,
            min_hits: 2,
            max_age: 3,
            dt: 1.0,
            sigma_position: 0.5,
            sigma_size: 0.5,
            sigma_velocity: 1.0,
            meas_position: 0.5,
            meas_size: 0.5,
        }
    }
}

impl KalmanParams {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let positive = [
            ("dt", self.dt),
            ("sigma_position", self.sigma_position),
            ("sigma_size", self.sigma_size),
            ("sigma_velocity", self.sigma_velocity),
            ("meas_position", self.meas_position),
            ("meas_size", self.meas_size),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrackerError::InvalidConfig(format!("ab3dmot.{name} must be finite and > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.min_iou) {
            return Err(TrackerError::InvalidConfig("ab3dmot.min_iou must lie in [0, 1)".into()));
        }
        if self.max_age == 0 {
            return Err(TrackerError::InvalidConfig("ab3dmot.max_age must be >= 1".into()));
        }
        Ok(())
    }

    fn diag(&self, pos: f64, size: f64, vel: Option<f64>) -> Cov {
        let mut m = Cov::zeros();
        for i in 0..3 {
            m[(i, i)] = pos * pos;
            m[(i + 3, i + 3)] = size * size;
            if let Some(v) = vel {
                m[(i + 6, i + 6)] = v * v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrack {
    pub track_id: u32,
    pub class_id: u16,
    pub state: State,
    pub cov: Cov,
    pub hits: u32,
    /// Consecutive frames without a match.
    pub misses: u32,
    pub confirmed: bool,
}

impl KalmanTrack {
    pub fn center(&self) -> [f64; 3] {
        [self.state[0], self.state[1], self.state[2]]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.state[3].max(0.0), self.state[4].max(0.0), self.state[5].max(0.0)]
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.state[6], self.state[7], self.state[8]]
    }

    fn predict(&mut self, f: &Cov, q: &Cov) {
        self.state = f * self.state;
        self.cov = symmetric(f * self.cov * f.transpose() + q);
    }

    fn update(&mut self, z: &Meas, r: &SMatrix<f64, 6, 6>) {
        let h = SMatrix::<f64, 6, 9>::identity();
        let s = h * self.cov * h.transpose() + r;
        let s_inv = s.try_inverse().expect("innovation covariance is positive definite");
        let k = self.cov * h.transpose() * s_inv;
        self.state += k * (z - h * self.state);
        // Joseph form keeps the covariance positive semi-definite.
        let a = Cov::identity() - k * h;
        self.cov = symmetric(a * self.cov * a.transpose() + k * r * k.transpose());
    }
}

fn symmetric(m: Cov) -> Cov {
    (m + m.transpose()) * 0.5
}

fn measurement(det: &InstanceBox) -> Meas {
    let (c, s) = (det.center(), det.size());
    Meas::from_column_slice(&[c[0], c[1], c[2], s[0], s[1], s[2]])
}

/// Per-frame output of [`KalmanTracker::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanStep {
    /// Track id for each detection, in input order.
    pub assignments: Vec<u32>,
    /// Whether that track is confirmed after this frame.
    pub confirmed: Vec<bool>,
    pub births: Vec<u32>,
    pub deaths: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct KalmanTracker {
    pub params: KalmanParams,
    tracks: Vec<KalmanTrack>,
    next_id: u32,
    f: Cov,
    q: Cov,
    r: SMatrix<f64, 6, 6>,
}

impl KalmanTracker {
    pub fn new(params: KalmanParams) -> Result<Self, TrackerError> {
        params.validate()?;
        let mut f = Cov::identity();
        for i in 0..3 {
            f[(i, i + 6)] = params.dt;
        }
        let q = params.diag(params.sigma_position, params.sigma_size, Some(params.sigma_velocity));
        let r = params.diag(params.meas_position, params.meas_size, None).fixed_view::<6, 6>(0, 0).into_owned();
        Ok(Self {
            params,
            tracks: Vec::new(),
            next_id: 1,
            f,
            q,
            r,
        })
    }

    pub fn tracks(&self) -> &[KalmanTrack] {
        &self.tracks
    }

    /// Number of ids handed out so far.
    pub fn tracks_created(&self) -> u64 {
        u64::from(self.next_id - 1)
    }

    /// Predicts every track one step, associates `detections` and updates.
    pub fn step(&mut self, detections: &[InstanceBox]) -> KalmanStep {
        for t in &mut self.tracks {
            t.predict(&self.f, &self.q);
        }

        let mut iou = WeightMatrix::zeros(detections.len(), self.tracks.len());
        for (d, det) in detections.iter().enumerate() {
            let (c, s) = (det.center(), det.size());
            for (k, t) in self.tracks.iter().enumerate() {
                if t.class_id == det.class_id {
                    iou.set(d, k, aabb_iou(c, s, t.center(), t.size()));
                }
            }
        }
        let pairs = max_weight_matching(&iou, self.params.min_iou).expect("IoU values lie in [0, 1]");

        let mut assignments = vec![0u32; detections.len()];
        let mut matched = vec![false; self.tracks.len()];
        for &(d, k) in &pairs {
            let t = &mut self.tracks[k];
            t.update(&measurement(&detections[d]), &self.r);
            t.hits += 1;
            t.misses = 0;
            t.confirmed |= t.hits >= self.params.min_hits;
            matched[k] = true;
            assignments[d] = t.track_id;
        }

        let mut deaths = Vec::new();
        let mut kept = Vec::with_capacity(self.tracks.len());
        for (t, m) in std::mem::take(&mut self.tracks).into_iter().zip(matched) {
            let mut t = t;
            if !m {
                t.misses += 1;
            }
            if t.misses >= self.params.max_age {
                deaths.push(t.track_id);
            } else {
                kept.push(t);
            }
        }
        self.tracks = kept;

        let mut births = Vec::new();
        for (d, det) in detections.iter().enumerate() {
            if assignments[d] != 0 {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            let z = measurement(det);
            let mut state = State::zeros();
            state.fixed_rows_mut::<6>(0).copy_from(&z);
            self.tracks.push(KalmanTrack {
                track_id: id,
                class_id: det.class_id,
                state,
                cov: self.params.diag(self.params.sigma_position, self.params.sigma_size, Some(self.params.sigma_velocity)),
                hits: 1,
                misses: 0,
                confirmed: self.params.min_hits <= 1,
            });
            assignments[d] = id;
            births.push(id);
        }

        let confirmed = assignments
            .iter()
            .map(|id| self.tracks.iter().any(|t| t.track_id == *id && t.confirmed))
            .collect();
        KalmanStep {
            assignments,
            confirmed,
            births,
            deaths,
        }
    }
}
