use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::voxel::GridSpec;

use super::{Actor, EgoMotion, Ground, Scenario, Waypoint};

/// Shape of scenarios produced by [`random_scenario`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomScenarioParams {
    /// At most five; each actor gets its own lane.
    pub actors: usize,
    pub frames: u64,
    /// Largest ego speed along +x, meters per frame.
    pub max_ego_speed: f64,
    /// Largest actor speed relative to the ego, meters per frame.
    pub max_relative_speed: f64,
}

impl Default for RandomScenarioParams {
    fn default() -> Self {
        Self {
            actors: 3,
            frames: 10,
            max_ego_speed: 0.2,
            max_relative_speed: 0.3,
        }
    }
}

const LANES: [f64; 5] = [-6.0, -3.0, 0.0, 3.0, 6.0];
const HALF_EXTENT: f64 = 8.0;

/// Road scene on a 40x40x8 grid of 0.4 m voxels where actors drive along
/// separate lanes parallel to x, so no two actors ever touch or cross.
pub fn random_scenario(seed: u64, params: &RandomScenarioParams) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridSpec::new([40, 40, 8], [0.4; 3], [-HALF_EXTENT, -HALF_EXTENT, -1.0]).expect("valid grid");
    let mut sc = Scenario::empty(grid, params.frames);
    sc.sequence_id = format!("random-{seed}");
    sc.seed = seed;
    sc.margin = 0.2;
    let ego_speed = rng.random_range(0.0..=params.max_ego_speed);
    sc.ego = EgoMotion::Straight {
        velocity: [ego_speed, 0.0, 0.0],
    };
    sc.ground = Some(Ground {
        class: "road".into(),
        height: -0.6,
    });

    let mut lanes = LANES.to_vec();
    lanes.shuffle(&mut rng);
    let last = params.frames.saturating_sub(1);
    let span = last as f64;
    for (k, &y) in lanes.iter().take(params.actors.min(LANES.len())).enumerate() {
        let (class, size) = match rng.random_range(0..3) {
            0 => ("vehicle", [rng.random_range(2.4..4.0), rng.random_range(1.6..2.0), rng.random_range(1.4..2.0)]),
            1 => ("pedestrian", [1.2, 1.2, 1.8]),
            _ => ("cyclist", [1.8, 1.2, 1.8]),
        };
        let v = rng.random_range(-params.max_relative_speed..=params.max_relative_speed);
        let reach = HALF_EXTENT - sc.margin - 0.3 - size[0] / 2.0;
        let lo = -reach + (-v * span).max(0.0);
        let hi = reach - (v * span).max(0.0);
        let x0 = if hi > lo { rng.random_range(lo..hi) } else { 0.0 };
        let z = -0.6 + size[2] / 2.0;
        let world = |f: f64, x: f64| [x + ego_speed * f, y, z];
        let mut waypoints = vec![Waypoint {
            frame: 0,
            center: world(0.0, x0),
            yaw: 0.0,
        }];
        if last > 0 {
            waypoints.push(Waypoint {
                frame: last,
                center: world(span, x0 + v * span),
                yaw: 0.0,
            });
        }
        sc.actors.push(Actor {
            class: class.into(),
            size,
            track_id: Some(k as u32 + 1),
            waypoints,
        });
    }
    sc
}
