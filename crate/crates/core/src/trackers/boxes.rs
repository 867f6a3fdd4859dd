use std::collections::BTreeMap;

use crate::voxel::{PanopticGrid, Point3, NO_INSTANCE};

/// World-frame axis-aligned box around one instance of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBox {
    pub id: u32,
    /// Most frequent class among the instance's voxels (smallest id on ties).
    pub class_id: u16,
    pub min: Point3,
    pub max: Point3,
    /// Mean world-frame voxel center.
    pub centroid: Point3,
    pub count: usize,
}

impl InstanceBox {
    pub fn center(&self) -> Point3 {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn size(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }
}

/// IoU of two axis-aligned boxes given as center and size.
pub fn aabb_iou(c1: Point3, s1: [f64; 3], c2: Point3, s2: [f64; 3]) -> f64 {
    let mut inter = 1.0;
    for a in 0..3 {
        let lo = (c1[a] - 0.5 * s1[a]).max(c2[a] - 0.5 * s2[a]);
        let hi = (c1[a] + 0.5 * s1[a]).min(c2[a] + 0.5 * s2[a]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let vol = |s: [f64; 3]| s[0].max(0.0) * s[1].max(0.0) * s[2].max(0.0);
    let union = vol(s1) + vol(s2) - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Default)]
struct Extent {
    min: Point3,
    max: Point3,
    sum: Point3,
    count: usize,
    classes: BTreeMap<u16, usize>,
}

/// One box per nonzero instance id, sorted by id.
///
/// Bounds cover the world-frame voxel centers, widened by half a voxel on
/// every side.
pub fn instances_to_boxes(grid: &PanopticGrid) -> Vec<InstanceBox> {
    let mut extents: BTreeMap<u32, Extent> = BTreeMap::new();
    for (v, (&class, &id)) in grid.classes().iter().zip(grid.instances()).enumerate() {
        if id == NO_INSTANCE {
            continue;
        }
        let p = grid.world_center(v);
        let e = extents.entry(id).or_insert_with(|| Extent {
            min: p,
            max: p,
            ..Default::default()
        });
        for a in 0..3 {
            e.min[a] = e.min[a].min(p[a]);
            e.max[a] = e.max[a].max(p[a]);
            e.sum[a] += p[a];
        }
        e.count += 1;
        *e.classes.entry(class).or_default() += 1;
    }
    let half = grid.spec().voxel_size().map(|s| 0.5 * s);
    extents
        .into_iter()
        .map(|(id, e)| {
            let class_id = e
                .classes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&c, _)| c)
                .expect("extent has at least one voxel");
            InstanceBox {
                id,
                class_id,
                min: [0, 1, 2].map(|a| e.min[a] - half[a]),
                max: [0, 1, 2].map(|a| e.max[a] + half[a]),
                centroid: e.sum.map(|s| s / e.count as f64),
                count: e.count,
            }
        })
        .collect()
}
