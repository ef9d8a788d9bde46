//! Procedural cuboid rooms with axis-aligned furniture, ray-cast to exact
//! depth and labels.

use super::{classes, Sample};
use crate::error::{arg_err, Result};
use crate::geometry::RayGrid;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Axis-aligned box in world coordinates (metres).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u8,
    pub color: [u8; 3],
}

impl SceneBox {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Slab-method entry distance along `dir` from `origin`, if hit in front.
    fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut lo, mut hi) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    /// Distance from `p` to the box surface (inside or outside).
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        if self.contains(p) {
            (0..3)
                .map(|a| (p[a] - self.min[a]).min(self.max[a] - p[a]))
                .fold(f64::INFINITY, f64::min)
        } else {
            (0..3)
                .map(|a| (self.min[a] - p[a]).max(0.0).max(p[a] - self.max[a]))
                .map(|d| d * d)
                .sum::<f64>()
                .sqrt()
        }
    }
}

/// Room `[0, size]³`, a camera inside it, and furniture boxes.
///
/// The camera frame is the world frame translated to the camera; there is no
/// rotation, so z is up and longitude 0 looks along +x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: [f64; 3],
    pub camera: [f64; 3],
    pub boxes: Vec<SceneBox>,
    pub wall_color: [u8; 3],
    pub floor_color: [u8; 3],
    pub ceiling_color: [u8; 3],
}

pub const DEFAULT_COLORS: [[u8; 3]; classes::NUM_CLASSES] = [
    [0, 0, 0],
    [230, 230, 210],
    [150, 100, 60],
    [90, 140, 200],
    [220, 60, 60],
    [60, 180, 80],
    [200, 170, 40],
];

impl SceneSpec {
    /// Empty room with the default palette.
    pub fn empty_room(room: [f64; 3], camera: [f64; 3]) -> Self {
        Self {
            room,
            camera,
            boxes: Vec::new(),
            wall_color: DEFAULT_COLORS[classes::WALL as usize],
            floor_color: DEFAULT_COLORS[classes::FLOOR as usize],
            ceiling_color: DEFAULT_COLORS[classes::CEILING as usize],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.room.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(arg_err("scene", format!("room extents must be positive, got {:?}", self.room)));
        }
        if !(0..3).all(|a| self.camera[a] > 0.0 && self.camera[a] < self.room[a]) {
            return Err(arg_err("scene", format!("camera {:?} not strictly inside room {:?}", self.camera, self.room)));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !(0..3).all(|a| b.min[a] >= 0.0 && b.max[a] <= self.room[a] && b.min[a] < b.max[a]) {
                return Err(arg_err("scene", format!("box {i} not inside the room")));
            }
            if b.contains(self.camera) {
                return Err(arg_err("scene", format!("camera inside box {i}")));
            }
        }
        Ok(())
    }

    /// Random furnished room: 3 to 6 m sides, camera 1.0 to 1.6 m high and
    /// at least 0.8 m from the walls, up to four chairs, two tables and a
    /// column, none covering the camera.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let room = [rng.gen_range(3.0..6.0), rng.gen_range(3.0..6.0), rng.gen_range(2.4..3.0)];
        let camera = [
            rng.gen_range(0.8..room[0] - 0.8),
            rng.gen_range(0.8..room[1] - 0.8),
            rng.gen_range(1.0..1.6),
        ];
        let mut jitter = |c: [u8; 3]| c.map(|v| (v as i32 + rng.gen_range(-20..=20)).clamp(0, 255) as u8);
        let mut spec = Self {
            room,
            camera,
            boxes: Vec::new(),
            wall_color: jitter(DEFAULT_COLORS[classes::WALL as usize]),
            floor_color: jitter(DEFAULT_COLORS[classes::FLOOR as usize]),
            ceiling_color: jitter(DEFAULT_COLORS[classes::CEILING as usize]),
        };
        let kinds = [
            (classes::CHAIR, rng.gen_range(0..=4)),
            (classes::TABLE, rng.gen_range(0..=2)),
            (classes::COLUMN, rng.gen_range(0..=1)),
        ];
        for (class, count) in kinds {
            for _ in 0..count {
                let (sx, sy, sz) = match class {
                    classes::CHAIR => (rng.gen_range(0.4..0.55), rng.gen_range(0.4..0.55), rng.gen_range(0.8..1.0)),
                    classes::TABLE => (rng.gen_range(0.8..1.6), rng.gen_range(0.6..1.0), rng.gen_range(0.7..0.8)),
                    _ => (rng.gen_range(0.3..0.5), rng.gen_range(0.3..0.5), room[2]),
                };
                // a few attempts to keep a 0.3 m gap around the camera
                for _ in 0..20 {
                    let x = rng.gen_range(0.0..room[0] - sx);
                    let y = rng.gen_range(0.0..room[1] - sy);
                    let clear = camera[0] < x - 0.3 || camera[0] > x + sx + 0.3 || camera[1] < y - 0.3 || camera[1] > y + sy + 0.3;
                    if clear {
                        let color = DEFAULT_COLORS[class as usize]
                            .map(|v| (v as i32 + rng.gen_range(-20..=20)).clamp(0, 255) as u8);
                        spec.boxes.push(SceneBox {
                            min: [x, y, 0.0],
                            max: [x + sx, y + sy, sz],
                            class,
                            color,
                        });
                        break;
                    }
                }
            }
        }
        spec
    }

    /// Distance from a camera-frame point to the nearest scene surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        let w = [p[0] + self.camera[0], p[1] + self.camera[1], p[2] + self.camera[2]];
        let room = (0..3)
            .map(|a| w[a].abs().min((self.room[a] - w[a]).abs()))
            .fold(f64::INFINITY, f64::min);
        self.boxes.iter().map(|b| b.surface_distance(w)).fold(room, f64::min)
    }

    /// Nearest hit along a unit camera-frame ray: (distance, class, colour).
    pub fn cast(&self, dir: [f64; 3]) -> (f64, u8, [u8; 3]) {
        let mut best = (f64::INFINITY, classes::UNKNOWN, [0u8; 3]);
        for a in 0..3 {
            if dir[a] == 0.0 {
                continue;
            }
            let plane = if dir[a] > 0.0 { self.room[a] } else { 0.0 };
            let t = (plane - self.camera[a]) / dir[a];
            if t < best.0 {
                best = match (a, dir[a] > 0.0) {
                    (2, true) => (t, classes::CEILING, self.ceiling_color),
                    (2, false) => (t, classes::FLOOR, self.floor_color),
                    _ => (t, classes::WALL, self.wall_color),
                };
            }
        }
        for b in &self.boxes {
            if let Some(t) = b.intersect(self.camera, dir) {
                if t < best.0 {
                    best = (t, b.class, b.color);
                }
            }
        }
        best
    }
}

fn shade(color: [u8; 3], distance: f64) -> [u8; 3] {
    let f = 1.0 / (1.0 + 0.12 * distance);
    color.map(|c| (c as f64 * f).round() as u8)
}

/// Ray-cast every pixel: Euclidean hit distance, hit class, shaded colour.
pub fn render_scene(spec: &SceneSpec, id: &str, height: usize, width: usize) -> Result<Sample> {
    spec.validate()?;
    if height == 0 || width != 2 * height {
        return Err(arg_err("render_scene", format!("extent must be H x 2H, got {height}x{width}")));
    }
    let rays = RayGrid::new(height, width);
    let n = height * width;
    let mut sample = Sample {
        id: id.to_string(),
        height,
        width,
        rgb: Vec::with_capacity(3 * n),
        depth: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    for &dir in rays.rays() {
        let (t, class, color) = spec.cast(dir);
        sample.depth.push(t);
        sample.labels.push(class);
        sample.rgb.extend(shade(color, t));
    }
    Ok(sample)
}
