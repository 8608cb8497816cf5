use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Point3, RigidTransform, Vector3};
use crate::rng;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(invalid("box extents must be positive"));
        }
        Ok(Self { min, max })
    }

    /// Entry distance along the ray, if it hits within `(t_min, t_max)`.
    #[inline]
    pub fn ray_hit(&self, o: &Point3, inv_d: &Vector3, t_min: f64, t_max: f64) -> Option<f64> {
        let mut lo = t_min;
        let mut hi = t_max;
        for a in 0..3 {
            let t1 = (self.min[a] - o[a]) * inv_d[a];
            let t2 = (self.max[a] - o[a]) * inv_d[a];
            let (near, far) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            // NaN (ray parallel to and on a slab plane) leaves the bounds unchanged
            if near > lo {
                lo = near;
            }
            if far < hi {
                hi = far;
            }
            if lo > hi {
                return None;
            }
        }
        (lo > t_min).then_some(lo)
    }

    /// Unsigned distance from `p` to the box surface.
    pub fn surface_distance(&self, p: &Point3) -> f64 {
        let outside = Vector3::new(
            (self.min.x - p.x).max(p.x - self.max.x).max(0.0),
            (self.min.y - p.y).max(p.y - self.max.y).max(0.0),
            (self.min.z - p.z).max(p.z - self.max.z).max(0.0),
        );
        if outside.norm_squared() > 0.0 {
            return outside.norm();
        }
        (0..3)
            .map(|a| (p[a] - self.min[a]).min(self.max[a] - p[a]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether the box overlaps the open rectangle `|x| < hx` x `|y| < hy`
    /// centered on the origin.
    pub fn intersects_xy_rect(&self, hx: f64, hy: f64) -> bool {
        self.min.x < hx && self.max.x > -hx && self.min.y < hy && self.max.y > -hy
    }
}

/// Box with arbitrary pose, e.g. a vehicle body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    /// Pose of the box center.
    pub pose: RigidTransform,
    pub half_extents: Vector3,
}

impl OrientedBox {
    fn local(&self) -> Aabb {
        Aabb {
            min: Point3::from(-self.half_extents),
            max: Point3::from(self.half_extents),
        }
    }

    pub fn ray_hit(&self, o: &Point3, d: &Vector3, t_min: f64, t_max: f64) -> Option<f64> {
        let inv = self.pose.inverse();
        let lo = inv.transform_point(o);
        let ld = inv.transform_vector(d);
        self.local().ray_hit(&lo, &ld.map(|v| 1.0 / v), t_min, t_max)
    }

    pub fn surface_distance(&self, p: &Point3) -> f64 {
        self.local().surface_distance(&self.pose.inverse().transform_point(p))
    }

    /// Conservative world-frame bounding box.
    pub fn bounds(&self) -> Aabb {
        let r = self.pose.rotation().abs() * self.half_extents;
        let c = self.pose.origin();
        Aabb {
            min: c - r,
            max: c + r,
        }
    }
}

/// Layout parameters of the synthetic four-way intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Half width of each road corridor (m).
    pub road_half_width: f64,
    /// Distance of the first building line from the road axis (m).
    pub building_setback: f64,
    /// Maximum distance of any building from the intersection center (m).
    pub extent: f64,
    pub buildings_per_quadrant: [usize; 2],
    pub building_height: [f64; 2],
    /// Small sidewalk obstacles (kiosks, planters, bollards).
    pub street_furniture: usize,
    pub ground_half_extent: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            road_half_width: 7.0,
            building_setback: 10.0,
            extent: 70.0,
            buildings_per_quadrant: [2, 4],
            building_height: [6.0, 25.0],
            street_furniture: 24,
            ground_half_extent: 100.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.buildings_per_quadrant;
        if lo == 0 || lo > hi || hi > 4 {
            return Err(invalid("buildings per quadrant must satisfy 1 <= min <= max <= 4"));
        }
        if !(self.road_half_width > 0.0 && self.building_setback > self.road_half_width + 1.0) {
            return Err(invalid("buildings must leave a sidewalk beside the road"));
        }
        if !(self.extent >= self.building_setback + 50.0) {
            return Err(invalid("scene extent too small for the building slots"));
        }
        if !(self.building_height[0] > 0.0 && self.building_height[0] <= self.building_height[1]) {
            return Err(invalid("invalid building height range"));
        }
        if !(self.ground_half_extent >= self.extent) {
            return Err(invalid("ground must cover the buildings"));
        }
        Ok(())
    }
}

/// Static world plus the vehicles present at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Half extent of the square ground plane at z = 0; `None` for no ground.
    pub ground: Option<f64>,
    pub buildings: Vec<Aabb>,
    pub obstacles: Vec<Aabb>,
    pub vehicles: Vec<OrientedBox>,
}

const TAG_SCENE: u64 = 0x5343_454E_45;

impl Scene {
    pub fn empty() -> Self {
        Self {
            ground: None,
            buildings: Vec::new(),
            obstacles: Vec::new(),
            vehicles: Vec::new(),
        }
    }

    /// Same static world with a different set of vehicles.
    pub fn with_vehicles(&self, vehicles: Vec<OrientedBox>) -> Scene {
        Scene {
            vehicles,
            ..self.clone()
        }
    }

    /// Nearest hit along a unit ray within `(0, max_range]`.
    pub fn cast(&self, o: &Point3, d: &Vector3, max_range: f64) -> Option<f64> {
        let mut best = max_range;
        let mut hit = false;
        if let Some(half) = self.ground {
            if d.z < 0.0 && o.z > 0.0 {
                let t = -o.z / d.z;
                if t <= best {
                    let p = o + d * t;
                    if p.x.abs() <= half && p.y.abs() <= half {
                        best = t;
                        hit = true;
                    }
                }
            }
        }
        let inv_d = d.map(|v| 1.0 / v);
        for b in self.buildings.iter().chain(&self.obstacles) {
            if let Some(t) = b.ray_hit(o, &inv_d, 0.0, best) {
                best = t;
                hit = true;
            }
        }
        for v in &self.vehicles {
            if let Some(t) = v.ray_hit(o, d, 0.0, best) {
                best = t;
                hit = true;
            }
        }
        hit.then_some(best)
    }

    /// Distance from `p` to the nearest primitive surface.
    pub fn surface_distance(&self, p: &Point3) -> f64 {
        let mut best = f64::INFINITY;
        if let Some(half) = self.ground {
            let dx = (p.x.abs() - half).max(0.0);
            let dy = (p.y.abs() - half).max(0.0);
            best = (dx * dx + dy * dy + p.z * p.z).sqrt();
        }
        for b in self.buildings.iter().chain(&self.obstacles) {
            best = best.min(b.surface_distance(p));
        }
        for v in &self.vehicles {
            best = best.min(v.surface_distance(p));
        }
        best
    }
}

fn mirrored(q: (f64, f64), u: [f64; 2], w: [f64; 2], z: [f64; 2]) -> Aabb {
    let (sx, sy) = q;
    let (x0, x1) = (sx * u[0], sx * u[1]);
    let (y0, y1) = (sy * w[0], sy * w[1]);
    Aabb {
        min: Point3::new(x0.min(x1), y0.min(y1), z[0]),
        max: Point3::new(x0.max(x1), y0.max(y1), z[1]),
    }
}

/// Four-way intersection at the origin: E-W road along `|y| <= road_half_width`,
/// N-S road along `|x| <= road_half_width`, buildings lining both corridors
/// in every quadrant, sidewalk furniture, and a ground plane. Deterministic
/// given `seed`.
pub fn build_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[TAG_SCENE]);
    let s = cfg.building_setback;
    let mut buildings = Vec::new();
    for q in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
        let n = rng.random_range(cfg.buildings_per_quadrant[0]..=cfg.buildings_per_quadrant[1]);
        // slot 0 sits on the corner; the others line one corridor each
        let mut slots = [1usize, 2, 3];
        slots.shuffle(&mut rng);
        let mut chosen = vec![0usize];
        chosen.extend_from_slice(&slots[..n - 1]);
        chosen.sort_unstable();
        for slot in chosen {
            let h = rng.random_range(cfg.building_height[0]..=cfg.building_height[1]);
            let near = |rng: &mut rand_chacha::ChaCha8Rng| s + rng.random_range(0.0..2.0);
            let (u, w) = match slot {
                0 => (
                    [near(&mut rng), s + rng.random_range(10.0..16.0)],
                    [near(&mut rng), s + rng.random_range(10.0..16.0)],
                ),
                1 => (
                    [s + 20.0 + rng.random_range(0.0..3.0), s + 20.0 + rng.random_range(10.0..18.0)],
                    [near(&mut rng), s + rng.random_range(6.0..14.0)],
                ),
                2 => (
                    [near(&mut rng), s + rng.random_range(6.0..14.0)],
                    [s + 20.0 + rng.random_range(0.0..3.0), s + 20.0 + rng.random_range(10.0..18.0)],
                ),
                _ => {
                    let far = [
                        s + 42.0 + rng.random_range(0.0..3.0),
                        (s + 42.0 + rng.random_range(8.0..16.0)).min(cfg.extent),
                    ];
                    let side = [near(&mut rng), s + rng.random_range(6.0..14.0)];
                    if rng.random::<bool>() {
                        (far, side)
                    } else {
                        (side, far)
                    }
                }
            };
            buildings.push(mirrored(q, u, w, [0.0, h]));
        }
    }

    // sidewalk strip between the curb and the building line, away from the
    // intersection corners
    let mut obstacles = Vec::new();
    let (inner, outer) = (cfg.road_half_width + 0.3, s - 0.3);
    for _ in 0..cfg.street_furniture {
        let along = rng.random_range(s + 4.0..cfg.extent - 5.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let half_along = rng.random_range(0.25..1.2);
        let half_across = rng.random_range(0.25..0.5f64.max((outer - inner) / 2.0 - 0.05).min(0.7));
        let across = rng.random_range(inner + half_across..outer - half_across)
            * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let height = rng.random_range(0.8..3.0);
        let (cx, cy, hx, hy) = if rng.random::<bool>() {
            (along, across, half_along, half_across)
        } else {
            (across, along, half_across, half_along)
        };
        obstacles.push(Aabb {
            min: Point3::new(cx - hx, cy - hy, 0.0),
            max: Point3::new(cx + hx, cy + hy, height),
        });
    }

    Ok(Scene {
        ground: Some(cfg.ground_half_extent),
        buildings,
        obstacles,
        vehicles: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(build_scene(&cfg, 3).unwrap(), build_scene(&cfg, 3).unwrap());
        assert_ne!(build_scene(&cfg, 3).unwrap(), build_scene(&cfg, 4).unwrap());
    }

    #[test]
    fn buildings_clear_roads_and_count() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let scene = build_scene(&cfg, seed).unwrap();
            assert!((8..=16).contains(&scene.buildings.len()));
            let long = cfg.ground_half_extent;
            for b in scene.buildings.iter().chain(&scene.obstacles) {
                assert!(!b.intersects_xy_rect(long, cfg.road_half_width), "{b:?}");
                assert!(!b.intersects_xy_rect(cfg.road_half_width, long), "{b:?}");
                assert!(b.max.x.abs().max(b.min.x.abs()) <= cfg.extent);
                assert!(b.max.y.abs().max(b.min.y.abs()) <= cfg.extent);
            }
            for (i, a) in scene.buildings.iter().enumerate() {
                for b in &scene.buildings[i + 1..] {
                    let overlap = a.min.x < b.max.x && b.min.x < a.max.x && a.min.y < b.max.y && b.min.y < a.max.y;
                    assert!(!overlap, "{a:?} {b:?}");
                }
            }
        }
    }

    #[test]
    fn ray_box_hits() {
        let b = Aabb::new(Point3::new(5.0, -1.0, -1.0), Point3::new(6.0, 1.0, 1.0)).unwrap();
        let d = Vector3::x();
        let inv = d.map(|v| 1.0 / v);
        assert_eq!(b.ray_hit(&Point3::origin(), &inv, 0.0, 100.0), Some(5.0));
        assert_eq!(b.ray_hit(&Point3::origin(), &inv, 0.0, 4.0), None);
        assert_eq!(b.ray_hit(&Point3::new(0.0, 2.0, 0.0), &inv, 0.0, 100.0), None);
    }

    #[test]
    fn oriented_box_matches_axis_aligned_when_unrotated() {
        let ob = OrientedBox {
            pose: RigidTransform::from_translation(Vector3::new(10.0, 0.0, 0.75)),
            half_extents: Vector3::new(2.25, 0.9, 0.75),
        };
        let t = ob.ray_hit(&Point3::new(0.0, 0.0, 0.5), &Vector3::x(), 0.0, 100.0).unwrap();
        assert!((t - 7.75).abs() < 1e-12);
        let rotated = OrientedBox {
            pose: RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::new(10.0, 0.0, 0.75)),
            ..ob
        };
        let t = rotated.ray_hit(&Point3::new(0.0, 0.0, 0.5), &Vector3::x(), 0.0, 100.0).unwrap();
        assert!((t - 9.1).abs() < 1e-12);
        assert!((rotated.surface_distance(&Point3::new(9.1, 0.0, 0.5))).abs() < 1e-12);
    }

    #[test]
    fn surface_distance_inside_and_outside() {
        let b = Aabb::new(Point3::new(0.0, 0.0, 0.0), Point3::new(2.0, 2.0, 2.0)).unwrap();
        assert!((b.surface_distance(&Point3::new(1.0, 1.0, 0.5)) - 0.5).abs() < 1e-12);
        assert!((b.surface_distance(&Point3::new(3.0, 1.0, 1.0)) - 1.0).abs() < 1e-12);
        assert!((b.surface_distance(&Point3::new(3.0, 3.0, 1.0)) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ground_cast() {
        let scene = Scene {
            ground: Some(50.0),
            ..Scene::empty()
        };
        let d = Vector3::new(1.0, 0.0, -1.0).normalize();
        let t = scene.cast(&Point3::new(0.0, 0.0, 2.0), &d, 100.0).unwrap();
        assert!((t - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(scene.cast(&Point3::new(0.0, 0.0, 2.0), &Vector3::x(), 100.0).is_none());
        assert!(Scene::empty().cast(&Point3::origin(), &d, 100.0).is_none());
    }
}
