//! Synthetic multi-agent LiDAR scenes with ground truth.
//!
//! A scene holds N agents (default 2), each with a point cloud in its own
//! sensor frame, plus world-frame ground-truth boxes. Clouds contain ground
//! returns and points sampled on box faces that are visible from the agent:
//! a face point is kept only when the 2-D ray from the sensor does not pass
//! through a nearer box, which is what gives cooperation its value — agents
//! on different sides of an occluder see different subsets of each box.

mod corrupt;
pub mod files;

pub use corrupt::{corrupt, CorruptionKind, ALL_CORRUPTIONS};

use rand::Rng;

use crate::numerics::TensorData;
use crate::rng::SeedTree;
use crate::{Error, Result};

pub const SENSOR_HEIGHT: f64 = 1.7;
// A beam's elevation determines the ground range it sweeps, so rings are
// indexed by their flat-ground range band; equal-area spacing keeps every
// ring populated under uniform ground sampling.
const RING_R_MIN: f64 = 2.0;
pub const BOX_HEIGHT: f64 = 1.6;
const RING_R_MAX: f64 = 24.0;

/// SE(2) pose: position in meters, yaw in radians normalized to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: wrap_angle(yaw) }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    /// Local coordinates -> world coordinates.
    pub fn to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * x - s * y + self.x, s * x + c * y + self.y)
    }

    /// World coordinates -> local coordinates.
    pub fn from_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Normalizes an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Oriented BEV box. `score` is present only on detections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    pub score: Option<f64>,
}

impl BevBox {
    pub fn gt(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> Self {
        Self { cx, cy, w, l, yaw: wrap_angle(yaw), score: None }
    }

    pub fn detection(cx: f64, cy: f64, w: f64, l: f64, yaw: f64, score: f64) -> Self {
        Self { cx, cy, w, l, yaw: wrap_angle(yaw), score: Some(score) }
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Counter-clockwise corners; `l` runs along the heading axis.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l * 0.5, self.w * 0.5);
        let rot = |x: f64, y: f64| (self.cx + c * x - s * y, self.cy + s * x + c * y);
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.l * 0.5 && ly.abs() <= self.w * 0.5
    }

    /// Area of overlap with another box (Sutherland-Hodgman clipping).
    pub fn intersection_area(&self, other: &BevBox) -> f64 {
        let mut poly: Vec<(f64, f64)> = self.corners().to_vec();
        let clip = other.corners();
        for e in 0..4 {
            let a = clip[e];
            let b = clip[(e + 1) % 4];
            let mut out: Vec<(f64, f64)> = Vec::with_capacity(poly.len() + 2);
            // Keep the side of edge a->b that contains the polygon interior
            // (corners are CCW, so interior is the left side).
            let inside = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
            for i in 0..poly.len() {
                let cur = poly[i];
                let prev = poly[(i + poly.len() - 1) % poly.len()];
                let cur_in = inside(cur);
                let prev_in = inside(prev);
                if cur_in != prev_in {
                    if let Some(p) = segment_line_intersect(prev, cur, a, b) {
                        out.push(p);
                    }
                }
                if cur_in {
                    out.push(cur);
                }
            }
            poly = out;
            if poly.is_empty() {
                return 0.0;
            }
        }
        polygon_area(&poly).max(0.0)
    }

    /// Parameter interval of the 2-D segment p0 -> p1 inside this box, if any.
    fn segment_interval(&self, p0: (f64, f64), p1: (f64, f64)) -> Option<(f64, f64)> {
        // Work in the box frame so the test is a slab intersection.
        let (s, c) = self.yaw.sin_cos();
        let tf = |p: (f64, f64)| {
            let (dx, dy) = (p.0 - self.cx, p.1 - self.cy);
            (c * dx + s * dy, -s * dx + c * dy)
        };
        let (a, b) = (tf(p0), tf(p1));
        let (hx, hy) = (self.l * 0.5, self.w * 0.5);
        let d = (b.0 - a.0, b.1 - a.1);
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for (p, dd, h) in [(a.0, d.0, hx), (a.1, d.1, hy)] {
            if dd.abs() < 1e-12 {
                if p.abs() > h {
                    return None;
                }
            } else {
                let mut ta = (-h - p) / dd;
                let mut tb = (h - p) / dd;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        // Require a real interior crossing, not a touch at the far endpoint.
        if t1 > t0 + 1e-9 && t0 < 1.0 - 1e-6 {
            Some((t0, t1))
        } else {
            None
        }
    }

    /// Does the 2-D segment p0 -> p1 pass through this box's interior?
    pub fn blocks_segment(&self, p0: (f64, f64), p1: (f64, f64)) -> bool {
        self.segment_interval(p0, p1).is_some()
    }

    /// Occlusion of a descending beam from the sensor (at `SENSOR_HEIGHT`)
    /// toward a target at height `z`: the box blocks the beam only if the
    /// ray is still at or below the box top where it crosses the footprint.
    pub fn blocks_beam(&self, sensor: (f64, f64), target: (f64, f64), z: f64) -> bool {
        match self.segment_interval(sensor, target) {
            None => false,
            Some((_, t1)) => SENSOR_HEIGHT + (z - SENSOR_HEIGHT) * t1 <= BOX_HEIGHT,
        }
    }
}

fn segment_line_intersect(
    p: (f64, f64),
    q: (f64, f64),
    a: (f64, f64),
    b: (f64, f64),
) -> Option<(f64, f64)> {
    let r = (q.0 - p.0, q.1 - p.1);
    let n = (b.1 - a.1, -(b.0 - a.0)); // normal of line a->b
    let denom = r.0 * n.0 + r.1 * n.1;
    if denom.abs() < 1e-18 {
        return None;
    }
    let t = ((a.0 - p.0) * n.0 + (a.1 - p.1) * n.1) / denom;
    Some((p.0 + t * r.0, p.1 + t * r.1))
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() * 0.5
}

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    pub beam: u32,
}

/// Point cloud in an agent's sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
    pub n_beams: usize,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.points.iter().all(|p| {
            p.x.is_finite()
                && p.y.is_finite()
                && p.z.is_finite()
                && p.intensity.is_finite()
                && (p.beam as usize) < self.n_beams
        })
    }

    /// `P x 5` tensor (x, y, z, intensity, beam) for dumping.
    pub fn to_tensor(&self) -> TensorData<f64> {
        let mut data = Vec::with_capacity(self.points.len() * 5);
        for p in &self.points {
            data.extend_from_slice(&[p.x, p.y, p.z, p.intensity, p.beam as f64]);
        }
        TensorData::new(vec![self.points.len(), 5], data).expect("cloud tensor")
    }

    pub fn from_tensor(t: &TensorData<f64>, n_beams: usize) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != 5 {
            return Err(Error::shape("PointCloud::from_tensor", format!("{:?}", t.shape())));
        }
        let points = t
            .data()
            .chunks_exact(5)
            .map(|c| LidarPoint { x: c[0], y: c[1], z: c[2], intensity: c[3], beam: c[4] as u32 })
            .collect();
        Ok(Self { points, n_beams })
    }
}

/// Beam ring for a point in sensor-local coordinates. Ring k covers the
/// flat-ground range band its elevation sweeps; ranges outside the swept
/// interval clamp to the first/last ring.
pub fn beam_for_point(x: f64, y: f64, _z: f64, n_beams: usize) -> u32 {
    let r2 = x * x + y * y;
    let t = (r2 - RING_R_MIN * RING_R_MIN) / (RING_R_MAX * RING_R_MAX - RING_R_MIN * RING_R_MIN);
    ((t * n_beams as f64).floor().clamp(0.0, n_beams as f64 - 1.0)) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentFrame {
    pub pose: Pose,
    pub cloud: PointCloud,
}

/// Per-scene bookkeeping written next to the data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneMeta {
    pub requested_boxes: usize,
    /// `box_points[agent][box]`: surface returns each agent got per GT box.
    pub box_points: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub agents: Vec<AgentFrame>,
    pub gt_boxes: Vec<BevBox>,
    pub seed: u64,
    pub meta: SceneMeta,
}

/// Knobs for the synthetic world.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    /// Boxes and agents live in the square [-half_extent, half_extent]^2.
    pub half_extent: f64,
    pub n_agents: usize,
    pub box_count_min: usize,
    pub box_count_max: usize,
    pub ground_points: usize,
    /// Surface-sample attempts per box per agent.
    pub box_points: usize,
    pub n_beams: usize,
    pub max_range: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            half_extent: 24.0,
            n_agents: 2,
            box_count_min: 3,
            box_count_max: 8,
            ground_points: 256,
            box_points: 96,
            n_beams: 16,
            max_range: 60.0,
        }
    }
}

const PLACEMENT_TRIES: usize = 40;

/// Generates a deterministic synthetic scene.
///
/// Agent 0 is the ego at the origin. Boxes are pairwise non-overlapping with
/// a clearance margin; if a box cannot be placed after bounded retries it is
/// skipped and `meta.requested_boxes` records the original request.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Scene {
    assert!(params.n_agents >= 1, "need at least one agent");
    let tree = SeedTree::new(seed);

    // Agents first so boxes can keep clear of them.
    let mut agent_poses = vec![Pose::identity()];
    let mut rng = tree.stream("agents", &[]);
    for _ in 1..params.n_agents {
        let r = rng.gen_range(9.0..18.0);
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        agent_poses.push(Pose::new(r * theta.cos(), r * theta.sin(), yaw));
    }

    let mut rng = tree.stream("boxes", &[]);
    let requested = rng.gen_range(params.box_count_min..=params.box_count_max);
    let mut boxes: Vec<BevBox> = Vec::with_capacity(requested);
    let margin = params.half_extent - 2.5;
    'boxes: for _ in 0..requested {
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.gen_range(-margin..margin);
            let cy = rng.gen_range(-margin..margin);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let w = rng.gen_range(1.8..2.2);
            let l = rng.gen_range(4.0..5.0);
            let candidate = BevBox::gt(cx, cy, w, l, yaw);
            let inflated = BevBox::gt(cx, cy, w + 1.2, l + 1.2, yaw);
            let clear_of_boxes = boxes.iter().all(|b| {
                let other = BevBox::gt(b.cx, b.cy, b.w + 1.2, b.l + 1.2, b.yaw);
                inflated.intersection_area(&other) < 1e-9
            });
            let clear_of_agents = agent_poses
                .iter()
                .all(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt() > l * 0.5 + 2.5);
            if clear_of_boxes && clear_of_agents {
                boxes.push(candidate);
                continue 'boxes;
            }
        }
        // Placement failed; the scene simply carries fewer boxes.
    }

    let mut agents = Vec::with_capacity(params.n_agents);
    let mut box_points = vec![vec![0usize; boxes.len()]; params.n_agents];
    for (ai, pose) in agent_poses.iter().enumerate() {
        let mut rng = tree.stream("points", &[ai as u64]);
        let mut pts: Vec<LidarPoint> = Vec::new();

        for _ in 0..params.ground_points {
            let wx = rng.gen_range(-params.half_extent..params.half_extent);
            let wy = rng.gen_range(-params.half_extent..params.half_extent);
            let z = rng.gen_range(-0.05..0.05);
            let intensity = rng.gen_range(0.3..0.6);
            let (lx, ly) = pose.from_world(wx, wy);
            if (lx * lx + ly * ly).sqrt() > params.max_range {
                continue;
            }
            // Ground behind a box is shadowed too.
            if boxes.iter().any(|b| b.blocks_beam((pose.x, pose.y), (wx, wy), z)) {
                continue;
            }
            let beam = beam_for_point(lx, ly, z, params.n_beams);
            pts.push(LidarPoint { x: lx, y: ly, z, intensity, beam });
        }

        for (bi, b) in boxes.iter().enumerate() {
            let corners = b.corners();
            let perimeter = 2.0 * (b.w + b.l);
            for _ in 0..params.box_points {
                let mut t = rng.gen_range(0.0..perimeter);
                let z = rng.gen_range(0.2..BOX_HEIGHT);
                let intensity = rng.gen_range(0.5..1.0);
                // Walk the CCW perimeter to a surface point.
                let mut wpt = None;
                for e in 0..4 {
                    let a = corners[e];
                    let c = corners[(e + 1) % 4];
                    let elen = ((c.0 - a.0).powi(2) + (c.1 - a.1).powi(2)).sqrt();
                    if t <= elen {
                        let f = t / elen;
                        wpt = Some((a.0 + f * (c.0 - a.0), a.1 + f * (c.1 - a.1), e));
                        break;
                    }
                    t -= elen;
                }
                let Some((wx, wy, edge)) = wpt else { continue };
                // Face must look toward the sensor.
                let a = corners[edge];
                let c = corners[(edge + 1) % 4];
                let normal = (c.1 - a.1, -(c.0 - a.0)); // outward for CCW corners
                let to_sensor = (pose.x - wx, pose.y - wy);
                if normal.0 * to_sensor.0 + normal.1 * to_sensor.1 <= 0.0 {
                    continue;
                }
                let (lx, ly) = pose.from_world(wx, wy);
                if (lx * lx + ly * ly).sqrt() > params.max_range {
                    continue;
                }
                // Occlusion by any other box along the 2-D ray.
                let occluded = boxes
                    .iter()
                    .enumerate()
                    .any(|(oi, ob)| oi != bi && ob.blocks_beam((pose.x, pose.y), (wx, wy), z));
                if occluded {
                    continue;
                }
                let beam = beam_for_point(lx, ly, z, params.n_beams);
                pts.push(LidarPoint { x: lx, y: ly, z, intensity, beam });
                box_points[ai][bi] += 1;
            }
        }

        agents.push(AgentFrame {
            pose: *pose,
            cloud: PointCloud { points: pts, n_beams: params.n_beams },
        });
    }

    Scene {
        agents,
        gt_boxes: boxes,
        seed,
        meta: SceneMeta { requested_boxes: requested, box_points },
    }
}

/// Rigid SE(2) remap of a cloud from one agent frame into another; z, beam
/// and intensity are unchanged.
pub fn transform_points(cloud: &PointCloud, from: &Pose, to: &Pose) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let (wx, wy) = from.to_world(p.x, p.y);
            let (lx, ly) = to.from_world(wx, wy);
            LidarPoint { x: lx, y: ly, ..*p }
        })
        .collect();
    PointCloud { points, n_beams: cloud.n_beams }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_lands_in_half_open_interval() {
        use std::f64::consts::PI;
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn transform_identity_and_roundtrip() {
        let cloud = PointCloud {
            points: vec![
                LidarPoint { x: 1.0, y: 2.0, z: 0.5, intensity: 0.7, beam: 3 },
                LidarPoint { x: -4.0, y: 0.1, z: 0.0, intensity: 0.2, beam: 0 },
            ],
            n_beams: 16,
        };
        let a = Pose::new(3.0, -1.0, 0.7);
        let same = transform_points(&cloud, &a, &a);
        for (p, q) in cloud.points.iter().zip(same.points.iter()) {
            assert!((p.x - q.x).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12);
        }
        let b = Pose::new(-5.0, 2.0, -2.1);
        let there = transform_points(&cloud, &a, &b);
        let back = transform_points(&there, &b, &a);
        for (p, q) in cloud.points.iter().zip(back.points.iter()) {
            assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            assert_eq!(p.beam, q.beam);
        }
    }

    #[test]
    fn ninety_degree_rotation_maps_x_axis_to_y_axis() {
        let cloud = PointCloud {
            points: vec![LidarPoint { x: 1.0, y: 0.0, z: 0.0, intensity: 0.5, beam: 0 }],
            n_beams: 16,
        };
        // Frame rotated by -90 deg relative to world: local +x is world -y,
        // so a world-frame +x point expressed there lands on local +y.
        let from = Pose::identity();
        let to = Pose::new(0.0, 0.0, -std::f64::consts::FRAC_PI_2);
        let out = transform_points(&cloud, &from, &to);
        assert!((out.points[0].x - 0.0).abs() < 1e-12);
        assert!((out.points[0].y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_box_range_gives_ground_only() {
        let params = SceneParams { box_count_min: 0, box_count_max: 0, ..Default::default() };
        let scene = generate_scene(&params, 7);
        assert!(scene.gt_boxes.is_empty());
        assert!(!scene.agents[0].cloud.is_empty());
        assert!(scene.agents[0].cloud.points.iter().all(|p| p.z.abs() < 0.1));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let params = SceneParams::default();
        let a = generate_scene(&params, 123);
        let b = generate_scene(&params, 123);
        assert_eq!(a, b);
        let c = generate_scene(&params, 124);
        assert_ne!(a, c);
    }

    #[test]
    fn boxes_never_overlap() {
        for seed in 0..20 {
            let scene = generate_scene(&SceneParams::default(), seed);
            for i in 0..scene.gt_boxes.len() {
                for j in i + 1..scene.gt_boxes.len() {
                    let inter = scene.gt_boxes[i].intersection_area(&scene.gt_boxes[j]);
                    assert!(inter < 1e-9, "seed {} boxes {} {} overlap {}", seed, i, j, inter);
                }
            }
        }
    }

    #[test]
    fn cooperation_extends_coverage_over_occlusions() {
        // Over many seeds, almost every box should collect points from both
        // agents, so the union strictly beats either agent alone.
        let params = SceneParams::default();
        let (mut both, mut total) = (0usize, 0usize);
        for seed in 0..100 {
            let scene = generate_scene(&params, seed);
            if scene.agents.len() < 2 {
                continue;
            }
            for bi in 0..scene.gt_boxes.len() {
                total += 1;
                let a = scene.meta.box_points[0][bi];
                let b = scene.meta.box_points[1][bi];
                if a.min(b) >= 1 {
                    both += 1;
                }
            }
        }
        assert!(total > 200, "expected a healthy box population, got {}", total);
        let frac = both as f64 / total as f64;
        assert!(frac >= 0.9, "only {:.3} of boxes seen by both agents", frac);
    }

    #[test]
    fn occluded_side_is_dark_for_one_agent() {
        // Hand-built check of blocks_segment: box between origin and target.
        let blocker = BevBox::gt(5.0, 0.0, 2.0, 4.0, 0.0);
        assert!(blocker.blocks_segment((0.0, 0.0), (10.0, 0.0)));
        assert!(!blocker.blocks_segment((0.0, 0.0), (0.0, 10.0)));
        // The box interior starts at x = 3; stopping short of it is clear.
        assert!(!blocker.blocks_segment((0.0, 0.0), (2.9, 0.0)));
    }

    #[test]
    fn intersection_area_of_known_overlap() {
        let a = BevBox::gt(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = BevBox::gt(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((a.intersection_area(&b) - 0.5).abs() < 1e-12);
        let c = BevBox::gt(10.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(a.intersection_area(&c), 0.0);
        assert!((a.intersection_area(&a) - 1.0).abs() < 1e-12);
    }
}
