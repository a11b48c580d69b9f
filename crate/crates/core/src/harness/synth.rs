//! Desk-scale synthetic worlds: textured boxes on a floor, a looped training
//! trajectory and test poses at controlled distances from it.

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{look_at, Aabb, CameraIntrinsics, DepthImage, RigidPose};
use crate::io::FrameRecord;
use crate::predictor::{SyntheticPredictorConfig, SystematicError};
use crate::refine::{splat, ScenePointModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub extent: Aabb,
    pub point_count: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub box_count: usize,
    pub intrinsics: CameraIntrinsics,
    /// Test offsets from the trajectory are spread over `[0, max]`, metres.
    pub max_test_offset: f64,
    pub trajectory_radius: f64,
    pub trajectory_height: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: Aabb::new(Vector3::new(-2.0, -2.0, 0.0), Vector3::new(2.0, 2.0, 3.0)),
            point_count: 50_000,
            train_frames: 200,
            test_frames: 50,
            box_count: 8,
            intrinsics: CameraIntrinsics::new(200.0, 200.0, 160.0, 120.0, 320, 240).expect("valid intrinsics"),
            max_test_offset: 0.6,
            trajectory_radius: 2.6,
            trajectory_height: 1.7,
        }
    }
}

/// Planar rectangle `origin + s·edge_u + t·edge_v`, `s, t ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub origin: Vector3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
    pub colour: [f64; 3],
    /// Checker tile size for the texture, metres; `0` for a flat colour.
    pub tile: f64,
}

impl Quad {
    pub fn normal(&self) -> Vector3<f64> {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    pub fn area(&self) -> f64 {
        self.edge_u.cross(&self.edge_v).norm()
    }

    pub fn point(&self, s: f64, t: f64) -> Vector3<f64> {
        self.origin + self.edge_u * s + self.edge_v * t
    }

    /// Surface coordinates `(s, t)` of a point on the quad's plane.
    fn coords(&self, p: &Vector3<f64>) -> (f64, f64) {
        let d = p - self.origin;
        let m = Matrix3::from_columns(&[self.edge_u, self.edge_v, self.normal()]);
        let c = m.try_inverse().expect("non-degenerate quad") * d;
        (c.x, c.y)
    }

    pub fn colour_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        if self.tile <= 0.0 {
            return self.colour;
        }
        let (s, t) = self.coords(p);
        let a = (s * self.edge_u.norm() / self.tile).floor() as i64;
        let b = (t * self.edge_v.norm() / self.tile).floor() as i64;
        let f = if (a + b).rem_euclid(2) == 0 { 1.0 } else { 0.6 };
        self.colour.map(|c| c * f)
    }

    /// Distance from `p` to the rectangle.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let (s, t) = self.coords(p);
        (p - self.point(s.clamp(0.0, 1.0), t.clamp(0.0, 1.0))).norm()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub surfaces: Vec<Quad>,
    /// Ground-truth point world.
    pub model: ScenePointModel,
    /// Surface each model point was sampled from.
    pub point_surface: Vec<u32>,
    pub train: Vec<FrameRecord>,
    pub test: Vec<FrameRecord>,
    /// Requested distance of each test pose from the trajectory, metres.
    pub test_offsets: Vec<f64>,
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.15..0.95), rng.random_range(0.15..0.95), rng.random_range(0.15..0.95)]
}

fn build_surfaces(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> (Vec<Quad>, Vec<Aabb>) {
    let e = &spec.extent;
    let mut quads = vec![Quad {
        origin: Vector3::new(e.min.x, e.min.y, e.min.z),
        edge_u: Vector3::new(e.max.x - e.min.x, 0.0, 0.0),
        edge_v: Vector3::new(0.0, e.max.y - e.min.y, 0.0),
        colour: [0.75, 0.7, 0.6],
        tile: 0.25,
    }];
    let mut boxes: Vec<Aabb> = Vec::new();
    let reach = 0.4 * (e.max.x - e.min.x).min(e.max.y - e.min.y);
    let mut tries = 0;
    while boxes.len() < spec.box_count && tries < 10_000 {
        tries += 1;
        let size = Vector3::new(rng.random_range(0.3..0.8), rng.random_range(0.3..0.8), rng.random_range(0.3f64..2.5).min(e.max.z - e.min.z));
        let c = Vector3::new(rng.random_range(-reach..reach), rng.random_range(-reach..reach), 0.0);
        let b = Aabb::new(
            Vector3::new(c.x - size.x / 2.0, c.y - size.y / 2.0, e.min.z),
            Vector3::new(c.x + size.x / 2.0, c.y + size.y / 2.0, e.min.z + size.z),
        );
        let gap = 0.1;
        if boxes.iter().any(|o| b.min.x < o.max.x + gap && o.min.x < b.max.x + gap && b.min.y < o.max.y + gap && o.min.y < b.max.y + gap) {
            continue;
        }
        boxes.push(b);
    }
    for b in &boxes {
        let d = b.extent();
        let (x, y, z) = (Vector3::x() * d.x, Vector3::y() * d.y, Vector3::z() * d.z);
        let faces = [
            (Vector3::new(b.min.x, b.min.y, b.max.z), x, y),
            (b.min, z, x),
            (Vector3::new(b.min.x, b.max.y, b.min.z), x, z),
            (b.min, y, z),
            (Vector3::new(b.max.x, b.min.y, b.min.z), z, y),
        ];
        for (origin, edge_u, edge_v) in faces {
            let tile = if rng.random::<f64>() < 0.5 { 0.15 } else { 0.0 };
            quads.push(Quad {
                origin,
                edge_u,
                edge_v,
                colour: random_colour(rng),
                tile,
            });
        }
    }
    (quads, boxes)
}

fn sample_points(quads: &[Quad], count: usize, rng: &mut ChaCha8Rng) -> (ScenePointModel, Vec<u32>) {
    let total: f64 = quads.iter().map(Quad::area).sum();
    let mut positions = Vec::with_capacity(count);
    let mut colours = Vec::with_capacity(count);
    let mut surface = Vec::with_capacity(count);
    let mut cumulative = 0.0;
    let mut assigned = 0usize;
    for (i, q) in quads.iter().enumerate() {
        cumulative += q.area();
        let target = if i + 1 == quads.len() { count } else { (count as f64 * cumulative / total).round() as usize };
        for _ in assigned..target {
            let p = q.point(rng.random(), rng.random());
            positions.push([p.x as f32, p.y as f32, p.z as f32]);
            colours.push(q.colour_at(&p).map(|c| (c * 255.0).round() as u8));
            surface.push(i as u32);
        }
        assigned = target.max(assigned);
    }
    (ScenePointModel::new(positions, colours), surface)
}

/// Renders sensor depth and colour: the z-buffer splat decides which surface
/// each pixel sees, and the depth is the exact ray/plane intersection with it.
pub fn render_frame(world: &SyntheticWorld, pose: &RigidPose, index: u32) -> FrameRecord {
    let k = world.spec.intrinsics;
    let s = splat(&world.model, pose, &k, 1);
    let inv = pose.inverse();
    let mut depth = DepthImage::invalid(k.width, k.height);
    let mut rgb = RgbImage::new(k.width as u32, k.height as u32);
    for v in 0..k.height {
        for u in 0..k.width {
            let Some(pid) = s.winner[v * k.width + u] else {
                continue;
            };
            let quad = &world.surfaces[world.point_surface[pid as usize] as usize];
            // plane n·X = c in camera coordinates
            let n = inv.rotation * quad.normal();
            let c = n.dot(&inv.transform_point(&quad.origin));
            let ray = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let denom = n.dot(&ray);
            if denom.abs() < 1e-9 {
                continue;
            }
            let z = c / denom;
            if z <= 0.0 {
                continue;
            }
            let world_point = pose.transform_point(&(ray * z));
            if quad.distance(&world_point) > 1e-6 {
                continue;
            }
            depth.set(u, v, z as f32);
            let col = quad.colour_at(&world_point);
            rgb.put_pixel(u as u32, v as u32, Rgb(col.map(|c| (c * 255.0).round() as u8)));
        }
    }
    FrameRecord {
        index,
        rgb,
        depth,
        pose: *pose,
        intrinsics: k,
    }
}

fn trajectory_pose(spec: &WorldSpec, theta: f64) -> RigidPose {
    let eye = Vector3::new(spec.trajectory_radius * theta.cos(), spec.trajectory_radius * theta.sin(), spec.trajectory_height);
    let tangent = Vector3::new(-theta.sin(), theta.cos(), 0.0);
    let target = Vector3::new(0.0, 0.0, 0.6) + tangent * 0.3 * (5.0 * theta).sin();
    look_at(eye, target, Vector3::z())
}

fn inside_box(boxes: &[Aabb], p: &Vector3<f64>, margin: f64) -> bool {
    boxes.iter().any(|b| Aabb::new(b.min - Vector3::repeat(margin), b.max + Vector3::repeat(margin)).contains(p))
}

pub fn generate_synthetic_world(spec: &WorldSpec) -> SyntheticWorld {
    assert!(spec.point_count >= 1 && spec.train_frames >= 1, "world needs points and frames");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (surfaces, boxes) = build_surfaces(spec, &mut rng);
    let (model, point_surface) = sample_points(&surfaces, spec.point_count, &mut rng);
    let mut world = SyntheticWorld {
        spec: spec.clone(),
        surfaces,
        model,
        point_surface,
        train: Vec::new(),
        test: Vec::new(),
        test_offsets: Vec::new(),
    };
    let n = spec.train_frames;
    world.train = (0..n)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / n as f64;
            render_frame(&world, &trajectory_pose(spec, theta), i as u32)
        })
        .collect();
    for j in 0..spec.test_frames {
        let offset = spec.max_test_offset * (j as f64 + 0.5) / spec.test_frames as f64;
        let pose = loop {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let base = trajectory_pose(spec, theta);
            let radial = Vector3::new(theta.cos(), theta.sin(), 0.0);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let elevation = rng.random_range(-30f64..30.0).to_radians();
            let dir = radial * sign * elevation.cos() + Vector3::z() * elevation.sin();
            let eye = base.translation + dir * offset;
            if inside_box(&boxes, &eye, 0.2) || eye.z < 0.3 {
                continue;
            }
            let aim = base.translation + base.rotation.column(2).into_owned() * 2.6;
            let wobble = Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
            let p = look_at(eye, aim, Vector3::z());
            // small extra rotation about the eye
            break RigidPose {
                rotation: RigidPose::from_axis_angle(wobble, Vector3::zeros()).rotation * p.rotation,
                translation: eye,
            };
        };
        world.test_offsets.push(offset);
        world.test.push(render_frame(&world, &pose, (n + j) as u32));
    }
    world
}

/// Identity-warp predictor with 5 cm noise and 30% outliers over the world box.
pub fn standard_predictor(world: &SyntheticWorld, seed: u64) -> SyntheticPredictorConfig {
    SyntheticPredictorConfig {
        noise_sigma: 0.05,
        outlier_fraction: 0.3,
        ..SyntheticPredictorConfig::identity(world.spec.extent, seed)
    }
}

/// Fixed invertible affine map standing in for a network trained elsewhere.
pub fn standard_warp() -> (Matrix3<f64>, Vector3<f64>) {
    let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.9).into_inner();
    let scale = Matrix3::from_diagonal(&Vector3::new(1.15, 0.9, 1.05));
    let shear = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.05, 0.0, 0.0, 1.0);
    (rot * scale * shear, Vector3::new(5.3, -2.1, 0.7))
}

pub fn warped_predictor(world: &SyntheticWorld, seed: u64) -> SyntheticPredictorConfig {
    let (warp, offset) = standard_warp();
    SyntheticPredictorConfig {
        warp,
        warp_offset: offset,
        outlier_box: world.spec.extent.transformed(&warp, &offset),
        ..standard_predictor(world, seed)
    }
}

/// Standard predictor plus a consistent patch-wise displacement, making the
/// raw predictions' errors structured.
pub fn quality_predictor(world: &SyntheticWorld, seed: u64) -> SyntheticPredictorConfig {
    SyntheticPredictorConfig {
        systematic: Some(SystematicError {
            fraction: 0.6,
            patch_size: 0.5,
            offset: Vector3::new(0.5, -0.3, 0.1),
            wobble_amplitude: 0.02,
            wobble_wavelength: 1.0,
        }),
        ..standard_predictor(world, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::eval::{median, novelty_binning, DEFAULT_NOVELTY_EDGES};
    use crate::refine::render_depth;

    fn small(train: usize, test: usize) -> SyntheticWorld {
        generate_synthetic_world(&WorldSpec {
            train_frames: train,
            test_frames: test,
            ..WorldSpec::default()
        })
    }

    #[test]
    fn single_frame_trajectory() {
        let w = small(1, 0);
        assert_eq!(w.train.len(), 1);
        assert!(w.test.is_empty());
        assert_eq!(w.model.len(), WorldSpec::default().point_count);
        assert_eq!(w.point_surface.len(), w.model.len());
    }

    #[test]
    fn sensor_points_lie_on_surfaces() {
        let w = small(2, 2);
        for f in w.train.iter().chain(&w.test) {
            let k = f.intrinsics;
            let mut n = 0;
            for v in (0..k.height).step_by(3) {
                for u in (0..k.width).step_by(3) {
                    let Some(d) = f.depth.get(u, v) else { continue };
                    let p = f.pose.transform_point(&k.unproject(u as f64, v as f64, d as f64));
                    let dist = w.surfaces.iter().map(|q| q.distance(&p)).fold(f64::INFINITY, f64::min);
                    assert!(dist < 1e-3, "pixel ({u},{v}) is {dist} m off every surface");
                    n += 1;
                }
            }
            assert!(n > 1000, "frame {} has too few valid pixels", f.index);
        }
    }

    #[test]
    fn model_points_lie_on_their_surface() {
        let w = small(1, 0);
        for (i, s) in w.point_surface.iter().enumerate().step_by(97) {
            assert!(w.surfaces[*s as usize].distance(&w.model.position(i)) < 1e-6);
        }
    }

    #[test]
    fn largest_offset_lands_in_final_bin() {
        let w = small(200, 10);
        let last = *w.test_offsets.last().unwrap();
        assert!(last > 0.5 && last <= w.spec.max_test_offset);
        let train: Vec<RigidPose> = w.train.iter().map(|f| f.pose).collect();
        let test: Vec<RigidPose> = w.test.iter().map(|f| f.pose).collect();
        let b = novelty_binning(&train, &test, &vec![true; test.len()], &DEFAULT_NOVELTY_EDGES);
        assert_eq!(*b.assignment.last().unwrap(), DEFAULT_NOVELTY_EDGES.len());
        // offsets grow with the test index
        assert!(w.test_offsets.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn render_matches_sensor_depth() {
        let w = small(3, 0);
        for f in &w.train {
            let r = render_depth(&w.model, &f.pose, &f.intrinsics, 1);
            let diffs: Vec<f64> = r
                .values()
                .iter()
                .zip(f.depth.values())
                .filter(|(a, b)| **a > 0.0 && **b > 0.0)
                .map(|(a, b)| (a - b).abs() as f64)
                .collect();
            assert!(diffs.len() > 1000);
            assert!(median(&diffs) < 0.01, "median {}", median(&diffs));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (small(2, 2), small(2, 2));
        assert_eq!(a.surfaces, b.surfaces);
        assert_eq!(a.model, b.model);
        for (x, y) in a.test.iter().zip(&b.test) {
            assert_eq!(x.pose, y.pose);
            assert_eq!(x.depth, y.depth);
        }
    }

    #[test]
    fn warp_is_invertible() {
        let (m, _) = standard_warp();
        assert!(m.determinant().abs() > 0.5);
    }
}
