//! Synthetic driving-scene generator and sensor simulator.
//!
//! Scenes are a ground plane plus a handful of oriented boxes with category,
//! yaw and albedo, lit by a directional sun and tagged with brightness and
//! weather. One ray-intersection oracle serves both the LiDAR raycaster and
//! the camera renderer, so the two sensors agree on geometry exactly.
//!
//! All geometry lives in the sensor frame: the LiDAR sits at the origin and
//! the ground plane is at z = [`GROUND_Z`]. Cameras ring the sensor slightly
//! below it.

mod io;
mod ppm;

pub use io::{read_dataset, read_scene, write_dataset, write_scene, DataError};
pub use ppm::{export_ppm, write_pgm, write_ppm};

use crate::geometry::{
    cart_to_spherical, spherical_to_cart, CameraParams, CameraRig, LidarSpec, Mat3, Point3,
    RangeImage, Spherical,
};
use crate::rng::CounterRng;
use rayon::prelude::*;
use thiserror::Error;

/// Ground plane height in the sensor frame (sensor 1.8 m above ground).
pub const GROUND_Z: f64 = -1.8;
/// Camera ring height in the sensor frame.
pub const CAMERA_Z: f64 = -0.2;
/// Camera ring radius, meters from the sensor axis. Small enough that the
/// coarsest LID sampling stays within 1.5 latent cells of any true surface
/// projection, large enough that epipolar lines are non-degenerate.
pub const CAMERA_RADIUS: f64 = 0.5;
/// Diffuse albedo of the ground plane.
pub const GROUND_ALBEDO: f64 = 0.4;
/// Fog extinction length, meters.
pub const FOG_LENGTH: f64 = 30.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("box placement failed after {0} rejections (config too dense)")]
    PlacementFailed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Car = 0,
    Truck = 1,
    Pedestrian = 2,
    Barrier = 3,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Car,
        Category::Truck,
        Category::Pedestrian,
        Category::Barrier,
    ];

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    /// Mean (length, width, height) in meters.
    fn size_prior(self) -> [f64; 3] {
        match self {
            Category::Car => [4.5, 1.9, 1.6],
            Category::Truck => [7.0, 2.5, 3.0],
            Category::Pedestrian => [0.6, 0.6, 1.7],
            Category::Barrier => [2.0, 0.3, 1.0],
        }
    }

    /// Slight fixed tint so categories are tellable apart in renders; purely
    /// multiplicative so tag-brightness identities stay exact.
    fn tint(self) -> [f64; 3] {
        match self {
            Category::Car => [0.70, 0.80, 1.00],
            Category::Truck => [1.00, 0.90, 0.70],
            Category::Pedestrian => [1.00, 0.75, 0.75],
            Category::Barrier => [0.95, 0.60, 0.60],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrightnessTag {
    Day = 0,
    Night = 1,
    Dusk = 2,
}

impl BrightnessTag {
    pub fn factor(self) -> f64 {
        match self {
            BrightnessTag::Day => 1.0,
            BrightnessTag::Dusk => 0.6,
            BrightnessTag::Night => 0.3,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(BrightnessTag::Day),
            1 => Some(BrightnessTag::Night),
            2 => Some(BrightnessTag::Dusk),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeatherTag {
    Clear = 3,
    Fog = 4,
}

impl WeatherTag {
    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            3 => Some(WeatherTag::Clear),
            4 => Some(WeatherTag::Fog),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneTags {
    pub brightness: BrightnessTag,
    pub weather: WeatherTag,
}

impl SceneTags {
    pub fn ids(&self) -> [u32; 2] {
        [self.brightness as u32, self.weather as u32]
    }
}

/// Box resting on the ground plane, axis z up, rotated about z by `yaw`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedBox {
    pub center: Point3,
    /// (length, width, height) along box-frame x, y, z.
    pub size: [f64; 3],
    pub yaw: f64,
    pub category: Category,
    pub albedo: f64,
}

impl OrientedBox {
    /// Corners in the canonical sign order of box-frame (x, y, z):
    /// ---, --+, -+-, -++, +--, +-+, ++-, +++.
    pub fn corners(&self) -> [Point3; 8] {
        let rot = Mat3::rot_z(self.yaw);
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut out = [Point3::new(0.0, 0.0, 0.0); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 4 != 0 { 1.0 } else { -1.0 };
            let sy = if i & 2 != 0 { 1.0 } else { -1.0 };
            let sz = if i & 1 != 0 { 1.0 } else { -1.0 };
            let local = Point3::new(sx * half[0], sy * half[1], sz * half[2]);
            *c = rot.mul_vec(local).add(self.center);
        }
        out
    }

    /// XY footprint corners (box-frame z ignored).
    pub fn footprint(&self) -> [(f64, f64); 4] {
        let rot = Mat3::rot_z(self.yaw);
        let half = [self.size[0] / 2.0, self.size[1] / 2.0];
        let mut out = [(0.0, 0.0); 4];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 2 != 0 { 1.0 } else { -1.0 };
            let sy = if i & 1 != 0 { 1.0 } else { -1.0 };
            let p = rot.mul_vec(Point3::new(sx * half[0], sy * half[1], 0.0));
            *c = (p.x + self.center.x, p.y + self.center.y);
        }
        out
    }
}

/// Separating-axis test for two convex XY quadrilaterals.
pub fn footprints_overlap(a: &[(f64, f64); 4], b: &[(f64, f64); 4]) -> bool {
    let axes = |q: &[(f64, f64); 4]| {
        [
            (q[1].0 - q[0].0, q[1].1 - q[0].1),
            (q[2].0 - q[0].0, q[2].1 - q[0].1),
        ]
    };
    for &(dx, dy) in axes(a).iter().chain(axes(b).iter()) {
        // Normal to the edge direction.
        let (nx, ny) = (-dy, dx);
        let proj = |q: &[(f64, f64); 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &(x, y) in q {
                let p = x * nx + y * ny;
                lo = lo.min(p);
                hi = hi.max(p);
            }
            (lo, hi)
        };
        let (alo, ahi) = proj(a);
        let (blo, bhi) = proj(b);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// One synthetic world: boxes, lighting, tags.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub ground_z: f64,
    pub boxes: Vec<OrientedBox>,
    pub tags: SceneTags,
    /// Unit vector pointing from the scene toward the sun (z > 0).
    pub sun_direction: Point3,
}

/// Scene-generation knobs.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Box centers land within this XY radius of the origin.
    pub placement_radius: f64,
    /// Boxes stay at least this far from the sensor axis.
    pub min_radius: f64,
    pub max_attempts: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            min_boxes: 2,
            max_boxes: 8,
            placement_radius: 20.0,
            min_radius: 3.0,
            max_attempts: 1000,
        }
    }
}

/// Deterministic scene synthesis: box count uniform in [min, max],
/// category-conditioned sizes (+-10%), rejection-sampled non-overlapping
/// footprints.
pub fn generate_scene(seed: u64, cfg: &SimConfig) -> Result<SceneSpec, SimError> {
    let mut rng = CounterRng::for_stream(seed, "scene");
    let n = cfg.min_boxes + rng.below(cfg.max_boxes - cfg.min_boxes + 1);
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(n);
    let mut rejections = 0;
    while boxes.len() < n {
        let category = Category::ALL[rng.below(4)];
        let prior = category.size_prior();
        let mut size = [0.0; 3];
        for (s, p) in size.iter_mut().zip(prior) {
            *s = p * rng.uniform_in(0.9, 1.1);
        }
        let yaw = rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI);
        let radius = rng.uniform_in(cfg.min_radius, cfg.placement_radius);
        let angle = rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI);
        let albedo = rng.uniform_in(0.1, 0.9);
        let candidate = OrientedBox {
            center: Point3::new(
                radius * angle.cos(),
                radius * angle.sin(),
                GROUND_Z + size[2] / 2.0,
            ),
            size,
            yaw,
            category,
            albedo,
        };
        let fp = candidate.footprint();
        if boxes.iter().any(|b| footprints_overlap(&fp, &b.footprint())) {
            rejections += 1;
            if rejections >= cfg.max_attempts {
                return Err(SimError::PlacementFailed(rejections));
            }
            continue;
        }
        boxes.push(candidate);
    }
    let tags = SceneTags {
        brightness: BrightnessTag::from_id(rng.below(3) as u32).unwrap(),
        weather: if rng.below(2) == 0 {
            WeatherTag::Clear
        } else {
            WeatherTag::Fog
        },
    };
    let sun_az = rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI);
    let sun_el = rng.uniform_in(0.52, 1.05); // 30..60 degrees
    let sun = spherical_to_cart(Spherical {
        r: 1.0,
        theta: sun_az,
        phi: sun_el,
    });
    Ok(SceneSpec {
        seed,
        ground_z: GROUND_Z,
        boxes,
        tags,
        sun_direction: sun,
    })
}

/// Ray hit against the shared intersection oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Euclidean distance along the (unit) ray.
    pub t: f64,
    pub normal: Point3,
    pub albedo: f64,
    /// None = ground plane.
    pub category: Option<Category>,
}

/// Slab-method intersection of a ray with one oriented box. Returns the
/// entry distance and outward surface normal.
fn intersect_box(origin: Point3, dir: Point3, b: &OrientedBox) -> Option<(f64, Point3)> {
    let inv = Mat3::rot_z(-b.yaw);
    let o = inv.mul_vec(origin.sub(b.center));
    let d = inv.mul_vec(dir);
    let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let oc = [o.x, o.y, o.z];
    let dc = [d.x, d.y, d.z];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0usize;
    let mut sign = 0.0;
    for i in 0..3 {
        if dc[i].abs() < 1e-12 {
            if oc[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let mut t0 = (-half[i] - oc[i]) / dc[i];
        let mut t1 = (half[i] - oc[i]) / dc[i];
        let mut s = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            s = 1.0;
        }
        if t0 > t_enter {
            t_enter = t0;
            axis = i;
            sign = s;
        }
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_enter <= 1e-9 {
        return None; // inside or behind
    }
    let mut n_local = [0.0; 3];
    n_local[axis] = sign;
    let n = Mat3::rot_z(b.yaw).mul_vec(Point3::new(n_local[0], n_local[1], n_local[2]));
    Some((t_enter, n))
}

/// Nearest intersection among the ground plane and all boxes within `t_max`.
pub fn intersect_scene(origin: Point3, dir: Point3, scene: &SceneSpec, t_max: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if dir.z < -1e-12 {
        let t = (scene.ground_z - origin.z) / dir.z;
        if t > 1e-9 && t <= t_max {
            best = Some(Hit {
                t,
                normal: Point3::new(0.0, 0.0, 1.0),
                albedo: GROUND_ALBEDO,
                category: None,
            });
        }
    }
    for b in &scene.boxes {
        if let Some((t, n)) = intersect_box(origin, dir, b) {
            if t <= t_max && best.as_ref().map_or(true, |h| t < h.t) {
                best = Some(Hit {
                    t,
                    normal: n,
                    albedo: b.albedo,
                    category: Some(b.category),
                });
            }
        }
    }
    best
}

/// Casts one ray per (beam, azimuth-bin-center) from the origin; intensity
/// is albedo times |cos incidence|; misses stay (0, 0).
pub fn raycast_lidar(scene: &SceneSpec, spec: &LidarSpec) -> RangeImage {
    let mut img = RangeImage::zeros(spec.clone());
    let origin = Point3::new(0.0, 0.0, 0.0);
    for row in 0..spec.num_beams() {
        let phi = spec.beam_elevations[row];
        for col in 0..spec.num_azimuth_bins {
            let dir = spherical_to_cart(Spherical {
                r: 1.0,
                theta: spec.azimuth_of_col(col),
                phi,
            });
            if let Some(hit) = intersect_scene(origin, dir, scene, spec.r_max) {
                let intensity = hit.albedo * hit.normal.dot(dir).abs();
                img.set(
                    row,
                    col,
                    (hit.t / spec.r_max) as f32,
                    intensity.clamp(0.0, 1.0) as f32,
                );
            }
        }
    }
    img
}

/// Ambient floor of the Lambertian term.
const AMBIENT: f64 = 0.25;
const FOG_GREY: f64 = 0.5;
const SKY_ZENITH: [f64; 3] = [0.35, 0.50, 0.75];
const SKY_HORIZON: [f64; 3] = [0.75, 0.78, 0.82];
const GROUND_TINT: [f64; 3] = [0.80, 0.85, 0.80];

/// Renders all views and exact per-pixel depth (camera-z, infinity for sky).
pub fn render_views(scene: &SceneSpec, rig: &CameraRig) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let brightness = scene.tags.brightness.factor();
    let fog = scene.tags.weather == WeatherTag::Fog;
    rig.cameras
        .par_iter()
        .map(|cam| {
            let (w, h) = (cam.width, cam.height);
            let mut img = vec![0.0f32; h * w * 3];
            let mut depth = vec![f32::INFINITY; h * w];
            let origin = cam.center();
            for i in 0..h {
                for j in 0..w {
                    let (u, v) = (j as f64 + 0.5, i as f64 + 0.5);
                    let dir = cam.pixel_ray(u, v);
                    // z-component of the unit ray in the camera frame, for
                    // euclidean-distance -> camera-depth conversion.
                    let wc = Point3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
                    let cosz = 1.0 / wc.norm();
                    let mut rgb;
                    let mut dist = f64::INFINITY;
                    match intersect_scene(origin, dir, scene, 1e4) {
                        Some(hit) => {
                            dist = hit.t;
                            depth[i * w + j] = (hit.t * cosz) as f32;
                            let lambert = AMBIENT
                                + (1.0 - AMBIENT) * hit.normal.dot(scene.sun_direction).max(0.0);
                            let tint = match hit.category {
                                None => GROUND_TINT,
                                Some(c) => c.tint(),
                            };
                            rgb = [0.0; 3];
                            for (o, t) in rgb.iter_mut().zip(tint) {
                                *o = hit.albedo * t * lambert * brightness;
                            }
                        }
                        None => {
                            let elev = dir.z.asin();
                            let f = ((elev + 0.2) / 0.7).clamp(0.0, 1.0);
                            rgb = [0.0; 3];
                            for k in 0..3 {
                                rgb[k] = (SKY_HORIZON[k] * (1.0 - f) + SKY_ZENITH[k] * f)
                                    * brightness;
                            }
                        }
                    }
                    if fog {
                        let mix = 1.0 - (-dist / FOG_LENGTH).exp();
                        for c in rgb.iter_mut() {
                            *c = *c * (1.0 - mix) + FOG_GREY * mix;
                        }
                    }
                    for k in 0..3 {
                        img[(i * w + j) * 3 + k] = rgb[k].clamp(0.0, 1.0) as f32;
                    }
                }
            }
            (img, depth)
        })
        .unzip()
}

/// One paired training sample: range image, views, exact depth, conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub range_image: RangeImage,
    /// Per view, H x W x 3 row-major in [0, 1].
    pub images: Vec<Vec<f32>>,
    /// Per view, H x W camera-z depth, +inf for sky.
    pub depth_gt: Vec<Vec<f32>>,
    pub boxes: Vec<OrientedBox>,
    pub tags: SceneTags,
    pub rig: CameraRig,
    pub lidar: LidarSpec,
}

/// Builds the full record for one seed.
pub fn simulate_scene(
    seed: u64,
    cfg: &SimConfig,
    lidar: &LidarSpec,
    rig: &CameraRig,
) -> Result<SceneRecord, SimError> {
    let scene = generate_scene(seed, cfg)?;
    let range_image = raycast_lidar(&scene, lidar);
    let (images, depth_gt) = render_views(&scene, rig);
    Ok(SceneRecord {
        range_image,
        images,
        depth_gt,
        boxes: scene.boxes,
        tags: scene.tags,
        rig: rig.clone(),
        lidar: lidar.clone(),
    })
}

/// The toy rig: `v` cameras ringing the sensor clockwise (camera i+1 adjoins
/// camera i's right image edge), horizontal FOV `hfov` radians.
pub fn make_rig(v: usize, width: usize, height: usize, hfov: f64) -> CameraRig {
    let f = width as f64 / 2.0 / (hfov / 2.0).tan();
    let cams = (0..v)
        .map(|i| {
            let yaw = -(std::f64::consts::TAU / v as f64) * i as f64;
            let fwd = Point3::new(yaw.cos(), yaw.sin(), 0.0);
            let right = Point3::new(yaw.sin(), -yaw.cos(), 0.0);
            let down = Point3::new(0.0, 0.0, -1.0);
            let rot = Mat3::from_rows(
                [right.x, right.y, right.z],
                [down.x, down.y, down.z],
                [fwd.x, fwd.y, fwd.z],
            );
            let center = Point3::new(CAMERA_RADIUS * yaw.cos(), CAMERA_RADIUS * yaw.sin(), CAMERA_Z);
            let t = rot.mul_vec(center).scale(-1.0);
            CameraParams {
                rotation: rot,
                translation: [t.x, t.y, t.z],
                fx: f,
                fy: f,
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
                width,
                height,
            }
        })
        .collect();
    CameraRig::new(cams).expect("toy rig is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::range_image_to_points;
    use approx::assert_relative_eq;

    fn toy_lidar() -> LidarSpec {
        LidarSpec::uniform(16, -15f64.to_radians(), 5f64.to_radians(), 256, 40.0)
    }

    fn toy_rig() -> CameraRig {
        make_rig(4, 64, 32, 100f64.to_radians())
    }

    #[test]
    fn scene_determinism() {
        let cfg = SimConfig::default();
        let a = generate_scene(123, &cfg).unwrap();
        let b = generate_scene(123, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(124, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scene_constraints_hold() {
        let cfg = SimConfig::default();
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!((cfg.min_boxes..=cfg.max_boxes).contains(&s.boxes.len()));
            for b in &s.boxes {
                let r = (b.center.x * b.center.x + b.center.y * b.center.y).sqrt();
                assert!(r <= cfg.placement_radius + 1e-9);
                assert_relative_eq!(b.center.z, GROUND_Z + b.size[2] / 2.0, epsilon = 1e-12);
                assert!((0.1..=0.9).contains(&b.albedo));
            }
        }
    }

    /// Brute-force polygon intersection via fine point sampling, as an
    /// independent check of the SAT-based placement test.
    fn overlap_bruteforce(a: &OrientedBox, b: &OrientedBox) -> bool {
        let inside = |bx: &OrientedBox, x: f64, y: f64| {
            let inv = Mat3::rot_z(-bx.yaw);
            let p = inv.mul_vec(Point3::new(x - bx.center.x, y - bx.center.y, 0.0));
            p.x.abs() <= bx.size[0] / 2.0 && p.y.abs() <= bx.size[1] / 2.0
        };
        let grid = 40;
        for i in 0..=grid {
            for j in 0..=grid {
                let inv = Mat3::rot_z(a.yaw);
                let lx = a.size[0] * (i as f64 / grid as f64 - 0.5);
                let ly = a.size[1] * (j as f64 / grid as f64 - 0.5);
                let p = inv.mul_vec(Point3::new(lx, ly, 0.0));
                if inside(b, p.x + a.center.x, p.y + a.center.y) {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn footprints_never_overlap() {
        let cfg = SimConfig::default();
        for seed in 0..300 {
            let s = generate_scene(seed, &cfg).unwrap();
            for i in 0..s.boxes.len() {
                for j in i + 1..s.boxes.len() {
                    assert!(
                        !overlap_bruteforce(&s.boxes[i], &s.boxes[j]),
                        "seed {seed} boxes {i},{j} overlap"
                    );
                }
            }
        }
    }

    #[test]
    fn ground_range_analytic() {
        let cfg = SimConfig::default();
        let mut scene = generate_scene(1, &cfg).unwrap();
        scene.boxes.clear();
        let spec = toy_lidar();
        let img = raycast_lidar(&scene, &spec);
        // Lowest beam at -15 degrees hits ground at 1.8 / sin(15 deg).
        let want = 1.8 / 15f64.to_radians().sin();
        for col in 0..spec.num_azimuth_bins {
            let (r, i) = img.get(0, col);
            assert_relative_eq!(r as f64 * spec.r_max, want, epsilon = 1e-4);
            assert!(i > 0.0);
        }
        // Beam at +5 degrees never meets the ground.
        let top = spec.num_beams() - 1;
        for col in 0..spec.num_azimuth_bins {
            assert_eq!(img.get(top, col), (0.0, 0.0));
        }
    }

    /// Independent slab test in the box frame for the raycast oracle.
    fn slab_oracle(origin: Point3, dir: Point3, b: &OrientedBox) -> Option<f64> {
        let inv = Mat3::rot_z(-b.yaw);
        let o = inv.mul_vec(origin.sub(b.center));
        let d = inv.mul_vec(dir);
        let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
        let mut t0: f64 = 1e-12;
        let mut t1 = f64::INFINITY;
        for (oc, (dc, hz)) in [o.x, o.y, o.z]
            .iter()
            .zip([d.x, d.y, d.z].iter().zip(half))
        {
            if dc.abs() < 1e-12 {
                if oc.abs() > hz {
                    return None;
                }
                continue;
            }
            let a = (-hz - oc) / dc;
            let b2 = (hz - oc) / dc;
            t0 = t0.max(a.min(b2));
            t1 = t1.min(a.max(b2));
        }
        (t0 <= t1 && t0 > 1e-9).then_some(t0)
    }

    #[test]
    fn box_range_matches_slab_oracle() {
        let b = OrientedBox {
            center: Point3::new(8.0, 1.0, GROUND_Z + 0.8),
            size: [2.0, 1.5, 1.6],
            yaw: 0.4,
            category: Category::Car,
            albedo: 0.7,
        };
        let scene = SceneSpec {
            seed: 0,
            ground_z: GROUND_Z,
            boxes: vec![b.clone()],
            tags: SceneTags {
                brightness: BrightnessTag::Day,
                weather: WeatherTag::Clear,
            },
            sun_direction: Point3::new(0.0, 0.0, 1.0),
        };
        let spec = toy_lidar();
        let img = raycast_lidar(&scene, &spec);
        let origin = Point3::new(0.0, 0.0, 0.0);
        let mut hits = 0;
        for row in 0..spec.num_beams() {
            for col in 0..spec.num_azimuth_bins {
                let dir = spherical_to_cart(Spherical {
                    r: 1.0,
                    theta: spec.azimuth_of_col(col),
                    phi: spec.beam_elevations[row],
                });
                if let Some(t) = slab_oracle(origin, dir, &b) {
                    if t <= spec.r_max {
                        let (r, _) = img.get(row, col);
                        assert!(r > 0.0);
                        // Range image may record the ground instead only if
                        // the ground is nearer; never true along box rays
                        // that enter above ground.
                        let got = r as f64 * spec.r_max;
                        if (got - t).abs() > 1e-5 * spec.r_max {
                            // Must be a nearer ground hit.
                            assert!(got < t);
                        } else {
                            hits += 1;
                        }
                    }
                }
            }
        }
        assert!(hits > 3, "box should receive several returns, got {hits}");
    }

    #[test]
    fn night_is_scaled_day() {
        let cfg = SimConfig::default();
        let mut scene = generate_scene(5, &cfg).unwrap();
        scene.tags.weather = WeatherTag::Clear;
        scene.tags.brightness = BrightnessTag::Day;
        let rig = toy_rig();
        let (day, depth) = render_views(&scene, &rig);
        scene.tags.brightness = BrightnessTag::Night;
        let (night, _) = render_views(&scene, &rig);
        for v in 0..rig.len() {
            for (i, &d) in depth[v].iter().enumerate() {
                if d.is_finite() {
                    for k in 0..3 {
                        assert_relative_eq!(
                            night[v][i * 3 + k],
                            0.3 * day[v][i * 3 + k],
                            epsilon = 1e-6
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn depth_consistent_with_lidar() {
        // Cross-sensor truth for co-visible smooth surfaces. Depth edges on
        // either sensor are excluded (the half-bin angular offset between
        // sensors is unbounded in depth across a discontinuity) and points
        // hidden from the offset camera by a nearer surface are skipped; a
        // camera claiming to see PAST a LiDAR surface is a hard failure.
        let cfg = SimConfig::default();
        let spec = toy_lidar();
        let rig = toy_rig();
        let mut checked = 0;
        for seed in [9, 21, 33] {
            let scene = generate_scene(seed, &cfg).unwrap();
            let img = raycast_lidar(&scene, &spec);
            let (_, depth) = render_views(&scene, &rig);
            for row in 1..img.height() - 1 {
                for col in 0..img.width() {
                    let (r_norm, _) = img.get(row, col);
                    if r_norm <= crate::geometry::EMPTY_RANGE_THRESHOLD {
                        continue;
                    }
                    // Source-side smoothness across the 3x3 bin neighborhood.
                    let r0 = r_norm as f64;
                    let mut smooth = true;
                    for di in -1i32..=1 {
                        for dj in -1i32..=1 {
                            let rr = img
                                .get(
                                    (row as i32 + di) as usize,
                                    (col as i32 + dj).rem_euclid(img.width() as i32) as usize,
                                )
                                .0 as f64;
                            if (rr - r0).abs() > 0.03 * r0 {
                                smooth = false;
                            }
                        }
                    }
                    if !smooth {
                        continue;
                    }
                    let p = spherical_to_cart(Spherical {
                        r: r0 * spec.r_max,
                        theta: spec.azimuth_of_col(col),
                        phi: spec.beam_elevations[row],
                    });
                    for (v, cam) in rig.cameras.iter().enumerate() {
                        let pr = crate::geometry::project_to_camera(p, cam);
                        if !pr.valid
                            || pr.u >= cam.width as f64 - 1.5
                            || pr.v >= cam.height as f64 - 1.5
                            || pr.u < 1.5
                            || pr.v < 1.5
                        {
                            continue;
                        }
                        let (i, j) = (pr.v as usize, pr.u as usize);
                        let d = depth[v][i * cam.width + j] as f64;
                        if !d.is_finite() {
                            continue;
                        }
                        let mut lo = f64::INFINITY;
                        let mut hi = 0.0f64;
                        for di in -1i32..=1 {
                            for dj in -1i32..=1 {
                                let dn = depth[v][(i as i32 + di) as usize * cam.width
                                    + (j as i32 + dj) as usize]
                                    as f64;
                                lo = lo.min(dn);
                                hi = hi.max(dn);
                            }
                        }
                        if !hi.is_finite() || hi - lo > 0.05 * d {
                            continue; // depth edge under the landing pixel
                        }
                        if (d - pr.depth).abs() <= 0.02 * pr.depth + 0.05 {
                            checked += 1;
                        } else {
                            assert!(
                                d < pr.depth,
                                "seed {seed} view {v}: camera sees {d} past LiDAR surface {}",
                                pr.depth
                            );
                        }
                    }
                }
            }
        }
        assert!(checked > 300, "checked {checked}");
    }

    #[test]
    fn every_visible_box_gets_returns() {
        // A box the raycaster can actually see first (not occluded by
        // another box, within r_max, inside the beam cone) must survive the
        // range-image codec with at least one decodable return.
        let cfg = SimConfig::default();
        let spec = toy_lidar();
        let mut boxes_checked = 0;
        for seed in 0..60 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let img = raycast_lidar(&scene, &spec);
            let pts = range_image_to_points(&img);
            for b in &scene.boxes {
                let visible = (0..spec.num_beams()).any(|row| {
                    (0..spec.num_azimuth_bins).any(|col| {
                        let dir = spherical_to_cart(Spherical {
                            r: 1.0,
                            theta: spec.azimuth_of_col(col),
                            phi: spec.beam_elevations[row],
                        });
                        match intersect_scene(Point3::new(0.0, 0.0, 0.0), dir, &scene, spec.r_max)
                        {
                            Some(hit) => {
                                hit.category == Some(b.category)
                                    && intersect_box(Point3::new(0.0, 0.0, 0.0), dir, b)
                                        .is_some_and(|(t, _)| (t - hit.t).abs() < 1e-9)
                            }
                            None => false,
                        }
                    })
                });
                if !visible {
                    continue;
                }
                let inv = Mat3::rot_z(-b.yaw);
                let got = pts.iter().any(|(p, _)| {
                    let q = inv.mul_vec(p.sub(b.center));
                    q.x.abs() <= b.size[0] / 2.0 + 0.3
                        && q.y.abs() <= b.size[1] / 2.0 + 0.3
                        && q.z.abs() <= b.size[2] / 2.0 + 0.3
                });
                assert!(got, "seed {seed} box at {:?} has no return", b.center);
                boxes_checked += 1;
            }
        }
        assert!(boxes_checked > 100, "only {boxes_checked} visible boxes");
    }

    #[test]
    fn adjacent_camera_halves_overlap() {
        // The ring is clockwise: view v's left image half must share rays
        // with view left_of(v)'s right half.
        let rig = toy_rig();
        for v in 0..rig.len() {
            let l = rig.left_of(v);
            let cam_v = &rig.cameras[v];
            let cam_l = &rig.cameras[l];
            // Leftmost column center ray of v.
            let ray = cam_v.pixel_ray(0.5, cam_v.height as f64 / 2.0);
            // A distant point along it must project into l's right half.
            let p = cam_v.center().add(ray.scale(30.0));
            let pr = crate::geometry::project_to_camera(p, cam_l);
            assert!(pr.valid, "view {l} should see view {v}'s left edge");
            assert!(pr.u > cam_l.width as f64 / 2.0);
        }
    }
}
