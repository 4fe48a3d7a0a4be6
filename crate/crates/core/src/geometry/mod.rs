//! Coordinate mathematics shared by the simulator, the networks, and the
//! metrics: spherical/Cartesian transforms, the range-image codec, pinhole
//! projection, linear-increasing discretization, bilinear sampling, and
//! epipolar sample-set construction.
//!
//! Everything here is a pure function of its inputs and safe to call from
//! any number of threads.

mod epipolar;

pub use epipolar::{
    epipolar_cam_from_range, epipolar_range_from_pixel, CamEpipolarSample, CamHit,
    RangeEpipolarSample,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("backprojection requires depth > 0, got {0}")]
    NonPositiveDepth(f64),
    #[error("lid_bins requires 0 < min < max and K >= 1 (min={min}, max={max}, k={k})")]
    BadBins { min: f64, max: f64, k: usize },
    #[error("invalid lidar spec: {0}")]
    BadLidarSpec(String),
    #[error("invalid camera params: {0}")]
    BadCamera(String),
    #[error("invalid camera rig: {0}")]
    BadRig(String),
}

/// Point in the ego/world frame, meters, LiDAR at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Row-major 3x3 matrix; just enough linear algebra for camera work.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Self {
        Mat3([r0, r1, r2])
    }

    /// Rotation about the world z axis by `yaw` radians.
    pub fn rot_z(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn mul_vec(&self, v: Point3) -> Point3 {
        let m = &self.0;
        Point3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }
}

/// Spherical coordinates: `r` meters, `theta` azimuth in [-pi, pi),
/// `phi` elevation in (-pi/2, pi/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spherical {
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

/// r = |p|, theta = atan2(y, x) with atan2(0, 0) := 0, phi = atan2(z, hypot(x, y)).
pub fn cart_to_spherical(p: Point3) -> Spherical {
    let rxy = (p.x * p.x + p.y * p.y).sqrt();
    let r = (rxy * rxy + p.z * p.z).sqrt();
    let theta = if p.x == 0.0 && p.y == 0.0 {
        0.0
    } else {
        p.y.atan2(p.x)
    };
    let phi = if rxy == 0.0 && p.z == 0.0 {
        0.0
    } else {
        p.z.atan2(rxy)
    };
    Spherical { r, theta, phi }
}

/// Inverse of [`cart_to_spherical`]: x = r cos(phi) cos(theta),
/// y = r cos(phi) sin(theta), z = r sin(phi).
pub fn spherical_to_cart(s: Spherical) -> Point3 {
    let (st, ct) = s.theta.sin_cos();
    let (sp, cp) = s.phi.sin_cos();
    Point3::new(s.r * cp * ct, s.r * cp * st, s.r * sp)
}

/// Beam table and azimuth binning for one LiDAR.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarSpec {
    /// Elevation per row, radians, strictly increasing. Row 0 is the lowest beam.
    pub beam_elevations: Vec<f64>,
    /// Number of azimuth columns; column 0 starts at theta = -pi.
    pub num_azimuth_bins: usize,
    /// Range normalization bound, meters.
    pub r_max: f64,
}

impl LidarSpec {
    pub fn new(
        beam_elevations: Vec<f64>,
        num_azimuth_bins: usize,
        r_max: f64,
    ) -> Result<Self, GeometryError> {
        if beam_elevations.is_empty() {
            return Err(GeometryError::BadLidarSpec("no beams".into()));
        }
        if beam_elevations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GeometryError::BadLidarSpec(
                "beam elevations must be strictly increasing".into(),
            ));
        }
        if num_azimuth_bins == 0 {
            return Err(GeometryError::BadLidarSpec("no azimuth bins".into()));
        }
        if !(r_max > 0.0) {
            return Err(GeometryError::BadLidarSpec("r_max must be > 0".into()));
        }
        Ok(Self {
            beam_elevations,
            num_azimuth_bins,
            r_max,
        })
    }

    /// Beams uniformly spaced in [lo, hi] (inclusive endpoints).
    pub fn uniform(num_beams: usize, lo: f64, hi: f64, bins: usize, r_max: f64) -> Self {
        let beams = (0..num_beams)
            .map(|i| lo + (hi - lo) * i as f64 / (num_beams.max(2) - 1) as f64)
            .collect();
        Self::new(beams, bins, r_max).expect("uniform spec is valid")
    }

    pub fn num_beams(&self) -> usize {
        self.beam_elevations.len()
    }

    /// Bin-center azimuth of column j.
    pub fn azimuth_of_col(&self, j: usize) -> f64 {
        -std::f64::consts::PI
            + (j as f64 + 0.5) * std::f64::consts::TAU / self.num_azimuth_bins as f64
    }

    /// Column index for azimuth theta in [-pi, pi), clamped to the grid.
    pub fn col_of_azimuth(&self, theta: f64) -> usize {
        let w = self.num_azimuth_bins;
        let raw = ((theta + std::f64::consts::PI) / std::f64::consts::TAU * w as f64).floor();
        (raw.max(0.0) as usize).min(w - 1)
    }

    /// Index of the beam nearest to `phi`, with the distance to it.
    pub fn nearest_beam(&self, phi: f64) -> (usize, f64) {
        let beams = &self.beam_elevations;
        let i = match beams.binary_search_by(|b| b.partial_cmp(&phi).unwrap()) {
            Ok(i) => i,
            Err(ins) => {
                if ins == 0 {
                    0
                } else if ins == beams.len() {
                    beams.len() - 1
                } else if (phi - beams[ins - 1]).abs() <= (beams[ins] - phi).abs() {
                    ins - 1
                } else {
                    ins
                }
            }
        };
        (i, (phi - beams[i]).abs())
    }

    /// Continuous row coordinate for elevation `phi`, interpolated against the
    /// beam table. None when `phi` lies outside the beam span.
    pub fn row_of_elevation(&self, phi: f64) -> Option<f64> {
        let beams = &self.beam_elevations;
        if phi < beams[0] || phi > beams[beams.len() - 1] {
            return None;
        }
        if beams.len() == 1 {
            return Some(0.0);
        }
        let mut i = match beams.binary_search_by(|b| b.partial_cmp(&phi).unwrap()) {
            Ok(i) => return Some(i as f64),
            Err(ins) => ins,
        };
        i = i.clamp(1, beams.len() - 1);
        let lo = beams[i - 1];
        let hi = beams[i];
        Some((i - 1) as f64 + (phi - lo) / (hi - lo))
    }

    /// Half of the beam gap adjacent to beam `i` on the side of `phi`; the
    /// acceptance window for snapping an elevation onto that beam.
    fn snap_tolerance(&self, i: usize, phi: f64) -> f64 {
        let beams = &self.beam_elevations;
        if beams.len() == 1 {
            return f64::INFINITY;
        }
        let gap = if phi >= beams[i] {
            if i + 1 < beams.len() {
                beams[i + 1] - beams[i]
            } else {
                beams[i] - beams[i - 1]
            }
        } else if i > 0 {
            beams[i] - beams[i - 1]
        } else {
            beams[1] - beams[0]
        };
        gap * 0.5
    }

    /// Coarsened spec for a latent grid downsampled by `factor` in both axes:
    /// each latent row covers `factor` consecutive beams (elevation = their
    /// mean), columns merge uniformly.
    pub fn downsample(&self, factor: usize) -> LidarSpec {
        assert!(factor >= 1 && self.num_beams() % factor == 0);
        assert!(self.num_azimuth_bins % factor == 0);
        let beams = self
            .beam_elevations
            .chunks(factor)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        LidarSpec {
            beam_elevations: beams,
            num_azimuth_bins: self.num_azimuth_bins / factor,
            r_max: self.r_max,
        }
    }
}

/// Dense panoramic grid of normalized (range, intensity) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub spec: LidarSpec,
    /// Row-major H x W x 2; channel 0 = r / r_max, channel 1 = intensity.
    /// Empty pixels are exactly (0, 0).
    data: Vec<f32>,
}

impl RangeImage {
    pub fn zeros(spec: LidarSpec) -> Self {
        let n = spec.num_beams() * spec.num_azimuth_bins * 2;
        Self {
            spec,
            data: vec![0.0; n],
        }
    }

    pub fn from_data(spec: LidarSpec, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), spec.num_beams() * spec.num_azimuth_bins * 2);
        Self { spec, data }
    }

    pub fn height(&self) -> usize {
        self.spec.num_beams()
    }

    pub fn width(&self) -> usize {
        self.spec.num_azimuth_bins
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> (f32, f32) {
        let i = (row * self.width() + col) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, range_norm: f32, intensity: f32) {
        let w = self.width();
        let i = (row * w + col) * 2;
        self.data[i] = range_norm;
        self.data[i + 1] = intensity;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Decode threshold: pixels with normalized range at or below this are empty.
pub const EMPTY_RANGE_THRESHOLD: f32 = 1e-4;

/// Quantize a point list into a range image. Nearest return wins per bin;
/// points beyond r_max, at the origin, or with elevation outside half the
/// local beam gap are dropped.
pub fn points_to_range_image(points: &[(Point3, f64)], spec: &LidarSpec) -> RangeImage {
    let mut img = RangeImage::zeros(spec.clone());
    for &(p, intensity) in points {
        debug_assert!((0.0..=1.0).contains(&intensity));
        let s = cart_to_spherical(p);
        if s.r > spec.r_max || s.r < 1e-9 {
            continue;
        }
        let (row, dist) = spec.nearest_beam(s.phi);
        if dist > spec.snap_tolerance(row, s.phi) {
            continue;
        }
        let col = spec.col_of_azimuth(s.theta);
        let (prev_r, _) = img.get(row, col);
        let r_norm = (s.r / spec.r_max) as f32;
        if prev_r == 0.0 || r_norm < prev_r {
            img.set(row, col, r_norm, intensity as f32);
        }
    }
    img
}

/// Decode a range image back to points at bin-center rays. Pixels at or
/// below [`EMPTY_RANGE_THRESHOLD`] are skipped.
pub fn range_image_to_points(img: &RangeImage) -> Vec<(Point3, f64)> {
    let spec = &img.spec;
    let mut out = Vec::new();
    for row in 0..img.height() {
        let phi = spec.beam_elevations[row];
        for col in 0..img.width() {
            let (r_norm, intensity) = img.get(row, col);
            if r_norm <= EMPTY_RANGE_THRESHOLD {
                continue;
            }
            let s = Spherical {
                r: r_norm as f64 * spec.r_max,
                theta: spec.azimuth_of_col(col),
                phi,
            };
            out.push((spherical_to_cart(s), intensity as f64));
        }
    }
    out
}

/// One pinhole camera: world-to-camera extrinsics plus intrinsics.
/// Camera frame: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    pub rotation: Mat3,
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraParams {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if (self.rotation.det() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::BadCamera(format!(
                "rotation determinant {} != 1",
                self.rotation.det()
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::BadCamera("focal lengths must be > 0".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::BadCamera("zero image size".into()));
        }
        Ok(())
    }

    pub fn k_matrix(&self) -> Mat3 {
        Mat3([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])
    }

    /// World-frame camera center (solves R c + t = 0).
    pub fn center(&self) -> Point3 {
        let t = Point3::new(self.translation[0], self.translation[1], self.translation[2]);
        self.rotation.transpose().mul_vec(t).scale(-1.0)
    }

    /// World-frame ray direction through pixel (u, v), unit length.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Point3 {
        let d_cam = Point3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let d = self.rotation.transpose().mul_vec(d_cam);
        d.scale(1.0 / d.norm())
    }
}

/// Result of projecting a world point into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Depth along the camera z axis, meters.
    pub depth: f64,
    /// True iff depth > 1e-6 and (u, v) lies in [0, width] x [0, height].
    pub valid: bool,
}

pub fn project_to_camera(p: Point3, cam: &CameraParams) -> Projection {
    let pc = cam.rotation.mul_vec(p).add(Point3::new(
        cam.translation[0],
        cam.translation[1],
        cam.translation[2],
    ));
    let d = pc.z;
    if d <= 1e-6 {
        return Projection {
            u: 0.0,
            v: 0.0,
            depth: d,
            valid: false,
        };
    }
    let u = cam.fx * pc.x / d + cam.cx;
    let v = cam.fy * pc.y / d + cam.cy;
    let valid = u >= 0.0 && u <= cam.width as f64 && v >= 0.0 && v <= cam.height as f64;
    Projection { u, v, depth: d, valid }
}

/// Inverse of [`project_to_camera`] at a known depth. Rejects d <= 0.
pub fn backproject_pixel(
    u: f64,
    v: f64,
    d: f64,
    cam: &CameraParams,
) -> Result<Point3, GeometryError> {
    if d <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(d));
    }
    let pc = Point3::new((u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d);
    let t = Point3::new(cam.translation[0], cam.translation[1], cam.translation[2]);
    Ok(cam.rotation.transpose().mul_vec(pc.sub(t)))
}

/// Ordered camera ring; index i's neighbors wrap around.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<CameraParams>,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraParams>) -> Result<Self, GeometryError> {
        if cameras.len() < 2 {
            return Err(GeometryError::BadRig("need at least 2 cameras".into()));
        }
        for c in &cameras {
            c.validate()?;
        }
        Ok(Self { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// View whose frustum adjoins view v's left image edge.
    pub fn left_of(&self, v: usize) -> usize {
        (v + self.len() - 1) % self.len()
    }

    /// View whose frustum adjoins view v's right image edge.
    pub fn right_of(&self, v: usize) -> usize {
        (v + 1) % self.len()
    }
}

/// v_k = min + (max - min) * k(k+1) / (K(K+1)) for k = 1..=K. Gaps grow
/// linearly with index, so samples concentrate near the sensor.
pub fn lid_bins(min_val: f64, max_val: f64, k: usize) -> Result<Vec<f64>, GeometryError> {
    if !(min_val > 0.0 && min_val < max_val) || k == 0 {
        return Err(GeometryError::BadBins {
            min: min_val,
            max: max_val,
            k,
        });
    }
    let denom = (k * (k + 1)) as f64;
    Ok((1..=k)
        .map(|i| min_val + (max_val - min_val) * (i * (i + 1)) as f64 / denom)
        .collect())
}

/// One corner of a bilinear footprint: (row, col, weight).
pub type BilinearTap = (usize, usize, f64);

/// Bilinear footprint for normalized coordinates (u, v) on an H x W grid.
/// Columns map as u * (W - 1), or u * W - 0.5 modulo W when `wrap_x` (bin
/// centers at (j + 0.5) / W, seam interpolation across the last/first
/// column). Rows always map as v * (H - 1). Returns None outside [0, 1]^2.
pub fn bilinear_taps(h: usize, w: usize, u: f64, v: f64, wrap_x: bool) -> Option<[BilinearTap; 4]> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) || h == 0 || w == 0 {
        return None;
    }
    let y = v * (h - 1) as f64;
    let i0 = (y.floor() as usize).min(h - 1);
    let i1 = (i0 + 1).min(h - 1);
    let fy = y - i0 as f64;

    let (j0, j1, fx) = if wrap_x {
        let x = (u * w as f64 - 0.5).rem_euclid(w as f64);
        let j0 = (x.floor() as usize).min(w - 1);
        (j0, (j0 + 1) % w, x - x.floor())
    } else {
        let x = u * (w - 1) as f64;
        let j0 = (x.floor() as usize).min(w - 1);
        (j0, (j0 + 1).min(w - 1), x - j0 as f64)
    };

    Some([
        (i0, j0, (1.0 - fy) * (1.0 - fx)),
        (i0, j1, (1.0 - fy) * fx),
        (i1, j0, fy * (1.0 - fx)),
        (i1, j1, fy * fx),
    ])
}

/// Bilinear interpolation of an H x W x C grid at normalized (u, v).
/// Out-of-bounds coordinates yield (zeros, false).
pub fn bilinear_sample(
    grid: &[f64],
    h: usize,
    w: usize,
    c: usize,
    u: f64,
    v: f64,
    wrap_x: bool,
) -> (Vec<f64>, bool) {
    assert_eq!(grid.len(), h * w * c);
    match bilinear_taps(h, w, u, v, wrap_x) {
        None => (vec![0.0; c], false),
        Some(taps) => {
            let mut out = vec![0.0; c];
            for (i, j, wt) in taps {
                let base = (i * w + j) * c;
                for (o, g) in out.iter_mut().zip(&grid[base..base + c]) {
                    *o += wt * g;
                }
            }
            (out, true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn cart_to_spherical_examples() {
        let s = cart_to_spherical(Point3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(s.r, 1.0);
        assert_eq!(s.theta, 0.0);
        assert_relative_eq!(s.phi, FRAC_PI_2);

        let s = cart_to_spherical(Point3::new(3.0, 4.0, 0.0));
        assert_relative_eq!(s.r, 5.0);
        assert_relative_eq!(s.theta, 0.9272952180016122, epsilon = 1e-12);
        assert_eq!(s.phi, 0.0);

        let s = cart_to_spherical(Point3::new(1.0, 1.0, 2f64.sqrt()));
        assert_relative_eq!(s.r, 2.0, epsilon = 1e-12);
        assert_relative_eq!(s.theta, FRAC_PI_4);
        assert_relative_eq!(s.phi, FRAC_PI_4);
    }

    #[test]
    fn spherical_to_cart_examples() {
        let p = spherical_to_cart(Spherical { r: 1.0, theta: 0.0, phi: 0.0 });
        assert_relative_eq!(p.x, 1.0);
        assert_relative_eq!(p.y, 0.0);
        assert_relative_eq!(p.z, 0.0);

        let p = spherical_to_cart(Spherical { r: 2.0, theta: FRAC_PI_4, phi: FRAC_PI_4 });
        assert_relative_eq!(p.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.z, 2f64.sqrt(), epsilon = 1e-12);

        let p = spherical_to_cart(Spherical { r: 5.0, theta: 0.9272952, phi: 0.0 });
        let s = cart_to_spherical(p);
        assert_relative_eq!(s.r, 5.0, epsilon = 1e-9);
        assert_relative_eq!(s.theta, 0.9272952, epsilon = 1e-9);
    }

    #[test]
    fn round_trip_random() {
        let mut rng = CounterRng::for_stream(11, "geom-test");
        for _ in 0..1000 {
            let s = Spherical {
                r: rng.uniform_in(0.1, 50.0),
                theta: rng.uniform_in(-PI, PI),
                phi: rng.uniform_in(-1.4, 1.4),
            };
            let s2 = cart_to_spherical(spherical_to_cart(s));
            assert_relative_eq!(s.r, s2.r, epsilon = 1e-9);
            assert_relative_eq!(s.theta, s2.theta, epsilon = 1e-9);
            assert_relative_eq!(s.phi, s2.phi, epsilon = 1e-9);
        }
    }

    fn toy_spec() -> LidarSpec {
        LidarSpec::uniform(8, -0.26, 0.09, 64, 40.0)
    }

    #[test]
    fn points_to_range_image_empty() {
        let img = points_to_range_image(&[], &toy_spec());
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn points_to_range_image_single_bin() {
        let spec = toy_spec();
        let phi = spec.beam_elevations[3];
        // theta = 0 lands in column floor(0.5 * W) = W / 2.
        let p = spherical_to_cart(Spherical { r: 10.0, theta: 1e-9, phi });
        let img = points_to_range_image(&[(p, 0.5)], &spec);
        let mut nonzero = Vec::new();
        for row in 0..img.height() {
            for col in 0..img.width() {
                let (r, _) = img.get(row, col);
                if r > 0.0 {
                    nonzero.push((row, col));
                }
            }
        }
        assert_eq!(nonzero, vec![(3, 32)]);
        let (r, i) = img.get(3, 32);
        assert_relative_eq!(r as f64, 10.0 / 40.0, epsilon = 1e-6);
        assert_relative_eq!(i as f64, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn points_to_range_image_nearest_wins() {
        let spec = toy_spec();
        let phi = spec.beam_elevations[2];
        let a = spherical_to_cart(Spherical { r: 9.0, theta: 0.01, phi });
        let b = spherical_to_cart(Spherical { r: 5.0, theta: 0.01, phi });
        for order in [[a, b], [b, a]] {
            let pts: Vec<_> = order.iter().map(|&p| (p, 1.0)).collect();
            let img = points_to_range_image(&pts, &spec);
            let col = spec.col_of_azimuth(0.01);
            let (r, _) = img.get(2, col);
            assert_relative_eq!(r as f64, 5.0 / 40.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn points_out_of_reach_dropped() {
        let spec = toy_spec();
        let far = spherical_to_cart(Spherical { r: 45.0, theta: 0.3, phi: spec.beam_elevations[0] });
        let high = spherical_to_cart(Spherical { r: 10.0, theta: 0.3, phi: 0.5 });
        let img = points_to_range_image(&[(far, 1.0), (high, 1.0)], &spec);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_empty_and_single_pixel() {
        let spec = toy_spec();
        assert!(range_image_to_points(&RangeImage::zeros(spec.clone())).is_empty());

        let mut img = RangeImage::zeros(spec.clone());
        img.set(4, 7, 0.5, 0.25);
        let pts = range_image_to_points(&img);
        assert_eq!(pts.len(), 1);
        let s = cart_to_spherical(pts[0].0);
        assert_relative_eq!(s.r, 0.5 * 40.0, epsilon = 1e-5);
        assert_relative_eq!(s.theta, spec.azimuth_of_col(7), epsilon = 1e-6);
        assert_relative_eq!(s.phi, spec.beam_elevations[4], epsilon = 1e-6);
    }

    #[test]
    fn codec_round_trip_azimuth_bound() {
        let spec = toy_spec();
        let mut rng = CounterRng::for_stream(5, "codec");
        let mut pts = Vec::new();
        for _ in 0..500 {
            let s = Spherical {
                r: rng.uniform_in(1.0, 39.0),
                theta: rng.uniform_in(-PI, PI),
                phi: rng.uniform_in(spec.beam_elevations[0], *spec.beam_elevations.last().unwrap()),
            };
            pts.push((spherical_to_cart(s), rng.uniform()));
        }
        let img = points_to_range_image(&pts, &spec);
        let decoded = range_image_to_points(&img);
        let bound = PI / spec.num_azimuth_bins as f64;
        for (q, _) in decoded {
            let sq = cart_to_spherical(q);
            // The decoded point must sit within half a bin of some input
            // with (almost) the same range.
            let ok = pts.iter().any(|(p, _)| {
                let sp = cart_to_spherical(*p);
                let dth = (sp.theta - sq.theta).abs().min(2.0 * PI - (sp.theta - sq.theta).abs());
                (sp.r - sq.r).abs() <= sp.r * 1e-6 + 40.0 * 2f64.powi(-22) && dth <= bound + 1e-9
            });
            assert!(ok, "decoded point has no nearby source");
        }
    }

    fn test_cam() -> CameraParams {
        CameraParams {
            rotation: Mat3::identity(),
            translation: [0.0; 3],
            fx: 32.0,
            fy: 32.0,
            cx: 32.0,
            cy: 16.0,
            width: 64,
            height: 32,
        }
    }

    #[test]
    fn projection_examples() {
        let cam = test_cam();
        let p = project_to_camera(Point3::new(0.0, 0.0, 5.0), &cam);
        assert!(p.valid);
        assert_relative_eq!(p.u, 32.0);
        assert_relative_eq!(p.v, 16.0);
        assert_relative_eq!(p.depth, 5.0);

        let p = project_to_camera(Point3::new(0.0, 0.0, -5.0), &cam);
        assert!(!p.valid);

        let p = project_to_camera(Point3::new(1.0, 0.0, 4.0), &cam);
        assert!(p.valid);
        assert_relative_eq!(p.u, 40.0);
        assert_relative_eq!(p.v, 16.0);
        assert_relative_eq!(p.depth, 4.0);
    }

    #[test]
    fn backprojection_examples() {
        let cam = test_cam();
        let p = backproject_pixel(32.0, 16.0, 5.0, &cam).unwrap();
        assert_relative_eq!(p.x, 0.0);
        assert_relative_eq!(p.y, 0.0);
        assert_relative_eq!(p.z, 5.0);

        let p = backproject_pixel(40.0, 16.0, 4.0, &cam).unwrap();
        assert_relative_eq!(p.x, 1.0);
        assert_relative_eq!(p.y, 0.0);
        assert_relative_eq!(p.z, 4.0);

        assert!(backproject_pixel(1.0, 1.0, 0.0, &cam).is_err());
        assert!(backproject_pixel(1.0, 1.0, -2.0, &cam).is_err());
    }

    #[test]
    fn project_backproject_round_trip() {
        let cam = CameraParams {
            rotation: Mat3::rot_z(0.7),
            translation: [0.3, -1.2, 0.5],
            ..test_cam()
        };
        let mut rng = CounterRng::for_stream(2, "proj");
        let mut checked = 0;
        while checked < 1000 {
            let p = Point3::new(
                rng.uniform_in(-30.0, 30.0),
                rng.uniform_in(-30.0, 30.0),
                rng.uniform_in(-5.0, 5.0),
            );
            let pr = project_to_camera(p, &cam);
            if !pr.valid {
                continue;
            }
            let q = backproject_pixel(pr.u, pr.v, pr.depth, &cam).unwrap();
            assert!(q.sub(p).norm() < 1e-9, "round trip error {}", q.sub(p).norm());
            checked += 1;
        }
    }

    #[test]
    fn lid_bins_examples() {
        let bins = lid_bins(1.0, 41.0, 4).unwrap();
        assert_eq!(bins.len(), 4);
        for (got, want) in bins.iter().zip([5.0, 13.0, 25.0, 41.0]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }

        let one = lid_bins(2.0, 7.0, 1).unwrap();
        assert_eq!(one, vec![7.0]);

        let bins = lid_bins(0.5, 60.0, 9).unwrap();
        assert_relative_eq!(*bins.last().unwrap(), 60.0, epsilon = 1e-12);
        for k in 1..bins.len() - 1 {
            let ratio = (bins[k + 1] - bins[k]) / (bins[k] - bins[k - 1]);
            assert_relative_eq!(ratio, (k + 2) as f64 / (k + 1) as f64, epsilon = 1e-9);
        }

        assert!(lid_bins(5.0, 5.0, 3).is_err());
        assert!(lid_bins(1.0, 2.0, 0).is_err());
        assert!(lid_bins(-1.0, 2.0, 3).is_err());
    }

    #[test]
    fn bilinear_examples() {
        // 2x2 grid [[0,1],[2,3]], C = 1.
        let grid = [0.0, 1.0, 2.0, 3.0];
        let (v, ok) = bilinear_sample(&grid, 2, 2, 1, 0.5, 0.5, false);
        assert!(ok);
        assert_relative_eq!(v[0], 1.5);

        let (v, ok) = bilinear_sample(&grid, 2, 2, 1, 0.0, 0.0, false);
        assert!(ok);
        assert_relative_eq!(v[0], 0.0);

        let (v, ok) = bilinear_sample(&grid, 2, 2, 1, 1.2, 0.5, false);
        assert!(!ok);
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn bilinear_wrap_seam() {
        // 1x4 grid; wrap axis samples between column centers.
        let grid = [10.0, 20.0, 30.0, 40.0];
        // u = 0 is half a bin left of column 0's center: mean of cols 3 and 0.
        let (v, ok) = bilinear_sample(&grid, 1, 4, 1, 0.0, 0.0, true);
        assert!(ok);
        assert_relative_eq!(v[0], 25.0);
        // Column centers are exact.
        for j in 0..4 {
            let u = (j as f64 + 0.5) / 4.0;
            let (v, _) = bilinear_sample(&grid, 1, 4, 1, u, 0.0, true);
            assert_relative_eq!(v[0], grid[j]);
        }
    }

    #[test]
    fn row_of_elevation_interpolates() {
        let spec = toy_spec();
        for (i, &b) in spec.beam_elevations.iter().enumerate() {
            assert_relative_eq!(spec.row_of_elevation(b).unwrap(), i as f64, epsilon = 1e-12);
        }
        let mid = (spec.beam_elevations[2] + spec.beam_elevations[3]) / 2.0;
        assert_relative_eq!(spec.row_of_elevation(mid).unwrap(), 2.5, epsilon = 1e-9);
        assert!(spec.row_of_elevation(1.0).is_none());
        assert!(spec.row_of_elevation(-1.0).is_none());
    }

    #[test]
    fn downsample_spec() {
        let spec = toy_spec();
        let half = spec.downsample(2);
        assert_eq!(half.num_beams(), 4);
        assert_eq!(half.num_azimuth_bins, 32);
        assert_relative_eq!(
            half.beam_elevations[0],
            (spec.beam_elevations[0] + spec.beam_elevations[1]) / 2.0
        );
    }
}
