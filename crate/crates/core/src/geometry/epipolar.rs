//! Epipolar sample-set construction: trace one sensor's ray/pixel through
//! candidate metric values and record where each candidate lands in the
//! other sensor's grid.

use super::{
    backproject_pixel, cart_to_spherical, lid_bins, project_to_camera, spherical_to_cart,
    CameraRig, GeometryError, LidarSpec, Spherical,
};

/// One camera seeing an epipolar sample, with normalized image coordinates
/// (u = pixel_u / width, v = pixel_v / height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamHit {
    pub view: usize,
    pub u: f64,
    pub v: f64,
}

/// One candidate range along a LiDAR ray, projected into the camera ring.
#[derive(Debug, Clone, PartialEq)]
pub struct CamEpipolarSample {
    /// Candidate range r_k, meters. Strictly increasing along the set.
    pub r: f64,
    /// True iff at least one camera sees the 3D point.
    pub valid: bool,
    /// All cameras seeing the point; empty when invalid.
    pub hits: Vec<CamHit>,
}

/// One candidate depth behind a camera pixel, mapped onto the range image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeEpipolarSample {
    /// Candidate depth d_k, meters. Strictly increasing along the set.
    pub d: f64,
    /// True iff the point's elevation falls inside the beam span.
    pub valid: bool,
    /// Normalized azimuth coordinate in the range grid (wrapping axis).
    pub u: f64,
    /// Normalized row coordinate in the range grid.
    pub v: f64,
}

/// Samples `count` LID ranges along the bin-center ray of range-image cell
/// (row, col) and projects each into every camera of the rig.
pub fn epipolar_cam_from_range(
    row: usize,
    col: usize,
    spec: &LidarSpec,
    rig: &CameraRig,
    count: usize,
    r_caps: (f64, f64),
) -> Result<Vec<CamEpipolarSample>, GeometryError> {
    assert!(row < spec.num_beams() && col < spec.num_azimuth_bins);
    let theta = spec.azimuth_of_col(col);
    let phi = spec.beam_elevations[row];
    let ranges = lid_bins(r_caps.0, r_caps.1, count)?;
    Ok(ranges
        .into_iter()
        .map(|r| {
            let p = spherical_to_cart(Spherical { r, theta, phi });
            let mut hits = Vec::new();
            for (view, cam) in rig.cameras.iter().enumerate() {
                let pr = project_to_camera(p, cam);
                if pr.valid {
                    hits.push(CamHit {
                        view,
                        u: pr.u / cam.width as f64,
                        v: pr.v / cam.height as f64,
                    });
                }
            }
            CamEpipolarSample {
                r,
                valid: !hits.is_empty(),
                hits,
            }
        })
        .collect())
}

/// Samples `count` LID depths behind camera pixel (u, v) and maps each onto
/// normalized range-image coordinates. Out-of-span elevations are invalid
/// and carry zeroed coordinates.
pub fn epipolar_range_from_pixel(
    u: f64,
    v: f64,
    cam_index: usize,
    rig: &CameraRig,
    spec: &LidarSpec,
    count: usize,
    d_caps: (f64, f64),
) -> Result<Vec<RangeEpipolarSample>, GeometryError> {
    let cam = &rig.cameras[cam_index];
    assert!(u >= 0.0 && u <= cam.width as f64 && v >= 0.0 && v <= cam.height as f64);
    let depths = lid_bins(d_caps.0, d_caps.1, count)?;
    let h = spec.num_beams();
    Ok(depths
        .into_iter()
        .map(|d| {
            let p = backproject_pixel(u, v, d, cam).expect("depths are positive");
            let s = cart_to_spherical(p);
            match spec.row_of_elevation(s.phi) {
                Some(row_f) => RangeEpipolarSample {
                    d,
                    valid: true,
                    u: (s.theta + std::f64::consts::PI) / std::f64::consts::TAU,
                    v: if h > 1 { row_f / (h - 1) as f64 } else { 0.0 },
                },
                None => RangeEpipolarSample {
                    d,
                    valid: false,
                    u: 0.0,
                    v: 0.0,
                },
            }
        })
        .collect())
}
