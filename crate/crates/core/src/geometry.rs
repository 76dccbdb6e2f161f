//! Projective geometry of a rectified stereo rig over a ground plane with
//! two parallel crop-row lines.
//!
//! World frame: axes aligned with the canonical (zero-rotation) camera,
//! X right, Y down, Z forward along the rows. The corridor centerline is
//! X = 0, the ground plane is Y = `cam_height`, and the two row lines run
//! at X = -row_spacing/2 and X = +row_spacing/2. The left optical center
//! sits at (x_off, 0, 0) and the right optical center at
//! (x_off + baseline, 0, 0); each eye rotates about its own optical
//! center, so a pure rotation homography relates its rotated and
//! canonical images exactly.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

const DEPTH_EPS: f64 = 1e-9;
const HOMOG_EPS: f64 = 1e-12;

/// Rectified pinhole stereo intrinsics/extrinsics plus mounting geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Stereo baseline in meters; right camera displaced along +X of the left.
    pub baseline: f64,
    /// Optical-center height above the ground plane, meters.
    pub cam_height: f64,
}

impl CameraRig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |what: &'static str, why: String| GeometryError::InvalidParameter { what, why };
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(bad("focal length", format!("fx={}, fy={}", self.fx, self.fy)));
        }
        if self.baseline <= 0.0 {
            return Err(bad("baseline", format!("{}", self.baseline)));
        }
        if self.cam_height <= 0.0 {
            return Err(bad("cam_height", format!("{}", self.cam_height)));
        }
        if self.width < 2 || self.height < 2 {
            return Err(bad("image size", format!("{}x{}", self.width, self.height)));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64) {
            return Err(bad("cx", format!("{}", self.cx)));
        }
        if !(0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(bad("cy", format!("{}", self.cy)));
        }
        Ok(())
    }

    /// Intrinsic matrix K.
    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// K^-1, analytic.
    pub fn k_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// v coordinate of the bottom image edge.
    pub fn bottom_v(&self) -> f64 {
        self.height as f64 - 1.0
    }
}

/// Lateral layout of the two crop rows relative to the robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowGeometry {
    /// Lateral distance between the two row lines, meters.
    pub row_spacing: f64,
    /// Robot body width, meters.
    pub robot_width: f64,
}

impl RowGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(0.0 < self.robot_width && self.robot_width < self.row_spacing) {
            return Err(GeometryError::InvalidParameter {
                what: "row geometry",
                why: format!(
                    "need 0 < robot_width < row_spacing, got {} / {}",
                    self.robot_width, self.row_spacing
                ),
            });
        }
        Ok(())
    }

    /// Maximum lateral offset magnitude with the robot edge touching a row.
    pub fn max_x_off(&self) -> f64 {
        (self.row_spacing - self.robot_width) / 2.0
    }
}

/// Which eye of the stereo pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub fn other(self) -> Eye {
        match self {
            Eye::Left => Eye::Right,
            Eye::Right => Eye::Left,
        }
    }
}

/// Camera rotation angles, radians. Roll about the optical (Z) axis, pitch
/// about the lateral (X) axis, yaw about the vertical (Y) axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Angles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

/// Full camera pose: rotation angles plus lateral offset of the left camera
/// from the corridor centerline (meters, positive toward the right row).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub x_off: f64,
}

impl Pose {
    pub fn angles(&self) -> Angles {
        Angles {
            roll: self.roll,
            pitch: self.pitch,
            yaw: self.yaw,
        }
    }
}

/// Sub-pixel image coordinates; u rightward, v downward, origin at the
/// top-left pixel center. May lie outside the image when representing
/// extrapolated intersections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v }
    }

    fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }
}

/// Vanishing point plus left/right bottom-edge intercepts for one eye.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointTriple {
    pub vp: PixelPoint,
    pub li: PixelPoint,
    pub ri: PixelPoint,
}

impl KeypointTriple {
    /// Keypoints in fixed channel order (vp, li, ri).
    pub fn points(&self) -> [PixelPoint; 3] {
        [self.vp, self.li, self.ri]
    }
}

/// Canonical-case intercept bounds, base width and intercept disparity —
/// the three analytic constraints derived from rig and row geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricPrior {
    /// Closed interval [lo, hi] of canonical left-intercept u, left eye.
    pub li_bounds: (f64, f64),
    /// Closed interval [lo, hi] of canonical right-intercept u, left eye.
    pub ri_bounds: (f64, f64),
    /// Expected u(ri) - u(li) at the bottom edge, pixels.
    pub base_width: f64,
    /// Expected u_left - u_right of an intercept between eyes, pixels.
    pub intercept_disparity: f64,
    /// The canonical vanishing point (the principal point).
    pub vp_canonical: PixelPoint,
}

/// Tolerances for constraint checking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTolerances {
    /// Relative tolerance on the triangle base width.
    pub width_rel_tol: f64,
    /// Absolute tolerance on the intercept disparity, pixels.
    pub disp_abs_tol: f64,
    /// Slack added to each bound-interval end, pixels.
    pub bounds_margin: f64,
}

impl Default for ConstraintTolerances {
    fn default() -> Self {
        ConstraintTolerances {
            width_rel_tol: 0.05,
            disp_abs_tol: 2.0,
            bounds_margin: 0.0,
        }
    }
}

/// Outcome of checking a canonical stereo pair against the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub bounds_ok: bool,
    pub width_ok: bool,
    pub disparity_ok: bool,
    pub passed: bool,
    /// Mean of the two eyes' measured base widths, pixels.
    pub measured_width: f64,
    /// Mean of the li/ri measured stereo disparities, pixels.
    pub measured_disparity: f64,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// World-to-camera rotation. Applied to the canonical camera as yaw, then
/// pitch, then roll, each about the current camera axes.
pub fn world_to_camera(angles: Angles) -> Matrix3<f64> {
    rot_z(-angles.roll) * rot_x(-angles.pitch) * rot_y(-angles.yaw)
}

/// Optical center of the given eye in world coordinates.
fn eye_center(rig: &CameraRig, pose: &Pose, eye: Eye) -> Vector3<f64> {
    let shift = match eye {
        Eye::Left => 0.0,
        Eye::Right => rig.baseline,
    };
    Vector3::new(pose.x_off + shift, 0.0, 0.0)
}

/// Project a world ground point (x, cam_height, z) into the given eye.
pub fn ground_point_to_pixel(
    rig: &CameraRig,
    pose: &Pose,
    x: f64,
    z: f64,
    eye: Eye,
) -> Result<PixelPoint, GeometryError> {
    let p_world = Vector3::new(x, rig.cam_height, z);
    let r = world_to_camera(pose.angles());
    let p_cam = r * (p_world - eye_center(rig, pose, eye));
    if p_cam.z <= DEPTH_EPS {
        return Err(GeometryError::PointBehindCamera { depth: p_cam.z });
    }
    Ok(PixelPoint::new(
        rig.cx + rig.fx * p_cam.x / p_cam.z,
        rig.cy + rig.fy * p_cam.y / p_cam.z,
    ))
}

/// Ray-cast a pixel of the given eye onto the ground plane. Exact inverse of
/// [`ground_point_to_pixel`] for ground points.
pub fn pixel_to_ground(
    rig: &CameraRig,
    pose: &Pose,
    p: PixelPoint,
    eye: Eye,
) -> Result<(f64, f64), GeometryError> {
    let dir_cam = Vector3::new((p.u - rig.cx) / rig.fx, (p.v - rig.cy) / rig.fy, 1.0);
    let r_cw = world_to_camera(pose.angles()).transpose();
    let dir_world = r_cw * dir_cam;
    let origin = eye_center(rig, pose, eye);
    if dir_world.y <= DEPTH_EPS {
        return Err(GeometryError::RayAboveHorizon);
    }
    let t = (rig.cam_height - origin.y) / dir_world.y;
    if t <= DEPTH_EPS {
        return Err(GeometryError::RayAboveHorizon);
    }
    let hit = origin + t * dir_world;
    Ok((hit.x, hit.z))
}

/// Homogeneous image of a world point in the given eye (no depth check).
fn project_homog(rig: &CameraRig, pose: &Pose, p_world: Vector3<f64>, eye: Eye) -> Vector3<f64> {
    let r = world_to_camera(pose.angles());
    rig.k() * (r * (p_world - eye_center(rig, pose, eye)))
}

/// Homogeneous image of a world direction (point at infinity); identical for
/// both eyes of a rectified pair.
fn project_direction(rig: &CameraRig, pose: &Pose, d_world: Vector3<f64>) -> Vector3<f64> {
    rig.k() * (world_to_camera(pose.angles()) * d_world)
}

fn normalize_homog(p: Vector3<f64>) -> Result<PixelPoint, GeometryError> {
    if p.z.abs() < HOMOG_EPS {
        return Err(GeometryError::DegenerateView);
    }
    Ok(PixelPoint::new(p.x / p.z, p.y / p.z))
}

/// Intersect a homogeneous image line with the bottom edge v = height-1.
fn intersect_bottom(rig: &CameraRig, line: Vector3<f64>) -> Result<PixelPoint, GeometryError> {
    let edge = Vector3::new(0.0, 1.0, -rig.bottom_v());
    let p = line.cross(&edge);
    if p.z.abs() < HOMOG_EPS * line.norm().max(1.0) {
        return Err(GeometryError::DegenerateView);
    }
    Ok(PixelPoint::new(p.x / p.z, rig.bottom_v()))
}

/// Exact ground-truth keypoints of the two row lines for one eye.
pub fn gt_keypoints(
    rig: &CameraRig,
    pose: &Pose,
    rows: &RowGeometry,
    eye: Eye,
) -> Result<KeypointTriple, GeometryError> {
    let vp_h = project_direction(rig, pose, Vector3::new(0.0, 0.0, 1.0));
    let vp = normalize_homog(vp_h)?;
    let mut intercepts = [PixelPoint::new(0.0, 0.0); 2];
    for (i, x_row) in [-rows.row_spacing / 2.0, rows.row_spacing / 2.0]
        .iter()
        .enumerate()
    {
        let p0 = project_homog(
            rig,
            pose,
            Vector3::new(*x_row, rig.cam_height, 0.0),
            eye,
        );
        let line = p0.cross(&vp_h);
        if line.norm() < HOMOG_EPS {
            return Err(GeometryError::DegenerateView);
        }
        intercepts[i] = intersect_bottom(rig, line)?;
    }
    let (li, ri) = if intercepts[0].u <= intercepts[1].u {
        (intercepts[0], intercepts[1])
    } else {
        (intercepts[1], intercepts[0])
    };
    Ok(KeypointTriple { vp, li, ri })
}

/// Homography mapping pixels of a camera rotated by `angles` to pixels of
/// the canonical (zero-rotation) camera at the same optical center. Exact at
/// all depths because it encodes pure rotation conjugated by K.
pub fn rotation_homography(rig: &CameraRig, angles: Angles) -> Matrix3<f64> {
    rig.k() * world_to_camera(angles).transpose() * rig.k_inv()
}

/// Inverse map: canonical pixels to pixels of the rotated camera.
pub fn rotation_homography_inverse(rig: &CameraRig, angles: Angles) -> Matrix3<f64> {
    rig.k() * world_to_camera(angles) * rig.k_inv()
}

/// Recover pitch and yaw from an observed vanishing point and a known roll,
/// matching the conventions of [`rotation_homography`] so that on exact
/// ground truth the recovery is exact.
pub fn estimate_pitch_yaw(rig: &CameraRig, vp: PixelPoint, roll: f64) -> (f64, f64) {
    let d = rig.k_inv() * vp.homogeneous();
    let d = rot_z(roll) * d;
    let pitch = f64::atan2(d.y, d.z);
    let d = rot_x(pitch) * d;
    let yaw = f64::atan2(-d.x, d.z);
    (pitch, yaw)
}

/// Map a keypoint triple through a homography, re-forming the two row lines
/// and re-intersecting them with the bottom edge.
fn map_triple(
    rig: &CameraRig,
    t: &KeypointTriple,
    h: &Matrix3<f64>,
) -> Result<KeypointTriple, GeometryError> {
    let vp_h = h * t.vp.homogeneous();
    let vp = normalize_homog(vp_h)?;
    let mut mapped = [PixelPoint::new(0.0, 0.0); 2];
    for (i, ip) in [t.li, t.ri].iter().enumerate() {
        let q = h * ip.homogeneous();
        let line = vp_h.cross(&q);
        if line.norm() < HOMOG_EPS {
            return Err(GeometryError::DegenerateView);
        }
        mapped[i] = intersect_bottom(rig, line)?;
    }
    let (li, ri) = if mapped[0].u <= mapped[1].u {
        (mapped[0], mapped[1])
    } else {
        (mapped[1], mapped[0])
    };
    Ok(KeypointTriple { vp, li, ri })
}

/// Transform a triple observed under rotation `angles` into the canonical
/// (zero-rotation) convention, intercepts snapped to the bottom edge.
pub fn canonicalize_triple(
    rig: &CameraRig,
    t: &KeypointTriple,
    angles: Angles,
) -> Result<KeypointTriple, GeometryError> {
    map_triple(rig, t, &rotation_homography(rig, angles))
}

/// Inverse of [`canonicalize_triple`]: canonical convention back to the
/// rotated camera's image, intercepts re-snapped to the bottom edge.
pub fn decanonicalize_triple(
    rig: &CameraRig,
    t: &KeypointTriple,
    angles: Angles,
) -> Result<KeypointTriple, GeometryError> {
    map_triple(rig, t, &rotation_homography_inverse(rig, angles))
}

/// Canonical bottom-edge u of a row at lateral camera position `x_cam`.
fn canonical_intercept_u(rig: &CameraRig, x_row: f64, x_cam: f64) -> f64 {
    rig.cx + rig.fx * (x_row - x_cam) * (rig.bottom_v() - rig.cy) / (rig.fy * rig.cam_height)
}

/// Analytic geometric prior for the canonical case.
pub fn compute_prior(rig: &CameraRig, rows: &RowGeometry) -> Result<GeometricPrior, GeometryError> {
    rig.validate()?;
    rows.validate()?;
    if rig.cy >= rig.bottom_v() {
        return Err(GeometryError::HorizonBelowBottom {
            cy: rig.cy,
            bottom: rig.bottom_v(),
        });
    }
    let e = rows.max_x_off();
    let half = rows.row_spacing / 2.0;
    let scale = (rig.bottom_v() - rig.cy) / (rig.fy * rig.cam_height);
    // Bottom-edge u is monotone decreasing in x_off.
    let li_bounds = (
        canonical_intercept_u(rig, -half, e),
        canonical_intercept_u(rig, -half, -e),
    );
    let ri_bounds = (
        canonical_intercept_u(rig, half, e),
        canonical_intercept_u(rig, half, -e),
    );
    Ok(GeometricPrior {
        li_bounds,
        ri_bounds,
        base_width: rig.fx * rows.row_spacing * scale,
        intercept_disparity: rig.fx * rig.baseline * scale,
        vp_canonical: PixelPoint::new(rig.cx, rig.cy),
    })
}

fn in_interval(u: f64, (lo, hi): (f64, f64), margin: f64) -> bool {
    u >= lo - margin && u <= hi + margin
}

/// Check the bounds and width constraints for a single canonical triple.
/// `disparity_shift` offsets the bound intervals for the right eye, whose
/// canonical intercepts sit one intercept disparity to the left.
fn check_single_eye(
    prior: &GeometricPrior,
    t: &KeypointTriple,
    tol: &ConstraintTolerances,
    disparity_shift: f64,
) -> (bool, bool, f64) {
    let li_iv = (
        prior.li_bounds.0 - disparity_shift,
        prior.li_bounds.1 - disparity_shift,
    );
    let ri_iv = (
        prior.ri_bounds.0 - disparity_shift,
        prior.ri_bounds.1 - disparity_shift,
    );
    let bounds_ok =
        in_interval(t.li.u, li_iv, tol.bounds_margin) && in_interval(t.ri.u, ri_iv, tol.bounds_margin);
    let width = t.ri.u - t.li.u;
    let width_ok = (width - prior.base_width).abs() <= tol.width_rel_tol * prior.base_width;
    (bounds_ok, width_ok, width)
}

/// Check a canonicalized stereo pair against the geometric prior.
pub fn check_constraints(
    prior: &GeometricPrior,
    canonical_left: &KeypointTriple,
    canonical_right: &KeypointTriple,
    tol: &ConstraintTolerances,
) -> ConstraintReport {
    let (bl, wl, width_l) = check_single_eye(prior, canonical_left, tol, 0.0);
    let (br, wr, width_r) =
        check_single_eye(prior, canonical_right, tol, prior.intercept_disparity);
    let d_li = canonical_left.li.u - canonical_right.li.u;
    let d_ri = canonical_left.ri.u - canonical_right.ri.u;
    let disparity_ok = (d_li - prior.intercept_disparity).abs() <= tol.disp_abs_tol
        && (d_ri - prior.intercept_disparity).abs() <= tol.disp_abs_tol;
    let bounds_ok = bl && br;
    let width_ok = wl && wr;
    ConstraintReport {
        bounds_ok,
        width_ok,
        disparity_ok,
        passed: bounds_ok && width_ok && disparity_ok,
        measured_width: 0.5 * (width_l + width_r),
        measured_disparity: 0.5 * (d_li + d_ri),
    }
}

/// Bounds+width verdict for one eye alone, used by pseudo-label selection.
pub fn check_single_eye_constraints(
    prior: &GeometricPrior,
    canonical: &KeypointTriple,
    eye: Eye,
    tol: &ConstraintTolerances,
) -> bool {
    let shift = match eye {
        Eye::Left => 0.0,
        Eye::Right => prior.intercept_disparity,
    };
    let (b, w, _) = check_single_eye(prior, canonical, tol, shift);
    b && w
}

/// Transfer a keypoint triple to the other eye by ground-plane ray-cast.
/// The vanishing point is copied unchanged (zero disparity at infinity).
pub fn transfer_to_other_eye(
    rig: &CameraRig,
    t: &KeypointTriple,
    angles: Angles,
    from: Eye,
) -> Result<KeypointTriple, GeometryError> {
    let pose = Pose {
        roll: angles.roll,
        pitch: angles.pitch,
        yaw: angles.yaw,
        x_off: 0.0,
    };
    let to = from.other();
    let mut mapped = [PixelPoint::new(0.0, 0.0); 2];
    for (i, ip) in [t.li, t.ri].iter().enumerate() {
        let (x, z) = pixel_to_ground(rig, &pose, *ip, from)
            .map_err(|e| GeometryError::TransferFailed(e.to_string()))?;
        let q = ground_point_to_pixel(rig, &pose, x, z, to)
            .map_err(|e| GeometryError::TransferFailed(e.to_string()))?;
        // Re-intersect with the bottom edge along the mapped row line.
        let line = t.vp.homogeneous().cross(&q.homogeneous());
        if line.norm() < HOMOG_EPS {
            return Err(GeometryError::TransferFailed("degenerate row line".into()));
        }
        mapped[i] = intersect_bottom(rig, line)
            .map_err(|e| GeometryError::TransferFailed(e.to_string()))?;
    }
    let (li, ri) = if mapped[0].u <= mapped[1].u {
        (mapped[0], mapped[1])
    } else {
        (mapped[1], mapped[0])
    };
    Ok(KeypointTriple { vp: t.vp, li, ri })
}
