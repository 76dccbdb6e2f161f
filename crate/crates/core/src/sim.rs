//! Procedural synthetic stereo crop-row renderer with exact ground truth.
//!
//! The scene is three analytic surfaces: the ground plane and two vertical
//! textured "row walls" at the row lateral positions. Each pixel is shaded
//! by ray casting from the eye's optical center; all texture is a hash of
//! quantized world coordinates, so the same world point renders the same
//! albedo in both eyes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;
use crate::geometry::{self, CameraRig, Eye, KeypointTriple, Pose, RowGeometry};

/// Appearance preset for one visual domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAppearance {
    pub name: String,
    /// RGB base color of the ground, components in [0,1].
    pub ground_palette: [f32; 3],
    /// RGB base color of the row walls, components in [0,1].
    pub row_palette: [f32; 3],
    /// RGB color of the sky band above the horizon.
    pub sky_palette: [f32; 3],
    /// Quantization cell of the procedural texture, meters.
    pub texture_scale: f64,
    /// Texture modulation amplitude, fraction of the base color.
    pub texture_strength: f32,
    /// Height of the row walls above the ground, meters.
    pub row_wall_height: f64,
    /// Fraction of ground cells covered by clutter speckles, [0,1].
    pub clutter_density: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f32,
}

impl DomainAppearance {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let palettes_ok = [self.ground_palette, self.row_palette, self.sky_palette]
            .iter()
            .all(|p| p.iter().all(|c| (0.0..=1.0).contains(c)));
        if !palettes_ok
            || self.row_wall_height <= 0.0
            || !(0.0..=1.0).contains(&self.clutter_density)
            || self.texture_scale <= 0.0
            || self.noise_sigma < 0.0
        {
            return Err(GeometryError::InvalidParameter {
                what: "domain appearance",
                why: format!("{self:?}"),
            });
        }
        Ok(())
    }

    /// Built-in preset by name.
    pub fn preset(name: &str) -> Option<DomainAppearance> {
        let d = match name {
            // Source domain: short light-green rows on dark brown soil.
            "early_corn" => DomainAppearance {
                name: name.into(),
                ground_palette: [0.35, 0.25, 0.15],
                row_palette: [0.45, 0.75, 0.30],
                sky_palette: [0.80, 0.85, 0.92],
                texture_scale: 0.06,
                texture_strength: 0.25,
                row_wall_height: 0.25,
                clutter_density: 0.04,
                noise_sigma: 0.02,
            },
            // Tall yellow-green canopy on shaded soil, hazier sky, weedy rows.
            "late_corn_green" => DomainAppearance {
                name: name.into(),
                ground_palette: [0.24, 0.20, 0.13],
                row_palette: [0.46, 0.55, 0.17],
                sky_palette: [0.62, 0.68, 0.78],
                texture_scale: 0.08,
                texture_strength: 0.50,
                row_wall_height: 0.60,
                clutter_density: 0.25,
                noise_sigma: 0.10,
            },
            // Senesced canopy: straw-olive walls close to the soil tone.
            "late_corn_brown" => DomainAppearance {
                name: name.into(),
                ground_palette: [0.30, 0.24, 0.15],
                row_palette: [0.49, 0.57, 0.21],
                sky_palette: [0.74, 0.78, 0.86],
                texture_scale: 0.07,
                texture_strength: 0.50,
                row_wall_height: 0.55,
                clutter_density: 0.25,
                noise_sigma: 0.10,
            },
            // Orchard: tall dusty-green hedgerows over dirt lanes.
            "orchard" => DomainAppearance {
                name: name.into(),
                ground_palette: [0.28, 0.24, 0.16],
                row_palette: [0.38, 0.48, 0.16],
                sky_palette: [0.70, 0.78, 0.88],
                texture_scale: 0.08,
                texture_strength: 0.50,
                row_wall_height: 0.75,
                clutter_density: 0.20,
                noise_sigma: 0.10,
            },
            _ => return None,
        };
        Some(d)
    }

    pub fn preset_names() -> [&'static str; 4] {
        ["early_corn", "late_corn_green", "late_corn_brown", "orchard"]
    }
}

/// One rendered stereo sample with exact ground truth.
#[derive(Debug, Clone)]
pub struct StereoSample {
    /// Row-major H*W*3 intensities in [0,1], quantized to 8-bit levels.
    pub left_image: Vec<f32>,
    pub right_image: Vec<f32>,
    pub width: usize,
    pub height: usize,
    /// True roll plus zero-mean Gaussian IMU noise, radians.
    pub imu_roll: f64,
    pub gt_left: KeypointTriple,
    pub gt_right: KeypointTriple,
    pub true_pose: Pose,
    pub domain: String,
}

/// Uniform sampling ranges for poses, subsets of the operating envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub roll: (f64, f64),
    pub pitch: (f64, f64),
    pub yaw: (f64, f64),
    pub x_off: (f64, f64),
}

impl Default for PoseRanges {
    fn default() -> Self {
        // Kept tight enough that the bottom intercepts rarely leave the
        // image on the default rig; soft-argmax cannot express far
        // off-image keypoints.
        PoseRanges {
            roll: (-0.03, 0.03),
            pitch: (-0.05, 0.05),
            yaw: (-0.05, 0.05),
            x_off: (-0.04, 0.04),
        }
    }
}

/// Uniform pose draw, one component at a time in field order.
pub fn sample_pose(ranges: &PoseRanges, rng: &mut impl Rng) -> Pose {
    fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    }
    Pose {
        roll: draw(rng, ranges.roll),
        pitch: draw(rng, ranges.pitch),
        yaw: draw(rng, ranges.yaw),
        x_off: draw(rng, ranges.x_off),
    }
}

/// Default IMU roll noise, radians (0.2 degrees).
pub const DEFAULT_IMU_SIGMA: f64 = 0.2 * std::f64::consts::PI / 180.0;

// splitmix64; the whole procedural texture derives from this.
fn hash64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn hash_cell(ix: i64, iy: i64, salt: u64) -> f32 {
    let h = hash64((ix as u64).wrapping_mul(0x9e37_79b9).wrapping_add(
        (iy as u64).wrapping_mul(0x85eb_ca6b).wrapping_add(salt),
    ));
    // uniform in [0,1)
    (h >> 11) as f32 / (1u64 << 53) as f32
}

fn quantize(c: f64, scale: f64) -> i64 {
    (c / scale).floor() as i64
}

struct Hit {
    t: f64,
    albedo: [f32; 3],
}

fn shade_ground(d: &DomainAppearance, x: f64, z: f64) -> [f32; 3] {
    let ix = quantize(x, d.texture_scale);
    let iz = quantize(z, d.texture_scale);
    let tex = 1.0 + d.texture_strength * (hash_cell(ix, iz, 1) - 0.5) * 2.0;
    let mut c = d.ground_palette;
    if hash_cell(ix, iz, 2) < d.clutter_density as f32 {
        // clutter speckle: weed-colored cell
        let w = hash_cell(ix, iz, 3);
        for k in 0..3 {
            c[k] = c[k] * (1.0 - 0.7 * w) + d.row_palette[k] * 0.7 * w;
        }
    }
    [
        (c[0] * tex).clamp(0.0, 1.0),
        (c[1] * tex).clamp(0.0, 1.0),
        (c[2] * tex).clamp(0.0, 1.0),
    ]
}

fn shade_wall(d: &DomainAppearance, z: f64, y: f64, side: u64) -> [f32; 3] {
    let iz = quantize(z, d.texture_scale);
    let iy = quantize(y, d.texture_scale);
    let tex = 1.0 + d.texture_strength * (hash_cell(iz, iy, 10 + side) - 0.5) * 2.0;
    let c = d.row_palette;
    [
        (c[0] * tex).clamp(0.0, 1.0),
        (c[1] * tex).clamp(0.0, 1.0),
        (c[2] * tex).clamp(0.0, 1.0),
    ]
}

/// Render one eye. Deterministic; noise comes from the caller's rng.
fn render_eye(
    rig: &CameraRig,
    pose: &Pose,
    rows: &RowGeometry,
    domain: &DomainAppearance,
    eye: Eye,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let r_cw = geometry::world_to_camera(pose.angles()).transpose();
    let shift = match eye {
        Eye::Left => 0.0,
        Eye::Right => rig.baseline,
    };
    let origin = nalgebra::Vector3::new(pose.x_off + shift, 0.0, 0.0);
    let half = rows.row_spacing / 2.0;
    let wall_top = rig.cam_height - domain.row_wall_height;
    let noise = Normal::new(0.0f32, domain.noise_sigma.max(1e-12)).unwrap();

    let mut img = vec![0.0f32; rig.width * rig.height * 3];
    for v in 0..rig.height {
        for u in 0..rig.width {
            let dir_cam = nalgebra::Vector3::new(
                (u as f64 - rig.cx) / rig.fx,
                (v as f64 - rig.cy) / rig.fy,
                1.0,
            );
            let dir = r_cw * dir_cam;
            let mut best: Option<Hit> = None;
            // ground plane Y = cam_height
            if dir.y > 1e-12 {
                let t = (rig.cam_height - origin.y) / dir.y;
                if t > 1e-9 {
                    let p = origin + t * dir;
                    if p.z > 0.0 {
                        best = Some(Hit {
                            t,
                            albedo: shade_ground(domain, p.x, p.z),
                        });
                    }
                }
            }
            // row walls X = -half and X = +half
            if dir.x.abs() > 1e-12 {
                for (side, x_wall) in [(0u64, -half), (1u64, half)] {
                    let t = (x_wall - origin.x) / dir.x;
                    if t > 1e-9 {
                        let p = origin + t * dir;
                        if p.z > 0.0 && p.y >= wall_top && p.y <= rig.cam_height {
                            let closer = best.as_ref().map_or(true, |b| t < b.t);
                            if closer {
                                best = Some(Hit {
                                    t,
                                    albedo: shade_wall(domain, p.z, p.y, side),
                                });
                            }
                        }
                    }
                }
            }
            let albedo = best.map(|b| b.albedo).unwrap_or(domain.sky_palette);
            let base = (v * rig.width + u) * 3;
            for k in 0..3 {
                let mut val = albedo[k];
                if domain.noise_sigma > 0.0 {
                    val += noise.sample(rng);
                }
                // quantize to the 8-bit grid used on disk
                img[base + k] = (val.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    img
}

/// Render a stereo sample with exact ground-truth keypoints.
pub fn render_stereo(
    rig: &CameraRig,
    pose: &Pose,
    rows: &RowGeometry,
    domain: &DomainAppearance,
    imu_sigma: f64,
    seed: u64,
) -> Result<StereoSample, GeometryError> {
    domain.validate()?;
    let mut rng_l = ChaCha8Rng::seed_from_u64(hash64(seed ^ 0x11));
    let mut rng_r = ChaCha8Rng::seed_from_u64(hash64(seed ^ 0x22));
    let left_image = render_eye(rig, pose, rows, domain, Eye::Left, &mut rng_l);
    let right_image = render_eye(rig, pose, rows, domain, Eye::Right, &mut rng_r);
    let gt_left = geometry::gt_keypoints(rig, pose, rows, Eye::Left)?;
    let gt_right = geometry::gt_keypoints(rig, pose, rows, Eye::Right)?;
    let imu_roll = if imu_sigma > 0.0 {
        let mut rng_imu = ChaCha8Rng::seed_from_u64(hash64(seed ^ 0x33));
        pose.roll + Normal::new(0.0, imu_sigma).unwrap().sample(&mut rng_imu)
    } else {
        pose.roll
    };
    Ok(StereoSample {
        left_image,
        right_image,
        width: rig.width,
        height: rig.height,
        imu_roll,
        gt_left,
        gt_right,
        true_pose: *pose,
        domain: domain.name.clone(),
    })
}

/// Per-sample rng seed, derived from the dataset seed and sample index.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    hash64(dataset_seed.wrapping_mul(0x9e3779b97f4a7c15) ^ (index as u64))
}

/// Render and persist `n` samples; returns the completed dataset.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    rig: &CameraRig,
    rows: &RowGeometry,
    domain: &DomainAppearance,
    ranges: &PoseRanges,
    n: usize,
    imu_sigma: f64,
    seed: u64,
    out_dir: impl Into<std::path::PathBuf>,
) -> Result<crate::data::Dataset, crate::error::DataError> {
    use crate::data::{DatasetWriter, ManifestHeader, DATASET_VERSION};
    rig.validate().map_err(invalid_input)?;
    rows.validate().map_err(invalid_input)?;
    domain.validate().map_err(invalid_input)?;
    let mut writer = DatasetWriter::create(
        out_dir,
        ManifestHeader {
            version: DATASET_VERSION.into(),
            rig: *rig,
            rows: *rows,
            domain: domain.name.clone(),
            seed,
        },
    )?;
    for i in 0..n {
        let s = sample_seed(seed, i);
        let mut pose_rng = ChaCha8Rng::seed_from_u64(hash64(s ^ 0x44));
        let pose = sample_pose(ranges, &mut pose_rng);
        let sample = render_stereo(rig, &pose, rows, domain, imu_sigma, s)
            .map_err(invalid_input)?;
        writer.add(&format!("{i:06}"), &sample)?;
    }
    writer.finish()
}

fn invalid_input(e: GeometryError) -> crate::error::DataError {
    crate::error::DataError::Malformed(e.to_string())
}
