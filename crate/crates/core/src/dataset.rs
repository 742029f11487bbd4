//! Synthetic scenes: analytic volumes, transfer functions, the icosphere
//! camera protocol, the reference raymarcher, and the on-disk dataset layout
//! (`manifest.json` + `images/####.png`).

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::metrics::ImageF;
use crate::render::{composite, intersect_aabb, normalize3, Camera, Mat4};

/// One control point of a transfer function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub value: f64,
    pub rgb: [f64; 3],
    pub opacity: f64,
}

/// Piecewise-linear map from scalar value to color and opacity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub points: Vec<ControlPoint>,
}

impl TransferFunction {
    pub fn new(points: Vec<ControlPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("transfer function needs at least one control point".into()));
        }
        if points.windows(2).any(|w| !(w[0].value < w[1].value)) {
            return Err(Error::Config("transfer function values must be strictly increasing".into()));
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(&p.opacity)) {
            return Err(Error::Config("transfer function opacity outside [0,1]".into()));
        }
        Ok(Self { points })
    }

    /// Color and opacity at `v`, constant beyond the end points.
    pub fn eval(&self, v: f64) -> ([f64; 3], f64) {
        let pts = &self.points;
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if v <= first.value {
            return (first.rgb, first.opacity);
        }
        if v >= last.value {
            return (last.rgb, last.opacity);
        }
        let j = pts.partition_point(|p| p.value <= v) - 1;
        let (a, b) = (pts[j], pts[j + 1]);
        let t = (v - a.value) / (b.value - a.value);
        let lerp = |x: f64, y: f64| x + t * (y - x);
        (
            [lerp(a.rgb[0], b.rgb[0]), lerp(a.rgb[1], b.rgb[1]), lerp(a.rgb[2], b.rgb[2])],
            lerp(a.opacity, b.opacity),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub amplitude: f64,
}

impl Blob {
    fn eval(&self, x: [f64; 3], shift: [f64; 3]) -> f64 {
        let d2: f64 = (0..3).map(|a| (x[a] - self.center[a] - shift[a]).powi(2)).sum();
        self.amplitude * (-d2 / (2.0 * self.radius * self.radius)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VolumeKind {
    /// Sum of Gaussian blobs, clamped to 1.
    BlobSum { blobs: Vec<Blob> },
    /// Gaussian profile around a sphere of `radius`.
    Shell { center: [f64; 3], radius: f64, thickness: f64 },
    /// One blob whose center moves by `displacement` as parameter 0 sweeps its range.
    MovingBlob { blob: Blob, displacement: [f64; 3] },
}

/// How one parameter axis deforms the scene; `t` is the parameter normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "coupling", rename_all = "kebab-case")]
pub enum Coupling {
    /// Scalar field translated by `t · offset`.
    Translate { offset: [f64; 3] },
    /// Opacity multiplied by `lo + t · (hi − lo)`.
    OpacityScale { lo: f64, hi: f64 },
    /// Transfer function evaluated at `s − t · amount`.
    TfShift { amount: f64 },
    /// Axis consumed by the volume kind itself.
    Intrinsic,
}

/// Scalar field in `[0, 1]` over `aabb`, deformed by K parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticVolume {
    pub kind: VolumeKind,
    pub couplings: Vec<Coupling>,
    pub param_ranges: Vec<(f64, f64)>,
    pub aabb: Aabb,
    /// Extinction per unit length of a TF opacity that yields alpha `o` over one unit.
    pub density_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Deformation {
    shift: [f64; 3],
    opacity: f64,
    tf_shift: f64,
    t0: f64,
}

impl AnalyticVolume {
    pub fn validate(&self) -> Result<()> {
        if self.couplings.len() != self.param_ranges.len() {
            return Err(Error::Config("one coupling per parameter axis is required".into()));
        }
        if matches!(self.kind, VolumeKind::MovingBlob { .. }) && self.couplings.first() != Some(&Coupling::Intrinsic) {
            return Err(Error::Config("moving-blob volumes drive parameter 0 intrinsically".into()));
        }
        if self.param_ranges.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("parameter ranges must satisfy lo < hi".into()));
        }
        Ok(())
    }

    pub fn check_params(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_ranges.len() {
            return Err(Error::ParamCount {
                expected: self.param_ranges.len(),
                got: p.len(),
            });
        }
        for (index, (&value, &(lo, hi))) in p.iter().zip(&self.param_ranges).enumerate() {
            if !(lo..=hi).contains(&value) {
                return Err(Error::ParamOutOfRange { index, value, lo, hi });
            }
        }
        Ok(())
    }

    fn deformation(&self, p: &[f64]) -> Deformation {
        let mut d = Deformation {
            shift: [0.0; 3],
            opacity: 1.0,
            tf_shift: 0.0,
            t0: 0.0,
        };
        for (k, c) in self.couplings.iter().enumerate() {
            let (lo, hi) = self.param_ranges[k];
            let t = (p[k] - lo) / (hi - lo);
            match *c {
                Coupling::Translate { offset } => {
                    for a in 0..3 {
                        d.shift[a] += t * offset[a];
                    }
                }
                Coupling::OpacityScale { lo, hi } => d.opacity *= lo + t * (hi - lo),
                Coupling::TfShift { amount } => d.tf_shift += t * amount,
                Coupling::Intrinsic => d.t0 = t,
            }
        }
        d
    }

    fn scalar_deformed(&self, x: [f64; 3], d: &Deformation) -> f64 {
        let s = match &self.kind {
            VolumeKind::BlobSum { blobs } => blobs.iter().map(|b| b.eval(x, d.shift)).sum(),
            VolumeKind::Shell {
                center,
                radius,
                thickness,
            } => {
                let r: f64 = (0..3).map(|a| (x[a] - center[a] - d.shift[a]).powi(2)).sum::<f64>().sqrt();
                (-(r - radius).powi(2) / (2.0 * thickness * thickness)).exp()
            }
            VolumeKind::MovingBlob { blob, displacement } => {
                let shift = [0, 1, 2].map(|a| d.shift[a] + d.t0 * displacement[a]);
                blob.eval(x, shift)
            }
        };
        s.clamp(0.0, 1.0)
    }

    /// Scalar value at world point `x` under parameters `p` (assumed valid).
    pub fn scalar(&self, x: [f64; 3], p: &[f64]) -> f64 {
        self.scalar_deformed(x, &self.deformation(p))
    }
}

/// Converts a TF opacity to extinction: σ = −ln(1 − o) · scale.
pub fn opacity_to_extinction(opacity: f64, density_scale: f64) -> f64 {
    -(1.0 - opacity.min(0.999)).ln() * density_scale
}

/// Shared camera resolution and focal length of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square image with a field of view of about 49°.
    pub fn square(size: usize) -> Self {
        Self {
            focal: 1.1 * size as f64,
            width: size,
            height: size,
        }
    }

    pub fn camera(&self, pose: Mat4) -> Result<Camera> {
        Camera::new(pose, self.focal, self.width, self.height)
    }
}

const POLE_TILT: f64 = 1e-4;

/// Camera-to-world pose at `eye` looking at `target` with +y up. When the
/// view is vertical, the up vector is tilted by 1e-4 rad toward the eye's
/// azimuth so that poles stay continuous with neighbouring views.
pub fn look_at_pose(eye: [f64; 3], target: [f64; 3]) -> Result<Mat4> {
    let f = normalize3([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("camera eye coincides with its target".into()));
    }
    let horiz = (f[0] * f[0] + f[2] * f[2]).sqrt();
    let up = if horiz < 1e-6 {
        let az = (eye[0] - target[0]).atan2(eye[2] - target[2]);
        let (s, c) = POLE_TILT.sin_cos();
        // Sign matches the limit of nearby views at the same azimuth.
        let sign = if f[1] < 0.0 { -1.0 } else { 1.0 };
        [sign * s * az.sin(), c, sign * s * az.cos()]
    } else {
        [0.0, 1.0, 0.0]
    };
    Ok(Camera::look_at(eye, target, up, 1.0, 1, 1)?.pose)
}

/// Position on the orbit sphere: azimuth about +y measured from +z, elevation from the xz-plane.
pub fn orbit_position(azimuth_deg: f64, elevation_deg: f64, radius: f64, target: [f64; 3]) -> [f64; 3] {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [
        target[0] + radius * el.cos() * az.sin(),
        target[1] + radius * el.sin(),
        target[2] + radius * el.cos() * az.cos(),
    ]
}

pub fn orbit_pose(azimuth_deg: f64, elevation_deg: f64, radius: f64, target: [f64; 3]) -> Result<Mat4> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("orbit radius must be positive, got {radius}")));
    }
    if !(-90.0..=90.0).contains(&elevation_deg) || !azimuth_deg.is_finite() {
        return Err(Error::Config(format!(
            "orbit angles out of range: azimuth {azimuth_deg}, elevation {elevation_deg}"
        )));
    }
    look_at_pose(orbit_position(azimuth_deg, elevation_deg, radius, target), target)
}

fn icosahedron() -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let v = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let f = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (v, f)
}

/// Unit vertices of the icosahedron with every edge split into `level + 1`
/// segments: 12, 42, 92, 162, 252 vertices for levels 0–4.
pub fn icosphere_vertices(level: usize) -> Result<Vec<[f64; 3]>> {
    if level > 4 {
        return Err(Error::Config(format!("icosphere level {level} outside 0..=4")));
    }
    let n = level + 1;
    let (base, faces) = icosahedron();
    let mut seen: HashMap<Vec<(usize, usize)>, usize> = HashMap::new();
    let mut out = Vec::new();
    for face in &faces {
        for i in 0..=n {
            for j in 0..=n - i {
                let k = n - i - j;
                let mut key: Vec<(usize, usize)> = [(face[0], i), (face[1], j), (face[2], k)]
                    .into_iter()
                    .filter(|&(_, w)| w > 0)
                    .collect();
                key.sort_unstable();
                if seen.contains_key(&key) {
                    continue;
                }
                seen.insert(key.clone(), out.len());
                let mut p = [0.0; 3];
                for &(vid, w) in &key {
                    for a in 0..3 {
                        p[a] += w as f64 * base[vid][a];
                    }
                }
                out.push(normalize3(p));
            }
        }
    }
    Ok(out)
}

/// One pose per icosphere vertex at `radius` around `look_at`.
pub fn icosphere_cameras(level: usize, radius: f64, look_at: [f64; 3]) -> Result<Vec<Mat4>> {
    icosphere_vertices(level)?
        .into_iter()
        .map(|v| {
            look_at_pose(
                [look_at[0] + radius * v[0], look_at[1] + radius * v[1], look_at[2] + radius * v[2]],
                look_at,
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub pose: Mat4,
}

/// `n_views` orbit poses with azimuth and elevation varying linearly end to end.
pub fn inference_path(
    n_views: usize,
    azimuth: (f64, f64),
    elevation: (f64, f64),
    radius: f64,
    target: [f64; 3],
) -> Result<Vec<PathPose>> {
    if n_views < 2 {
        return Err(Error::Config("an inference path needs at least 2 views".into()));
    }
    (0..n_views)
        .map(|i| {
            let t = i as f64 / (n_views - 1) as f64;
            let az = azimuth.0 + t * (azimuth.1 - azimuth.0);
            let el = elevation.0 + t * (elevation.1 - elevation.0);
            Ok(PathPose {
                azimuth: az,
                elevation: el,
                pose: orbit_pose(az, el, radius, target)?,
            })
        })
        .collect()
}

/// `n` orbit views on a golden-angle spiral with elevation in ±60°, offset so
/// that none coincides with an icosphere vertex direction.
pub fn spiral_views(n: usize, radius: f64, target: [f64; 3]) -> Result<Vec<PathPose>> {
    let golden = 180.0 * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            let el = (60f64.to_radians().sin() * (2.0 * u - 1.0)).asin().to_degrees();
            let az = (17.0 + golden * i as f64).rem_euclid(360.0) - 180.0;
            Ok(PathPose {
                azimuth: az,
                elevation: el,
                pose: orbit_pose(az, el, radius, target)?,
            })
        })
        .collect()
}

/// The standard 181-view sweep from (−180°, −90°) through (0°, 0°) to (180°, 90°).
pub fn default_inference_path(radius: f64) -> Result<Vec<PathPose>> {
    inference_path(181, (-180.0, 180.0), (-90.0, 90.0), radius, [0.0; 3])
}

/// Dense midpoint-rule raymarch of the analytic volume through `tf`, using
/// `steps` equal steps over each ray's intersection with the volume's AABB.
pub fn reference_render(
    volume: &AnalyticVolume,
    tf: &TransferFunction,
    camera: &Camera,
    p: &[f64],
    steps: usize,
    background: [f64; 3],
) -> Result<ImageF> {
    if steps < 64 {
        return Err(Error::Config(format!("reference render needs at least 64 steps, got {steps}")));
    }
    volume.check_params(p)?;
    let d = volume.deformation(p);
    let origin = camera.origin();
    let width = camera.width;
    let rows: Vec<Vec<f64>> = (0..camera.height)
        .into_par_iter()
        .map(|row| {
            let mut out = Vec::with_capacity(3 * width);
            let mut sigmas = vec![0.0; steps];
            let mut colors = vec![[0.0; 3]; steps];
            for col in 0..width {
                let dir = camera.pixel_direction(col, row);
                let Some((t0, t1)) = intersect_aabb(origin, dir, &volume.aabb) else {
                    out.extend(background);
                    continue;
                };
                let dt = (t1 - t0) / steps as f64;
                for i in 0..steps {
                    let t = t0 + (i as f64 + 0.5) * dt;
                    let x = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                    let s = volume.scalar_deformed(x, &d);
                    let (rgb, o) = tf.eval(s - d.tf_shift);
                    sigmas[i] = opacity_to_extinction((o * d.opacity).clamp(0.0, 1.0), volume.density_scale);
                    colors[i] = rgb;
                }
                let c = composite(&sigmas, &colors, &vec![dt; steps], background);
                out.extend(c.rgb.iter().map(|v| v.clamp(0.0, 1.0)));
            }
            out
        })
        .collect();
    Ok(ImageF {
        width,
        height: camera.height,
        data: rows.concat(),
    })
}

/// Everything needed to regenerate a dataset's ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub volume: AnalyticVolume,
    pub transfer_function: TransferFunction,
    pub steps: usize,
}

impl Generator {
    pub fn render(&self, camera: &Camera, p: &[f64], background: [f64; 3]) -> Result<ImageF> {
        reference_render(&self.volume, &self.transfer_function, camera, p, self.steps, background)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub file_path: String,
    /// Camera-to-world, row-major.
    pub transform_matrix: Mat4,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDataset {
    pub intrinsics: Intrinsics,
    pub param_names: Vec<String>,
    pub param_ranges: Vec<(f64, f64)>,
    pub background: [f64; 3],
    pub aabb: Aabb,
    #[serde(default)]
    pub generator: Option<Generator>,
    pub frames: Vec<Frame>,
}

pub const MANIFEST: &str = "manifest.json";

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        let k = self.param_ranges.len();
        if self.param_names.len() != k {
            return Err(Error::Format("param_names and param_ranges differ in length".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.params.len() != k {
                return Err(Error::Format(format!("frame {i}: expected {k} parameters, got {}", f.params.len())));
            }
            for (index, (&value, &(lo, hi))) in f.params.iter().zip(&self.param_ranges).enumerate() {
                if !(lo..=hi).contains(&value) {
                    return Err(Error::ParamOutOfRange { index, value, lo, hi });
                }
            }
            self.intrinsics.camera(f.transform_matrix)?;
        }
        Ok(())
    }

    pub fn camera(&self, frame: usize) -> Result<Camera> {
        self.intrinsics.camera(self.frames[frame].transform_matrix)
    }

    /// Distinct parameter tuples in first-appearance order.
    pub fn distinct_params(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for f in &self.frames {
            if !out.iter().any(|p| p == &f.params) {
                out.push(f.params.clone());
            }
        }
        out
    }

    pub fn load_image(&self, dir: impl AsRef<Path>, frame: usize) -> Result<ImageF> {
        let img = ImageF::load_png(dir.as_ref().join(&self.frames[frame].file_path))?;
        if img.dims() != (self.intrinsics.width, self.intrinsics.height) {
            return Err(Error::DimensionMismatch {
                a: img.dims(),
                b: (self.intrinsics.width, self.intrinsics.height),
            });
        }
        Ok(img)
    }

    /// FNV-1a hash of the serialized manifest, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn save_manifest(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.as_ref().join(MANIFEST), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(dir.as_ref().join(MANIFEST))?;
        let d: SceneDataset = serde_json::from_str(&text)?;
        d.validate()?;
        Ok(d)
    }
}

/// Renders every (parameter sample × camera) pair, parameter-major, and
/// writes images plus manifest under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    generator: &Generator,
    intrinsics: Intrinsics,
    poses: &[Mat4],
    param_samples: &[Vec<f64>],
    param_names: Vec<String>,
    background: [f64; 3],
    out_dir: impl AsRef<Path>,
) -> Result<SceneDataset> {
    generator.volume.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("images"))?;
    let mut frames = Vec::with_capacity(poses.len() * param_samples.len());
    for p in param_samples {
        generator.volume.check_params(p)?;
        for pose in poses {
            let idx = frames.len();
            let file_path = format!("images/{idx:04}.png");
            let img = generator.render(&intrinsics.camera(*pose)?, p, background)?;
            img.save_png(out_dir.join(&file_path))?;
            frames.push(Frame {
                file_path,
                transform_matrix: *pose,
                params: p.clone(),
            });
        }
    }
    let dataset = SceneDataset {
        intrinsics,
        param_names,
        param_ranges: generator.volume.param_ranges.clone(),
        background,
        aabb: generator.volume.aabb,
        generator: Some(generator.clone()),
        frames,
    };
    dataset.validate()?;
    dataset.save_manifest(out_dir)?;
    Ok(dataset)
}

fn warm_tf() -> TransferFunction {
    let cp = |value, rgb, opacity| ControlPoint { value, rgb, opacity };
    TransferFunction::new(vec![
        cp(0.0, [0.1, 0.2, 0.6], 0.0),
        cp(0.15, [0.1, 0.3, 0.8], 0.0),
        cp(0.4, [0.2, 0.7, 0.5], 0.35),
        cp(0.7, [0.9, 0.6, 0.1], 0.6),
        cp(1.0, [0.8, 0.1, 0.1], 0.8),
    ])
    .expect("static control points are valid")
}

/// Three overlapping blobs near the center of `[-1, 1]³`; no parameters.
pub fn blob_scene() -> Generator {
    let blob = |center, radius, amplitude| Blob { center, radius, amplitude };
    Generator {
        volume: AnalyticVolume {
            kind: VolumeKind::BlobSum {
                blobs: vec![
                    blob([0.0, 0.0, 0.0], 0.3, 0.9),
                    blob([0.32, 0.18, -0.1], 0.18, 0.7),
                    blob([-0.25, -0.2, 0.22], 0.2, 0.75),
                ],
            },
            couplings: Vec::new(),
            param_ranges: Vec::new(),
            aabb: Aabb::cube(1.0),
            density_scale: 6.0,
        },
        transfer_function: warm_tf(),
        steps: 256,
    }
}

/// A single blob translated along x by parameter 0 ∈ [0, 1].
pub fn moving_blob_scene() -> Generator {
    Generator {
        volume: AnalyticVolume {
            kind: VolumeKind::MovingBlob {
                blob: Blob {
                    center: [-0.2, 0.0, 0.0],
                    radius: 0.3,
                    amplitude: 0.95,
                },
                displacement: [0.4, 0.1, 0.0],
            },
            couplings: vec![Coupling::Intrinsic],
            param_ranges: vec![(0.0, 1.0)],
            aabb: Aabb::cube(1.0),
            density_scale: 6.0,
        },
        transfer_function: warm_tf(),
        steps: 256,
    }
}

/// A spherical shell whose opacity (p0) and transfer-function offset (p1) vary.
pub fn shell_scene() -> Generator {
    Generator {
        volume: AnalyticVolume {
            kind: VolumeKind::Shell {
                center: [0.0; 3],
                radius: 0.45,
                thickness: 0.1,
            },
            couplings: vec![Coupling::OpacityScale { lo: 0.4, hi: 1.0 }, Coupling::TfShift { amount: 0.2 }],
            param_ranges: vec![(0.0, 1.0), (0.0, 1.0)],
            aabb: Aabb::cube(1.0),
            density_scale: 6.0,
        },
        transfer_function: warm_tf(),
        steps: 256,
    }
}

/// `n` evenly spaced values over `[lo, hi]` per axis, as a Cartesian product.
pub fn param_grid(ranges: &[(f64, f64)], n: usize) -> Vec<Vec<f64>> {
    if ranges.is_empty() {
        return vec![Vec::new()];
    }
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        if n <= 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        }
    };
    let mut out = vec![Vec::new()];
    for &r in ranges {
        let vals = axis(r);
        out = out
            .into_iter()
            .flat_map(|prefix| {
                vals.iter().map(move |&v| {
                    let mut q = prefix.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tf_interpolates_and_clamps() {
        let tf = warm_tf();
        assert_eq!(tf.eval(-1.0), ([0.1, 0.2, 0.6], 0.0));
        assert_eq!(tf.eval(2.0), ([0.8, 0.1, 0.1], 0.8));
        let (rgb, o) = tf.eval(0.55);
        assert!((o - 0.475).abs() < 1e-12);
        assert!((rgb[0] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn tf_rejects_unsorted_and_bad_opacity() {
        let cp = |value, opacity| ControlPoint {
            value,
            rgb: [0.0; 3],
            opacity,
        };
        assert!(TransferFunction::new(vec![cp(0.5, 0.1), cp(0.5, 0.2)]).is_err());
        assert!(TransferFunction::new(vec![cp(0.0, 1.5)]).is_err());
    }

    #[test]
    fn extinction_reproduces_alpha_over_unit_length() {
        for o in [0.0, 0.1, 0.5, 0.9] {
            let sigma = opacity_to_extinction(o, 1.0);
            assert!((1.0 - (-sigma).exp() - o).abs() < 1e-12);
        }
    }

    #[test]
    fn icosphere_counts() {
        let counts: Vec<usize> = (0..=4).map(|l| icosphere_vertices(l).unwrap().len()).collect();
        assert_eq!(counts, vec![12, 42, 92, 162, 252]);
        assert!(icosphere_vertices(5).is_err());
    }

    #[test]
    fn icosphere_vertices_unit_and_distinct() {
        for level in 0..=4 {
            let v = icosphere_vertices(level).unwrap();
            for (i, a) in v.iter().enumerate() {
                let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
                assert!((n - 1.0).abs() < 1e-12);
                for b in &v[i + 1..] {
                    let d: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum();
                    assert!(d > 1e-6, "duplicate vertex at level {level}");
                }
            }
        }
    }

    #[test]
    fn icosphere_poses_on_sphere_looking_inward() {
        let target = [0.1, -0.2, 0.3];
        for pose in icosphere_cameras(2, 4.0, target).unwrap() {
            let eye = [pose[0][3], pose[1][3], pose[2][3]];
            let r: f64 = (0..3).map(|a| (eye[a] - target[a]).powi(2)).sum::<f64>().sqrt();
            assert!((r - 4.0).abs() < 1e-6);
            let cam = Camera::new(pose, 10.0, 9, 9).unwrap();
            let d = cam.pixel_direction(4, 4);
            for a in 0..3 {
                assert!((eye[a] + 4.0 * d[a] - target[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn path_endpoints() {
        let path = default_inference_path(4.0).unwrap();
        assert_eq!(path.len(), 181);
        assert_eq!((path[0].azimuth, path[0].elevation), (-180.0, -90.0));
        assert_eq!((path[90].azimuth, path[90].elevation), (0.0, 0.0));
        assert_eq!((path[180].azimuth, path[180].elevation), (180.0, 90.0));
        let three = inference_path(3, (-180.0, 180.0), (-90.0, 90.0), 4.0, [0.0; 3]).unwrap();
        let az: Vec<f64> = three.iter().map(|p| p.azimuth).collect();
        assert_eq!(az, vec![-180.0, 0.0, 180.0]);
        assert!(inference_path(1, (0.0, 1.0), (0.0, 1.0), 4.0, [0.0; 3]).is_err());
    }

    #[test]
    fn orbit_front_view_looks_down_minus_z() {
        let pose = orbit_pose(0.0, 0.0, 3.0, [0.0; 3]).unwrap();
        assert!((pose[2][3] - 3.0).abs() < 1e-12);
        assert!((pose[2][2] - 1.0).abs() < 1e-12);
        assert!((pose[1][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poles_have_valid_cameras() {
        for el in [-90.0, 90.0] {
            let pose = orbit_pose(30.0, el, 2.0, [0.0; 3]).unwrap();
            assert!(Camera::new(pose, 10.0, 4, 4).is_ok());
            assert!((pose[1][3] - 2.0 * el.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_opacity_renders_background() {
        let mut g = blob_scene();
        for p in g.transfer_function.points.iter_mut() {
            p.opacity = 0.0;
        }
        let cam = Intrinsics::square(16).camera(orbit_pose(20.0, 10.0, 4.0, [0.0; 3]).unwrap()).unwrap();
        let img = g.render(&cam, &[], [0.2, 0.4, 0.6]).unwrap();
        assert_eq!(img, ImageF::filled(16, 16, [0.2, 0.4, 0.6]));
    }

    #[test]
    fn centered_blob_is_mirror_symmetric() {
        let g = Generator {
            volume: AnalyticVolume {
                kind: VolumeKind::BlobSum {
                    blobs: vec![Blob {
                        center: [0.0; 3],
                        radius: 0.3,
                        amplitude: 1.0,
                    }],
                },
                ..blob_scene().volume
            },
            ..blob_scene()
        };
        let cam = Intrinsics::square(32).camera(orbit_pose(0.0, 0.0, 4.0, [0.0; 3]).unwrap()).unwrap();
        let img = g.render(&cam, &[], [1.0; 3]).unwrap();
        for row in 0..32 {
            for col in 0..16 {
                let (a, b) = (img.pixel(col, row), img.pixel(31 - col, row));
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn quadrature_converges_under_refinement() {
        let g = blob_scene();
        let cam = Intrinsics::square(24).camera(orbit_pose(35.0, 20.0, 4.0, [0.0; 3]).unwrap()).unwrap();
        let a = reference_render(&g.volume, &g.transfer_function, &cam, &[], 256, [1.0; 3]).unwrap();
        let b = reference_render(&g.volume, &g.transfer_function, &cam, &[], 512, [1.0; 3]).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1.0 / 255.0);
        assert!(reference_render(&g.volume, &g.transfer_function, &cam, &[], 32, [1.0; 3]).is_err());
    }

    #[test]
    fn scalar_stays_in_unit_interval() {
        for g in [blob_scene(), moving_blob_scene(), shell_scene()] {
            let k = g.volume.param_ranges.len();
            for i in 0..500 {
                let x = [0, 1, 2].map(|a| ((i * 7 + a * 13) as f64 * 0.37).sin());
                let p = vec![(i as f64 * 0.13).fract(); k];
                let s = g.volume.scalar(x, &p);
                assert!((0.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn moving_blob_follows_parameter() {
        let g = moving_blob_scene();
        let peak0 = g.volume.scalar([-0.2, 0.0, 0.0], &[0.0]);
        let peak1 = g.volume.scalar([0.2, 0.1, 0.0], &[1.0]);
        assert!((peak0 - 0.95).abs() < 1e-12 && (peak1 - 0.95).abs() < 1e-12);
        assert!(g.volume.check_params(&[1.5]).is_err());
    }

    #[test]
    fn param_grid_is_cartesian() {
        let g = param_grid(&[(0.0, 1.0), (10.0, 20.0)], 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![0.0, 10.0]);
        assert_eq!(g[8], vec![1.0, 20.0]);
        assert_eq!(param_grid(&[], 5), vec![Vec::<f64>::new()]);
    }
}
