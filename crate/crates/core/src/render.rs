//! Cameras, ray sampling, emission-absorption compositing, and empty-space
//! skipping.
//!
//! [`trace_ray`] is the single forward path used by both training and
//! inference; it records everything the backward pass in [`crate::grad`]
//! needs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{positional_encoding_into, sh_encoding_into};
use crate::error::{Error, Result};
use crate::field::{Aabb, FeatureKind};
use crate::metrics::ImageF;
use crate::model::Model;
use crate::real::Real;

pub type Mat4 = [[f64; 4]; 4];

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole camera; `pose` is camera-to-world (right-handed, looking along −z, y up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: Mat4,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(pose: Mat4, focal: f64, width: usize, height: usize) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::Config(format!("focal length must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image dimensions must be non-zero".into()));
        }
        let cols: Vec<[f64; 3]> = (0..3).map(|c| [pose[0][c], pose[1][c], pose[2][c]]).collect();
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot(cols[a], cols[b]) - expect).abs() > 1e-5 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        if pose.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("camera pose contains non-finite values".into()));
        }
        Ok(Self {
            pose,
            focal,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target` with `up` as the vertical hint.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = normalize3([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let right = cross(forward, up);
        if dot(right, right).sqrt() < 1e-9 {
            return Err(Error::Config("view direction parallel to up vector".into()));
        }
        let right = normalize3(right);
        let true_up = cross(right, forward);
        let back = [-forward[0], -forward[1], -forward[2]];
        let pose = [
            [right[0], true_up[0], back[0], eye[0]],
            [right[1], true_up[1], back[1], eye[1]],
            [right[2], true_up[2], back[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Self::new(pose, focal, width, height)
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Same pose and field of view at `factor`× the pixel resolution.
    pub fn scaled(&self, factor: usize) -> Self {
        Self {
            pose: self.pose,
            focal: self.focal * factor as f64,
            width: self.width * factor,
            height: self.height * factor,
        }
    }

    /// Unit world-space direction through the center of pixel (`col`, `row`).
    pub fn pixel_direction(&self, col: usize, row: usize) -> [f64; 3] {
        let x = (col as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = -(row as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        let cam = [x, y, -1.0];
        let p = &self.pose;
        normalize3([
            p[0][0] * cam[0] + p[0][1] * cam[1] + p[0][2] * cam[2],
            p[1][0] * cam[0] + p[1][1] * cam[1] + p[1][2] * cam[2],
            p[2][0] * cam[0] + p[2][1] * cam[1] + p[2][2] * cam[2],
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// One ray per pixel in row-major order, unclipped (`t ∈ [0, ∞)`).
pub fn generate_rays(camera: &Camera) -> Vec<Ray> {
    let origin = camera.origin();
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for row in 0..camera.height {
        for col in 0..camera.width {
            rays.push(Ray {
                origin,
                direction: camera.pixel_direction(col, row),
                t_near: 0.0,
                t_far: f64::INFINITY,
            });
        }
    }
    rays
}

/// Slab intersection clipped to `t ≥ 0`; `None` on a miss.
pub fn intersect_aabb(origin: [f64; 3], direction: [f64; 3], aabb: &Aabb) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let d = direction[a];
        if d.abs() < 1e-12 {
            if origin[a] < aabb.min[a] || origin[a] > aabb.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut ta = (aabb.min[a] - origin[a]) * inv;
        let mut tb = (aabb.max[a] - origin[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

/// One sample per equal bin of `[t_near, t_far]`: bin centers, or uniform
/// within each bin when `rng` is given.
pub fn stratified_samples<R: Rng + ?Sized>(t_near: f64, t_far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    let step = (t_far - t_near) / n as f64;
    match rng {
        None => (0..n).map(|i| t_near + (i as f64 + 0.5) * step).collect(),
        Some(rng) => (0..n)
            .map(|i| {
                let u: f64 = rng.gen();
                (t_near + (i as f64 + u) * step).min(t_near + (i as f64 + 1.0) * step - step * 1e-9)
            })
            .collect(),
    }
}

/// Inverse-CDF draws from the piecewise-constant density ∝ `weights` over
/// bins `edges[i]..edges[i+1]`. Deterministic (evenly spaced quantiles) when
/// `rng` is `None`. Returned sorted.
pub fn importance_samples<R: Rng + ?Sized>(edges: &[f64], weights: &[f64], n_extra: usize, rng: Option<&mut R>) -> Vec<f64> {
    assert_eq!(edges.len(), weights.len() + 1);
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let uniform;
    let weights = if total > 0.0 {
        weights
    } else {
        uniform = vec![1.0; weights.len()];
        &uniform[..]
    };
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w.max(0.0) / total;
        cdf.push(acc);
    }
    let mut us: Vec<f64> = match rng {
        None => (0..n_extra).map(|i| (i as f64 + 0.5) / n_extra as f64).collect(),
        Some(rng) => (0..n_extra).map(|_| rng.gen::<f64>()).collect(),
    };
    us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    us.into_iter()
        .map(|u| {
            let u = u * acc;
            // First bin whose upper CDF bound exceeds u, skipping empty bins.
            let mut j = cdf.partition_point(|&c| c <= u).saturating_sub(1);
            j = j.min(weights.len() - 1);
            while weights[j] <= 0.0 && j + 1 < weights.len() {
                j += 1;
            }
            let lo = cdf[j];
            let hi = cdf[j + 1];
            let frac = if hi > lo { ((u - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
            edges[j] + frac * (edges[j + 1] - edges[j])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub rgb: [T; 3],
    pub weights: Vec<T>,
    /// `transmittance[i]` = T_i, the survival probability before sample i.
    pub transmittance: Vec<T>,
    pub t_final: T,
}

/// Quadrature of the emission-absorption integral over `n` samples.
pub fn composite<T: Real>(sigmas: &[T], colors: &[[T; 3]], deltas: &[T], background: [T; 3]) -> Composite<T> {
    let n = sigmas.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut t = T::one();
    let mut rgb = [T::zero(); 3];
    for i in 0..n {
        let survive = (-(sigmas[i] * deltas[i])).exp();
        let w = t * (T::one() - survive);
        transmittance.push(t);
        weights.push(w);
        for ch in 0..3 {
            rgb[ch] += w * colors[i][ch];
        }
        t *= survive;
    }
    for ch in 0..3 {
        rgb[ch] += t * background[ch];
    }
    Composite {
        rgb,
        weights,
        transmittance,
        t_final: t,
    }
}

/// Binary occupancy over an AABB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskVolume {
    pub resolution: [usize; 3],
    pub bits: Vec<bool>,
    pub aabb: Aabb,
}

impl MaskVolume {
    #[inline]
    fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.resolution[1] + c[1]) * self.resolution[2] + c[2]
    }

    pub fn cell_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        if !self.aabb.contains_point(p) {
            return None;
        }
        let mut c = [0; 3];
        for a in 0..3 {
            let u = (p[a] - self.aabb.min[a]) / (self.aabb.max[a] - self.aabb.min[a]) * self.resolution[a] as f64;
            c[a] = (u.floor() as usize).min(self.resolution[a] - 1);
        }
        Some(c)
    }

    /// Occupancy at a world-space point; points outside the mask are empty.
    #[inline]
    pub fn occupied(&self, p: [f64; 3]) -> bool {
        self.cell_of(p).is_some_and(|c| self.bits[self.index(c)])
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied_count() as f64 / self.bits.len() as f64
    }

    /// World-space bounds of the occupied cells.
    pub fn occupied_aabb(&self) -> Option<Aabb> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for i in 0..self.resolution[0] {
            for j in 0..self.resolution[1] {
                for k in 0..self.resolution[2] {
                    if self.bits[self.index([i, j, k])] {
                        any = true;
                        for (a, v) in [i, j, k].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v + 1);
                        }
                    }
                }
            }
        }
        if !any {
            return None;
        }
        let e = self.aabb.extent();
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            min[a] = self.aabb.min[a] + e[a] * lo[a] as f64 / self.resolution[a] as f64;
            max[a] = self.aabb.min[a] + e[a] * hi[a] as f64 / self.resolution[a] as f64;
        }
        Aabb::new(min, max).ok()
    }

    fn dilate(&mut self) {
        let src = self.bits.clone();
        let r = self.resolution;
        for i in 0..r[0] {
            for j in 0..r[1] {
                for k in 0..r[2] {
                    if !src[self.index([i, j, k])] {
                        continue;
                    }
                    for di in i.saturating_sub(1)..=(i + 1).min(r[0] - 1) {
                        for dj in j.saturating_sub(1)..=(j + 1).min(r[1] - 1) {
                            for dk in k.saturating_sub(1)..=(k + 1).min(r[2] - 1) {
                                let idx = self.index([di, dj, dk]);
                                self.bits[idx] = true;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Marks a cell occupied when σ at any of its corners, under any of
    /// `param_samples`, exceeds `sigma_threshold`; then dilates by one cell.
    pub fn build<T: Real>(model: &Model<T>, resolution: [usize; 3], sigma_threshold: f64, param_samples: &[Vec<f64>]) -> Result<Self> {
        if param_samples.is_empty() {
            return Err(Error::Config("mask construction needs at least one parameter sample".into()));
        }
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::Config("mask resolution must be non-zero".into()));
        }
        let aabb = model.field.aabb;
        let features: Vec<ParamFeatures<T>> = param_samples
            .iter()
            .map(|p| ParamFeatures::new(model, p))
            .collect::<Result<_>>()?;
        let corners = [resolution[0] + 1, resolution[1] + 1, resolution[2] + 1];
        let e = aabb.extent();
        // σ maximum over parameter samples at every lattice corner.
        let corner_max: Vec<f64> = (0..corners[0])
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut eval = SampleEvaluator::new(model);
                let mut out = Vec::with_capacity(corners[1] * corners[2]);
                for j in 0..corners[1] {
                    for k in 0..corners[2] {
                        let world = [
                            aabb.min[0] + e[0] * i as f64 / resolution[0] as f64,
                            aabb.min[1] + e[1] * j as f64 / resolution[1] as f64,
                            aabb.min[2] + e[2] * k as f64 / resolution[2] as f64,
                        ];
                        let mut m = f64::NEG_INFINITY;
                        for pf in &features {
                            m = m.max(eval.density(model, world, pf).as_f64());
                        }
                        out.push(m);
                    }
                }
                out
            })
            .collect();
        let cidx = |i: usize, j: usize, k: usize| (i * corners[1] + j) * corners[2] + k;
        let mut mask = MaskVolume {
            resolution,
            bits: vec![false; resolution.iter().product()],
            aabb,
        };
        for i in 0..resolution[0] {
            for j in 0..resolution[1] {
                for k in 0..resolution[2] {
                    let mut m = f64::NEG_INFINITY;
                    for (di, dj, dk) in CORNERS {
                        m = m.max(corner_max[cidx(i + di, j + dj, k + dk)]);
                    }
                    let idx = mask.index([i, j, k]);
                    mask.bits[idx] = m > sigma_threshold;
                }
            }
        }
        mask.dilate();
        if mask.occupied_count() == 0 {
            log::warn!("mask volume is empty at threshold {sigma_threshold}");
        }
        Ok(mask)
    }
}

const CORNERS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_samples: usize,
    /// Extra importance samples re-evaluated together with the uniform ones.
    pub n_importance: usize,
    pub background: [f64; 3],
    /// σ cutoff for mask occupancy.
    pub sigma_threshold: f64,
    pub jitter: bool,
    /// Compositing weight below which a sample's color is not decoded.
    pub weight_threshold: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_samples: 192,
            n_importance: 0,
            background: [1.0; 3],
            sigma_threshold: 1e-2,
            jitter: false,
            weight_threshold: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config("at least 2 samples per ray are required".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!("background {:?} outside [0,1]", self.background)));
        }
        Ok(())
    }
}

/// Parameter-product features for one parameter tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamFeatures<T> {
    pub params: Vec<f64>,
    pub density: Vec<T>,
    pub appearance: Vec<T>,
}

impl<T: Real> ParamFeatures<T> {
    pub fn new(model: &Model<T>, p: &[f64]) -> Result<Self> {
        Ok(Self {
            params: p.to_vec(),
            density: model.field.params(FeatureKind::Density).sample(p)?,
            appearance: model.field.params(FeatureKind::Appearance).sample(p)?,
        })
    }
}

/// Scratch buffers for evaluating σ at single points.
pub(crate) struct SampleEvaluator<T> {
    input: Vec<T>,
    pe: Vec<f64>,
    pre: Vec<T>,
}

impl<T: Real> SampleEvaluator<T> {
    pub fn new(model: &Model<T>) -> Self {
        Self {
            input: vec![T::zero(); model.decoders.density.input],
            pe: vec![0.0; model.decoders.encoding.pe_len()],
            pre: vec![T::zero(); model.decoders.density.hidden],
        }
    }

    /// Raw density-head output z at a world point (σ = softplus(z)).
    #[inline]
    pub fn density_logit(&mut self, model: &Model<T>, world: [f64; 3], pf: &ParamFeatures<T>) -> T {
        fill_density_input(model, world, pf, &mut self.input, &mut self.pe);
        let mut z = [T::zero()];
        model.decoders.density.forward(&self.input, &mut self.pre, &mut z);
        z[0]
    }

    pub fn density(&mut self, model: &Model<T>, world: [f64; 3], pf: &ParamFeatures<T>) -> T {
        self.density_logit(model, world, pf).softplus()
    }
}

/// Grid coordinate of a world point in the field's current AABB, clamped to the cube.
#[inline]
pub(crate) fn grid_coord<T: Real>(model: &Model<T>, world: [f64; 3]) -> [f64; 3] {
    let n = model.field.aabb.normalize(world);
    [n[0].clamp(-1.0, 1.0), n[1].clamp(-1.0, 1.0), n[2].clamp(-1.0, 1.0)]
}

#[inline]
fn fill_density_input<T: Real>(model: &Model<T>, world: [f64; 3], pf: &ParamFeatures<T>, input: &mut [T], pe: &mut [f64]) {
    let grid = &model.field.density;
    let fl = grid.feature_len();
    grid.sample_into(grid_coord(model, world), &mut input[..fl]);
    let rp = pf.density.len();
    input[fl..fl + rp].copy_from_slice(&pf.density);
    positional_encoding_into(model.field.frame.normalize(world), model.decoders.encoding.pe_frequencies, pe);
    for (dst, &v) in input[fl + rp..].iter_mut().zip(pe.iter()) {
        *dst = T::lit(v);
    }
}

/// Scene-frame units per world unit used to convert sample spacing to σ's length unit.
pub fn length_scale(frame: &Aabb) -> f64 {
    let e = frame.extent();
    2.0 / e[0].max(e[1]).max(e[2])
}

/// Every quantity of one ray's forward pass needed for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct RayTrace<T> {
    pub rgb: [T; 3],
    pub t_final: T,
    /// World-space position of each evaluated (unmasked) sample.
    pub positions: Vec<[f64; 3]>,
    /// Sample spacing in σ's length unit.
    pub deltas: Vec<T>,
    pub sigmas: Vec<T>,
    pub weights: Vec<T>,
    pub transmittance: Vec<T>,
    /// Density-head inputs / hidden pre-activations / logits, per sample.
    pub density_in: Vec<T>,
    pub density_pre: Vec<T>,
    pub density_logit: Vec<T>,
    /// `color_of[i]` indexes into the color arrays when sample i decoded a color.
    pub color_of: Vec<Option<usize>>,
    pub colors: Vec<[T; 3]>,
    pub color_in: Vec<T>,
    pub color_pre: Vec<T>,
    pub background: [T; 3],
}

impl<T: Real> RayTrace<T> {
    fn empty(background: [T; 3]) -> Self {
        Self {
            rgb: background,
            t_final: T::one(),
            background,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// Sample positions along `[t0, t1]`: stratified, plus importance draws when enabled.
fn sample_positions<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    origin: [f64; 3],
    direction: [f64; 3],
    (t0, t1): (f64, f64),
    pf: &ParamFeatures<T>,
    config: &RenderConfig,
    mask: Option<&MaskVolume>,
    mut rng: Option<&mut R>,
) -> Vec<f64> {
    let mut ts = stratified_samples(t0, t1, config.n_samples, rng.as_deref_mut());
    if config.n_importance > 0 {
        let scale = length_scale(&model.field.frame);
        let step = (t1 - t0) / config.n_samples as f64;
        let mut eval = SampleEvaluator::new(model);
        let sigmas: Vec<T> = ts
            .iter()
            .map(|&t| {
                let p = [origin[0] + t * direction[0], origin[1] + t * direction[1], origin[2] + t * direction[2]];
                if mask.is_some_and(|m| !m.occupied(p)) {
                    T::zero()
                } else {
                    eval.density(model, p, pf)
                }
            })
            .collect();
        let deltas = vec![T::lit(step * scale); sigmas.len()];
        let colors = vec![[T::zero(); 3]; sigmas.len()];
        let coarse = composite(&sigmas, &colors, &deltas, [T::zero(); 3]);
        let edges: Vec<f64> = (0..=config.n_samples).map(|i| t0 + i as f64 * step).collect();
        let w: Vec<f64> = coarse.weights.iter().map(|w| w.as_f64()).collect();
        let extra = importance_samples(&edges, &w, config.n_importance, rng);
        ts.extend(extra);
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    ts
}

/// Full forward pass of one ray.
pub fn trace_ray<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    origin: [f64; 3],
    direction: [f64; 3],
    pf: &ParamFeatures<T>,
    sh: &[f64],
    config: &RenderConfig,
    mask: Option<&MaskVolume>,
    rng: Option<&mut R>,
) -> RayTrace<T> {
    let background = config.background.map(T::lit);
    let Some(interval) = intersect_aabb(origin, direction, &model.field.aabb) else {
        return RayTrace::empty(background);
    };
    let ts = sample_positions(model, origin, direction, interval, pf, config, mask, rng);
    let scale = length_scale(&model.field.frame);

    let mut trace = RayTrace::empty(background);
    let din = model.decoders.density.input;
    let dh = model.decoders.density.hidden;
    let mut pe = vec![0.0; model.decoders.encoding.pe_len()];
    for (i, &t) in ts.iter().enumerate() {
        let next = ts.get(i + 1).copied().unwrap_or(interval.1);
        let p = [origin[0] + t * direction[0], origin[1] + t * direction[1], origin[2] + t * direction[2]];
        if mask.is_some_and(|m| !m.occupied(p)) {
            continue;
        }
        trace.positions.push(p);
        trace.deltas.push(T::lit((next - t).max(0.0) * scale));
        let start = trace.density_in.len();
        trace.density_in.resize(start + din, T::zero());
        fill_density_input(model, p, pf, &mut trace.density_in[start..], &mut pe);
        let pstart = trace.density_pre.len();
        trace.density_pre.resize(pstart + dh, T::zero());
        let mut z = [T::zero()];
        model
            .decoders
            .density
            .forward(&trace.density_in[start..start + din], &mut trace.density_pre[pstart..], &mut z);
        trace.density_logit.push(z[0]);
        trace.sigmas.push(z[0].softplus());
    }

    let n = trace.sigmas.len();
    let mut t = T::one();
    for i in 0..n {
        let survive = (-(trace.sigmas[i] * trace.deltas[i])).exp();
        trace.transmittance.push(t);
        trace.weights.push(t * (T::one() - survive));
        t *= survive;
    }
    trace.t_final = t;

    let grid = model.field.grid(FeatureKind::Appearance);
    let fl = grid.feature_len();
    let cin = model.decoders.color.input;
    let ch = model.decoders.color.hidden;
    let threshold = T::lit(config.weight_threshold);
    trace.color_of = vec![None; n];
    let mut rgb = [T::zero(); 3];
    for i in 0..n {
        if !(trace.weights[i] > threshold) && config.weight_threshold > 0.0 {
            continue;
        }
        let start = trace.color_in.len();
        trace.color_in.resize(start + cin, T::zero());
        let input = &mut trace.color_in[start..];
        grid.sample_into(grid_coord(model, trace.positions[i]), &mut input[..fl]);
        let rp = pf.appearance.len();
        input[fl..fl + rp].copy_from_slice(&pf.appearance);
        for (dst, &v) in input[fl + rp..].iter_mut().zip(sh) {
            *dst = T::lit(v);
        }
        let pstart = trace.color_pre.len();
        trace.color_pre.resize(pstart + ch, T::zero());
        let mut z = [T::zero(); 3];
        model
            .decoders
            .color
            .forward(&trace.color_in[start..start + cin], &mut trace.color_pre[pstart..], &mut z);
        let c = z.map(|v| v.sigmoid());
        trace.color_of[i] = Some(trace.colors.len());
        trace.colors.push(c);
        for k in 0..3 {
            rgb[k] += trace.weights[i] * c[k];
        }
    }
    for k in 0..3 {
        rgb[k] += t * background[k];
    }
    trace.rgb = rgb;
    trace
}

/// SH encoding of a (unit) ray direction at the decoder's degree.
pub fn direction_encoding<T: Real>(model: &Model<T>, direction: [f64; 3]) -> Vec<f64> {
    let mut sh = vec![0.0; model.decoders.encoding.sh_len()];
    sh_encoding_into(direction, model.decoders.encoding.sh_degree, &mut sh);
    sh
}

/// Renders a full image; deterministic unless `config.jitter` is set.
pub fn render_image<T: Real>(
    model: &Model<T>,
    camera: &Camera,
    params: &[f64],
    config: &RenderConfig,
    mask: Option<&MaskVolume>,
) -> Result<ImageF> {
    render_image_seeded(model, camera, params, config, mask, 0)
}

pub fn render_image_seeded<T: Real>(
    model: &Model<T>,
    camera: &Camera,
    params: &[f64],
    config: &RenderConfig,
    mask: Option<&MaskVolume>,
    seed: u64,
) -> Result<ImageF> {
    use rand::SeedableRng;
    config.validate()?;
    let pf = ParamFeatures::new(model, params)?;
    let origin = camera.origin();
    let width = camera.width;
    let rows: Vec<Vec<f64>> = (0..camera.height)
        .into_par_iter()
        .map(|row| {
            let mut out = Vec::with_capacity(width * 3);
            for col in 0..width {
                let dir = camera.pixel_direction(col, row);
                let sh = direction_encoding(model, dir);
                let trace = if config.jitter {
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ ((row * width + col) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    trace_ray(model, origin, dir, &pf, &sh, config, mask, Some(&mut rng))
                } else {
                    trace_ray::<T, rand_chacha::ChaCha8Rng>(model, origin, dir, &pf, &sh, config, mask, None)
                };
                out.extend(trace.rgb.iter().map(|c| c.as_f64().clamp(0.0, 1.0)));
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
