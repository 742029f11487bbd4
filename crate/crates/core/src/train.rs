//! Losses, regularizers, and the optimization loop.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::field::{resolution_for_budget, Aabb, FactorizedField};
use crate::grad::{backward_ray, AdamState, BackwardScratch, GradientBuffers, ParamFeatureGrads};
use crate::metrics::psnr_from_mse;
use crate::model::{Model, TensorKind};
use crate::real::Real;
use crate::render::{direction_encoding, intersect_aabb, trace_ray, Camera, MaskVolume, ParamFeatures, RenderConfig};

/// L1 weight `initial` before iteration `after_iter`, `later` from then on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Schedule {
    pub initial: f64,
    pub after_iter: usize,
    pub later: f64,
}

impl L1Schedule {
    pub fn at(&self, iteration: usize) -> f64 {
        if iteration < self.after_iter {
            self.initial
        } else {
            self.later
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    /// Exponential decay of both rates to 0.1× over the run.
    #[serde(default)]
    pub lr_decay: bool,
    pub l1: L1Schedule,
    pub tv_weight: f64,
    /// `(iteration, voxel budget)` upsampling milestones.
    pub grid_growth: Vec<(usize, usize)>,
    pub mask_iter: Option<usize>,
    pub voxelskip_iter: Option<usize>,
    /// Crop the grids to the occupied bounds at `mask_iter`.
    pub shrink_aabb: bool,
    /// `(start_samples, end_iter)` of the linear sample-count ramp.
    pub warmup: (usize, usize),
    pub target_samples: usize,
    pub importance_extra: usize,
    /// σ cutoff for occupancy masks.
    pub sigma_threshold: f64,
    /// Fixed number of partial gradient buffers per step (keeps results independent of thread count).
    pub chunks: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            batch_rays: 4096,
            lr_grid: 0.02,
            lr_mlp: 1e-3,
            lr_decay: false,
            l1: L1Schedule {
                initial: 1e-4,
                after_iter: 2000,
                later: 1e-5,
            },
            tv_weight: 1.0,
            grid_growth: geometric_growth(128usize.pow(3), 300usize.pow(3), &[2000, 4000, 6000, 8000]),
            mask_iter: Some(2000),
            voxelskip_iter: Some(4000),
            shrink_aabb: true,
            warmup: (192, 0),
            target_samples: 192,
            importance_extra: 64,
            sigma_threshold: 1e-2,
            chunks: 32,
        }
    }
}

impl TrainSchedule {
    /// Reduced schedule for CPU runs: 32³ growing to 64³ over the first fifth,
    /// 512-ray batches, 96 samples per ray; mask and shrink at 25%, voxel
    /// skipping from 30%, σ threshold 0.1.
    pub fn desk(iterations: usize) -> Self {
        let at = |num: usize, den: usize| iterations * num / den;
        let staged = iterations >= 40;
        Self {
            iterations,
            batch_rays: 512,
            l1: L1Schedule {
                initial: 1e-4,
                after_iter: at(1, 4),
                later: 1e-5,
            },
            grid_growth: if staged {
                geometric_growth(32usize.pow(3), 64usize.pow(3), &[at(1, 20), at(2, 20), at(3, 20), at(4, 20)])
            } else {
                Vec::new()
            },
            mask_iter: staged.then(|| at(1, 4)),
            voxelskip_iter: staged.then(|| at(3, 10)),
            warmup: (64, at(1, 10)),
            target_samples: 96,
            importance_extra: 32,
            sigma_threshold: 0.1,
            chunks: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_rays == 0 || self.chunks == 0 {
            return bad("batch_rays and chunks must be positive".into());
        }
        if !(self.lr_grid >= 0.0 && self.lr_mlp >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.grid_growth.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("grid growth milestones must be strictly increasing".into());
        }
        let milestones = self
            .grid_growth
            .iter()
            .map(|g| g.0)
            .chain(self.mask_iter)
            .chain(self.voxelskip_iter);
        for m in milestones {
            if m >= self.iterations {
                return bad(format!("milestone {m} is not below the iteration count {}", self.iterations));
            }
        }
        if let (Some(m), Some(v)) = (self.mask_iter, self.voxelskip_iter) {
            if m > v {
                return bad("mask_iter must not come after voxelskip_iter".into());
            }
        }
        if self.warmup.0 > self.target_samples {
            return bad("warm-up start samples exceed the target sample count".into());
        }
        if self.warmup.0 < 2 {
            return bad("at least 2 samples per ray are required".into());
        }
        Ok(())
    }

    /// Samples per ray at `iteration` during the warm-up ramp.
    pub fn samples_at(&self, iteration: usize) -> usize {
        let (start, end) = self.warmup;
        if end == 0 || iteration >= end {
            return self.target_samples;
        }
        let t = iteration as f64 / end as f64;
        (start as f64 + t * (self.target_samples - start) as f64).round() as usize
    }

    pub fn lr_factor(&self, iteration: usize) -> f64 {
        if self.lr_decay && self.iterations > 0 {
            0.1f64.powf(iteration as f64 / self.iterations as f64)
        } else {
            1.0
        }
    }
}

/// Voxel budgets interpolated geometrically from `initial` (exclusive) to `final_budget`.
pub fn geometric_growth(initial: usize, final_budget: usize, milestones: &[usize]) -> Vec<(usize, usize)> {
    let n = milestones.len();
    let (a, b) = ((initial as f64).ln(), (final_budget as f64).ln());
    milestones
        .iter()
        .enumerate()
        .map(|(i, &it)| (it, (a + (b - a) * (i + 1) as f64 / n as f64).exp().round() as usize))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub rec: f64,
    pub l1: f64,
    pub tv: f64,
    pub total: f64,
    pub psnr_batch: f64,
}

impl LossReport {
    /// One record of the plain-text metrics log.
    pub fn log_line(&self) -> String {
        format!(
            "{} rec={:.8e} l1={:.8e} tv={:.8e} total={:.8e} psnr={:.4}",
            self.iteration, self.rec, self.l1, self.tv, self.total, self.psnr_batch
        )
    }
}

/// Mean over rays of the squared color residual norm.
pub fn reconstruction_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            a: (pred.len(), 1),
            b: (target.len(), 1),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / pred.len() as f64)
}

/// PSNR of a batch from its reconstruction loss (per-ray squared norm over 3 channels).
pub fn batch_psnr(rec: f64) -> f64 {
    psnr_from_mse(rec / 3.0)
}

fn grid_tensors<T: Real>(field: &FactorizedField<T>) -> impl Iterator<Item = (TensorKind, &[T])> {
    field.tensor_infos().into_iter().map(|i| i.kind).zip(field.tensors())
}

/// Mean magnitude over spatial weights, with parameter vectors measured from 1.
pub fn l1_loss<T: Real>(field: &FactorizedField<T>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (kind, data) in grid_tensors(field) {
        let param = matches!(kind, TensorKind::ParamVector { .. });
        for &w in data {
            let w = w.as_f64();
            sum += if param { (1.0 - w).abs() } else { w.abs() };
        }
        count += data.len();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn tv_counts(kinds: &[TensorKind]) -> (usize, usize) {
    let vectors = kinds
        .iter()
        .filter(|k| matches!(k, TensorKind::SpatialVector { .. } | TensorKind::ParamVector { .. }))
        .count();
    let matrices = kinds.iter().filter(|k| matches!(k, TensorKind::SpatialMatrix { .. })).count();
    (vectors, matrices)
}

/// Total variation of every vector (spatial and parameter) and matrix.
pub fn tv_loss<T: Real>(field: &FactorizedField<T>) -> f64 {
    let kinds: Vec<TensorKind> = field.tensor_infos().into_iter().map(|i| i.kind).collect();
    let (nv, nm) = tv_counts(&kinds);
    let mut total = 0.0;
    for (kind, data) in kinds.iter().zip(field.tensors()) {
        match *kind {
            TensorKind::SpatialVector { len, rank } | TensorKind::ParamVector { len, rank } => {
                let mut s = 0.0;
                for i in 0..len.saturating_sub(1) {
                    for r in 0..rank {
                        let d = data[(i + 1) * rank + r].as_f64() - data[i * rank + r].as_f64();
                        s += d * d;
                    }
                }
                total += s / (nv * rank * len) as f64;
            }
            TensorKind::SpatialMatrix { rows, cols, rank } => {
                let at = |i: usize, j: usize, r: usize| data[(i * cols + j) * rank + r].as_f64();
                let mut s = 0.0;
                for i in 0..rows {
                    for j in 0..cols {
                        for r in 0..rank {
                            if i + 1 < rows {
                                s += (at(i + 1, j, r) - at(i, j, r)).powi(2);
                            }
                            if j + 1 < cols {
                                s += (at(i, j + 1, r) - at(i, j, r)).powi(2);
                            }
                        }
                    }
                }
                total += s / (nm * rank * rows * cols) as f64;
            }
            _ => {}
        }
    }
    total
}

/// Adds `λ1 · ∇l1 + λ2 · ∇tv` to the field part of `grads`.
pub fn add_regularizer_gradients<T: Real>(field: &FactorizedField<T>, l1: f64, tv: f64, grads: &mut FactorizedField<T>) {
    let kinds: Vec<TensorKind> = field.tensor_infos().into_iter().map(|i| i.kind).collect();
    let count: usize = field.tensors().iter().map(|t| t.len()).sum();
    let (nv, nm) = tv_counts(&kinds);
    for ((kind, data), g) in kinds.iter().zip(field.tensors()).zip(grads.tensors_mut()) {
        if l1 != 0.0 && count > 0 {
            let scale = l1 / count as f64;
            let param = matches!(kind, TensorKind::ParamVector { .. });
            for (gw, &w) in g.iter_mut().zip(data) {
                let w = w.as_f64();
                let s = if param { -sign(1.0 - w) } else { sign(w) };
                *gw += T::lit(scale * s);
            }
        }
        if tv == 0.0 {
            continue;
        }
        match *kind {
            TensorKind::SpatialVector { len, rank } | TensorKind::ParamVector { len, rank } => {
                let scale = 2.0 * tv / (nv * rank * len) as f64;
                for i in 0..len.saturating_sub(1) {
                    for r in 0..rank {
                        let (a, b) = (i * rank + r, (i + 1) * rank + r);
                        let d = T::lit(scale * (data[b].as_f64() - data[a].as_f64()));
                        g[b] += d;
                        g[a] -= d;
                    }
                }
            }
            TensorKind::SpatialMatrix { rows, cols, rank } => {
                let scale = 2.0 * tv / (nm * rank * rows * cols) as f64;
                let idx = |i: usize, j: usize, r: usize| (i * cols + j) * rank + r;
                for i in 0..rows {
                    for j in 0..cols {
                        for r in 0..rank {
                            let here = idx(i, j, r);
                            for next in [(i + 1 < rows).then(|| idx(i + 1, j, r)), (j + 1 < cols).then(|| idx(i, j + 1, r))]
                                .into_iter()
                                .flatten()
                            {
                                let d = T::lit(scale * (data[next].as_f64() - data[here].as_f64()));
                                g[next] += d;
                                g[here] -= d;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Training images with their cameras and parameter tuples.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub cameras: Vec<Camera>,
    /// 8-bit RGB pixels per frame.
    pub images: Vec<Vec<u8>>,
    /// Index into `params` per frame.
    pub frame_params: Vec<usize>,
    pub params: Vec<Vec<f64>>,
    pub background: [f64; 3],
    pub aabb: Aabb,
}

impl TrainingSet {
    pub fn load(dataset: &SceneDataset, dir: impl AsRef<Path>) -> Result<Self> {
        let images = (0..dataset.frames.len())
            .map(|i| dataset.load_image(dir.as_ref(), i).map(|img| img.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(dataset, images)
    }

    pub fn from_images(dataset: &SceneDataset, images: Vec<Vec<u8>>) -> Result<Self> {
        let params = dataset.distinct_params();
        let frame_params = dataset
            .frames
            .iter()
            .map(|f| params.iter().position(|p| p == &f.params).expect("distinct set covers every frame"))
            .collect();
        let cameras = (0..dataset.frames.len()).map(|i| dataset.camera(i)).collect::<Result<Vec<_>>>()?;
        let expect = 3 * dataset.intrinsics.width * dataset.intrinsics.height;
        if images.len() != cameras.len() || images.iter().any(|im| im.len() != expect) {
            return Err(Error::Config("image buffers do not match the dataset frames".into()));
        }
        Ok(Self {
            cameras,
            images,
            frame_params,
            params,
            background: dataset.background,
            aabb: dataset.aabb,
        })
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.cameras.first().map_or(0, |c| c.width * c.height)
    }

    fn target(&self, frame: usize, pixel: usize) -> [f64; 3] {
        let px = &self.images[frame][3 * pixel..3 * pixel + 3];
        [px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0]
    }

    fn ray(&self, frame: usize, pixel: usize) -> ([f64; 3], [f64; 3]) {
        let cam = &self.cameras[frame];
        (cam.origin(), cam.pixel_direction(pixel % cam.width, pixel / cam.width))
    }

    /// `(frame, pixel)` of every ray that intersects `aabb`.
    pub fn ray_pool(&self, aabb: &Aabb) -> Vec<(u32, u32)> {
        let per = self.pixels_per_frame();
        (0..self.cameras.len())
            .into_par_iter()
            .flat_map_iter(|f| {
                (0..per).filter_map(move |px| {
                    let (o, d) = self.ray(f, px);
                    intersect_aabb(o, d, aabb).map(|_| (f as u32, px as u32))
                })
            })
            .collect()
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Most recent occupancy mask, if one was built.
    pub mask: Option<MaskVolume>,
    pub reports: Vec<LossReport>,
    pub pool_size: usize,
    pub seconds: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Worker {
    grads: GradientBuffers<f32>,
    dpf: Vec<ParamFeatureGrads<f32>>,
    scratch: BackwardScratch<f32>,
    rec: f64,
}

impl Worker {
    fn new(model: &Model<f32>, features: &[ParamFeatures<f32>]) -> Self {
        Self {
            grads: GradientBuffers::zeros_for(model),
            dpf: features.iter().map(ParamFeatureGrads::zeros).collect(),
            scratch: BackwardScratch::new(model),
            rec: 0.0,
        }
    }

    fn reset(&mut self) {
        self.grads.zero();
        for d in &mut self.dpf {
            d.density.fill(0.0);
            d.appearance.fill(0.0);
        }
        self.rec = 0.0;
    }
}

fn learning_rates(model: &Model<f32>, schedule: &TrainSchedule, iteration: usize) -> Vec<f64> {
    let f = schedule.lr_factor(iteration);
    model
        .tensor_infos()
        .iter()
        .map(|i| if i.kind.is_grid() { schedule.lr_grid * f } else { schedule.lr_mlp * f })
        .collect()
}

fn check_finite(value: f64, term: &str, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            iteration,
        })
    }
}

/// Optimizes `model` on `set`. `observer` sees every report as it is produced.
pub fn train(
    mut model: Model<f32>,
    set: &TrainingSet,
    schedule: &TrainSchedule,
    seed: u64,
    mut observer: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let start = Instant::now();
    if model.field.param_dims() != set.params.first().map_or(0, |p| p.len()) {
        return Err(Error::ParamCount {
            expected: model.field.param_dims(),
            got: set.params.first().map_or(0, |p| p.len()),
        });
    }
    let pool = set.ray_pool(&model.field.aabb);
    if pool.is_empty() {
        return Err(Error::EmptyRayPool);
    }
    log::info!("ray pool: {} of {} rays", pool.len(), set.cameras.len() * set.pixels_per_frame());

    let mut adam = AdamState::for_model(&model);
    let mut mask: Option<MaskVolume> = None;
    let mut skipping = false;
    let mut reports = Vec::with_capacity(schedule.iterations);
    let mut workers: Vec<Worker> = Vec::new();

    for it in 0..schedule.iterations {
        let mut reshaped = false;
        if schedule.mask_iter == Some(it) {
            let m = MaskVolume::build(&model, model.field.resolution(), schedule.sigma_threshold, &set.params)?;
            log::info!("iteration {it}: mask occupancy {:.4}", m.occupied_fraction());
            if schedule.shrink_aabb {
                match m.occupied_aabb().and_then(|b| b.intersection(&model.field.aabb)) {
                    Some(bounds) => {
                        let old = model.field.resolution();
                        let budget: usize = old.iter().product();
                        let res = resolution_for_budget(&bounds, budget);
                        model.field = model.field.crop_to_aabb(bounds, res)?;
                        log::info!("iteration {it}: cropped to {bounds:?} at {res:?}");
                        reshaped = true;
                    }
                    None => log::warn!("iteration {it}: empty mask, keeping the bounding box"),
                }
            }
            mask = Some(m);
        }
        if schedule.voxelskip_iter == Some(it) {
            let m = MaskVolume::build(&model, model.field.resolution(), schedule.sigma_threshold, &set.params)?;
            log::info!("iteration {it}: voxel skipping on, occupancy {:.4}", m.occupied_fraction());
            mask = Some(m);
            skipping = true;
        }
        if let Some(&(_, budget)) = schedule.grid_growth.iter().find(|g| g.0 == it) {
            let old = model.field.resolution();
            let target = resolution_for_budget(&model.field.aabb, budget);
            let res = [0, 1, 2].map(|a| target[a].max(old[a]));
            model.field = model.field.upsample(res)?;
            log::info!("iteration {it}: upsampled {old:?} -> {res:?}");
            reshaped = true;
        }
        if reshaped || workers.is_empty() {
            if reshaped {
                adam = AdamState::for_model(&model);
            }
            workers.clear();
        }

        let features: Vec<ParamFeatures<f32>> = set
            .params
            .iter()
            .map(|p| ParamFeatures::new(&model, p))
            .collect::<Result<_>>()?;
        if workers.is_empty() {
            workers = (0..schedule.chunks).map(|_| Worker::new(&model, &features)).collect();
        }

        let mut batch_rng = ChaCha8Rng::seed_from_u64(mix(seed, it as u64, u64::MAX));
        let batch: Vec<(u32, u32)> = (0..schedule.batch_rays)
            .map(|_| pool[batch_rng.gen_range(0..pool.len())])
            .collect();
        let config = RenderConfig {
            n_samples: schedule.samples_at(it),
            n_importance: if skipping { schedule.importance_extra } else { 0 },
            background: set.background,
            sigma_threshold: schedule.sigma_threshold,
            jitter: true,
            ..RenderConfig::default()
        };
        let active_mask = if skipping { mask.as_ref() } else { None };
        let per_chunk = batch.len().div_ceil(schedule.chunks);
        let inv_batch = 1.0 / batch.len() as f64;
        let model_ref = &model;
        let features_ref = &features;
        workers.par_iter_mut().enumerate().for_each(|(c, w)| {
            w.reset();
            let lo = (c * per_chunk).min(batch.len());
            let hi = ((c + 1) * per_chunk).min(batch.len());
            for (slot, &(frame, pixel)) in batch.iter().enumerate().take(hi).skip(lo) {
                let (frame, pixel) = (frame as usize, pixel as usize);
                let (o, d) = set.ray(frame, pixel);
                let pid = set.frame_params[frame];
                let pf = &features_ref[pid];
                let sh = direction_encoding(model_ref, d);
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, it as u64, slot as u64));
                let trace = trace_ray(model_ref, o, d, pf, &sh, &config, active_mask, Some(&mut rng));
                let target = set.target(frame, pixel);
                let mut d_rgb = [0.0f32; 3];
                for ch in 0..3 {
                    let r = trace.rgb[ch] as f64 - target[ch];
                    w.rec += r * r;
                    d_rgb[ch] = (2.0 * r * inv_batch) as f32;
                }
                backward_ray(model_ref, &trace, d_rgb, &mut w.grads, &mut w.dpf[pid], &mut w.scratch);
            }
        });

        let (head, tail) = workers.split_first_mut().expect("at least one chunk");
        for w in tail.iter() {
            head.grads.merge(&w.grads);
            head.rec += w.rec;
            for (a, b) in head.dpf.iter_mut().zip(&w.dpf) {
                for (x, y) in a.density.iter_mut().zip(&b.density) {
                    *x += *y;
                }
                for (x, y) in a.appearance.iter_mut().zip(&b.appearance) {
                    *x += *y;
                }
            }
        }
        for (pid, d) in head.dpf.iter().enumerate() {
            d.apply(&model, &set.params[pid], &mut head.grads)?;
        }

        let lambda1 = schedule.l1.at(it);
        let rec = head.rec * inv_batch;
        let l1 = l1_loss(&model.field);
        let tv = tv_loss(&model.field);
        let report = LossReport {
            iteration: it,
            rec,
            l1,
            tv,
            total: rec + lambda1 * l1 + schedule.tv_weight * tv,
            psnr_batch: batch_psnr(rec),
        };
        check_finite(rec, "reconstruction loss", it)?;
        check_finite(l1, "l1 loss", it)?;
        check_finite(tv, "tv loss", it)?;
        check_finite(report.total, "total loss", it)?;
        add_regularizer_gradients(&model.field, lambda1, schedule.tv_weight, &mut head.grads.model.field);
        if let Some(name) = head.grads.first_non_finite() {
            return Err(Error::NonFinite {
                term: format!("gradient of {name}"),
                iteration: it,
            });
        }
        let lrs = learning_rates(&model, schedule, it);
        adam.step(model.tensors_mut(), head.grads.tensors(), &lrs)?;
        observer(&report);
        reports.push(report);
    }

    Ok(TrainOutcome {
        model,
        mask,
        reports,
        pool_size: pool.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;

    fn field(seed: u64) -> FactorizedField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = FieldConfig {
            density_rank: 2,
            appearance_rank: 3,
            param_rank: 2,
            resolution: [5, 4, 6],
            param_resolutions: vec![3, 4],
            param_ranges: vec![(0.0, 1.0), (-1.0, 1.0)],
            init_scale: 0.7,
            ..FieldConfig::default()
        };
        let mut f = FactorizedField::new(&config, &mut rng).unwrap();
        for t in f.tensors_mut() {
            for w in t.iter_mut() {
                *w += rng.gen_range(-0.3..0.3);
            }
        }
        f
    }

    #[test]
    fn reconstruction_examples() {
        assert_eq!(reconstruction_loss(&[[0.3, 0.2, 0.1]], &[[0.3, 0.2, 0.1]]).unwrap(), 0.0);
        let r = reconstruction_loss(&[[0.6, 0.5, 0.5]], &[[0.5, 0.5, 0.5]]).unwrap();
        assert!((r - 0.01).abs() < 1e-12);
        assert!(reconstruction_loss(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn reconstruction_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<[f64; 3]> = (0..64).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let target: Vec<[f64; 3]> = (0..64).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let mut acc = 0.0;
        for i in 0..64 {
            for c in 0..3 {
                acc += (pred[i][c] - target[i][c]) * (pred[i][c] - target[i][c]) / 64.0;
            }
        }
        assert!((reconstruction_loss(&pred, &target).unwrap() - acc).abs() < 1e-7);
    }

    #[test]
    fn l1_examples() {
        let mut f = field(1);
        for p in f.density_params.vectors.iter_mut().chain(f.appearance_params.as_mut().unwrap().vectors.iter_mut()) {
            p.data.fill(1.0);
        }
        f.density.fill(0.0);
        f.appearance.as_mut().unwrap().fill(0.0);
        assert_eq!(l1_loss(&f), 0.0);
        // Spatial weights {1, −1, 3, −3} with everything else at its zero-penalty value.
        let n: usize = f.tensors().iter().map(|t| t.len()).sum();
        let m = &mut f.density.matrices[0].data;
        m[0] = 1.0;
        m[1] = -1.0;
        m[2] = 3.0;
        m[3] = -3.0;
        assert!((l1_loss(&f) - 8.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        let mut f = field(2);
        for t in f.tensors_mut() {
            t.fill(0.4);
        }
        assert_eq!(tv_loss(&f), 0.0);
    }

    fn tv_oracle(mats: &[Vec<Vec<f64>>]) -> f64 {
        let n = mats.len() as f64;
        mats.iter()
            .map(|m| {
                let (h, w) = (m.len(), m[0].len());
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        if i + 1 < h {
                            s += (m[i + 1][j] - m[i][j]).powi(2);
                        }
                        if j + 1 < w {
                            s += (m[i][j + 1] - m[i][j]).powi(2);
                        }
                    }
                }
                s / (n * (h * w) as f64)
            })
            .sum()
    }

    #[test]
    fn tv_matches_double_loop_on_random_matrices() {
        use crate::field::Decomposition;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = FieldConfig {
            density_rank: 1,
            appearance_rank: 1,
            param_rank: 1,
            resolution: [8; 3],
            decomposition: Decomposition::Matrices,
            ..FieldConfig::default()
        };
        let mut f = FactorizedField::<f64>::new(&config, &mut rng).unwrap();
        for t in f.tensors_mut() {
            t.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        }
        let mut mats = Vec::new();
        for g in [&f.density, f.appearance.as_ref().unwrap()] {
            for m in &g.matrices {
                mats.push((0..8).map(|i| (0..8).map(|j| m.at(i, j, 0)).collect()).collect());
            }
        }
        // The only vectors left are the (empty-parameter) lines of Matrices mode, if any.
        let vector_free = f.tensor_infos().iter().all(|i| matches!(i.kind, TensorKind::SpatialMatrix { .. }));
        assert!(vector_free);
        assert!((tv_loss(&f) - tv_oracle(&mats)).abs() < 1e-7);
    }

    #[test]
    fn tv_single_vector_example() {
        use crate::field::{Decomposition, ParameterAxes};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = FieldConfig {
            density_rank: 1,
            appearance_rank: 1,
            param_rank: 1,
            resolution: [2; 3],
            decomposition: Decomposition::Matrices,
            layout: crate::field::GridLayout::Unified,
            ..FieldConfig::default()
        };
        let mut f = FactorizedField::<f64>::new(&config, &mut rng).unwrap();
        for t in f.tensors_mut() {
            t.fill(0.0);
        }
        f.density_params = ParameterAxes::ones(1, &[2], &[(0.0, 1.0)]).unwrap();
        f.density_params.vectors[0].data = vec![0.0, 1.0];
        assert!((tv_loss(&f) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let f = field(6);
        let (l1w, tvw) = (0.3, 0.7);
        let mut g = f.zeros_like();
        add_regularizer_gradients(&f, l1w, tvw, &mut g);
        let total = |f: &FactorizedField<f64>| l1w * l1_loss(f) + tvw * tv_loss(f);
        let eps = 1e-6;
        let lens: Vec<usize> = f.tensors().iter().map(|t| t.len()).collect();
        for (ti, &len) in lens.iter().enumerate() {
            for j in 0..len {
                let mut a = f.clone();
                a.tensors_mut()[ti][j] += eps;
                let mut b = f.clone();
                b.tensors_mut()[ti][j] -= eps;
                let numeric = (total(&a) - total(&b)) / (2.0 * eps);
                let analytic = g.tensors()[ti][j];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-3, "tensor {ti}[{j}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainSchedule {
            iterations: 100,
            grid_growth: vec![(10, 1000), (10, 2000)],
            mask_iter: None,
            voxelskip_iter: None,
            ..TrainSchedule::default()
        };
        assert!(s.validate().is_err());
        s.grid_growth = vec![(10, 1000), (20, 2000)];
        assert!(s.validate().is_ok());
        s.mask_iter = Some(100);
        assert!(s.validate().is_err());
        s.mask_iter = Some(50);
        s.warmup = (256, 10);
        assert!(s.validate().is_err());
    }

    #[test]
    fn warmup_ramp_and_growth() {
        let s = TrainSchedule {
            warmup: (64, 100),
            target_samples: 192,
            ..TrainSchedule::default()
        };
        assert_eq!(s.samples_at(0), 64);
        assert_eq!(s.samples_at(50), 128);
        assert_eq!(s.samples_at(100), 192);
        assert_eq!(s.samples_at(5000), 192);
        let g = geometric_growth(1000, 8000, &[1, 2, 3]);
        assert_eq!(g, vec![(1, 2000), (2, 4000), (3, 8000)]);
    }

    #[test]
    fn l1_switches_at_milestone() {
        let l = L1Schedule {
            initial: 1e-4,
            after_iter: 10,
            later: 1e-5,
        };
        assert_eq!(l.at(9), 1e-4);
        assert_eq!(l.at(10), 1e-5);
    }

    #[test]
    fn report_log_line_is_parseable() {
        let r = LossReport {
            iteration: 7,
            rec: 0.25,
            l1: 0.5,
            tv: 0.125,
            total: 0.375,
            psnr_batch: 10.79,
        };
        let line = r.log_line();
        assert!(line.starts_with("7 rec="));
        assert_eq!(line.split_whitespace().count(), 6);
    }
}
