use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use dynrad::checkpoint::{self, CheckpointMeta, EXTENSION};
use dynrad::dataset::{
    blob_scene, generate_dataset, icosphere_cameras, inference_path, moving_blob_scene, param_grid, shell_scene,
    spiral_views, Intrinsics, SceneDataset,
};
use dynrad::model::ModelConfig;
use dynrad::train::{geometric_growth, train, TrainSchedule, TrainingSet};
use dynrad::{psnr, ssim, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, EvalArgs, GenDataArgs, RenderArgs, Scene, ServeArgs, TrainArgs};
use crate::loaded::LoadedModel;
use crate::service::{self, RenderRequest, ServiceConfig, ServiceState};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| ()),
        Command::Train(a) => train_cmd(&a).map(|_| ()),
        Command::Render(a) => render_cmd(&a).map(|_| ()),
        Command::Eval(a) => eval_cmd(&a).map(|_| ()),
        Command::Serve(a) => serve_cmd(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> anyhow::Result<SceneDataset> {
    let (generator, names): (_, Vec<String>) = match a.scene {
        Scene::Blob => (blob_scene(), vec![]),
        Scene::MovingBlob => (moving_blob_scene(), vec!["offset".into()]),
        Scene::Shell => (shell_scene(), vec!["opacity".into(), "tf_shift".into()]),
    };
    let poses = match a.spiral {
        Some(n) => spiral_views(n, a.radius, [0.0; 3])?.into_iter().map(|v| v.pose).collect(),
        None => icosphere_cameras(a.level, a.radius, [0.0; 3])?,
    };
    let params = if a.params.is_empty() {
        param_grid(&generator.volume.param_ranges, a.param_samples)
    } else {
        a.params.iter().map(|p| p.0.clone()).collect()
    };
    let ds = generate_dataset(
        &generator,
        Intrinsics::square(a.size),
        &poses,
        &params,
        names,
        a.background,
        &a.out,
    )?;
    log::info!("wrote {} frames to {}", ds.frames.len(), a.out.display());
    Ok(ds)
}

/// Node count per parameter axis: the number of distinct training values, at least 2.
fn param_nodes(params: &[Vec<f64>], k: usize) -> Vec<usize> {
    (0..k)
        .map(|axis| {
            let mut vals: Vec<f64> = params.iter().map(|p| p[axis]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            vals.len().max(2)
        })
        .collect()
}

pub fn metrics_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("metrics.csv")
}

pub struct TrainResult {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
}

pub fn train_cmd(a: &TrainArgs) -> anyhow::Result<TrainResult> {
    let ds = SceneDataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let set = TrainingSet::load(&ds, &a.data)?;
    let k = ds.param_ranges.len();
    let mut config = ModelConfig::desk(ds.aabb, ds.param_ranges.clone(), param_nodes(&set.params, k));
    let initial = a.grid.min(32);
    if a.grid < 2 {
        bail!("--grid must be at least 2");
    }
    config.field.resolution = [initial; 3];
    let model = Model::new(&config, &mut ChaCha8Rng::seed_from_u64(a.seed))?;

    let mut schedule = TrainSchedule::desk(a.iters);
    schedule.batch_rays = a.batch;
    schedule.target_samples = a.samples;
    schedule.warmup.0 = a.samples.min(64);
    schedule.grid_growth = if a.grid > initial && !schedule.grid_growth.is_empty() {
        let milestones: Vec<usize> = schedule.grid_growth.iter().map(|g| g.0).collect();
        geometric_growth(initial.pow(3), a.grid.pow(3), &milestones)
    } else {
        Vec::new()
    };

    let mut log = String::from("iteration,rec,l1,tv,total,psnr_batch\n");
    let out = train(model, &set, &schedule, a.seed, |r| {
        if r.iteration % 100 == 0 {
            log::info!("{}", r.log_line());
        }
        let _ = writeln!(log, "{},{:e},{:e},{:e},{:e},{:.4}", r.iteration, r.rec, r.l1, r.tv, r.total, r.psnr_batch);
    })?;
    log::info!("trained {} iterations in {:.1}s", a.iters, out.seconds);

    let meta = CheckpointMeta {
        param_names: ds.param_names.clone(),
        background: ds.background,
        sigma_threshold: schedule.sigma_threshold,
        render_samples: schedule.target_samples,
        image_size: Some([ds.intrinsics.width, ds.intrinsics.height]),
        focal_ratio: Some(ds.intrinsics.focal / ds.intrinsics.width as f64),
        param_samples: set.params.clone(),
        schedule: Some(schedule),
        dataset_fingerprint: Some(ds.fingerprint()),
    };
    let path = if a.out.extension().is_some() {
        a.out.clone()
    } else {
        a.out.with_extension(EXTENSION)
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    checkpoint::save(&out.model, &meta, &path)?;
    let metrics = metrics_log_path(&path);
    std::fs::write(&metrics, log)?;
    log::info!("wrote {} and {}", path.display(), metrics.display());
    Ok(TrainResult {
        checkpoint: path,
        metrics,
        model: out.model,
        meta,
    })
}

/// Per-image record written next to rendered views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedView {
    pub file: String,
    pub request: RenderRequest,
}

pub fn render_cmd(a: &RenderArgs) -> anyhow::Result<Vec<RenderedView>> {
    let loaded = LoadedModel::load(&a.model)?;
    let params = a.params.as_ref().map_or_else(|| loaded.default_params(), |p| p.0.clone());
    let requests: Vec<RenderRequest> = match &a.poses {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => inference_path(a.views, (-180.0, 180.0), (-90.0, 90.0), a.radius, [0.0; 3])?
            .into_iter()
            .map(|v| RenderRequest::orbit(v.azimuth, v.elevation, a.radius, params.clone(), a.size, a.size))
            .collect(),
    };
    std::fs::create_dir_all(&a.out)?;
    let ranges = loaded.param_ranges().to_vec();
    let mut views = Vec::with_capacity(requests.len());
    for (i, req) in requests.into_iter().enumerate() {
        let pose = req
            .validate(&ranges, usize::MAX)
            .map_err(|e| anyhow::anyhow!("view {i}: {e}"))?;
        let camera = loaded.camera(pose, req.width, req.height)?;
        let config = loaded.render_config(req.samples.or(a.samples), a.background);
        let file = format!("{i:04}.png");
        loaded.render(&camera, &req.params, &config)?.save_png(a.out.join(&file))?;
        views.push(RenderedView { file, request: req });
    }
    std::fs::write(a.out.join("views.json"), serde_json::to_string_pretty(&views)?)?;
    log::info!("wrote {} views to {}", views.len(), a.out.display());
    Ok(views)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewScore {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<ViewScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub renders: PathBuf,
}

pub fn eval_cmd(a: &EvalArgs) -> anyhow::Result<EvalReport> {
    let loaded = LoadedModel::load(&a.model)?;
    let ds = SceneDataset::load(&a.data)?;
    let renders = a.renders.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map_or("metrics".into(), |s| s.to_string_lossy().into_owned());
        a.out.with_file_name(format!("{stem}_renders"))
    });
    std::fs::create_dir_all(&renders)?;
    let config = loaded.render_config(a.samples, Some(ds.background));
    let mut scores = Vec::with_capacity(ds.frames.len());
    for (i, frame) in ds.frames.iter().enumerate() {
        let camera = ds.camera(i)?;
        let img = loaded.render(&camera, &frame.params, &config)?.quantized();
        img.save_png(renders.join(format!("{i:04}.png")))?;
        let gt = ds.load_image(&a.data, i)?;
        scores.push(ViewScore {
            view: i,
            psnr: psnr(&img, &gt)?,
            ssim: ssim(&img, &gt)?,
        });
    }
    if scores.is_empty() {
        bail!("dataset has no frames to evaluate");
    }
    let n = scores.len() as f64;
    let mean_psnr = scores.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / n;
    let mut csv = String::from("view,psnr,ssim\n");
    for s in &scores {
        let _ = writeln!(csv, "{},{:.6},{:.6}", s.view, s.psnr, s.ssim);
    }
    let _ = writeln!(csv, "mean,{mean_psnr:.6},{mean_ssim:.6}");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, csv)?;
    log::info!("mean psnr {mean_psnr:.3} dB, ssim {mean_ssim:.4} over {} views", scores.len());
    Ok(EvalReport {
        scores,
        mean_psnr,
        mean_ssim,
        renders,
    })
}

pub fn serve_cmd(a: &ServeArgs) -> anyhow::Result<()> {
    let loaded = LoadedModel::load(&a.model)?;
    let state = ServiceState::new(
        loaded,
        ServiceConfig {
            max_size: a.max_size,
            samples: a.samples,
            background: a.background,
            latency_budget: Duration::from_millis(a.budget_ms),
        },
    );
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(service::serve(state, a.port))
}
