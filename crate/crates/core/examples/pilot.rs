//! Desk-scale timing and quality probe on the blob scene.
//!
//! Environment knobs: SIZE, ITERS, SEED, MASK and SKIP (milestone iterations
//! overriding the desk schedule; 0 disables), SHRINK (0 or 1). Run with
//! `RUST_LOG=info` to see milestone logs.

use std::time::Instant;

use dynrad::dataset::{blob_scene, generate_dataset, icosphere_cameras, spiral_views, Intrinsics};
use dynrad::model::ModelConfig;
use dynrad::render::render_image;
use dynrad::train::{train, TrainSchedule, TrainingSet};
use dynrad::{psnr, ssim, Aabb, MaskVolume, Model, RenderConfig};
use rand::SeedableRng;

fn knob(name: &str) -> Option<usize> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn main() -> dynrad::Result<()> {
    env_logger::init();
    let size = knob("SIZE").unwrap_or(128);
    let iters = knob("ITERS").unwrap_or(2000);
    let seed = knob("SEED").unwrap_or(7) as u64;
    let dir = tempfile::tempdir()?;
    let gen = blob_scene();
    let intr = Intrinsics::square(size);
    let t = Instant::now();
    let poses = icosphere_cameras(1, 3.0, [0.0; 3])?;
    let ds = generate_dataset(&gen, intr, &poses, &[vec![]], vec![], [1.0; 3], dir.path())?;
    let set = TrainingSet::load(&ds, dir.path())?;
    let config = ModelConfig::desk(Aabb::cube(1.0), vec![], vec![]);
    let model = Model::new(&config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))?;
    let mut schedule = TrainSchedule::desk(iters);
    if let Some(m) = knob("MASK") {
        schedule.mask_iter = (m > 0).then_some(m);
    }
    if let Some(s) = knob("SKIP") {
        schedule.voxelskip_iter = (s > 0).then_some(s);
    }
    if let Some(s) = knob("SHRINK") {
        schedule.shrink_aabb = s != 0;
    }
    let out = train(model, &set, &schedule, seed, |r| {
        if r.iteration % 100 == 0 {
            println!("{} ({:.0}s)", r.log_line(), t.elapsed().as_secs_f64());
        }
    })?;
    println!("trained in {:.1}s, box {:?}", out.seconds, out.model.field.aabb);
    for tau in [1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0] {
        let m = MaskVolume::build(&out.model, out.model.field.resolution(), tau, &set.params)?;
        println!("threshold {tau}: occupancy {:.4}, bounds {:?}", m.occupied_fraction(), m.occupied_aabb());
    }
    let rc = RenderConfig {
        n_samples: schedule.target_samples,
        n_importance: schedule.importance_extra,
        background: [1.0; 3],
        ..RenderConfig::default()
    };
    for v in spiral_views(5, 3.0, [0.0; 3])? {
        let cam = intr.camera(v.pose)?;
        let gt = gen.render(&cam, &[], [1.0; 3])?.quantized();
        let img = render_image(&out.model, &cam, &[], &rc, out.mask.as_ref())?.quantized();
        println!(
            "held-out az {:.1} el {:.1}: psnr {:.2} ssim {:.4}",
            v.azimuth,
            v.elevation,
            psnr(&img, &gt)?,
            ssim(&img, &gt)?
        );
    }
    Ok(())
}
