use dynrad::dataset::{blob_scene, icosphere_cameras, Frame, Intrinsics, SceneDataset};
use dynrad::model::ModelConfig;
use dynrad::train::{train, L1Schedule, TrainSchedule, TrainingSet};
use dynrad::{Aabb, Error, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blob_set(size: usize, level: usize) -> TrainingSet {
    let gen = blob_scene();
    let intr = Intrinsics::square(size);
    let frames: Vec<Frame> = icosphere_cameras(level, 3.0, [0.0; 3])
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, pose)| Frame {
            file_path: format!("images/{i:04}.png"),
            transform_matrix: pose,
            params: vec![],
        })
        .collect();
    let ds = SceneDataset {
        intrinsics: intr,
        param_names: vec![],
        param_ranges: vec![],
        background: [1.0; 3],
        aabb: Aabb::cube(1.0),
        generator: Some(gen.clone()),
        frames,
    };
    let images = (0..ds.frames.len())
        .map(|i| gen.render(&ds.camera(i).unwrap(), &[], [1.0; 3]).unwrap().to_rgb8())
        .collect();
    TrainingSet::from_images(&ds, images).unwrap()
}

fn small_model(seed: u64) -> Model<f32> {
    let mut config = ModelConfig::desk(Aabb::cube(1.0), vec![], vec![]);
    config.field.density_rank = 2;
    config.field.appearance_rank = 4;
    config.field.resolution = [12; 3];
    config.hidden = 16;
    Model::new(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn quick(iterations: usize) -> TrainSchedule {
    TrainSchedule {
        iterations,
        batch_rays: 64,
        grid_growth: vec![],
        mask_iter: None,
        voxelskip_iter: None,
        warmup: (16, 0),
        target_samples: 16,
        importance_extra: 8,
        chunks: 4,
        ..TrainSchedule::default()
    }
}

#[test]
fn zero_iterations_leave_weights_unchanged() {
    let set = blob_set(16, 0);
    let m = small_model(1);
    let out = train(m.clone(), &set, &quick(0), 5, |_| {}).unwrap();
    assert_eq!(out.model, m);
    assert!(out.reports.is_empty());
}

#[test]
fn fixed_seed_is_deterministic() {
    let set = blob_set(16, 0);
    let mut schedule = quick(12);
    schedule.grid_growth = vec![(4, 14usize.pow(3))];
    schedule.mask_iter = Some(6);
    schedule.voxelskip_iter = Some(8);
    let a = train(small_model(2), &set, &schedule, 9, |_| {}).unwrap();
    let b = train(small_model(2), &set, &schedule, 9, |_| {}).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.model, b.model);
    let c = train(small_model(2), &set, &schedule, 10, |_| {}).unwrap();
    assert_ne!(a.reports, c.reports);
}

#[test]
fn zero_residual_without_regularizers_is_a_fixed_point() {
    let set = blob_set(16, 0);
    let white = TrainingSet {
        images: set.images.iter().map(|im| vec![255u8; im.len()]).collect(),
        ..set
    };
    let mut m = small_model(3);
    m.decoders.density.w2.fill(0.0);
    m.decoders.density.b2[0] = -200.0;
    let mut schedule = quick(5);
    schedule.l1 = L1Schedule {
        initial: 0.0,
        after_iter: 0,
        later: 0.0,
    };
    schedule.tv_weight = 0.0;
    let out = train(m.clone(), &white, &schedule, 4, |_| {}).unwrap();
    assert!(out.reports.iter().all(|r| r.rec == 0.0 && r.total == 0.0));
    assert_eq!(out.model, m);
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let set = blob_set(16, 0);
    let mut schedule = quick(10);
    schedule.l1.after_iter = 5;
    schedule.tv_weight = 0.3;
    let out = train(small_model(4), &set, &schedule, 1, |_| {}).unwrap();
    for r in &out.reports {
        let expect = r.rec + schedule.l1.at(r.iteration) * r.l1 + schedule.tv_weight * r.tv;
        assert!((r.total - expect).abs() <= 1e-6 * expect.abs().max(1.0), "{r:?}");
    }
    assert_eq!(out.reports.len(), 10);
    assert!(out.reports.iter().enumerate().all(|(i, r)| r.iteration == i));
}

#[test]
fn observer_sees_every_report() {
    let set = blob_set(16, 0);
    let mut seen = Vec::new();
    let out = train(small_model(5), &set, &quick(4), 2, |r| seen.push(*r)).unwrap();
    assert_eq!(seen, out.reports);
}

#[test]
fn mask_shrinks_box_within_previous() {
    let set = blob_set(24, 0);
    let mut schedule = quick(80);
    schedule.batch_rays = 128;
    schedule.mask_iter = Some(70);
    schedule.sigma_threshold = 0.5;
    let before = Aabb::cube(1.0);
    let out = train(small_model(6), &set, &schedule, 3, |_| {}).unwrap();
    assert!(before.contains(&out.model.field.aabb, 1e-12));
    assert!(out.mask.is_some());
}

#[test]
fn ray_pool_keeps_every_content_pixel() {
    let set = blob_set(32, 1);
    let pool: std::collections::HashSet<(u32, u32)> = set.ray_pool(&set.aabb).into_iter().collect();
    let mut content = 0;
    for (f, img) in set.images.iter().enumerate() {
        for px in 0..set.pixels_per_frame() {
            let differs = (0..3).any(|c| (img[3 * px + c] as f64 - 255.0 * set.background[c]).abs() > 2.0);
            if differs {
                content += 1;
                assert!(pool.contains(&(f as u32, px as u32)), "frame {f} pixel {px} dropped");
            }
        }
    }
    assert!(content > 0);
}

#[test]
fn ray_pool_drops_rays_missing_the_box() {
    let set = blob_set(32, 0);
    let all = set.cameras.len() * set.pixels_per_frame();
    let small = Aabb::cube(0.2);
    let pool = set.ray_pool(&small);
    assert!(!pool.is_empty() && pool.len() < all);
}

#[test]
fn empty_pool_is_an_error() {
    let set = blob_set(16, 0);
    let mut m = small_model(7);
    m.field.aabb = Aabb::new([50.0; 3], [51.0; 3]).unwrap();
    assert!(matches!(train(m, &set, &quick(2), 0, |_| {}), Err(Error::EmptyRayPool)));
}

#[test]
fn non_finite_weights_abort_with_iteration() {
    let set = blob_set(16, 0);
    let mut m = small_model(8);
    m.decoders.color.b2[0] = f32::NAN;
    match train(m, &set, &quick(3), 0, |_| {}) {
        Err(Error::NonFinite { iteration, .. }) => assert_eq!(iteration, 0),
        other => panic!("expected abort, got {:?}", other.map(|o| o.reports)),
    }
}

#[test]
fn parameter_count_mismatch_rejected() {
    let set = blob_set(16, 0);
    let mut config = ModelConfig::desk(Aabb::cube(1.0), vec![(0.0, 1.0)], vec![3]);
    config.field.resolution = [8; 3];
    config.hidden = 8;
    let m = Model::new(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(train(m, &set, &quick(1), 0, |_| {}), Err(Error::ParamCount { .. })));
}
