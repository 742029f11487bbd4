use std::process::Command as Process;

use clap::Parser;
use dynrad::checkpoint;
use dynrad::dataset::SceneDataset;
use dynrad::{psnr, ImageF};
use dynrad_cli::args::{parse_background, parse_params, Command, ParamTuple};
use dynrad_cli::commands::{eval_cmd, gen_data, render_cmd, train_cmd};
use dynrad_cli::Cli;

fn args(line: &str) -> Command {
    Cli::try_parse_from(std::iter::once("dynrad").chain(line.split_whitespace()))
        .unwrap()
        .command
}

#[test]
fn gen_train_render_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().display().to_string();
    let Command::GenData(g) = args(&format!("gen-data --out {root}/data --size 24 --level 0 --scene moving-blob --param-samples 2"))
    else {
        panic!()
    };
    let ds = gen_data(&g).unwrap();
    assert_eq!(ds.frames.len(), 24);
    assert_eq!(SceneDataset::load(format!("{root}/data")).unwrap(), ds);

    let Command::Train(t) = args(&format!("train --data {root}/data --out {root}/m --iters 40 --grid 16 --samples 16 --batch 64 --seed 3"))
    else {
        panic!()
    };
    let trained = train_cmd(&t).unwrap();
    assert_eq!(trained.checkpoint.extension().unwrap(), "vsnf");
    let (model, meta) = checkpoint::load(&trained.checkpoint).unwrap();
    assert_eq!(model, trained.model);
    assert_eq!(meta.param_names, vec!["offset".to_string()]);
    assert_eq!(meta.dataset_fingerprint, Some(ds.fingerprint()));
    let log = std::fs::read_to_string(&trained.metrics).unwrap();
    assert_eq!(log.lines().count(), 41);

    let Command::Render(r) = args(&format!("render --model {root}/m.vsnf --out {root}/sweep --size 8 --samples 8 --param 0.5"))
    else {
        panic!()
    };
    let views = render_cmd(&r).unwrap();
    assert_eq!(views.len(), 181);
    let pngs = std::fs::read_dir(format!("{root}/sweep"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 181);
    assert_eq!(ImageF::load_png(format!("{root}/sweep/0180.png")).unwrap().dims(), (8, 8));
    assert_eq!(views[0].request.azimuth, Some(-180.0));
    assert_eq!(views[180].request.elevation, Some(90.0));

    let Command::GenData(h) = args(&format!("gen-data --out {root}/held --size 24 --spiral 3 --scene moving-blob --param 0.25"))
    else {
        panic!()
    };
    let held = gen_data(&h).unwrap();
    let Command::Eval(e) = args(&format!("eval --model {root}/m.vsnf --data {root}/held --out {root}/eval.csv"))
    else {
        panic!()
    };
    let report = eval_cmd(&e).unwrap();
    let csv = std::fs::read_to_string(format!("{root}/eval.csv")).unwrap();
    let last = csv.lines().last().unwrap().split(',').collect::<Vec<_>>();
    assert_eq!(last[0], "mean");
    let csv_mean: f64 = last[1].parse().unwrap();
    let mut acc = 0.0;
    for i in 0..held.frames.len() {
        let rendered = ImageF::load_png(report.renders.join(format!("{i:04}.png"))).unwrap();
        let gt = held.load_image(format!("{root}/held"), i).unwrap();
        acc += psnr(&rendered, &gt).unwrap();
    }
    let recomputed = acc / held.frames.len() as f64;
    assert!((csv_mean - recomputed).abs() < 1e-5, "{csv_mean} vs {recomputed}");
    assert_eq!(csv.lines().count(), held.frames.len() + 2);
}

#[test]
fn flag_parsers() {
    assert_eq!(parse_background("white").unwrap(), [1.0; 3]);
    assert_eq!(parse_background("0,0.5,1").unwrap(), [0.0, 0.5, 1.0]);
    assert!(parse_background("2,0,0").is_err());
    assert!(parse_background("red").is_err());
    assert_eq!(parse_params("0.1, 0.9").unwrap(), ParamTuple(vec![0.1, 0.9]));
    assert!(parse_params("x").is_err());
}

#[test]
fn invalid_flags_are_usage_errors() {
    assert!(Cli::try_parse_from(["dynrad", "train"]).is_err());
    assert!(Cli::try_parse_from(["dynrad", "bogus"]).is_err());
    assert!(Cli::try_parse_from(["dynrad", "serve", "--model", "m.vsnf", "--port", "x"]).is_err());
    let out = Process::new(env!("CARGO_BIN_EXE_dynrad"))
        .args(["render", "--nope"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let out = Process::new(env!("CARGO_BIN_EXE_dynrad"))
        .args(["render", "--model", "/nonexistent/x.vsnf", "--out", "/tmp/unused"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
