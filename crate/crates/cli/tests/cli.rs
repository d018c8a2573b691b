mod common;

use common::*;
use splatkit::io;
use splatkit::model::{GaussianCloud, ImageBuffer, Vec3};
use splatkit::sky::init_sky;

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn render_missing_model_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cams = dir.path().join("cameras.json");
    io::save_cameras(&ring_cameras(2, 3.0, 16, 16.0), &cams).unwrap();
    let o = run(&["render", "--input", s(&dir.path().join("nope.ply")), "--cameras", s(&cams), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    let line = err.lines().find(|l| l.starts_with("error:")).expect("error line");
    assert!(line.contains("nope.ply"), "{line}");
}

#[test]
fn bad_flag_and_bad_config_exit_2() {
    assert_eq!(run(&["render", "--frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let o = run(&["--config", s(&cfg), "optimize"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn render_writes_three_files_per_camera() {
    let dir = tempfile::tempdir().unwrap();
    let cams = ring_cameras(3, 3.0, 24, 24.0);
    let model = dir.path().join("model.ply");
    io::save_gaussian_ply(&blob_scene(10, 1), &model).unwrap();
    io::save_cameras(&cams, dir.path().join("cameras.json")).unwrap();
    let out = dir.path().join("renders");
    let o = run(&["render", "--input", s(&model), "--cameras", s(&dir.path().join("cameras.json")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 9);
    for c in &cams {
        let color = io::load_color(out.join(format!("{}.png", c.id))).unwrap();
        assert_eq!((color.width, color.height), (24, 24));
        let depth = io::load_pfm(out.join(format!("{}_depth.pfm", c.id))).unwrap();
        assert!(depth.data.iter().any(|d| *d > 0.0));
        io::load_mask(out.join(format!("{}_opacity.png", c.id))).unwrap();
    }
}

#[test]
fn render_with_sky_uses_sky_colors() {
    let dir = tempfile::tempdir().unwrap();
    let cams = ring_cameras(1, 3.0, 16, 16.0);
    io::save_cameras(&cams, dir.path().join("cameras.json")).unwrap();
    let model = dir.path().join("model.ply");
    io::save_gaussian_ply(&GaussianCloud::new(0).unwrap(), &model).unwrap();
    let sky = init_sky(Vec3::zeros(), 1.0, 2000, [0.2, 0.4, 0.8]).unwrap();
    io::save_sky_ply(&sky, dir.path().join("sky.ply")).unwrap();
    let out = dir.path().join("r");
    let o = run(&[
        "render", "--input", s(&model), "--cameras", s(&dir.path().join("cameras.json")),
        "--sky", s(&dir.path().join("sky.ply")), "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = io::load_color(out.join(format!("{}.png", cams[0].id))).unwrap();
    let px = img.pixel(8, 8);
    assert!((px[2] - 0.8).abs() < 0.02 && (px[0] - 0.2).abs() < 0.02, "{px:?}");
}

fn small_dataset(dir: &std::path::Path) -> (Dataset, std::path::PathBuf) {
    let cams = ring_cameras(2, 3.0, 16, 16.0);
    let truth = blob_scene(6, 4);
    let data = write_dataset(dir, &cams, &render_targets(&truth, &cams));
    let init = dir.join("init.ply");
    io::save_gaussian_ply(&jitter(&truth, 9, 0.05), &init).unwrap();
    (data, init)
}

#[test]
fn zero_steps_checkpoint_equals_init() {
    let dir = tempfile::tempdir().unwrap();
    let (data, init) = small_dataset(dir.path());
    let out = dir.path().join("run");
    let o = run(&[
        "optimize", "--cameras", s(&data.cameras), "--images", s(&data.images),
        "--init", s(&init), "--steps", "0", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = io::load_gaussian_ply(&init).unwrap();
    assert_eq!(io::load_gaussian_ply(out.join("checkpoints/step_000000.ply")).unwrap(), a);
    assert_eq!(io::load_gaussian_ply(out.join("point_cloud.ply")).unwrap(), a);
}

#[test]
fn metrics_one_record_per_interval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, init) = small_dataset(dir.path());
    let out = dir.path().join("run");
    let o = run(&[
        "optimize", "--cameras", s(&data.cameras), "--images", s(&data.images),
        "--init", s(&init), "--steps", "20", "--log-interval", "5", "--checkpoint-interval", "10", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            for key in ["l1", "psnr", "kernels", "scale", "entropy", "mask", "sky", "total"] {
                assert!(v.get(key).is_some(), "{key} missing in {l}");
            }
            v["step"].as_u64().unwrap()
        })
        .collect();
    assert_eq!(steps, vec![5, 10, 15, 20]);
    assert!(out.join("checkpoints/step_000010.ply").is_file());
    assert!(out.join("checkpoints/step_000020.ply").is_file());
}

#[test]
fn optimize_needs_an_init() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_dataset(dir.path());
    let o = run(&["optimize", "--cameras", s(&data.cameras), "--images", s(&data.images), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn optimize_from_random_init_with_sky() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_dataset(dir.path());
    let masks = dir.path().join("masks");
    std::fs::create_dir_all(&masks).unwrap();
    for c in io::load_cameras(&data.cameras).unwrap() {
        io::save_png(&ImageBuffer::new(16, 16, 1), masks.join(format!("{}.png", c.id))).unwrap();
    }
    let out = dir.path().join("run");
    let o = run(&[
        "optimize", "--cameras", s(&data.cameras), "--images", s(&data.images), "--masks", s(&masks),
        "--init-random", "30", "--sky", "--sky-points", "500", "--steps", "3", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(io::load_gaussian_ply(out.join("checkpoints/step_000000.ply")).unwrap().len(), 30);
    assert_eq!(io::load_sky_ply(out.join("sky.ply")).unwrap().cloud.len(), 500);
}

#[test]
fn empty_model_gives_empty_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("empty.ply");
    io::save_gaussian_ply(&GaussianCloud::new(0).unwrap(), &model).unwrap();
    let mesh = dir.path().join("mesh.obj");
    let o = run(&["extract-mesh", "--input", s(&model), "--out", s(&mesh)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("WARN"), "{}", stderr(&o));
    assert!(io::read_mesh(&mesh).unwrap().is_empty());
}

#[test]
fn extract_mesh_logs_voxel_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("big.ply");
    let mut cloud = GaussianCloud::new(0).unwrap();
    for p in splatkit::sky::fibonacci_sphere(400, Vec3::zeros(), 256.0 / 1.1).unwrap() {
        cloud.push(splatkit::model::Gaussian::isotropic(p, 20.0, 0.9, [0.5; 3], 0)).unwrap();
    }
    io::save_gaussian_ply(&cloud, &model).unwrap();
    let mesh = dir.path().join("m.ply");
    let o = run(&[
        "extract-mesh", "--input", s(&model), "--out", s(&mesh), "--max-voxels", "1000000000",
        "--orbit-views", "1", "--orbit-size", "8", "--orbit-focal", "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("voxel 1.000") && err.contains("truncation 4.000"), "{err}");
}

#[test]
fn extract_mesh_rejects_bad_params() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.ply");
    io::save_gaussian_ply(&blob_scene(3, 0), &model).unwrap();
    let o = run(&["extract-mesh", "--input", s(&model), "--voxel-div", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prune_zero_threshold_keeps_everything() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.ply");
    let cloud = blob_scene(25, 2);
    io::save_gaussian_ply(&cloud, &model).unwrap();
    let out = dir.path().join("p.ply");
    let o = run(&["prune", "--input", s(&model), "--opacity", "0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(io::load_gaussian_ply(&out).unwrap(), io::load_gaussian_ply(&model).unwrap());
}

#[test]
fn prune_mask_removes_sky_floaters() {
    let dir = tempfile::tempdir().unwrap();
    let cams = ring_cameras(4, 3.0, 32, 32.0);
    io::save_cameras(&cams, dir.path().join("cameras.json")).unwrap();
    let masks = dir.path().join("masks");
    std::fs::create_dir_all(&masks).unwrap();
    // Sky covers the upper quarter of every view.
    for c in &cams {
        let mut m = ImageBuffer::new(32, 32, 1);
        for y in 0..8 {
            for x in 0..32 {
                m.set(x, y, 0, 1.0);
            }
        }
        io::save_png(&m, masks.join(format!("{}.png", c.id))).unwrap();
    }
    let mut cloud = blob_scene(20, 3);
    for g in &mut cloud.gaussians {
        g.mean *= 0.5;
    }
    let floaters = 5;
    for i in 0..floaters {
        let a = i as f64;
        cloud
            .push(splatkit::model::Gaussian::isotropic(Vec3::new(0.2 * a.cos(), 0.2 * a.sin(), 1.2), 0.05, 0.8, [1.0; 3], 0))
            .unwrap();
    }
    let model = dir.path().join("m.ply");
    io::save_gaussian_ply(&cloud, &model).unwrap();
    let out = dir.path().join("p.ply");
    let o = run(&[
        "prune", "--input", s(&model), "--cameras", s(&dir.path().join("cameras.json")),
        "--masks", s(&masks), "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pruned = io::load_gaussian_ply(&out).unwrap();
    assert_eq!(pruned.len(), 20);
    assert!(pruned.iter().all(|g| g.mean.z < 1.0));
}

#[test]
fn prune_free_space_needs_margin() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.ply");
    io::save_gaussian_ply(&blob_scene(3, 0), &model).unwrap();
    let cams = dir.path().join("cameras.json");
    io::save_cameras(&ring_cameras(1, 3.0, 8, 8.0), &cams).unwrap();
    let o = run(&["prune", "--input", s(&model), "--cameras", s(&cams), "--depths", s(dir.path()), "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(2));
}
