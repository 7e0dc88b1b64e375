use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use sm3d_cli::{ap_grid, load_label_dir, pair_frames, pseudolidar_cloud, run_optimize_demo, DemoConfig};
use sm3d_core::deteval::{Difficulty, IouMode};
use sm3d_core::kitti_io::{
    parse_odometry_poses, read_pointcloud_bin, write_depth_png, write_odometry_poses,
};
use sm3d_core::mapeval::{ate, Trajectory};
use sm3d_core::{DepthMap, Se3Pose, Twist};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn sm3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sm3d"))
        .args(args)
        .env_remove("SM3D_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_lines(o: &Output) -> Vec<Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_depth(dir: &TempDir, name: &str, w: usize, h: usize, f: impl Fn(usize) -> f64) -> PathBuf {
    let depth = DepthMap::from_lossy(w, h, (0..w * h).map(f).collect()).unwrap();
    let path = dir.path().join(name);
    std::fs::write(&path, write_depth_png(&depth).unwrap()).unwrap();
    path
}

// pseudolidar ---------------------------------------------------------------

#[test]
fn pseudolidar_all_invalid_depth_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let depth = write_depth(&dir, "d.png", 12, 7, |_| f64::NAN);
    let out = dir.path().join("cloud.bin");
    let o = sm3d(&["--json", "pseudolidar", p(&depth), p(&fixture("calib_000000.txt")), p(&out)]);
    let rec = &json_lines(&o)[0];
    assert_eq!(rec["points"], 0);
    assert_eq!(rec["skipped"], 12 * 7);
    assert!(rec["min_depth"].is_null());
    assert_eq!(std::fs::metadata(&out).unwrap().len(), 0);
}

#[test]
fn pseudolidar_constant_depth_keeps_every_pixel() {
    let dir = TempDir::new().unwrap();
    let depth = write_depth(&dir, "d.png", 20, 9, |_| 12.5);
    let out = dir.path().join("cloud.bin");
    let text = stdout(&sm3d(&["pseudolidar", p(&depth), p(&fixture("calib_000000.txt")), p(&out)]));
    assert_eq!(text, "180 points, 0 skipped, min depth 12.500 m, max depth 12.500 m\n");
    assert_eq!(std::fs::metadata(&out).unwrap().len(), 16 * 180);
}

#[test]
fn pseudolidar_output_equals_library_call() {
    let dir = TempDir::new().unwrap();
    let depth = write_depth(&dir, "d.png", 41, 17, |i| {
        if i % 7 == 0 {
            f64::NAN
        } else {
            1.0 + (i as f64 * 0.37) % 95.0
        }
    });
    let calib = fixture("calib_000000.txt");
    let (cloud, skipped) = pseudolidar_cloud(
        &std::fs::read(&depth).unwrap(),
        &std::fs::read_to_string(&calib).unwrap(),
        80.0,
    )
    .unwrap();
    for velodyne in [false, true] {
        let out = dir.path().join("cloud.bin");
        let mut args = vec!["--json", "pseudolidar", p(&depth), p(&calib), p(&out)];
        if velodyne {
            args.push("--velodyne-frame");
        }
        let rec = &json_lines(&sm3d(&args))[0];
        assert_eq!(rec["points"], cloud.len());
        assert_eq!(rec["skipped"], skipped);
        let decoded = read_pointcloud_bin(&std::fs::read(&out).unwrap()).unwrap();
        assert_eq!(decoded.len(), cloud.len());
        for (q, pt) in decoded.iter().zip(&cloud.points) {
            let xyz = if velodyne { [pt.z, -pt.x, -pt.y] } else { [pt.x, pt.y, pt.z] };
            assert_eq!(*q, [xyz[0] as f32, xyz[1] as f32, xyz[2] as f32, 1.0]);
        }
    }
}

#[test]
fn pseudolidar_reports_bad_input_on_stderr() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.png");
    let o = sm3d(&["pseudolidar", p(&missing), p(&fixture("calib_000000.txt")), p(&dir.path().join("x.bin"))]);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.png"));
}

// traj ----------------------------------------------------------------------

fn gt_trajectory() -> Trajectory {
    parse_odometry_poses(&std::fs::read_to_string(fixture("poses_00.txt")).unwrap()).unwrap()
}

fn write_traj(dir: &TempDir, name: &str, t: &Trajectory) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, write_odometry_poses(t)).unwrap();
    path
}

#[test]
fn traj_of_ground_truth_against_itself_is_zero() {
    let gt = fixture("poses_00.txt");
    let text = stdout(&sm3d(&["traj", p(&gt), p(&gt)]));
    assert_eq!(text, "ATE (snippet length 3): 0.0000 ± 0.0000\n");
}

#[test]
fn traj_absorbs_scale_and_chains_relative_poses() {
    let dir = TempDir::new().unwrap();
    let gt = gt_trajectory();
    let doubled = Trajectory::new(
        gt.poses()
            .iter()
            .map(|q| Se3Pose::new(*q.rotation(), q.translation() * 2.0).unwrap())
            .collect(),
    )
    .unwrap();
    let est = write_traj(&dir, "doubled.txt", &doubled);
    let text = stdout(&sm3d(&["traj", p(&est), p(&fixture("poses_00.txt"))]));
    assert!(text.ends_with("0.0000 ± 0.0000\n"), "{text}");

    let rel = Trajectory::new(gt.relatives()).unwrap();
    let rel_path = write_traj(&dir, "relative.txt", &rel);
    // Relative files have one line fewer than the trajectory they generate.
    let text = stdout(&sm3d(&["traj", "--relative", p(&rel_path), p(&fixture("poses_00.txt"))]));
    assert!(text.ends_with("0.0000 ± 0.0000\n"), "{text}");
}

#[test]
fn traj_matches_library_and_writes_svg() {
    let dir = TempDir::new().unwrap();
    let gt = gt_trajectory();
    let noisy = Trajectory::new(
        gt.poses()
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let t = i as f64;
                q.compose(&Twist::from_slice(&[0.03 * t.sin(), 0.01, 0.02 * t.cos(), 0.0, 0.004 * t.sin(), 0.0]).exp())
            })
            .collect(),
    )
    .unwrap();
    let est = write_traj(&dir, "noisy.txt", &noisy);
    let svg = dir.path().join("plot.svg");
    let rec = &json_lines(&sm3d(&["--json", "traj", p(&est), p(&fixture("poses_00.txt")), "--snippet-len", "4", "--svg", p(&svg)]))[0];
    // The library sees the same parsed files the binary does.
    let parsed = parse_odometry_poses(&std::fs::read_to_string(&est).unwrap()).unwrap();
    let want = ate(&parsed, &gt, 4).unwrap();
    assert_eq!(rec["mean"].as_f64().unwrap(), want.mean);
    assert_eq!(rec["std"].as_f64().unwrap(), want.std);
    assert_eq!(rec["windows"], want.per_snippet.len());
    assert!(want.mean > 0.0);

    let text = stdout(&sm3d(&["traj", p(&est), p(&fixture("poses_00.txt")), "--snippet-len", "4"]));
    assert_eq!(text, format!("ATE (snippet length 4): {want}\n"));

    let svg = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(r#"stroke="red""#) && svg.contains(r#"stroke="blue""#));
    let gt_points = svg.split(r#"id="ground-truth""#).nth(1).unwrap().split("/>").next().unwrap();
    assert_eq!(gt_points.matches(',').count(), gt.len());
}

#[test]
fn traj_rejects_length_mismatch() {
    let dir = TempDir::new().unwrap();
    let gt = gt_trajectory();
    let short = Trajectory::new(gt.poses()[..5].to_vec()).unwrap();
    let est = write_traj(&dir, "short.txt", &short);
    let o = sm3d(&["traj", p(&est), p(&fixture("poses_00.txt"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lengths differ"));
}

// ap ------------------------------------------------------------------------

fn grid_values(text: &str) -> Vec<String> {
    text.lines()
        .skip(2)
        .flat_map(|l| l.split_whitespace().skip(1).map(str::to_string).collect::<Vec<_>>())
        .collect()
}

#[test]
fn ap_of_ground_truth_is_100_everywhere() {
    let gt = fixture("ap/gt");
    let text = stdout(&sm3d(&["ap", p(&gt), p(&gt)]));
    assert!(text.lines().nth(1).unwrap().contains("Easy"));
    assert!(text.lines().nth(2).unwrap().starts_with("BEV"));
    assert!(text.lines().nth(3).unwrap().starts_with("3D"));
    assert_eq!(grid_values(&text), vec!["100.0"; 6]);
}

#[test]
fn ap_with_empty_prediction_dir_is_zero_everywhere() {
    let dir = TempDir::new().unwrap();
    let text = stdout(&sm3d(&["ap", p(dir.path()), p(&fixture("ap/gt"))]));
    assert_eq!(grid_values(&text), vec!["0.0"; 6]);
}

#[test]
fn ap_on_toy_fixture_matches_hand_count() {
    // Easy: ranked TP, FP, TP, FP over 3 boxes (the moderate-only match is
    // ignored); 11-point AP = (4·1 + 3·2/3) / 11.
    // Moderate and hard: TP, FP, TP, TP, FP over 4 boxes; AP = (3·1 + 5·0.75) / 11.
    let easy = 100.0 * (4.0 + 2.0) / 11.0;
    let moderate = 100.0 * (3.0 + 5.0 * 0.75) / 11.0;
    for iou in ["0.5", "0.7"] {
        let recs = json_lines(&sm3d(&["--json", "ap", p(&fixture("ap/pred")), p(&fixture("ap/gt")), "--iou", iou]));
        assert_eq!(recs.len(), 6);
        for r in &recs {
            let want = if r["level"] == "Easy" { easy } else { moderate };
            assert!((r["ap"].as_f64().unwrap() - want).abs() < 1e-9, "{r}");
        }
    }
    let text = stdout(&sm3d(&["ap", p(&fixture("ap/pred")), p(&fixture("ap/gt"))]));
    assert_eq!(grid_values(&text), vec!["54.5", "61.4", "61.4", "54.5", "61.4", "61.4"]);
}

#[test]
fn ap_output_equals_library_call() {
    let class = Some("Car");
    let preds = load_label_dir(&fixture("ap/pred"), class).unwrap();
    let gts = load_label_dir(&fixture("ap/gt"), class).unwrap();
    let (pr, gt) = pair_frames(preds, gts).unwrap();
    let cells = ap_grid(&pr, &gt, 0.5, &[IouMode::ThreeD], &[Difficulty::Hard]).unwrap();
    let recs = json_lines(&sm3d(&["--json", "ap", p(&fixture("ap/pred")), p(&fixture("ap/gt")), "--iou", "0.5", "--mode", "3d", "--level", "hard"]));
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["ap"].as_f64().unwrap(), cells[0].ap);
    assert_eq!(recs[0]["mode"], "3D");

    // Every class: the pedestrian pair adds one more true positive.
    let all = json_lines(&sm3d(&["--json", "ap", p(&fixture("ap/pred")), p(&fixture("ap/gt")), "--class", "all"]));
    assert!(all.iter().all(|r| r["class"].is_null()));
    assert!(all[0]["ap"].as_f64().unwrap() > 100.0 * 6.0 / 11.0);
}

#[test]
fn ap_requires_paired_frames() {
    let dir = TempDir::new().unwrap();
    std::fs::copy(fixture("ap/pred/000000.txt"), dir.path().join("000000.txt")).unwrap();
    let o = sm3d(&["ap", p(dir.path()), p(&fixture("ap/gt"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("000001"));
}

// optimize-demo -------------------------------------------------------------

fn summaries(recs: &[Value]) -> Vec<&Value> {
    recs.iter().filter(|r| r["summary"] == true).collect()
}

#[test]
fn demo_is_byte_identical_across_runs_and_matches_library() {
    let args = ["optimize-demo", "--snippets", "2"];
    let a = sm3d(&args);
    let b = sm3d(&args);
    assert_eq!(stdout(&a), stdout(&b));

    let recs = json_lines(&sm3d(&["--json", "optimize-demo", "--snippets", "2"]));
    let cmp = run_optimize_demo(&DemoConfig { snippets: 2, ..DemoConfig::default() }).unwrap();
    let outcomes: Vec<_> = cmp.baseline.iter().chain(&cmp.regularized).collect();
    let per_snippet: Vec<_> = recs.iter().filter(|r| r["summary"].is_null()).collect();
    assert_eq!(per_snippet.len(), outcomes.len());
    for (r, o) in per_snippet.iter().zip(outcomes) {
        assert_eq!(r["translation_error"].as_f64().unwrap(), o.translation_error);
        assert_eq!(r["residual"].as_f64().unwrap(), o.consistency);
        assert_eq!(r["stalled"].as_bool().unwrap(), o.stalled);
    }
    let s = summaries(&recs);
    assert_eq!(s[0]["median_translation_error"].as_f64().unwrap(), cmp.median_translation_error().0);
    assert_eq!(s[1]["median_translation_error"].as_f64().unwrap(), cmp.median_translation_error().1);
}

#[test]
fn demo_without_noise_recovers_poses() {
    let recs = json_lines(&sm3d(&["--json", "optimize-demo", "--snippets", "8", "--noise", "0"]));
    for s in summaries(&recs) {
        assert!(s["median_translation_error"].as_f64().unwrap() < 1e-3, "{s}");
    }
}

#[test]
fn demo_on_static_noise_free_scene_has_zero_error() {
    let recs = json_lines(&sm3d(&["--json", "optimize-demo", "--snippets", "2", "--motion", "0", "--noise", "0"]));
    for r in recs.iter().filter(|r| r["summary"].is_null()) {
        assert!(r["translation_error"].as_f64().unwrap() < 1e-6, "{r}");
        assert!(r["rotation_error"].as_f64().unwrap() < 1e-6, "{r}");
    }
}

// bench ---------------------------------------------------------------------

#[test]
fn bench_without_frames_prints_an_empty_table() {
    let text = stdout(&sm3d(&["bench"]));
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("stage"));
    assert!(stdout(&sm3d(&["--json", "bench"])).is_empty());
}

#[test]
fn bench_results_do_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    let frame = write_depth(&dir, "000000.png", 1216, 352, |i| {
        if i % 11 == 0 {
            f64::NAN
        } else {
            2.0 + (i % 977) as f64 * 0.08
        }
    });
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_sm3d"))
            .args(["--json", "bench", p(&frame), "--calib", p(&fixture("calib_000000.txt"))])
            .env("SM3D_THREADS", threads)
            .output()
            .unwrap();
        json_lines(&out)
    };
    let one = run("1");
    let four = run("4");
    let stages: Vec<_> = one.iter().map(|r| r["stage"].as_str().unwrap().to_string()).collect();
    assert_eq!(stages, ["depth decode", "pseudolidar", "warp", "ATE", "AP"]);
    let pl = one.iter().find(|r| r["stage"] == "pseudolidar").unwrap();
    assert!(pl["median_ms"].as_f64().unwrap() > 0.0);
    assert!(pl["reps"].as_u64().unwrap() >= 20);
    for (a, b) in one.iter().zip(&four) {
        assert_eq!(a["result"], b["result"], "{}", a["stage"]);
    }
}
