//! Subcommand implementations for the `sm3d` binary. Each command returns a
//! report value; rendering to text or JSON lines lives next to it so the
//! binary stays a thin argument parser.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use sm3d_core::deteval::{average_precision, Box3D, Difficulty, IouMode};
use sm3d_core::geometry::depth_to_pointcloud;
use sm3d_core::kitti_io::{
    labels_to_boxes, parse_calib, parse_labels, parse_odometry_poses, read_depth_png,
    write_pointcloud_bin,
};
use sm3d_core::mapeval::{accumulate, align_scale, ate, reorigined_translations, AteReport, Trajectory};
use sm3d_core::optimize::{compare_skip_time, default_intrinsics, OptimizeConfig, SkipTimeComparison};
use sm3d_core::photometric::{inverse_warp, photometric_loss};
use sm3d_core::{DepthMap, Image, Intrinsics, PointCloud, Se3Pose, Twist};

/// Per-frame predictions and ground truth, in the same frame order.
pub type FrameBoxes = (Vec<Vec<Box3D>>, Vec<Vec<Box3D>>);

/// Text for humans plus one JSON value per result.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub text: String,
    pub json: Vec<Value>,
}

impl Rendered {
    pub fn output(&self, as_json: bool) -> String {
        if as_json {
            self.json.iter().map(|v| format!("{v}\n")).collect()
        } else {
            self.text.clone()
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

// ---------------------------------------------------------------------------
// pseudolidar

#[derive(Debug, Clone, PartialEq)]
pub struct PseudolidarStats {
    pub points: usize,
    pub skipped: usize,
    /// Depth range of the emitted points, `None` when there are none.
    pub depth_range: Option<(f64, f64)>,
}

/// Decodes a depth PNG and back-projects it with the calibration's camera.
pub fn pseudolidar_cloud(
    depth_png: &[u8],
    calib_text: &str,
    max_depth: f64,
) -> Result<(PointCloud, usize)> {
    let depth = read_depth_png(depth_png).context("decoding depth PNG")?;
    let calib = parse_calib(calib_text).context("parsing calibration")?;
    let k = calib.default_intrinsics(depth.width(), depth.height())?;
    Ok(depth_to_pointcloud(&depth, &k, max_depth)?)
}

pub fn run_pseudolidar(
    depth_png: &Path,
    calib: &Path,
    out: &Path,
    max_depth: f64,
    velodyne_frame: bool,
) -> Result<PseudolidarStats> {
    let bytes = read_bytes(depth_png)?;
    let calib_text = read_text(calib)?;
    let (cloud, skipped) = pseudolidar_cloud(&bytes, &calib_text, max_depth)
        .with_context(|| format!("{} with {}", depth_png.display(), calib.display()))?;
    let bin = write_pointcloud_bin(&cloud, velodyne_frame)?;
    fs::write(out, bin).with_context(|| format!("writing {}", out.display()))?;
    let depth_range = cloud.points.iter().fold(None, |acc: Option<(f64, f64)>, p| {
        Some(acc.map_or((p.z, p.z), |(lo, hi)| (lo.min(p.z), hi.max(p.z))))
    });
    Ok(PseudolidarStats {
        points: cloud.len(),
        skipped,
        depth_range,
    })
}

impl PseudolidarStats {
    pub fn render(&self) -> Rendered {
        let range = match self.depth_range {
            Some((lo, hi)) => format!("min depth {lo:.3} m, max depth {hi:.3} m"),
            None => "no valid depth".to_string(),
        };
        Rendered {
            text: format!("{} points, {} skipped, {range}\n", self.points, self.skipped),
            json: vec![json!({
                "points": self.points,
                "skipped": self.skipped,
                "min_depth": self.depth_range.map(|r| r.0),
                "max_depth": self.depth_range.map(|r| r.1),
            })],
        }
    }
}

// ---------------------------------------------------------------------------
// traj

/// Loads an estimated trajectory. With `relative`, each line is a
/// frame-to-frame pose (camera `i` into camera `i + 1`) and is chained.
pub fn load_trajectory(path: &Path, relative: bool) -> Result<Trajectory> {
    let traj = parse_odometry_poses(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(if relative { accumulate(traj.poses()) } else { traj })
}

pub fn run_traj(
    estimate: &Path,
    ground_truth: &Path,
    relative: bool,
    snippet_len: usize,
    svg: Option<&Path>,
) -> Result<AteReport> {
    let est = load_trajectory(estimate, relative)?;
    let gt = load_trajectory(ground_truth, false)?;
    let report = ate(&est, &gt, snippet_len)
        .with_context(|| format!("{} against {}", estimate.display(), ground_truth.display()))?;
    if let Some(path) = svg {
        fs::write(path, trajectory_svg(&est, &gt)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report)
}

pub fn render_ate(report: &AteReport) -> Rendered {
    Rendered {
        text: format!("ATE (snippet length {}): {report}\n", report.snippet_len),
        json: vec![json!({
            "mean": report.mean,
            "std": report.std,
            "snippet_len": report.snippet_len,
            "windows": report.per_snippet.len(),
        })],
    }
}

/// Top view (x right, z up) of both trajectories. Both start at the origin
/// and the estimate is scaled by the least-squares factor onto the ground
/// truth. Ground truth is red, the estimate blue.
pub fn trajectory_svg(est: &Trajectory, gt: &Trajectory) -> String {
    const SIZE: (f64, f64) = (640.0, 480.0);
    const MARGIN: f64 = 24.0;
    let g = reorigined_translations(gt.poses());
    let mut e = reorigined_translations(est.poses());
    let n = e.len().min(g.len());
    let s = align_scale(&e[..n], &g[..n]);
    for p in e.iter_mut() {
        *p *= s;
    }
    let all = g.iter().chain(&e);
    let (mut x0, mut x1, mut z0, mut z1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for p in all {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        z0 = z0.min(p.z);
        z1 = z1.max(p.z);
    }
    let span = (x1 - x0).max(z1 - z0).max(1e-9);
    let scale = ((SIZE.0 - 2.0 * MARGIN) / span).min((SIZE.1 - 2.0 * MARGIN) / span);
    let points = |ps: &[nalgebra::Vector3<f64>]| -> String {
        ps.iter()
            .map(|p| {
                let x = MARGIN + (p.x - x0) * scale;
                let y = SIZE.1 - MARGIN - (p.z - z0) * scale;
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = SIZE.0,
        h = SIZE.1
    );
    let _ = writeln!(svg, r#"  <rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"  <polyline id="ground-truth" fill="none" stroke="red" stroke-width="2" points="{}"/>"#,
        points(&g)
    );
    let _ = writeln!(
        svg,
        r#"  <polyline id="estimate" fill="none" stroke="blue" stroke-width="2" points="{}"/>"#,
        points(&e)
    );
    let _ = writeln!(svg, r#"  <text x="{MARGIN}" y="16" font-size="12" fill="red">ground truth</text>"#);
    let _ = writeln!(svg, r#"  <text x="{}" y="16" font-size="12" fill="blue">estimate</text>"#, MARGIN + 100.0);
    svg.push_str("</svg>\n");
    svg
}

// ---------------------------------------------------------------------------
// ap

/// Label files of a directory keyed by file stem.
pub fn load_label_dir(dir: &Path, class: Option<&str>) -> Result<BTreeMap<String, Vec<Box3D>>> {
    let mut frames = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let records = parse_labels(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))?;
        let boxes = labels_to_boxes(&records, class).with_context(|| format!("converting {}", path.display()))?;
        frames.insert(stem.to_string(), boxes);
    }
    Ok(frames)
}

/// Pairs prediction and ground-truth frames by id. A prediction directory
/// without any label file means "no detections" for every frame; otherwise
/// the two id sets must match.
pub fn pair_frames(
    preds: BTreeMap<String, Vec<Box3D>>,
    gts: BTreeMap<String, Vec<Box3D>>,
) -> Result<FrameBoxes> {
    if preds.is_empty() {
        let empty = vec![Vec::new(); gts.len()];
        return Ok((empty, gts.into_values().collect()));
    }
    if let Some(id) = gts.keys().find(|k| !preds.contains_key(*k)) {
        bail!("frame {id} has ground truth but no prediction file");
    }
    if let Some(id) = preds.keys().find(|k| !gts.contains_key(*k)) {
        bail!("frame {id} has a prediction file but no ground truth");
    }
    Ok((preds.into_values().collect(), gts.into_values().collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApCell {
    pub mode: IouMode,
    pub level: Difficulty,
    pub ap: f64,
}

pub fn mode_name(mode: IouMode) -> &'static str {
    match mode {
        IouMode::Bev => "BEV",
        IouMode::ThreeD => "3D",
    }
}

pub fn level_name(level: Difficulty) -> &'static str {
    match level {
        Difficulty::Easy => "Easy",
        Difficulty::Moderate => "Moderate",
        Difficulty::Hard => "Hard",
    }
}

pub fn ap_grid(
    preds: &[Vec<Box3D>],
    gts: &[Vec<Box3D>],
    iou: f64,
    modes: &[IouMode],
    levels: &[Difficulty],
) -> Result<Vec<ApCell>> {
    let mut cells = Vec::new();
    for &mode in modes {
        for &level in levels {
            let r = average_precision(preds, gts, iou, mode, level)?;
            cells.push(ApCell { mode, level, ap: r.ap });
        }
    }
    Ok(cells)
}

pub fn run_ap(
    pred_dir: &Path,
    gt_dir: &Path,
    iou: f64,
    modes: &[IouMode],
    levels: &[Difficulty],
    class: Option<&str>,
) -> Result<Vec<ApCell>> {
    let preds = load_label_dir(pred_dir, class)?;
    let gts = load_label_dir(gt_dir, class)?;
    let (p, g) = pair_frames(preds, gts)?;
    ap_grid(&p, &g, iou, modes, levels)
}

/// Rows are IoU modes, columns difficulty levels, AP in percent.
pub fn render_ap(cells: &[ApCell], iou: f64, class: Option<&str>) -> Rendered {
    let mut modes: Vec<IouMode> = Vec::new();
    let mut levels: Vec<Difficulty> = Vec::new();
    for c in cells {
        if !modes.contains(&c.mode) {
            modes.push(c.mode);
        }
        if !levels.contains(&c.level) {
            levels.push(c.level);
        }
    }
    let mut text = format!("AP (%) at IoU {iou}, class {}\n", class.unwrap_or("all"));
    let _ = write!(text, "{:<6}", "");
    for l in &levels {
        let _ = write!(text, "{:>10}", level_name(*l));
    }
    text.push('\n');
    for m in &modes {
        let _ = write!(text, "{:<6}", mode_name(*m));
        for l in &levels {
            let ap = cells
                .iter()
                .find(|c| c.mode == *m && c.level == *l)
                .map_or(f64::NAN, |c| c.ap);
            let _ = write!(text, "{ap:>10.1}");
        }
        text.push('\n');
    }
    let json = cells
        .iter()
        .map(|c| {
            json!({
                "mode": mode_name(c.mode),
                "level": level_name(c.level),
                "iou": iou,
                "class": class,
                "ap": c.ap,
            })
        })
        .collect();
    Rendered { text, json }
}

// ---------------------------------------------------------------------------
// optimize-demo

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoConfig {
    pub seed: u64,
    pub motion: f64,
    pub noise: f64,
    pub lambda_pc: f64,
    pub snippets: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            motion: 0.05,
            noise: 0.02,
            lambda_pc: 1.0,
            snippets: 50,
            width: 208,
            height: 64,
        }
    }
}

pub fn run_optimize_demo(cfg: &DemoConfig) -> Result<SkipTimeComparison> {
    let k = default_intrinsics().resized(cfg.width, cfg.height)?;
    let opt = OptimizeConfig {
        lambda_pc: cfg.lambda_pc,
        ..OptimizeConfig::default()
    };
    Ok(compare_skip_time(cfg.seed, cfg.snippets, cfg.motion, cfg.noise, k, &opt)?)
}

fn median_of(values: impl Iterator<Item = f64>) -> f64 {
    sm3d_core::optimize::median(&values.collect::<Vec<_>>())
}

pub fn render_demo(cfg: &DemoConfig, cmp: &SkipTimeComparison) -> Rendered {
    let runs = [(0.0, &cmp.baseline), (cmp.lambda_pc, &cmp.regularized)];
    let rot = |o: &[sm3d_core::optimize::SnippetOutcome]| median_of(o.iter().map(|x| x.rotation_error));
    let (t0, t1) = cmp.median_translation_error();
    let (c0, c1) = cmp.median_consistency();
    let (m0, m1) = cmp.max_consistency();
    let (s0, s1) = cmp.stalls();
    let mut text = format!(
        "{} snippets, seed {}, motion {} m, noise {}, {}x{}\n",
        cfg.snippets, cfg.seed, cfg.motion, cfg.noise, cfg.width, cfg.height
    );
    let _ = writeln!(text, "{:<26}{:>16}{:>16}", "", "lambda_pc=0", format!("lambda_pc={}", cmp.lambda_pc));
    let _ = writeln!(text, "{:<26}{t0:>16.6}{t1:>16.6}", "median translation (m)");
    let _ = writeln!(
        text,
        "{:<26}{:>16.6}{:>16.6}",
        "median rotation (rad)",
        rot(&cmp.baseline),
        rot(&cmp.regularized)
    );
    let _ = writeln!(text, "{:<26}{c0:>16.3e}{c1:>16.3e}", "median residual");
    let _ = writeln!(text, "{:<26}{m0:>16.3e}{m1:>16.3e}", "max residual");
    let _ = writeln!(text, "{:<26}{s0:>16}{s1:>16}", "stalled");

    let mut json = Vec::new();
    for (lambda, outcomes) in runs {
        for (i, o) in outcomes.iter().enumerate() {
            json.push(json!({
                "snippet": i,
                "lambda_pc": lambda,
                "translation_error": o.translation_error,
                "rotation_error": o.rotation_error,
                "residual": o.consistency,
                "stalled": o.stalled,
            }));
        }
    }
    for (lambda, outcomes, median_t, median_c, max_c, stalls) in [
        (0.0, &cmp.baseline, t0, c0, m0, s0),
        (cmp.lambda_pc, &cmp.regularized, t1, c1, m1, s1),
    ] {
        json.push(json!({
            "summary": true,
            "lambda_pc": lambda,
            "median_translation_error": median_t,
            "median_rotation_error": rot(outcomes),
            "median_residual": median_c,
            "max_residual": max_c,
            "stalled": stalls,
        }));
    }
    Rendered { text, json }
}

// ---------------------------------------------------------------------------
// bench

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub stage: &'static str,
    pub reps: usize,
    pub median_ms: f64,
    /// Numerical output of the stage, independent of timing and thread count.
    pub result: f64,
}

pub const MIN_BENCH_REPS: usize = 20;

/// KITTI P2 focal length, used when no calibration is supplied.
const KITTI_FOCAL: f64 = 721.5377;

fn time_stage<T>(reps: usize, mut run: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let start = Instant::now();
        let out = run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        last = Some(out);
    }
    let value = last.expect("at least one repetition");
    Ok((sm3d_core::optimize::median(&times), value))
}

/// Deterministic texture for the warp stage.
fn bench_image(w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |x, y| {
        let (x, y) = (x as f64, y as f64);
        0.5 + 0.25 * (0.11 * x + 0.05 * y).sin() + 0.2 * (0.037 * x - 0.13 * y).cos()
    })
}

/// Smooth ground-truth drive and a perturbed estimate of it.
fn bench_trajectories(n: usize) -> Result<(Trajectory, Trajectory)> {
    let rel = |i: usize, wobble: f64| {
        let t = i as f64;
        Twist::from_slice(&[
            0.02 * (0.3 * t).sin() + wobble,
            0.0,
            -1.0,
            0.0,
            0.01 * (0.2 * t).cos(),
            0.0,
        ])
        .exp()
    };
    let gt: Vec<Se3Pose> = (0..n).map(|i| rel(i, 0.0)).collect();
    let est: Vec<Se3Pose> = (0..n).map(|i| rel(i, 0.01 * (1.7 * i as f64).sin())).collect();
    Ok((accumulate(&est), accumulate(&gt)))
}

/// Rows of cars with predictions displaced by a deterministic offset.
fn bench_boxes(frames: usize) -> Result<FrameBoxes> {
    let mut preds = Vec::with_capacity(frames);
    let mut gts = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for j in 0..8 {
            let t = (f * 8 + j) as f64;
            let x = -12.0 + 3.5 * j as f64;
            let z = 10.0 + 4.0 * j as f64;
            let gt = Box3D::new("Car", [x, 1.6, z], [1.5, 1.6, 3.9], 0.1 * (t.sin()))?;
            let mut pred = gt.clone().with_score(0.5 + 0.5 * (0.7 * t).cos().abs());
            pred.x += 0.4 * (1.3 * t).sin();
            pred.z += 0.4 * (0.9 * t).cos();
            g.push(gt);
            p.push(pred);
        }
        preds.push(p);
        gts.push(g);
    }
    Ok((preds, gts))
}

pub fn run_bench(frames: &[PathBuf], calib: Option<&Path>, reps: usize) -> Result<Vec<BenchRow>> {
    if reps < MIN_BENCH_REPS {
        bail!("at least {MIN_BENCH_REPS} repetitions are required, got {reps}");
    }
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    let pngs = frames.iter().map(|p| read_bytes(p)).collect::<Result<Vec<_>>>()?;
    let calib = calib.map(|p| -> Result<_> { Ok(parse_calib(&read_text(p)?)?) }).transpose()?;
    let depths: Vec<DepthMap> = pngs
        .iter()
        .zip(frames)
        .map(|(b, p)| read_depth_png(b).with_context(|| format!("decoding {}", p.display())))
        .collect::<Result<_>>()?;
    let intrinsics: Vec<Intrinsics> = depths
        .iter()
        .map(|d| -> Result<Intrinsics> {
            let (w, h) = d.dims();
            match &calib {
                Some(c) => Ok(c.default_intrinsics(w, h)?),
                None => Ok(Intrinsics::new(
                    KITTI_FOCAL,
                    KITTI_FOCAL,
                    (w as f64 - 1.0) / 2.0,
                    (h as f64 - 1.0) / 2.0,
                    w,
                    h,
                )?),
            }
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let (ms, valid) = time_stage(reps, || {
        pngs.iter()
            .map(|b| Ok(read_depth_png(b)?.valid_count()))
            .sum::<Result<usize>>()
    })?;
    rows.push(BenchRow { stage: "depth decode", reps, median_ms: ms, result: valid as f64 });

    let (ms, points) = time_stage(reps, || {
        depths
            .iter()
            .zip(&intrinsics)
            .map(|(d, k)| Ok(depth_to_pointcloud(d, k, 80.0)?.0.len()))
            .sum::<Result<usize>>()
    })?;
    rows.push(BenchRow { stage: "pseudolidar", reps, median_ms: ms, result: points as f64 });

    let images: Vec<Image> = depths.iter().map(|d| bench_image(d.width(), d.height())).collect();
    let pose = Se3Pose::from_axis_angle(nalgebra::Vector3::new(0.0, 1.0, 0.0), 0.002, nalgebra::Vector3::new(0.1, 0.0, 0.3));
    let (ms, loss) = time_stage(reps, || {
        let mut total = 0.0;
        for ((img, d), k) in images.iter().zip(&depths).zip(&intrinsics) {
            let (recon, mask) = inverse_warp(img, d, &pose, k)?;
            total += photometric_loss(img, &recon, &mask)?.loss;
        }
        Ok(total)
    })?;
    rows.push(BenchRow { stage: "warp", reps, median_ms: ms, result: loss });

    let (est, gt) = bench_trajectories(200)?;
    let (ms, report) = time_stage(reps, || Ok(ate(&est, &gt, 3)?))?;
    rows.push(BenchRow { stage: "ATE", reps, median_ms: ms, result: report.mean });

    let (preds, gts) = bench_boxes(50)?;
    let (ms, ap) = time_stage(reps, || {
        Ok(average_precision(&preds, &gts, 0.7, IouMode::ThreeD, Difficulty::Moderate)?.ap)
    })?;
    rows.push(BenchRow { stage: "AP", reps, median_ms: ms, result: ap });
    Ok(rows)
}

pub fn render_bench(rows: &[BenchRow]) -> Rendered {
    let mut text = format!("{:<14}{:>6}{:>12}{:>20}\n", "stage", "reps", "median ms", "result");
    for r in rows {
        let _ = writeln!(text, "{:<14}{:>6}{:>12.3}{:>20.6}", r.stage, r.reps, r.median_ms, r.result);
    }
    let json = rows
        .iter()
        .map(|r| json!({"stage": r.stage, "reps": r.reps, "median_ms": r.median_ms, "result": r.result}))
        .collect();
    Rendered { text, json }
}
