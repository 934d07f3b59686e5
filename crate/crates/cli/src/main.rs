//! Command-line pipeline around the estimation library.
//!
//! Subcommands:
//!   gen         sample synthetic scenes into a JSONL dataset
//!   refine      run a refiner over scenes and write per-iteration traces
//!   eval        score traces against ground truth into a JSON report
//!   overlay     draw a trace as an SVG wireframe overlay (plus PGM masks)
//!   sweep-iters study accuracy vs iteration count per oracle step fraction
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Failures print a
//! single machine-readable JSON line to stderr. Every stochastic command
//! takes `--seed`, file headers record the full configuration, and reruns
//! with identical arguments produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use robofit::camera::{compute_crop, project, Intrinsics, CROP_ASPECT, CROP_ENLARGE};
use robofit::estimator::{
    refine, refine_from, AnchorStrategy, EstimatorConfig, Refiner, ReferenceStrategy, RobotState,
};
use robofit::kinematics::{load_robot, robot_centroid, RobotModel};
use robofit::metrics::{
    add_auc, add_error, joint_keypoints, pck, pose_error_report, MetricReport,
};
use robofit::refiners::{LsqConfig, LsqRefiner, OracleConfig, OracleRefiner, ResidualKind};
use robofit::render::{render, render_overlay_svg};
use robofit::scene::{
    sample_scene, seeded_rng, trace_from_records, trace_to_records, FileHeader, Scene,
    TraceRecord, SCHEMA_VERSION,
};

#[derive(Parser)]
#[command(name = "robofit", version, about = "Synthetic robot-state estimation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    Gen(GenArgs),
    /// Refine scenes with a chosen refiner and record traces.
    Refine(RefineArgs),
    /// Evaluate traces against scene ground truth.
    Eval(EvalArgs),
    /// Render one scene's trace as an SVG overlay.
    Overlay(OverlayArgs),
    /// Median accuracy for several step fractions and iteration counts.
    SweepIters(SweepArgs),
}

#[derive(Args)]
struct CameraArgs {
    /// Image width, pixels.
    #[arg(long, default_value_t = 640)]
    img_width: u32,
    /// Image height, pixels.
    #[arg(long, default_value_t = 480)]
    img_height: u32,
    /// Focal length (both axes), pixels.
    #[arg(long, default_value_t = 500.0)]
    focal: f64,
}

impl CameraArgs {
    fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            f_x: self.focal,
            f_y: self.focal,
            c_x: self.img_width as f64 / 2.0,
            c_y: self.img_height as f64 / 2.0,
            width: self.img_width,
            height: self.img_height,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Robot description JSON file.
    #[arg(long)]
    robot: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output scenes JSONL path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    camera: CameraArgs,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum RefinerKind {
    Oracle,
    NoisyOracle,
    Lsq,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ResidualArg {
    /// Camera-frame 3D point distances.
    #[value(name = "3d")]
    Point3d,
    /// Image-plane reprojection distances.
    #[value(name = "2d")]
    Reprojection2d,
}

fn parse_anchor(s: &str) -> Result<AnchorStrategy, String> {
    if s == "all" {
        return Ok(AnchorStrategy::RandomAll);
    }
    if let Some(id) = s.strip_prefix("fixed:") {
        return id
            .parse()
            .map(AnchorStrategy::Fixed)
            .map_err(|e| format!("bad part id in '{s}': {e}"));
    }
    if let Some(n) = s.strip_prefix("largest:") {
        return n
            .parse()
            .map(AnchorStrategy::RandomAmongLargest)
            .map_err(|e| format!("bad count in '{s}': {e}"));
    }
    Err(format!(
        "expected 'fixed:ID', 'largest:N' or 'all', got '{s}'"
    ))
}

fn parse_reference(s: &str) -> Result<ReferenceStrategy, String> {
    if s == "centroid" {
        return Ok(ReferenceStrategy::RobotCentroid);
    }
    if let Some(id) = s.strip_prefix("part:") {
        return id
            .parse()
            .map(ReferenceStrategy::PartOrigin)
            .map_err(|e| format!("bad part id in '{s}': {e}"));
    }
    Err(format!("expected 'centroid' or 'part:ID', got '{s}'"))
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    robot: PathBuf,
    /// Input scenes JSONL.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_enum)]
    refiner: RefinerKind,
    /// Refinement iterations per scene.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Anchor strategy: fixed:ID | largest:N | all.
    #[arg(long, value_parser = parse_anchor, default_value = "largest:5")]
    anchor: AnchorStrategy,
    /// Reference-point strategy: centroid | part:ID.
    #[arg(long, value_parser = parse_reference, default_value = "centroid")]
    reference: ReferenceStrategy,
    /// Freeze joint angles at their measured (ground-truth) values.
    #[arg(long)]
    known_joints: bool,
    /// Initialize each scene from the previous scene's result.
    #[arg(long)]
    chain: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output traces JSONL path.
    #[arg(long)]
    trace_out: PathBuf,
    /// Oracle step fraction (noisy-oracle defaults to 0.5).
    #[arg(long)]
    step_fraction: Option<f64>,
    /// Noisy-oracle translation noise scale, meters.
    #[arg(long, default_value_t = 0.10)]
    trans_noise: f64,
    /// Noisy-oracle rotation noise scale, degrees.
    #[arg(long, default_value_t = 60.0)]
    rot_noise: f64,
    /// Noisy-oracle joint noise scale, fraction of range.
    #[arg(long, default_value_t = 0.05)]
    joint_noise: f64,
    /// Least-squares residual space.
    #[arg(long, value_enum, default_value = "3d")]
    residual: ResidualArg,
    #[arg(long, default_value_t = 320)]
    crop_width: u32,
    #[arg(long, default_value_t = 240)]
    crop_height: u32,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    robot: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    /// ADD-AUC integration threshold, meters.
    #[arg(long, default_value_t = 0.1)]
    add_thresh: f64,
    /// PCK threshold as a fraction of the keypoint bounding-box side.
    #[arg(long, default_value_t = 0.2)]
    pck_fraction: f64,
    /// Output report JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    robot: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    scene_id: u64,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
    /// Also dump robot/anchor masks of the final state as PGM into this
    /// directory.
    #[arg(long)]
    masks_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    robot: PathBuf,
    /// Scenes per configuration.
    #[arg(long, default_value_t = 100)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Oracle step fractions standing in for refiner quality.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
    k_train_proxy: Vec<f64>,
    /// Iteration counts to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10")]
    k_test: Vec<usize>,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    camera: CameraArgs,
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("{e}");
            let line = serde_json::json!({"error": e.to_string(), "kind": "usage"});
            eprintln!("{line}");
            std::process::exit(1);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Overlay(args) => cmd_overlay(args),
        Command::SweepIters(args) => cmd_sweep(args),
    };
    if let Err(e) = result {
        let line = serde_json::json!({"error": format!("{e:#}"), "kind": "runtime"});
        eprintln!("{line}");
        std::process::exit(2);
    }
}

fn load_model(path: &Path) -> Result<RobotModel> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading robot description {}", path.display()))?;
    load_robot(&text).with_context(|| format!("loading robot description {}", path.display()))
}

fn read_scenes_file(path: &Path) -> Result<(FileHeader, Vec<Scene>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    robofit::scene::read_scenes(BufReader::new(file))
        .with_context(|| format!("reading scenes from {}", path.display()))
}

fn read_traces_file(path: &Path) -> Result<(FileHeader, Vec<TraceRecord>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    robofit::scene::read_traces(BufReader::new(file))
        .with_context(|| format!("reading traces from {}", path.display()))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let model = load_model(&args.robot)?;
    let camera = args.camera.intrinsics();

    let mut scenes = Vec::with_capacity(args.count as usize);
    for id in 0..args.count {
        let scene_seed = args.seed ^ id;
        let mut rng = seeded_rng(scene_seed);
        let mut scene = sample_scene(&model, &camera, &mut rng)
            .with_context(|| format!("sampling scene {id}"))?;
        scene.scene_id = id;
        scene.seed = scene_seed;
        scenes.push(scene);
    }

    let header = FileHeader::new(
        "scenes",
        args.seed,
        serde_json::json!({
            "robot": args.robot.display().to_string(),
            "robot_name": model.name(),
            "count": args.count,
            "camera": camera,
        }),
    );
    let out =
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    robofit::scene::write_scenes(BufWriter::new(out), &header, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

fn build_refiner(args: &RefineArgs) -> Box<dyn Refiner> {
    match args.refiner {
        RefinerKind::Oracle => Box::new(OracleRefiner::new(OracleConfig {
            step_fraction: args.step_fraction.unwrap_or(1.0),
            ..OracleConfig::default()
        })),
        RefinerKind::NoisyOracle => Box::new(OracleRefiner::new(OracleConfig {
            rotation_sigma_deg: args.rot_noise,
            translation_sigma_m: args.trans_noise,
            joint_sigma_fraction: args.joint_noise,
            step_fraction: args.step_fraction.unwrap_or(0.5),
        })),
        RefinerKind::Lsq => Box::new(LsqRefiner::new(LsqConfig {
            residual: match args.residual {
                ResidualArg::Point3d => ResidualKind::Point3d,
                ResidualArg::Reprojection2d => ResidualKind::Reprojection2d,
            },
            ..LsqConfig::default()
        })),
    }
}

fn refiner_name(kind: RefinerKind) -> &'static str {
    match kind {
        RefinerKind::Oracle => "oracle",
        RefinerKind::NoisyOracle => "noisy-oracle",
        RefinerKind::Lsq => "lsq",
    }
}

fn anchor_name(a: &AnchorStrategy) -> String {
    match a {
        AnchorStrategy::Fixed(id) => format!("fixed:{id}"),
        AnchorStrategy::RandomAmongLargest(n) => format!("largest:{n}"),
        AnchorStrategy::RandomAll => "all".into(),
    }
}

fn reference_name(r: &ReferenceStrategy) -> String {
    match r {
        ReferenceStrategy::RobotCentroid => "centroid".into(),
        ReferenceStrategy::PartOrigin(id) => format!("part:{id}"),
    }
}

fn cmd_refine(args: RefineArgs) -> Result<()> {
    let model = load_model(&args.robot)?;
    let (_, scenes) = read_scenes_file(&args.scenes)?;
    let refiner = build_refiner(&args);

    let config_for = |scene: &Scene| EstimatorConfig {
        iterations: args.iters,
        anchor: args.anchor,
        reference: args.reference,
        known_joints: args.known_joints,
        rng_seed: args.seed ^ scene.scene_id,
        crop_width: args.crop_width,
        crop_height: args.crop_height,
        init_rotation: None,
    };

    let run_one = |scene: &Scene, initial: Option<RobotState>| -> Result<Vec<TraceRecord>> {
        let obs = scene.observation(args.known_joints);
        let config = config_for(scene);
        let trace = match initial {
            Some(state) => refine_from(&obs, &model, refiner.as_ref(), &config, state),
            None => refine(&obs, &model, refiner.as_ref(), &config),
        }
        .map_err(|failure| anyhow!("scene {}: {}", scene.scene_id, failure.error))?;
        Ok(trace_to_records(scene.scene_id, &trace))
    };

    let records: Vec<TraceRecord> = if args.chain {
        // Online mode: each scene starts from the previous result.
        let mut all = Vec::new();
        let mut carry: Option<RobotState> = None;
        for scene in &scenes {
            let records = run_one(scene, carry.take())?;
            carry = records.last().map(|r| r.state.clone());
            all.extend(records);
        }
        all
    } else if refiner.exclusive() {
        let mut all = Vec::new();
        for scene in &scenes {
            all.extend(run_one(scene, None)?);
        }
        all
    } else {
        // Output order is by scene id regardless of which worker finishes
        // first.
        scenes
            .par_iter()
            .map(|scene| run_one(scene, None))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect()
    };

    let header = FileHeader::new(
        "traces",
        args.seed,
        serde_json::json!({
            "robot": args.robot.display().to_string(),
            "scenes": args.scenes.display().to_string(),
            "refiner": refiner_name(args.refiner),
            "iters": args.iters,
            "anchor": anchor_name(&args.anchor),
            "reference": reference_name(&args.reference),
            "known_joints": args.known_joints,
            "chain": args.chain,
            "step_fraction": args.step_fraction,
            "trans_noise": args.trans_noise,
            "rot_noise": args.rot_noise,
            "joint_noise": args.joint_noise,
            "crop": [args.crop_width, args.crop_height],
        }),
    );
    let out = File::create(&args.trace_out)
        .with_context(|| format!("creating {}", args.trace_out.display()))?;
    robofit::scene::write_traces(BufWriter::new(out), &header, &records)?;
    println!(
        "refined {} scenes x {} iterations into {}",
        scenes.len(),
        args.iters,
        args.trace_out.display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct PerSceneMetrics {
    scene_id: u64,
    add_m: f64,
    pck: f64,
    trans_xyz_cm: f64,
    trans_norm_cm: f64,
    rot_euler_deg: f64,
    joint_deg: f64,
}

/// Highest-iteration state per scene.
fn final_states(records: Vec<TraceRecord>) -> BTreeMap<u64, RobotState> {
    let mut by_scene: BTreeMap<u64, (usize, RobotState)> = BTreeMap::new();
    for r in records {
        let entry = by_scene
            .entry(r.scene_id)
            .or_insert_with(|| (r.iteration, r.state.clone()));
        if r.iteration >= entry.0 {
            *entry = (r.iteration, r.state);
        }
    }
    by_scene.into_iter().map(|(k, (_, s))| (k, s)).collect()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_model(&args.robot)?;
    let (_, scenes) = read_scenes_file(&args.scenes)?;
    let (trace_header, records) = read_traces_file(&args.traces)?;
    let finals = final_states(records);

    let mut per_scene = Vec::new();
    let mut add_errors = Vec::new();
    for scene in &scenes {
        let Some(pred) = finals.get(&scene.scene_id) else {
            continue;
        };
        let gt = &scene.gt_state;
        let add = add_error(&model, pred, gt)?;

        // 2D keypoint accuracy against the ground-truth projections.
        let k = &scene.camera;
        let gt_kp = joint_keypoints(&model, gt)?;
        let pred_kp = joint_keypoints(&model, pred)?;
        let gt_px = project(&gt_kp, k);
        let pred_px = project(&pred_kp, k);
        let visible: Vec<bool> = gt_px.iter().map(|p| p.valid && k.contains(&p.uv)).collect();
        // Normalizer: larger side of the ground-truth keypoint bounding box.
        let (mut lo_x, mut lo_y) = (f64::INFINITY, f64::INFINITY);
        let (mut hi_x, mut hi_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (p, &vis) in gt_px.iter().zip(&visible) {
            if vis {
                lo_x = lo_x.min(p.uv.x);
                lo_y = lo_y.min(p.uv.y);
                hi_x = hi_x.max(p.uv.x);
                hi_y = hi_y.max(p.uv.y);
            }
        }
        let normalizer = (hi_x - lo_x).max(hi_y - lo_y).max(1.0);
        let scene_pck = pck(
            &pred_px.iter().map(|p| p.uv).collect::<Vec<_>>(),
            &gt_px.iter().map(|p| p.uv).collect::<Vec<_>>(),
            &visible,
            normalizer,
            args.pck_fraction,
        )
        .unwrap_or(0.0);

        let report = pose_error_report(pred, gt, &model)?;
        add_errors.push(add);
        per_scene.push(PerSceneMetrics {
            scene_id: scene.scene_id,
            add_m: add,
            pck: scene_pck,
            trans_xyz_cm: report.trans_xyz_cm,
            trans_norm_cm: report.trans_norm_cm,
            rot_euler_deg: report.rot_euler_deg,
            joint_deg: report.joint_deg,
        });
    }

    if per_scene.is_empty() {
        bail!("no scene has a matching trace");
    }
    let n = per_scene.len() as f64;
    let mean = |f: fn(&PerSceneMetrics) -> f64| per_scene.iter().map(f).sum::<f64>() / n;
    let report = MetricReport {
        add_errors: add_errors.clone(),
        add_auc: add_auc(&add_errors, args.add_thresh)?,
        pck: mean(|m| m.pck),
        trans_xyz_cm: mean(|m| m.trans_xyz_cm),
        trans_norm_cm: mean(|m| m.trans_norm_cm),
        rot_euler_deg: mean(|m| m.rot_euler_deg),
        joint_deg: mean(|m| m.joint_deg),
    };

    let doc = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "kind": "report",
        "config": {
            "robot": args.robot.display().to_string(),
            "scenes": args.scenes.display().to_string(),
            "traces": args.traces.display().to_string(),
            "trace_config": trace_header.config,
            "add_thresh": args.add_thresh,
            "pck_fraction": args.pck_fraction,
        },
        "report": report,
        "per_scene": per_scene,
    });
    let mut out = BufWriter::new(
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;

    println!(
        "scenes: {} | ADD-AUC: {:.2}% | PCK@{:.1}: {:.2}% | trans {:.3} cm | rot {:.3} deg | joints {:.3} deg",
        per_scene.len(),
        report.add_auc * 100.0,
        args.pck_fraction,
        report.pck * 100.0,
        report.trans_norm_cm,
        report.rot_euler_deg,
        report.joint_deg,
    );
    Ok(())
}

fn cmd_overlay(args: OverlayArgs) -> Result<()> {
    let model = load_model(&args.robot)?;
    let (_, scenes) = read_scenes_file(&args.scenes)?;
    let (_, records) = read_traces_file(&args.traces)?;

    let scene = scenes
        .iter()
        .find(|s| s.scene_id == args.scene_id)
        .ok_or_else(|| {
            anyhow!("scene {} not found in {}", args.scene_id, args.scenes.display())
        })?;
    let mine: Vec<TraceRecord> = records
        .into_iter()
        .filter(|r| r.scene_id == args.scene_id)
        .collect();
    if mine.is_empty() {
        bail!("no trace records for scene {}", args.scene_id);
    }
    let trace = trace_from_records(mine)
        .ok_or_else(|| anyhow!("trace records for scene {} are incomplete", args.scene_id))?;

    let states: Vec<RobotState> = trace.states().cloned().collect();
    let obs = scene.observation(false);
    let svg = render_overlay_svg(&obs, &states, &model)?;
    std::fs::write(&args.out, svg).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote overlay for scene {} to {}",
        args.scene_id,
        args.out.display()
    );

    if let Some(dir) = args.masks_out {
        std::fs::create_dir_all(&dir)?;
        let state = trace.final_state();
        let reference = robot_centroid(&model, state)?;
        let poses = robofit::estimator::part_poses_in_camera(&model, state)?;
        let mut projected = Vec::new();
        for (part, pose) in model.parts().iter().zip(&poses) {
            projected.extend(project(&pose.transform_points(&part.points), &scene.camera));
        }
        let center = project(&[reference], &scene.camera)[0].uv;
        let crop = compute_crop(&projected, center, CROP_ASPECT, CROP_ENLARGE)?;
        let out = render(&model, state, &scene.camera, &crop, 320, 240)?;
        std::fs::write(dir.join("robot_mask.pgm"), out.robot_mask.to_pgm())?;
        std::fs::write(dir.join("anchor_mask.pgm"), out.anchor_mask.to_pgm())?;
        println!("wrote masks to {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let model = load_model(&args.robot)?;
    let camera = args.camera.intrinsics();
    if args.k_test.is_empty() || args.k_train_proxy.is_empty() {
        bail!("k-test and k-train-proxy must be non-empty");
    }
    let max_k = *args.k_test.iter().max().expect("non-empty");

    let mut scenes = Vec::with_capacity(args.count as usize);
    for id in 0..args.count {
        let mut rng = seeded_rng(args.seed ^ id);
        let mut scene = sample_scene(&model, &camera, &mut rng)?;
        scene.scene_id = id;
        scene.seed = args.seed ^ id;
        scenes.push(scene);
    }

    #[derive(serde::Serialize)]
    struct SweepRow {
        step_fraction: f64,
        k: Vec<usize>,
        median_add_m: Vec<f64>,
        diverged: usize,
    }

    let mut rows = Vec::new();
    for &step in &args.k_train_proxy {
        let refiner = OracleRefiner::new(OracleConfig::noisy(step));
        // One run at the largest K per scene; smaller K values read the
        // intermediate states of the same trace. A scene whose refinement
        // aborts (reference thrown behind the camera by an extreme draw)
        // counts as diverged and scores an infinite error.
        let adds: Vec<Vec<f64>> = scenes
            .par_iter()
            .map(|scene| -> Result<Vec<f64>> {
                let obs = scene.observation(false);
                let config = EstimatorConfig {
                    iterations: max_k,
                    rng_seed: args.seed ^ scene.scene_id,
                    ..EstimatorConfig::default()
                };
                match refine(&obs, &model, &refiner, &config) {
                    Ok(trace) => {
                        let states: Vec<&RobotState> = trace.states().collect();
                        args.k_test
                            .iter()
                            .map(|&k| Ok(add_error(&model, states[k], &scene.gt_state)?))
                            .collect()
                    }
                    Err(_) => Ok(vec![f64::INFINITY; args.k_test.len()]),
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let diverged = adds.iter().filter(|a| a[0].is_infinite()).count();
        let median_add_m: Vec<f64> = (0..args.k_test.len())
            .map(|i| {
                let mut v: Vec<f64> = adds.iter().map(|a| a[i]).collect();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            })
            .collect();
        rows.push(SweepRow {
            step_fraction: step,
            k: args.k_test.clone(),
            median_add_m,
            diverged,
        });
    }

    println!("median ADD (m) over {} scenes", args.count);
    print!("{:>14}", "step \\ K");
    for k in &args.k_test {
        print!("{k:>10}");
    }
    println!();
    for row in &rows {
        print!("{:>14.2}", row.step_fraction);
        for v in &row.median_add_m {
            print!("{v:>10.4}");
        }
        println!();
    }

    let doc = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "kind": "sweep",
        "config": {
            "robot": args.robot.display().to_string(),
            "count": args.count,
            "seed": args.seed,
            "camera": camera,
            "k_train_proxy": args.k_train_proxy,
            "k_test": args.k_test,
        },
        "rows": rows,
    });
    let mut out = BufWriter::new(
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;
    Ok(())
}
