//! `shinypose` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shinypose::calib::{fit_bsdf, recover_response, FitOptions, ResponseCurve};
use shinypose::geometry::Pose;
use shinypose::harness::{
    generate_benchmark_scene, object_sdf, parse_metric, perturb_pose, pose_error, run_experiment, write_report,
    BenchmarkKind, DatasetSource, DatasetView, DetectionMetric, MaterialPreset, RunConfig,
};
use shinypose::io::{read_depth_pfm, read_pfm, write_pfm, write_png8, FloatImage};
use shinypose::nbv::{active_loop, Planner, Policy};
use shinypose::refine::{build_measurement_set, icp_refine_baseline, refine, RefineOptions};
use shinypose::render::{
    render_image, render_radiance, simulate_capture, BsdfParams, CaptureNoise, PredictionSettings, RadianceImage,
    RenderMode, SceneDescription, DEFAULT_BOUNCES,
};
use shinypose::uncertainty::IntensityImage;
use shinypose::{Error, ErrorCategory, Result};

#[derive(Parser)]
#[command(
    name = "shinypose",
    version,
    about = "Uncertainty-aware pose refinement and view planning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene and simulate one structured-light capture of it.
    Simulate(SimulateArgs),
    /// Recover a camera response curve from a multi-exposure stack.
    CalibrateResponse(CalibrateArgs),
    /// Fit an object's BSDF to a target radiance image.
    FitBsdf(FitArgs),
    /// Refine an object pose against a depth map.
    Refine(RefineArgs),
    /// Run the active view-planning loop with one policy.
    Nbv(NbvArgs),
    /// Run a benchmark experiment and write its reports.
    Bench(BenchArgs),
    /// Detection rates from a summary CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene file; a benchmark scene is generated when absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value = "glossy-part")]
    kind: BenchmarkKind,
    #[arg(long, default_value = "glossy")]
    preset: MaterialPreset,
    /// Target object name (scene files only).
    #[arg(long)]
    object: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Leave depth noise out.
    #[arg(long)]
    clean: bool,
    /// Fraction of measured pixels replaced by gross errors.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
    /// Exposure of the written 8-bit image; scaled to the brightest pixel by
    /// default.
    #[arg(long)]
    exposure: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// 8-bit greyscale images of a static scene.
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    /// Exposure times, one row per image; the last column is used and a
    /// header row is skipped.
    #[arg(long)]
    exposures: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    lambda: f64,
    #[arg(long, default_value_t = 300)]
    samples: usize,
    #[arg(long, default_value = "response.json")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Linear radiance PFM seen from the scene camera.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    object: Option<String>,
    /// `medium`, `matte`, `chrome` or four comma-separated values.
    #[arg(long, default_value = "medium")]
    init: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value = "fit")]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    /// Scene file: object model, camera and the initial object pose.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    variance: Option<PathBuf>,
    /// Depth variance (mm²) where no variance map is given.
    #[arg(long, default_value_t = 1.0)]
    default_variance: f64,
    #[arg(long)]
    object: Option<String>,
    /// `truth.json` to report pose errors against.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Perturb the initial pose by up to this many mm.
    #[arg(long, default_value_t = 0.0)]
    perturb_mm: f64,
    #[arg(long, default_value_t = 0.0)]
    perturb_deg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `sdf` or `icp`.
    #[arg(long, default_value = "sdf")]
    method: String,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value = "refine")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Run configuration (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    kind: Option<BenchmarkKind>,
    #[arg(long)]
    preset: Option<MaterialPreset>,
}

impl ExperimentArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(k) = self.kind {
            cfg.kind = k;
        }
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct NbvArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, default_value = "nbv")]
    policy: Policy,
    /// Plan over recorded captures in this dataset directory instead of
    /// simulating; needs the config's scene file for prediction.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Policies to compare (repeatable); overrides the config.
    #[arg(long)]
    policy: Vec<Policy>,
    /// Reported `mm,deg` thresholds (repeatable); overrides the config.
    #[arg(long, value_parser = parse_metric)]
    metric: Vec<(f64, f64)>,
}

#[derive(Args)]
struct EvalArgs {
    /// `summary.csv` written by `bench` or `nbv`.
    summary: PathBuf,
    #[arg(long, value_parser = parse_metric)]
    metric: Vec<(f64, f64)>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::CalibrateResponse(a) => calibrate(a),
        Command::FitBsdf(a) => fit(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Nbv(a) => nbv(a),
        Command::Bench(a) => bench(a),
        Command::Eval(a) => eval(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numerical => 3,
            })
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json") + "\n").map_err(|e| io_err(path, e))
}

fn object_index(scene: &SceneDescription, name: Option<&str>) -> Result<usize> {
    match name {
        None if scene.objects.is_empty() => Err(Error::Config("scene has no objects".into())),
        None => Ok(0),
        Some(n) => scene
            .object_index(n)
            .ok_or_else(|| Error::Config(format!("no object named '{n}' in the scene"))),
    }
}

fn read_truth(path: &Path) -> Result<Pose> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let values: Vec<f64> = v["world_from_object"]
        .as_array()
        .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
        .unwrap_or_default();
    Pose::from_row_major(&values).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn radiance_to_pfm(rad: &RadianceImage) -> FloatImage {
    FloatImage {
        width: rad.width,
        height: rad.height,
        values: rad.radiance.iter().map(|&v| v as f32).collect(),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let (scene, object) = match &a.scene {
        Some(p) => {
            let scene = SceneDescription::load(p)?;
            let idx = object_index(&scene, a.object.as_deref())?;
            (scene, idx)
        }
        None => {
            let b = generate_benchmark_scene(a.kind, a.preset, a.seed)?;
            (b.scene, b.object)
        }
    };
    if !(0.0..=1.0).contains(&a.outliers) {
        return Err(Error::Config("outliers must be a fraction in [0, 1]".into()));
    }
    create_dir(&a.out)?;
    let p = a.out.join("scene.toml");
    fs::write(&p, scene.to_toml_string()).map_err(|e| io_err(&p, e))?;

    let response = ResponseCurve::gamma(a.gamma);
    let rad = render_radiance(
        &scene,
        RenderMode::MultiPath {
            bounces: DEFAULT_BOUNCES,
        },
    );
    write_pfm(&a.out.join("radiance.pfm"), &radiance_to_pfm(&rad))?;
    let exposure = match a.exposure {
        Some(e) => e,
        None => {
            let peak = rad
                .radiance
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(0.0, f64::max);
            if peak > 0.0 {
                1.0 / peak
            } else {
                1.0
            }
        }
    };
    let img: IntensityImage = render_image(&rad, &response, exposure)?;
    write_png8(&a.out.join("image.png"), &img)?;

    let noise = CaptureNoise {
        depth_noise: !a.clean,
        outlier_fraction: a.outliers,
        ..CaptureNoise::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let cap = simulate_capture(
        &scene,
        object,
        &scene.world_from_camera,
        &PredictionSettings::default(),
        &response,
        &noise,
        &mut rng,
    )?;
    let view = DatasetView {
        id: 0,
        depth: PathBuf::from("depth.pfm"),
        variance: Some(PathBuf::from("variance.pfm")),
        world_from_camera: scene.world_from_camera,
    };
    let truth = scene.objects[object].world_from_object;
    DatasetSource::write(&a.out, &scene.camera, &[(view, cap.depth.clone())], Some(&truth))?;
    println!(
        "{} measured pixels of '{}' written to {}",
        cap.depth.valid_count(),
        scene.objects[object].name,
        a.out.display()
    );
    Ok(())
}

fn read_exposures(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let Some(last) = rec.iter().next_back() else { continue };
        match last.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if row == 0 => {}
            Err(_) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("row {}: '{last}' is not a number", row + 1),
                })
            }
        }
    }
    Ok(out)
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let exposures = read_exposures(&a.exposures)?;
    if exposures.len() != a.images.len() {
        return Err(Error::Config(format!(
            "{} images but {} exposure times",
            a.images.len(),
            exposures.len()
        )));
    }
    let images = a
        .images
        .iter()
        .map(|p| shinypose::io::read_png_intensity(p))
        .collect::<Result<Vec<_>>>()?;
    let curve = recover_response(&images, &exposures, a.lambda, a.samples)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&a.out, &curve.to_json())?;
    println!("response curve written to {}", a.out.display());
    Ok(())
}

fn parse_init(text: &str) -> Result<BsdfParams> {
    match text {
        "medium" => Ok(BsdfParams::medium()),
        "matte" => Ok(BsdfParams::matte()),
        "chrome" => Ok(BsdfParams::chrome()),
        _ => {
            let v: Vec<f64> = text
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad BSDF init '{text}'")))?;
            if v.len() != 4 {
                return Err(Error::Config("BSDF init needs four values".into()));
            }
            BsdfParams::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Config(e.to_string()))
        }
    }
}

fn fit(a: FitArgs) -> Result<()> {
    let scene = SceneDescription::load(&a.scene)?;
    let object = object_index(&scene, a.object.as_deref())?;
    let init = parse_init(&a.init)?;
    let img = read_pfm(&a.target)?;
    let target = RadianceImage {
        width: img.width,
        height: img.height,
        radiance: img.values.iter().map(|&v| v as f64).collect(),
        depth: vec![0.0; img.values.len()],
        valid: img.values.iter().map(|v| v.is_finite()).collect(),
        object: vec![None; img.values.len()],
    };
    let mut opts = FitOptions::default();
    if let Some(e) = a.epochs {
        opts.epochs = e;
    }
    if let Some(lr) = a.lr {
        opts.lr = lr;
    }
    let report = fit_bsdf(&target, &scene, object, &init, &opts)?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("fit_report.json"),
        &serde_json::to_value(&report).expect("json"),
    )?;
    let p = a.out.join("loss.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Format {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Format {
        path: p.clone(),
        reason: e.to_string(),
    };
    w.write_record(["epoch", "loss"]).map_err(csv_err)?;
    for (i, l) in report.loss_history.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.9e}")]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(&p, e))?;
    let [b, m, r, s] = report.params.to_array();
    println!(
        "base_color {b:.4} metallic {m:.4} roughness {r:.4} specular {s:.4} relative loss {:.3e}",
        report.relative_loss
    );
    Ok(())
}

fn refine_cmd(a: RefineArgs) -> Result<()> {
    let scene = SceneDescription::load(&a.scene)?;
    let object = object_index(&scene, a.object.as_deref())?;
    let depth = read_depth_pfm(&a.depth, a.variance.as_deref(), a.default_variance)?;
    let truth = a.truth.as_deref().map(read_truth).transpose()?;
    let mask = depth.valid().to_vec();
    let set = build_measurement_set(&depth, &mask, &scene.camera, &scene.world_from_camera, 0, a.stride)?;
    if set.is_empty() {
        return Err(Error::EmptyMeasurement(0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let start = perturb_pose(
        &scene.objects[object].world_from_object,
        a.perturb_mm,
        a.perturb_deg.to_radians(),
        &mut rng,
    );
    let mut opts = RefineOptions::default();
    if let Some(n) = a.max_iters {
        opts.max_iters = n;
    }
    let sets = [set];
    let result = match a.method.as_str() {
        "sdf" => {
            let grid = object_sdf(&scene, object)?;
            refine(&sets, &start.inverse(), &grid, &opts)
        }
        "icp" => icp_refine_baseline(&sets, &start.inverse(), &scene.objects[object].mesh, &opts),
        m => return Err(Error::Config(format!("unknown method '{m}', expected sdf or icp"))),
    };
    let estimate = result.pose.inverse();
    let mut out = result.to_json();
    out["method"] = a.method.clone().into();
    out["world_from_object"] = estimate.to_row_major().to_vec().into();
    if let Some(t) = &truth {
        let (te, re) = pose_error(&estimate, t);
        out["trans_err"] = te.into();
        out["rot_err"] = re.into();
    }
    create_dir(&a.out)?;
    write_json(&a.out.join("result.json"), &out)?;
    println!("{out}");
    if !result.covariance.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("pose covariance is not finite".into()));
    }
    Ok(())
}

fn nbv(a: NbvArgs) -> Result<()> {
    let mut cfg = a.exp.config()?;
    cfg.policies = vec![a.policy];
    cfg.fixed_views.clear();
    match &a.dataset {
        None => {
            let report = run_experiment(&cfg)?;
            write_report(&report, &cfg.out)?;
            print_summaries(&report.summaries);
            Ok(())
        }
        Some(dir) => nbv_dataset(&cfg, a.policy, dir),
    }
}

fn nbv_dataset(cfg: &RunConfig, policy: Policy, dir: &Path) -> Result<()> {
    let scene_path = cfg
        .scene
        .as_ref()
        .ok_or_else(|| Error::Config("dataset mode needs a scene file in the config".into()))?;
    let scene = SceneDescription::load(scene_path)?;
    let object = object_index(&scene, cfg.object.as_deref())?;
    let mut source = DatasetSource::open(dir, cfg.nbv.const_variance, cfg.nbv.stride)?;
    let candidates = source.candidates();
    let grid = object_sdf(&scene, object)?;
    let response = ResponseCurve::gamma(cfg.response_gamma);
    let planner = Planner {
        scene: &scene,
        object,
        grid: &grid,
        settings: cfg.prediction,
        response: &response,
        options: cfg.nbv,
    };
    let initial = scene.objects[object].world_from_object.inverse();
    let traj = active_loop(
        &planner,
        &candidates,
        &mut source,
        &initial,
        &cfg.stop,
        policy,
        &cfg.refine,
        None,
        cfg.seed,
    )?;
    create_dir(&cfg.out)?;
    let p = cfg.out.join("trajectory.jsonl");
    let mut f = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
    traj.write_jsonl(&mut f, true).map_err(|e| io_err(&p, e))?;
    f.flush().map_err(|e| io_err(&p, e))?;

    let p = cfg.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Format {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Format {
        path: p.clone(),
        reason: e.to_string(),
    };
    w.write_record(["step", "view_id", "points", "entropy", "trans_err", "rot_err"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for s in &traj.steps {
        w.write_record([
            s.step.to_string(),
            s.view_id.to_string(),
            s.points.to_string(),
            format!("{:.6}", s.belief.entropy_nats),
            opt(s.trans_err),
            opt(s.rot_err),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(&p, e))?;
    println!(
        "{} views planned, trajectory written to {}",
        traj.steps.len(),
        cfg.out.display()
    );
    Ok(())
}

fn print_summaries(summaries: &[shinypose::harness::MethodSummary]) {
    for s in summaries {
        let rates: Vec<String> = s
            .rates
            .iter()
            .map(|r| r.iter().map(|v| format!("{v:.0}")).collect::<Vec<_>>().join("/"))
            .collect();
        println!(
            "{:<14} trials {:>3}  mean views {:.2}  rates by view {}",
            s.method,
            s.trials,
            s.mean_views_to_success,
            rates.join("  ")
        );
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = a.exp.config()?;
    if !a.policy.is_empty() {
        cfg.policies = a.policy.clone();
    }
    if !a.metric.is_empty() {
        cfg.metrics = a.metric.clone();
    }
    let report = run_experiment(&cfg)?;
    write_report(&report, &cfg.out)?;
    print_summaries(&report.summaries);
    println!("reports written to {}", cfg.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let metrics = if a.metric.is_empty() {
        vec![(5.0, 5.0), (2.0, 2.0)]
    } else {
        a.metric.clone()
    };
    let path = &a.summary;
    let bad = |reason: String| Error::Format {
        path: path.clone(),
        reason,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column '{name}'")))
    };
    let (c_method, c_excl, c_t, c_r) = (
        col("method")?,
        col("excluded")?,
        col("final_trans_err")?,
        col("final_rot_err")?,
    );
    // Methods in first-seen order.
    let mut errors: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if &rec[c_excl] == "true" {
            continue;
        }
        let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::INFINITY);
        let e = (parse(&rec[c_t]), parse(&rec[c_r]));
        let e = (
            if e.0.is_nan() { f64::INFINITY } else { e.0 },
            if e.1.is_nan() { f64::INFINITY } else { e.1 },
        );
        match errors.iter_mut().find(|(m, _)| m == &rec[c_method]) {
            Some((_, v)) => v.push(e),
            None => errors.push((rec[c_method].to_string(), vec![e])),
        }
    }
    if errors.is_empty() {
        return Err(bad("no included trials".into()));
    }
    for (method, errs) in &errors {
        for &(t, r) in &metrics {
            let m = DetectionMetric::from_errors(errs, t, r)?;
            let mut v = serde_json::to_value(m).expect("json");
            v["method"] = method.clone().into();
            println!("{v}");
        }
    }
    Ok(())
}
