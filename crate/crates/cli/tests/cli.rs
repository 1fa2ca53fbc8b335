use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use shinypose::calib::ResponseCurve;
use shinypose::io::write_png8;
use shinypose::uncertainty::IntensityImage;

fn shinypose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shinypose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_BENCH: &str = r#"
trials = 2
kind = "cube"
preset = "matte"
policies = ["random", "nbv"]

[stop]
entropy_threshold = -inf
max_views = 2

[noise]
depth_noise = false

[perturbation]
max_translation = 0.0
max_rotation_deg = 0.0

[candidates]
count = 12
"#;

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&shinypose(&[])), 1);
    assert_eq!(code(&shinypose(&["bench", "--policy", "psychic"])), 1);
    assert_eq!(code(&shinypose(&["eval", "x.csv", "--metric", "5"])), 1);
    assert_eq!(code(&shinypose(&["simulate", "--kind", "teapot"])), 1);
}

#[test]
fn help_exits_with_zero() {
    let out = shinypose(&["--help"]);
    assert_eq!(code(&out), 0);
    for sub in [
        "simulate",
        "calibrate-response",
        "fit-bsdf",
        "refine",
        "nbv",
        "bench",
        "eval",
    ] {
        assert!(stdout(&out).contains(sub), "help lists {sub}");
    }
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(code(&shinypose(&["eval", p(&missing)])), 2);
    let cfg = dir.path().join("nope.toml");
    assert_eq!(code(&shinypose(&["bench", "--config", p(&cfg)])), 2);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "trials = 0\n").unwrap();
    assert_eq!(code(&shinypose(&["bench", "--config", p(&cfg)])), 1);
    fs::write(&cfg, "colour = 3\n").unwrap();
    assert_eq!(code(&shinypose(&["bench", "--config", p(&cfg)])), 1);
}

#[test]
fn eval_counts_rates_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("summary.csv");
    fs::write(
        &csv,
        "trial,seed,method,visibility,excluded,views,final_trans_err,final_rot_err,error\n\
         0,1,nbv,1.0,false,1,1.0,1.0,\n\
         1,2,nbv,1.0,false,1,3.0,1.0,\n\
         2,3,nbv,0.5,true,1,99.0,99.0,\n\
         0,1,random,1.0,false,1,10.0,0.0,\n\
         1,2,random,1.0,false,1,NaN,NaN,failed\n",
    )
    .unwrap();
    let out = shinypose(&["eval", p(&csv), "--metric", "5,5", "--metric", "2,2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let rate = |m: &str, t: f64| {
        rows.iter()
            .find(|r| r["method"] == m && r["trans_thresh"] == t)
            .map(|r| (r["rate"].as_f64().unwrap(), r["total"].as_u64().unwrap()))
            .unwrap()
    };
    assert_eq!(rate("nbv", 5.0), (100.0, 2));
    assert_eq!(rate("nbv", 2.0), (50.0, 2));
    assert_eq!(rate("random", 5.0), (0.0, 2));
}

#[test]
fn bench_reruns_are_byte_identical_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    fs::write(&cfg, SMALL_BENCH).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = shinypose(&["bench", "--config", p(&cfg), "--seed", "7", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["summary.csv", "plot.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2);
    assert_eq!(
        fs::read_to_string(a.join("trajectory.jsonl")).unwrap().lines().count(),
        2 * 2 * 2
    );

    let o = shinypose(&["eval", p(&a.join("summary.csv")), "--metric", "5,5"]);
    assert_eq!(code(&o), 0);
    for line in stdout(&o).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["rate"], 100.0, "unperturbed clean trials all succeed");
    }
}

#[test]
fn nbv_runs_one_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    fs::write(&cfg, SMALL_BENCH).unwrap();
    let out = dir.path().join("nbv");
    let o = shinypose(&["nbv", "--config", p(&cfg), "--policy", "max-distance", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.contains(",max-distance,")));
    let first: serde_json::Value = serde_json::from_str(
        fs::read_to_string(out.join("trajectory.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    for key in ["view_id", "entropy", "wall_time_s"] {
        assert!(!first[key].is_null(), "trajectory has {key}: {first}");
    }
}

#[test]
fn simulate_then_refine_recovers_the_pose() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let o = shinypose(&[
        "simulate",
        "--kind",
        "l-bracket",
        "--preset",
        "matte",
        "--seed",
        "3",
        "--clean",
        "--out",
        p(&sim),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "scene.toml",
        "radiance.pfm",
        "image.png",
        "depth.pfm",
        "variance.pfm",
        "camera.json",
        "views.json",
        "truth.json",
    ] {
        assert!(sim.join(f).exists(), "simulate wrote {f}");
    }
    let out = dir.path().join("refined");
    let o = shinypose(&[
        "refine",
        "--scene",
        p(&sim.join("scene.toml")),
        "--depth",
        p(&sim.join("depth.pfm")),
        "--variance",
        p(&sim.join("variance.pfm")),
        "--truth",
        p(&sim.join("truth.json")),
        "--perturb-mm",
        "5",
        "--perturb-deg",
        "5",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert!(r["trans_err"].as_f64().unwrap() < 1.0, "{r}");
    assert!(r["rot_err"].as_f64().unwrap() < 1.0, "{r}");
    assert_eq!(r["covariance"].as_array().unwrap().len(), 36);
}

#[test]
fn calibrate_response_writes_a_curve() {
    let dir = tempfile::tempdir().unwrap();
    let truth = ResponseCurve::gamma(2.2);
    let exposures = [0.25, 0.5, 1.0, 2.0, 4.0];
    let mut args = vec!["calibrate-response".to_string(), "--images".into()];
    for (k, t) in exposures.iter().enumerate() {
        let img = IntensityImage::from_fn(32, 32, |x, y| {
            let e = 0.02 + 0.9 * (x + 32 * y) as f64 / 1024.0;
            truth.apply(e * t)
        });
        let path = dir.path().join(format!("im{k}.png"));
        write_png8(&path, &img).unwrap();
        args.push(path.to_str().unwrap().into());
    }
    let csv = dir.path().join("times.csv");
    let rows: String = exposures
        .iter()
        .enumerate()
        .map(|(k, t)| format!("im{k}.png,{t}\n"))
        .collect();
    fs::write(&csv, format!("image,exposure\n{rows}")).unwrap();
    let out = dir.path().join("curve").join("response.json");
    args.extend(["--exposures".into(), p(&csv).into(), "--out".into(), p(&out).into()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = shinypose(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let curve = ResponseCurve::from_json(&v).unwrap();
    // ln X is increasing over the well-exposed range.
    assert!((20..235).all(|l| curve.log_exposure(l + 1) > curve.log_exposure(l)));

    // Exposure count mismatch is a usage error.
    fs::write(&csv, "1.0\n2.0\n").unwrap();
    assert_eq!(code(&shinypose(&args)), 1);
}

#[test]
fn fit_bsdf_writes_report_and_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let o = shinypose(&[
        "simulate",
        "--kind",
        "cube",
        "--preset",
        "satin",
        "--clean",
        "--out",
        p(&sim),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("fit");
    let o = shinypose(&[
        "fit-bsdf",
        "--scene",
        p(&sim.join("scene.toml")),
        "--target",
        p(&sim.join("radiance.pfm")),
        "--epochs",
        "3",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("fit_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"], 3);
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,loss"));
    assert_eq!(
        loss.lines().count(),
        1 + report["loss_history"].as_array().unwrap().len()
    );

    let o = shinypose(&[
        "fit-bsdf",
        "--scene",
        p(&sim.join("scene.toml")),
        "--target",
        p(&sim.join("radiance.pfm")),
        "--init",
        "0.5,2",
    ]);
    assert_eq!(code(&o), 1);
}
