use std::path::Path;
use std::process::{Command, Output};

use drnet::autodiff::{weights, Tensor};
use drnet::maps::{self, load_stmap, magnify};
use drnet::roi::{FrameSequence, LANDMARKS};

const TOY: &str = "\
# toy sizes
rows = 4
frames = 128
widths = 4,4
ae_channels = 4,4,4
batch = 4
lr = 1e-3
pretrain_epochs = 2
";

fn drnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = drnet(args, cwd);
    assert!(
        out.status.success(),
        "drnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("toy.cfg"), TOY).unwrap();
    ok(
        &[
            "synth", "--clips", "6", "--seed", "3", "--out", "d", "--config", "toy.cfg",
        ],
        dir.path(),
    );
    dir
}

fn mae(metrics_csv: &Path) -> f64 {
    let text = std::fs::read_to_string(metrics_csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    row[3].parse().unwrap()
}

#[test]
fn chrom_on_noise_free_synthetic_data_is_accurate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        &["synth", "--clips", "10", "--seed", "7", "--out", "d/", "--noise-free"],
        p,
    );
    assert!(p.join("d/manifest.csv").is_file());
    ok(&["baseline", "--method", "chrom", "--data", "d/", "--out", "r/"], p);
    let text = std::fs::read_to_string(p.join("r/metrics.csv")).unwrap();
    assert!(
        text.starts_with("method,count,std,mae,rmse,mer_pct,r\nchrom,10,"),
        "{text}"
    );
    assert!(mae(&p.join("r/metrics.csv")) < 1.0);
    assert!(p.join("r/predictions.csv").is_file());
    assert!(p.join("r/run.json").is_file());
}

#[test]
fn one_epoch_of_training_logs_one_row_and_checkpoints() {
    let dir = toy_dir();
    let p = dir.path();
    ok(
        &[
            "train", "--data", "d", "--epochs", "1", "--out", "t", "--config", "toy.cfg",
        ],
        p,
    );
    let log = std::fs::read_to_string(p.join("t/log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2, "{log}");
    assert_eq!(lines[0], "epoch,loss_total,loss_phy,loss_cyc");
    assert!(lines[1].starts_with("1,"));
    assert!(p.join("t/checkpoints/epoch001.drnw").is_file());
    assert!(p.join("t/weights.drnw").is_file());

    ok(
        &[
            "eval",
            "--data",
            "d",
            "--weights",
            "t/weights.drnw",
            "--out",
            "e",
            "--config",
            "toy.cfg",
        ],
        p,
    );
    let m = std::fs::read_to_string(p.join("e/metrics.csv")).unwrap();
    assert!(m.lines().nth(1).unwrap().starts_with("drnet,6,"), "{m}");
    let preds = std::fs::read_to_string(p.join("e/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 7);
}

#[test]
fn pretrained_autoencoder_weights_feed_training() {
    let dir = toy_dir();
    let p = dir.path();
    ok(&["pretrain-ae", "--data", "d", "--out", "a", "--config", "toy.cfg"], p);
    assert_eq!(
        std::fs::read_to_string(p.join("a/ae_log.csv")).unwrap().lines().count(),
        3
    );
    ok(
        &[
            "train",
            "--data",
            "d",
            "--epochs",
            "1",
            "--ae-weights",
            "a/ae.drnw",
            "--out",
            "t",
            "--config",
            "toy.cfg",
        ],
        p,
    );
    // Full checkpoints carry the autoencoder too.
    ok(
        &[
            "train",
            "--data",
            "d",
            "--epochs",
            "1",
            "--ae-weights",
            "t/checkpoints/epoch001.drnw",
            "--out",
            "t2",
            "--config",
            "toy.cfg",
        ],
        p,
    );
    let stray = vec![("ep.head.conv.w".to_string(), Tensor::new(&[1], vec![0.0]).unwrap())];
    weights::save_tensors(&stray, &p.join("stray.drnw")).unwrap();
    let bad = drnet(
        &[
            "train",
            "--data",
            "d",
            "--epochs",
            "1",
            "--ae-weights",
            "stray.drnw",
            "--out",
            "t3",
            "--config",
            "toy.cfg",
        ],
        p,
    );
    assert_eq!(bad.status.code(), Some(1), "{}", stderr(&bad));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = toy_dir();
    let p = dir.path();
    for out in ["t1", "t2"] {
        ok(
            &[
                "train", "--data", "d", "--epochs", "2", "--out", out, "--config", "toy.cfg",
            ],
            p,
        );
        let w = format!("{out}/weights.drnw");
        let e = format!("{out}/eval");
        ok(
            &[
                "eval",
                "--data",
                "d",
                "--weights",
                &w,
                "--out",
                &e,
                "--config",
                "toy.cfg",
            ],
            p,
        );
        let b = format!("{out}/base");
        ok(
            &[
                "baseline", "--method", "pos", "--data", "d", "--out", &b, "--config", "toy.cfg",
            ],
            p,
        );
    }
    for f in [
        "log.csv",
        "weights.drnw",
        "eval/metrics.csv",
        "eval/predictions.csv",
        "base/metrics.csv",
    ] {
        let a = std::fs::read(p.join("t1").join(f)).unwrap();
        let b = std::fs::read(p.join("t2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
}

#[test]
fn missing_manifest_exits_two_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = drnet(
        &["baseline", "--method", "green", "--data", "absent", "--out", "r"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent/manifest.csv"), "{}", stderr(&out));
}

#[test]
fn missing_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = drnet(&["synth", "--config", "none.cfg", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("none.cfg"));
}

#[test]
fn out_of_range_rho_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.cfg"), "rho = 2\n").unwrap();
    let from_file = drnet(&["synth", "--config", "bad.cfg", "--out", "d"], p);
    assert_eq!(from_file.status.code(), Some(1));
    assert!(stderr(&from_file).contains("rho"));
    let from_flag = drnet(&["synth", "--rho", "2", "--out", "d"], p);
    assert_eq!(from_flag.status.code(), Some(1));
}

#[test]
fn config_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.cfg"), "# comment\nlr = 1e-3\nbatch = many\n").unwrap();
    let out = drnet(&["synth", "--config", "bad.cfg", "--out", "d"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad.cfg:3"), "{}", stderr(&out));
    assert!(stderr(&out).contains("batch"));
    std::fs::write(p.join("bad.cfg"), "learning_rate = 1\n").unwrap();
    let out = drnet(&["synth", "--config", "bad.cfg", "--out", "d"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rate"));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(drnet(&["synth", "--unknown-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(drnet(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(drnet(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(drnet(&["--version"], dir.path()).status.code(), Some(0));
    let bad = drnet(&["baseline", "--method", "ica", "--data", "d"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn stmap_and_augment_emit_expected_maps() {
    let dir = toy_dir();
    let p = dir.path();
    let trace = "d/clips/clip0000.trace.csv";
    let enlarged = "d/clips/clip0000.enlarged.csv";
    ok(&["stmap", "--trace", trace, "--out", "s"], p);
    let m = load_stmap(&p.join("s/stmap.csv")).unwrap();
    let pm = maps::load_trace(&p.join(trace)).unwrap();
    assert_eq!(m, magnify(&pm));

    ok(
        &[
            "augment",
            "--trace",
            trace,
            "--enlarged",
            enlarged,
            "--rho",
            "0",
            "--out",
            "a0",
        ],
        p,
    );
    assert_eq!(load_stmap(&p.join("a0/stmap.csv")).unwrap(), m);

    ok(
        &[
            "augment",
            "--trace",
            trace,
            "--enlarged",
            enlarged,
            "--rho",
            "1",
            "--out",
            "a1",
        ],
        p,
    );
    let cropped = load_stmap(&p.join("a1/stmap.csv")).unwrap();
    assert_eq!(cropped.shape(), m.shape());
    let m_e = magnify(&maps::load_trace(&p.join(enlarged)).unwrap());
    let found = (0..=m_e.rows() - m.rows()).any(|y| m_e.row_band(y, m.rows()).unwrap() == cropped);
    assert!(found, "cropped map is not a contiguous band of the enlarged map");

    let wrong = drnet(
        &[
            "augment",
            "--trace",
            trace,
            "--enlarged",
            enlarged,
            "--gamma",
            "3",
            "--out",
            "a3",
        ],
        p,
    );
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn psd_peaks_at_the_reference_rate() {
    let dir = toy_dir();
    let p = dir.path();
    ok(&["psd", "--bvp", "d/clips/clip0001.bvp.csv", "--out", "q"], p);
    let text = std::fs::read_to_string(p.join("q/psd.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("freq_hz,power"));
    let (f_peak, _) = lines
        .map(|l| {
            let (f, v) = l.split_once(',').unwrap();
            (f.parse::<f64>().unwrap(), v.parse::<f64>().unwrap())
        })
        .filter(|(f, _)| (0.6..=3.0).contains(f))
        .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    let manifest = std::fs::read_to_string(p.join("d/manifest.csv")).unwrap();
    let hr: f64 = manifest
        .lines()
        .nth(2)
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((f_peak * 60.0 - hr).abs() < 3.0, "peak {} bpm vs {hr}", f_peak * 60.0);

    ok(
        &[
            "psd",
            "--trace",
            "d/clips/clip0001.trace.csv",
            "--method",
            "pos",
            "--out",
            "q2",
        ],
        p,
    );
    assert!(p.join("q2/psd.csv").is_file());
}

#[test]
fn stmap_from_video_and_landmarks() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let (w, h, frames) = (40usize, 40usize, 12usize);
    let mut pixels = Vec::with_capacity(w * h * 3 * frames);
    for t in 0..frames {
        for y in 0..h {
            for x in 0..w {
                pixels.extend_from_slice(&[(x * 5) as u8, (y * 5) as u8, (t * 7) as u8]);
            }
        }
    }
    FrameSequence::new(w, h, 30.0, pixels)
        .unwrap()
        .save(&p.join("v.rvf"))
        .unwrap();
    // Landmarks on a lattice spanning [5, 35] in both axes.
    let mut line = Vec::with_capacity(2 * LANDMARKS);
    for k in 0..LANDMARKS {
        line.push(format!("{}", 5.0 + 30.0 * (k % 17) as f64 / 16.0));
        line.push(format!("{}", 5.0 + 30.0 * (k / 17) as f64 / 3.0));
    }
    let row = line.join(",");
    std::fs::write(p.join("lm.csv"), vec![row; frames].join("\n")).unwrap();
    std::fs::write(p.join("toy.cfg"), "rows = 4\nframes = 128\n").unwrap();
    ok(
        &[
            "stmap",
            "--video",
            "v.rvf",
            "--landmarks",
            "lm.csv",
            "--keep-features",
            "--out",
            "s",
            "--config",
            "toy.cfg",
        ],
        p,
    );
    let pm = maps::load_trace(&p.join("s/trace.csv")).unwrap();
    let pm_e = maps::load_trace(&p.join("s/enlarged.csv")).unwrap();
    assert_eq!(pm.shape(), [3, 4, frames]);
    assert_eq!(pm_e.shape(), [3, 16, frames]);
    assert!(pm.data().iter().all(|v| v.is_finite()));
    assert_eq!(load_stmap(&p.join("s/stmap.csv")).unwrap(), magnify(&pm));
    // Blue channel is the frame index ramp.
    assert!((pm.get(2, 0, 3) - 21.0).abs() < 1e-9);
}
