use std::path::{Path, PathBuf};

use drnet::autodiff::{weights, Tensor};
use drnet::baselines::Method;
use drnet::config::{load_config, RunConfig};
use drnet::dsp::{self, BvpSignal};
use drnet::maps::{self, magnify, ChannelOrder, PixelMap};
use drnet::metrics::{compute_metrics, write_metrics_csv};
use drnet::models::{pretrain_autoencoder, Drnet, FROZEN_PREFIX_DS, FROZEN_PREFIX_ES};
use drnet::patch_crop::patch_crop;
use drnet::roi::{self, FrameSequence, LandmarkTrack, Resolution};
use drnet::synth::{self, SynthSpec};
use drnet::trainer::{self, aggregate_by_source, format_predictions, ClipPrediction, ClipRecord};
use drnet::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::provenance::RunRecord;
use crate::{Cli, Command, Common};

pub fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(jobs) = c.jobs {
        if jobs == 0 {
            return Err(Error::InvalidArgument("--jobs must be at least 1".to_string()));
        }
        // Fails only if a pool already exists, which keeps the earlier setting.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let cfg = resolve_config(c)?;
    mkdir(&c.out)?;
    match &cli.command {
        Command::Synth { clips, noise_free } => cmd_synth(&cfg, &c.out, *clips, *noise_free),
        Command::Stmap {
            trace,
            video,
            landmarks,
            yuv,
            keep_features,
        } => match (trace, video, landmarks) {
            (Some(t), _, _) => cmd_stmap_trace(&cfg, &c.out, t),
            (None, Some(v), Some(l)) => cmd_stmap_video(&cfg, &c.out, v, l, *yuv, *keep_features),
            _ => Err(Error::InvalidArgument(
                "stmap needs --trace or --video with --landmarks".to_string(),
            )),
        },
        Command::Augment { trace, enlarged } => cmd_augment(&cfg, &c.out, trace, enlarged),
        Command::PretrainAe { data } => cmd_pretrain(&cfg, &c.out, data),
        Command::Train {
            data,
            ae_weights,
            checkpoint_dir,
        } => cmd_train(&cfg, &c.out, data, ae_weights.as_deref(), checkpoint_dir.as_deref()),
        Command::Eval { data, weights } => cmd_eval(&cfg, &c.out, data, weights),
        Command::Baseline { data, method } => cmd_baseline(&cfg, &c.out, data, method.parse()?),
        Command::Psd {
            bvp,
            trace,
            method,
            nfft,
        } => cmd_psd(&cfg, &c.out, bvp.as_deref(), trace.as_deref(), method.as_deref(), *nfft),
    }
}

/// Config file (or defaults) with command-line overrides applied, validated.
pub fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = c.rho {
        cfg.train.pc.rho = r;
    }
    if let Some(g) = c.gamma {
        cfg.train.pc.gamma = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_synth(cfg: &RunConfig, out: &Path, clips: usize, noise_free: bool) -> Result<()> {
    let spec = if noise_free {
        SynthSpec {
            drift: 0.0,
            spike_rate: 0.0,
            spike_amp: 0.0,
            noise_sigma: 0.0,
            flicker: 0.0,
            ..cfg.synth_spec()
        }
    } else {
        cfg.synth_spec()
    };
    let entries = synth::gen_dataset(out, clips, &spec, cfg.train.seed)?;
    RunRecord::new("synth", cfg)
        .input("clips", entries.len())
        .input("noise_free", noise_free)
        .write(out)
}

fn cmd_stmap_trace(cfg: &RunConfig, out: &Path, trace: &Path) -> Result<()> {
    let pm = maps::load_trace(trace)?;
    maps::write_stmap(&magnify(&pm), &out.join("stmap.csv"))?;
    RunRecord::new("stmap", cfg).input("trace", display(trace)).write(out)
}

fn cmd_stmap_video(
    cfg: &RunConfig,
    out: &Path,
    video: &Path,
    landmarks: &Path,
    yuv: bool,
    keep_features: bool,
) -> Result<()> {
    let frames = FrameSequence::load(video)?;
    let track = LandmarkTrack::load(landmarks, frames.fps)?;
    let def = roi::build_roi_definition(&track, cfg.train.model.rows, cfg.train.pc.gamma, !keep_features)?;
    let order = if yuv { ChannelOrder::Yuv } else { ChannelOrder::Rgb };
    let pm = roi::compute_pixelmap(&frames, &def, Resolution::Base, order)?;
    let pm_e = roi::compute_pixelmap(&frames, &def, Resolution::Enlarged, order)?;
    maps::write_trace(&pm, &out.join("trace.csv"))?;
    maps::write_trace(&pm_e, &out.join("enlarged.csv"))?;
    maps::write_stmap(&magnify(&pm), &out.join("stmap.csv"))?;
    RunRecord::new("stmap", cfg)
        .input("video", display(video))
        .input("landmarks", display(landmarks))
        .input("yuv", yuv)
        .input("keep_features", keep_features)
        .write(out)
}

fn cmd_augment(cfg: &RunConfig, out: &Path, trace: &Path, enlarged: &Path) -> Result<()> {
    let pm = maps::load_trace(trace)?;
    let pm_e = maps::load_trace(enlarged)?;
    let g = cfg.train.pc.gamma;
    if pm_e.rows() != pm.rows() * g * g {
        return Err(Error::InvalidArgument(format!(
            "enlarged map has {} rows, expected {} x {g}^2",
            pm_e.rows(),
            pm.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let m = patch_crop(&magnify(&pm), &magnify(&pm_e), cfg.train.pc.rho, &mut rng)?;
    maps::write_stmap(&m, &out.join("stmap.csv"))?;
    RunRecord::new("augment", cfg)
        .input("trace", display(trace))
        .input("enlarged", display(enlarged))
        .write(out)
}

fn load_windows(cfg: &RunConfig, data: &Path, step: usize) -> Result<Vec<ClipRecord>> {
    let clips = trainer::load_dataset(data, cfg.train.frames(), step)?;
    if let Some(c) = clips.iter().find(|c| (c.pm.fs - cfg.train.fs).abs() > 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "clip {} is sampled at {} Hz, configuration expects fs={}",
            c.id, c.pm.fs, cfg.train.fs
        )));
    }
    Ok(clips)
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path, data: &Path) -> Result<()> {
    let clips = load_windows(cfg, data, cfg.train.clip_step)?;
    let signals: Vec<Vec<f64>> = clips.iter().map(|c| c.s_gt.standardized()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut net = Drnet::new(cfg.train.model.clone(), &mut rng)?;
    let losses = pretrain_autoencoder(&net.gp.ae, &mut net.store, &signals, cfg.train.pretrain, &mut rng)?;
    let ae: Vec<(String, Tensor)> = weights::snapshot(&net.store)
        .into_iter()
        .filter(|(n, _)| n.starts_with(FROZEN_PREFIX_ES) || n.starts_with(FROZEN_PREFIX_DS))
        .collect();
    weights::save_tensors(&ae, &out.join("ae.drnw"))?;
    let mut log = String::from("epoch,mse\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{},{l}\n", i + 1));
    }
    write_text(&out.join("ae_log.csv"), &log)?;
    RunRecord::new("pretrain-ae", cfg)
        .input("data", display(data))
        .input("windows", clips.len())
        .write(out)
}

fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    data: &Path,
    ae_weights: Option<&Path>,
    checkpoint_dir: Option<&Path>,
) -> Result<()> {
    let clips = load_windows(cfg, data, cfg.train.clip_step)?;
    let ae = ae_weights.map(weights::read).transpose()?;
    let ckpt: PathBuf = checkpoint_dir.map_or_else(|| out.join("checkpoints"), Path::to_path_buf);
    let outcome = trainer::train(&cfg.train, &clips, ae.as_deref(), Some(&ckpt))?;
    write_text(&out.join("log.csv"), &trainer::format_log(&outcome.log))?;
    weights::save(&outcome.net.store, &out.join("weights.drnw"))?;
    let mut rec = RunRecord::new("train", cfg)
        .input("data", display(data))
        .input("windows", clips.len())
        .input("checkpoint_dir", display(&ckpt));
    if let Some(p) = ae_weights {
        rec = rec.input("ae_weights", display(p));
    }
    rec.write(out)
}

fn cmd_eval(cfg: &RunConfig, out: &Path, data: &Path, weights_path: &Path) -> Result<()> {
    let clips = load_windows(cfg, data, cfg.train.frames())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut net = Drnet::new(cfg.train.model.clone(), &mut rng)?;
    weights::load_into(&mut net.store, &weights::read(weights_path)?, true)?;
    let ev = trainer::evaluate(&net, &clips, cfg.train.fs)?;
    write_metrics_csv(&out.join("metrics.csv"), &[("drnet".to_string(), ev.metrics)])?;
    write_text(&out.join("predictions.csv"), &format_predictions(&ev.clips))?;
    RunRecord::new("eval", cfg)
        .input("data", display(data))
        .input("weights", display(weights_path))
        .write(out)
}

/// Clip-level baseline predictions from non-overlapping windows.
pub fn baseline_predictions(method: Method, clips: &[ClipRecord]) -> Result<Vec<ClipPrediction>> {
    clips
        .par_iter()
        .map(|c| {
            let sig = method.run(&c.pm)?;
            Ok(ClipPrediction {
                id: c.id.clone(),
                source: c.source.clone(),
                hr_pred: dsp::estimate_hr(&sig, dsp::HR_BAND, dsp::DEFAULT_NFFT)?,
                hr_gt: c.hr_gt,
            })
        })
        .collect()
}

fn cmd_baseline(cfg: &RunConfig, out: &Path, data: &Path, method: Method) -> Result<()> {
    let clips = load_windows(cfg, data, cfg.train.frames())?;
    let per_clip = baseline_predictions(method, &clips)?;
    let sources = aggregate_by_source(&per_clip);
    let pred: Vec<f64> = sources.iter().map(|s| s.hr_pred).collect();
    let gt: Vec<f64> = sources.iter().map(|s| s.hr_gt).collect();
    let metrics = compute_metrics(&pred, &gt)?;
    write_metrics_csv(&out.join("metrics.csv"), &[(method.name().to_string(), metrics)])?;
    write_text(&out.join("predictions.csv"), &format_predictions(&per_clip))?;
    RunRecord::new("baseline", cfg)
        .input("data", display(data))
        .input("method", method.name())
        .write(out)
}

fn cmd_psd(
    cfg: &RunConfig,
    out: &Path,
    bvp: Option<&Path>,
    trace: Option<&Path>,
    method: Option<&str>,
    nfft: usize,
) -> Result<()> {
    let (sig, rec): (BvpSignal, RunRecord) = match (bvp, trace, method) {
        (Some(b), _, _) => (dsp::load_bvp(b)?, RunRecord::new("psd", cfg).input("bvp", display(b))),
        (None, Some(t), Some(m)) => {
            let pm: PixelMap = maps::load_trace(t)?;
            let method: Method = m.parse()?;
            (
                method.run(&pm)?,
                RunRecord::new("psd", cfg)
                    .input("trace", display(t))
                    .input("method", method.name()),
            )
        }
        _ => {
            return Err(Error::InvalidArgument(
                "psd needs --bvp or --trace with --method".to_string(),
            ))
        }
    };
    let nfft = nfft.max(sig.len().next_power_of_two());
    let spec = dsp::psd(&sig, nfft)?;
    let mut text = String::from("freq_hz,power\n");
    for (f, p) in spec.freqs.iter().zip(&spec.power) {
        text.push_str(&format!("{f},{p}\n"));
    }
    write_text(&out.join("psd.csv"), &text)?;
    rec.input("nfft", nfft).write(out)
}
