//! `key = value` run configuration with `#` comments.
//!
//! Unknown or repeated keys are rejected; absent keys keep their defaults.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synth::SynthSpec;
use crate::trainer::TrainConfig;

/// Everything a command can be configured with.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Noise model and ranges; shape keys (`rows`, `frames`, `gamma`, `fs`)
    /// come from the shared keys when building [`RunConfig::synth_spec`].
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            rows: self.train.model.rows,
            frames: self.train.frames(),
            gamma: self.train.pc.gamma,
            fs: self.train.fs,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth_spec().validate()
    }
}

pub const KEYS: &[&str] = &[
    "lr",
    "batch",
    "epochs",
    "frames",
    "clip_step",
    "gamma",
    "rho",
    "seed",
    "fs",
    "band_low",
    "band_high",
    "cycle_nfft",
    "rows",
    "widths",
    "sab_reduction",
    "ae_channels",
    "ae_kernel",
    "pretrain_epochs",
    "pretrain_lr",
    "pretrain_batch",
    "synth_hr_min",
    "synth_hr_max",
    "synth_amp_min",
    "synth_amp_max",
    "synth_dc_min",
    "synth_dc_max",
    "synth_drift",
    "synth_spike_rate",
    "synth_spike_amp",
    "synth_noise_sigma",
    "synth_flicker",
    "synth_jitter",
];

fn value<T: FromStr>(key: &str, raw: &str, path: &Path, line: usize) -> Result<T> {
    raw.parse::<T>().map_err(|_| {
        Error::parse(
            path,
            line,
            format!("`{key}` expects {}, got `{raw}`", std::any::type_name::<T>()),
        )
    })
}

fn list<T: FromStr>(key: &str, raw: &str, path: &Path, line: usize) -> Result<Vec<T>> {
    raw.split(',').map(|v| value(key, v.trim(), path, line)).collect()
}

/// Applies one `key = value` pair.
pub fn apply(cfg: &mut RunConfig, key: &str, raw: &str, path: &Path, line: usize) -> Result<()> {
    let t = &mut cfg.train;
    let s = &mut cfg.synth;
    match key {
        "lr" => t.lr = value(key, raw, path, line)?,
        "batch" => t.batch = value(key, raw, path, line)?,
        "epochs" => t.epochs = value(key, raw, path, line)?,
        "frames" => t.model.frames = value(key, raw, path, line)?,
        "clip_step" => t.clip_step = value(key, raw, path, line)?,
        "gamma" => t.pc.gamma = value(key, raw, path, line)?,
        "rho" => t.pc.rho = value(key, raw, path, line)?,
        "seed" => t.seed = value(key, raw, path, line)?,
        "fs" => t.fs = value(key, raw, path, line)?,
        "band_low" => t.cycle.band.0 = value(key, raw, path, line)?,
        "band_high" => t.cycle.band.1 = value(key, raw, path, line)?,
        "cycle_nfft" => t.cycle.nfft = value(key, raw, path, line)?,
        "rows" => t.model.rows = value(key, raw, path, line)?,
        "widths" => t.model.widths = list(key, raw, path, line)?,
        "sab_reduction" => t.model.sab_reduction = value(key, raw, path, line)?,
        "ae_channels" => {
            let v: Vec<usize> = list(key, raw, path, line)?;
            t.model.ae_channels = v
                .try_into()
                .map_err(|_| Error::parse(path, line, "`ae_channels` expects three integers"))?;
        }
        "ae_kernel" => t.model.ae_kernel = value(key, raw, path, line)?,
        "pretrain_epochs" => t.pretrain.epochs = value(key, raw, path, line)?,
        "pretrain_lr" => t.pretrain.lr = value(key, raw, path, line)?,
        "pretrain_batch" => t.pretrain.batch = value(key, raw, path, line)?,
        "synth_hr_min" => s.hr_range.0 = value(key, raw, path, line)?,
        "synth_hr_max" => s.hr_range.1 = value(key, raw, path, line)?,
        "synth_amp_min" => s.amp_range.0 = value(key, raw, path, line)?,
        "synth_amp_max" => s.amp_range.1 = value(key, raw, path, line)?,
        "synth_dc_min" => s.dc_range.0 = value(key, raw, path, line)?,
        "synth_dc_max" => s.dc_range.1 = value(key, raw, path, line)?,
        "synth_drift" => s.drift = value(key, raw, path, line)?,
        "synth_spike_rate" => s.spike_rate = value(key, raw, path, line)?,
        "synth_spike_amp" => s.spike_amp = value(key, raw, path, line)?,
        "synth_noise_sigma" => s.noise_sigma = value(key, raw, path, line)?,
        "synth_flicker" => s.flicker = value(key, raw, path, line)?,
        "synth_jitter" => s.jitter = value(key, raw, path, line)?,
        other => return Err(Error::parse(path, line, format!("unknown key `{other}`"))),
    }
    Ok(())
}

/// Parses `text` over the defaults. Values are not range-checked here; call
/// [`RunConfig::validate`] after applying overrides.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, val) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        if seen.contains(&key) {
            return Err(Error::parse(path, i + 1, format!("duplicate key `{key}`")));
        }
        seen.push(key);
        apply(&mut cfg, key, val.trim(), path, i + 1)?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = parse_config(&text, path)?;
    cfg.validate()?;
    Ok(cfg)
}
