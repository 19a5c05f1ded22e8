//! Pairwise decomposition/reconstruction training and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{weights, AdamState, Tape, Tensor, Var};
use crate::dsp::{self, BvpSignal};
use crate::error::{Error, Result};
use crate::losses::{loss_phy, loss_total, CycleLoss, CycleLossConfig, PEARSON_EPS};
use crate::maps::{self, magnify, PixelMap, StMap, CHANNELS};
use crate::metrics::{compute_metrics, MetricReport};
use crate::models::{
    apply_bn_updates, pretrain_autoencoder, Drnet, Mode, ModelConfig, Pass, PretrainConfig, FROZEN_PREFIX_DS,
    FROZEN_PREFIX_ES,
};
use crate::patch_crop::{patch_crop, PcConfig};
use crate::synth;

pub const LOG_HEADER: &str = "epoch,loss_total,loss_phy,loss_cyc";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Clips per optimisation step (two per pair).
    pub batch: usize,
    pub epochs: usize,
    pub clip_step: usize,
    pub pc: PcConfig,
    pub seed: u64,
    pub fs: f64,
    pub cycle: CycleLossConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 32,
            epochs: 40,
            clip_step: 10,
            pc: PcConfig::default(),
            seed: 0,
            fs: 30.0,
            cycle: CycleLossConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Clip length in frames.
    pub fn frames(&self) -> usize {
        self.model.frames
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch < 2 || !self.batch.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "batch must be an even number >= 2, got {}",
                self.batch
            )));
        }
        if self.epochs == 0 || self.clip_step == 0 {
            return Err(Error::invalid("epochs and clip_step must be positive".to_string()));
        }
        if !(self.fs > 0.0) {
            return Err(Error::invalid("fs must be positive".to_string()));
        }
        self.pc.validate()?;
        self.model.validate()?;
        CycleLoss::new(self.cycle, self.fs, self.frames())?;
        Ok(())
    }
}

/// One training/evaluation window.
#[derive(Clone, Debug)]
pub struct ClipRecord {
    pub id: String,
    pub source: String,
    pub pm: PixelMap,
    pub pm_e: Option<PixelMap>,
    /// Bandpassed reference pulse at the map's frame rate.
    pub s_gt: BvpSignal,
    pub hr_gt: f64,
}

/// Cuts a recording into windows `[k·step, k·step + frames)`.
///
/// The reference pulse is resampled to the map's rate when needed and
/// bandpassed once over the whole stream; each window's reference heart rate
/// is the spectral peak of its pulse.
pub fn make_clips(
    source: &str,
    pm: &PixelMap,
    pm_e: Option<&PixelMap>,
    bvp: &BvpSignal,
    frames: usize,
    step: usize,
) -> Result<Vec<ClipRecord>> {
    if step == 0 || frames == 0 {
        return Err(Error::invalid("window length and step must be positive".to_string()));
    }
    if pm.frames() < frames {
        return Err(Error::invalid(format!(
            "{source}: {} frames, shorter than one {frames}-frame window",
            pm.frames()
        )));
    }
    if let Some(e) = pm_e {
        if e.frames() != pm.frames() {
            return Err(Error::shape(format!("{source}: enlarged map length differs")));
        }
    }
    let bvp = if (bvp.fs - pm.fs).abs() > 1e-9 {
        dsp::resample_cubic(bvp, pm.fs)?
    } else {
        bvp.clone()
    };
    if bvp.len() < pm.frames() {
        return Err(Error::shape(format!(
            "{source}: pulse covers {} frames, map {}",
            bvp.len(),
            pm.frames()
        )));
    }
    let filter = dsp::butter_bandpass(4, dsp::HR_BAND.0, dsp::HR_BAND.1, pm.fs)?;
    let filtered = dsp::filtfilt(&bvp.samples[..pm.frames()], &filter)?;
    let mut out = Vec::new();
    let mut start = 0;
    while start + frames <= pm.frames() {
        let s = BvpSignal::new(filtered[start..start + frames].to_vec(), pm.fs)?;
        let hr_gt = dsp::estimate_hr(&s, dsp::HR_BAND, dsp::DEFAULT_NFFT)?;
        out.push(ClipRecord {
            id: format!("{source}@{start}"),
            source: source.to_string(),
            pm: pm.time_window(start, frames)?,
            pm_e: pm_e.map(|e| e.time_window(start, frames)).transpose()?,
            s_gt: s.with_hr(hr_gt)?,
            hr_gt,
        });
        start += step;
    }
    Ok(out)
}

/// Loads every manifest entry under `dir` and cuts it into windows of
/// `frames` frames every `step` frames. Enlarged maps are used when present.
pub fn load_dataset(dir: &Path, frames: usize, step: usize) -> Result<Vec<ClipRecord>> {
    let entries = synth::load_manifest(&dir.join(synth::MANIFEST))?;
    let per_entry: Vec<Result<Vec<ClipRecord>>> = entries
        .par_iter()
        .map(|e| {
            let pm = maps::load_trace(&dir.join(&e.trace_path))?;
            let enlarged = dir.join(e.enlarged_path());
            let pm_e = if enlarged.is_file() {
                Some(maps::load_trace(&enlarged)?)
            } else {
                None
            };
            let bvp = dsp::load_bvp(&dir.join(&e.bvp_path))?;
            make_clips(&e.clip_id, &pm, pm_e.as_ref(), &bvp, frames, step)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_entry {
        out.extend(r?);
    }
    Ok(out)
}

/// Losses of one step or the mean over an epoch.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LossRecord {
    pub total: f64,
    pub phy: f64,
    pub cyc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossRecord,
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.loss.total, e.loss.phy, e.loss.cyc);
    }
    s
}

/// Fixed per-clip inputs: magnified maps and the standardized pulse.
struct Prepared {
    m: StMap,
    m_e: Option<StMap>,
    pm: Tensor,
    s_std: Vec<f64>,
    hr: f64,
}

fn prepare(clip: &ClipRecord, cfg: &TrainConfig) -> Result<Prepared> {
    let (n, t) = (cfg.model.rows, cfg.frames());
    if clip.pm.rows() != n || clip.pm.frames() != t || clip.s_gt.len() != t {
        return Err(Error::shape(format!(
            "clip {}: map {:?} / pulse {} do not match rows {n}, frames {t}",
            clip.id,
            clip.pm.shape(),
            clip.s_gt.len()
        )));
    }
    Ok(Prepared {
        m: magnify(&clip.pm),
        m_e: clip.pm_e.as_ref().map(magnify),
        pm: clip.pm.to_tensor(),
        s_std: clip.s_gt.standardized(),
        hr: clip.hr_gt,
    })
}

/// Model, optimiser and random stream of a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Drnet,
    adam: AdamState,
    rng: ChaCha8Rng,
    cycle: CycleLoss,
}

impl Trainer {
    /// Initialises the networks from `cfg.seed`. The autoencoder is loaded from
    /// `ae_weights` when given, otherwise fitted to `pretrain_signals`.
    pub fn new(
        cfg: TrainConfig,
        ae_weights: Option<&[(String, Tensor)]>,
        pretrain_signals: &[Vec<f64>],
    ) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = Drnet::new(cfg.model.clone(), &mut init)?;
        match ae_weights {
            Some(w) => {
                let ae: Vec<(String, Tensor)> = w
                    .iter()
                    .filter(|(name, _)| name.starts_with(FROZEN_PREFIX_ES) || name.starts_with(FROZEN_PREFIX_DS))
                    .cloned()
                    .collect();
                if ae.is_empty() {
                    return Err(Error::invalid("weights contain no autoencoder tensors".to_string()));
                }
                weights::load_into(&mut net.store, &ae, false)?;
            }
            None => {
                pretrain_autoencoder(&net.gp.ae, &mut net.store, pretrain_signals, cfg.pretrain, &mut init)?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            cycle: CycleLoss::new(cfg.cycle, cfg.fs, cfg.frames())?,
            adam: AdamState::new(cfg.lr),
            cfg,
            net,
            rng,
        })
    }

    /// One optimisation step over `pairs` of prepared clips.
    fn step(&mut self, clips: &[Prepared], pairs: &[(usize, usize)]) -> Result<LossRecord> {
        let p = pairs.len();
        let (n, t) = (self.cfg.model.rows, self.cfg.frames());
        let rho = self.cfg.pc.rho;

        // Real STMaps, cropped, in order [first of each pair..., second...].
        let order: Vec<usize> = pairs.iter().map(|x| x.0).chain(pairs.iter().map(|x| x.1)).collect();
        let mut real = Vec::with_capacity(2 * p * CHANNELS * n * t);
        for &i in &order {
            let c = &clips[i];
            let m = match &c.m_e {
                Some(me) => patch_crop(&c.m, me, rho, &mut self.rng)?,
                None => c.m.clone(),
            };
            real.extend_from_slice(m.data());
        }
        let mut pm_all = Vec::with_capacity(2 * p * CHANNELS * n * t);
        let mut s_all = Vec::with_capacity(2 * p * t);
        for &i in &order {
            pm_all.extend_from_slice(clips[i].pm.data());
            s_all.extend_from_slice(&clips[i].s_std);
        }
        let cyc_rows: Vec<Vec<usize>> = (0..2 * p)
            .map(|_| crate::losses::select_rows(&mut self.rng, n))
            .collect();

        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape, &self.net.store, Mode::Train);
        let real = pass.tape.constant(Tensor::new(&[2 * p, CHANNELS, n, t], real)?);
        let pm = pass.tape.constant(Tensor::new(&[2 * p, CHANNELS, n, t], pm_all)?);
        let s = pass.tape.constant(Tensor::new(&[2 * p, t], s_all.clone())?);

        let pm_p = self.net.gp.forward(&mut pass, s)?;
        let pm_np = pass.tape.sub(pm, pm_p)?;
        let first: Vec<usize> = (0..p).collect();
        let second: Vec<usize> = (p..2 * p).collect();
        let p1 = pass.tape.select(pm_p, 0, &first)?;
        let p2 = pass.tape.select(pm_p, 0, &second)?;
        let np1 = pass.tape.select(pm_np, 0, &first)?;
        let np2 = pass.tape.select(pm_np, 0, &second)?;
        let pse1 = pass.tape.add(p1, np2)?;
        let pse2 = pass.tape.add(p2, np1)?;
        #[cfg(debug_assertions)]
        check_conservation(pass.tape, pm, pm_p, pse1, pse2)?;

        let m_p = pass.tape.magnify(pm_p);
        let m_pse1 = pass.tape.magnify(pse1);
        let m_pse2 = pass.tape.magnify(pse2);
        let stacked = pass.tape.concat(&[real, m_p, m_pse1, m_pse2], 0)?;
        let pred = self.net.ep.forward(&mut pass, stacked)?;
        let bn_updates = std::mem::take(&mut pass.bn_updates);

        // Targets follow physiological content: real i, pm_p i, pse i → s_gt i.
        let mut targets = Vec::with_capacity(6 * p * t);
        for _ in 0..3 {
            targets.extend_from_slice(&s_all);
        }
        let target = Tensor::new(&[6 * p, t], targets)?;
        let phy = loss_phy(&mut tape, pred, &target, PEARSON_EPS)?;

        let mut cyc_terms: Vec<Var> = Vec::with_capacity(2 * p);
        for (k, rows) in cyc_rows.iter().enumerate() {
            let one = tape.select(pm_p, 0, &[k])?;
            let one = tape.reshape(one, &[CHANNELS, n, t])?;
            cyc_terms.push(self.cycle.loss_with_rows(&mut tape, one, clips[order[k]].hr, rows)?);
        }
        let cyc_mean = {
            let flat: Vec<Var> = cyc_terms
                .iter()
                .map(|&v| tape.reshape(v, &[1]))
                .collect::<Result<_>>()?;
            let joined = tape.concat(&flat, 0)?;
            tape.mean_all(joined)?
        };
        let total = loss_total(&mut tape, &[phy], &cyc_terms)?;
        let rec = LossRecord {
            total: tape.value(total).item()?,
            phy: tape.value(phy).item()?,
            cyc: tape.value(cyc_mean).item()?,
        };
        if !(rec.total.is_finite() && rec.phy.is_finite() && rec.cyc.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss {rec:?} at optimiser step {} (clip indices {order:?})",
                self.adam.steps() + 1
            )));
        }
        let grads = tape.backward(total)?;
        self.net.store.accumulate(&tape, &grads);
        apply_bn_updates(&mut self.net.store, &bn_updates);
        self.adam.step(&mut self.net.store);
        Ok(rec)
    }

    /// One step on explicit clip pairs.
    pub fn train_step(&mut self, pairs: &[(&ClipRecord, &ClipRecord)]) -> Result<LossRecord> {
        if pairs.is_empty() {
            return Err(Error::invalid("a training step needs at least one pair".to_string()));
        }
        let mut prepared = Vec::with_capacity(2 * pairs.len());
        for (a, b) in pairs {
            prepared.push(prepare(a, &self.cfg)?);
            prepared.push(prepare(b, &self.cfg)?);
        }
        let idx: Vec<(usize, usize)> = (0..pairs.len()).map(|k| (2 * k, 2 * k + 1)).collect();
        self.step(&prepared, &idx)
    }

    /// Random pairing without replacement, then `batch / 2` pairs per step.
    fn epoch(&mut self, clips: &[Prepared], epoch: usize) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut self.rng);
        let pairs: Vec<(usize, usize)> = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let mut sum = LossRecord {
            total: 0.0,
            phy: 0.0,
            cyc: 0.0,
        };
        let mut steps = 0;
        for chunk in pairs.chunks(self.cfg.batch / 2) {
            let r = self.step(clips, chunk)?;
            sum.total += r.total;
            sum.phy += r.phy;
            sum.cyc += r.cyc;
            steps += 1;
        }
        let k = steps as f64;
        Ok(EpochLog {
            epoch,
            loss: LossRecord {
                total: sum.total / k,
                phy: sum.phy / k,
                cyc: sum.cyc / k,
            },
        })
    }
}

#[cfg(debug_assertions)]
fn check_conservation(tape: &Tape, pm: Var, pm_p: Var, pse1: Var, pse2: Var) -> Result<()> {
    let half = tape.value(pse1).len();
    let (pm, pmp) = (tape.value(pm).data(), tape.value(pm_p).data());
    let (a, b) = (tape.value(pse1).data(), tape.value(pse2).data());
    for k in 0..half {
        let lhs = a[k] + b[k];
        let rhs = pm[k] + pm[half + k];
        let scale = pm[k].abs() + pm[half + k].abs() + pmp[k].abs() + pmp[half + k].abs();
        if (lhs - rhs).abs() > 8.0 * f64::EPSILON * scale {
            return Err(Error::Numerical(format!(
                "pseudo maps violate conservation at element {k}: {lhs} vs {rhs}"
            )));
        }
    }
    Ok(())
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub net: Drnet,
    pub log: Vec<EpochLog>,
}

/// Full training run. Writes `epoch<NNN>.drnw` checkpoints when a directory is given.
pub fn train(
    cfg: &TrainConfig,
    clips: &[ClipRecord],
    ae_weights: Option<&[(String, Tensor)]>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if clips.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 clips, got {}",
            clips.len()
        )));
    }
    cfg.validate()?;
    let prepared: Vec<Prepared> = clips.iter().map(|c| prepare(c, cfg)).collect::<Result<_>>()?;
    let signals: Vec<Vec<f64>> = prepared.iter().map(|p| p.s_std.clone()).collect();
    let mut trainer = Trainer::new(cfg.clone(), ae_weights, &signals)?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        log.push(trainer.epoch(&prepared, epoch)?);
        if let Some(dir) = checkpoint_dir {
            weights::save(&trainer.net.store, &dir.join(format!("epoch{epoch:03}.drnw")))?;
        }
    }
    Ok(TrainOutcome { net: trainer.net, log })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ClipPrediction {
    pub id: String,
    pub source: String,
    pub hr_pred: f64,
    pub hr_gt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub clips: Vec<ClipPrediction>,
    /// Per-source means of clip predictions and references, sorted by source.
    pub sources: Vec<ClipPrediction>,
    pub metrics: MetricReport,
}

/// Heart rate of a predicted waveform: zero-phase bandpass, then spectral peak.
pub fn waveform_hr(wave: Vec<f64>, fs: f64) -> Result<f64> {
    let filter = dsp::butter_bandpass(4, dsp::HR_BAND.0, dsp::HR_BAND.1, fs)?;
    let sig = BvpSignal::new(dsp::filtfilt(&wave, &filter)?, fs)?;
    dsp::estimate_hr(&sig, dsp::HR_BAND, dsp::DEFAULT_NFFT)
}

/// Heart rates predicted by `net` from the unaltered STMaps of `clips`.
pub fn predict_hrs(net: &Drnet, clips: &[ClipRecord], fs: f64) -> Result<Vec<ClipPrediction>> {
    const CHUNK: usize = 16;
    let (n, t) = (net.cfg.rows, net.cfg.frames);
    let chunks: Vec<&[ClipRecord]> = clips.chunks(CHUNK).collect();
    let per_chunk: Vec<Result<Vec<ClipPrediction>>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * CHANNELS * n * t);
            for c in chunk.iter() {
                if c.pm.rows() != n || c.pm.frames() != t {
                    return Err(Error::shape(format!(
                        "clip {}: map {:?} does not match rows {n}, frames {t}",
                        c.id,
                        c.pm.shape()
                    )));
                }
                data.extend_from_slice(magnify(&c.pm).data());
            }
            let x = Tensor::new(&[chunk.len(), CHANNELS, n, t], data)?;
            let waves = net.predict(&x)?;
            chunk
                .iter()
                .zip(waves)
                .map(|(c, w)| {
                    Ok(ClipPrediction {
                        id: c.id.clone(),
                        source: c.source.clone(),
                        hr_pred: waveform_hr(w, fs)?,
                        hr_gt: c.hr_gt,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(clips.len());
    for r in per_chunk {
        out.extend(r?);
    }
    Ok(out)
}

/// Means clip-level predictions per source; sources sorted by name.
pub fn aggregate_by_source(clips: &[ClipPrediction]) -> Vec<ClipPrediction> {
    let mut sources: Vec<&str> = clips.iter().map(|c| c.source.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    sources
        .into_iter()
        .map(|s| {
            let group: Vec<&ClipPrediction> = clips.iter().filter(|c| c.source == s).collect();
            let k = group.len() as f64;
            ClipPrediction {
                id: s.to_string(),
                source: s.to_string(),
                hr_pred: group.iter().map(|c| c.hr_pred).sum::<f64>() / k,
                hr_gt: group.iter().map(|c| c.hr_gt).sum::<f64>() / k,
            }
        })
        .collect()
}

pub fn evaluate(net: &Drnet, clips: &[ClipRecord], fs: f64) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(Error::invalid("evaluation needs at least one clip".to_string()));
    }
    let per_clip = predict_hrs(net, clips, fs)?;
    let sources = aggregate_by_source(&per_clip);
    let pred: Vec<f64> = sources.iter().map(|s| s.hr_pred).collect();
    let gt: Vec<f64> = sources.iter().map(|s| s.hr_gt).collect();
    Ok(Evaluation {
        metrics: compute_metrics(&pred, &gt)?,
        clips: per_clip,
        sources,
    })
}

/// Whole-clip records of generated clips (one window per clip).
pub fn synth_records(clips: &[crate::synth::SynthClip], prefix: &str) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let source = format!("{prefix}{}", crate::synth::clip_id(i));
        out.extend(make_clips(
            &source,
            &c.pm,
            Some(&c.pm_e),
            &c.s_gt,
            c.pm.frames(),
            c.pm.frames(),
        )?);
    }
    Ok(out)
}

pub fn format_predictions(rows: &[ClipPrediction]) -> String {
    let mut s = String::from("id,source,hr_pred,hr_gt\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.id, r.source, r.hr_pred, r.hr_gt);
    }
    s
}
