//! Training objectives on the autodiff tape: negative Pearson on waveforms,
//! the spectral cycle loss on generated maps, and their sum.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::HR_BAND;
use crate::error::{Error, Result};

/// Variance guard used by the trainer so a flat prediction cannot produce NaN.
pub const PEARSON_EPS: f64 = 1e-8;

/// Mean of `1 - r` over the rows of `pred[N,T]` against `gt[N,T]`.
///
/// With `eps == 0` a constant row is an error; the trainer passes [`PEARSON_EPS`].
pub fn loss_phy(tape: &mut Tape, pred: Var, gt: &Tensor, eps: f64) -> Result<Var> {
    let per_row = tape.neg_pearson(pred, gt, eps)?;
    tape.mean_all(per_row)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CycleLossConfig {
    pub band: (f64, f64),
    pub nfft: usize,
}

impl Default for CycleLossConfig {
    fn default() -> Self {
        Self {
            band: HR_BAND,
            nfft: 512,
        }
    }
}

/// Fixed DFT projections restricted to the band bins, for signals of length
/// `frames` at `fs`.
///
/// The class logits are one-sided periodogram densities
/// `2 |X_k|^2 / (fs · T)` of the mean-removed signal, without a window.
#[derive(Clone, Debug)]
pub struct CycleLoss {
    cfg: CycleLossConfig,
    fs: f64,
    frames: usize,
    bins: Vec<usize>,
    cos: Tensor,
    sin: Tensor,
}

impl CycleLoss {
    pub fn new(cfg: CycleLossConfig, fs: f64, frames: usize) -> Result<Self> {
        let (lo, hi) = cfg.band;
        if !(0.0 < lo && lo < hi && hi < fs / 2.0) {
            return Err(Error::invalid(format!(
                "cycle band [{lo}, {hi}] Hz must lie inside (0, {})",
                fs / 2.0
            )));
        }
        if !cfg.nfft.is_power_of_two() || cfg.nfft < frames {
            return Err(Error::invalid(format!(
                "cycle nfft {} must be a power of two >= {frames}",
                cfg.nfft
            )));
        }
        if frames < 2 {
            return Err(Error::invalid("cycle loss needs at least 2 frames".to_string()));
        }
        let df = fs / cfg.nfft as f64;
        let bins: Vec<usize> = (0..=cfg.nfft / 2)
            .filter(|&k| {
                let f = k as f64 * df;
                f >= lo && f <= hi
            })
            .collect();
        if bins.is_empty() {
            return Err(Error::invalid("no DFT bins inside the cycle band".to_string()));
        }
        let k = bins.len();
        let mut cos = vec![0.0; frames * k];
        let mut sin = vec![0.0; frames * k];
        for t in 0..frames {
            for (j, &b) in bins.iter().enumerate() {
                let ang = 2.0 * PI * (b * t % cfg.nfft) as f64 / cfg.nfft as f64;
                cos[t * k + j] = ang.cos();
                sin[t * k + j] = ang.sin();
            }
        }
        Ok(Self {
            cfg,
            fs,
            frames,
            bins,
            cos: Tensor::new(&[frames, k], cos)?,
            sin: Tensor::new(&[frames, k], sin)?,
        })
    }

    pub fn config(&self) -> &CycleLossConfig {
        &self.cfg
    }

    pub fn band_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn bin_freq(&self, class: usize) -> f64 {
        self.bins[class] as f64 * self.fs / self.cfg.nfft as f64
    }

    /// Class index of the band bin nearest to `hr_bpm / 60`.
    pub fn target_class(&self, hr_bpm: f64) -> Result<usize> {
        let f = hr_bpm / 60.0;
        let (lo, hi) = self.cfg.band;
        if !(lo..=hi).contains(&f) {
            return Err(Error::invalid(format!(
                "heart rate {hr_bpm} bpm outside the cycle band [{}, {}] bpm",
                lo * 60.0,
                hi * 60.0
            )));
        }
        let best = (0..self.bins.len())
            .min_by(|&a, &b| {
                let da = (self.bin_freq(a) - f).abs();
                let db = (self.bin_freq(b) - f).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        Ok(best)
    }

    /// Band logits `[C,K]` of signals `x[C,T]`.
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 2 || s[1] != self.frames {
            return Err(Error::shape(format!(
                "cycle logits: expected [C,{}], got {s:?}",
                self.frames
            )));
        }
        let mean = tape.mean_axis(x, 1)?;
        let centred = tape.sub(x, mean)?;
        let cos = tape.constant(self.cos.clone());
        let sin = tape.constant(self.sin.clone());
        let re = tape.linear(centred, cos, None)?;
        let im = tape.linear(centred, sin, None)?;
        let re2 = tape.mul(re, re)?;
        let im2 = tape.mul(im, im)?;
        let power = tape.add(re2, im2)?;
        Ok(tape.affine(power, 2.0 / (self.fs * self.frames as f64), 0.0))
    }

    /// Cross-entropy of the band spectrum of `avg[C,T]` against `hr_bpm`,
    /// averaged over channels.
    pub fn loss_on_average(&self, tape: &mut Tape, avg: Var, hr_bpm: f64) -> Result<Var> {
        let target = self.target_class(hr_bpm)?;
        let logits = self.logits(tape, avg)?;
        let c = tape.value(avg).shape()[0];
        tape.cross_entropy(logits, &vec![target; c])
    }

    /// Averages `n_c ~ U{1..n}` distinct random rows of `pm[C,n,T]` and scores
    /// the result with [`Self::loss_on_average`].
    pub fn loss<R: Rng + ?Sized>(&self, tape: &mut Tape, pm: Var, hr_bpm: f64, rng: &mut R) -> Result<Var> {
        let s = tape.value(pm).shape().to_vec();
        if s.len() != 3 || s[2] != self.frames {
            return Err(Error::shape(format!(
                "cycle loss: expected [C,n,{}], got {s:?}",
                self.frames
            )));
        }
        let rows = select_rows(rng, s[1]);
        self.loss_with_rows(tape, pm, hr_bpm, &rows)
    }

    pub fn loss_with_rows(&self, tape: &mut Tape, pm: Var, hr_bpm: f64, rows: &[usize]) -> Result<Var> {
        let s = tape.value(pm).shape().to_vec();
        let picked = tape.select(pm, 1, rows)?;
        let avg = tape.mean_axis(picked, 1)?;
        let avg = tape.reshape(avg, &[s[0], s[2]])?;
        self.loss_on_average(tape, avg, hr_bpm)
    }
}

/// `n_c ~ U{1..n}` distinct rows in ascending order.
pub fn select_rows<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let count = rng.gen_range(1..=n);
    let mut rows = sample(rng, n, count).into_vec();
    rows.sort_unstable();
    rows
}

/// Cycle loss with a freshly built projector (see [`CycleLoss`]).
pub fn loss_cycle<R: Rng + ?Sized>(
    tape: &mut Tape,
    pm: Var,
    hr_bpm: f64,
    fs: f64,
    cfg: CycleLossConfig,
    rng: &mut R,
) -> Result<Var> {
    let frames = *tape.value(pm).shape().last().unwrap();
    CycleLoss::new(cfg, fs, frames)?.loss(tape, pm, hr_bpm, rng)
}

/// `mean(phy) + mean(cyc)`.
pub fn loss_total(tape: &mut Tape, phy: &[Var], cyc: &[Var]) -> Result<Var> {
    if phy.is_empty() || cyc.is_empty() {
        return Err(Error::invalid(format!(
            "total loss needs at least one term of each kind, got {} and {}",
            phy.len(),
            cyc.len()
        )));
    }
    let mut mean_of = |terms: &[Var]| -> Result<Var> {
        let flat: Vec<Var> = terms.iter().map(|&v| tape.reshape(v, &[1])).collect::<Result<_>>()?;
        let joined = tape.concat(&flat, 0)?;
        tape.mean_all(joined)
    };
    let a = mean_of(phy)?;
    let b = mean_of(cyc)?;
    tape.add(a, b)
}
