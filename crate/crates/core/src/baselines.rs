//! Classical colour-based pulse extraction on row-averaged RGB traces.

use std::str::FromStr;

use crate::dsp::{butter_bandpass, filtfilt, BvpSignal, HR_BAND};
use crate::error::{Error, Result};
use crate::maps::{ChannelOrder, PixelMap};

/// Window length of the chrominance methods, in seconds.
pub const WINDOW_SECONDS: f64 = 1.6;
pub const FILTER_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Green,
    Chrom,
    Pos,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Green, Method::Chrom, Method::Pos];

    pub fn name(self) -> &'static str {
        match self {
            Method::Green => "green",
            Method::Chrom => "chrom",
            Method::Pos => "pos",
        }
    }

    pub fn run(self, pm: &PixelMap) -> Result<BvpSignal> {
        match self {
            Method::Green => green(pm),
            Method::Chrom => chrom(pm),
            Method::Pos => pos(pm),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}` (expected green, chrom or pos)")))
    }
}

fn require_rgb(pm: &PixelMap) -> Result<()> {
    if pm.order != ChannelOrder::Rgb {
        return Err(Error::invalid(format!(
            "colour methods need RGB input, got {}",
            pm.order.tag()
        )));
    }
    Ok(())
}

fn bandpass(x: &[f64], fs: f64) -> Result<BvpSignal> {
    let f = butter_bandpass(FILTER_ORDER, HR_BAND.0, HR_BAND.1, fs)?;
    BvpSignal::new(filtfilt(x, &f)?, fs)
}

/// Subtracts a centred moving average of `width` samples (shrinking at the edges).
pub fn detrend_moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[i] - (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Mean green trace, moving-average detrended over one second, bandpassed.
pub fn green(pm: &PixelMap) -> Result<BvpSignal> {
    require_rgb(pm)?;
    let [_, g, _] = pm.row_mean_traces();
    let width = (pm.fs.round() as usize).max(1);
    bandpass(&detrend_moving_average(&g, width), pm.fs)
}

fn window_starts(frames: usize, len: usize) -> Vec<usize> {
    let hop = (len / 2).max(1);
    let mut starts: Vec<usize> = (0..=frames - len).step_by(hop).collect();
    if *starts.last().unwrap() != frames - len {
        starts.push(frames - len);
    }
    starts
}

fn window_len(pm: &PixelMap) -> Result<usize> {
    let len = (WINDOW_SECONDS * pm.fs).round() as usize;
    if len < 2 || pm.frames() < len {
        return Err(Error::invalid(format!(
            "{} frames shorter than one {WINDOW_SECONDS} s window ({len} frames)",
            pm.frames()
        )));
    }
    Ok(len)
}

/// Channel traces of `[start, start + len)` divided by their window means.
fn normalized_window(traces: &[Vec<f64>; 3], start: usize, len: usize) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    for (c, tr) in traces.iter().enumerate() {
        let w = &tr[start..start + len];
        let mean = w.iter().sum::<f64>() / len as f64;
        if mean.abs() < 1e-12 {
            return Err(Error::Numerical(format!(
                "channel {c} has zero mean in window at {start}"
            )));
        }
        out[c] = w.iter().map(|v| v / mean).collect();
    }
    Ok(out)
}

fn centred(x: &mut [f64]) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= m);
}

fn std_dev(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

fn ratio(num: &[f64], den: &[f64]) -> f64 {
    let d = std_dev(den);
    if d > 1e-15 {
        std_dev(num) / d
    } else {
        0.0
    }
}

/// Chrominance method: `X = 3R − 2G`, `Y = 1.5R + G − 1.5B` on mean-normalised
/// windows, `S = X − (σX/σY)·Y`, Hann-weighted overlap-add, bandpass.
pub fn chrom(pm: &PixelMap) -> Result<BvpSignal> {
    require_rgb(pm)?;
    let len = window_len(pm)?;
    let traces = pm.row_mean_traces();
    let hann: Vec<f64> = (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect();
    let mut out = vec![0.0; pm.frames()];
    for start in window_starts(pm.frames(), len) {
        let [r, g, b] = normalized_window(&traces, start, len)?;
        let mut x: Vec<f64> = r.iter().zip(&g).map(|(r, g)| 3.0 * r - 2.0 * g).collect();
        let mut y: Vec<f64> = (0..len).map(|i| 1.5 * r[i] + g[i] - 1.5 * b[i]).collect();
        centred(&mut x);
        centred(&mut y);
        let alpha = ratio(&x, &y);
        for i in 0..len {
            out[start + i] += hann[i] * (x[i] - alpha * y[i]);
        }
    }
    bandpass(&out, pm.fs)
}

/// Plane-orthogonal-to-skin: projections `G − B` and `−2R + G + B` of the
/// mean-normalised window, `h = S1 + (σ1/σ2)·S2`, overlap-added, bandpassed.
pub fn pos(pm: &PixelMap) -> Result<BvpSignal> {
    require_rgb(pm)?;
    let len = window_len(pm)?;
    let traces = pm.row_mean_traces();
    let mut out = vec![0.0; pm.frames()];
    for start in window_starts(pm.frames(), len) {
        let [r, g, b] = normalized_window(&traces, start, len)?;
        let s1: Vec<f64> = (0..len).map(|i| g[i] - b[i]).collect();
        let s2: Vec<f64> = (0..len).map(|i| -2.0 * r[i] + g[i] + b[i]).collect();
        let alpha = ratio(&s1, &s2);
        let mut h: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
        centred(&mut h);
        for (o, v) in out[start..start + len].iter_mut().zip(&h) {
            *o += v;
        }
    }
    bandpass(&out, pm.fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{estimate_hr, DEFAULT_NFFT};
    use crate::synth::{gen_clip, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn green_only(hz: f64, frames: usize) -> PixelMap {
        let mut pm = PixelMap::zeros(3, frames, 30.0).unwrap();
        for c in 0..3 {
            for r in 0..3 {
                for (t, v) in pm.series_mut(c, r).iter_mut().enumerate() {
                    *v = 100.0
                        + if c == 1 {
                            (2.0 * PI * hz * t as f64 / 30.0).sin()
                        } else {
                            0.0
                        };
                }
            }
        }
        pm
    }

    fn hr(sig: &BvpSignal) -> f64 {
        estimate_hr(sig, HR_BAND, DEFAULT_NFFT).unwrap()
    }

    #[test]
    fn green_tone() {
        let out = green(&green_only(1.5, 300)).unwrap();
        assert!((hr(&out) - 90.0).abs() <= 0.9);
    }

    #[test]
    fn green_constant_is_flat() {
        let pm = PixelMap::new(2, 120, 30.0, vec![77.0; 3 * 2 * 120]).unwrap();
        let out = green(&pm).unwrap();
        assert!(out.samples.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn row_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = SynthSpec {
            rows: 6,
            frames: 128,
            ..SynthSpec::default()
        };
        let clip = gen_clip(&spec, 80.0, &mut rng).unwrap();
        let perm = [3, 1, 5, 0, 2, 4];
        let moved = clip.pm.permute_rows(&perm).unwrap();
        for m in Method::ALL {
            let a = m.run(&clip.pm).unwrap().samples;
            let b = m.run(&moved).unwrap().samples;
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{}", m.name());
            }
        }
    }

    #[test]
    fn scale_invariance_of_chrominance_methods() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = SynthSpec {
            rows: 4,
            frames: 128,
            ..SynthSpec::default()
        };
        let clip = gen_clip(&spec, 100.0, &mut rng).unwrap();
        let mut scaled = clip.pm.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 3.7);
        for m in [Method::Chrom, Method::Pos] {
            let a = m.run(&clip.pm).unwrap().samples;
            let b = m.run(&scaled).unwrap().samples;
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn noise_free_tone_within_one_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = SynthSpec {
            rows: 4,
            frames: 256,
            jitter: 0.0,
            ..SynthSpec::noise_free()
        };
        for bpm in [55.0, 87.0, 140.0] {
            let clip = gen_clip(&spec, bpm, &mut rng).unwrap();
            for m in Method::ALL {
                let est = hr(&m.run(&clip.pm).unwrap());
                assert!((est - bpm).abs() <= 0.9, "{} {bpm} -> {est}", m.name());
            }
        }
    }

    #[test]
    fn common_mode_flicker_fools_green_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = SynthSpec {
            rows: 4,
            frames: 256,
            flicker: 0.03,
            ..SynthSpec::noise_free()
        };
        let clip = gen_clip(&spec, 72.0, &mut rng).unwrap();
        let g = hr(&green(&clip.pm).unwrap());
        assert!((g - 72.0).abs() > 5.0, "green {g}");
        for m in [Method::Chrom, Method::Pos] {
            let est = hr(&m.run(&clip.pm).unwrap());
            assert!((est - 72.0).abs() <= 0.9, "{} {est}", m.name());
        }
    }

    #[test]
    fn pos_rejects_intensity_only_change() {
        let frames = 256;
        let make = |pulse: [f64; 3]| {
            let mut pm = PixelMap::zeros(1, frames, 30.0).unwrap();
            for (c, k) in pulse.iter().enumerate() {
                for (t, v) in pm.series_mut(c, 0).iter_mut().enumerate() {
                    *v = 120.0 * (1.0 + k * (2.0 * PI * 1.2 * t as f64 / 30.0).sin());
                }
            }
            pm
        };
        let energy = |s: &BvpSignal| s.samples[48..frames - 48].iter().map(|v| v * v).sum::<f64>();
        let intensity = pos(&make([0.01, 0.01, 0.01])).unwrap();
        let pulse = pos(&make([0.005, 0.01, 0.004])).unwrap();
        assert!(energy(&intensity) < 1e-3 * energy(&pulse));
    }

    #[test]
    fn input_validation() {
        let pm = green_only(1.2, 300).with_order(ChannelOrder::Yuv);
        for m in Method::ALL {
            assert!(m.run(&pm).is_err());
        }
        let short = green_only(1.2, 40);
        assert!(chrom(&short).is_err());
        let zero = PixelMap::zeros(2, 120, 30.0).unwrap();
        assert!(pos(&zero).is_err());
        assert!("ica".parse::<Method>().is_err());
        assert_eq!("pos".parse::<Method>().unwrap(), Method::Pos);
    }
}
