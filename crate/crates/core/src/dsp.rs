//! Signal conditioning and spectral heart-rate estimation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Heart-rate band of interest in Hz (36–180 bpm).
pub const HR_BAND: (f64, f64) = (0.6, 3.0);
pub const DEFAULT_NFFT: usize = 2048;

/// A physiological waveform sampled at `fs` Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct BvpSignal {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub hr_gt: Option<f64>,
}

impl BvpSignal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(Self {
            samples,
            fs,
            hr_gt: None,
        })
    }

    pub fn with_hr(mut self, hr: f64) -> Result<Self> {
        let (lo, hi) = (HR_BAND.0 * 60.0, HR_BAND.1 * 60.0);
        if !(lo..=hi).contains(&hr) {
            return Err(Error::invalid(format!("heart rate {hr} bpm outside [{lo}, {hi}]")));
        }
        self.hr_gt = Some(hr);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples `start..start + len` (ground truth HR is dropped).
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() {
            return Err(Error::shape(format!(
                "window {start}..{} outside {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Self::new(self.samples[start..start + len].to_vec(), self.fs)
    }

    /// Zero mean, unit (population) variance copy; constant signals are only centred.
    pub fn standardized(&self) -> Vec<f64> {
        standardize(&self.samples)
    }
}

pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
    x.iter().map(|v| (v - mean) * scale).collect()
}

/// One second-order section `[b0, b1, b2, a1, a2]` (`a0 = 1`).
pub type Biquad = [f64; 5];

/// Butterworth bandpass as a cascade of biquads.
#[derive(Clone, Debug, PartialEq)]
pub struct BandpassFilter {
    pub order: usize,
    pub low: f64,
    pub high: f64,
    pub fs: f64,
    pub sections: Vec<Biquad>,
}

/// Digital Butterworth bandpass: an `order`-pole analog lowpass prototype,
/// lowpass→bandpass transform around pre-warped edges, bilinear transform.
/// The result has `2 · order` poles in `order` sections.
pub fn butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<BandpassFilter> {
    if order == 0 {
        return Err(Error::invalid("filter order must be positive".to_string()));
    }
    if !(0.0 < low && low < high && high < fs / 2.0) {
        return Err(Error::invalid(format!(
            "band [{low}, {high}] Hz must satisfy 0 < low < high < fs/2 = {}",
            fs / 2.0
        )));
    }
    let fs2 = 2.0 * fs;
    let w1 = fs2 * (PI * low / fs).tan();
    let w2 = fs2 * (PI * high / fs).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    // Analog prototype poles in the left half plane.
    let proto: Vec<Complex64> = (0..order)
        .map(|k| {
            let theta = PI * (2 * k + 1 + order) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect();
    let mut analog = Vec::with_capacity(2 * order);
    for p in &proto {
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0sq).sqrt();
        analog.push((pb + disc) / 2.0);
        analog.push((pb - disc) / 2.0);
    }
    // Gain: bw^order for the analog bandpass, then bilinear correction.
    // Analog zeros: `order` at s = 0 (map to z = 1) and `order` at infinity (z = -1).
    let mut gain = Complex64::new(bw.powi(order as i32), 0.0);
    for _ in 0..order {
        gain *= fs2;
    }
    for p in &analog {
        gain /= Complex64::new(fs2, 0.0) - p;
    }
    let digital: Vec<Complex64> = analog.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();

    // Keep one pole of each conjugate pair.
    let mut upper: Vec<Complex64> = digital.into_iter().filter(|p| p.im > 0.0).collect();
    if upper.len() != order {
        return Err(Error::Numerical("unexpected real poles in bandpass design".to_string()));
    }
    upper.sort_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap());
    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|p| [1.0, 0.0, -1.0, -2.0 * p.re, p.norm_sqr()])
        .collect();
    let g = gain.re;
    sections[0][0] *= g;
    sections[0][1] *= g;
    sections[0][2] *= g;
    Ok(BandpassFilter {
        order,
        low,
        high,
        fs,
        sections,
    })
}

impl BandpassFilter {
    /// `|H(e^{jω})|` at frequency `f` Hz.
    pub fn magnitude(&self, f: f64) -> f64 {
        let w = 2.0 * PI * f / self.fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|&[b0, b1, b2, a1, a2]| ((b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)).norm())
            .product()
    }

    pub fn is_stable(&self) -> bool {
        // |roots of z^2 + a1 z + a2| < 1 (Jury conditions)
        self.sections
            .iter()
            .all(|&[_, _, _, a1, a2]| a2.abs() < 1.0 && a1.abs() < 1.0 + a2)
    }

    /// Causal filtering from rest (or from the given per-section states).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut states = vec![[0.0; 2]; self.sections.len()];
        self.run(x, &mut states)
    }

    fn run(&self, x: &[f64], states: &mut [[f64; 2]]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (&[b0, b1, b2, a1, a2], z) in self.sections.iter().zip(states.iter_mut()) {
            for v in y.iter_mut() {
                let input = *v;
                let out = b0 * input + z[0];
                z[0] = b1 * input - a1 * out + z[1];
                z[1] = b2 * input - a2 * out;
                *v = out;
            }
        }
        y
    }

    /// Per-section steady-state of a unit step, for initializing a run.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut level = 1.0;
        self.sections
            .iter()
            .map(|&[b0, b1, b2, a1, a2]| {
                let y = level * (b0 + b1 + b2) / (1.0 + a1 + a2);
                let z1 = b2 * level - a2 * y;
                let z0 = y - b0 * level;
                level = y;
                [z0, z1]
            })
            .collect()
    }

    /// Edge padding used by [`filter_zero_phase`].
    pub fn pad_len(&self) -> usize {
        3 * self.order
    }
}

/// Forward-backward filtering with odd-reflection padding of `3 · order`
/// samples and steady-state initial conditions. Zero phase; the magnitude
/// response is squared.
pub fn filter_zero_phase(sig: &BvpSignal, f: &BandpassFilter) -> Result<BvpSignal> {
    let out = filtfilt(&sig.samples, f)?;
    Ok(BvpSignal {
        samples: out,
        ..sig.clone()
    })
}

pub fn filtfilt(x: &[f64], f: &BandpassFilter) -> Result<Vec<f64>> {
    let n = x.len();
    let pad = f.pad_len();
    if n <= 6 * f.order {
        return Err(Error::invalid(format!(
            "signal of {n} samples too short for zero-phase filtering (need > {})",
            6 * f.order
        )));
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = f.step_states();
    let scaled = |v: f64| -> Vec<[f64; 2]> { zi.iter().map(|z| [z[0] * v, z[1] * v]).collect() };
    let mut st = scaled(ext[0]);
    let mut y = f.run(&ext, &mut st);
    y.reverse();
    let mut st = scaled(y[0]);
    let mut y = f.run(&y, &mut st);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Natural cubic spline through `(t_i, v_i)`.
#[derive(Clone, Debug)]
pub struct CubicSpline {
    t: Vec<f64>,
    v: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(t: &[f64], v: &[f64]) -> Result<Self> {
        let n = t.len();
        if n != v.len() {
            return Err(Error::shape("spline knots and values differ in length".to_string()));
        }
        if n < 4 {
            return Err(Error::invalid(format!(
                "cubic resampling needs at least 4 samples, got {n}"
            )));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(
                "spline timestamps must be strictly increasing".to_string(),
            ));
        }
        // Tridiagonal system for interior second derivatives (Thomas algorithm).
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            rhs[i] = 6.0 * ((v[i + 2] - v[i + 1]) / h[i + 1] - (v[i + 1] - v[i]) / h[i]);
        }
        for i in 1..k {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * h[i];
            rhs[i] -= w * rhs[i - 1];
        }
        let mut m = vec![0.0; n];
        for i in (0..k).rev() {
            let upper = if i + 1 < k { h[i + 1] * m[i + 2] } else { 0.0 };
            m[i + 1] = (rhs[i] - upper) / diag[i];
        }
        Ok(Self {
            t: t.to_vec(),
            v: v.to_vec(),
            m,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.t.len();
        let i = match self.t.partition_point(|&k| k <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let h = t1 - t0;
        let (a, b) = (t1 - x, x - t0);
        self.m[i] * a.powi(3) / (6.0 * h)
            + self.m[i + 1] * b.powi(3) / (6.0 * h)
            + (self.v[i] / h - self.m[i] * h / 6.0) * a
            + (self.v[i + 1] / h - self.m[i + 1] * h / 6.0) * b
    }
}

/// Resamples arbitrary increasing timestamps onto a uniform grid at
/// `target_fs` covering `[t_0, t_last]`.
pub fn resample_times(t: &[f64], v: &[f64], target_fs: f64) -> Result<BvpSignal> {
    if !(target_fs > 0.0) {
        return Err(Error::invalid("target rate must be positive".to_string()));
    }
    let spline = CubicSpline::new(t, v)?;
    let (t0, t1) = (t[0], *t.last().unwrap());
    let count = ((t1 - t0) * target_fs + 1e-9).floor() as usize + 1;
    let samples = (0..count).map(|j| spline.eval(t0 + j as f64 / target_fs)).collect();
    BvpSignal::new(samples, target_fs)
}

pub fn resample_cubic(sig: &BvpSignal, target_fs: f64) -> Result<BvpSignal> {
    let t: Vec<f64> = (0..sig.len()).map(|i| i as f64 / sig.fs).collect();
    let mut out = resample_times(&t, &sig.samples, target_fs)?;
    out.hr_gt = sig.hr_gt;
    Ok(out)
}

/// One-sided periodogram density.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

/// Periodogram of `x`: mean removal, periodic Hann window, zero padding to
/// `nfft`, `|X_k|^2 / (fs · Σw²)` with interior bins doubled (one-sided).
pub fn periodogram(x: &[f64], fs: f64, nfft: usize) -> Result<Spectrum> {
    let t = x.len();
    if t == 0 {
        return Err(Error::invalid("empty signal".to_string()));
    }
    if !nfft.is_power_of_two() || nfft < t {
        return Err(Error::invalid(format!(
            "nfft must be a power of two no smaller than the signal ({t}), got {nfft}"
        )));
    }
    let mean = x.iter().sum::<f64>() / t as f64;
    let window: Vec<f64> = (0..t)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / t as f64).cos())
        .collect();
    let energy: f64 = window.iter().map(|w| w * w).sum();
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for (b, (&v, &w)) in buf.iter_mut().zip(x.iter().zip(&window)) {
        b.re = (v - mean) * w;
    }
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let half = nfft / 2;
    let scale = 1.0 / (fs * energy);
    let power = (0..=half)
        .map(|k| {
            let p = buf[k].norm_sqr() * scale;
            if k == 0 || k == half {
                p
            } else {
                2.0 * p
            }
        })
        .collect();
    let freqs = (0..=half).map(|k| k as f64 * fs / nfft as f64).collect();
    Ok(Spectrum { freqs, power })
}

pub fn psd(sig: &BvpSignal, nfft: usize) -> Result<Spectrum> {
    periodogram(&sig.samples, sig.fs, nfft)
}

/// Heart rate in bpm: 60 × the frequency of the largest periodogram bin
/// inside `band`. `nfft` is raised to the next power of two ≥ the signal length.
pub fn estimate_hr(sig: &BvpSignal, band: (f64, f64), nfft: usize) -> Result<f64> {
    let nfft = nfft.max(sig.len().next_power_of_two());
    let spec = psd(sig, nfft)?;
    let mut best: Option<(f64, f64)> = None;
    for (&f, &p) in spec.freqs.iter().zip(&spec.power) {
        if f < band.0 || f > band.1 {
            continue;
        }
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((f, p));
        }
    }
    best.map(|(f, _)| 60.0 * f).ok_or_else(|| {
        Error::invalid(format!(
            "no spectral bins inside [{}, {}] Hz at nfft {nfft}",
            band.0, band.1
        ))
    })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Numerical("pearson undefined for a constant input".to_string()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn format_bvp(sig: &BvpSignal) -> String {
    let mut s = format!("# bvp v1, fs={}\n", sig.fs);
    for v in &sig.samples {
        let _ = writeln!(s, "{v}");
    }
    if let Some(hr) = sig.hr_gt {
        let _ = writeln!(s, "hr={hr}");
    }
    s
}

pub fn parse_bvp(text: &str, path: &Path) -> Result<BvpSignal> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty BVP file"))?;
    let fs: f64 = header
        .strip_prefix("# bvp v1")
        .and_then(|rest| rest.split(',').map(str::trim).find_map(|f| f.strip_prefix("fs=")))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(path, 1, "expected `# bvp v1, fs=<hz>` header"))?;
    let mut samples = Vec::new();
    let mut hr = None;
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if hr.is_some() {
            return Err(Error::parse(path, i + 1, "content after the `hr=` line"));
        }
        if let Some(v) = line.strip_prefix("hr=") {
            hr = Some(
                v.parse::<f64>()
                    .map_err(|_| Error::parse(path, i + 1, "bad hr value"))?,
            );
            continue;
        }
        samples.push(
            line.parse::<f64>()
                .map_err(|_| Error::parse(path, i + 1, "non-numeric sample"))?,
        );
    }
    let sig = BvpSignal::new(samples, fs).map_err(|e| Error::parse(path, 1, e.to_string()))?;
    match hr {
        Some(h) => sig
            .with_hr(h)
            .map_err(|e| Error::parse(path, text.lines().count(), e.to_string())),
        None => Ok(sig),
    }
}

pub fn write_bvp(sig: &BvpSignal, path: &Path) -> Result<()> {
    std::fs::write(path, format_bvp(sig)).map_err(|e| Error::io(path, e))
}

pub fn load_bvp(path: &Path) -> Result<BvpSignal> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bvp(&text, path)
}

/// Sine of unit amplitude at `f` Hz.
pub fn tone(f: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * f * i as f64 / fs + phase).sin()).collect()
}
