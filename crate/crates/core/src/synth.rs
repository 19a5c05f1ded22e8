//! Synthetic clips with a known signal/noise split `pm = pm_p + pm_np`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dsp::{self, BvpSignal, CubicSpline, HR_BAND};
use crate::error::{Error, Result};
use crate::maps::{self, PixelMap, CHANNELS};

/// Pulsatile amplitude ratios of the R, G, B channels.
pub const CHANNEL_RATIOS: [f64; CHANNELS] = [0.5, 1.0, 0.4];
/// Components are rounded to multiples of this so sums of two of them are exact.
pub const GRID: f64 = 1.0 / 4_294_967_296.0;

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "clip_id,trace_path,bvp_path,hr_gt";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub gamma: usize,
    pub frames: usize,
    pub fs: f64,
    pub hr_range: (f64, f64),
    /// Green-channel pulse amplitude per row.
    pub amp_range: (f64, f64),
    pub dc_range: (f64, f64),
    /// Peak amplitude of the slow baseline wander.
    pub drift: f64,
    /// Expected motion events per second.
    pub spike_rate: f64,
    pub spike_amp: f64,
    /// White noise per parent row (sub-rows carry `sigma · gamma`).
    pub noise_sigma: f64,
    /// Relative amplitude of a common-mode illumination flicker inside the HR band.
    pub flicker: f64,
    /// Relative depth of the slow heart-rate modulation.
    pub jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rows: 32,
            gamma: 2,
            frames: 256,
            fs: 30.0,
            hr_range: (42.0, 180.0),
            amp_range: (0.2, 1.5),
            dc_range: (80.0, 180.0),
            drift: 3.0,
            spike_rate: 0.2,
            spike_amp: 4.0,
            noise_sigma: 0.5,
            flicker: 0.0,
            jitter: 0.005,
        }
    }
}

impl SynthSpec {
    pub fn noise_free() -> Self {
        Self {
            drift: 0.0,
            spike_rate: 0.0,
            spike_amp: 0.0,
            noise_sigma: 0.0,
            flicker: 0.0,
            ..Self::default()
        }
    }

    pub fn enlarged_rows(&self) -> usize {
        self.rows * self.gamma * self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.hr_range;
        if !(HR_BAND.0 * 60.0 <= lo && lo <= hi && hi <= HR_BAND.1 * 60.0) {
            return Err(Error::invalid(format!("hr range [{lo}, {hi}] outside 36–180 bpm")));
        }
        if self.rows == 0 || self.gamma == 0 || self.frames < 4 || !(self.fs > 0.0) {
            return Err(Error::invalid(
                "rows, gamma, frames and fs must be positive".to_string(),
            ));
        }
        if !(0.0 < self.amp_range.0 && self.amp_range.0 <= self.amp_range.1) {
            return Err(Error::invalid(
                "amplitude range must be positive and ordered".to_string(),
            ));
        }
        if !(0.0 < self.dc_range.0 && self.dc_range.0 <= self.dc_range.1 && self.dc_range.1 < 1e5) {
            return Err(Error::invalid(
                "dc range must be positive, ordered and below 1e5".to_string(),
            ));
        }
        let nonneg = [
            self.drift,
            self.spike_rate,
            self.spike_amp,
            self.noise_sigma,
            self.flicker,
            self.jitter,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid(
                "noise parameters must be finite and non-negative".to_string(),
            ));
        }
        if self.flicker >= 0.5 || self.jitter >= 0.2 {
            return Err(Error::invalid("flicker must be < 0.5 and jitter < 0.2".to_string()));
        }
        Ok(())
    }
}

/// Pulse waveform at `hr` bpm: `sin φ + 0.3 sin(2φ + φ0)` with a slow
/// zero-mean rate modulation of relative depth `jitter`, standardized.
pub fn gen_bvp<R: Rng + ?Sized>(hr: f64, fs: f64, frames: usize, jitter: f64, rng: &mut R) -> Result<BvpSignal> {
    let f0 = hr / 60.0;
    if !(HR_BAND.0..=HR_BAND.1).contains(&f0) {
        return Err(Error::invalid(format!(
            "heart rate {hr} bpm outside the 36–180 bpm band"
        )));
    }
    let fj = rng.gen_range(0.05..0.15);
    let psi = rng.gen_range(0.0..2.0 * PI);
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let harm = rng.gen_range(0.0..2.0 * PI);
    let wobble: Vec<f64> = (0..frames)
        .map(|i| (2.0 * PI * fj * i as f64 / fs + psi).sin())
        .collect();
    let mean = wobble.iter().sum::<f64>() / frames as f64;
    let mut phi = phase0;
    let raw: Vec<f64> = wobble
        .iter()
        .map(|w| {
            let v = phi.sin() + 0.3 * (2.0 * phi + harm).sin();
            phi += 2.0 * PI * f0 * (1.0 + jitter * (w - mean)) / fs;
            v
        })
        .collect();
    BvpSignal::new(dsp::standardize(&raw), fs)?.with_hr(hr)
}

/// One generated clip and its exact decomposition.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub hr: f64,
    pub s_gt: BvpSignal,
    pub pm: PixelMap,
    pub pm_p: PixelMap,
    pub pm_np: PixelMap,
    /// `rows · gamma²` sub-rows; rows `i·gamma²..(i+1)·gamma²` average to row `i` of `pm`.
    pub pm_e: PixelMap,
}

fn quantize(x: f64) -> f64 {
    (x / GRID).round() * GRID
}

/// Zero-mean perturbations within each consecutive block of `block` entries.
fn block_centered<R: Rng + ?Sized>(rng: &mut R, count: usize, block: usize, spread: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..count).map(|_| rng.gen_range(-spread..=spread)).collect();
    for chunk in v.chunks_mut(block) {
        let m = chunk.iter().sum::<f64>() / chunk.len() as f64;
        chunk.iter_mut().for_each(|x| *x -= m);
    }
    v
}

fn slow_drift<R: Rng + ?Sized>(rng: &mut R, frames: usize, fs: f64, amp: f64) -> Result<Vec<f64>> {
    if amp == 0.0 {
        return Ok(vec![0.0; frames]);
    }
    let span = (frames - 1) as f64 / fs;
    let knots = ((span / 2.0).ceil() as usize).max(3) + 1;
    let t: Vec<f64> = (0..knots).map(|k| span * k as f64 / (knots - 1) as f64).collect();
    let v: Vec<f64> = (0..knots).map(|_| rng.gen_range(-amp..=amp)).collect();
    let spline = CubicSpline::new(&t, &v)?;
    Ok((0..frames).map(|i| spline.eval(i as f64 / fs)).collect())
}

/// Generates one clip at `hr` bpm.
pub fn gen_clip<R: Rng + ?Sized>(spec: &SynthSpec, hr: f64, rng: &mut R) -> Result<SynthClip> {
    spec.validate()?;
    let (n, t, fs) = (spec.rows, spec.frames, spec.fs);
    let g2 = spec.gamma * spec.gamma;
    let ne = spec.enlarged_rows();
    let s = gen_bvp(hr, fs, t, spec.jitter, rng)?;

    let parent_amp: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(spec.amp_range.0..=spec.amp_range.1))
        .collect();
    let amp_mod = block_centered(rng, ne, g2, 0.5);
    let parent_dc: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(spec.dc_range.0..=spec.dc_range.1))
        .collect();
    let dc_mod = block_centered(rng, ne, g2, 10.0_f64.min(spec.dc_range.0 / 2.0));

    let common = slow_drift(rng, t, fs, spec.drift)?;
    let row_drift: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();

    // Motion events: additive boxes over a band of parent rows.
    let mut motion = vec![0.0; n * t];
    let seconds = t as f64 / fs;
    let events = if spec.spike_rate > 0.0 && spec.spike_amp > 0.0 {
        let expected = spec.spike_rate * seconds;
        let whole = expected.floor() as usize;
        whole + usize::from(rng.gen::<f64>() < expected - whole as f64)
    } else {
        0
    };
    for _ in 0..events {
        let band = rng.gen_range(1..=(n / 4).max(1));
        let r0 = rng.gen_range(0..=n - band);
        let start = rng.gen_range(0..t);
        let len = ((rng.gen_range(0.3..1.5) * fs) as usize).max(1);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let a = sign * spec.spike_amp * rng.gen_range(0.5..1.0);
        for r in r0..r0 + band {
            for v in &mut motion[r * t + start..(r * t + start + len).min((r + 1) * t)] {
                *v += a;
            }
        }
    }

    let flicker: Vec<f64> = if spec.flicker > 0.0 {
        let f0 = hr / 60.0;
        let ff = loop {
            let f = rng.gen_range(HR_BAND.0..HR_BAND.1);
            if (f - f0).abs() >= 0.25 {
                break f;
            }
        };
        let ph = rng.gen_range(0.0..2.0 * PI);
        (0..t)
            .map(|i| spec.flicker * (2.0 * PI * ff * i as f64 / fs + ph).sin())
            .collect()
    } else {
        vec![0.0; t]
    };

    let sub_sigma = spec.noise_sigma * spec.gamma as f64;
    let mut pulse_e = vec![0.0; CHANNELS * ne * t];
    let mut noise_e = vec![0.0; CHANNELS * ne * t];
    for c in 0..CHANNELS {
        for j in 0..ne {
            let i = j / g2;
            let amp = CHANNEL_RATIOS[c] * parent_amp[i] * (1.0 + amp_mod[j]);
            let dc = parent_dc[i] + dc_mod[j];
            let off = (c * ne + j) * t;
            for k in 0..t {
                let p = amp * s.samples[k];
                let base = dc + row_drift[i] * common[k] + motion[i * t + k];
                let white = if sub_sigma > 0.0 {
                    sub_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                // pm_np absorbs the flicker acting on both components.
                let total = (p + base) * (1.0 + flicker[k]) + white;
                pulse_e[off + k] = p;
                noise_e[off + k] = total - p;
            }
        }
    }

    let block_mean = |src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; CHANNELS * n * t];
        for c in 0..CHANNELS {
            for i in 0..n {
                let dst = &mut out[(c * n + i) * t..][..t];
                for j in i * g2..(i + 1) * g2 {
                    for (d, v) in dst.iter_mut().zip(&src[(c * ne + j) * t..][..t]) {
                        *d += v;
                    }
                }
                dst.iter_mut().for_each(|d| *d /= g2 as f64);
            }
        }
        out
    };
    let pulse: Vec<f64> = block_mean(&pulse_e).into_iter().map(quantize).collect();
    let noise: Vec<f64> = block_mean(&noise_e).into_iter().map(quantize).collect();
    let total: Vec<f64> = pulse.iter().zip(&noise).map(|(a, b)| a + b).collect();
    let enlarged: Vec<f64> = pulse_e
        .iter()
        .zip(&noise_e)
        .map(|(a, b)| quantize(*a) + quantize(*b))
        .collect();

    Ok(SynthClip {
        hr,
        s_gt: s,
        pm: PixelMap::new(n, t, fs, total)?,
        pm_p: PixelMap::new(n, t, fs, pulse)?,
        pm_np: PixelMap::new(n, t, fs, noise)?,
        pm_e: PixelMap::new(ne, t, fs, enlarged)?,
    })
}

/// `count` heart rates uniform over `range`.
pub fn draw_hrs<R: Rng + ?Sized>(rng: &mut R, count: usize, range: (f64, f64)) -> Vec<f64> {
    (0..count).map(|_| rng.gen_range(range.0..=range.1)).collect()
}

/// Generator for clip `index` of a dataset seeded with `seed`; stream 0 draws
/// the heart rates.
pub fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// In-memory dataset of `count` clips, generated in parallel.
pub fn gen_clips(count: usize, spec: &SynthSpec, seed: u64) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let hrs = draw_hrs(&mut ChaCha8Rng::seed_from_u64(seed), count, spec.hr_range);
    hrs.par_iter()
        .enumerate()
        .map(|(i, &hr)| gen_clip(spec, hr, &mut clip_rng(seed, i)))
        .collect()
}

pub fn clip_id(index: usize) -> String {
    format!("clip{index:04}")
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub trace_path: PathBuf,
    pub bvp_path: PathBuf,
    pub hr_gt: f64,
}

impl ManifestEntry {
    /// Sibling file holding the enlarged map, when present.
    pub fn enlarged_path(&self) -> PathBuf {
        let name = self.trace_path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let stem = name.strip_suffix(".trace.csv").unwrap_or(name);
        self.trace_path.with_file_name(format!("{stem}.enlarged.csv"))
    }
}

/// Writes `count` clips under `dir`: `manifest.csv` plus
/// `clips/<id>.{trace,enlarged,bvp}.csv`. Returns the manifest entries.
pub fn gen_dataset(dir: &Path, count: usize, spec: &SynthSpec, seed: u64) -> Result<Vec<ManifestEntry>> {
    if count < 2 {
        return Err(Error::invalid(format!("a dataset needs at least 2 clips, got {count}")));
    }
    let clips = gen_clips(count, spec, seed)?;
    let clip_dir = dir.join("clips");
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for (i, clip) in clips.iter().enumerate() {
        let id = clip_id(i);
        let entry = ManifestEntry {
            trace_path: PathBuf::from("clips").join(format!("{id}.trace.csv")),
            bvp_path: PathBuf::from("clips").join(format!("{id}.bvp.csv")),
            clip_id: id,
            hr_gt: clip.hr,
        };
        maps::write_trace(&clip.pm, &dir.join(&entry.trace_path))?;
        maps::write_trace(&clip.pm_e, &dir.join(entry.enlarged_path()))?;
        dsp::write_bvp(&clip.s_gt, &dir.join(&entry.bvp_path))?;
        entries.push(entry);
    }
    write_manifest(&dir.join(MANIFEST), &entries)?;
    Ok(entries)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            e.clip_id,
            e.trace_path.display(),
            e.bvp_path.display(),
            e.hr_gt
        );
    }
    s
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, format_manifest(entries)).map_err(|e| Error::io(path, e))
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line == MANIFEST_HEADER) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 4 fields, found {}", f.len()),
            ));
        }
        let hr_gt = f[3]
            .parse::<f64>()
            .map_err(|_| Error::parse(path, i + 1, format!("bad hr_gt `{}`", f[3])))?;
        out.push(ManifestEntry {
            clip_id: f[0].to_string(),
            trace_path: PathBuf::from(f[1]),
            bvp_path: PathBuf::from(f[2]),
            hr_gt,
        });
    }
    if out.is_empty() {
        return Err(Error::parse(path, 1, "manifest lists no clips"));
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}
