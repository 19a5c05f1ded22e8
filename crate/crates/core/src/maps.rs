//! PixelMaps, STMaps, the magnifying operation, and the trace CSV format.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{magnify_row, Tensor};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum ChannelOrder {
    #[default]
    Rgb,
    Yuv,
}

impl ChannelOrder {
    pub fn tag(self) -> &'static str {
        match self {
            ChannelOrder::Rgb => "RGB",
            ChannelOrder::Yuv => "YUV",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "RGB" => Some(ChannelOrder::Rgb),
            "YUV" => Some(ChannelOrder::Yuv),
            _ => None,
        }
    }
}

/// Per-ROI, per-channel mean intensities of a clip, laid out `[channel][row][frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap {
    rows: usize,
    frames: usize,
    pub fs: f64,
    pub order: ChannelOrder,
    data: Vec<f64>,
}

/// A magnified PixelMap: every (channel, row) series min-max scaled into `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StMap {
    rows: usize,
    frames: usize,
    data: Vec<f64>,
}

macro_rules! map_accessors {
    ($t:ty) => {
        impl $t {
            pub fn channels(&self) -> usize {
                CHANNELS
            }

            pub fn rows(&self) -> usize {
                self.rows
            }

            pub fn frames(&self) -> usize {
                self.frames
            }

            pub fn shape(&self) -> [usize; 3] {
                [CHANNELS, self.rows, self.frames]
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn get(&self, c: usize, r: usize, t: usize) -> f64 {
                self.data[(c * self.rows + r) * self.frames + t]
            }

            pub fn series(&self, c: usize, r: usize) -> &[f64] {
                let off = (c * self.rows + r) * self.frames;
                &self.data[off..off + self.frames]
            }

            pub fn series_mut(&mut self, c: usize, r: usize) -> &mut [f64] {
                let off = (c * self.rows + r) * self.frames;
                &mut self.data[off..off + self.frames]
            }

            /// `[C, rows, frames]` tensor of the values.
            pub fn to_tensor(&self) -> Tensor {
                Tensor::new(&self.shape(), self.data.clone()).expect("map shape is valid")
            }

            /// Rows `start..start + len` of every channel.
            pub fn row_band(&self, start: usize, len: usize) -> Result<Self> {
                if len == 0 || start + len > self.rows {
                    return Err(Error::shape(format!(
                        "row band {start}..{} outside {} rows",
                        start + len,
                        self.rows
                    )));
                }
                let mut out = Self {
                    rows: len,
                    data: Vec::with_capacity(CHANNELS * len * self.frames),
                    ..self.clone()
                };
                for c in 0..CHANNELS {
                    let off = (c * self.rows + start) * self.frames;
                    out.data
                        .extend_from_slice(&self.data[off..off + len * self.frames]);
                }
                Ok(out)
            }

            /// Frames `start..start + len` of every series.
            pub fn time_window(&self, start: usize, len: usize) -> Result<Self> {
                if len == 0 || start + len > self.frames {
                    return Err(Error::shape(format!(
                        "window {start}..{} outside {} frames",
                        start + len,
                        self.frames
                    )));
                }
                let mut data = Vec::with_capacity(CHANNELS * self.rows * len);
                for series in self.data.chunks_exact(self.frames) {
                    data.extend_from_slice(&series[start..start + len]);
                }
                Ok(Self {
                    frames: len,
                    data,
                    ..self.clone()
                })
            }
        }
    };
}

map_accessors!(PixelMap);
map_accessors!(StMap);

fn check_len(rows: usize, frames: usize, len: usize) -> Result<()> {
    if rows == 0 || frames == 0 {
        return Err(Error::shape("maps need at least one row and frame".to_string()));
    }
    if len != CHANNELS * rows * frames {
        return Err(Error::shape(format!(
            "{CHANNELS}x{rows}x{frames} map needs {} values, got {len}",
            CHANNELS * rows * frames
        )));
    }
    Ok(())
}

impl PixelMap {
    pub fn new(rows: usize, frames: usize, fs: f64, data: Vec<f64>) -> Result<Self> {
        check_len(rows, frames, data.len())?;
        if !(fs > 0.0) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(Self {
            rows,
            frames,
            fs,
            order: ChannelOrder::Rgb,
            data,
        })
    }

    pub fn zeros(rows: usize, frames: usize, fs: f64) -> Result<Self> {
        Self::new(rows, frames, fs, vec![0.0; CHANNELS * rows * frames])
    }

    pub fn from_tensor(t: &Tensor, fs: f64) -> Result<Self> {
        match t.shape() {
            &[CHANNELS, rows, frames] => Self::new(rows, frames, fs, t.data().to_vec()),
            s => Err(Error::shape(format!("expected [3, n, T] tensor, got {s:?}"))),
        }
    }

    pub fn with_order(mut self, order: ChannelOrder) -> Self {
        self.order = order;
        self
    }

    /// Per-frame mean over all rows, one trace per channel.
    pub fn row_mean_traces(&self) -> [Vec<f64>; CHANNELS] {
        std::array::from_fn(|c| {
            let mut acc = vec![0.0; self.frames];
            for r in 0..self.rows {
                for (a, v) in acc.iter_mut().zip(self.series(c, r)) {
                    *a += v;
                }
            }
            let inv = 1.0 / self.rows as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
            acc
        })
    }

    /// Rows reordered so that output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.rows {
            return Err(Error::shape("permutation length differs from row count".to_string()));
        }
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for (i, &p) in perm.iter().enumerate() {
                out.series_mut(c, i).copy_from_slice(self.series(c, p));
            }
        }
        Ok(out)
    }
}

impl StMap {
    pub fn new(rows: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows, frames, data.len())?;
        Ok(Self { rows, frames, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[CHANNELS, rows, frames] => Self::new(rows, frames, t.data().to_vec()),
            s => Err(Error::shape(format!("expected [3, n, T] tensor, got {s:?}"))),
        }
    }

    /// Network input scaling `v / 127.5 - 1`, mapping `[0, 255]` onto `[-1, 1]`.
    pub fn normalized_tensor(&self) -> Tensor {
        self.to_tensor().map(|v| v / 127.5 - 1.0)
    }
}

/// Magnifying operation: per (channel, row), `255 (v - min) / (max - min)`.
/// Series whose range is below `1e-9` become all zeros. Values stay real.
pub fn magnify(pm: &PixelMap) -> StMap {
    let mut data = pm.data.clone();
    data.chunks_exact_mut(pm.frames).for_each(|row| {
        magnify_row(row);
    });
    StMap {
        rows: pm.rows,
        frames: pm.frames,
        data,
    }
}

/// Magnifies an already-magnified map (or any `[0,255]` map) again.
pub fn remagnify(m: &StMap) -> StMap {
    let mut data = m.data.clone();
    data.chunks_exact_mut(m.frames).for_each(|row| {
        magnify_row(row);
    });
    StMap { data, ..m.clone() }
}

/// Elementwise `pm - pm_p`.
pub fn decompose(pm: &PixelMap, pm_p: &PixelMap) -> Result<PixelMap> {
    zip_maps(pm, pm_p, |a, b| a - b)
}

/// Elementwise sum of two PixelMaps.
pub fn compose(a: &PixelMap, b: &PixelMap) -> Result<PixelMap> {
    zip_maps(a, b, |x, y| x + y)
}

/// Cross-generation of pseudo maps: `(pm_p1 + pm_np2, pm_p2 + pm_np1)`.
pub fn cross_reconstruct(
    pm_p1: &PixelMap,
    pm_np2: &PixelMap,
    pm_p2: &PixelMap,
    pm_np1: &PixelMap,
) -> Result<(PixelMap, PixelMap)> {
    Ok((compose(pm_p1, pm_np2)?, compose(pm_p2, pm_np1)?))
}

fn zip_maps(a: &PixelMap, b: &PixelMap, f: impl Fn(f64, f64) -> f64) -> Result<PixelMap> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "PixelMap shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Ok(PixelMap { data, ..a.clone() })
}

/// Serializes a PixelMap in the `pixmap v1` trace CSV format.
pub fn format_trace(pm: &PixelMap) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# pixmap v1, channels={CHANNELS}, rows={}, frames={}, fs={}, order={}",
        pm.rows,
        pm.frames,
        pm.fs,
        pm.order.tag()
    );
    for c in 0..CHANNELS {
        for r in 0..pm.rows {
            let _ = write!(s, "{c},{r}");
            for v in pm.series(c, r) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_trace(pm: &PixelMap, path: &Path) -> Result<()> {
    std::fs::write(path, format_trace(pm)).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: &Path) -> Result<PixelMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text, path)
}

fn header_fields(line: &str) -> Option<Vec<(&str, &str)>> {
    let rest = line.strip_prefix("# pixmap v1")?;
    rest.split(',')
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .map(|f| f.split_once('='))
        .collect()
}

pub fn parse_trace(text: &str, path: &Path) -> Result<PixelMap> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty trace file"))?;
    let fields = header_fields(header).ok_or_else(|| Error::parse(path, 1, "missing `# pixmap v1` header"))?;
    let get = |key: &str| {
        fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::parse(path, 1, format!("header lacks `{key}`")))
    };
    let int = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::parse(path, 1, format!("`{key}` is not an integer")))
    };
    if int("channels")? != CHANNELS {
        return Err(Error::parse(path, 1, "only 3-channel traces are supported"));
    }
    let rows = int("rows")?;
    let frames = int("frames")?;
    let fs: f64 = get("fs")?
        .parse()
        .map_err(|_| Error::parse(path, 1, "`fs` is not a number"))?;
    let order = ChannelOrder::parse(get("order")?).ok_or_else(|| Error::parse(path, 1, "order must be RGB or YUV"))?;
    if rows == 0 || frames == 0 {
        return Err(Error::parse(path, 1, "rows and frames must be positive"));
    }

    let data = parse_series(lines, rows, frames, path, text.lines().count())?;
    Ok(PixelMap::new(rows, frames, fs, data)
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .with_order(order))
}

fn parse_series<'a>(
    lines: impl Iterator<Item = (usize, &'a str)>,
    rows: usize,
    frames: usize,
    path: &Path,
    last_line: usize,
) -> Result<Vec<f64>> {
    let mut data = vec![f64::NAN; CHANNELS * rows * frames];
    let mut seen = vec![false; CHANNELS * rows];
    let mut count = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut idx = |name: &str, bound: usize| -> Result<usize> {
            let v: usize = parts
                .next()
                .and_then(|p| p.trim().parse().ok())
                .ok_or_else(|| Error::parse(path, lineno, format!("bad {name} index")))?;
            if v >= bound {
                return Err(Error::parse(path, lineno, format!("{name} index {v} out of range")));
            }
            Ok(v)
        };
        let c = idx("channel", CHANNELS)?;
        let r = idx("row", rows)?;
        if std::mem::replace(&mut seen[c * rows + r], true) {
            return Err(Error::parse(path, lineno, format!("duplicate series ({c},{r})")));
        }
        let vals: Vec<f64> = parts
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, lineno, "non-numeric sample"))?;
        if vals.len() != frames {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {frames} samples, found {}", vals.len()),
            ));
        }
        let off = (c * rows + r) * frames;
        data[off..off + frames].copy_from_slice(&vals);
        count += 1;
    }
    if count != CHANNELS * rows {
        return Err(Error::parse(
            path,
            last_line,
            format!("expected {} series, found {count}", CHANNELS * rows),
        ));
    }
    Ok(data)
}

/// Serializes an STMap: `# stmap v1, channels=3, rows=<n>, frames=<T>`, then
/// `c,r,v...` lines as in the trace format.
pub fn format_stmap(m: &StMap) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# stmap v1, channels={CHANNELS}, rows={}, frames={}",
        m.rows, m.frames
    );
    for c in 0..CHANNELS {
        for r in 0..m.rows {
            let _ = write!(s, "{c},{r}");
            for v in m.series(c, r) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_stmap(m: &StMap, path: &Path) -> Result<()> {
    std::fs::write(path, format_stmap(m)).map_err(|e| Error::io(path, e))
}

pub fn parse_stmap(text: &str, path: &Path) -> Result<StMap> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty STMap file"))?;
    let rest = header
        .strip_prefix("# stmap v1")
        .ok_or_else(|| Error::parse(path, 1, "missing `# stmap v1` header"))?;
    let mut dims = [None; 3];
    for f in rest.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::parse(path, 1, format!("bad header field `{f}`")))?;
        let slot = match k {
            "channels" => 0,
            "rows" => 1,
            "frames" => 2,
            _ => return Err(Error::parse(path, 1, format!("unknown header field `{k}`"))),
        };
        dims[slot] = Some(
            v.parse::<usize>()
                .map_err(|_| Error::parse(path, 1, format!("`{k}` is not an integer")))?,
        );
    }
    let [Some(ch), Some(rows), Some(frames)] = dims else {
        return Err(Error::parse(path, 1, "header needs channels, rows and frames"));
    };
    if ch != CHANNELS || rows == 0 || frames == 0 {
        return Err(Error::parse(path, 1, "expected 3 channels and positive rows/frames"));
    }
    let data = parse_series(lines, rows, frames, path, text.lines().count())?;
    StMap::new(rows, frames, data).map_err(|e| Error::parse(path, 1, e.to_string()))
}

pub fn load_stmap(path: &Path) -> Result<StMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_stmap(&text, path)
}
