//! Facial ROI grids from 68-point landmarks, raw frame files, and per-cell
//! channel averaging into PixelMaps.
//!
//! Geometry (layout version 1): the landmark bounding box of each frame is
//! split into a uniform `rows × cols` grid (4 × 8 for 32 ROIs), cells ordered
//! row-major. Pixels inside the eye boxes (landmarks 36–41, 42–47) and the
//! mouth box (48–67), each widened by [`EXCLUSION_MARGIN`] of its size, belong
//! to no cell. A pixel belongs to a cell when its centre lies in the
//! half-open rectangle `[x0, x1) × [y0, y1)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{ChannelOrder, PixelMap, CHANNELS};

pub const LANDMARKS: usize = 68;
pub const LAYOUT_VERSION: u32 = 1;
pub const EXCLUSION_MARGIN: f64 = 0.2;

const RIGHT_EYE: std::ops::Range<usize> = 36..42;
const LEFT_EYE: std::ops::Range<usize> = 42..48;
const MOUTH: std::ops::Range<usize> = 48..68;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn centroid(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    fn bounding(points: &[[f64; 2]]) -> Rect {
        let mut r = Rect {
            x0: f64::INFINITY,
            y0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for &[x, y] in points {
            r.x0 = r.x0.min(x);
            r.y0 = r.y0.min(y);
            r.x1 = r.x1.max(x);
            r.y1 = r.y1.max(y);
        }
        r
    }

    fn widened(&self, margin: f64) -> Rect {
        let (dx, dy) = ((self.x1 - self.x0) * margin, (self.y1 - self.y0) * margin);
        Rect {
            x0: self.x0 - dx,
            y0: self.y0 - dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    /// `g × g` sub-rectangles, row-major; their union is exactly `self`
    /// because the outer edges are copied, not recomputed.
    pub fn subdivide(&self, g: usize) -> Vec<Rect> {
        let edges = |a: f64, b: f64| -> Vec<f64> {
            (0..=g)
                .map(|k| {
                    if k == 0 {
                        a
                    } else if k == g {
                        b
                    } else {
                        a + (b - a) * k as f64 / g as f64
                    }
                })
                .collect()
        };
        let (xs, ys) = (edges(self.x0, self.x1), edges(self.y0, self.y1));
        let mut out = Vec::with_capacity(g * g);
        for j in 0..g {
            for i in 0..g {
                out.push(Rect {
                    x0: xs[i],
                    y0: ys[j],
                    x1: xs[i + 1],
                    y1: ys[j + 1],
                });
            }
        }
        out
    }
}

/// Per-frame 68-point landmarks in pixel coordinates.
#[derive(Clone, Debug)]
pub struct LandmarkTrack {
    pub points: Vec<[[f64; 2]; LANDMARKS]>,
    pub fs: f64,
}

impl LandmarkTrack {
    pub fn frames(&self) -> usize {
        self.points.len()
    }

    /// Parses one line of 136 comma-separated reals (`x0,y0,x1,y1,...`) per frame.
    pub fn parse_csv(text: &str, fs: f64, path: &Path) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, i + 1, "non-numeric landmark coordinate"))?;
            if vals.len() != 2 * LANDMARKS {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("expected {} values, found {}", 2 * LANDMARKS, vals.len()),
                ));
            }
            points.push(std::array::from_fn(|k| [vals[2 * k], vals[2 * k + 1]]));
        }
        if points.is_empty() {
            return Err(Error::parse(path, 1, "no landmark frames"));
        }
        Ok(Self { points, fs })
    }

    pub fn load(path: &Path, fs: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, fs, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
}

impl GridLayout {
    /// Grid for `n` ROIs: 4 rows when `n` is a multiple of 4, otherwise the
    /// most square factorization.
    pub fn for_count(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("ROI count must be positive".to_string()));
        }
        if n.is_multiple_of(4) {
            return Ok(Self { rows: 4, cols: n / 4 });
        }
        let rows = (1..=n)
            .take_while(|r| r * r <= n)
            .filter(|r| n.is_multiple_of(*r))
            .last()
            .unwrap_or(1);
        Ok(Self { rows, cols: n / rows })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug)]
pub struct FrameRoi {
    pub cells: Vec<Rect>,
    pub exclusions: Vec<Rect>,
}

/// ROI cells for every frame of a clip plus the sub-cell factor `gamma`.
#[derive(Clone, Debug)]
pub struct RoiDefinition {
    pub layout: GridLayout,
    pub gamma: usize,
    pub frames: Vec<FrameRoi>,
}

/// Which cell set to average over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    /// The `n` base cells.
    Base,
    /// The `n · γ²` sub-cells, parent-major (sub-cells of cell 0 first).
    Enlarged,
}

pub fn build_roi_definition(
    track: &LandmarkTrack,
    n: usize,
    gamma: usize,
    exclude_features: bool,
) -> Result<RoiDefinition> {
    if gamma == 0 {
        return Err(Error::invalid("gamma must be at least 1".to_string()));
    }
    let layout = GridLayout::for_count(n)?;
    let mut frames = Vec::with_capacity(track.frames());
    for (t, pts) in track.points.iter().enumerate() {
        let bbox = Rect::bounding(pts);
        if !(bbox.area() > 0.0) {
            return Err(Error::invalid(format!("degenerate landmark bounding box in frame {t}")));
        }
        let grid = Rect::subdivide_grid(&bbox, layout);
        let exclusions = if exclude_features {
            [RIGHT_EYE, LEFT_EYE, MOUTH]
                .into_iter()
                .map(|r| Rect::bounding(&pts[r]).widened(EXCLUSION_MARGIN))
                .collect()
        } else {
            Vec::new()
        };
        frames.push(FrameRoi {
            cells: grid,
            exclusions,
        });
    }
    Ok(RoiDefinition { layout, gamma, frames })
}

impl Rect {
    fn subdivide_grid(bbox: &Rect, layout: GridLayout) -> Vec<Rect> {
        let xs: Vec<f64> = (0..=layout.cols)
            .map(|k| match k {
                0 => bbox.x0,
                k if k == layout.cols => bbox.x1,
                k => bbox.x0 + (bbox.x1 - bbox.x0) * k as f64 / layout.cols as f64,
            })
            .collect();
        let ys: Vec<f64> = (0..=layout.rows)
            .map(|k| match k {
                0 => bbox.y0,
                k if k == layout.rows => bbox.y1,
                k => bbox.y0 + (bbox.y1 - bbox.y0) * k as f64 / layout.rows as f64,
            })
            .collect();
        let mut cells = Vec::with_capacity(layout.count());
        for j in 0..layout.rows {
            for i in 0..layout.cols {
                cells.push(Rect {
                    x0: xs[i],
                    y0: ys[j],
                    x1: xs[i + 1],
                    y1: ys[j + 1],
                });
            }
        }
        cells
    }
}

impl RoiDefinition {
    pub fn count(&self) -> usize {
        self.layout.count()
    }

    pub fn enlarged_count(&self) -> usize {
        self.count() * self.gamma * self.gamma
    }

    pub fn cells(&self, frame: usize, res: Resolution) -> Vec<Rect> {
        let f = &self.frames[frame];
        match res {
            Resolution::Base => f.cells.clone(),
            Resolution::Enlarged => f.cells.iter().flat_map(|c| c.subdivide(self.gamma)).collect(),
        }
    }

    /// Reorders the base cells: new cell `i` is old cell `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.count() {
            return Err(Error::shape("permutation length differs from cell count".to_string()));
        }
        let mut out = self.clone();
        for f in &mut out.frames {
            let old = f.cells.clone();
            f.cells = perm.iter().map(|&p| old[p]).collect();
        }
        Ok(out)
    }
}

/// Raw RGB frames, `frames × height × width × 3` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub pixels: Vec<u8>,
}

const RVF_MAGIC: &[u8; 4] = b"RVF1";

impl FrameSequence {
    pub fn new(width: usize, height: usize, fps: f64, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.is_empty() || !pixels.len().is_multiple_of(width * height * 3) {
            return Err(Error::shape(format!(
                "{} bytes do not form whole {width}x{height} RGB frames",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            fps,
            pixels,
        })
    }

    pub fn frames(&self) -> usize {
        self.pixels.len() / (self.width * self.height * 3)
    }

    pub fn pixel(&self, t: usize, x: usize, y: usize) -> [u8; 3] {
        let off = ((t * self.height + y) * self.width + x) * 3;
        [self.pixels[off], self.pixels[off + 1], self.pixels[off + 2]]
    }

    /// `RVF1` encoding: magic, width/height/frames as `u32` LE, fps `f32` LE, RGB bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.pixels.len());
        out.extend_from_slice(RVF_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.fps as f32).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != RVF_MAGIC {
            return Err(Error::invalid("not an RVF1 frame file".to_string()));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (w, h, n) = (u(4), u(8), u(12));
        let fps = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
        let expected = w * h * n * 3;
        if bytes.len() - 20 != expected {
            return Err(Error::invalid(format!(
                "RVF1 payload is {} bytes, header implies {expected}",
                bytes.len() - 20
            )));
        }
        Self::new(w, h, fps, bytes[20..].to_vec())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.encode()))
            .map_err(|e| Error::io(path, e))
    }
}

/// BT.601 RGB → YUV with U/V offset to 128.
pub fn rgb_to_yuv([r, g, b]: [f64; 3]) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0,
    ]
}

/// Mean colour of each cell of each frame.
pub fn compute_pixelmap(
    frames: &FrameSequence,
    roi: &RoiDefinition,
    res: Resolution,
    order: ChannelOrder,
) -> Result<PixelMap> {
    let t_len = frames.frames();
    if roi.frames.len() != t_len {
        return Err(Error::shape(format!(
            "{} ROI frames for {t_len} video frames",
            roi.frames.len()
        )));
    }
    let n = match res {
        Resolution::Base => roi.count(),
        Resolution::Enlarged => roi.enlarged_count(),
    };
    let mut pm = PixelMap::zeros(n, t_len, frames.fps)?.with_order(order);
    for t in 0..t_len {
        let cells = roi.cells(t, res);
        let excl = &roi.frames[t].exclusions;
        for (i, cell) in cells.iter().enumerate() {
            let xa = cell.x0.floor().max(0.0) as usize;
            let ya = cell.y0.floor().max(0.0) as usize;
            let xb = (cell.x1.ceil().max(0.0) as usize).min(frames.width);
            let yb = (cell.y1.ceil().max(0.0) as usize).min(frames.height);
            let mut acc = [0.0f64; 3];
            let mut count = 0usize;
            for y in ya..yb {
                for x in xa..xb {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if !cell.contains(cx, cy) || excl.iter().any(|e| e.contains(cx, cy)) {
                        continue;
                    }
                    let p = frames.pixel(t, x, y);
                    for c in 0..CHANNELS {
                        acc[c] += p[c] as f64;
                    }
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::invalid(format!(
                    "ROI cell {i} has no pixels in frame {t} after exclusions"
                )));
            }
            let mut mean = acc.map(|v| v / count as f64);
            if order == ChannelOrder::Yuv {
                mean = rgb_to_yuv(mean);
            }
            for c in 0..CHANNELS {
                pm.series_mut(c, i)[t] = mean[c];
            }
        }
    }
    Ok(pm)
}
