//! Binary instance masks stored as uncompressed COCO-style run-length encoding.
//!
//! Pixels are addressed in column-major order (`index = x * height + y`), and
//! the run list always starts with a run of zeros, which may have length 0.
//! Masks are kept in canonical form: apart from that optional leading zero,
//! no run has length zero.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("canvas must be at least 1x1, got {0}x{1}")]
    InvalidCanvas(u32, u32),
    #[error("run lengths sum to {found}, expected {expected} (= width x height)")]
    RunLengthSum { expected: u64, found: u64 },
    #[error("invalid run-length token {0:?}")]
    InvalidToken(String),
    #[error("operation requires a non-empty mask")]
    EmptyMask,
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn overlaps(&self, other: &BBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
    area: u64,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area)
            .field("runs", &self.runs.len())
            .finish()
    }
}

fn check_canvas(width: u32, height: u32) -> Result<(), MaskError> {
    if width == 0 || height == 0 {
        return Err(MaskError::InvalidCanvas(width, height));
    }
    Ok(())
}

impl Mask {
    fn total(width: u32, height: u32) -> u64 {
        width as u64 * height as u64
    }

    /// Builds a mask from alternating zero/one run lengths, merging any
    /// interior zero-length runs into canonical form.
    pub fn from_runs(width: u32, height: u32, runs: &[u32]) -> Result<Self, MaskError> {
        check_canvas(width, height)?;
        let found: u64 = runs.iter().map(|&r| r as u64).sum();
        let expected = Self::total(width, height);
        if found != expected {
            return Err(MaskError::RunLengthSum { expected, found });
        }
        // Each entry records (value, length); merging adjacent equal values
        // removes the zero-length runs.
        let mut canon: Vec<u32> = Vec::with_capacity(runs.len());
        let mut area = 0u64;
        let mut current_is_one = false;
        let mut pending = 0u32;
        let mut value = false;
        for &r in runs {
            if r > 0 {
                if value == current_is_one {
                    pending += r;
                } else {
                    canon.push(pending);
                    pending = r;
                    current_is_one = value;
                }
                if value {
                    area += r as u64;
                }
            }
            value = !value;
        }
        canon.push(pending);
        if canon.len() > 1 && *canon.last().unwrap() == 0 {
            canon.pop();
        }
        Ok(Mask {
            width,
            height,
            runs: canon,
            area,
        })
    }

    /// Parses a space-separated run-length string.
    pub fn parse_rle(width: u32, height: u32, text: &str) -> Result<Self, MaskError> {
        let runs = text
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<u32>()
                    .map_err(|_| MaskError::InvalidToken(tok.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_runs(width, height, &runs)
    }

    pub fn to_rle_string(&self) -> String {
        let mut out = String::with_capacity(self.runs.len() * 4);
        for (i, r) in self.runs.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&r.to_string());
        }
        out
    }

    pub fn empty(width: u32, height: u32) -> Result<Self, MaskError> {
        Self::from_runs(width, height, &[width * height])
    }

    pub fn full(width: u32, height: u32) -> Result<Self, MaskError> {
        Self::from_runs(width, height, &[0, width * height])
    }

    /// Builds a mask from a column-major bit buffer of length `width * height`.
    pub fn from_bits(width: u32, height: u32, bits: &[bool]) -> Result<Self, MaskError> {
        check_canvas(width, height)?;
        let expected = Self::total(width, height);
        if bits.len() as u64 != expected {
            return Err(MaskError::RunLengthSum {
                expected,
                found: bits.len() as u64,
            });
        }
        let mut runs = Vec::new();
        let mut value = false;
        let mut len = 0u32;
        for &b in bits {
            if b == value {
                len += 1;
            } else {
                runs.push(len);
                value = b;
                len = 1;
            }
        }
        runs.push(len);
        Self::from_runs(width, height, &runs)
    }

    /// Builds a mask by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, MaskError> {
        check_canvas(width, height)?;
        let mut bits = Vec::with_capacity(Self::total(width, height) as usize);
        for x in 0..width {
            for y in 0..height {
                bits.push(f(x, y));
            }
        }
        Self::from_bits(width, height, &bits)
    }

    /// Axis-aligned filled rectangle covering `[x0, x1) x [y0, y1)`, clipped to the canvas.
    pub fn rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, MaskError> {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    pub fn same_canvas(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_same(&self, other: &Mask) -> Result<(), MaskError> {
        if self.same_canvas(other) {
            Ok(())
        } else {
            Err(MaskError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ))
        }
    }

    /// Half-open linear index intervals of foreground pixels.
    pub fn intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += r as u64;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = vec![false; Self::total(self.width, self.height) as usize];
        for (s, e) in self.intervals() {
            bits[s as usize..e as usize].fill(true);
        }
        bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let idx = x as u64 * self.height as u64 + y as u64;
        self.intervals().any(|(s, e)| s <= idx && idx < e)
    }

    pub fn bbox(&self) -> Option<BBox> {
        let h = self.height as u64;
        let mut bb: Option<BBox> = None;
        for (s, e) in self.intervals() {
            let (cs, ce) = ((s / h) as u32, ((e - 1) / h) as u32);
            let (ys, ye) = if cs == ce {
                ((s % h) as u32, ((e - 1) % h) as u32)
            } else {
                (0, self.height - 1)
            };
            bb = Some(match bb {
                None => BBox { x0: cs, y0: ys, x1: ce, y1: ye },
                Some(b) => BBox {
                    x0: b.x0.min(cs),
                    y0: b.y0.min(ys),
                    x1: b.x1.max(ce),
                    y1: b.y1.max(ye),
                },
            });
        }
        bb
    }

    /// Pixel count of `self ∩ other`; canvases must already agree.
    pub(crate) fn intersection_area_unchecked(&self, other: &Mask) -> u64 {
        let mut a = self.intervals().peekable();
        let mut b = other.intervals().peekable();
        let mut total = 0u64;
        while let (Some(&(s1, e1)), Some(&(s2, e2))) = (a.peek(), b.peek()) {
            let lo = s1.max(s2);
            let hi = e1.min(e2);
            if hi > lo {
                total += hi - lo;
            }
            if e1 <= e2 {
                a.next();
            } else {
                b.next();
            }
        }
        total
    }

    pub fn intersection_area(&self, other: &Mask) -> Result<u64, MaskError> {
        self.check_same(other)?;
        Ok(self.intersection_area_unchecked(other))
    }

    fn combine(&self, other: &Mask, op: impl Fn(bool, bool) -> bool) -> Result<Mask, MaskError> {
        self.check_same(other)?;
        let a = self.to_bits();
        let b = other.to_bits();
        let bits: Vec<bool> = a.iter().zip(&b).map(|(&x, &y)| op(x, y)).collect();
        Mask::from_bits(self.width, self.height, &bits)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask, MaskError> {
        self.combine(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask, MaskError> {
        self.combine(other, |a, b| a && b)
    }

    /// Pixels of `self` not covered by `other`.
    pub fn difference(&self, other: &Mask) -> Result<Mask, MaskError> {
        self.combine(other, |a, b| a && !b)
    }

    /// Whether every foreground pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_canvas(other) && self.intersection_area_unchecked(other) == self.area
    }
}

/// IoU of two masks; two empty masks score 0.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64, MaskError> {
    a.check_same(b)?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &Mask, b: &Mask) -> f64 {
    let inter = a.intersection_area_unchecked(b);
    let union = a.area + b.area - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of `child` covered by `parent`.
pub fn containment(child: &Mask, parent: &Mask) -> Result<f64, MaskError> {
    child.check_same(parent)?;
    if child.is_empty() {
        return Err(MaskError::EmptyMask);
    }
    Ok(child.intersection_area_unchecked(parent) as f64 / child.area as f64)
}

/// Chessboard distance from each pixel of a `w x h` column-major grid to the
/// nearest source pixel. Pixels beyond the grid count as sources when
/// `border_is_source` is set.
fn chessboard_distance(source: &[bool], w: usize, h: usize, border_is_source: bool) -> Vec<u32> {
    const FAR: u32 = u32::MAX / 2;
    let mut d: Vec<u32> = (0..w * h)
        .map(|i| {
            if source[i] {
                0
            } else if border_is_source {
                let (x, y) = (i / h, i % h);
                (x + 1).min(w - x).min(y + 1).min(h - y) as u32
            } else {
                FAR
            }
        })
        .collect();
    for x in 0..w {
        for y in 0..h {
            let mut v = d[x * h + y];
            if y > 0 {
                v = v.min(d[x * h + y - 1] + 1);
            }
            if x > 0 {
                let c = (x - 1) * h;
                v = v.min(d[c + y] + 1);
                if y > 0 {
                    v = v.min(d[c + y - 1] + 1);
                }
                if y + 1 < h {
                    v = v.min(d[c + y + 1] + 1);
                }
            }
            d[x * h + y] = v;
        }
    }
    for x in (0..w).rev() {
        for y in (0..h).rev() {
            let mut v = d[x * h + y];
            if y + 1 < h {
                v = v.min(d[x * h + y + 1] + 1);
            }
            if x + 1 < w {
                let c = (x + 1) * h;
                v = v.min(d[c + y] + 1);
                if y > 0 {
                    v = v.min(d[c + y - 1] + 1);
                }
                if y + 1 < h {
                    v = v.min(d[c + y + 1] + 1);
                }
            }
            d[x * h + y] = v;
        }
    }
    d
}

/// Number of pixels with distance exactly `k`, for every `k` up to the maximum.
fn histogram(d: &[u32], limit: u32) -> Vec<u64> {
    let max = d.iter().copied().filter(|&v| v <= limit).max().unwrap_or(0) as usize;
    let mut h = vec![0u64; max + 1];
    for &v in d {
        if v <= limit {
            h[v as usize] += 1;
        }
    }
    h
}

/// Iterates 3x3 erosion (pixels outside the canvas count as background) and
/// returns whichever of the two steps bracketing `keep_ratio * area` lies
/// closer to it, preferring the smaller mask on a tie.
pub fn erode(m: &Mask, keep_ratio: f64) -> Mask {
    let target = keep_ratio * m.area as f64;
    let Some(b) = m.bbox() else {
        return m.clone();
    };
    if m.area as f64 <= target {
        return m.clone();
    }
    // k erosion steps keep exactly the pixels farther than k from background;
    // everything outside the bounding box is background
    let (bw, bh) = (b.width() as usize, b.height() as usize);
    let bits = m.to_bits();
    let h = m.height as usize;
    let background: Vec<bool> = (0..bw * bh)
        .map(|i| !bits[(b.x0 as usize + i / bh) * h + b.y0 as usize + i % bh])
        .collect();
    let d = chessboard_distance(&background, bw, bh, true);
    let hist = histogram(&d, u32::MAX);
    let mut prev_area = m.area;
    let mut k = 1usize;
    let steps = loop {
        let area = prev_area - hist.get(k).copied().unwrap_or(0);
        if area as f64 <= target {
            let over = prev_area as f64 - target;
            let under = target - area as f64;
            break if under <= over { k } else { k - 1 };
        }
        prev_area = area;
        k += 1;
    };
    let (x0, y0) = (b.x0, b.y0);
    Mask::from_fn(m.width, m.height, |x, y| {
        x >= x0 && y >= y0 && {
            let (lx, ly) = ((x - x0) as usize, (y - y0) as usize);
            lx < bw && ly < bh && d[lx * bh + ly] as usize > steps
        }
    })
    .expect("same canvas")
}

/// Iterates 3x3 dilation (clipped to the canvas) towards `grow_ratio * area`,
/// returning the closer bracketing step and preferring the larger mask on a tie.
pub fn dilate(m: &Mask, grow_ratio: f64) -> Mask {
    let target = grow_ratio * m.area as f64;
    if m.area as f64 >= target || m.is_empty() {
        return m.clone();
    }
    let (w, h) = (m.width as usize, m.height as usize);
    // k dilation steps set exactly the pixels within distance k of the mask
    let d = chessboard_distance(&m.to_bits(), w, h, false);
    let hist = histogram(&d, u32::MAX / 4);
    let mut prev_area = m.area;
    let mut k = 1usize;
    let steps = loop {
        let Some(&grown) = hist.get(k) else {
            // already fills the canvas
            break k - 1;
        };
        let area = prev_area + grown;
        if area as f64 >= target {
            let under = target - prev_area as f64;
            let over = area as f64 - target;
            break if over <= under { k } else { k - 1 };
        }
        prev_area = area;
        k += 1;
    };
    Mask::from_fn(m.width, m.height, |x, y| d[x as usize * h + y as usize] as usize <= steps).expect("same canvas")
}

/// Mask-size bins used for dataset analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeBin {
    /// `0 < A < 10²`
    XS,
    /// `10² ≤ A < 32²`
    S,
    /// `32² ≤ A < 96²`
    M,
    /// `A ≥ 96²`
    L,
}

impl SizeBin {
    pub const ALL: [SizeBin; 4] = [SizeBin::XS, SizeBin::S, SizeBin::M, SizeBin::L];

    pub fn from_area(area: u64) -> Result<SizeBin, MaskError> {
        match area {
            0 => Err(MaskError::EmptyMask),
            a if a < 100 => Ok(SizeBin::XS),
            a if a < 32 * 32 => Ok(SizeBin::S),
            a if a < 96 * 96 => Ok(SizeBin::M),
            _ => Ok(SizeBin::L),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SizeBin::XS => "XS",
            SizeBin::S => "S*",
            SizeBin::M => "M",
            SizeBin::L => "L",
        }
    }
}

impl fmt::Display for SizeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn size_bin(m: &Mask) -> Result<SizeBin, MaskError> {
    SizeBin::from_area(m.area)
}
