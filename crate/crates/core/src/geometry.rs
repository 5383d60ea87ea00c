//! Value types shared by every module.
//!
//! Pixels are stored row-major with the origin at the top-left corner, so the
//! flat index of `(row, col)` is `row * width + col`. Colors are kept in the
//! raw `[0, 255]` range so kernel bandwidths apply without rescaling.

use crate::error::{Error, Result};

/// Tolerance for the per-pixel `s0 + s1 = 1` check.
pub const PROB_SUM_TOL: f64 = 1e-6;

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions(format!(
            "{height}x{width}: both sides must be at least 1"
        )));
    }
    if height * width != len {
        return Err(Error::Shape {
            expected: height * width,
            actual: len,
        });
    }
    Ok(())
}

/// An RGB frame with real-valued channels in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    rgb: Vec<[f64; 3]>,
}

impl Frame {
    pub fn new(height: usize, width: usize, rgb: Vec<[f64; 3]>) -> Result<Self> {
        check_dims(height, width, rgb.len())?;
        if let Some((i, px)) = rgb
            .iter()
            .enumerate()
            .find(|(_, px)| px.iter().any(|c| !(0.0..=255.0).contains(c)))
        {
            return Err(Error::OutOfRange(format!(
                "pixel {i} has color {px:?} outside [0, 255]"
            )));
        }
        Ok(Self { height, width, rgb })
    }

    /// A frame filled with one color.
    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Result<Self> {
        Self::new(height, width, vec![color; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.rgb
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.rgb[row * self.width + col]
    }
}

/// Two-channel (background, foreground) probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct CamPair {
    height: usize,
    width: usize,
    maps: Vec<[f64; 2]>,
}

impl CamPair {
    pub fn new(height: usize, width: usize, maps: Vec<[f64; 2]>) -> Result<Self> {
        check_dims(height, width, maps.len())?;
        for (i, s) in maps.iter().enumerate() {
            if !(s[0] >= 0.0 && s[1] >= 0.0 && (s[0] + s[1] - 1.0).abs() <= PROB_SUM_TOL) {
                return Err(Error::OutOfRange(format!(
                    "pixel {i} has probabilities {s:?}; expected non-negative pair summing to 1"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            maps,
        })
    }

    /// Builds a pair from a foreground map; background is `1 - fg`.
    pub fn from_foreground(height: usize, width: usize, fg: &[f64]) -> Result<Self> {
        Self::new(height, width, fg.iter().map(|&p| [1.0 - p, p]).collect())
    }

    /// All pixels at `(0.5, 0.5)`.
    pub fn uniform(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![[0.5, 0.5]; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[[f64; 2]] {
        &self.maps
    }

    pub fn channel(&self, r: usize) -> Vec<f64> {
        self.maps.iter().map(|s| s[r]).collect()
    }

    /// Foreground channel as a scalar map.
    pub fn foreground(&self) -> SeedCam {
        SeedCam {
            height: self.height,
            width: self.width,
            values: self.channel(1),
        }
    }

    pub fn same_shape(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

/// Scalar map with values in `[0, 1]`; used both for frozen classifier CAMs
/// and for foreground maps handed to box extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedCam {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SeedCam {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::OutOfRange(format!(
                "seed value {v} at pixel {i} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Min-max normalizes arbitrary finite values into `[0, 1]`. A constant
    /// input maps to all zeros.
    pub fn from_raw(height: usize, width: usize, raw: &[f64]) -> Result<Self> {
        check_dims(height, width, raw.len())?;
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("non-finite seed value".into()));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let values = if span > 0.0 {
            raw.iter()
                .map(|v| ((v - lo) / span).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Per-pixel pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Background,
    Foreground,
    Unknown,
}

/// Sparse pseudo-label mask. `sampled` lists the flat indices of every pixel
/// not labeled [`Label::Unknown`], in the order they were drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialMask {
    height: usize,
    width: usize,
    labels: Vec<Label>,
    sampled: Vec<usize>,
}

impl PartialMask {
    pub fn empty(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width, height * width)?;
        Ok(Self {
            height,
            width,
            labels: vec![Label::Unknown; height * width],
            sampled: Vec::new(),
        })
    }

    /// Builds a mask from `(flat index, label)` pairs. Unknown labels and
    /// out-of-range indices are rejected.
    pub fn from_labels(height: usize, width: usize, entries: &[(usize, Label)]) -> Result<Self> {
        let mut mask = Self::empty(height, width)?;
        for &(idx, label) in entries {
            mask.set(idx, label)?;
        }
        Ok(mask)
    }

    /// Labels one pixel. Relabeling keeps the pixel's original position in
    /// the sampled list.
    pub fn set(&mut self, idx: usize, label: Label) -> Result<()> {
        if idx >= self.labels.len() {
            return Err(Error::OutOfRange(format!(
                "pixel {idx} outside {}x{} mask",
                self.height, self.width
            )));
        }
        if label == Label::Unknown {
            return Err(Error::OutOfRange("cannot sample a pixel as unknown".into()));
        }
        if self.labels[idx] == Label::Unknown {
            self.sampled.push(idx);
        }
        self.labels[idx] = label;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn sampled(&self) -> &[usize] {
        &self.sampled
    }

    pub fn label(&self, idx: usize) -> Label {
        self.labels[idx]
    }

    pub fn count(&self, label: Label) -> usize {
        self.sampled
            .iter()
            .filter(|&&i| self.labels[i] == label)
            .count()
    }
}

/// Axis-aligned box with half-open extents: `x_max`, `y_max` are one past the
/// last covered column/row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::OutOfRange(format!(
                "empty box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Like [`BBox::new`] but also requires the box to fit in a
    /// `width x height` image.
    pub fn within(
        x_min: usize,
        y_min: usize,
        x_max: usize,
        y_max: usize,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let b = Self::new(x_min, y_min, x_max, y_max)?;
        if x_max > width || y_max > height {
            return Err(Error::OutOfRange(format!(
                "box ({x_min},{y_min},{x_max},{y_max}) exceeds {width}x{height} image"
            )));
        }
        Ok(b)
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: width,
            y_max: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

/// Layout used when stacking a window of frames into one composite image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConcatDirection {
    #[default]
    Horizontal,
    Vertical,
}

impl std::str::FromStr for ConcatDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" | "h" => Ok(Self::Horizontal),
            "vertical" | "v" => Ok(Self::Vertical),
            other => Err(Error::InvalidConfig(format!(
                "unknown concat direction {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ConcatDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConcatDirection::Horizontal => "horizontal",
            ConcatDirection::Vertical => "vertical",
        })
    }
}

/// Places pixel `(row, col)` of member `k` in the composite image.
fn composite_index(
    k: usize,
    row: usize,
    col: usize,
    height: usize,
    width: usize,
    n: usize,
    dir: ConcatDirection,
) -> usize {
    match dir {
        ConcatDirection::Horizontal => row * (width * n) + k * width + col,
        ConcatDirection::Vertical => (k * height + row) * width + col,
    }
}

fn composite_dims(height: usize, width: usize, n: usize, dir: ConcatDirection) -> (usize, usize) {
    match dir {
        ConcatDirection::Horizontal => (height, width * n),
        ConcatDirection::Vertical => (height * n, width),
    }
}

fn concat_pixels<T: Copy + Default>(
    members: &[&[T]],
    height: usize,
    width: usize,
    dir: ConcatDirection,
) -> Vec<T> {
    let n = members.len();
    let mut out = vec![T::default(); n * height * width];
    for (k, m) in members.iter().enumerate() {
        for row in 0..height {
            for col in 0..width {
                out[composite_index(k, row, col, height, width, n, dir)] = m[row * width + col];
            }
        }
    }
    out
}

pub(crate) fn split_pixels<T: Copy>(
    composite: &[T],
    height: usize,
    width: usize,
    n: usize,
    dir: ConcatDirection,
) -> Vec<Vec<T>> {
    (0..n)
        .map(|k| {
            let mut v = Vec::with_capacity(height * width);
            for row in 0..height {
                for col in 0..width {
                    v.push(composite[composite_index(k, row, col, height, width, n, dir)]);
                }
            }
            v
        })
        .collect()
}

/// Ordered window of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    direction: ConcatDirection,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, direction: ConcatDirection) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidSequence("sequence has no frames".into()))?;
        let (h, w) = (first.height(), first.width());
        if let Some((k, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.height() != h || f.width() != w)
        {
            return Err(Error::InvalidSequence(format!(
                "frame {k} is {}x{}, expected {h}x{w}",
                f.height(),
                f.width()
            )));
        }
        Ok(Self { frames, direction })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn direction(&self) -> ConcatDirection {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn with_direction(mut self, direction: ConcatDirection) -> Self {
        self.direction = direction;
        self
    }

    /// Sub-window with the given member indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames.get(i).cloned().ok_or_else(|| {
                    Error::InvalidSequence(format!("index {i} out of {}", self.frames.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, self.direction)
    }
}

/// Ordered window of equally sized CAM pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CamSequence {
    cams: Vec<CamPair>,
    direction: ConcatDirection,
}

impl CamSequence {
    pub fn new(cams: Vec<CamPair>, direction: ConcatDirection) -> Result<Self> {
        let first = cams
            .first()
            .ok_or_else(|| Error::InvalidSequence("sequence has no maps".into()))?;
        let (h, w) = (first.height(), first.width());
        if let Some((k, c)) = cams.iter().enumerate().find(|(_, c)| !c.same_shape(h, w)) {
            return Err(Error::InvalidSequence(format!(
                "map {k} is {}x{}, expected {h}x{w}",
                c.height(),
                c.width()
            )));
        }
        Ok(Self { cams, direction })
    }

    pub fn cams(&self) -> &[CamPair] {
        &self.cams
    }

    pub fn with_direction(mut self, direction: ConcatDirection) -> Self {
        self.direction = direction;
        self
    }

    pub fn direction(&self) -> ConcatDirection {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.cams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cams.is_empty()
    }

    pub fn height(&self) -> usize {
        self.cams[0].height()
    }

    pub fn width(&self) -> usize {
        self.cams[0].width()
    }
}

/// Stacks the sequence into one composite frame of `n * H * W` pixels.
pub fn concat_frames(seq: &FrameSequence) -> Result<Frame> {
    let (h, w, n) = (seq.height(), seq.width(), seq.len());
    let members: Vec<&[[f64; 3]]> = seq.frames.iter().map(|f| f.pixels()).collect();
    let (ch, cw) = composite_dims(h, w, n, seq.direction);
    Frame::new(ch, cw, concat_pixels(&members, h, w, seq.direction))
}

/// Inverse of [`concat_frames`].
pub fn split_frames(
    composite: &Frame,
    n: usize,
    direction: ConcatDirection,
) -> Result<FrameSequence> {
    let (h, w) = member_dims(composite.height(), composite.width(), n, direction)?;
    let frames = split_pixels(composite.pixels(), h, w, n, direction)
        .into_iter()
        .map(|px| Frame::new(h, w, px))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, direction)
}

/// Stacks the CAM sequence with the same layout as [`concat_frames`].
pub fn concat_cams(seq: &CamSequence) -> Result<CamPair> {
    let (h, w, n) = (seq.height(), seq.width(), seq.len());
    let members: Vec<&[[f64; 2]]> = seq.cams.iter().map(|c| c.maps()).collect();
    let (ch, cw) = composite_dims(h, w, n, seq.direction);
    CamPair::new(ch, cw, concat_pixels(&members, h, w, seq.direction))
}

/// Inverse of [`concat_cams`].
pub fn split_cams(
    composite: &CamPair,
    n: usize,
    direction: ConcatDirection,
) -> Result<CamSequence> {
    let (h, w) = member_dims(composite.height(), composite.width(), n, direction)?;
    let cams = split_pixels(composite.maps(), h, w, n, direction)
        .into_iter()
        .map(|m| CamPair::new(h, w, m))
        .collect::<Result<Vec<_>>>()?;
    CamSequence::new(cams, direction)
}

fn member_dims(
    height: usize,
    width: usize,
    n: usize,
    direction: ConcatDirection,
) -> Result<(usize, usize)> {
    let bad = || {
        Error::InvalidSequence(format!(
            "{height}x{width} composite cannot be split into {n} {direction:?} members"
        ))
    };
    if n == 0 {
        return Err(bad());
    }
    match direction {
        ConcatDirection::Horizontal if width.is_multiple_of(n) => Ok((height, width / n)),
        ConcatDirection::Vertical if height.is_multiple_of(n) => Ok((height / n, width)),
        _ => Err(bad()),
    }
}
