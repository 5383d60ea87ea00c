//! Loss terms and their gradients with respect to the probability maps.
//!
//! Every gradient here is `d loss / d s` for the two map channels. The chain
//! rule through the softmax parameterization lives in the trainer.

use crate::error::{Error, Result};
use crate::geometry::{
    concat_cams, concat_frames, split_pixels, CamPair, CamSequence, Frame, FrameSequence, Label,
    PartialMask,
};
use crate::lattice::{GaussianFilter, BRUTE_FORCE_CAP, DEFAULT_SHIFTS};

/// Floor applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-8;

/// Default CRF weight.
pub const DEFAULT_LAMBDA: f64 = 2e-9;

/// Gaussian kernel bandwidths for the pairwise terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    /// Pixels. `f64::INFINITY` drops the spatial term.
    pub spatial_bandwidth: f64,
    /// Color units on the `[0, 255]` scale.
    pub color_bandwidth: f64,
    /// Shifted lattices averaged by the fast backend.
    pub shifts: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            spatial_bandwidth: 100.0,
            color_bandwidth: 15.0,
            shifts: DEFAULT_SHIFTS,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spatial_bandwidth > 0.0) || !(self.color_bandwidth > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bandwidths must be positive, got spatial {} and color {}",
                self.spatial_bandwidth, self.color_bandwidth
            )));
        }
        if !self.color_bandwidth.is_finite() {
            return Err(Error::InvalidConfig(
                "color bandwidth must be finite".into(),
            ));
        }
        if self.shifts == 0 {
            return Err(Error::InvalidConfig("shifts must be at least 1".into()));
        }
        Ok(())
    }
}

/// A loss value with its per-pixel, per-channel gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// `[d/ds0, d/ds1]` per pixel. Sequence losses lay frames out one after
    /// another in sequence order.
    pub grad: Vec<[f64; 2]>,
    /// Set when the term fell back to zero for lack of input.
    pub degenerate: bool,
}

impl LossValue {
    pub fn zero(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![[0.0; 2]; len],
            degenerate: false,
        }
    }

    /// Gradient block of frame `k` in a sequence of frames of `frame_len` pixels.
    pub fn frame_grad(&self, k: usize, frame_len: usize) -> &[[f64; 2]] {
        &self.grad[k * frame_len..(k + 1) * frame_len]
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.value *= factor;
        self.grad.iter_mut().for_each(|g| {
            g[0] *= factor;
            g[1] *= factor;
        });
        self
    }
}

/// How `W v` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Lattice,
    /// Explicit `O(N^2)` sums, capped at [`BRUTE_FORCE_CAP`] pixels.
    Exact,
}

#[derive(Debug, Clone)]
enum Operator {
    Lattice(GaussianFilter),
    Exact { features: Vec<f64>, dim: usize },
}

/// The affinity matrix `W` (zero diagonal) of one pixel set, with `W 1`
/// cached.
#[derive(Debug, Clone)]
pub struct Affinity {
    op: Operator,
    n: usize,
    ones: Vec<f64>,
}

impl Affinity {
    /// Builds from row-major `N x d` features already divided by bandwidths.
    pub fn from_features(
        features: Vec<f64>,
        dim: usize,
        backend: Backend,
        shifts: usize,
    ) -> Result<Self> {
        if dim == 0 || features.is_empty() || !features.len().is_multiple_of(dim) {
            return Err(Error::InvalidFeature(format!(
                "{} values do not form points of dimension {dim}",
                features.len()
            )));
        }
        let n = features.len() / dim;
        let op = match backend {
            Backend::Lattice => {
                Operator::Lattice(GaussianFilter::from_flat(&features, dim, shifts)?)
            }
            Backend::Exact => {
                if n > BRUTE_FORCE_CAP {
                    return Err(Error::ResourceLimit(format!(
                        "{n} pixels exceeds the exact-backend cap of {BRUTE_FORCE_CAP}"
                    )));
                }
                if features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidFeature("non-finite feature".into()));
                }
                Operator::Exact { features, dim }
            }
        };
        let mut aff = Self {
            op,
            n,
            ones: Vec::new(),
        };
        aff.ones = aff.apply(&vec![1.0; n], 1)?;
        Ok(aff)
    }

    /// Bilateral position-and-color affinity of one frame.
    pub fn frame(frame: &Frame, cfg: &KernelConfig, backend: Backend) -> Result<Self> {
        Self::frame_at(frame, cfg, backend, [0.0, 0.0])
    }

    /// As [`Affinity::frame`], with pixel `(row, col)` placed at
    /// `origin + (row, col)`.
    pub fn frame_at(
        frame: &Frame,
        cfg: &KernelConfig,
        backend: Backend,
        origin: [f64; 2],
    ) -> Result<Self> {
        cfg.validate()?;
        let spatial = cfg.spatial_bandwidth.is_finite();
        let dim = if spatial { 5 } else { 3 };
        let w = frame.width();
        let mut features = Vec::with_capacity(frame.len() * dim);
        for (i, c) in frame.pixels().iter().enumerate() {
            if spatial {
                features.push((origin[0] + (i / w) as f64) / cfg.spatial_bandwidth);
                features.push((origin[1] + (i % w) as f64) / cfg.spatial_bandwidth);
            }
            features.extend(c.iter().map(|v| v / cfg.color_bandwidth));
        }
        Self::from_features(features, dim, backend, cfg.shifts)
    }

    /// Color-only affinity over every pixel of `frames` (any layout).
    pub fn color<'a>(
        frames: impl IntoIterator<Item = &'a Frame>,
        cfg: &KernelConfig,
        backend: Backend,
    ) -> Result<Self> {
        cfg.validate()?;
        let features: Vec<f64> = frames
            .into_iter()
            .flat_map(|f| f.pixels().iter())
            .flat_map(|c| c.iter().map(|v| v / cfg.color_bandwidth))
            .collect();
        Self::from_features(features, 3, backend, cfg.shifts)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `W 1`.
    pub fn ones(&self) -> &[f64] {
        &self.ones
    }

    /// `W v` for a row-major `N x channels` signal.
    pub fn apply(&self, values: &[f64], channels: usize) -> Result<Vec<f64>> {
        match &self.op {
            Operator::Lattice(f) => f.affinity(values, channels, false),
            Operator::Exact { features, dim } => {
                if channels == 0 || values.len() != self.n * channels {
                    return Err(Error::Shape {
                        expected: self.n * channels.max(1),
                        actual: values.len(),
                    });
                }
                let d = *dim;
                let mut out = vec![0.0; values.len()];
                let mut acc = vec![Compensated::default(); channels];
                for i in 0..self.n {
                    let fi = &features[i * d..(i + 1) * d];
                    acc.fill(Compensated::default());
                    for j in 0..self.n {
                        if i == j {
                            continue;
                        }
                        let fj = &features[j * d..(j + 1) * d];
                        let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
                        let k = (-0.5 * d2).exp();
                        for (c, a) in acc.iter_mut().enumerate() {
                            a.add(k * values[j * channels + c]);
                        }
                    }
                    for (c, a) in acc.iter().enumerate() {
                        out[i * channels + c] = a.total();
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

/// `sum_r S^r' W (1 - S^r)` and its gradient `W 1 - 2 W S^r` per channel.
pub fn crf_energy(aff: &Affinity, maps: &[[f64; 2]]) -> Result<LossValue> {
    if maps.len() != aff.len() {
        return Err(Error::Shape {
            expected: aff.len(),
            actual: maps.len(),
        });
    }
    let flat: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let ws = aff.apply(&flat, 2)?;
    let ones = aff.ones();
    let mut value = Compensated::default();
    let mut grad = Vec::with_capacity(maps.len());
    for (i, m) in maps.iter().enumerate() {
        let mut g = [0.0; 2];
        for r in 0..2 {
            let wsr = ws[2 * i + r];
            value.add(m[r] * (ones[i] - wsr));
            g[r] = ones[i] - 2.0 * wsr;
        }
        grad.push(g);
    }
    Ok(LossValue {
        value: value.total(),
        grad,
        degenerate: false,
    })
}

fn check_same(cam: &CamPair, height: usize, width: usize) -> Result<()> {
    if !cam.same_shape(height, width) {
        return Err(Error::Shape {
            expected: height * width,
            actual: cam.len(),
        });
    }
    Ok(())
}

/// Cross-entropy over the labeled pixels of `mask`. An empty mask gives a
/// zero loss with the degenerate flag set.
pub fn partial_cross_entropy(mask: &PartialMask, cam: &CamPair) -> Result<LossValue> {
    check_same(cam, mask.height(), mask.width())?;
    let mut out = LossValue::zero(cam.len());
    out.degenerate = mask.sampled().is_empty();
    for &p in mask.sampled() {
        let r = match mask.label(p) {
            Label::Foreground => 1,
            Label::Background => 0,
            Label::Unknown => continue,
        };
        let s = cam.maps()[p][r].max(LOG_FLOOR);
        out.value -= s.ln();
        out.grad[p][r] -= 1.0 / s;
    }
    Ok(out)
}

/// Per-frame CRF loss with the bilateral kernel.
pub fn crf_frame_loss(cam: &CamPair, frame: &Frame, cfg: &KernelConfig) -> Result<LossValue> {
    crf_frame_loss_with(cam, frame, cfg, Backend::Lattice, [0.0, 0.0])
}

/// [`crf_frame_loss`] with an explicit backend and pixel-coordinate origin.
pub fn crf_frame_loss_with(
    cam: &CamPair,
    frame: &Frame,
    cfg: &KernelConfig,
    backend: Backend,
    origin: [f64; 2],
) -> Result<LossValue> {
    check_same(cam, frame.height(), frame.width())?;
    let aff = Affinity::frame_at(frame, cfg, backend, origin)?;
    crf_energy(&aff, cam.maps())
}

fn check_aligned(frames: &FrameSequence, cams: &CamSequence) -> Result<()> {
    if frames.is_empty() || cams.is_empty() {
        return Err(Error::InvalidSequence("empty window".into()));
    }
    if frames.len() != cams.len()
        || frames.height() != cams.height()
        || frames.width() != cams.width()
    {
        return Err(Error::InvalidSequence(format!(
            "{} frames of {}x{} vs {} maps of {}x{}",
            frames.len(),
            frames.height(),
            frames.width(),
            cams.len(),
            cams.height(),
            cams.width()
        )));
    }
    Ok(())
}

/// Color-only CRF over the concatenation of the window. The gradient comes
/// back per frame in sequence order.
pub fn coloc_loss(
    frames: &FrameSequence,
    cams: &CamSequence,
    cfg: &KernelConfig,
) -> Result<LossValue> {
    coloc_loss_with(frames, cams, cfg, Backend::Lattice)
}

pub fn coloc_loss_with(
    frames: &FrameSequence,
    cams: &CamSequence,
    cfg: &KernelConfig,
    backend: Backend,
) -> Result<LossValue> {
    check_aligned(frames, cams)?;
    let composite = concat_frames(frames)?;
    let maps = concat_cams(&cams.clone().with_direction(frames.direction()))?;
    let aff = Affinity::color([&composite], cfg, backend)?;
    let mut out = crf_energy(&aff, maps.maps())?;
    let (h, w, n) = (frames.height(), frames.width(), frames.len());
    out.grad = split_pixels(&out.grad, h, w, n, frames.direction())
        .into_iter()
        .flatten()
        .collect();
    Ok(out)
}

/// Log-barrier on both region sizes, `-(1/z) sum_r log psi(S^r)`.
pub fn size_barrier_loss(cam: &CamPair, z: f64) -> Result<LossValue> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::InvalidConfig(format!("z must be positive, got {z}")));
    }
    let mut psi = [0.0f64; 2];
    for m in cam.maps() {
        psi[0] += m[0];
        psi[1] += m[1];
    }
    if psi.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::DegenerateMap(format!(
            "region sizes {psi:?}: a channel is empty"
        )));
    }
    let psi = psi.map(|p| p.max(LOG_FLOOR));
    let g = [-1.0 / (z * psi[0]), -1.0 / (z * psi[1])];
    Ok(LossValue {
        value: -(psi[0].ln() + psi[1].ln()) / z,
        grad: vec![g; cam.len()],
        degenerate: false,
    })
}

/// Rescales a raw CoLoc loss so its value is exactly `sign(R) * lambda_c`;
/// `|R|` is held constant. A zero raw value gives zero with the degenerate
/// flag set.
pub fn adaptive_coloc_term(raw: &LossValue, lambda_c: f64) -> LossValue {
    if raw.value == 0.0 {
        let mut out = LossValue::zero(raw.grad.len());
        out.degenerate = true;
        return out;
    }
    let factor = lambda_c / raw.value.abs();
    let mut out = raw.clone().scaled(factor);
    out.value = raw.value.signum() * lambda_c;
    out
}

/// Weighting of the CoLoc term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColocMode {
    /// Scaled by `lambda_c / |R_c|`.
    #[default]
    Adaptive,
    /// Scaled by `lambda_c` directly.
    Constant,
}

impl std::str::FromStr for ColocMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "constant" => Ok(Self::Constant),
            _ => Err(Error::InvalidConfig(format!("unknown lambda_c mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for ColocMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ColocMode::Adaptive => "adaptive",
            ColocMode::Constant => "constant",
        })
    }
}

/// Applies the configured CoLoc weighting to a raw loss.
pub fn weighted_coloc(raw: &LossValue, lambda_c: f64, mode: ColocMode) -> LossValue {
    match mode {
        ColocMode::Adaptive => adaptive_coloc_term(raw, lambda_c),
        ColocMode::Constant => raw.clone().scaled(lambda_c),
    }
}

/// Per-term weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_c: f64,
    pub mode: ColocMode,
    pub z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            lambda_c: 1.0,
            mode: ColocMode::Adaptive,
            z: 1.0,
        }
    }
}

/// Unweighted components of one total-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub partial_ce: f64,
    pub crf: f64,
    pub size: f64,
    pub coloc_raw: f64,
    pub coloc_scaled: f64,
}

/// Total objective for target frame `t`, the last frame of the window.
/// Per-frame terms land on `t` only; the CoLoc gradient lands on every
/// window frame. `grad` covers the whole window in sequence order.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub grad: Vec<[f64; 2]>,
    pub parts: LossParts,
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    mask: &PartialMask,
    cam_t: &CamPair,
    frame_t: &Frame,
    frames: &FrameSequence,
    cams: &CamSequence,
    cfg: &KernelConfig,
    weights: &LossWeights,
    backend: Backend,
) -> Result<TotalLoss> {
    check_aligned(frames, cams)?;
    check_same(cam_t, frame_t.height(), frame_t.width())?;
    check_same(cam_t, frames.height(), frames.width())?;
    let hw = frame_t.len();
    let n = frames.len();

    let pce = partial_cross_entropy(mask, cam_t)?;
    let crf = crf_frame_loss_with(cam_t, frame_t, cfg, backend, [0.0, 0.0])?;
    let size = size_barrier_loss(cam_t, weights.z)?;
    let raw = coloc_loss_with(frames, cams, cfg, backend)?;
    let coloc = weighted_coloc(&raw, weights.lambda_c, weights.mode);

    let mut grad = coloc.grad;
    let tail = &mut grad[(n - 1) * hw..];
    for (p, g) in tail.iter_mut().enumerate() {
        for r in 0..2 {
            g[r] += pce.grad[p][r] + weights.lambda * crf.grad[p][r] + size.grad[p][r];
        }
    }
    let parts = LossParts {
        partial_ce: pce.value,
        crf: crf.value,
        size: size.value,
        coloc_raw: raw.value,
        coloc_scaled: coloc.value,
    };
    Ok(TotalLoss {
        value: pce.value + weights.lambda * crf.value + size.value + coloc.value,
        grad,
        parts,
    })
}
