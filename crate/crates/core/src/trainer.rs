//! Direct optimization of per-pixel logits against the total objective.
//!
//! Each frame owns an `H x W x 2` logit field; its maps are the per-pixel
//! softmax. A step samples a window, draws pseudo-labels for every frame in
//! it, applies the per-frame terms to each of those frames and the CoLoc
//! term once over the window, and takes a plain SGD step.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CamPair, ConcatDirection, FrameSequence, SeedCam};
use crate::losses::{
    crf_energy, partial_cross_entropy, size_barrier_loss, weighted_coloc, Affinity, Backend,
    ColocMode, KernelConfig, LossValue, DEFAULT_LAMBDA,
};
use crate::pseudo_labels::{sample_pixels, split_regions, temporal_max, RegionSplit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// `n` consecutive frames ending at a uniform anchor.
    #[default]
    Adjacent,
    /// One uniform draw from each of `n` equal partitions.
    Interval,
    /// Distinct draws around the middle of the video.
    Gaussian,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacent" => Ok(Self::Adjacent),
            "interval" => Ok(Self::Interval),
            "gaussian" => Ok(Self::Gaussian),
            _ => Err(Error::InvalidConfig(format!(
                "unknown sampling scheme {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Sampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sampling::Adjacent => "adjacent",
            Sampling::Interval => "interval",
            Sampling::Gaussian => "gaussian",
        })
    }
}

/// Where per-frame pseudo-labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PseudoLabelSource {
    /// The frame's own seed.
    #[default]
    Frame,
    /// Per-pixel maximum of the seeds over the sampled window.
    TemporalMax,
}

impl std::str::FromStr for PseudoLabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(Self::Frame),
            "temporal-max" => Ok(Self::TemporalMax),
            _ => Err(Error::InvalidConfig(format!(
                "unknown pseudo-label source {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for PseudoLabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PseudoLabelSource::Frame => "frame",
            PseudoLabelSource::TemporalMax => "temporal-max",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_frames: usize,
    pub lambda: f64,
    pub lambda_c: f64,
    pub lambda_c_mode: ColocMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub z_init: f64,
    pub z_factor: f64,
    pub z_max: f64,
    pub sampling: Sampling,
    pub direction: ConcatDirection,
    pub seed: u64,
    pub samples_per_side: usize,
    pub size_barrier: bool,
    pub pseudo_labels: PseudoLabelSource,
    pub kernel: KernelConfig,
    /// Windows per epoch; `None` means one per frame of the video.
    pub steps_per_epoch: Option<usize>,
    /// Evaluate the window's per-frame terms on the rayon pool.
    pub parallel: bool,
    /// Record wall-clock time per step; off writes zeros.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_frames: 4,
            lambda: DEFAULT_LAMBDA,
            lambda_c: 1.0,
            lambda_c_mode: ColocMode::Adaptive,
            epochs: 10,
            learning_rate: 0.01,
            z_init: 1.0,
            z_factor: 1.01,
            z_max: 10.0,
            sampling: Sampling::Adjacent,
            direction: ConcatDirection::Horizontal,
            seed: 0,
            samples_per_side: 1,
            size_barrier: true,
            pseudo_labels: PseudoLabelSource::Frame,
            // One lattice per operator; SGD absorbs its error.
            kernel: KernelConfig {
                shifts: 1,
                ..KernelConfig::default()
            },
            steps_per_epoch: None,
            parallel: false,
            timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_frames == 0 {
            return bad("n_frames must be at least 1".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("z_init", self.z_init),
            ("z_factor", self.z_factor),
            ("z_max", self.z_max),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("lambda_c", self.lambda_c)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.z_init > self.z_max {
            return bad(format!(
                "z_init {} exceeds z_max {}",
                self.z_init, self.z_max
            ));
        }
        if self.samples_per_side == 0 {
            return bad("samples_per_side must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1".into());
        }
        self.kernel.validate()
    }
}

/// `min(z_init * z_factor^epoch, z_max)`.
pub fn z_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let e = epoch.min(i32::MAX as usize) as i32;
    (cfg.z_init * cfg.z_factor.powi(e)).min(cfg.z_max)
}

/// Two-way softmax of one pixel's logits.
pub fn softmax_pixel(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Pulls `d loss / d s` back to `d loss / d logits`.
pub fn softmax_backward(maps: &[[f64; 2]], grad: &[[f64; 2]]) -> Vec<[f64; 2]> {
    maps.iter()
        .zip(grad)
        .map(|(s, g)| {
            let d = s[0] * s[1] * (g[1] - g[0]);
            [-d, d]
        })
        .collect()
}

/// Per-frame logits of a whole video.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitField {
    height: usize,
    width: usize,
    logits: Vec<Vec<[f64; 2]>>,
}

impl LogitField {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            logits: vec![vec![[0.0; 2]; height * width]; frames],
        }
    }

    pub fn from_logits(height: usize, width: usize, logits: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        if let Some((k, l)) = logits
            .iter()
            .enumerate()
            .find(|(_, l)| l.len() != height * width)
        {
            return Err(Error::InvalidSequence(format!(
                "frame {k} has {} logits, expected {}",
                l.len(),
                height * width
            )));
        }
        if logits.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("non-finite logit".into()));
        }
        Ok(Self {
            height,
            width,
            logits,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame(&self, t: usize) -> &[[f64; 2]] {
        &self.logits[t]
    }

    pub fn softmax_maps(&self, t: usize) -> Result<CamPair> {
        let maps = self
            .logits
            .get(t)
            .ok_or_else(|| Error::OutOfRange(format!("frame {t} of {}", self.logits.len())))?
            .iter()
            .map(|&l| softmax_pixel(l))
            .collect();
        CamPair::new(self.height, self.width, maps)
    }

    /// Foreground probability of frame `t`.
    pub fn foreground(&self, t: usize) -> Vec<f64> {
        self.logits[t]
            .iter()
            .map(|&l| softmax_pixel(l)[1])
            .collect()
    }
}

/// Frame indices of one training window, ascending.
pub fn sample_window<R: Rng + ?Sized>(
    len: usize,
    n: usize,
    scheme: Sampling,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::InvalidConfig(format!(
            "window of {n} frames from a video of {len}"
        )));
    }
    Ok(match scheme {
        Sampling::Adjacent => adjacent_window(len, n, rng.random_range(0..len)),
        Sampling::Interval => (0..n)
            .map(|k| rng.random_range(k * len / n..(k + 1) * len / n))
            .collect(),
        Sampling::Gaussian => {
            let normal = Normal::new((len as f64 - 1.0) / 2.0, len as f64 / 4.0)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let mut taken = vec![false; len];
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let v = normal.sample(rng).round();
                if v >= 0.0 && v < len as f64 && !taken[v as usize] {
                    taken[v as usize] = true;
                    out.push(v as usize);
                }
            }
            out.sort_unstable();
            out
        }
    })
}

/// `{t - n + 1, ..., t}`, shifted forward to start at zero near the start.
pub fn adjacent_window(len: usize, n: usize, t: usize) -> Vec<usize> {
    let end = t.max(n - 1).min(len - 1);
    (end + 1 - n..=end).collect()
}

/// One SGD step's losses. Per-frame terms are summed over the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub z: f64,
    pub h_p: f64,
    pub r: f64,
    pub r_s: f64,
    pub r_c_raw: f64,
    pub r_c_scaled: f64,
    pub total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "step,epoch,z,H_p,R,R_s,R_c_raw,R_c_scaled,total,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.z,
                r.h_p,
                r.r,
                r.r_s,
                r.r_c_raw,
                r.r_c_scaled,
                r.total,
                r.wall_ms
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub logits: LogitField,
    pub log: TrainingLog,
}

/// Caches the pairwise operators a run needs.
struct Operators<'a> {
    video: &'a FrameSequence,
    kernel: KernelConfig,
    frames: Vec<Option<Affinity>>,
    windows: HashMap<Vec<usize>, Affinity>,
}

const WINDOW_CACHE: usize = 64;

impl<'a> Operators<'a> {
    fn new(video: &'a FrameSequence, kernel: KernelConfig) -> Self {
        Self {
            video,
            kernel,
            frames: vec![None; video.len()],
            windows: HashMap::new(),
        }
    }

    fn frame(&mut self, t: usize) -> Result<()> {
        if self.frames[t].is_none() {
            self.frames[t] = Some(Affinity::frame(
                &self.video.frames()[t],
                &self.kernel,
                Backend::Lattice,
            )?);
        }
        Ok(())
    }

    fn window(&mut self, idx: &[usize]) -> Result<&Affinity> {
        if !self.windows.contains_key(idx) {
            if self.windows.len() >= WINDOW_CACHE {
                self.windows.clear();
            }
            let frames = idx.iter().map(|&t| &self.video.frames()[t]);
            let aff = Affinity::color(frames, &self.kernel, Backend::Lattice)?;
            self.windows.insert(idx.to_vec(), aff);
        }
        Ok(&self.windows[idx])
    }
}

struct FrameTerms {
    h_p: f64,
    r: f64,
    r_s: f64,
    grad: Vec<[f64; 2]>,
}

pub fn train(video: &FrameSequence, seeds: &[SeedCam], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let len = video.len();
    if seeds.len() != len {
        return Err(Error::InvalidSequence(format!(
            "{} seeds for {len} frames",
            seeds.len()
        )));
    }
    let (h, w) = (video.height(), video.width());
    if let Some(k) = seeds.iter().position(|s| s.height() != h || s.width() != w) {
        return Err(Error::InvalidSequence(format!(
            "seed {k} does not match the frames"
        )));
    }
    if cfg.n_frames > len {
        return Err(Error::InvalidConfig(format!(
            "window of {} frames from a video of {len}",
            cfg.n_frames
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logits = LogitField::zeros(len, h, w);
    let mut log = TrainingLog::default();
    let mut ops = Operators::new(video, cfg.kernel);
    let own_splits: Vec<RegionSplit> = seeds.iter().map(split_regions).collect::<Result<_>>()?;
    let steps = cfg.steps_per_epoch.unwrap_or(len);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let z = z_schedule(cfg, epoch);
        for _ in 0..steps {
            let clock = Instant::now();
            let window = sample_window(len, cfg.n_frames, cfg.sampling, &mut rng)?;

            let pooled;
            let pooled_split;
            let (label_seeds, label_splits): (Vec<&SeedCam>, Vec<&RegionSplit>) =
                match cfg.pseudo_labels {
                    PseudoLabelSource::Frame => (
                        window.iter().map(|&t| &seeds[t]).collect(),
                        window.iter().map(|&t| &own_splits[t]).collect(),
                    ),
                    PseudoLabelSource::TemporalMax => {
                        let members: Vec<&SeedCam> = window.iter().map(|&t| &seeds[t]).collect();
                        pooled = temporal_max(&members)?;
                        pooled_split = split_regions(&pooled)?;
                        (
                            vec![&pooled; window.len()],
                            vec![&pooled_split; window.len()],
                        )
                    }
                };
            let masks = window
                .iter()
                .enumerate()
                .map(|(k, _)| {
                    sample_pixels(
                        label_seeds[k],
                        label_splits[k],
                        &mut rng,
                        cfg.samples_per_side,
                    )
                    .map(|s| s.mask)
                })
                .collect::<Result<Vec<_>>>()?;

            if cfg.lambda != 0.0 {
                for &t in &window {
                    ops.frame(t)?;
                }
            }
            let cams: Vec<CamPair> = window
                .iter()
                .map(|&t| logits.softmax_maps(t))
                .collect::<Result<_>>()?;

            let per_frame = |k: usize| -> Result<FrameTerms> {
                let cam = &cams[k];
                let pce = partial_cross_entropy(&masks[k], cam)?;
                let mut grad = pce.grad;
                let mut r = 0.0;
                if cfg.lambda != 0.0 {
                    let aff = ops.frames[window[k]].as_ref().expect("built above");
                    let crf = crf_energy(aff, cam.maps())?;
                    r = crf.value;
                    for (g, c) in grad.iter_mut().zip(&crf.grad) {
                        g[0] += cfg.lambda * c[0];
                        g[1] += cfg.lambda * c[1];
                    }
                }
                let mut r_s = 0.0;
                if cfg.size_barrier {
                    let size = size_barrier_loss(cam, z)?;
                    r_s = size.value;
                    for (g, c) in grad.iter_mut().zip(&size.grad) {
                        g[0] += c[0];
                        g[1] += c[1];
                    }
                }
                Ok(FrameTerms {
                    h_p: pce.value,
                    r,
                    r_s,
                    grad,
                })
            };
            let mut terms: Vec<FrameTerms> = if cfg.parallel {
                (0..window.len())
                    .into_par_iter()
                    .map(per_frame)
                    .collect::<Result<_>>()?
            } else {
                (0..window.len()).map(per_frame).collect::<Result<_>>()?
            };

            let (mut r_c_raw, mut r_c_scaled) = (0.0, 0.0);
            if cfg.lambda_c != 0.0 {
                let aff = ops.window(&window)?;
                let maps: Vec<[f64; 2]> =
                    cams.iter().flat_map(|c| c.maps().iter().copied()).collect();
                let raw: LossValue = crf_energy(aff, &maps)?;
                let scaled = weighted_coloc(&raw, cfg.lambda_c, cfg.lambda_c_mode);
                r_c_raw = raw.value;
                r_c_scaled = scaled.value;
                for (k, t) in terms.iter_mut().enumerate() {
                    for (g, c) in t.grad.iter_mut().zip(scaled.frame_grad(k, h * w)) {
                        g[0] += c[0];
                        g[1] += c[1];
                    }
                }
            }

            let h_p: f64 = terms.iter().map(|t| t.h_p).sum();
            let r: f64 = terms.iter().map(|t| t.r).sum();
            let r_s: f64 = terms.iter().map(|t| t.r_s).sum();
            let total = h_p + cfg.lambda * r + r_s + r_c_scaled;
            let finite = total.is_finite()
                && terms
                    .iter()
                    .all(|t| t.grad.iter().flatten().all(|g| g.is_finite()));
            if !finite {
                return Err(Error::NonFinite {
                    step,
                    detail: format!(
                        "epoch {epoch}, window {window:?}, H_p {h_p}, R {r}, R_s {r_s}, \
                         R_c raw {r_c_raw}, R_c scaled {r_c_scaled}, z {z}"
                    ),
                });
            }

            for (k, &t) in window.iter().enumerate() {
                let dl = softmax_backward(cams[k].maps(), &terms[k].grad);
                for (l, d) in logits.logits[t].iter_mut().zip(dl) {
                    l[0] -= cfg.learning_rate * d[0];
                    l[1] -= cfg.learning_rate * d[1];
                }
            }

            log.records.push(StepRecord {
                step,
                epoch,
                z,
                h_p,
                r,
                r_s,
                r_c_raw,
                r_c_scaled,
                total,
                wall_ms: if cfg.timing {
                    clock.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                },
            });
            step += 1;
        }
    }
    Ok(TrainOutput { logits, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_values() {
        assert_eq!(softmax_pixel([0.0, 0.0]), [0.5, 0.5]);
        let s = softmax_pixel([3f64.ln(), 0.0]);
        assert!((s[0] - 0.75).abs() < 1e-15 && (s[1] - 0.25).abs() < 1e-15);
        let s = softmax_pixel([1000.0, -1000.0]);
        assert_eq!(s, [1.0, 0.0]);
    }

    #[test]
    fn softmax_backward_matches_differences() {
        let f = |l: [f64; 2]| {
            let s = softmax_pixel(l);
            3.0 * s[0] - 2.0 * s[1] * s[1]
        };
        let l = [0.3, -0.8];
        let s = softmax_pixel(l);
        let g = softmax_backward(&[s], &[[3.0, -4.0 * s[1]]])[0];
        for i in 0..2 {
            let (mut a, mut b) = (l, l);
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(a) - f(b)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn z_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(z_schedule(&cfg, 0), 1.0);
        assert!((z_schedule(&cfg, 5) - 1.0510100501).abs() < 1e-10);
        assert_eq!(z_schedule(&cfg, 10_000), 10.0);
    }

    #[test]
    fn window_schemes() {
        assert_eq!(adjacent_window(10, 3, 5), vec![3, 4, 5]);
        assert_eq!(adjacent_window(10, 3, 0), vec![0, 1, 2]);
        assert_eq!(adjacent_window(10, 10, 9), (0..10).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let w = sample_window(9, 3, Sampling::Interval, &mut rng).unwrap();
            assert!(w[0] < 3 && (3..6).contains(&w[1]) && (6..9).contains(&w[2]));
            let g = sample_window(20, 6, Sampling::Gaussian, &mut rng).unwrap();
            assert!(g.windows(2).all(|p| p[0] < p[1]) && g.len() == 6);
            let a = sample_window(20, 6, Sampling::Adjacent, &mut rng).unwrap();
            assert!(a.windows(2).all(|p| p[1] == p[0] + 1) && a.len() == 6);
        }
        assert!(sample_window(3, 4, Sampling::Adjacent, &mut rng).is_err());
    }

    #[test]
    fn gaussian_window_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 10_000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let w = sample_window(100, 5, Sampling::Gaussian, &mut rng).unwrap();
            sum += w.iter().sum::<usize>() as f64 / 5.0;
        }
        assert!((sum / trials as f64 - 49.5).abs() < 1.5);
    }

    #[test]
    fn partial_ce_alone_fits_labels() {
        let frame = Frame::filled(1, 2, [10.0, 20.0, 30.0]).unwrap();
        let video = FrameSequence::new(vec![frame], ConcatDirection::Horizontal).unwrap();
        let seed = SeedCam::new(1, 2, vec![0.0, 1.0]).unwrap();
        let cfg = TrainConfig {
            n_frames: 1,
            lambda: 0.0,
            lambda_c: 0.0,
            size_barrier: false,
            learning_rate: 1.0,
            epochs: 300,
            steps_per_epoch: Some(1),
            ..TrainConfig::default()
        };
        let out = train(&video, &[seed], &cfg).unwrap();
        let cam = out.logits.softmax_maps(0).unwrap();
        assert!(
            cam.maps()[1][1] > 0.99 && cam.maps()[0][0] > 0.99,
            "{:?}",
            cam.maps()
        );
    }

    #[test]
    fn log_shape_and_adaptive_constancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Frame> = (0..5)
            .map(|_| {
                let px = (0..36)
                    .map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..255.0)))
                    .collect();
                Frame::new(6, 6, px).unwrap()
            })
            .collect();
        let seeds: Vec<SeedCam> = (0..5)
            .map(|_| SeedCam::new(6, 6, (0..36).map(|_| rng.random()).collect()).unwrap())
            .collect();
        let video = FrameSequence::new(frames, ConcatDirection::Horizontal).unwrap();
        let cfg = TrainConfig {
            n_frames: 3,
            lambda_c: 3.0,
            epochs: 3,
            kernel: KernelConfig {
                shifts: 1,
                ..KernelConfig::default()
            },
            timing: false,
            ..TrainConfig::default()
        };
        let out = train(&video, &seeds, &cfg).unwrap();
        assert_eq!(out.log.records.len(), 15);
        assert!(out.log.records.iter().all(|r| r.r_c_scaled.abs() == 3.0));
        let csv = out.log.to_csv();
        assert!(csv.starts_with(TrainingLog::HEADER));
        assert_eq!(csv.lines().count(), 16);
        assert_eq!(csv, train(&video, &seeds, &cfg).unwrap().log.to_csv());
    }
}
