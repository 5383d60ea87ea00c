//! Synthetic videos of one moving object with ground-truth boxes and
//! corrupted seed CAMs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{BBox, ConcatDirection, Frame, FrameSequence, SeedCam};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Rectangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    /// Constant velocity, reflecting off the borders.
    Linear,
    /// Oscillation about the frame center along a random direction.
    Sinusoidal,
    /// A jump of `speed` pixels in a random direction every frame.
    Teleport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Flat,
    /// Two colors split by a random line.
    TwoTone,
    /// Value-noise blotches of the two background colors.
    Noise,
}

macro_rules! named_enum {
    ($ty:ident, $($name:literal => $v:ident),+) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$v),)+
                    _ => Err(Error::InvalidConfig(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), s
                    ))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self {
                    $($ty::$v => $name,)+
                })
            }
        }
    };
}
named_enum!(Shape, "disk" => Disk, "rectangle" => Rectangle);
named_enum!(Motion, "linear" => Linear, "sinusoidal" => Sinusoidal, "teleport" => Teleport);
named_enum!(Background, "flat" => Flat, "two-tone" => TwoTone, "noise" => Noise);

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape: Shape,
    pub object_color: [f64; 3],
    /// Disk radius or rectangle half-side, pixels.
    pub extent: f64,
    pub motion: Motion,
    /// Pixels per frame (linear, teleport) or oscillation amplitude
    /// (sinusoidal).
    pub speed: f64,
    pub background: Background,
    pub background_colors: [[f64; 3]; 2],
    /// Per-pixel uniform color jitter, color units.
    pub pixel_noise: f64,
    /// Fraction of object pixels zeroed in the seed.
    pub under_activation: f64,
    /// Gaussian blur sigma of the seed, pixels. Zero disables.
    pub blur: f64,
    /// False-activation blobs per frame.
    pub false_blobs: usize,
    /// Blob peak relative to the object's activation.
    pub blob_strength: f64,
    pub blob_radius: f64,
    /// Fraction of frames whose object activation is scaled by `weak_gain`.
    pub weak_fraction: f64,
    pub weak_gain: f64,
    /// Object color change per frame, color units on every channel.
    pub color_drift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            height: 64,
            width: 64,
            shape: Shape::Disk,
            object_color: [210.0, 50.0, 40.0],
            extent: 9.0,
            motion: Motion::Linear,
            speed: 1.5,
            background: Background::Noise,
            background_colors: [[60.0, 130.0, 70.0], [70.0, 80.0, 160.0]],
            pixel_noise: 10.0,
            under_activation: 0.5,
            blur: 2.0,
            false_blobs: 1,
            blob_strength: 1.0,
            blob_radius: 6.0,
            weak_fraction: 0.0,
            weak_gain: 1.0,
            color_drift: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("frames, height and width must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.under_activation) {
            return bad(format!(
                "under_activation {} outside [0, 1]",
                self.under_activation
            ));
        }
        if !(0.0..=1.0).contains(&self.weak_fraction) {
            return bad(format!(
                "weak_fraction {} outside [0, 1]",
                self.weak_fraction
            ));
        }
        if !(self.extent > 0.0) || 2.0 * self.extent >= self.height.min(self.width) as f64 {
            return bad(format!(
                "extent {} does not fit a {}x{} frame",
                self.extent, self.height, self.width
            ));
        }
        let colors = self.background_colors.iter().chain([&self.object_color]);
        if colors.flatten().any(|c| !(0.0..=255.0).contains(c)) {
            return bad("colors must lie in [0, 255]".into());
        }
        for (name, v) in [
            ("speed", self.speed),
            ("pixel_noise", self.pixel_noise),
            ("blur", self.blur),
            ("blob_strength", self.blob_strength),
            ("blob_radius", self.blob_radius),
            ("weak_gain", self.weak_gain),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// One generated clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub frames: FrameSequence,
    pub boxes: Vec<BBox>,
    pub seeds: Vec<SeedCam>,
    /// Object masks, row-major.
    pub masks: Vec<Vec<bool>>,
    /// Some teleport jump had to be clamped to stay in frame.
    pub clamped: bool,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let background = render_background(cfg, &mut rng);
    let (centers, clamped) = trajectory(cfg, &mut rng);

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    let mut seeds = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    let weak = sample(
        &mut rng,
        cfg.frames,
        (cfg.weak_fraction * cfg.frames as f64).round() as usize,
    );
    let mut is_weak = vec![false; cfg.frames];
    weak.iter().for_each(|k| is_weak[k] = true);

    for (k, &center) in centers.iter().enumerate() {
        let mask = object_mask(cfg, center);
        let color = cfg
            .object_color
            .map(|c| (c + cfg.color_drift * k as f64).clamp(0.0, 255.0));
        let pixels: Vec<[f64; 3]> = (0..h * w)
            .map(|p| {
                let base = if mask[p] { color } else { background[p] };
                base.map(|c| (c + cfg.pixel_noise * (rng.random::<f64>() - 0.5)).clamp(0.0, 255.0))
            })
            .collect();
        frames.push(Frame::new(h, w, pixels)?);
        boxes.push(tight_box(&mask, h, w)?);
        let gain = if is_weak[k] { cfg.weak_gain } else { 1.0 };
        seeds.push(seed_cam(cfg, &mask, gain, &mut rng)?);
        masks.push(mask);
    }
    Ok(SynthVideo {
        frames: FrameSequence::new(frames, ConcatDirection::Horizontal)?,
        boxes,
        seeds,
        masks,
        clamped,
    })
}

/// `count` clips whose seeds derive from `base.seed`.
pub fn generate_benchmark(base: &SynthConfig, count: usize) -> Result<Vec<SynthVideo>> {
    (0..count)
        .map(|i| {
            generate(&SynthConfig {
                seed: base.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect()
}

fn render_background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (h, w) = (cfg.height, cfg.width);
    let [a, b] = cfg.background_colors;
    let mix = |t: f64| [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t);
    match cfg.background {
        Background::Flat => vec![a; h * w],
        Background::TwoTone => {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let (cy, cx) = (
                rng.random::<f64>() * h as f64,
                rng.random::<f64>() * w as f64,
            );
            (0..h * w)
                .map(|p| {
                    let (y, x) = ((p / w) as f64 - cy, (p % w) as f64 - cx);
                    if x * angle.cos() + y * angle.sin() > 0.0 {
                        b
                    } else {
                        a
                    }
                })
                .collect()
        }
        Background::Noise => {
            let cell = 16.0;
            let gh = (h as f64 / cell).ceil() as usize + 2;
            let gw = (w as f64 / cell).ceil() as usize + 2;
            let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            (0..h * w)
                .map(|p| {
                    let (y, x) = ((p / w) as f64 / cell, (p % w) as f64 / cell);
                    let (i, j) = (y as usize, x as usize);
                    let (ty, tx) = (smooth(y.fract()), smooth(x.fract()));
                    let g = |r: usize, c: usize| grid[r * gw + c];
                    let top = g(i, j) + (g(i, j + 1) - g(i, j)) * tx;
                    let bottom = g(i + 1, j) + (g(i + 1, j + 1) - g(i + 1, j)) * tx;
                    let t = top + (bottom - top) * ty;
                    mix(if t > 0.5 { 1.0 } else { 0.0 })
                })
                .collect()
        }
    }
}

/// Object centers (row, col) per frame and whether any was clamped.
fn trajectory(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, bool) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let e = cfg.extent;
    let lo = [e, e];
    let hi = [h - e, w - e];
    let start = [
        rng.random_range(lo[0]..hi[0]),
        rng.random_range(lo[1]..hi[1]),
    ];
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let dir = [angle.sin(), angle.cos()];
    let mut clamped = false;
    let centers = match cfg.motion {
        Motion::Linear => {
            let mut pos = start;
            let mut vel = dir.map(|d| d * cfg.speed);
            (0..cfg.frames)
                .map(|_| {
                    let out = pos;
                    for i in 0..2 {
                        pos[i] += vel[i];
                        if pos[i] < lo[i] {
                            pos[i] = 2.0 * lo[i] - pos[i];
                            vel[i] = -vel[i];
                        } else if pos[i] > hi[i] {
                            pos[i] = 2.0 * hi[i] - pos[i];
                            vel[i] = -vel[i];
                        }
                        pos[i] = pos[i].clamp(lo[i], hi[i]);
                    }
                    out
                })
                .collect()
        }
        Motion::Sinusoidal => {
            let mid = [h / 2.0, w / 2.0];
            let amp = [0, 1].map(|i| (cfg.speed * dir[i].abs()).min(hi[i] - mid[i]));
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            (0..cfg.frames)
                .map(|k| {
                    let s = (phase + k as f64 * 0.4).sin();
                    [0, 1].map(|i| mid[i] + amp[i] * dir[i].signum() * s)
                })
                .collect()
        }
        Motion::Teleport => {
            let mut pos = start;
            let mut out = vec![pos];
            for _ in 1..cfg.frames {
                let mut next = pos;
                let mut ok = false;
                for _ in 0..64 {
                    let a = rng.random::<f64>() * std::f64::consts::TAU;
                    next = [pos[0] + cfg.speed * a.sin(), pos[1] + cfg.speed * a.cos()];
                    if (0..2).all(|i| next[i] >= lo[i] && next[i] <= hi[i]) {
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    clamped = true;
                    next = [0, 1].map(|i| next[i].clamp(lo[i], hi[i]));
                }
                pos = next;
                out.push(pos);
            }
            out
        }
    };
    (centers, clamped)
}

fn object_mask(cfg: &SynthConfig, center: [f64; 2]) -> Vec<bool> {
    let (h, w) = (cfg.height, cfg.width);
    let e = cfg.extent;
    (0..h * w)
        .map(|p| {
            let y = (p / w) as f64 + 0.5 - center[0];
            let x = (p % w) as f64 + 0.5 - center[1];
            match cfg.shape {
                Shape::Disk => x * x + y * y <= e * e,
                Shape::Rectangle => x.abs() <= e && y.abs() <= e,
            }
        })
        .collect()
}

/// Tight half-open box of a non-empty mask.
pub fn tight_box(mask: &[bool], height: usize, width: usize) -> Result<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (p / width, p % width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    if x0 == usize::MAX {
        return Err(Error::DegenerateMap("empty object mask".into()));
    }
    BBox::within(x0, y0, x1, y1, width, height)
}

fn seed_cam(cfg: &SynthConfig, mask: &[bool], gain: f64, rng: &mut ChaCha8Rng) -> Result<SeedCam> {
    let (h, w) = (cfg.height, cfg.width);
    let mut raw: Vec<f64> = mask.iter().map(|&m| if m { gain } else { 0.0 }).collect();
    let object: Vec<usize> = (0..h * w).filter(|&p| mask[p]).collect();
    let zeroed = (cfg.under_activation * object.len() as f64).ceil() as usize;
    for i in sample(rng, object.len(), zeroed.min(object.len())) {
        raw[object[i]] = 0.0;
    }
    for _ in 0..cfg.false_blobs {
        let background: Vec<usize> = (0..h * w).filter(|&p| !mask[p]).collect();
        if background.is_empty() {
            break;
        }
        let c = background[rng.random_range(0..background.len())];
        let (cy, cx) = ((c / w) as f64, (c % w) as f64);
        let r2 = cfg.blob_radius * cfg.blob_radius;
        for (p, v) in raw.iter_mut().enumerate() {
            let (y, x) = ((p / w) as f64 - cy, (p % w) as f64 - cx);
            if y * y + x * x <= r2 {
                *v = v.max(cfg.blob_strength);
            }
        }
    }
    if cfg.blur > 0.0 {
        raw = gaussian_blur(&raw, h, w, cfg.blur);
    }
    SeedCam::from_raw(h, w, &raw)
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(values: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        (0..height * width)
            .map(|p| {
                let (y, x) = ((p / width) as isize, (p % width) as isize);
                let mut acc = 0.0;
                for (t, k) in taps.iter().zip(-radius..=radius) {
                    let (yy, xx) = if horizontal {
                        (y, (x + k).clamp(0, width as isize - 1))
                    } else {
                        ((y + k).clamp(0, height as isize - 1), x)
                    };
                    acc += t * src[yy as usize * width + xx as usize];
                }
                acc / norm
            })
            .collect()
    };
    pass(&pass(values, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::iou;
    use crate::pseudo_labels::split_regions;

    fn clean() -> SynthConfig {
        SynthConfig {
            under_activation: 0.0,
            blur: 0.0,
            false_blobs: 0,
            frames: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn clean_seed_is_the_mask() {
        let v = generate(&clean()).unwrap();
        for (seed, mask) in v.seeds.iter().zip(&v.masks) {
            let want: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            assert_eq!(seed.values(), &want[..]);
            let split = split_regions(seed).unwrap();
            let fg: Vec<usize> = (0..mask.len()).filter(|&p| mask[p]).collect();
            assert_eq!(split.foreground, fg);
        }
    }

    #[test]
    fn under_activation_zeroes_exact_count() {
        let cfg = SynthConfig {
            under_activation: 0.5,
            ..clean()
        };
        let v = generate(&cfg).unwrap();
        for (seed, mask) in v.seeds.iter().zip(&v.masks) {
            let size = mask.iter().filter(|&&m| m).count();
            let zeroed = (0..mask.len())
                .filter(|&p| mask[p] && seed.values()[p] == 0.0)
                .count();
            assert_eq!(zeroed, (0.5 * size as f64).ceil() as usize);
        }
    }

    #[test]
    fn teleport_boxes_do_not_overlap() {
        let cfg = SynthConfig {
            motion: Motion::Teleport,
            speed: 30.0,
            extent: 6.0,
            frames: 12,
            ..SynthConfig::default()
        };
        let v = generate(&cfg).unwrap();
        for pair in v.boxes.windows(2) {
            assert_eq!(iou(&pair[0], &pair[1]), 0.0);
        }
    }

    #[test]
    fn deterministic_and_tight() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        for (b, m) in a.boxes.iter().zip(&a.masks) {
            assert_eq!(*b, tight_box(m, cfg.height, cfg.width).unwrap());
            for (p, &on) in m.iter().enumerate() {
                let (y, x) = (p / cfg.width, p % cfg.width);
                if on {
                    assert!(x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max);
                }
            }
        }
        for s in &a.seeds {
            assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(a, generate(&SynthConfig { seed: 1, ..cfg }).unwrap());
    }

    #[test]
    fn objects_stay_inside_under_linear_and_sinusoidal_motion() {
        for motion in [Motion::Linear, Motion::Sinusoidal] {
            let cfg = SynthConfig {
                motion,
                speed: 7.0,
                frames: 40,
                shape: Shape::Rectangle,
                ..SynthConfig::default()
            };
            let v = generate(&cfg).unwrap();
            let full = (2.0 * cfg.extent) as usize;
            for m in &v.masks {
                assert!(m.iter().filter(|&&x| x).count() >= full * full);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = SynthConfig {
            under_activation: 1.5,
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            extent: 40.0,
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
    }
}
