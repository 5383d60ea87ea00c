//! Central finite-difference checks of every loss gradient, taken with
//! respect to the logits behind the softmax maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{
    CamPair, CamSequence, ConcatDirection, Frame, FrameSequence, Label, PartialMask,
};
use crate::losses::{
    coloc_loss_with, crf_frame_loss_with, partial_cross_entropy, size_barrier_loss, total_loss,
    Backend, ColocMode, KernelConfig, LossWeights,
};
use crate::trainer::{softmax_backward, softmax_pixel};

pub const STEP: f64 = 1e-4;
/// Components whose larger magnitude is at most this are skipped.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Worst relative error of one loss across its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub loss: &'static str,
    pub instances: usize,
    /// Components compared.
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub height: usize,
    pub width: usize,
    /// Frames per window for the sequence losses.
    pub frames: usize,
    pub seed: u64,
    pub kernel: KernelConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            height: 6,
            width: 6,
            frames: 3,
            seed: 0,
            kernel: KernelConfig {
                spatial_bandwidth: 3.0,
                ..KernelConfig::default()
            },
        }
    }
}

type Logits = Vec<Vec<[f64; 2]>>;

struct Instance {
    frames: Vec<Frame>,
    logits: Logits,
    mask: PartialMask,
    z: f64,
}

fn instance<R: Rng>(rng: &mut R, cfg: &GradcheckConfig) -> Result<Instance> {
    let (h, w) = (cfg.height, cfg.width);
    // Colors within a few bandwidths of each other so the affinities matter.
    let frames = (0..cfg.frames)
        .map(|_| {
            let px = (0..h * w)
                .map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..40.0)))
                .collect();
            Frame::new(h, w, px)
        })
        .collect::<Result<_>>()?;
    let logits = (0..cfg.frames)
        .map(|_| {
            (0..h * w)
                .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                .collect()
        })
        .collect();
    let mut labels = Vec::new();
    for _ in 0..4 {
        let label = if rng.random::<bool>() {
            Label::Foreground
        } else {
            Label::Background
        };
        labels.push((rng.random_range(0..h * w), label));
    }
    Ok(Instance {
        frames,
        logits,
        mask: PartialMask::from_labels(h, w, &labels)?,
        z: rng.random_range(1.0..10.0),
    })
}

fn cam(h: usize, w: usize, logits: &[[f64; 2]]) -> Result<CamPair> {
    CamPair::new(h, w, logits.iter().map(|&l| softmax_pixel(l)).collect())
}

/// Compares the chain-ruled map gradient `map_grad` (frames laid out in
/// order) with central differences of `value`; returns
/// `(components checked, max relative error)`.
fn compare<F>(
    h: usize,
    w: usize,
    logits: &Logits,
    map_grad: &[[f64; 2]],
    value: F,
) -> Result<(usize, f64)>
where
    F: Fn(&Logits) -> Result<f64>,
{
    let hw = h * w;
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut probe = logits.clone();
    for (k, frame) in logits.iter().enumerate() {
        let maps: Vec<[f64; 2]> = frame.iter().map(|&l| softmax_pixel(l)).collect();
        let analytic = softmax_backward(&maps, &map_grad[k * hw..(k + 1) * hw]);
        for p in 0..hw {
            for c in 0..2 {
                let base = frame[p][c];
                probe[k][p][c] = base + STEP;
                let up = value(&probe)?;
                probe[k][p][c] = base - STEP;
                let down = value(&probe)?;
                probe[k][p][c] = base;
                let numeric = (up - down) / (2.0 * STEP);
                let a = analytic[p][c];
                let scale = a.abs().max(numeric.abs());
                if scale > GRAD_FLOOR {
                    checked += 1;
                    worst = worst.max((a - numeric).abs() / scale);
                }
            }
        }
    }
    Ok((checked, worst))
}

fn run<F>(name: &'static str, cfg: &GradcheckConfig, salt: u64, mut one: F) -> Result<GradReport>
where
    F: FnMut(&Instance) -> Result<(usize, f64)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
    let mut report = GradReport {
        loss: name,
        instances: cfg.instances,
        checked: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..cfg.instances {
        let inst = instance(&mut rng, cfg)?;
        let (checked, worst) = one(&inst)?;
        report.checked += checked;
        report.max_rel_error = report.max_rel_error.max(worst);
    }
    Ok(report)
}

pub fn check_partial_cross_entropy(cfg: &GradcheckConfig) -> Result<GradReport> {
    let (h, w) = (cfg.height, cfg.width);
    run("partial_cross_entropy", cfg, 1, |inst| {
        let logits = vec![inst.logits[0].clone()];
        let g = partial_cross_entropy(&inst.mask, &cam(h, w, &logits[0])?)?.grad;
        compare(h, w, &logits, &g, |l| {
            Ok(partial_cross_entropy(&inst.mask, &cam(h, w, &l[0])?)?.value)
        })
    })
}

pub fn check_crf(cfg: &GradcheckConfig) -> Result<GradReport> {
    let (h, w) = (cfg.height, cfg.width);
    run("crf_frame_loss", cfg, 2, |inst| {
        let logits = vec![inst.logits[0].clone()];
        let f = &inst.frames[0];
        let eval = |l: &[[f64; 2]]| {
            crf_frame_loss_with(&cam(h, w, l)?, f, &cfg.kernel, Backend::Exact, [0.0, 0.0])
        };
        let g = eval(&logits[0])?.grad;
        compare(h, w, &logits, &g, |l| Ok(eval(&l[0])?.value))
    })
}

fn sequences(
    inst: &Instance,
    logits: &Logits,
    h: usize,
    w: usize,
) -> Result<(FrameSequence, CamSequence)> {
    let cams = logits.iter().map(|l| cam(h, w, l)).collect::<Result<_>>()?;
    Ok((
        FrameSequence::new(inst.frames.clone(), ConcatDirection::Horizontal)?,
        CamSequence::new(cams, ConcatDirection::Horizontal)?,
    ))
}

pub fn check_coloc(cfg: &GradcheckConfig) -> Result<GradReport> {
    let (h, w) = (cfg.height, cfg.width);
    run("coloc_loss", cfg, 3, |inst| {
        let eval = |l: &Logits| {
            let (fs, cs) = sequences(inst, l, h, w)?;
            coloc_loss_with(&fs, &cs, &cfg.kernel, Backend::Exact)
        };
        let g = eval(&inst.logits)?.grad;
        compare(h, w, &inst.logits, &g, |l| Ok(eval(l)?.value))
    })
}

pub fn check_size_barrier(cfg: &GradcheckConfig) -> Result<GradReport> {
    let (h, w) = (cfg.height, cfg.width);
    run("size_barrier_loss", cfg, 4, |inst| {
        let logits = vec![inst.logits[0].clone()];
        let g = size_barrier_loss(&cam(h, w, &logits[0])?, inst.z)?.grad;
        compare(h, w, &logits, &g, |l| {
            Ok(size_barrier_loss(&cam(h, w, &l[0])?, inst.z)?.value)
        })
    })
}

/// The whole objective in adaptive mode. The CoLoc normalizer is a
/// stop-gradient, so the differenced value holds it at the base point.
pub fn check_total(cfg: &GradcheckConfig) -> Result<GradReport> {
    let (h, w) = (cfg.height, cfg.width);
    // CRF weight large enough for the pairwise term to register at 6x6.
    let weights = |z| LossWeights {
        lambda: 0.05,
        lambda_c: 1.0,
        mode: ColocMode::Adaptive,
        z,
    };
    run("total_loss", cfg, 5, |inst| {
        let wts = weights(inst.z);
        let eval = |l: &Logits| {
            let (fs, cs) = sequences(inst, l, h, w)?;
            let last = cs.cams()[cs.len() - 1].clone();
            let t = fs.frames()[fs.len() - 1].clone();
            total_loss(
                &inst.mask,
                &last,
                &t,
                &fs,
                &cs,
                &cfg.kernel,
                &wts,
                Backend::Exact,
            )
        };
        let base = eval(&inst.logits)?;
        let norm = wts.lambda_c / base.parts.coloc_raw.abs();
        compare(h, w, &inst.logits, &base.grad, |l| {
            let t = eval(l)?;
            let p = t.parts;
            Ok(p.partial_ce + wts.lambda * p.crf + p.size + norm * p.coloc_raw)
        })
    })
}

/// Every suite, in a fixed order.
pub fn check_all(cfg: &GradcheckConfig) -> Result<Vec<GradReport>> {
    Ok(vec![
        check_partial_cross_entropy(cfg)?,
        check_crf(cfg)?,
        check_coloc(cfg)?,
        check_size_barrier(cfg)?,
        check_total(cfg)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let cfg = GradcheckConfig {
            instances: 2,
            height: 3,
            width: 4,
            frames: 2,
            ..GradcheckConfig::default()
        };
        for r in check_all(&cfg).unwrap() {
            assert!(r.checked > 0, "{}", r.loss);
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let logits = vec![vec![[0.3, -0.2], [1.0, 0.5]]];
        let wrong = vec![[1.0, 0.0], [0.0, 0.0]];
        let (_, err) = compare(1, 2, &logits, &wrong, |l| Ok(l[0][1][0] * 2.0)).unwrap();
        assert!(err > 0.5);
    }
}
