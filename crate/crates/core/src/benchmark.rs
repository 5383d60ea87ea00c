//! Synthetic-video benchmarks: loss ablations and the teleport stress test.

use crate::error::{Error, Result};
use crate::eval::{extract_bbox, iou};
use crate::synth::{generate_benchmark, Motion, SynthConfig, SynthVideo};
use crate::trainer::{train, PseudoLabelSource, TrainConfig};

/// Which loss terms a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Pseudo-label cross-entropy alone.
    PlsOnly,
    /// Per-frame CRF and size barrier, no CoLoc.
    PlsCrfAsc,
    /// Every term.
    Full,
    /// Per-frame terms trained on window-pooled seeds, no CoLoc.
    TemporalMax,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::PlsOnly,
        Variant::PlsCrfAsc,
        Variant::Full,
        Variant::TemporalMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PlsOnly => "pls",
            Variant::PlsCrfAsc => "pls-crf-asc",
            Variant::Full => "full",
            Variant::TemporalMax => "temporal-max",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::PlsOnly => {
                cfg.lambda = 0.0;
                cfg.lambda_c = 0.0;
                cfg.size_barrier = false;
            }
            Variant::PlsCrfAsc => cfg.lambda_c = 0.0,
            Variant::Full => {}
            Variant::TemporalMax => {
                cfg.lambda_c = 0.0;
                cfg.pseudo_labels = PseudoLabelSource::TemporalMax;
            }
        }
        cfg
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Clips plus the training setup shared by every variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub synth: SynthConfig,
    pub videos: usize,
    pub train: TrainConfig,
}

impl Preset {
    /// 20 clips of 32 frames at 64x64, linear motion, half the object
    /// missing from each seed.
    pub fn ablation() -> Self {
        Self {
            synth: SynthConfig {
                seed: 7,
                ..SynthConfig::default()
            },
            videos: 20,
            train: TrainConfig::default(),
        }
    }

    /// Like [`Preset::ablation`] but the object jumps 25 px between frames.
    pub fn teleport() -> Self {
        let mut p = Self::ablation();
        p.synth.motion = Motion::Teleport;
        p.synth.speed = 25.0;
        p
    }

    pub fn generate(&self) -> Result<Vec<SynthVideo>> {
        generate_benchmark(&self.synth, self.videos)
    }
}

/// Per-frame outcome of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScore {
    pub ious: Vec<f64>,
}

impl VideoScore {
    pub fn hits(&self) -> usize {
        self.ious.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn corloc(&self) -> f64 {
        self.hits() as f64 / self.ious.len() as f64
    }
}

/// Trains on one clip and scores the boxes read off the final maps.
pub fn score_video(video: &SynthVideo, cfg: &TrainConfig) -> Result<VideoScore> {
    let out = train(&video.frames, &video.seeds, cfg)?;
    let (h, w) = (video.frames.height(), video.frames.width());
    let ious = (0..video.frames.len())
        .map(|t| {
            let pred = extract_bbox(&out.logits.foreground(t), h, w)?.bbox;
            Ok(iou(&pred, &video.boxes[t]))
        })
        .collect::<Result<_>>()?;
    Ok(VideoScore { ious })
}

/// Scores of the seeds themselves, without training.
pub fn score_seeds(video: &SynthVideo) -> Result<VideoScore> {
    let (h, w) = (video.frames.height(), video.frames.width());
    let ious = video
        .seeds
        .iter()
        .zip(&video.boxes)
        .map(|(s, b)| Ok(iou(&extract_bbox(s.values(), h, w)?.bbox, b)))
        .collect::<Result<_>>()?;
    Ok(VideoScore { ious })
}

pub fn run_variant(
    videos: &[SynthVideo],
    base: &TrainConfig,
    variant: Variant,
) -> Result<Vec<VideoScore>> {
    let cfg = variant.apply(base);
    videos.iter().map(|v| score_video(v, &cfg)).collect()
}

/// Mean of per-clip CorLoc.
pub fn mean_corloc(scores: &[VideoScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(VideoScore::corloc).sum::<f64>() / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_switch_terms() {
        let base = TrainConfig::default();
        let p = Variant::PlsOnly.apply(&base);
        assert!(p.lambda == 0.0 && p.lambda_c == 0.0 && !p.size_barrier);
        let c = Variant::PlsCrfAsc.apply(&base);
        assert!(c.lambda == base.lambda && c.lambda_c == 0.0 && c.size_barrier);
        assert_eq!(Variant::Full.apply(&base), base);
        let t = Variant::TemporalMax.apply(&base);
        assert_eq!(t.pseudo_labels, PseudoLabelSource::TemporalMax);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn score_counts_strict_hits() {
        let s = VideoScore {
            ious: vec![0.9, 0.5, 0.51, 0.0],
        };
        assert_eq!(s.hits(), 2);
        assert_eq!(s.corloc(), 0.5);
        assert_eq!(
            mean_corloc(&[s.clone(), VideoScore { ious: vec![1.0] }]),
            0.75
        );
    }

    #[test]
    fn small_clip_runs() {
        let mut p = Preset::ablation();
        p.synth.frames = 4;
        p.synth.height = 24;
        p.synth.width = 24;
        p.synth.extent = 5.0;
        p.videos = 1;
        p.train.epochs = 2;
        let videos = p.generate().unwrap();
        let scores = run_variant(&videos, &p.train, Variant::Full).unwrap();
        assert_eq!(scores[0].ious.len(), 4);
        assert!(scores[0].ious.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(score_seeds(&videos[0]).unwrap().ious.len(), 4);
    }
}
