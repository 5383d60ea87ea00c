//! Otsu foreground/background splits of seed CAMs and per-step pixel
//! pseudo-label sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Label, PartialMask, SeedCam};

/// Histogram resolution used by [`otsu_threshold`].
pub const BINS: usize = 256;

/// Histogram bin of a value in `[0, 1]`.
pub fn bin_of(v: f64) -> usize {
    ((v * BINS as f64) as usize).min(BINS - 1)
}

/// Outcome of [`otsu_threshold`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Otsu {
    /// Foreground is every value strictly above this.
    pub threshold: f64,
    /// Last histogram bin assigned to the background, `None` if degenerate.
    pub level: Option<usize>,
    /// Every value fell into one bin; the foreground is empty.
    pub degenerate: bool,
}

/// Otsu's threshold on a 256-bin histogram of `values` (each in `[0, 1]`).
///
/// Levels are compared with the exact integer form of the between-class
/// variance, `(N s0 - n0 S)^2 / (n0 n1)` over bin indices, and the first
/// maximum wins. The returned threshold sits midway between the largest
/// background value and the smallest foreground value, so `v > threshold`
/// reproduces the histogram split exactly.
pub fn otsu_values(values: &[f64]) -> Result<Otsu> {
    if values.is_empty() {
        return Err(Error::InvalidDimensions("empty map".into()));
    }
    let mut hist = [0u64; BINS];
    let mut lo = [f64::INFINITY; BINS];
    let mut hi = [f64::NEG_INFINITY; BINS];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("map value {v} outside [0, 1]")));
        }
        let b = bin_of(v);
        hist[b] += 1;
        lo[b] = lo[b].min(v);
        hi[b] = hi[b].max(v);
    }
    let n = values.len() as u64;
    let total: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();

    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for k in 0..BINS - 1 {
        n0 += hist[k];
        s0 += k as u64 * hist[k];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (n as i128 * s0 as i128 - n0 as i128 * total as i128).unsigned_abs();
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => greater(num, den, bn, bd),
        };
        if better {
            best = Some((k, num, den));
        }
    }

    Ok(match best {
        None => Otsu {
            threshold: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            level: None,
            degenerate: true,
        },
        Some((k, _, _)) => {
            let below = hi[..=k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let above = lo[k + 1..].iter().copied().fold(f64::INFINITY, f64::min);
            Otsu {
                threshold: below + 0.5 * (above - below),
                level: Some(k),
                degenerate: false,
            }
        }
    })
}

/// `a / b > c / d` for non-negative fractions, exact unless the products
/// overflow.
fn greater(a: u128, b: u128, c: u128, d: u128) -> bool {
    match (a.checked_mul(d), c.checked_mul(b)) {
        (Some(l), Some(r)) => l > r,
        _ => a as f64 / b as f64 > c as f64 / d as f64,
    }
}

pub fn otsu_threshold(seed: &SeedCam) -> Result<Otsu> {
    otsu_values(seed.values())
}

/// Disjoint foreground/background pixel sets covering the image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSplit {
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
    pub threshold: f64,
    pub degenerate: bool,
}

/// Splits at the Otsu threshold; foreground is `C(p) > threshold`.
pub fn split_regions(seed: &SeedCam) -> Result<RegionSplit> {
    let otsu = otsu_threshold(seed)?;
    let (mut foreground, mut background) = (Vec::new(), Vec::new());
    for (p, &v) in seed.values().iter().enumerate() {
        if v > otsu.threshold {
            foreground.push(p);
        } else {
            background.push(p);
        }
    }
    Ok(RegionSplit {
        foreground,
        background,
        threshold: otsu.threshold,
        degenerate: otsu.degenerate,
    })
}

/// A sampled mask plus flags for sides that had nothing to draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub mask: PartialMask,
    pub missing_foreground: bool,
    pub missing_background: bool,
}

/// Draws `per_side` foreground pixels with probability proportional to the
/// seed value and `per_side` background pixels uniformly. Repeated draws of
/// one pixel collapse into a single label.
pub fn sample_pixels<R: Rng + ?Sized>(
    seed: &SeedCam,
    split: &RegionSplit,
    rng: &mut R,
    per_side: usize,
) -> Result<Sampled> {
    let mut mask = PartialMask::empty(seed.height(), seed.width())?;
    let weights: Vec<f64> = split.foreground.iter().map(|&p| seed.values()[p]).collect();
    let missing_foreground = match WeightedIndex::new(&weights) {
        Ok(dist) => {
            for _ in 0..per_side {
                mask.set(split.foreground[dist.sample(rng)], Label::Foreground)?;
            }
            false
        }
        Err(_) => true,
    };
    let missing_background = split.background.is_empty();
    if !missing_background {
        for _ in 0..per_side {
            let p = split.background[rng.random_range(0..split.background.len())];
            mask.set(p, Label::Background)?;
        }
    }
    Ok(Sampled {
        mask,
        missing_foreground,
        missing_background,
    })
}

/// Per-pixel maximum over several seeds.
pub fn temporal_max(seeds: &[&SeedCam]) -> Result<SeedCam> {
    let first = seeds
        .first()
        .ok_or_else(|| Error::InvalidSequence("no seeds to pool".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut out = first.values().to_vec();
    for s in &seeds[1..] {
        if s.height() != h || s.width() != w {
            return Err(Error::InvalidSequence(format!(
                "seed is {}x{}, expected {h}x{w}",
                s.height(),
                s.width()
            )));
        }
        for (o, &v) in out.iter_mut().zip(s.values()) {
            *o = o.max(v);
        }
    }
    SeedCam::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seed(h: usize, w: usize, v: Vec<f64>) -> SeedCam {
        SeedCam::new(h, w, v).unwrap()
    }

    #[test]
    fn bimodal_split() {
        let v: Vec<f64> = (0..16).map(|i| if i < 8 { 0.1 } else { 0.9 }).collect();
        let s = seed(4, 4, v);
        let o = otsu_threshold(&s).unwrap();
        assert!(o.threshold > 0.1 && o.threshold < 0.9 && !o.degenerate);
        let split = split_regions(&s).unwrap();
        assert_eq!(split.foreground, (8..16).collect::<Vec<_>>());
        assert_eq!(split.background, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn constant_seed_is_degenerate() {
        let s = seed(3, 3, vec![0.5; 9]);
        let o = otsu_threshold(&s).unwrap();
        assert!(o.degenerate);
        assert_eq!(o.threshold, 0.5);
        let split = split_regions(&s).unwrap();
        assert!(split.foreground.is_empty() && split.background.len() == 9);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = sample_pixels(&s, &split, &mut rng, 1).unwrap();
        assert!(got.missing_foreground && !got.missing_background);
        assert_eq!(got.mask.sampled().len(), 1);
    }

    #[test]
    fn four_level_seed() {
        let mut v = vec![0.0; 8];
        v.extend([0.25; 4]);
        v.extend([0.75; 2]);
        v.extend([1.0; 2]);
        let o = otsu_threshold(&seed(4, 4, v)).unwrap();
        // Bins {0, 64, 192, 255}. Scores (N s0 - n0 S)^2 / (n0 n1) for the
        // three distinct splits: 1.32e6, 1.96e6, 1.23e6.
        assert_eq!(o.level, Some(64));
        assert_eq!(o.threshold, 0.5);
    }

    #[test]
    fn singleton_foreground_always_drawn() {
        let mut v = vec![0.0; 9];
        v[4] = 1.0;
        let s = seed(3, 3, v);
        let split = split_regions(&s).unwrap();
        assert_eq!(split.foreground, vec![4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let got = sample_pixels(&s, &split, &mut rng, 1).unwrap();
            assert_eq!(got.mask.label(4), Label::Foreground);
            assert_eq!(got.mask.count(Label::Foreground), 1);
            assert_eq!(got.mask.count(Label::Background), 1);
        }
    }

    #[test]
    fn foreground_draws_vary() {
        let s = seed(2, 2, vec![0.0, 0.0, 0.9, 0.8]);
        let split = split_regions(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws: Vec<usize> = (0..40)
            .map(|_| {
                let m = sample_pixels(&s, &split, &mut rng, 1).unwrap().mask;
                (0..4).find(|&p| m.label(p) == Label::Foreground).unwrap()
            })
            .collect();
        assert!(draws.iter().any(|&d| d != draws[0]));
    }

    #[test]
    fn temporal_max_pools() {
        let a = seed(1, 3, vec![0.1, 0.9, 0.0]);
        let b = seed(1, 3, vec![0.5, 0.2, 0.0]);
        assert_eq!(temporal_max(&[&a, &b]).unwrap().values(), &[0.5, 0.9, 0.0]);
        assert!(temporal_max(&[]).is_err());
    }

    proptest! {
        #[test]
        fn samples_fall_on_their_side(values in prop::collection::vec(0.0f64..=1.0, 1..60), s in 0u64..1000) {
            let n = values.len();
            let sc = seed(1, n, values);
            let split = split_regions(&sc).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let got = sample_pixels(&sc, &split, &mut rng, 2).unwrap();
            for &p in got.mask.sampled() {
                match got.mask.label(p) {
                    Label::Foreground => prop_assert!(split.foreground.contains(&p)),
                    Label::Background => prop_assert!(split.background.contains(&p)),
                    Label::Unknown => prop_assert!(false),
                }
            }
            prop_assert_eq!(split.foreground.len() + split.background.len(), n);
        }
    }
}
