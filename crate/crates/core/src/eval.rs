//! Box extraction, CorLoc, and CoLoc loss timing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{BBox, CamPair, CamSequence, ConcatDirection, Frame, FrameSequence};
use crate::losses::{coloc_loss, KernelConfig};
use crate::pseudo_labels::otsu_values;

/// A box plus a flag for maps with nothing above threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extracted {
    pub bbox: BBox,
    pub degenerate: bool,
}

/// Otsu threshold, largest 8-connected component above it, tight box.
/// Ties between equally large components go to the first in raster order.
pub fn extract_bbox(fg: &[f64], height: usize, width: usize) -> Result<Extracted> {
    if height == 0 || width == 0 || fg.len() != height * width {
        return Err(Error::Shape {
            expected: height * width,
            actual: fg.len(),
        });
    }
    let otsu = otsu_values(fg)?;
    let above: Vec<bool> = fg.iter().map(|&v| v > otsu.threshold).collect();

    let mut label = vec![usize::MAX; fg.len()];
    let mut best: Option<(usize, BBox)> = None;
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !above[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = start;
        stack.push(start);
        let (mut size, mut x0, mut y0, mut x1, mut y1) = (0, width, height, 0, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / width, p % width);
            size += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if above[q] && label[q] == usize::MAX {
                        label[q] = start;
                        stack.push(q);
                    }
                }
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, BBox::new(x0, y0, x1, y1)?));
        }
    }
    Ok(match best {
        Some((_, bbox)) => Extracted {
            bbox,
            degenerate: false,
        },
        None => Extracted {
            bbox: BBox::full(width, height),
            degenerate: true,
        },
    })
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min));
    let ih = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min));
    let inter = (iw * ih) as f64;
    inter / ((a.area() + b.area()) as f64 - inter)
}

/// Fraction of pairs with IoU strictly above one half.
pub fn corloc(preds: &[BBox], gts: &[BBox]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::InvalidSequence(format!(
            "{} predictions vs {} ground-truth boxes",
            preds.len(),
            gts.len()
        )));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| iou(p, g) > 0.5)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Median wall time of the CoLoc loss for one window size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub wall_ms: f64,
}

/// Times [`coloc_loss`] (lattice build plus evaluation) on fixed random
/// `height x width` windows, median of `repeats` runs per window size.
pub fn bench_coloc(
    n_values: &[usize],
    height: usize,
    width: usize,
    cfg: &KernelConfig,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_n = n_values.iter().copied().max().unwrap_or(0);
    let mut frames = Vec::with_capacity(max_n);
    let mut cams = Vec::with_capacity(max_n);
    for _ in 0..max_n {
        let px = (0..height * width)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..255.0)))
            .collect();
        frames.push(Frame::new(height, width, px)?);
        let fg: Vec<f64> = (0..height * width).map(|_| rng.random::<f64>()).collect();
        cams.push(CamPair::from_foreground(height, width, &fg)?);
    }
    n_values
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::InvalidConfig(
                    "window size must be at least 1".into(),
                ));
            }
            let fs = FrameSequence::new(frames[..n].to_vec(), ConcatDirection::Horizontal)?;
            let cs = CamSequence::new(cams[..n].to_vec(), ConcatDirection::Horizontal)?;
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t = Instant::now();
                std::hint::black_box(coloc_loss(&fs, &cs, cfg)?);
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            Ok(BenchRow {
                n,
                wall_ms: times[times.len() / 2],
            })
        })
        .collect()
}

/// Least-squares line `y = a + b x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidSequence(
            "need at least two aligned points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidSequence("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(LinearFit {
        intercept: my - slope * mx,
        slope,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn block_box() {
        let (h, w) = (10, 12);
        let mut m = vec![0.0; h * w];
        for y in 2..5 {
            for x in 5..9 {
                m[y * w + x] = 1.0;
            }
        }
        let e = extract_bbox(&m, h, w).unwrap();
        assert_eq!(e.bbox, b(5, 2, 9, 5));
        assert!(!e.degenerate);
    }

    #[test]
    fn largest_component_wins() {
        let (h, w) = (10, 10);
        let mut m = vec![0.0; h * w];
        for y in 0..4 {
            for x in 0..5 {
                m[y * w + x] = 1.0;
            }
        }
        for p in [88, 89, 98, 99, 87] {
            m[p] = 1.0;
        }
        assert_eq!(extract_bbox(&m, h, w).unwrap().bbox, b(0, 0, 5, 4));
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let (h, w) = (4, 4);
        let mut m = vec![0.0; 16];
        for p in [0, 5, 10, 15, 3] {
            m[p] = 1.0;
        }
        assert_eq!(extract_bbox(&m, h, w).unwrap().bbox, b(0, 0, 4, 4));
    }

    #[test]
    fn uniform_map_is_degenerate() {
        let e = extract_bbox(&[0.3; 12], 3, 4).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.bbox, BBox::full(4, 3));
    }

    #[test]
    fn iou_hand_values() {
        let a = b(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(10, 0, 20, 10)), 0.0);
        assert!((iou(&a, &b(5, 0, 15, 10)) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn corloc_counts_strictly() {
        let a = b(0, 0, 10, 10);
        assert_eq!(corloc(&[a, a], &[a, a]).unwrap(), 1.0);
        // Union 200, intersection 100: exactly one half.
        let half = b(0, 0, 20, 10);
        assert_eq!(iou(&a, &half), 0.5);
        assert_eq!(corloc(&[a], &[half]).unwrap(), 0.0);
        assert!(corloc(&[a], &[]).is_err());
    }

    #[test]
    fn corloc_two_of_three() {
        let g = b(0, 0, 10, 10);
        // IoUs 0.9, 0.4, 0.6.
        let preds = [b(0, 0, 10, 9), b(0, 0, 4, 10), b(0, 0, 6, 10)];
        let ious: Vec<f64> = preds.iter().map(|p| iou(p, &g)).collect();
        assert!((ious[0] - 0.9).abs() < 1e-12 && (ious[1] - 0.4).abs() < 1e-12);
        assert!((ious[2] - 0.6).abs() < 1e-12);
        assert!((corloc(&preds, &[g; 3]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fit_of_exact_line() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bench_rows_follow_request() {
        let cfg = KernelConfig {
            shifts: 1,
            ..KernelConfig::default()
        };
        let rows = bench_coloc(&[1, 2], 8, 8, &cfg, 3, 0).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 2]);
        assert!(rows.iter().all(|r| r.wall_ms >= 0.0));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0usize..30, 0usize..30, 1usize..20, 1usize..20)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn extraction_follows_translation(x in 0usize..20, y in 0usize..20, dx in 0usize..10, dy in 0usize..10) {
            let (h, w) = (40, 40);
            let mut m = vec![0.0; h * w];
            let mut shifted = vec![0.0; h * w];
            for r in 0..6 {
                for c in 0..8 {
                    m[(y + r) * w + x + c] = 1.0;
                    shifted[(y + dy + r) * w + x + dx + c] = 1.0;
                }
            }
            let a = extract_bbox(&m, h, w).unwrap().bbox;
            let s = extract_bbox(&shifted, h, w).unwrap().bbox;
            prop_assert_eq!(s, b(a.x_min + dx, a.y_min + dy, a.x_max + dx, a.y_max + dy));
        }
    }
}
