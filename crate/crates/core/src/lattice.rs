//! Gaussian filtering on the permutohedral lattice.
//!
//! Points are lifted onto the hyperplane `sum(x) = 0` in `d + 1` dimensions,
//! splatted onto the vertices of their enclosing simplex with barycentric
//! weights, blurred along each of the `d + 1` lattice directions, and sliced
//! back with the same weights. The blur runs forward over the directions and
//! then in reverse, so the implied kernel matrix is exactly symmetric.
//!
//! Callers pre-divide features by their bandwidths; the lattice filters with
//! the unit kernel `exp(-|fi - fj|^2 / 2)`. The self term of every point is
//! computed exactly, so a lone point filters to its own value.
//!
//! A single lattice has a position-dependent error. [`GaussianFilter`]
//! averages several lattices built over deterministically shifted copies of
//! the features, which cancels most of it.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest point count accepted by [`brute_force_filter`].
pub const BRUTE_FORCE_CAP: usize = 20_000;

/// Side weight `a` of the per-direction blur `[a, 1 - 2a, a]`, applied once
/// forward and once back. Peakier than the classic `1/4`, which keeps the
/// interpolated kernel close to Gaussian in the tails.
fn side_weight(d: usize) -> f64 {
    (0.16 + 0.01 * d as f64).min(0.185)
}

/// Lattice refinement matching [`side_weight`]: splat and slice add a
/// variance of `1/4` lattice steps, the blur adds `2a` per pass pair.
fn refinement(side: f64) -> f64 {
    (0.25 + 6.0 * side).sqrt()
}

const NONE: u32 = u32::MAX;

/// Open-addressing table from integer lattice keys to vertex ids.
#[derive(Debug, Clone)]
struct KeyTable {
    key_len: usize,
    keys: Vec<i32>,
    slots: Vec<u32>,
    mask: usize,
}

impl KeyTable {
    fn with_capacity(key_len: usize, capacity: usize) -> Self {
        let slots = capacity.max(16).next_power_of_two();
        Self {
            key_len,
            keys: Vec::with_capacity(capacity * key_len),
            slots: vec![NONE; slots],
            mask: slots - 1,
        }
    }

    fn len(&self) -> usize {
        self.keys.len() / self.key_len.max(1)
    }

    fn hash(key: &[i32]) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &k in key {
            h ^= k as u32 as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
            h ^= h >> 29;
        }
        h as usize
    }

    fn key(&self, id: u32) -> &[i32] {
        let s = id as usize * self.key_len;
        &self.keys[s..s + self.key_len]
    }

    fn find(&self, key: &[i32]) -> Option<u32> {
        let mut slot = Self::hash(key) & self.mask;
        loop {
            let id = self.slots[slot];
            if id == NONE {
                return None;
            }
            if self.key(id) == key {
                return Some(id);
            }
            slot = (slot + 1) & self.mask;
        }
    }

    fn insert(&mut self, key: &[i32]) -> u32 {
        if 2 * (self.len() + 1) > self.slots.len() {
            self.grow();
        }
        let mut slot = Self::hash(key) & self.mask;
        loop {
            let id = self.slots[slot];
            if id == NONE {
                let new_id = self.len() as u32;
                self.keys.extend_from_slice(key);
                self.slots[slot] = new_id;
                return new_id;
            }
            if self.key(id) == key {
                return id;
            }
            slot = (slot + 1) & self.mask;
        }
    }

    fn grow(&mut self) {
        let size = self.slots.len() * 2;
        self.slots = vec![NONE; size];
        self.mask = size - 1;
        for id in 0..self.len() as u32 {
            let mut slot = Self::hash(self.key(id)) & self.mask;
            while self.slots[slot] != NONE {
                slot = (slot + 1) & self.mask;
            }
            self.slots[slot] = id;
        }
    }
}

/// A permutohedral lattice built over a fixed point set, reusable for any
/// number of value signals.
#[derive(Debug, Clone)]
pub struct Lattice {
    dim: usize,
    n_points: usize,
    n_vertices: usize,
    /// `n_points * (dim + 1)` vertex ids.
    vertices: Vec<u32>,
    /// Barycentric weights aligned with `vertices`.
    weights: Vec<f64>,
    /// Per direction, per vertex: (minus neighbour, plus neighbour).
    neighbours: Vec<[u32; 2]>,
    /// Kernel normalization so the lattice approximates the unit Gaussian.
    scale: f64,
    side: f64,
    /// Self response of the raw splat-blur-slice operator at each point.
    self_response: Vec<f64>,
}

impl Lattice {
    /// Builds the lattice from `features`, each a point in `d` dimensions.
    pub fn build<F: AsRef<[f64]>>(features: &[F]) -> Result<Self> {
        let (flat, d) = flatten(features)?;
        Ok(Self::build_flat(&flat, d))
    }

    /// Builds from a row-major `N x d` feature buffer. Panics on a ragged
    /// buffer; use [`Lattice::build`] for validated input.
    pub fn build_flat(features: &[f64], d: usize) -> Self {
        let side = side_weight(d);
        Self::build_with(features, d, refinement(side), side)
    }

    fn build_with(features: &[f64], d: usize, refinement: f64, side: f64) -> Self {
        let mut lat = Self::build_raw(features, d, refinement, side);
        let d1 = d + 1;
        let kappa = self_kernel(d, refinement, side);
        lat.self_response = (0..lat.n_points)
            .map(|i| {
                let w = lat.point_weights(i);
                let mut acc = 0.0;
                for a in 0..d1 {
                    for b in 0..d1 {
                        acc += w[a] * w[b] * kappa[a.abs_diff(b)];
                    }
                }
                acc * lat.scale
            })
            .collect();
        lat
    }

    /// Lattice without the self response filled in.
    fn build_raw(features: &[f64], d: usize, refinement: f64, side: f64) -> Self {
        assert!(d > 0 && features.len().is_multiple_of(d));
        let n = features.len() / d;
        let d1 = d + 1;

        // Elevation: orthonormal columns scaled so the blur below yields a
        // unit-variance kernel in feature units.
        let inv_std = refinement * (2.0f64 / 3.0).sqrt() * d1 as f64;
        let col_scale: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();

        let mut table = KeyTable::with_capacity(d, 2 * n * d1);
        let mut vertices = Vec::with_capacity(n * d1);
        let mut weights = Vec::with_capacity(n * d1);

        let mut elevated = vec![0.0f64; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0.0f64; d1 + 1];
        let mut key = vec![0i32; d];
        let down = 1.0 / d1 as f64;

        for p in features.chunks_exact(d) {
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = p[j - 1] * col_scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            // Nearest remainder-zero point.
            let mut sum = 0i32;
            for i in 0..d1 {
                let v = down * elevated[i];
                let up = v.ceil() * d1 as f64;
                let dn = v.floor() * d1 as f64;
                rem0[i] = if up - elevated[i] < elevated[i] - dn {
                    up as i32
                } else {
                    dn as i32
                };
                sum += rem0[i];
            }
            let sum = sum / d1 as i32;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in (i + 1)..d1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..d1 {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i32;
                    rem0[i] += d1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= d1 as i32;
                    rem0[i] -= d1 as i32;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f64) * down;
                bary[d - rank[i] as usize] += v;
                bary[d1 - rank[i] as usize] -= v;
            }
            bary[0] += 1.0 + bary[d1];

            for remainder in 0..d1 as i32 {
                for i in 0..d {
                    key[i] = rem0[i]
                        + if rank[i] > d as i32 - remainder {
                            remainder - d1 as i32
                        } else {
                            remainder
                        };
                }
                vertices.push(table.insert(&key));
                weights.push(bary[remainder as usize]);
            }
        }

        // Dilate along each blur pass so every vertex the blur can reach is
        // stored; mass then never leaks through missing vertices.
        let mut nk = vec![0i32; d];
        for j in 0..d1 {
            let count = table.len() as u32;
            for v in 0..count {
                for sign in [-1i32, 1] {
                    let k = table.key(v);
                    for i in 0..d {
                        nk[i] = k[i] - sign;
                    }
                    if j < d {
                        nk[j] = k[j] + sign * d as i32;
                    }
                    table.insert(&nk);
                }
            }
        }

        let m = table.len();
        let mut neighbours = vec![[NONE, NONE]; d1 * m];
        let mut n1 = vec![0i32; d];
        let mut n2 = vec![0i32; d];
        for j in 0..d1 {
            for v in 0..m as u32 {
                let k = table.key(v);
                for i in 0..d {
                    n1[i] = k[i] - 1;
                    n2[i] = k[i] + 1;
                }
                if j < d {
                    n1[j] = k[j] + d as i32;
                    n2[j] = k[j] - d as i32;
                }
                neighbours[j * m + v as usize] = [
                    table.find(&n1).unwrap_or(NONE),
                    table.find(&n2).unwrap_or(NONE),
                ];
            }
        }

        // Vertex cell volume in feature units turns vertex mass into density.
        let cell = (d1 as f64).powf(d as f64 - 0.5) / inv_std.powi(d as i32);
        let scale = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) / cell;

        Self {
            dim: d,
            n_points: n,
            n_vertices: m,
            vertices,
            weights,
            neighbours,
            scale,
            side,
            self_response: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    pub fn vertex_count(&self) -> usize {
        self.n_vertices
    }

    /// Vertex ids of point `i`'s enclosing simplex.
    pub fn point_vertices(&self, i: usize) -> &[u32] {
        let d1 = self.dim + 1;
        &self.vertices[i * d1..(i + 1) * d1]
    }

    /// Barycentric weights of point `i`.
    pub fn point_weights(&self, i: usize) -> &[f64] {
        let d1 = self.dim + 1;
        &self.weights[i * d1..(i + 1) * d1]
    }

    fn blur_in_place(&self, buf: &mut Vec<f64>, tmp: &mut Vec<f64>) {
        let d1 = self.dim + 1;
        self.blur_passes(buf, tmp, (0..d1).chain((0..d1).rev()));
    }

    fn blur_passes(
        &self,
        buf: &mut Vec<f64>,
        tmp: &mut Vec<f64>,
        passes: impl Iterator<Item = usize>,
    ) {
        let m = self.n_vertices;
        for j in passes {
            let nb = &self.neighbours[j * m..(j + 1) * m];
            for v in 0..m {
                let [a, b] = nb[v];
                let mut acc = (1.0 - 2.0 * self.side) * buf[v];
                if a != NONE {
                    acc += self.side * buf[a as usize];
                }
                if b != NONE {
                    acc += self.side * buf[b as usize];
                }
                tmp[v] = acc;
            }
            std::mem::swap(buf, tmp);
        }
    }

    /// Raw splat-blur-slice of one channel, scaled but with the lattice's own
    /// self term still inside.
    fn raw_channel(&self, values: impl Iterator<Item = f64>) -> Vec<f64> {
        let d1 = self.dim + 1;
        let mut buf = vec![0.0f64; self.n_vertices];
        let mut tmp = vec![0.0f64; self.n_vertices];
        for (i, v) in values.enumerate() {
            let s = i * d1;
            for k in s..s + d1 {
                buf[self.vertices[k] as usize] += self.weights[k] * v;
            }
        }
        self.blur_in_place(&mut buf, &mut tmp);
        (0..self.n_points)
            .map(|i| {
                let s = i * d1;
                let acc: f64 = (s..s + d1)
                    .map(|k| self.weights[k] * buf[self.vertices[k] as usize])
                    .sum();
                acc * self.scale
            })
            .collect()
    }

    fn check_rows(&self, values: &[f64], channels: usize) -> Result<()> {
        if channels == 0 || values.len() != self.n_points * channels {
            return Err(Error::Shape {
                expected: self.n_points * channels.max(1),
                actual: values.len(),
            });
        }
        Ok(())
    }

    fn filter_impl(
        &self,
        values: &[f64],
        channels: usize,
        parallel: bool,
        keep_self: bool,
    ) -> Result<Vec<f64>> {
        self.check_rows(values, channels)?;
        let run = |c: usize| {
            let col = values.iter().skip(c).step_by(channels).copied();
            let mut out = self.raw_channel(col);
            for (i, o) in out.iter_mut().enumerate() {
                let v = values[i * channels + c];
                *o -= self.self_response[i] * v;
                if keep_self {
                    *o += v;
                }
            }
            out
        };
        let cols: Vec<Vec<f64>> = if parallel && channels > 1 {
            (0..channels).into_par_iter().map(run).collect()
        } else {
            (0..channels).map(run).collect()
        };
        let mut out = vec![0.0; values.len()];
        for (c, col) in cols.into_iter().enumerate() {
            for (i, v) in col.into_iter().enumerate() {
                out[i * channels + c] = v;
            }
        }
        Ok(out)
    }

    /// Unnormalized Gaussian filter of a row-major `N x channels` signal,
    /// including the self term with weight one.
    pub fn filter(&self, values: &[f64], channels: usize) -> Result<Vec<f64>> {
        self.filter_impl(values, channels, false, true)
    }

    /// Same as [`Lattice::filter`], running channels on the rayon pool.
    pub fn filter_parallel(&self, values: &[f64], channels: usize) -> Result<Vec<f64>> {
        self.filter_impl(values, channels, true, true)
    }

    /// Filter with the self term removed: the affinity product `W v` with
    /// `W_ii = 0`.
    pub fn affinity(&self, values: &[f64], channels: usize, parallel: bool) -> Result<Vec<f64>> {
        self.filter_impl(values, channels, parallel, false)
    }

    /// Filter divided by the filtered all-ones signal. Diagnostics only.
    pub fn filter_normalized(&self, values: &[f64], channels: usize) -> Result<Vec<f64>> {
        let num = self.filter(values, channels)?;
        let den = self.filter(&vec![1.0; self.n_points], 1)?;
        Ok(num
            .iter()
            .enumerate()
            .map(|(k, v)| v / den[k / channels])
            .collect())
    }
}

/// Shifted lattices used by [`GaussianFilter::build`] unless told otherwise.
pub const DEFAULT_SHIFTS: usize = 16;

/// Average of lattice filters over shifted copies of one feature set.
#[derive(Debug, Clone)]
pub struct GaussianFilter {
    parts: Vec<Lattice>,
}

impl GaussianFilter {
    /// Builds with [`DEFAULT_SHIFTS`] lattices.
    pub fn build<F: AsRef<[f64]>>(features: &[F]) -> Result<Self> {
        Self::with_shifts(features, DEFAULT_SHIFTS)
    }

    pub fn with_shifts<F: AsRef<[f64]>>(features: &[F], shifts: usize) -> Result<Self> {
        let (flat, d) = flatten(features)?;
        Self::from_flat(&flat, d, shifts)
    }

    /// Row-major `N x d` features.
    pub fn from_flat(features: &[f64], d: usize, shifts: usize) -> Result<Self> {
        if d == 0 || features.is_empty() || !features.len().is_multiple_of(d) {
            return Err(Error::InvalidFeature(format!(
                "{} values do not form points of dimension {d}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeature("non-finite feature".into()));
        }
        if shifts == 0 {
            return Err(Error::InvalidConfig(
                "at least one lattice shift is needed".into(),
            ));
        }
        // Anchor each coordinate at its minimum so a global translation of
        // the features leaves the lattices unchanged.
        let mut lo = vec![f64::INFINITY; d];
        for p in features.chunks_exact(d) {
            for (l, v) in lo.iter_mut().zip(p) {
                *l = l.min(*v);
            }
        }
        let mut shifted = vec![0.0; features.len()];
        let parts = (0..shifts)
            .map(|s| {
                let offset = shift_vector(s, d);
                for (i, v) in features.iter().enumerate() {
                    shifted[i] = (v - lo[i % d]) + offset[i % d];
                }
                Lattice::build_flat(&shifted, d)
            })
            .collect();
        Ok(Self { parts })
    }

    pub fn len(&self) -> usize {
        self.parts[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts[0].is_empty()
    }

    pub fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    pub fn shifts(&self) -> usize {
        self.parts.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.parts.iter().map(Lattice::vertex_count).sum()
    }

    fn average(
        &self,
        values: &[f64],
        channels: usize,
        parallel: bool,
        keep_self: bool,
    ) -> Result<Vec<f64>> {
        let run = |lat: &Lattice| lat.filter_impl(values, channels, false, keep_self);
        let outs: Vec<Vec<f64>> = if parallel {
            self.parts.par_iter().map(run).collect::<Result<_>>()?
        } else {
            self.parts.iter().map(run).collect::<Result<_>>()?
        };
        let w = 1.0 / self.parts.len() as f64;
        let mut acc = vec![0.0; values.len()];
        for out in outs {
            for (a, o) in acc.iter_mut().zip(out) {
                *a += o;
            }
        }
        acc.iter_mut().for_each(|a| *a *= w);
        Ok(acc)
    }

    /// Unnormalized Gaussian filter including the self term.
    pub fn filter(&self, values: &[f64], channels: usize) -> Result<Vec<f64>> {
        self.average(values, channels, false, true)
    }

    /// Same as [`GaussianFilter::filter`] with lattices run on the rayon pool.
    pub fn filter_parallel(&self, values: &[f64], channels: usize) -> Result<Vec<f64>> {
        self.average(values, channels, true, true)
    }

    /// `W v` with `W_ii = 0`.
    pub fn affinity(&self, values: &[f64], channels: usize, parallel: bool) -> Result<Vec<f64>> {
        self.average(values, channels, parallel, false)
    }
}

/// Deterministic offset of the `s`-th lattice, uniform over a box a few
/// lattice periods wide.
fn shift_vector(s: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let mut z = (s as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                ^ (i as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 5.0
        })
        .collect()
}

fn flatten<F: AsRef<[f64]>>(features: &[F]) -> Result<(Vec<f64>, usize)> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidFeature("no feature points".into()))?;
    let d = first.as_ref().len();
    if d == 0 {
        return Err(Error::InvalidFeature("feature dimension is zero".into()));
    }
    let mut flat = Vec::with_capacity(features.len() * d);
    for (i, f) in features.iter().enumerate() {
        let f = f.as_ref();
        if f.len() != d {
            return Err(Error::InvalidFeature(format!(
                "point {i} has dimension {}, expected {d}",
                f.len()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeature(format!("point {i} is not finite")));
        }
        flat.extend_from_slice(f);
    }
    Ok((flat, d))
}

/// `kappa[m]`: the raw operator between two vertices of one simplex whose
/// remainders differ by `m`. On a lattice with no missing vertices this
/// depends on nothing else, so every point's self response follows from its
/// barycentric weights alone.
fn self_kernel(d: usize, refinement: f64, side: f64) -> Vec<f64> {
    let d1 = d + 1;
    let probe: Vec<f64> = (0..d).map(|i| 0.1 + 0.01 * i as f64).collect();
    let lat = Lattice::build_raw(&probe, d, refinement, side);
    let ids = lat.point_vertices(0).to_vec();
    let m = lat.n_vertices;
    let spread: Vec<Vec<f64>> = ids
        .iter()
        .map(|&v| {
            let mut buf = vec![0.0; m];
            let mut tmp = vec![0.0; m];
            buf[v as usize] = 1.0;
            lat.blur_passes(&mut buf, &mut tmp, 0..d1);
            buf
        })
        .collect();
    (0..d1)
        .map(|k| spread[0].iter().zip(&spread[k]).map(|(x, y)| x * y).sum())
        .collect()
}

/// Exact `O(N^2 c)` Gaussian filter; the oracle for [`Lattice::filter`].
pub fn brute_force_filter<F: AsRef<[f64]>>(
    features: &[F],
    values: &[f64],
    channels: usize,
) -> Result<Vec<f64>> {
    let n = features.len();
    if n > BRUTE_FORCE_CAP {
        return Err(Error::ResourceLimit(format!(
            "{n} points exceeds the brute-force cap of {BRUTE_FORCE_CAP}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidFeature("no feature points".into()));
    }
    let d = features[0].as_ref().len();
    if features.iter().any(|f| f.as_ref().len() != d) {
        return Err(Error::InvalidFeature("ragged feature dimensions".into()));
    }
    if channels == 0 || values.len() != n * channels {
        return Err(Error::Shape {
            expected: n * channels.max(1),
            actual: values.len(),
        });
    }
    let mut out = vec![0.0; n * channels];
    for i in 0..n {
        let fi = features[i].as_ref();
        for j in 0..n {
            let fj = features[j].as_ref();
            let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = (-0.5 * d2).exp();
            for c in 0..channels {
                out[i * channels + c] += k * values[j * channels + c];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * spread).collect())
            .collect()
    }

    #[test]
    fn single_point_has_a_full_simplex() {
        let lat = Lattice::build(&[vec![0.3, -1.2]]).unwrap();
        let mut ids = lat.point_vertices(0).to_vec();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 3);
        let w: f64 = lat.point_weights(0).iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
        let out = lat.filter(&[2.5], 1).unwrap();
        assert!((out[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn identical_points_share_vertices() {
        let lat = Lattice::build(&[vec![0.7, 0.1], vec![0.7, 0.1]]).unwrap();
        assert_eq!(lat.point_vertices(0), lat.point_vertices(1));
        assert_eq!(lat.point_weights(0), lat.point_weights(1));
        let out = lat.filter(&[1.0, 0.0], 1).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9);
        assert!((out[1] - 1.0).abs() < 0.15, "{}", out[1]);
        let avg = GaussianFilter::build(&[vec![0.7, 0.1], vec![0.7, 0.1]]).unwrap();
        let out = avg.filter(&[1.0, 0.0], 1).unwrap();
        assert!((out[1] - 1.0).abs() < 0.05, "{}", out[1]);
    }

    #[test]
    fn distant_points_do_not_interact() {
        let feats = vec![vec![0.0, 0.0], vec![20.0, 0.0]];
        let lat = Lattice::build(&feats).unwrap();
        let out = lat.filter(&[1.0, 0.0], 1).unwrap();
        let oracle = brute_force_filter(&feats, &[1.0, 0.0], 1).unwrap();
        assert!((out[0] - oracle[0]).abs() < 1e-6);
        assert!((out[1] - oracle[1]).abs() < 1e-6);
        assert!((out[0] - 1.0).abs() < 1e-6 && out[1].abs() < 1e-6);
    }

    #[test]
    fn brute_force_hand_values() {
        let feats = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let out = brute_force_filter(&feats, &[1.0, 0.0], 1).unwrap();
        assert_eq!(out[0], 1.0);
        assert!((out[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(
            brute_force_filter(&[vec![4.0]], &[3.0, 5.0], 2).unwrap(),
            vec![3.0, 5.0]
        );
    }

    #[test]
    fn brute_force_enforces_cap() {
        let feats = vec![vec![0.0]; BRUTE_FORCE_CAP + 1];
        let vals = vec![0.0; BRUTE_FORCE_CAP + 1];
        assert!(matches!(
            brute_force_filter(&feats, &vals, 1),
            Err(Error::ResourceLimit(_))
        ));
    }

    #[test]
    fn shape_and_feature_errors() {
        assert!(matches!(
            Lattice::build(&[vec![0.0, 1.0], vec![1.0]]),
            Err(Error::InvalidFeature(_))
        ));
        assert!(Lattice::build::<Vec<f64>>(&[]).is_err());
        let lat = Lattice::build(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(lat.filter(&[1.0], 1), Err(Error::Shape { .. })));
        assert!(matches!(
            GaussianFilter::with_shifts(&[vec![0.0]], 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(GaussianFilter::from_flat(&[0.0, f64::NAN], 2, 1).is_err());
    }

    #[test]
    fn weights_are_barycentric_for_random_points() {
        let pts = random_points(100, 5, 4.0, 7);
        let lat = Lattice::build(&pts).unwrap();
        for i in 0..pts.len() {
            let w = lat.point_weights(i);
            assert!(w.iter().all(|&x| x >= -1e-12), "{w:?}");
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_oracle_on_random_points() {
        for (d, seed) in [(2usize, 1u64), (3, 2), (5, 3)] {
            let pts = random_points(500, d, 3.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let vals: Vec<f64> = (0..pts.len()).map(|_| rng.random::<f64>()).collect();
            let lat = GaussianFilter::build(&pts).unwrap();
            let got = lat.filter(&vals, 1).unwrap();
            let want = brute_force_filter(&pts, &vals, 1).unwrap();
            let worst = got
                .iter()
                .zip(&want)
                .map(|(g, w)| (g - w).abs() / w.abs())
                .fold(0.0, f64::max);
            assert!(worst <= 0.05, "d={d}: worst relative error {worst}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn filter_is_linear_and_symmetric(seed in 0u64..10_000, d in 1usize..6) {
            let pts = random_points(40, d, 2.5, seed);
            let lat = Lattice::build(&pts).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let u: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (a, b) = (0.7, -2.3);
            let mix: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
            let fu = lat.filter(&u, 1).unwrap();
            let fw = lat.filter(&w, 1).unwrap();
            let fm = lat.filter(&mix, 1).unwrap();
            for i in 0..40 {
                prop_assert!((fm[i] - (a * fu[i] + b * fw[i])).abs() <= 1e-10 * (1.0 + fm[i].abs()));
            }
            let lhs: f64 = u.iter().zip(&fw).map(|(x, y)| x * y).sum();
            let rhs: f64 = w.iter().zip(&fu).map(|(x, y)| x * y).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()).max(1e-12));

            let ones = lat.filter(&vec![1.0; 40], 1).unwrap();
            prop_assert!(ones.iter().all(|&o| o >= 1.0 - 1e-12));
        }
    }
}
