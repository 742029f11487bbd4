//! Factorized (3+K)-dimensional feature grids.
//!
//! The spatial part of the scene is stored as three vector-matrix pairs per
//! feature grid (XY·Z, XZ·Y, YZ·X), the parameter part as K CP vectors per
//! rank-one component. Sampling is corner-aligned: node 0 sits at normalized
//! coordinate −1 and node N−1 at +1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Axis-aligned bounding box in scene units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(min[a].is_finite() && max[a].is_finite()) {
                return Err(Error::InvalidAabb(format!("non-finite bounds {min:?}..{max:?}")));
            }
            if !(min[a] < max[a]) {
                return Err(Error::InvalidAabb(format!(
                    "degenerate extent on axis {a}: {} .. {}",
                    min[a], max[a]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// The cube `[-half, half]³`.
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.max[0] + self.min[0]),
            0.5 * (self.max[1] + self.min[1]),
            0.5 * (self.max[2] + self.min[2]),
        ]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    /// Maps `min` to −1 and `max` to +1 on every axis.
    #[inline]
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = 2.0 * (p[a] - self.min[a]) / (self.max[a] - self.min[a]) - 1.0;
        }
        out
    }

    #[inline]
    pub fn denormalize(&self, n: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = self.min[a] + 0.5 * (n[a] + 1.0) * (self.max[a] - self.min[a]);
        }
        out
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// True when `other` lies inside `self` (up to `tol` per face).
    pub fn contains(&self, other: &Aabb, tol: f64) -> bool {
        (0..3).all(|a| other.min[a] >= self.min[a] - tol && other.max[a] <= self.max[a] + tol)
    }

    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            min[a] = self.min[a].max(other.min[a]);
            max[a] = self.max[a].min(other.max[a]);
        }
        Aabb::new(min, max).ok()
    }
}

/// Linear interpolation stencil: value = (1−w)·v[i] + w·v[i+1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub i: usize,
    pub w: f64,
}

impl Tap {
    /// Corner-aligned stencil for normalized coordinate `s ∈ [−1, 1]` on `len ≥ 2` nodes.
    #[inline]
    pub fn new(s: f64, len: usize) -> Self {
        debug_assert!(len >= 2);
        let u = ((s + 1.0) * 0.5 * (len - 1) as f64).clamp(0.0, (len - 1) as f64);
        let i = (u.floor() as usize).min(len - 2);
        Tap { i, w: u - i as f64 }
    }
}

/// R channels along a line of `len` nodes, stored node-major (`data[node * rank + r]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Line<T> {
    pub len: usize,
    pub rank: usize,
    pub data: Vec<T>,
}

impl<T: Real> Line<T> {
    pub fn filled(len: usize, rank: usize, value: T) -> Self {
        Self {
            len,
            rank,
            data: vec![value; len * rank],
        }
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rank: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..len * rank)
            .map(|_| T::lit(rng.gen_range(-scale..scale)))
            .collect();
        Self { len, rank, data }
    }

    #[inline]
    pub fn at(&self, node: usize, r: usize) -> T {
        self.data[node * self.rank + r]
    }

    #[inline]
    pub(crate) fn interp(&self, tap: Tap, r: usize) -> T {
        let w = T::lit(tap.w);
        let a = self.data[tap.i * self.rank + r];
        let b = self.data[(tap.i + 1) * self.rank + r];
        a + (b - a) * w
    }

    #[inline]
    pub(crate) fn scatter(&mut self, tap: Tap, r: usize, g: T) {
        let w = T::lit(tap.w);
        self.data[tap.i * self.rank + r] += g * (T::one() - w);
        self.data[(tap.i + 1) * self.rank + r] += g * w;
    }

    /// Samples this line at normalized coordinate `s`, all channels.
    pub fn sample(&self, s: f64) -> Vec<T> {
        let tap = Tap::new(s, self.len);
        (0..self.rank).map(|r| self.interp(tap, r)).collect()
    }

    /// Resamples onto `new_len` nodes whose normalized coordinate `s'` maps to `s = map(s')`.
    fn resample(&self, new_len: usize, map: impl Fn(f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(new_len * self.rank);
        for k in 0..new_len {
            let s_new = node_coord(k, new_len);
            let tap = Tap::new(map(s_new), self.len);
            for r in 0..self.rank {
                data.push(self.interp(tap, r));
            }
        }
        Self {
            len: new_len,
            rank: self.rank,
            data,
        }
    }
}

/// R channels on a `rows × cols` plane, stored node-major (`data[(i * cols + j) * rank + r]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub data: Vec<T>,
}

impl<T: Real> Plane<T> {
    pub fn filled(rows: usize, cols: usize, rank: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            rank,
            data: vec![value; rows * cols * rank],
        }
    }

    pub fn random<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..rows * cols * rank)
            .map(|_| T::lit(rng.gen_range(-scale..scale)))
            .collect();
        Self {
            rows,
            cols,
            rank,
            data,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, r: usize) -> T {
        self.data[(i * self.cols + j) * self.rank + r]
    }

    #[inline]
    pub(crate) fn interp(&self, ti: Tap, tj: Tap, r: usize) -> T {
        let (wi, wj) = (T::lit(ti.w), T::lit(tj.w));
        let base = (ti.i * self.cols + tj.i) * self.rank + r;
        let row = self.cols * self.rank;
        let v00 = self.data[base];
        let v01 = self.data[base + self.rank];
        let v10 = self.data[base + row];
        let v11 = self.data[base + row + self.rank];
        let top = v00 + (v01 - v00) * wj;
        let bottom = v10 + (v11 - v10) * wj;
        top + (bottom - top) * wi
    }

    #[inline]
    pub(crate) fn scatter(&mut self, ti: Tap, tj: Tap, r: usize, g: T) {
        let (wi, wj) = (T::lit(ti.w), T::lit(tj.w));
        let (ui, uj) = (T::one() - wi, T::one() - wj);
        let base = (ti.i * self.cols + tj.i) * self.rank + r;
        let row = self.cols * self.rank;
        self.data[base] += g * ui * uj;
        self.data[base + self.rank] += g * ui * wj;
        self.data[base + row] += g * wi * uj;
        self.data[base + row + self.rank] += g * wi * wj;
    }

    fn resample(
        &self,
        new_rows: usize,
        new_cols: usize,
        map_i: impl Fn(f64) -> f64,
        map_j: impl Fn(f64) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(new_rows * new_cols * self.rank);
        let col_taps: Vec<Tap> = (0..new_cols)
            .map(|j| Tap::new(map_j(node_coord(j, new_cols)), self.cols))
            .collect();
        for i in 0..new_rows {
            let ti = Tap::new(map_i(node_coord(i, new_rows)), self.rows);
            for &tj in &col_taps {
                for r in 0..self.rank {
                    data.push(self.interp(ti, tj, r));
                }
            }
        }
        Self {
            rows: new_rows,
            cols: new_cols,
            rank: self.rank,
            data,
        }
    }
}

/// Normalized coordinate of node `k` out of `len` (corner-aligned).
#[inline]
pub fn node_coord(k: usize, len: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / (len - 1) as f64
}

/// Which tensors make up the spatial factorization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decomposition {
    /// Matrix ∘ vector per axis pairing.
    #[default]
    VectorMatrix,
    /// Matrices only; the complementary vector is implicitly 1.
    Matrices,
    /// Each plane replaced by the outer product of two vectors (CP along all three axes).
    Vectors,
}

/// Whether density and appearance features come from separate grids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridLayout {
    #[default]
    Split,
    /// One grid (rank R_σ + R_c) feeds both decoders.
    Unified,
}

/// Plane axes and complementary line axis for the three pairings, in feature order.
pub const PAIRS: [([usize; 2], usize); 3] = [([0, 1], 2), ([0, 2], 1), ([1, 2], 0)];

/// Vector-matrix factorization of a 3D feature volume.
///
/// `matrices[k]` is the plane of pairing `k` and `vectors[k]` its line; with
/// [`Decomposition::Vectors`] the plane is the product of `vectors[3 + 2k]`
/// (row axis) and `vectors[4 + 2k]` (column axis).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedGrid<T> {
    pub decomposition: Decomposition,
    pub rank: usize,
    pub resolution: [usize; 3],
    pub matrices: Vec<Plane<T>>,
    pub vectors: Vec<Line<T>>,
}

impl<T: Real> FactorizedGrid<T> {
    fn build(
        decomposition: Decomposition,
        rank: usize,
        resolution: [usize; 3],
        mut plane: impl FnMut(usize, usize) -> Plane<T>,
        mut line: impl FnMut(usize) -> Line<T>,
    ) -> Self {
        let mut matrices = Vec::new();
        let mut vectors = Vec::new();
        if decomposition != Decomposition::Vectors {
            for (axes, _) in PAIRS {
                matrices.push(plane(resolution[axes[0]], resolution[axes[1]]));
            }
        }
        if decomposition != Decomposition::Matrices {
            for (_, axis) in PAIRS {
                vectors.push(line(resolution[axis]));
            }
        }
        if decomposition == Decomposition::Vectors {
            for (axes, _) in PAIRS {
                vectors.push(line(resolution[axes[0]]));
                vectors.push(line(resolution[axes[1]]));
            }
        }
        Self {
            decomposition,
            rank,
            resolution,
            matrices,
            vectors,
        }
    }

    pub fn filled(
        decomposition: Decomposition,
        rank: usize,
        resolution: [usize; 3],
        value: T,
    ) -> Result<Self> {
        check_resolution(resolution)?;
        Ok(Self::build(
            decomposition,
            rank,
            resolution,
            |r, c| Plane::filled(r, c, rank, value),
            |l| Line::filled(l, rank, value),
        ))
    }

    pub fn random<R: Rng + ?Sized>(
        decomposition: Decomposition,
        rank: usize,
        resolution: [usize; 3],
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_resolution(resolution)?;
        let mut planes = Vec::new();
        for (axes, _) in PAIRS {
            if decomposition != Decomposition::Vectors {
                planes.push(Plane::random(
                    resolution[axes[0]],
                    resolution[axes[1]],
                    rank,
                    scale,
                    rng,
                ));
            }
        }
        let mut grid = Self::build(
            decomposition,
            rank,
            resolution,
            |r, c| Plane::filled(r, c, rank, T::zero()),
            |l| Line::filled(l, rank, T::zero()),
        );
        grid.matrices = planes;
        for v in &mut grid.vectors {
            *v = Line::random(v.len, rank, scale, rng);
        }
        Ok(grid)
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill(T::zero());
        g
    }

    pub fn fill(&mut self, value: T) {
        for m in &mut self.matrices {
            m.data.fill(value);
        }
        for v in &mut self.vectors {
            v.data.fill(value);
        }
    }

    /// Length of the sampled feature: three blocks of `rank`.
    pub fn feature_len(&self) -> usize {
        3 * self.rank
    }

    pub fn count_parameters(&self) -> usize {
        self.matrices.iter().map(|m| m.data.len()).sum::<usize>()
            + self.vectors.iter().map(|v| v.data.len()).sum::<usize>()
    }

    pub(crate) fn taps(&self, x: [f64; 3]) -> [Tap; 3] {
        [
            Tap::new(x[0], self.resolution[0]),
            Tap::new(x[1], self.resolution[1]),
            Tap::new(x[2], self.resolution[2]),
        ]
    }

    /// Plane and line value of pairing `k`, channel `r`.
    #[inline]
    fn pair_values(&self, taps: &[Tap; 3], k: usize, r: usize) -> (T, T) {
        let ([a, b], c) = PAIRS[k];
        let plane = match self.decomposition {
            Decomposition::Vectors => {
                self.vectors[3 + 2 * k].interp(taps[a], r)
                    * self.vectors[4 + 2 * k].interp(taps[b], r)
            }
            _ => self.matrices[k].interp(taps[a], taps[b], r),
        };
        let line = match self.decomposition {
            Decomposition::Matrices => T::one(),
            _ => self.vectors[k].interp(taps[c], r),
        };
        (plane, line)
    }

    /// Writes the `3·rank` spatial feature at normalized `x` into `out`.
    pub fn sample_into(&self, x: [f64; 3], out: &mut [T]) {
        let taps = self.taps(x);
        let rank = self.rank;
        for k in 0..3 {
            for r in 0..rank {
                let (p, l) = self.pair_values(&taps, k, r);
                out[k * rank + r] = p * l;
            }
        }
    }

    /// Adds `∂L/∂weights` into `grads` given `∂L/∂feature` at normalized `x`.
    pub fn accumulate(&self, x: [f64; 3], d_feature: &[T], grads: &mut FactorizedGrid<T>) {
        let taps = self.taps(x);
        let rank = self.rank;
        for k in 0..3 {
            let ([a, b], c) = PAIRS[k];
            for r in 0..rank {
                let g = d_feature[k * rank + r];
                if g == T::zero() {
                    continue;
                }
                match self.decomposition {
                    Decomposition::VectorMatrix => {
                        let p = self.matrices[k].interp(taps[a], taps[b], r);
                        let l = self.vectors[k].interp(taps[c], r);
                        grads.matrices[k].scatter(taps[a], taps[b], r, g * l);
                        grads.vectors[k].scatter(taps[c], r, g * p);
                    }
                    Decomposition::Matrices => {
                        grads.matrices[k].scatter(taps[a], taps[b], r, g);
                    }
                    Decomposition::Vectors => {
                        let u = self.vectors[3 + 2 * k].interp(taps[a], r);
                        let w = self.vectors[4 + 2 * k].interp(taps[b], r);
                        let l = self.vectors[k].interp(taps[c], r);
                        grads.vectors[k].scatter(taps[c], r, g * u * w);
                        grads.vectors[3 + 2 * k].scatter(taps[a], r, g * w * l);
                        grads.vectors[4 + 2 * k].scatter(taps[b], r, g * u * l);
                    }
                }
            }
        }
    }

    /// Resamples every tensor onto `new_resolution`, where node coordinate
    /// `s'` on axis `a` reads the old grid at `maps[a](s')`.
    fn resample(&self, new_resolution: [usize; 3], maps: [&dyn Fn(f64) -> f64; 3]) -> Self {
        let mut out = self.clone();
        out.resolution = new_resolution;
        for (k, m) in out.matrices.iter_mut().enumerate() {
            let ([a, b], _) = PAIRS[k];
            *m = self.matrices[k].resample(new_resolution[a], new_resolution[b], maps[a], maps[b]);
        }
        for (idx, v) in out.vectors.iter_mut().enumerate() {
            let axis = self.vector_axis(idx);
            *v = self.vectors[idx].resample(new_resolution[axis], maps[axis]);
        }
        out
    }

    /// Spatial axis that `vectors[idx]` runs along.
    pub fn vector_axis(&self, idx: usize) -> usize {
        if idx < 3 {
            PAIRS[idx].1
        } else {
            let k = (idx - 3) / 2;
            PAIRS[k].0[(idx - 3) % 2]
        }
    }

    /// Corner-aligned bilinear/linear upsampling; shared nodes keep their values.
    pub fn upsample(&self, new_resolution: [usize; 3]) -> Result<Self> {
        check_resolution(new_resolution)?;
        if (0..3).any(|a| new_resolution[a] < self.resolution[a]) {
            return Err(Error::ResolutionShrink {
                old: self.resolution,
                new: new_resolution,
            });
        }
        let id = |s: f64| s;
        Ok(self.resample(new_resolution, [&id, &id, &id]))
    }

    /// Dense `Σ_r Σ_k plane·line` value at node `(i, j, l)`, summed over blocks.
    ///
    /// This is the single-channel volume of the classic VM factorization, used
    /// for exactness checks.
    pub fn dense_value(&self, node: [usize; 3]) -> T {
        let x = [
            node_coord(node[0], self.resolution[0]),
            node_coord(node[1], self.resolution[1]),
            node_coord(node[2], self.resolution[2]),
        ];
        let mut f = vec![T::zero(); self.feature_len()];
        self.sample_into(x, &mut f);
        f.into_iter().sum()
    }
}

fn check_resolution(res: [usize; 3]) -> Result<()> {
    if res.iter().any(|&n| n < 2) {
        return Err(Error::Config(format!(
            "grid resolution {res:?} must be at least 2 per axis"
        )));
    }
    Ok(())
}

/// CP factorization of the K-dimensional parameter space.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterAxes<T> {
    pub rank: usize,
    /// One line per parameter axis; line `k` has `M_k` nodes.
    pub vectors: Vec<Line<T>>,
    pub ranges: Vec<(f64, f64)>,
}

impl<T: Real> ParameterAxes<T> {
    /// Fresh axes with every weight exactly 1.
    pub fn ones(rank: usize, resolutions: &[usize], ranges: &[(f64, f64)]) -> Result<Self> {
        if resolutions.len() != ranges.len() {
            return Err(Error::Config(format!(
                "{} parameter resolutions but {} ranges",
                resolutions.len(),
                ranges.len()
            )));
        }
        for (k, (&m, &(lo, hi))) in resolutions.iter().zip(ranges).enumerate() {
            if m < 2 {
                return Err(Error::Config(format!("parameter axis {k} needs at least 2 nodes")));
            }
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "parameter axis {k} has invalid range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self {
            rank,
            vectors: resolutions.iter().map(|&m| Line::filled(m, rank, T::one())).collect(),
            ranges: ranges.to_vec(),
        })
    }

    pub fn dims(&self) -> usize {
        self.vectors.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for v in &mut g.vectors {
            v.data.fill(T::zero());
        }
        g
    }

    pub fn count_parameters(&self) -> usize {
        self.vectors.iter().map(|v| v.data.len()).sum()
    }

    /// Validates `p` and returns the stencil on every axis.
    pub(crate) fn taps(&self, p: &[f64]) -> Result<Vec<Tap>> {
        if p.len() != self.dims() {
            return Err(Error::ParamCount {
                expected: self.dims(),
                got: p.len(),
            });
        }
        p.iter()
            .zip(&self.ranges)
            .zip(&self.vectors)
            .enumerate()
            .map(|(index, ((&value, &(lo, hi)), line))| {
                if !(value >= lo && value <= hi) {
                    return Err(Error::ParamOutOfRange { index, value, lo, hi });
                }
                let t = (value - lo) / (hi - lo);
                Ok(Tap::new(2.0 * t - 1.0, line.len))
            })
            .collect()
    }

    /// Product over axes of the linearly interpolated parameter vectors.
    pub fn sample(&self, p: &[f64]) -> Result<Vec<T>> {
        let taps = self.taps(p)?;
        Ok((0..self.rank)
            .map(|r| {
                self.vectors
                    .iter()
                    .zip(&taps)
                    .fold(T::one(), |acc, (line, &tap)| acc * line.interp(tap, r))
            })
            .collect())
    }

    pub fn accumulate(&self, p: &[f64], d_feature: &[T], grads: &mut ParameterAxes<T>) -> Result<()> {
        let taps = self.taps(p)?;
        for r in 0..self.rank {
            let g = d_feature[r];
            if g == T::zero() {
                continue;
            }
            let values: Vec<T> = self
                .vectors
                .iter()
                .zip(&taps)
                .map(|(line, &tap)| line.interp(tap, r))
                .collect();
            for k in 0..self.dims() {
                let others = values
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .fold(T::one(), |acc, (_, &v)| acc * v);
                grads.vectors[k].scatter(taps[k], r, g * others);
            }
        }
        Ok(())
    }
}

/// Density or appearance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Density,
    Appearance,
}

/// Construction parameters for a fresh field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub density_rank: usize,
    pub appearance_rank: usize,
    pub param_rank: usize,
    pub resolution: [usize; 3],
    /// Node count per parameter axis (number of distinct training values).
    pub param_resolutions: Vec<usize>,
    pub param_ranges: Vec<(f64, f64)>,
    pub aabb: Aabb,
    #[serde(default)]
    pub decomposition: Decomposition,
    #[serde(default)]
    pub layout: GridLayout,
    pub init_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            density_rank: 16,
            appearance_rank: 48,
            param_rank: 4,
            resolution: [128; 3],
            param_resolutions: Vec::new(),
            param_ranges: Vec::new(),
            aabb: Aabb::cube(1.0),
            decomposition: Decomposition::VectorMatrix,
            layout: GridLayout::Split,
            init_scale: 0.1,
        }
    }
}

/// The full (3+K)-D scene representation.
///
/// `aabb` is the region currently covered by the spatial grids; `frame` is the
/// scene frame fixed at construction, used for position encoding and for
/// measuring sample spacing so that cropping does not change the decoders' inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedField<T> {
    pub density: FactorizedGrid<T>,
    /// `None` with [`GridLayout::Unified`].
    pub appearance: Option<FactorizedGrid<T>>,
    pub density_params: ParameterAxes<T>,
    pub appearance_params: Option<ParameterAxes<T>>,
    pub aabb: Aabb,
    pub frame: Aabb,
}

impl<T: Real> FactorizedField<T> {
    pub fn new<R: Rng + ?Sized>(config: &FieldConfig, rng: &mut R) -> Result<Self> {
        let dec = config.decomposition;
        let (density, appearance) = match config.layout {
            GridLayout::Split => (
                FactorizedGrid::random(dec, config.density_rank, config.resolution, config.init_scale, rng)?,
                Some(FactorizedGrid::random(
                    dec,
                    config.appearance_rank,
                    config.resolution,
                    config.init_scale,
                    rng,
                )?),
            ),
            GridLayout::Unified => (
                FactorizedGrid::random(
                    dec,
                    config.density_rank + config.appearance_rank,
                    config.resolution,
                    config.init_scale,
                    rng,
                )?,
                None,
            ),
        };
        let params = ParameterAxes::ones(config.param_rank, &config.param_resolutions, &config.param_ranges)?;
        let appearance_params = match config.layout {
            GridLayout::Split => Some(params.clone()),
            GridLayout::Unified => None,
        };
        Ok(Self {
            density,
            appearance,
            density_params: params,
            appearance_params,
            aabb: config.aabb,
            frame: config.aabb,
        })
    }

    pub fn layout(&self) -> GridLayout {
        if self.appearance.is_some() {
            GridLayout::Split
        } else {
            GridLayout::Unified
        }
    }

    pub fn grid(&self, which: FeatureKind) -> &FactorizedGrid<T> {
        match which {
            FeatureKind::Density => &self.density,
            FeatureKind::Appearance => self.appearance.as_ref().unwrap_or(&self.density),
        }
    }

    pub fn params(&self, which: FeatureKind) -> &ParameterAxes<T> {
        match which {
            FeatureKind::Density => &self.density_params,
            FeatureKind::Appearance => self.appearance_params.as_ref().unwrap_or(&self.density_params),
        }
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.density.resolution
    }

    pub fn param_dims(&self) -> usize {
        self.density_params.dims()
    }

    pub fn param_ranges(&self) -> &[(f64, f64)] {
        &self.density_params.ranges
    }

    pub fn feature_len(&self, which: FeatureKind) -> usize {
        self.grid(which).feature_len() + self.params(which).rank
    }

    /// Samples `[spatial ‖ parameter]` at normalized `x` and raw parameters `p`.
    pub fn sample_feature(&self, which: FeatureKind, x: [f64; 3], p: &[f64]) -> Result<Vec<T>> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteCoordinate(x));
        }
        let grid = self.grid(which);
        let mut out = vec![T::zero(); self.feature_len(which)];
        grid.sample_into(x, &mut out[..grid.feature_len()]);
        let tail = self.params(which).sample(p)?;
        out[grid.feature_len()..].copy_from_slice(&tail);
        Ok(out)
    }

    /// Upsamples both grids; parameter axes are untouched.
    pub fn upsample(&self, new_resolution: [usize; 3]) -> Result<Self> {
        let mut out = self.clone();
        out.density = self.density.upsample(new_resolution)?;
        if let Some(a) = &self.appearance {
            out.appearance = Some(a.upsample(new_resolution)?);
        }
        Ok(out)
    }

    /// Resamples the spatial grids so that the normalized cube spans `new_aabb`.
    pub fn crop_to_aabb(&self, new_aabb: Aabb, new_resolution: [usize; 3]) -> Result<Self> {
        let new_aabb = Aabb::new(new_aabb.min, new_aabb.max)?;
        if !self.aabb.contains(&new_aabb, 1e-9) {
            return Err(Error::InvalidAabb(format!(
                "{new_aabb:?} is not contained in {:?}",
                self.aabb
            )));
        }
        check_resolution(new_resolution)?;
        let old = self.aabb;
        let axis_map = |a: usize| {
            move |s: f64| {
                let world = new_aabb.min[a] + 0.5 * (s + 1.0) * (new_aabb.max[a] - new_aabb.min[a]);
                2.0 * (world - old.min[a]) / (old.max[a] - old.min[a]) - 1.0
            }
        };
        let (m0, m1, m2) = (axis_map(0), axis_map(1), axis_map(2));
        let maps: [&dyn Fn(f64) -> f64; 3] = [&m0, &m1, &m2];
        let mut out = self.clone();
        out.density = self.density.resample(new_resolution, maps);
        if let Some(a) = &self.appearance {
            out.appearance = Some(a.resample(new_resolution, maps));
        }
        out.aabb = new_aabb;
        Ok(out)
    }

    pub fn count_parameters(&self) -> usize {
        self.density.count_parameters()
            + self.appearance.as_ref().map_or(0, |g| g.count_parameters())
            + self.density_params.count_parameters()
            + self.appearance_params.as_ref().map_or(0, |p| p.count_parameters())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            density: self.density.zeros_like(),
            appearance: self.appearance.as_ref().map(|g| g.zeros_like()),
            density_params: self.density_params.zeros_like(),
            appearance_params: self.appearance_params.as_ref().map(|p| p.zeros_like()),
            aabb: self.aabb,
            frame: self.frame,
        }
    }

    /// Mutable grid for `which`, resolving the unified layout to the density grid.
    pub fn grid_mut(&mut self, which: FeatureKind) -> &mut FactorizedGrid<T> {
        match (which, &mut self.appearance) {
            (FeatureKind::Appearance, Some(a)) => a,
            _ => &mut self.density,
        }
    }

    pub fn params_mut(&mut self, which: FeatureKind) -> &mut ParameterAxes<T> {
        match (which, &mut self.appearance_params) {
            (FeatureKind::Appearance, Some(a)) => a,
            _ => &mut self.density_params,
        }
    }
}

/// Per-axis resolution with `budget` total voxels distributed by the aspect ratio of `aabb`.
pub fn resolution_for_budget(aabb: &Aabb, budget: usize) -> [usize; 3] {
    let e = aabb.extent();
    let unit = (budget as f64 / aabb.volume()).cbrt();
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((e[a] * unit).round() as usize).max(2);
    }
    out
}

/// Closed-form storage count of one grid (all decompositions).
pub fn grid_parameter_formula(decomposition: Decomposition, rank: usize, res: [usize; 3]) -> usize {
    let [nx, ny, nz] = res;
    let planes = nx * ny + nx * nz + ny * nz;
    let lines = nx + ny + nz;
    rank * match decomposition {
        Decomposition::VectorMatrix => planes + lines,
        Decomposition::Matrices => planes,
        Decomposition::Vectors => lines + 2 * lines,
    }
}
