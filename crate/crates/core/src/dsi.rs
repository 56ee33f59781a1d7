//! Dynamic skeletal interpolation of quaternion sequences, plus the global
//! and fixed-window polynomial baselines.
//!
//! Frames are 0-based and frame `f` sits at abscissa `f`. The pipeline:
//! sign continuity, threshold segmentation on the weighted frame distance,
//! per-interval Lagrange interpolation on an adaptive grid, random variants,
//! per-channel supersmoothing, renormalization.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quat::{angular_distance_unchecked, DistanceMode, Quaternion};
use crate::skeleton::OrientationSequence;
use crate::smoother::{supersmooth_with, SmootherConfig, SmootherError, MIN_POINTS};

#[derive(Debug, Error, PartialEq)]
pub enum DsiError {
    #[error("invalid interpolation params: {0}")]
    Params(String),
    #[error("sequence needs at least {need} frames, got {got}")]
    TooShort { got: usize, need: usize },
    #[error("frame {frame} out of range 1..{frames}")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("{got} bone weights for {bones} bones")]
    WeightCount { got: usize, bones: usize },
    #[error("interval [{start}, {end}] has fewer than 2 frames")]
    ShortInterval { start: usize, end: usize },
    #[error("bone {bone}: no frame with a usable quaternion")]
    Degenerate { bone: usize },
    #[error(transparent)]
    Smoother(#[from] SmootherError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanBasis {
    /// Spans cover a fraction of the input frames, whatever the grid density.
    InputFrames,
    /// Spans cover a fraction of the output samples.
    OutputSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpolationParams {
    /// Cut before any frame whose incoming weighted distance exceeds this (radians).
    pub threshold: f64,
    /// Output density: a normal interval of `n` frames gets `ceil(n / delta)` samples.
    pub delta: f64,
    /// An edge interval with jump `d` gets `max(2, floor(eta * d / delta))` samples.
    pub eta: f64,
    /// Variant count; variant 0 is the unperturbed interpolation.
    pub variants: usize,
    /// Per-bone weights; `None` means uniform.
    pub weights: Option<Vec<f64>>,
    /// Scale of the half-normal rotation angle added per interval and bone.
    pub sigma: f64,
    /// Interval time-warp factors are drawn from `[1 - warp, 1 + warp]`.
    pub warp: f64,
    pub seed: u64,
    /// Largest number of nodes in one Lagrange piece.
    pub max_nodes: usize,
    /// Allowed angular drift of keyframes after smoothing (radians).
    pub keyframe_tolerance: f64,
    pub smoother: SmootherConfig,
    /// What the smoother span fractions are fractions of.
    pub span_basis: SpanBasis,
    /// Fixed-window baseline: window length in frames.
    pub pwpi_window: usize,
    /// Fixed-window baseline: least-squares polynomial degree.
    pub pwpi_degree: usize,
}

impl Default for InterpolationParams {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            delta: 0.2,
            eta: 25.0,
            variants: 1,
            weights: None,
            sigma: 0.03,
            warp: 0.1,
            seed: 0,
            max_nodes: 6,
            keyframe_tolerance: 0.05,
            smoother: SmootherConfig::default(),
            span_basis: SpanBasis::InputFrames,
            pwpi_window: 8,
            pwpi_degree: 2,
        }
    }
}

impl InterpolationParams {
    pub fn validate(&self) -> Result<(), DsiError> {
        let bad = |m: &str| Err(DsiError::Params(m.to_string()));
        if !(self.threshold >= 0.0) {
            return bad("threshold must be non-negative");
        }
        if !(self.delta > 0.0) || !(self.eta > 0.0) {
            return bad("delta and eta must be positive");
        }
        if self.variants == 0 {
            return bad("at least one variant");
        }
        if !(self.sigma >= 0.0) || !(0.0..1.0).contains(&self.warp) {
            return bad("sigma must be non-negative and warp in [0, 1)");
        }
        if self.max_nodes < 2 {
            return bad("max_nodes must be at least 2");
        }
        if !(self.keyframe_tolerance > 0.0) {
            return bad("keyframe_tolerance must be positive");
        }
        if self.pwpi_window < 2 {
            return bad("pwpi_window must be at least 2");
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad("weights must be non-negative with a positive sum");
            }
        }
        self.smoother.validate()?;
        Ok(())
    }

    fn bone_weights(&self, bones: usize) -> Result<Vec<f64>, DsiError> {
        match &self.weights {
            None => Ok(vec![1.0 / bones as f64; bones]),
            Some(w) if w.len() != bones => Err(DsiError::WeightCount { got: w.len(), bones }),
            Some(w) => Ok(w.clone()),
        }
    }
}

/// Weighted mean angular distance between frames `f - 1` and `f`,
/// normalized by the weight sum.
pub fn frame_distance(q: &OrientationSequence, f: usize, weights: &[f64]) -> Result<f64, DsiError> {
    if f == 0 || f >= q.frames() {
        return Err(DsiError::FrameOutOfRange { frame: f, frames: q.frames() });
    }
    if weights.len() != q.bones() {
        return Err(DsiError::WeightCount { got: weights.len(), bones: q.bones() });
    }
    let total: f64 = weights.iter().sum();
    let sum: f64 = weights
        .iter()
        .zip(q.quats[f].iter().zip(&q.quats[f - 1]))
        .map(|(w, (a, b))| w * angular_distance_unchecked(a, b, DistanceMode::DoubleCover))
        .sum();
    Ok(if total > 0.0 { sum / total } else { 0.0 })
}

/// Flips signs so consecutive quaternions of each bone have a non-negative dot.
pub fn sign_continuity(q: &OrientationSequence) -> OrientationSequence {
    let mut out = q.clone();
    for f in 1..out.quats.len() {
        for b in 0..out.quats[f].len() {
            if out.quats[f][b].dot(&out.quats[f - 1][b]) < 0.0 {
                out.quats[f][b] = -out.quats[f][b];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    Normal,
    /// A single above-threshold step `[f - 1, f]`.
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
    pub kind: IntervalKind,
    /// Incoming distance of `end` for edge intervals, 0 otherwise.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Consecutive intervals share exactly one endpoint and together span `[0, F - 1]`.
    pub intervals: Vec<Interval>,
    /// Frames `f` with a cut before them.
    pub boundaries: Vec<usize>,
    /// `distances[f - 1]` is the incoming distance of frame `f`.
    pub distances: Vec<f64>,
}

/// Threshold segmentation. Normal intervals of a single frame (between two
/// adjacent cuts, or at a sequence end) are absorbed by the neighboring edges.
pub fn segment(q: &OrientationSequence, params: &InterpolationParams) -> Result<Segmentation, DsiError> {
    let frames = q.frames();
    if frames < 2 {
        return Err(DsiError::TooShort { got: frames, need: 2 });
    }
    let weights = params.bone_weights(q.bones())?;
    let mut intervals = Vec::new();
    let mut boundaries = Vec::new();
    let mut distances = Vec::with_capacity(frames - 1);
    let mut start = 0;
    for f in 1..frames {
        let d = frame_distance(q, f, &weights)?;
        distances.push(d);
        if d > params.threshold {
            if f - 1 > start {
                intervals.push(Interval { start, end: f - 1, kind: IntervalKind::Normal, distance: 0.0 });
            }
            intervals.push(Interval { start: f - 1, end: f, kind: IntervalKind::Edge, distance: d });
            boundaries.push(f);
            start = f;
        }
    }
    if frames - 1 > start {
        intervals.push(Interval { start, end: frames - 1, kind: IntervalKind::Normal, distance: 0.0 });
    }
    Ok(Segmentation { intervals, boundaries, distances })
}

/// `n` evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| if i == n - 1 { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

/// Sample count of an interval on the output grid.
pub fn interval_samples(interval: &Interval, params: &InterpolationParams) -> usize {
    match interval.kind {
        IntervalKind::Normal => {
            let frames = (interval.end - interval.start + 1) as f64;
            // the epsilon keeps exact ratios such as 10 / 0.2 from rounding up
            ((frames / params.delta - 1e-9).ceil() as usize).max(2)
        }
        IntervalKind::Edge => ((params.eta * interval.distance / params.delta).floor() as usize).max(2),
    }
}

/// Lagrange basis weights of `nodes` at `x`; exactly one-hot on a node.
fn lagrange_basis(nodes: &[f64], x: f64) -> Vec<f64> {
    (0..nodes.len())
        .map(|k| {
            nodes
                .iter()
                .enumerate()
                .filter(|&(m, _)| m != k)
                .map(|(_, &xm)| (x - xm) / (nodes[k] - xm))
                .product()
        })
        .collect()
}

/// Scalar Lagrange interpolation through `(xs[i], ys[i])`.
pub fn lagrange_eval(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    lagrange_basis(xs, x).iter().zip(ys).map(|(l, y)| l * y).sum()
}

/// Flattened frame: `4 * bones` quaternion components, then the root position.
fn channels_of(q: &OrientationSequence, f: usize) -> Vec<f64> {
    let mut row: Vec<f64> = q.quats[f].iter().flat_map(|p| p.as_array()).collect();
    row.extend_from_slice(&q.root_positions[f]);
    row
}

#[derive(Debug, Clone, PartialEq)]
struct Piece {
    xs: Vec<f64>,
    /// `ys[node][channel]`
    ys: Vec<Vec<f64>>,
}

/// Continuous piecewise polynomial through the keyframes of every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseInterpolant {
    pieces: Vec<Piece>,
    channels: usize,
}

impl PiecewiseInterpolant {
    /// One set of pieces per interval; intervals longer than `max_nodes`
    /// frames are chunked with a shared node between chunks.
    pub fn build(q: &OrientationSequence, intervals: &[Interval], max_nodes: usize) -> Result<Self, DsiError> {
        let rows: Vec<Vec<f64>> = (0..q.frames()).map(|f| channels_of(q, f)).collect();
        let channels = rows.first().map(Vec::len).unwrap_or(0);
        let mut pieces = Vec::new();
        for iv in intervals {
            if iv.end <= iv.start || iv.end >= q.frames() {
                return Err(DsiError::ShortInterval { start: iv.start, end: iv.end });
            }
            let mut s = iv.start;
            while s < iv.end {
                let e = (s + max_nodes - 1).min(iv.end);
                pieces.push(Piece { xs: (s..=e).map(|f| f as f64).collect(), ys: rows[s..=e].to_vec() });
                s = e;
            }
        }
        Ok(Self { pieces, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.pieces[0].xs[0], *self.pieces.last().expect("non-empty").xs.last().expect("nodes"))
    }

    /// All channels at `x`, clamped to the domain.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let idx = self.pieces.partition_point(|p| *p.xs.last().expect("nodes") < x).min(self.pieces.len() - 1);
        let p = &self.pieces[idx];
        let x = x.clamp(p.xs[0], *p.xs.last().expect("nodes"));
        let basis = lagrange_basis(&p.xs, x);
        (0..self.channels).map(|c| basis.iter().zip(&p.ys).map(|(l, y)| l * y[c]).sum()).collect()
    }
}

/// Turns flattened rows back into a sequence. Quaternions are normalized;
/// any with norm below 0.5 or non-finite is replaced by a slerp of the
/// nearest usable frames of the same bone.
fn from_channels(rows: &[Vec<f64>], xs: &[f64], bones: usize) -> Result<OrientationSequence, DsiError> {
    let frames = rows.len();
    let mut quats = vec![vec![Quaternion::IDENTITY; bones]; frames];
    for b in 0..bones {
        let raw: Vec<Quaternion> = rows
            .iter()
            .map(|r| Quaternion::new(r[4 * b], r[4 * b + 1], r[4 * b + 2], r[4 * b + 3]))
            .collect();
        let ok: Vec<bool> = raw.iter().map(|q| q.is_finite() && q.norm() >= 0.5).collect();
        if !ok.iter().any(|&v| v) {
            return Err(DsiError::Degenerate { bone: b });
        }
        for f in 0..frames {
            quats[f][b] = if ok[f] {
                raw[f].normalized()
            } else {
                let prev = (0..f).rev().find(|&i| ok[i]);
                let next = (f + 1..frames).find(|&i| ok[i]);
                match (prev, next) {
                    (Some(p), Some(n)) => {
                        let t = (xs[f] - xs[p]) / (xs[n] - xs[p]);
                        raw[p].normalized().slerp(&raw[n].normalized(), t)
                    }
                    (Some(i), None) | (None, Some(i)) => raw[i].normalized(),
                    (None, None) => unreachable!("some frame is usable"),
                }
            };
        }
    }
    let root_positions = rows
        .iter()
        .map(|r| {
            let k = 4 * bones;
            [r[k], r[k + 1], r[k + 2]]
        })
        .collect();
    Ok(OrientationSequence { root_positions, quats })
}

/// Interpolates the frames of one interval at `grid`.
pub fn lagrange_segment(
    q: &OrientationSequence,
    start: usize,
    end: usize,
    grid: &[f64],
    max_nodes: usize,
) -> Result<OrientationSequence, DsiError> {
    let iv = Interval { start, end, kind: IntervalKind::Normal, distance: 0.0 };
    let interp = PiecewiseInterpolant::build(q, &[iv], max_nodes.max(2))?;
    let rows: Vec<Vec<f64>> = grid.iter().map(|&x| interp.eval(x)).collect();
    from_channels(&rows, grid, q.bones())
}

/// Pre-smoothing stage of the pipeline.
#[derive(Debug, Clone)]
pub struct Interpolated {
    /// Input after the sign-continuity pass.
    pub aligned: OrientationSequence,
    pub segmentation: Segmentation,
    pub interpolant: PiecewiseInterpolant,
    /// Strictly increasing output abscissae.
    pub grid: Vec<f64>,
    /// Grid index range owned by each interval.
    pub ranges: Vec<Range<usize>>,
    /// Linspace size of each interval before shared endpoints are merged.
    pub samples_per_interval: Vec<usize>,
    /// Normalized interpolation on `grid`.
    pub sequence: OrientationSequence,
}

pub fn interpolate(q: &OrientationSequence, params: &InterpolationParams) -> Result<Interpolated, DsiError> {
    params.validate()?;
    if q.bones() == 0 {
        return Err(DsiError::Params("sequence has no bones".into()));
    }
    let aligned = sign_continuity(q);
    let segmentation = segment(&aligned, params)?;
    let interpolant = PiecewiseInterpolant::build(&aligned, &segmentation.intervals, params.max_nodes)?;
    let mut grid: Vec<f64> = Vec::new();
    let mut ranges = Vec::new();
    let mut samples = Vec::new();
    for iv in &segmentation.intervals {
        let n = interval_samples(iv, params);
        samples.push(n);
        let pts = linspace(iv.start as f64, iv.end as f64, n);
        let begin = grid.len();
        let skip = usize::from(grid.last() == pts.first());
        grid.extend_from_slice(&pts[skip..]);
        ranges.push(begin..grid.len());
    }
    let rows: Vec<Vec<f64>> = grid.iter().map(|&x| interpolant.eval(x)).collect();
    let sequence = from_channels(&rows, &grid, q.bones())?;
    Ok(Interpolated { aligned, segmentation, interpolant, grid, ranges, samples_per_interval: samples, sequence })
}

/// Variant 0 is `seq` itself. Every other variant warps the duration of each
/// range by a factor in `[1 - warp, 1 + warp]`, resamples to the original
/// length, and composes a per-range, per-bone rotation whose angle is
/// half-normal with scale `sigma`. Variant `v` draws from stream `v` of the
/// seeded generator.
pub fn random_variants(
    seq: &OrientationSequence,
    ranges: &[Range<usize>],
    count: usize,
    sigma: f64,
    warp: f64,
    seed: u64,
) -> Vec<OrientationSequence> {
    let n = seq.frames();
    let bones = seq.bones();
    let mut out = vec![seq.clone()];
    for v in 1..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(v as u64);
        let factors: Vec<f64> = ranges.iter().map(|_| rng.gen_range(1.0 - warp..=1.0 + warp)).collect();
        let noise: Vec<Vec<Quaternion>> = ranges
            .iter()
            .map(|_| {
                (0..bones)
                    .map(|_| {
                        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
                        let angle = if sigma > 0.0 { Normal::new(0.0, sigma).expect("sigma > 0").sample(&mut rng).abs() } else { 0.0 };
                        Quaternion::from_axis_angle(axis, angle)
                    })
                    .collect()
            })
            .collect();

        // Source position of every warped knot: range k spans its original
        // index extent scaled by factors[k].
        let mut knots_src = vec![0.0];
        let mut knots_warp = vec![0.0];
        for (r, f) in ranges.iter().zip(&factors) {
            let src_end = (r.end.max(1) - 1) as f64;
            let len = src_end - knots_src.last().copied().unwrap_or(0.0);
            knots_src.push(src_end);
            knots_warp.push(knots_warp.last().copied().unwrap_or(0.0) + len * f);
        }
        let total = *knots_warp.last().unwrap_or(&0.0);
        let range_of = |i: usize| ranges.iter().position(|r| r.contains(&i)).unwrap_or(0);

        let mut variant = seq.clone();
        for j in 0..n {
            let u = if n > 1 { total * j as f64 / (n - 1) as f64 } else { 0.0 };
            let k = knots_warp.partition_point(|&w| w < u).clamp(1, knots_warp.len() - 1);
            let (w0, w1) = (knots_warp[k - 1], knots_warp[k]);
            let t = if w1 > w0 { (u - w0) / (w1 - w0) } else { 0.0 };
            let src = (knots_src[k - 1] + t * (knots_src[k] - knots_src[k - 1])).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let a = src - i0 as f64;
            let seg = range_of(i0);
            for b in 0..bones {
                let base = seq.quats[i0][b].slerp(&seq.quats[i1][b], a);
                variant.quats[j][b] = (noise[seg][b] * base).normalized();
            }
            let (p0, p1) = (seq.root_positions[i0], seq.root_positions[i1]);
            variant.root_positions[j] = [0, 1, 2].map(|c| p0[c] + a * (p1[c] - p0[c]));
        }
        out.push(variant);
    }
    out
}

/// Smooths every channel over `xs` and renormalizes.
fn smooth_sequence(seq: &OrientationSequence, xs: &[f64], config: &SmootherConfig) -> Result<OrientationSequence, DsiError> {
    if xs.len() < MIN_POINTS {
        log::warn!("{} samples are too few to smooth; passing through", xs.len());
        return Ok(seq.clone());
    }
    let rows: Vec<Vec<f64>> = (0..seq.frames()).map(|f| channels_of(seq, f)).collect();
    let channels = rows[0].len();
    let mut smoothed = vec![vec![0.0; channels]; rows.len()];
    for c in 0..channels {
        let column: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        for (row, v) in smoothed.iter_mut().zip(supersmooth_with(xs, &column, config)?) {
            row[c] = v;
        }
    }
    from_channels(&smoothed, xs, seq.bones())
}

/// Smoother settings for an output of `samples` points from `frames` inputs.
fn effective_smoother(params: &InterpolationParams, frames: usize, samples: usize) -> SmootherConfig {
    match params.span_basis {
        SpanBasis::OutputSamples => params.smoother,
        SpanBasis::InputFrames => {
            let ratio = (frames as f64 / samples.max(1) as f64).min(1.0);
            SmootherConfig { spans: params.smoother.spans.map(|s| s * ratio), ..params.smoother }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSet {
    /// All variants share the frame count of the output grid.
    pub variants: Vec<OrientationSequence>,
    /// Input-frame abscissa of every output frame of variant 0.
    pub abscissae: Vec<f64>,
    pub boundaries: Vec<usize>,
    /// Largest angular drift of a keyframe in variant 0 after smoothing.
    pub keyframe_error: f64,
    pub keyframes_preserved: bool,
    pub params: InterpolationParams,
}

impl VariantSet {
    pub fn frames(&self) -> usize {
        self.abscissae.len()
    }
}

/// Samples `seq` (defined on increasing `xs`) at `x` by slerp between the
/// bracketing samples.
pub fn sample_at(seq: &OrientationSequence, xs: &[f64], x: f64) -> Vec<Quaternion> {
    let k = xs.partition_point(|&g| g < x).clamp(1, xs.len() - 1);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let t = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
    seq.quats[k - 1].iter().zip(&seq.quats[k]).map(|(a, b)| a.slerp(b, t)).collect()
}

/// Full pipeline.
pub fn dsi(q: &OrientationSequence, params: &InterpolationParams) -> Result<VariantSet, DsiError> {
    let stage = interpolate(q, params)?;
    let raw = random_variants(&stage.sequence, &stage.ranges, params.variants, params.sigma, params.warp, params.seed);
    let smoother = effective_smoother(params, q.frames(), stage.grid.len());
    let variants = raw
        .iter()
        .map(|v| smooth_sequence(v, &stage.grid, &smoother))
        .collect::<Result<Vec<_>, _>>()?;

    let mut keyframe_error: f64 = 0.0;
    for f in 0..q.frames() {
        let at = sample_at(&variants[0], &stage.grid, f as f64);
        for (p, g) in at.iter().zip(&q.quats[f]) {
            keyframe_error = keyframe_error.max(angular_distance_unchecked(p, g, DistanceMode::DoubleCover));
        }
    }
    let keyframes_preserved = keyframe_error <= params.keyframe_tolerance;
    if !keyframes_preserved {
        log::warn!("keyframe drift {keyframe_error:.4} rad exceeds {:.4}", params.keyframe_tolerance);
    }
    Ok(VariantSet {
        variants,
        abscissae: stage.grid,
        boundaries: stage.segmentation.boundaries,
        keyframe_error,
        keyframes_preserved,
        params: params.clone(),
    })
}

/// Barycentric weights for nodes `0..n`, scaled so the largest is 1.
fn equispaced_barycentric(n: usize) -> Vec<f64> {
    // w_k = (-1)^k C(n-1, k), computed in log space
    let m = n - 1;
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=m).scan(0.0, |acc, i| {
            *acc += (i as f64).ln();
            Some(*acc)
        }))
        .collect();
    let ln_c: Vec<f64> = (0..=m).map(|k| ln_fact[m] - ln_fact[k] - ln_fact[m - k]).collect();
    let top = ln_c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ln_c.iter()
        .enumerate()
        .map(|(k, l)| if k % 2 == 0 { 1.0 } else { -1.0 } * (l - top).exp())
        .collect()
}

/// One global polynomial through every frame, evaluated at `grid`.
/// Equispaced high-degree fits oscillate strongly towards the ends.
pub fn baseline_pi(q: &OrientationSequence, grid: &[f64]) -> Result<OrientationSequence, DsiError> {
    let frames = q.frames();
    if frames < 2 {
        return Err(DsiError::TooShort { got: frames, need: 2 });
    }
    let aligned = sign_continuity(q);
    let rows: Vec<Vec<f64>> = (0..frames).map(|f| channels_of(&aligned, f)).collect();
    let w = equispaced_barycentric(frames);
    let channels = rows[0].len();
    let out: Vec<Vec<f64>> = grid
        .iter()
        .map(|&x| {
            let xc = x.clamp(0.0, (frames - 1) as f64);
            if xc.fract() == 0.0 {
                return rows[xc as usize].clone();
            }
            let terms: Vec<f64> = (0..frames).map(|k| w[k] / (xc - k as f64)).collect();
            let den: f64 = terms.iter().sum();
            (0..channels).map(|c| terms.iter().zip(&rows).map(|(t, r)| t * r[c]).sum::<f64>() / den).collect()
        })
        .collect();
    from_channels(&out, grid, q.bones())
}

/// Least-squares polynomial of `degree` through `(xs, ys)`, coefficients in
/// the variable `(x - center) / half`.
fn lsq_poly(xs: &[f64], ys: &[f64], degree: usize, center: f64, half: f64) -> Vec<f64> {
    let d = degree.min(xs.len() - 1) + 1;
    let mut ata = vec![vec![0.0; d]; d];
    let mut aty = vec![0.0; d];
    for (&x, &y) in xs.iter().zip(ys) {
        let t = (x - center) / half;
        let pw: Vec<f64> = (0..d).map(|i| (0..i).fold(1.0, |acc, _| acc * t)).collect();
        for i in 0..d {
            aty[i] += pw[i] * y;
            for j in 0..d {
                ata[i][j] += pw[i] * pw[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting on the normal equations.
    for col in 0..d {
        let piv = (col..d).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).expect("rows");
        ata.swap(col, piv);
        aty.swap(col, piv);
        for r in col + 1..d {
            let f = ata[r][col] / ata[col][col];
            for c in col..d {
                ata[r][c] -= f * ata[col][c];
            }
            aty[r] -= f * aty[col];
        }
    }
    let mut coef = vec![0.0; d];
    for r in (0..d).rev() {
        let s: f64 = (r + 1..d).map(|c| ata[r][c] * coef[c]).sum();
        coef[r] = (aty[r] - s) / ata[r][r];
    }
    coef
}

/// Fixed windows of `pwpi_window` frames sharing one frame with their
/// neighbor, each fitted by a least-squares polynomial of `pwpi_degree` and
/// evaluated at `grid`.
pub fn baseline_pwpi(q: &OrientationSequence, grid: &[f64], params: &InterpolationParams) -> Result<OrientationSequence, DsiError> {
    params.validate()?;
    let frames = q.frames();
    if frames < 2 {
        return Err(DsiError::TooShort { got: frames, need: 2 });
    }
    let aligned = sign_continuity(q);
    let rows: Vec<Vec<f64>> = (0..frames).map(|f| channels_of(&aligned, f)).collect();
    let channels = rows[0].len();
    let mut windows = Vec::new();
    let mut s = 0;
    while s < frames - 1 {
        let e = (s + params.pwpi_window - 1).min(frames - 1);
        windows.push((s, e));
        s = e;
    }
    let fits: Vec<(f64, f64, Vec<Vec<f64>>)> = windows
        .iter()
        .map(|&(s, e)| {
            let xs: Vec<f64> = (s..=e).map(|f| f as f64).collect();
            let center = 0.5 * (s + e) as f64;
            let half = (0.5 * (e - s) as f64).max(0.5);
            let coefs = (0..channels)
                .map(|c| {
                    let ys: Vec<f64> = rows[s..=e].iter().map(|r| r[c]).collect();
                    lsq_poly(&xs, &ys, params.pwpi_degree, center, half)
                })
                .collect();
            (center, half, coefs)
        })
        .collect();
    let out: Vec<Vec<f64>> = grid
        .iter()
        .map(|&x| {
            let w = windows.partition_point(|&(_, e)| (e as f64) < x).min(windows.len() - 1);
            let (center, half, coefs) = &fits[w];
            let t = (x - center) / half;
            coefs.iter().map(|c| c.iter().rev().fold(0.0, |acc, a| acc * t + a)).collect()
        })
        .collect();
    from_channels(&out, grid, q.bones())
}

/// Per-frame weighted mean over bones of the angle to the identity rotation;
/// `None` weighs bones uniformly.
pub fn aad_curve(seq: &OrientationSequence, weights: Option<&[f64]>) -> Result<Vec<f64>, DsiError> {
    let bones = seq.bones();
    let uniform;
    let w = match weights {
        Some(w) if w.len() != bones => return Err(DsiError::WeightCount { got: w.len(), bones }),
        Some(w) => w,
        None => {
            uniform = vec![1.0; bones];
            &uniform
        }
    };
    let total: f64 = w.iter().sum();
    Ok(seq
        .quats
        .iter()
        .map(|frame| {
            let s: f64 = frame
                .iter()
                .zip(w)
                .map(|(q, wb)| wb * angular_distance_unchecked(q, &Quaternion::IDENTITY, DistanceMode::DoubleCover))
                .sum();
            if total > 0.0 { s / total } else { 0.0 }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakPreservation {
    pub peaks: usize,
    /// Mean over peaks of `method peak / original peak`.
    pub mean: f64,
    pub min: f64,
}

/// Compares each interior local maximum of the keyframe curve `original`
/// (frame `f` at abscissa `f`) with the largest value of `curve` within
/// `radius` of that abscissa.
pub fn peak_preservation(original: &[f64], xs: &[f64], curve: &[f64], radius: f64) -> PeakPreservation {
    let mut ratios = Vec::new();
    for f in 1..original.len().saturating_sub(1) {
        let v = original[f];
        if !(v > original[f - 1] && v >= original[f + 1] && v > 0.0) {
            continue;
        }
        let near = xs
            .iter()
            .zip(curve)
            .filter(|(x, _)| (**x - f as f64).abs() <= radius)
            .map(|(_, c)| *c)
            .fold(f64::NEG_INFINITY, f64::max);
        ratios.push(near / v);
    }
    if ratios.is_empty() {
        return PeakPreservation { peaks: 0, mean: 1.0, min: 1.0 };
    }
    PeakPreservation {
        peaks: ratios.len(),
        mean: ratios.iter().sum::<f64>() / ratios.len() as f64,
        min: ratios.iter().cloned().fold(f64::INFINITY, f64::min),
    }
}

/// DSI and both baselines on one shared output grid.
#[derive(Debug, Clone)]
pub struct Comparison {
    /// Output grid of DSI, reused for every method.
    pub abscissae: Vec<f64>,
    /// Input slerped onto the grid.
    pub original: OrientationSequence,
    pub pi: OrientationSequence,
    pub pwpi: OrientationSequence,
    /// Variant 0 of the DSI output.
    pub dsi: OrientationSequence,
    pub dsi_boundaries: Vec<usize>,
    /// The global fit never cuts the sequence.
    pub pi_boundaries: Vec<usize>,
    pub peaks: MethodPeaks,
    pub keyframe_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodPeaks {
    pub pi: PeakPreservation,
    pub pwpi: PeakPreservation,
    pub dsi: PeakPreservation,
}

/// Runs every interpolator on `q` and scores how well each keeps the local
/// maxima of the per-frame AAD curve (peaks searched within half a frame).
pub fn compare_interpolators(q: &OrientationSequence, params: &InterpolationParams) -> Result<Comparison, DsiError> {
    let out = dsi(q, &InterpolationParams { variants: 1, ..params.clone() })?;
    let grid = out.abscissae.clone();
    let aligned = sign_continuity(q);
    let mut original = out.variants[0].clone();
    for (k, &x) in grid.iter().enumerate() {
        let f = (x.floor() as usize).min(q.frames() - 2);
        let t = x - f as f64;
        original.quats[k] = aligned.quats[f].iter().zip(&aligned.quats[f + 1]).map(|(a, b)| a.slerp(b, t)).collect();
        let (p0, p1) = (q.root_positions[f], q.root_positions[f + 1]);
        original.root_positions[k] = [0, 1, 2].map(|c| p0[c] + t * (p1[c] - p0[c]));
    }
    let pi = baseline_pi(q, &grid)?;
    let pwpi = baseline_pwpi(q, &grid, params)?;
    let dsi_seq = out.variants.into_iter().next().expect("one variant");
    let weights = params.weights.as_deref();
    let keys = aad_curve(q, weights)?;
    let score = |s: &OrientationSequence| -> Result<PeakPreservation, DsiError> {
        Ok(peak_preservation(&keys, &grid, &aad_curve(s, weights)?, 0.5))
    };
    let peaks = MethodPeaks { pi: score(&pi)?, pwpi: score(&pwpi)?, dsi: score(&dsi_seq)? };
    Ok(Comparison {
        abscissae: grid,
        original,
        pi,
        pwpi,
        dsi: dsi_seq,
        dsi_boundaries: out.boundaries,
        pi_boundaries: Vec::new(),
        peaks,
        keyframe_error: out.keyframe_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn seq_from_angles(angles: &[Vec<f64>]) -> OrientationSequence {
        let quats = angles
            .iter()
            .map(|row| row.iter().map(|&a| Quaternion::from_axis_angle([0.0, 0.0, 1.0], a)).collect())
            .collect();
        OrientationSequence::new(vec![[0.0, 0.0, 3.0]; angles.len()], quats).unwrap()
    }

    fn smooth_motion(frames: usize, bones: usize, seed: u64) -> OrientationSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<f64> = (0..bones).map(|_| rng.gen_range(0.0..6.0)).collect();
        let quats = (0..frames)
            .map(|f| {
                (0..bones)
                    .map(|b| Quaternion::from_axis_angle([1.0, 0.0, 0.0], 0.3 * (0.1 * f as f64 + phases[b]).sin()))
                    .collect()
            })
            .collect();
        let root = (0..frames).map(|f| [0.01 * f as f64, 0.0, 4.0]).collect();
        OrientationSequence::new(root, quats).unwrap()
    }

    #[test]
    fn frame_distance_examples() {
        let q = seq_from_angles(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, std::f64::consts::FRAC_PI_2]]);
        assert_eq!(frame_distance(&q, 1, &[0.5, 0.5]).unwrap(), 0.0);
        assert!((frame_distance(&q, 2, &[0.5, 0.5]).unwrap() - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        let single = seq_from_angles(&[vec![0.0], vec![std::f64::consts::FRAC_PI_2]]);
        assert!((frame_distance(&single, 1, &[1.0]).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(matches!(frame_distance(&q, 0, &[0.5, 0.5]), Err(DsiError::FrameOutOfRange { .. })));
        assert!(matches!(frame_distance(&q, 3, &[0.5, 0.5]), Err(DsiError::FrameOutOfRange { .. })));
    }

    #[test]
    fn segment_examples() {
        let p = InterpolationParams::default();
        let constant = seq_from_angles(&vec![vec![0.2]; 8]);
        let s = segment(&constant, &p).unwrap();
        assert_eq!(s.intervals, vec![Interval { start: 0, end: 7, kind: IntervalKind::Normal, distance: 0.0 }]);
        assert!(s.boundaries.is_empty());

        let mut angles = vec![vec![0.0]; 10];
        for a in angles.iter_mut().skip(4) {
            a[0] = 1.0;
        }
        let s = segment(&seq_from_angles(&angles), &p).unwrap();
        assert_eq!(s.boundaries, vec![4]);
        let spans: Vec<(usize, usize, IntervalKind)> = s.intervals.iter().map(|i| (i.start, i.end, i.kind)).collect();
        assert_eq!(spans, vec![(0, 3, IntervalKind::Normal), (3, 4, IntervalKind::Edge), (4, 9, IntervalKind::Normal)]);

        let stairs: Vec<Vec<f64>> = (0..6).map(|f| vec![f as f64]).collect();
        let s = segment(&seq_from_angles(&stairs), &p).unwrap();
        assert!(s.intervals.iter().all(|i| i.kind == IntervalKind::Edge && i.end == i.start + 1));
        assert_eq!(s.intervals.len(), 5);
    }

    #[test]
    fn lagrange_scalar_quadratic() {
        assert!((lagrange_eval(&[0.0, 1.0, 2.0], &[0.0, 1.0, 4.0], 1.5) - 2.25).abs() < 1e-15);
    }

    #[test]
    fn lagrange_segment_constant_and_nodes() {
        let q = seq_from_angles(&vec![vec![0.4, -0.1]; 5]);
        let grid = linspace(0.0, 4.0, 17);
        let out = lagrange_segment(&q, 0, 4, &grid, 6).unwrap();
        for frame in &out.quats {
            for (a, b) in frame.iter().zip(&q.quats[0]) {
                assert!((a.as_array().iter().zip(b.as_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)) < 1e-12);
            }
        }
        let m = smooth_motion(15, 3, 2);
        let interp = PiecewiseInterpolant::build(&m, &[Interval { start: 0, end: 14, kind: IntervalKind::Normal, distance: 0.0 }], 6).unwrap();
        for f in 0..15 {
            let v = interp.eval(f as f64);
            assert_eq!(v, channels_of(&m, f));
        }
        assert!(lagrange_segment(&m, 3, 3, &grid, 6).is_err());
    }

    #[test]
    fn constant_sequence_pipeline() {
        let q = seq_from_angles(&vec![vec![0.7, 0.1, -0.3]; 10]);
        let out = dsi(&q, &InterpolationParams::default()).unwrap();
        assert_eq!(out.frames(), 50);
        assert!(out.boundaries.is_empty());
        for frame in &out.variants[0].quats {
            for (a, b) in frame.iter().zip(&q.quats[0]) {
                assert!(angular_distance_unchecked(a, b, DistanceMode::DoubleCover) < 1e-9);
            }
        }
        assert!(out.keyframes_preserved);
    }

    #[test]
    fn edge_sample_count_matches_formula() {
        let mut angles = vec![vec![0.0]; 12];
        for a in angles.iter_mut().skip(6) {
            a[0] = 0.9;
        }
        let p = InterpolationParams::default();
        let stage = interpolate(&seq_from_angles(&angles), &p).unwrap();
        let (k, edge) = stage.segmentation.intervals.iter().enumerate().find(|(_, i)| i.kind == IntervalKind::Edge).unwrap();
        let expect = (p.eta * edge.distance / p.delta) as usize;
        assert!((edge.distance - 0.9).abs() < 1e-12);
        assert_eq!(expect, 112);
        assert_eq!(stage.samples_per_interval[k], expect);
        // the shared start point belongs to the preceding interval
        assert_eq!(stage.ranges[k].len(), expect - 1);
        assert!(stage.grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn variants_passthrough_and_determinism() {
        let m = smooth_motion(20, 2, 5);
        let stage = interpolate(&m, &InterpolationParams::default()).unwrap();
        let one = random_variants(&stage.sequence, &stage.ranges, 1, 0.03, 0.1, 1);
        assert_eq!(one, vec![stage.sequence.clone()]);
        let a = random_variants(&stage.sequence, &stage.ranges, 4, 0.03, 0.1, 1);
        let b = random_variants(&stage.sequence, &stage.ranges, 4, 0.03, 0.1, 1);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.frames() == stage.sequence.frames()));
        assert_ne!(a[1], a[2]);
        // zero noise and zero warp reproduce the input
        let flat = random_variants(&stage.sequence, &stage.ranges, 3, 0.0, 0.0, 1);
        for v in &flat[1..] {
            for (fa, fb) in v.quats.iter().zip(&stage.sequence.quats) {
                for (x, y) in fa.iter().zip(fb) {
                    assert!(angular_distance_unchecked(x, y, DistanceMode::DoubleCover) < 1e-7);
                }
            }
        }
    }

    #[test]
    fn sign_flips_do_not_create_jumps() {
        let mut m = smooth_motion(12, 2, 3);
        for f in (0..12).step_by(2) {
            m.quats[f][1] = -m.quats[f][1];
        }
        let s = segment(&sign_continuity(&m), &InterpolationParams::default()).unwrap();
        assert!(s.boundaries.is_empty());
    }

    #[test]
    fn baselines_on_constant_input() {
        let q = seq_from_angles(&vec![vec![0.3, 1.1]; 9]);
        let grid = linspace(0.0, 8.0, 45);
        for out in [baseline_pi(&q, &grid).unwrap(), baseline_pwpi(&q, &grid, &InterpolationParams::default()).unwrap()] {
            assert_eq!(out.frames(), 45);
            for frame in &out.quats {
                for (a, b) in frame.iter().zip(&q.quats[0]) {
                    assert!(angular_distance_unchecked(a, b, DistanceMode::DoubleCover) < 1e-7);
                }
            }
        }
    }

    #[test]
    fn pi_hits_its_nodes() {
        let m = smooth_motion(9, 2, 8);
        let grid: Vec<f64> = (0..9).map(|f| f as f64).collect();
        let out = baseline_pi(&m, &grid).unwrap();
        for f in 0..9 {
            for (a, b) in out.quats[f].iter().zip(&m.quats[f]) {
                assert!(angular_distance_unchecked(a, b, DistanceMode::DoubleCover) < 1e-9);
            }
        }
    }

    #[test]
    fn peak_preservation_counts_interior_maxima() {
        let orig = [0.0, 1.0, 0.0, 2.0, 0.0];
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let p = peak_preservation(&orig, &xs, &[0.0, 0.5, 0.0, 2.0, 0.0], 0.5);
        assert_eq!(p.peaks, 2);
        assert!((p.mean - 0.75).abs() < 1e-15);
        assert!((p.min - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn intervals_tile_the_sequence(steps in prop::collection::vec(0.0f64..0.8, 1..40)) {
            let mut acc = 0.0;
            let mut angles = vec![vec![0.0]];
            for s in &steps {
                acc += s;
                angles.push(vec![acc]);
            }
            let q = seq_from_angles(&angles);
            let s = segment(&q, &InterpolationParams::default()).unwrap();
            prop_assert_eq!(s.intervals[0].start, 0);
            prop_assert_eq!(s.intervals.last().unwrap().end, angles.len() - 1);
            for w in s.intervals.windows(2) {
                prop_assert_eq!(w[1].start, w[0].end);
            }
            for iv in &s.intervals {
                prop_assert!(iv.end > iv.start);
            }
        }

        #[test]
        fn pipeline_outputs_unit_quaternions(seed in 0u64..1000, frames in 2usize..30) {
            let m = smooth_motion(frames, 3, seed);
            let p = InterpolationParams { variants: 2, seed, ..Default::default() };
            let out = dsi(&m, &p).unwrap();
            prop_assert!(out.abscissae.windows(2).all(|w| w[1] > w[0]));
            for v in &out.variants {
                prop_assert_eq!(v.frames(), out.frames());
                for q in v.quats.iter().flatten() {
                    prop_assert!((q.norm() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
