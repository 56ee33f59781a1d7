//! Quaternion algebra and the angular-distance family of metrics.
//!
//! Quaternions are stored as `(w, x, y, z)` with `w` the real part. All
//! distance metrics treat `q` and `-q` as the same rotation unless the caller
//! explicitly opts into the sign-sensitive variant through [`DistanceMode`].

use std::ops::{Mul, Neg};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::OrientationSequence;

/// Norm deviation accepted by the metric functions before they reject input.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum QuatError {
    #[error("quaternion is not unit-norm (|q| = {norm})")]
    NotUnit { norm: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty subset")]
    EmptySubset,
    #[error("unknown bone id {0}")]
    UnknownBone(usize),
    #[error("non-positive depth {depth} at frame {frame}")]
    NonPositiveDepth { frame: usize, depth: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis`. The axis need not be unit
    /// length; a zero axis yields the identity.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = norm3(axis);
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / n;
        Self::new(c, axis[0] * k, axis[1] * k, axis[2] * k)
    }

    /// Shortest-arc rotation taking unit vector `from` onto unit vector `to`.
    pub fn from_to(from: [f64; 3], to: [f64; 3]) -> Self {
        let from = normalize3(from);
        let to = normalize3(to);
        let d = dot3(from, to);
        if d < -1.0 + 1e-12 {
            // antiparallel: any perpendicular axis works
            let helper = if from[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let axis = cross3(from, helper);
            return Self::from_axis_angle(axis, std::f64::consts::PI);
        }
        let c = cross3(from, to);
        Self::new(1.0 + d, c[0], c[1], c[2]).normalized()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Real part.
    pub fn re(&self) -> f64 {
        self.w
    }

    pub fn conj(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Returns the unit quaternion in the same direction. A zero quaternion
    /// maps to the identity.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        if n == 1.0 {
            return *self;
        }
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }

    /// Rotates a 3-vector by this (unit) quaternion.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let u = [self.x, self.y, self.z];
        let t = cross3(u, v);
        let t = [2.0 * t[0], 2.0 * t[1], 2.0 * t[2]];
        let ut = cross3(u, t);
        [
            v[0] + self.w * t[0] + ut[0],
            v[1] + self.w * t[1] + ut[1],
            v[2] + self.w * t[2] + ut[2],
        ]
    }

    /// Spherical linear interpolation along the shorter arc.
    pub fn slerp(&self, other: &Self, t: f64) -> Self {
        let mut b = *other;
        let mut d = self.dot(&b);
        if d < 0.0 {
            b = -b;
            d = -d;
        }
        if d > 1.0 - 1e-12 {
            return self.scale(1.0 - t).add(&b.scale(t)).normalized();
        }
        let theta = d.min(1.0).acos();
        let s = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / s;
        let wb = (t * theta).sin() / s;
        self.scale(wa).add(&b.scale(wb)).normalized()
    }

    pub fn check_unit(&self, tol: f64) -> Result<(), QuatError> {
        let n = self.norm();
        if (n - 1.0).abs() > tol || !n.is_finite() {
            return Err(QuatError::NotUnit { norm: n });
        }
        Ok(())
    }

    /// Rotation matrix, row-major.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = *self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product.
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

pub fn multiply(a: Quaternion, b: Quaternion) -> Quaternion {
    a * b
}

/// How the real part of the relative quaternion enters `2 arccos(.)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// `|Re|`, range `[0, pi]`, `q` and `-q` are at distance zero.
    #[default]
    DoubleCover,
    /// Raw `Re`, range `[0, 2 pi]`. Only useful for ablations.
    SignSensitive,
}

/// `2 arccos(Re(a * conj(b)))` on already-validated inputs.
#[inline]
pub fn angular_distance_unchecked(a: &Quaternion, b: &Quaternion, mode: DistanceMode) -> f64 {
    // 2 arccos(Re r) written as 2 atan2(|Im r|, Re r): identical on unit
    // inputs, but keeps full precision when a and b nearly coincide.
    let r = *a * b.conj();
    let im = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
    let re = match mode {
        DistanceMode::DoubleCover => r.w.abs(),
        DistanceMode::SignSensitive => r.w,
    };
    2.0 * im.atan2(re)
}

pub fn angular_distance(a: &Quaternion, b: &Quaternion) -> Result<f64, QuatError> {
    a.check_unit(UNIT_TOLERANCE)?;
    b.check_unit(UNIT_TOLERANCE)?;
    Ok(angular_distance_unchecked(a, b, DistanceMode::DoubleCover))
}

/// Distance from `q` to the identity orientation.
pub fn absolute_angular_distance(q: &Quaternion) -> Result<f64, QuatError> {
    angular_distance(q, &Quaternion::IDENTITY)
}

fn check_shapes(pred: &OrientationSequence, gt: &OrientationSequence) -> Result<(), QuatError> {
    if pred.frames() != gt.frames() || pred.bones() != gt.bones() {
        return Err(QuatError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            pred.frames(),
            pred.bones(),
            gt.frames(),
            gt.bones()
        )));
    }
    Ok(())
}

/// Mean angular distance over every (frame, bone) pair.
pub fn aad_loss(pred: &OrientationSequence, gt: &OrientationSequence) -> Result<f64, QuatError> {
    aad_loss_with_mode(pred, gt, DistanceMode::DoubleCover)
}

pub fn aad_loss_with_mode(
    pred: &OrientationSequence,
    gt: &OrientationSequence,
    mode: DistanceMode,
) -> Result<f64, QuatError> {
    check_shapes(pred, gt)?;
    let bones: Vec<usize> = (0..gt.bones()).collect();
    subset_mean(pred, gt, &bones, mode)
}

fn subset_mean(
    pred: &OrientationSequence,
    gt: &OrientationSequence,
    bones: &[usize],
    mode: DistanceMode,
) -> Result<f64, QuatError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.quats.iter().zip(&gt.quats) {
        for &b in bones {
            p[b].check_unit(UNIT_TOLERANCE)?;
            g[b].check_unit(UNIT_TOLERANCE)?;
            sum += angular_distance_unchecked(&p[b], &g[b], mode);
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Mean average angular distance restricted to `subset` bones.
#[allow(non_snake_case)]
pub fn mAAD(pred: &OrientationSequence, gt: &OrientationSequence, subset: &[usize]) -> Result<f64, QuatError> {
    check_shapes(pred, gt)?;
    if subset.is_empty() {
        return Err(QuatError::EmptySubset);
    }
    if let Some(&b) = subset.iter().find(|&&b| b >= gt.bones()) {
        return Err(QuatError::UnknownBone(b));
    }
    subset_mean(pred, gt, subset, DistanceMode::DoubleCover)
}

/// Per-frame weight applied to the root position error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryWeighting {
    /// `1 / depth_t` with `depth_t` the ground-truth root depth.
    #[default]
    InverseDepth,
    Uniform,
}

impl TrajectoryWeighting {
    pub fn weight(&self, depth: f64) -> f64 {
        match self {
            TrajectoryWeighting::InverseDepth => 1.0 / depth,
            TrajectoryWeighting::Uniform => 1.0,
        }
    }
}

/// Weighted mean root position error.
pub fn wmpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]], depths: &[f64]) -> Result<f64, QuatError> {
    wmpjpe_weighted(pred, gt, depths, TrajectoryWeighting::InverseDepth)
}

pub fn wmpjpe_weighted(
    pred: &[[f64; 3]],
    gt: &[[f64; 3]],
    depths: &[f64],
    weighting: TrajectoryWeighting,
) -> Result<f64, QuatError> {
    if pred.len() != gt.len() {
        return Err(QuatError::LengthMismatch(pred.len(), gt.len()));
    }
    if depths.len() != gt.len() {
        return Err(QuatError::LengthMismatch(depths.len(), gt.len()));
    }
    for (frame, &depth) in depths.iter().enumerate() {
        if depth <= 0.0 || depth.is_nan() {
            return Err(QuatError::NonPositiveDepth { frame, depth });
        }
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .zip(depths)
        .map(|((p, g), &d)| weighting.weight(d) * norm3(sub3(*p, *g)))
        .sum();
    Ok(total / gt.len() as f64)
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_8, PI};

    fn close(a: Quaternion, b: Quaternion, tol: f64) -> bool {
        (a.w - b.w).abs() < tol && (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol && (a.z - b.z).abs() < tol
    }

    fn seq(quats: Vec<Vec<Quaternion>>) -> OrientationSequence {
        let frames = quats.len();
        OrientationSequence::new(vec![[0.0; 3]; frames], quats).unwrap()
    }

    #[test]
    fn multiply_examples() {
        let q = Quaternion::new(0.5, 0.5, -0.5, 0.5);
        assert_eq!(Quaternion::IDENTITY * q, q);
        let rz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
        assert!(close(rz * rz, Quaternion::new(0.0, 0.0, 0.0, 1.0), 1e-15));
        assert!(close(q * q.conj(), Quaternion::IDENTITY, 1e-15));
    }

    #[test]
    fn angular_distance_examples() {
        let id = Quaternion::IDENTITY;
        assert_eq!(angular_distance(&id, &id).unwrap(), 0.0);
        let rx = Quaternion::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0);
        assert!((angular_distance(&id, &rx).unwrap() - FRAC_PI_2).abs() < 1e-12);
        let q = Quaternion::new(0.5, 0.5, -0.5, 0.5);
        assert_eq!(angular_distance(&q, &-q).unwrap(), 0.0);
        assert!(angular_distance(&Quaternion::new(2.0, 0.0, 0.0, 0.0), &id).is_err());
    }

    #[test]
    fn sign_sensitive_mode_reaches_two_pi() {
        let q = Quaternion::IDENTITY;
        let d = angular_distance_unchecked(&q, &-q, DistanceMode::SignSensitive);
        assert!((d - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn absolute_distance_examples() {
        assert_eq!(absolute_angular_distance(&Quaternion::IDENTITY).unwrap(), 0.0);
        let r = Quaternion::from_axis_angle([1.0, 2.0, -1.0], FRAC_PI_2);
        assert!((absolute_angular_distance(&r).unwrap() - FRAC_PI_2).abs() < 1e-12);
        let ry = Quaternion::new(0.0, 0.0, 1.0, 0.0);
        assert!((absolute_angular_distance(&ry).unwrap() - PI).abs() < 1e-12);
    }

    #[test]
    fn aad_loss_examples() {
        let id = Quaternion::IDENTITY;
        let rx = Quaternion::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0);
        let a = seq(vec![vec![id]]);
        let b = seq(vec![vec![rx]]);
        assert_eq!(aad_loss(&a, &a).unwrap(), 0.0);
        assert!((aad_loss(&a, &b).unwrap() - FRAC_PI_2).abs() < 1e-12);

        let p = seq(vec![vec![id, id], vec![id, id]]);
        let g = seq(vec![vec![id, id], vec![id, rx]]);
        assert!((aad_loss(&p, &g).unwrap() - FRAC_PI_8).abs() < 1e-12);

        let short = seq(vec![vec![id, id]]);
        assert!(matches!(aad_loss(&short, &g), Err(QuatError::ShapeMismatch(_))));
    }

    #[test]
    fn maad_subsets() {
        let id = Quaternion::IDENTITY;
        let rx = Quaternion::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0);
        let p = seq(vec![vec![id, id], vec![id, id]]);
        let g = seq(vec![vec![id, id], vec![id, rx]]);
        assert_eq!(mAAD(&p, &g, &[0, 1]).unwrap(), aad_loss(&p, &g).unwrap());
        assert!((mAAD(&p, &g, &[1]).unwrap() - PI / 4.0).abs() < 1e-12);
        assert_eq!(mAAD(&p, &g, &[]), Err(QuatError::EmptySubset));
        assert_eq!(mAAD(&p, &g, &[2]), Err(QuatError::UnknownBone(2)));
    }

    #[test]
    fn wmpjpe_examples() {
        let gt = [[0.0, 0.0, 5.0]];
        assert_eq!(wmpjpe(&gt, &gt, &[5.0]).unwrap(), 0.0);
        assert!((wmpjpe(&[[3.0, 4.0, 5.0]], &gt, &[5.0]).unwrap() - 1.0).abs() < 1e-15);
        let pred = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let gt = [[0.0; 3], [0.0; 3]];
        assert!((wmpjpe(&pred, &gt, &[1.0, 2.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(wmpjpe(&pred, &gt, &[1.0, 0.0]), Err(QuatError::NonPositiveDepth { frame: 1, .. })));
        assert!(matches!(wmpjpe(&pred, &gt[..1], &[1.0]), Err(QuatError::LengthMismatch(..))));
    }

    #[test]
    fn slerp_endpoints() {
        let a = Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.3);
        let b = Quaternion::from_axis_angle([1.0, 1.0, 0.0], 1.1);
        assert!(close(a.slerp(&b, 0.0), a, 1e-12));
        assert!(close(a.slerp(&b, 1.0), b, 1e-12));
        let mid = a.slerp(&b, 0.5);
        let d1 = angular_distance(&a, &mid).unwrap();
        let d2 = angular_distance(&mid, &b).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    fn unit_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalized())
    }

    proptest! {
        #[test]
        fn normalize_idempotent(q in unit_quat()) {
            let n = q.normalized();
            prop_assert!((n.norm() - 1.0).abs() < 1e-9);
            prop_assert!(close(n.normalized(), n, 1e-15));
            let c = q.conj() * q;
            prop_assert!(close(c, Quaternion::new(q.norm_squared(), 0.0, 0.0, 0.0), 1e-9));
        }

        #[test]
        fn multiply_associative_and_norm_multiplicative(a in unit_quat(), b in unit_quat(), c in unit_quat()) {
            prop_assert!(close((a * b) * c, a * (b * c), 1e-9));
            prop_assert!(((a * b).norm() - a.norm() * b.norm()).abs() < 1e-9);
        }

        #[test]
        fn rotate_matches_matrix(q in unit_quat(), v in prop::array::uniform3(-2.0f64..2.0)) {
            let r = q.rotate(v);
            let m = q.to_matrix();
            for i in 0..3 {
                let mv = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
                prop_assert!((mv - r[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn aad_invariant_to_negation(qs in prop::collection::vec(unit_quat(), 6), gs in prop::collection::vec(unit_quat(), 6), mask in prop::collection::vec(any::<bool>(), 6)) {
            let pred = seq(qs.chunks(3).map(|c| c.to_vec()).collect());
            let flipped = seq(qs.iter().zip(&mask).map(|(q, &m)| if m { -*q } else { *q }).collect::<Vec<_>>().chunks(3).map(|c| c.to_vec()).collect());
            let gt = seq(gs.chunks(3).map(|c| c.to_vec()).collect());
            prop_assert_eq!(aad_loss(&pred, &gt).unwrap(), aad_loss(&flipped, &gt).unwrap());
        }
    }

    #[test]
    fn pseudometric_on_random_triples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut sample = || {
            loop {
                let q = Quaternion::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if q.norm() > 1e-2 {
                    return q.normalized();
                }
            }
        };
        for _ in 0..100_000 {
            let (a, b, c) = (sample(), sample(), sample());
            let ab = angular_distance(&a, &b).unwrap();
            let ba = angular_distance(&b, &a).unwrap();
            let bc = angular_distance(&b, &c).unwrap();
            let ac = angular_distance(&a, &c).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ac <= ab + bc + 1e-9, "triangle violated: {ac} > {ab} + {bc}");
            assert!(angular_distance(&a, &a).unwrap() < 1e-9);
            assert_eq!(angular_distance(&a, &-a).unwrap(), angular_distance(&a, &a).unwrap());
        }
    }
}
