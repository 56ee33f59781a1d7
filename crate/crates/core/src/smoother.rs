//! Friedman's variable-span supersmoother.
//!
//! Three running-lines smooths (tweeter, midrange, woofer) are fitted; their
//! leave-one-out absolute residuals are smoothed with the midrange span and
//! the locally best span is chosen, smoothed, and used to blend the three
//! fits. A final tweeter pass removes the blending seams.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SmootherError {
    #[error("need at least {min} points, got {got}")]
    TooFewPoints { got: usize, min: usize },
    #[error("abscissae must be strictly increasing (index {0})")]
    NotIncreasing(usize),
    #[error("{0} abscissae but {1} values")]
    LengthMismatch(usize, usize),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("invalid smoother config: {0}")]
    Config(String),
}

pub const MIN_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmootherConfig {
    /// Tweeter, midrange and woofer spans as fractions of the series length.
    pub spans: [f64; 3],
    /// Bass enhancement in `[0, 10]`; larger values favor the woofer.
    pub bass: f64,
    /// Smallest running window, in points (odd).
    pub min_window: usize,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self { spans: [0.05, 0.2, 0.5], bass: 0.0, min_window: 3 }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<(), SmootherError> {
        let s = self.spans;
        if !(s[0] > 0.0 && s[0] < s[1] && s[1] < s[2] && s[2] <= 1.0) {
            return Err(SmootherError::Config(format!("spans {s:?} must increase strictly within (0, 1]")));
        }
        if !(0.0..=10.0).contains(&self.bass) {
            return Err(SmootherError::Config(format!("bass {} outside [0, 10]", self.bass)));
        }
        if self.min_window < 3 || self.min_window.is_multiple_of(2) {
            return Err(SmootherError::Config(format!("min_window {} must be odd and >= 3", self.min_window)));
        }
        Ok(())
    }
}

/// Running sums for a least-squares line over a sliding set of points.
#[derive(Default)]
struct Window {
    count: f64,
    xm: f64,
    ym: f64,
    /// Centered sum of squares of x.
    var: f64,
    /// Centered cross-product sum.
    cvar: f64,
}

impl Window {
    fn add(&mut self, x: f64, y: f64) {
        let before = self.count;
        self.count += 1.0;
        self.xm = (before * self.xm + x) / self.count;
        self.ym = (before * self.ym + y) / self.count;
        if before > 0.0 {
            let tmp = self.count * (x - self.xm) / before;
            self.var += tmp * (x - self.xm);
            self.cvar += tmp * (y - self.ym);
        }
    }

    fn remove(&mut self, x: f64, y: f64) {
        let before = self.count;
        self.count -= 1.0;
        if self.count > 0.0 {
            let tmp = before * (x - self.xm) / self.count;
            self.var -= tmp * (x - self.xm);
            self.cvar -= tmp * (y - self.ym);
            self.xm = (before * self.xm - x) / self.count;
            self.ym = (before * self.ym - y) / self.count;
        }
    }
}

/// Running line fit over a window of `2 * half + 1` points that slides with
/// the target point and stays inside the data at both ends. With `cv` set,
/// also returns `|y - fit| / (1 - leverage)` per point.
fn running_lines(x: &[f64], y: &[f64], span: f64, min_half: usize, vsmlsq: f64, cv: bool) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = ((0.5 * span * n as f64 + 0.5) as usize).max(min_half);
    let mut w = Window::default();
    for j in 0..(2 * half + 1).min(n) {
        w.add(x[j], y[j]);
    }

    let mut smo = vec![0.0; n];
    let mut acvr = vec![0.0; if cv { n } else { 0 }];
    for j in 0..n {
        // window [j - half, j + half] once it fits inside the data
        if j > half && j + half < n {
            w.remove(x[j - half - 1], y[j - half - 1]);
            w.add(x[j + half], y[j + half]);
        }
        let slope = if w.var > vsmlsq { w.cvar / w.var } else { 0.0 };
        smo[j] = slope * (x[j] - w.xm) + w.ym;
        if cv {
            let mut h = 1.0 / w.count;
            if w.var > vsmlsq {
                h += (x[j] - w.xm).powi(2) / w.var;
            }
            let denom = 1.0 - h;
            acvr[j] = if denom > 0.0 {
                (y[j] - smo[j]).abs() / denom
            } else if j > 0 {
                acvr[j - 1]
            } else {
                0.0
            };
        }
    }
    (smo, acvr)
}

fn check_input(x: &[f64], y: &[f64]) -> Result<(), SmootherError> {
    if x.len() != y.len() {
        return Err(SmootherError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < MIN_POINTS {
        return Err(SmootherError::TooFewPoints { got: x.len(), min: MIN_POINTS });
    }
    if let Some(i) = x.iter().zip(y).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(SmootherError::NonFinite(i));
    }
    if let Some(i) = x.windows(2).position(|w| w[1] <= w[0]) {
        return Err(SmootherError::NotIncreasing(i + 1));
    }
    Ok(())
}

/// Supersmoother with the default configuration.
pub fn supersmooth(x: &[f64], y: &[f64]) -> Result<Vec<f64>, SmootherError> {
    supersmooth_with(x, y, &SmootherConfig::default())
}

pub fn supersmooth_with(x: &[f64], y: &[f64], config: &SmootherConfig) -> Result<Vec<f64>, SmootherError> {
    config.validate()?;
    check_input(x, y)?;
    let n = x.len();
    let [tweeter, mid, woofer] = config.spans;
    let min_half = (config.min_window - 1) / 2;

    // Interquartile spread of the abscissae sets the degenerate-variance floor.
    let scale = x[3 * n / 4] - x[n / 4];
    let vsmlsq = (1e-3 * scale).powi(2);

    let mut fits = Vec::with_capacity(3);
    let mut resid = Vec::with_capacity(3);
    for span in config.spans {
        let (fit, cv) = running_lines(x, y, span, min_half, vsmlsq, true);
        let (r, _) = running_lines(x, &cv, mid, min_half, vsmlsq, false);
        fits.push(fit);
        resid.push(r);
    }

    let mut best_span = vec![0.0; n];
    for j in 0..n {
        let (mut resmin, mut span) = (f64::INFINITY, tweeter);
        for (i, &s) in config.spans.iter().enumerate() {
            if resid[i][j] < resmin {
                resmin = resid[i][j];
                span = s;
            }
        }
        let woof_res = resid[2][j];
        if config.bass > 0.0 && resmin < woof_res && resmin > 0.0 {
            span += (woofer - span) * (resmin / woof_res).max(1e-7).powf(10.0 - config.bass);
        }
        best_span[j] = span;
    }
    let (span_smooth, _) = running_lines(x, &best_span, mid, min_half, vsmlsq, false);

    let blended: Vec<f64> = (0..n)
        .map(|j| {
            let s = span_smooth[j].clamp(tweeter, woofer);
            let f = s - mid;
            if f < 0.0 {
                let f = -f / (mid - tweeter);
                (1.0 - f) * fits[1][j] + f * fits[0][j]
            } else {
                let f = f / (woofer - mid);
                (1.0 - f) * fits[1][j] + f * fits[2][j]
            }
        })
        .collect();
    let (out, _) = running_lines(x, &blended, tweeter, min_half, vsmlsq, false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn constant_is_preserved() {
        let x = grid(40);
        let y = vec![2.5; 40];
        for v in supersmooth(&x, &y).unwrap() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn line_is_reproduced() {
        let x: Vec<f64> = (0..60).map(|i| 0.1 * i as f64 + 0.003 * (i * i) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 7.0).collect();
        let s = supersmooth(&x, &y).unwrap();
        for (a, b) in s.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let again = supersmooth(&x, &s).unwrap();
        for (a, b) in again.iter().zip(&s) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn noisy_sine_rmse_drops() {
        let n = 200;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let clean: Vec<f64> = x.iter().map(|t| (2.0 * std::f64::consts::PI * t).sin()).collect();
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let noisy: Vec<f64> = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
        let rmse = |a: &[f64]| (a.iter().zip(&clean).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n as f64).sqrt();
        let smoothed = supersmooth(&x, &noisy).unwrap();
        assert!(rmse(&smoothed) < rmse(&noisy), "{} vs {}", rmse(&smoothed), rmse(&noisy));
    }

    #[test]
    fn input_errors() {
        assert_eq!(supersmooth(&grid(4), &[0.0; 4]), Err(SmootherError::TooFewPoints { got: 4, min: 5 }));
        let mut x = grid(6);
        x[3] = x[2];
        assert_eq!(supersmooth(&x, &[0.0; 6]), Err(SmootherError::NotIncreasing(3)));
        assert!(supersmooth(&grid(6), &[0.0; 5]).is_err());
        assert!(supersmooth(&grid(6), &[0.0, 1.0, f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SmootherConfig { spans: [0.2, 0.1, 0.5], ..Default::default() }.validate().is_err());
        assert!(SmootherConfig { bass: 11.0, ..Default::default() }.validate().is_err());
        assert!(SmootherConfig { min_window: 4, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn bass_stays_finite() {
        let x = grid(50);
        let y: Vec<f64> = x.iter().map(|v| (v * 0.3).sin() + 0.05 * (v * 7.1).cos()).collect();
        let cfg = SmootherConfig { bass: 5.0, ..Default::default() };
        assert!(supersmooth_with(&x, &y, &cfg).unwrap().iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn shift_and_scale_equivariance(ys in prop::collection::vec(-5.0f64..5.0, 5..60), a in 0.1f64..10.0, b in -100.0f64..100.0, flip in any::<bool>()) {
            let a = if flip { -a } else { a };
            let x = grid(ys.len());
            let base = supersmooth(&x, &ys).unwrap();
            let moved: Vec<f64> = ys.iter().map(|v| a * v + b).collect();
            let out = supersmooth(&x, &moved).unwrap();
            for (o, s) in out.iter().zip(&base) {
                prop_assert!((o - (a * s + b)).abs() < 1e-9 * (1.0 + b.abs() + a.abs() * 5.0));
            }
        }

        /// Bound: every output lies within one input range of the input extremes.
        #[test]
        fn output_is_bounded(ys in prop::collection::vec(-5.0f64..5.0, 5..80)) {
            let x = grid(ys.len());
            let out = supersmooth(&x, &ys).unwrap();
            let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let r = hi - lo;
            for v in out {
                prop_assert!(v.is_finite());
                prop_assert!(v >= lo - r - 1e-9 && v <= hi + r + 1e-9);
            }
        }
    }
}
