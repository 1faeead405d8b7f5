//! Angular edge profiles, sigmoid edge fits and the blurred-edge-width metric.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::sensor::Frame;

pub const FIT_MAX_ITERS: usize = 100;
const STEP_TOL: f64 = 1e-10;
const STATIONARY_TOL: f64 = 1e-7;

/// Bilinear luma sample at continuous coordinates where pixel `(x, y)` covers `[x, x+1) x [y, y+1)`.
fn bilinear_luma(frame: &Frame, px: f64, py: f64) -> f64 {
    let (w, h, c) = (frame.width(), frame.height(), frame.channels());
    let (fx, fy) = ((px - 0.5).clamp(0.0, (w - 1) as f64), (py - 0.5).clamp(0.0, (h - 1) as f64));
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let luma = |y: usize, x: usize| (0..c).map(|k| frame.get(y, x, k) as f64).sum::<f64>() / c as f64;
    let top = luma(y0, x0) * (1.0 - tx) + luma(y0, x1) * tx;
    let bottom = luma(y1, x0) * (1.0 - tx) + luma(y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Luma on the circle of `radius` around `center` at angle `theta`.
pub fn profile_sample(frame: &Frame, center: (f64, f64), radius: f64, theta: f64) -> f64 {
    bilinear_luma(frame, center.0 + radius * theta.cos(), center.1 + radius * theta.sin())
}

/// `n_samples` equally spaced `(theta, luma)` pairs on a circle, starting at angle 0.
pub fn sample_angular_profile(
    frame: &Frame,
    center: (f64, f64),
    radius: f64,
    n_samples: usize,
) -> Result<Vec<(f64, f64)>, MetricsError> {
    if n_samples < 8 {
        return Err(MetricsError::ShortProfile(8));
    }
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let inside = |c: f64, extent: f64| c - radius - 0.5 >= 0.0 && c + radius + 0.5 <= extent;
    if !(radius > 0.0 && inside(center.0, w) && inside(center.1, h)) {
        return Err(MetricsError::OutOfBounds);
    }
    Ok((0..n_samples)
        .map(|i| {
            let t = TAU * i as f64 / n_samples as f64;
            (t, profile_sample(frame, center, radius, t))
        })
        .collect())
}

/// Least-squares fit of `delta / (1 + exp(-(a theta + b))) + g_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub g_min: f64,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl SigmoidFit {
    pub fn eval(&self, theta: f64) -> f64 {
        self.delta * sigmoid(self.a * theta + self.b) + self.g_min
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Solves the symmetric positive definite 4x4 system `m x = r` by Cholesky.
fn solve4(m: &[[f64; 4]; 4], r: &[f64; 4]) -> Option<[f64; 4]> {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let s = m[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; 4];
    for i in 0..4 {
        y[i] = (r[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; 4];
    for i in (0..4).rev() {
        x[i] = (y[i] - (i + 1..4).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Parameters `(a, c, delta, g)` of `delta * s(a (theta - theta0) + c) + g`.
struct Problem<'a> {
    data: &'a [(f64, f64)],
    theta0: f64,
}

impl Problem<'_> {
    fn sse(&self, p: &[f64; 4]) -> f64 {
        self.data
            .iter()
            .map(|&(t, y)| {
                let r = p[2] * sigmoid(p[0] * (t - self.theta0) + p[1]) + p[3] - y;
                r * r
            })
            .sum()
    }

    /// `J^T J` and `J^T r` at `p`.
    fn normal(&self, p: &[f64; 4]) -> ([[f64; 4]; 4], [f64; 4]) {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for &(t, y) in self.data {
            let x = t - self.theta0;
            let s = sigmoid(p[0] * x + p[1]);
            let ds = p[2] * s * (1.0 - s);
            let j = [ds * x, ds, s, 1.0];
            let r = p[2] * s + p[3] - y;
            for i in 0..4 {
                jtr[i] += j[i] * r;
                for k in 0..4 {
                    jtj[i][k] += j[i] * j[k];
                }
            }
        }
        (jtj, jtr)
    }
}

/// Initial `(theta0, a)` from the first 50% crossing and the bracketing finite-difference slope.
fn initial_crossing(data: &[(f64, f64)], g: f64, delta: f64) -> (f64, f64) {
    let half = g + 0.5 * delta;
    for w in data.windows(2) {
        let ((t0, y0), (t1, y1)) = (w[0], w[1]);
        if (y0 - half) * (y1 - half) <= 0.0 && y0 != y1 {
            let theta = t0 + (half - y0) / (y1 - y0) * (t1 - t0);
            let slope = (y1 - y0) / (t1 - t0);
            return (theta, 4.0 * slope / delta);
        }
    }
    let mid = data[data.len() / 2].0;
    let span = data[data.len() - 1].0 - data[0].0;
    let dir = if data[data.len() - 1].1 >= data[0].1 { 1.0 } else { -1.0 };
    (mid, dir * 8.0 / span.max(f64::MIN_POSITIVE))
}

/// Damped Gauss-Newton (Levenberg-Marquardt with diagonal scaling) fit of a
/// single sigmoid transition, samples sorted by angle.
///
/// Converges when every parameter step is below `1e-10 * (1 + |p|)`, or when
/// no damped step reduces the residual and the residual is orthogonal to the
/// Jacobian columns to `1e-7`. Failure is reported through `converged`.
pub fn fit_sigmoid(profile: &[(f64, f64)]) -> Result<SigmoidFit, MetricsError> {
    if profile.len() < 5 {
        return Err(MetricsError::ShortProfile(5));
    }
    let (lo, hi) = profile.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &(_, y)| (l.min(y), h.max(y)));
    let delta0 = hi - lo;
    if !(delta0 > 0.0 && delta0.is_finite()) {
        return Err(MetricsError::NoTransition(0.0));
    }
    let (theta0, a0) = initial_crossing(profile, lo, delta0);
    let problem = Problem { data: profile, theta0 };
    let mut p = [a0, 0.0, delta0, lo];
    let mut sse = problem.sse(&p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < FIT_MAX_ITERS {
        iterations += 1;
        let (jtj, jtr) = problem.normal(&p);
        let mut accepted = false;
        while lambda <= 1e16 {
            let mut m = jtj;
            for i in 0..4 {
                m[i][i] += lambda * jtj[i][i].max(f64::MIN_POSITIVE);
            }
            let step = match solve4(&m, &jtr.map(|v| -v)) {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]];
            let trial_sse = problem.sse(&trial);
            if trial_sse.is_finite() && trial_sse <= sse {
                let small = (0..4).all(|i| step[i].abs() <= STEP_TOL * (1.0 + p[i].abs()));
                p = trial;
                sse = trial_sse;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                converged = small;
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !accepted {
            let orth = (0..4).all(|i| jtr[i].abs() <= STATIONARY_TOL * (jtj[i][i] * sse).sqrt() + f64::MIN_POSITIVE);
            converged = orth;
            break;
        }
    }
    let fit = SigmoidFit {
        a: p[0],
        b: p[1] - p[0] * theta0,
        delta: p[2],
        g_min: p[3],
        residual: sse,
        converged,
        iterations,
    };
    // A negative range is the same curve with a mirrored slope.
    if fit.delta < 0.0 {
        return Ok(SigmoidFit { a: -fit.a, b: -fit.b, delta: -fit.delta, g_min: fit.g_min + fit.delta, ..fit });
    }
    Ok(fit)
}

/// 10%-90% transition width `2 ln 9 / |a|`, in the units of the fitted abscissa.
pub fn bew(fit: &SigmoidFit) -> Result<f64, MetricsError> {
    if fit.a == 0.0 || !fit.a.is_finite() {
        return Err(MetricsError::NoTransition(fit.a));
    }
    Ok(2.0 * 9f64.ln() / fit.a.abs())
}

/// One transition of a cyclic profile, in coordinates local to its crossing.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSegment {
    /// Angle of the 50% crossing in `[0, 2 pi)`.
    pub theta_center: f64,
    pub rising: bool,
    /// `(x, intensity)` with `x = theta - theta_center`, negated for falling edges so every segment rises.
    pub points: Vec<(f64, f64)>,
}

/// Splits a full-circle profile at its 50%-level crossings.
///
/// Each edge owns the samples between the midpoints to its neighbouring crossings.
pub fn segment_edges(profile: &[(f64, f64)]) -> Vec<EdgeSegment> {
    let n = profile.len();
    if n < 8 {
        return Vec::new();
    }
    let (lo, hi) = profile.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &(_, y)| (l.min(y), h.max(y)));
    if hi <= lo {
        return Vec::new();
    }
    let mid = 0.5 * (lo + hi);
    let mut crossings = Vec::new();
    for i in 0..n {
        let (t0, y0) = profile[i];
        let (t1, y1) = if i + 1 < n { profile[i + 1] } else { (profile[0].0 + TAU, profile[0].1) };
        let (a, b) = (y0 >= mid, y1 >= mid);
        if a != b {
            let t = t0 + (mid - y0) / (y1 - y0) * (t1 - t0);
            crossings.push((t.rem_euclid(TAU), b, i));
        }
    }
    let k = crossings.len();
    if k < 2 {
        return Vec::new();
    }
    let step = TAU / n as f64;
    let mut out = Vec::with_capacity(k);
    for e in 0..k {
        let (tc, rising, _) = crossings[e];
        let prev = crossings[(e + k - 1) % k].0;
        let next = crossings[(e + 1) % k].0;
        let back = (tc - prev).rem_euclid(TAU);
        let fwd = (next - tc).rem_euclid(TAU);
        let (lo_x, hi_x) = (-0.5 * if k == 2 && back == 0.0 { TAU } else { back }, 0.5 * fwd);
        // Samples whose wrapped offset from the crossing falls in [lo_x, hi_x).
        let first = ((tc + lo_x) / step).ceil() as isize;
        let last = ((tc + hi_x) / step).ceil() as isize;
        let mut points: Vec<(f64, f64)> = (first..last)
            .map(|j| {
                let idx = j.rem_euclid(n as isize) as usize;
                let x = j as f64 * step - tc;
                (if rising { x } else { -x }, profile[idx].1)
            })
            .collect();
        if !rising {
            points.reverse();
        }
        out.push(EdgeSegment { theta_center: tc, rising, points });
    }
    out
}

/// Circle on which the disk edges are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiskGeometry {
    pub center: (f64, f64),
    pub radius: f64,
    pub n_samples: usize,
    pub sectors: usize,
}

/// Per-edge fit and relative width; `b` is local to `theta_center` after reflection of falling edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeReport {
    pub theta_center: f64,
    pub rising: bool,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub g_min: f64,
    pub bew: Option<f64>,
    pub ref_bew: Option<f64>,
    pub rbew: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BewReport {
    pub edges: Vec<EdgeReport>,
    /// Mean width of the usable reference edges, radians.
    pub static_bew: f64,
    pub mean_rbew: f64,
    /// Edges without a usable ratio (failed fit or no matching reference edge).
    pub excluded: usize,
    pub expected_edges: usize,
}

struct FittedEdge {
    seg: EdgeSegment,
    fit: Option<SigmoidFit>,
    width: Option<f64>,
}

fn fit_edges(frame: &Frame, g: &DiskGeometry) -> Result<Vec<FittedEdge>, MetricsError> {
    let profile = sample_angular_profile(frame, g.center, g.radius, g.n_samples)?;
    Ok(segment_edges(&profile)
        .into_iter()
        .map(|seg| {
            let fit = fit_sigmoid(&seg.points).ok();
            let width = fit.filter(|f| f.converged).and_then(|f| bew(&f).ok());
            FittedEdge { seg, fit, width }
        })
        .collect())
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Relative blurred-edge widths of `test` against a static reference of the same disk.
///
/// Each test edge is matched to the nearest reference edge of the same polarity.
pub fn mean_rbew(test: &Frame, static_ref: &Frame, geometry: &DiskGeometry) -> Result<BewReport, MetricsError> {
    let test_edges = fit_edges(test, geometry)?;
    let ref_edges = fit_edges(static_ref, geometry)?;
    let ref_widths: Vec<f64> = ref_edges.iter().filter_map(|e| e.width).collect();
    let static_bew = if ref_widths.is_empty() { f64::NAN } else { ref_widths.iter().sum::<f64>() / ref_widths.len() as f64 };
    let mut edges = Vec::with_capacity(test_edges.len());
    let mut ratios = Vec::new();
    for e in &test_edges {
        let matched = ref_edges
            .iter()
            .filter(|r| r.seg.rising == e.seg.rising)
            .min_by(|x, y| {
                circular_distance(x.seg.theta_center, e.seg.theta_center)
                    .total_cmp(&circular_distance(y.seg.theta_center, e.seg.theta_center))
            });
        let ref_bew = matched.and_then(|r| r.width);
        let rbew = match (e.width, ref_bew) {
            (Some(t), Some(r)) if r > 0.0 => Some(t / r),
            _ => None,
        };
        if let Some(v) = rbew {
            ratios.push(v);
        }
        let f = e.fit.unwrap_or(SigmoidFit {
            a: f64::NAN,
            b: f64::NAN,
            delta: f64::NAN,
            g_min: f64::NAN,
            residual: f64::NAN,
            converged: false,
            iterations: 0,
        });
        edges.push(EdgeReport {
            theta_center: e.seg.theta_center,
            rising: e.seg.rising,
            a: f.a,
            b: f.b,
            delta: f.delta,
            g_min: f.g_min,
            bew: e.width,
            ref_bew,
            rbew,
            converged: f.converged,
        });
    }
    let excluded = edges.len() - ratios.len();
    if ratios.is_empty() {
        return Err(MetricsError::NoEdges(excluded));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(BewReport { edges, static_bew, mean_rbew: mean, excluded, expected_edges: geometry.sectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(a: f64, b: f64, delta: f64, g: f64, n: usize, span: f64) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let t = -span + 2.0 * span * i as f64 / (n - 1) as f64;
                (t, delta * sigmoid(a * t + b) + g)
            })
            .collect()
    }

    #[test]
    fn cholesky_solves() {
        let m = [[4.0, 1.0, 0.0, 0.0], [1.0, 3.0, 0.5, 0.0], [0.0, 0.5, 2.0, 0.1], [0.0, 0.0, 0.1, 1.0]];
        let x = [1.0, -2.0, 0.5, 3.0];
        let r: Vec<f64> = (0..4).map(|i| (0..4).map(|k| m[i][k] * x[k]).sum()).collect();
        let got = solve4(&m, &[r[0], r[1], r[2], r[3]]).unwrap();
        for i in 0..4 {
            assert!((got[i] - x[i]).abs() < 1e-12);
        }
        assert!(solve4(&[[0.0; 4]; 4], &[1.0; 4]).is_none());
    }

    #[test]
    fn falling_curve_fits_with_negative_slope() {
        let data = curve(-3.0, 0.5, 0.7, 0.1, 101, 4.0);
        let f = fit_sigmoid(&data).unwrap();
        assert!(f.converged);
        assert!((f.a + 3.0).abs() < 1e-6 && (f.delta - 0.7).abs() < 1e-6);
    }

    #[test]
    fn flat_profile_has_no_transition() {
        let data: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 0.3)).collect();
        assert!(matches!(fit_sigmoid(&data), Err(MetricsError::NoTransition(_))));
        assert!(segment_edges(&data).is_empty());
    }

    #[test]
    fn square_wave_segments() {
        let n = 360;
        let profile: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let t = TAU * i as f64 / n as f64;
                (t, if (t / (TAU / 6.0)) as usize % 2 == 0 { 0.9 } else { 0.1 })
            })
            .collect();
        let segs = segment_edges(&profile);
        assert_eq!(segs.len(), 6);
        assert_eq!(segs.iter().filter(|s| s.rising).count(), 3);
        for s in &segs {
            assert!(s.points.windows(2).all(|w| w[0].0 < w[1].0));
            assert!(s.points.first().unwrap().1 < s.points.last().unwrap().1);
            assert!((55..=65).contains(&s.points.len()));
        }
    }
}
