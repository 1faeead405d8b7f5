//! Image quality metrics and the rotating-disk boundary metric.

mod edge;

pub use edge::{
    bew, fit_sigmoid, mean_rbew, profile_sample, sample_angular_profile, segment_edges, BewReport, DiskGeometry, EdgeReport, EdgeSegment,
    SigmoidFit, FIT_MAX_ITERS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensor::Frame;

/// Reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("frame {0}x{1} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(usize, usize),
    #[error("sampling circle leaves the frame")]
    OutOfBounds,
    #[error("profile needs at least {0} samples")]
    ShortProfile(usize),
    #[error("fit has no transition (a = {0})")]
    NoTransition(f64),
    #[error("no usable edges ({0} excluded)")]
    NoEdges(usize),
}

fn check_pair(a: &Frame, b: &Frame) -> Result<(), MetricsError> {
    if !a.same_extent(b) || a.channels() != b.channels() {
        return Err(MetricsError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Frame, gt: &Frame) -> Result<f64, MetricsError> {
    check_pair(pred, gt)?;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sse / pred.data().len() as f64)
}

/// `10 log10(1 / MSE)` for unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Frame, gt: &Frame) -> Result<f64, MetricsError> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode Gaussian filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
/// positions, averaged over channels.
pub fn ssim(pred: &Frame, gt: &Frame) -> Result<f64, MetricsError> {
    check_pair(pred, gt)?;
    let (h, w, c) = (pred.height(), pred.width(), pred.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(h, w));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |f: &Frame| -> Vec<f64> { f.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect() };
        let (x, y) = (plane(pred), plane(gt));
        let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let mxx = filter_valid(&prod(&x, &x), h, w, &g);
        let myy = filter_valid(&prod(&y, &y), h, w, &g);
        let mxy = filter_valid(&prod(&x, &y), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = mxx[i] - ux * ux;
            let syy = myy[i] - uy * uy;
            let sxy = mxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (sxx + syy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Serializable evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub per_edge: Vec<EdgeReport>,
    pub mean_rbew: Option<f64>,
}

impl MetricsReport {
    pub fn new(pred: &Frame, gt: &Frame, bew: Option<&BewReport>) -> Result<Self, MetricsError> {
        Ok(Self {
            psnr: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
            per_edge: bew.map(|b| b.edges.clone()).unwrap_or_default(),
            mean_rbew: bew.map(|b| b.mean_rbew),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Frame {
        let mut d = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                d.push(f(y, x));
            }
        }
        Frame::new(h, w, 1, d).unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = frame(8, 8, |_, _| 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = frame(8, 8, |_, _| 0.51);
        assert!((psnr(&a, &b).unwrap() - 40.0).abs() < 1e-4);
    }

    #[test]
    fn window_normalized() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = frame(16, 16, |y, x| ((x / 4 + y / 4) % 2) as f32);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = frame(16, 16, |y, x| 1.0 - a.get(y, x, 0));
        assert!(ssim(&a, &inv).unwrap() < 0.0);
        assert!(matches!(ssim(&frame(8, 16, |_, _| 0.0), &frame(8, 16, |_, _| 0.0)), Err(MetricsError::TooSmall(8, 16))));
    }
}
