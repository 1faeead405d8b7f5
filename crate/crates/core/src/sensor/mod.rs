//! Complementary vision sensor simulation.
//!
//! The difference pathway emits, per tick, a two-channel spatial difference
//! (diagonal gradients at ±45°) and a one-channel temporal difference between
//! consecutive ticks. Both are signed 7-bit values. The RGB pathway integrates
//! light over an exposure spanning `N` ticks, which we model as the mean of the
//! `N` sharp frames.

mod dataset;
mod disk;
mod frame;
mod synth;

pub use dataset::{read_meta, read_sample, write_sample, DatasetError, SampleMeta};
pub use disk::{gen_rotating_disk, DiskScene};
pub use frame::{DiffFrame, Frame, QuantFrame, SdFrame, TdFrame, MIN_EXTENT};
pub use synth::{moving_pattern_sequence, synthetic_samples, MotionKind, PatternConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Difference-pathway tick interval at 757 FPS.
pub const DEFAULT_TAU_DIFF_US: f64 = 1320.0;
/// Signed magnitude bits of the difference pathway.
pub const DIFF_BITS: u32 = 7;
/// Exposure settings of the synthetic dataset protocol (N = 5, 7, 9, 11).
pub const DEFAULT_EXPOSURES_US: [f64; 4] = [6600.0, 9240.0, 11880.0, 14520.0];
/// Most TD frames the tail augmentation may fold into the last entry.
pub const MAX_TD_TAIL: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("frame {height}x{width} is below the {MIN_EXTENT}x{MIN_EXTENT} minimum")]
    TooSmall { height: usize, width: usize },
    #[error("expected {expected} channel(s), got {actual}")]
    Channels { expected: usize, actual: usize },
    #[error("data length {actual} does not match shape ({expected})")]
    DataLength { expected: usize, actual: usize },
    #[error("intensity {0} outside [0, 1]")]
    OutOfRange(f32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("exposure {t_rgb_us} us must exceed tick interval {tau_diff_us} us (both positive)")]
    DegenerateExposure { t_rgb_us: f64, tau_diff_us: f64 },
    #[error("need {needed} frames, got {available}")]
    InsufficientFrames { needed: usize, available: usize },
    #[error("index {index} outside [0, {len})")]
    InvalidIndex { index: usize, len: usize },
    #[error("tail length m={0} must be in 1..=3")]
    InvalidTail(usize),
    #[error("unsupported bit depth {0}")]
    BitDepth(u32),
    #[error("empty frame list")]
    Empty,
}

/// Relationship between the RGB exposure and the difference-pathway ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureConfig {
    pub t_rgb_us: f64,
    pub tau_diff_us: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub mid_index: usize,
}

impl ExposureConfig {
    pub fn td_count(&self) -> usize {
        self.n - 1
    }
}

/// `N = ceil(t_rgb / tau_diff)`, `mid = floor((N - 1) / 2)`.
pub fn compute_exposure(t_rgb_us: f64, tau_diff_us: f64) -> Result<ExposureConfig, SensorError> {
    if !(t_rgb_us.is_finite() && tau_diff_us.is_finite())
        || tau_diff_us <= 0.0
        || t_rgb_us <= tau_diff_us
    {
        return Err(SensorError::DegenerateExposure { t_rgb_us, tau_diff_us });
    }
    let n = (t_rgb_us / tau_diff_us).ceil() as usize;
    Ok(ExposureConfig { t_rgb_us, tau_diff_us, n, mid_index: (n - 1) / 2 })
}

fn require_gray(frame: &Frame) -> Result<(), SensorError> {
    if frame.channels() != 1 {
        return Err(SensorError::Channels { expected: 1, actual: frame.channels() });
    }
    Ok(())
}

/// Diagonal gradients with replicate padding.
///
/// Channel 0 at `(y, x)` is `I(y-1, x+1) - I(y, x)`, channel 1 is `I(y+1, x+1) - I(y, x)`.
pub fn spatial_difference(frame: &Frame) -> Result<SdFrame, SensorError> {
    require_gray(frame)?;
    let (h, w) = (frame.height(), frame.width());
    let mut out = DiffFrame::zeros(h, w, 2);
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            let right = (x + 1).min(w - 1);
            let centre = frame.get(y, x, 0);
            let i = (y * w + x) * 2;
            out.data[i] = frame.get(up, right, 0) - centre;
            out.data[i + 1] = frame.get(down, right, 0) - centre;
        }
    }
    Ok(out)
}

/// Per-pixel `later - earlier`.
pub fn temporal_difference(earlier: &Frame, later: &Frame) -> Result<TdFrame, SensorError> {
    require_gray(earlier)?;
    require_gray(later)?;
    if !earlier.same_extent(later) {
        return Err(SensorError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            earlier.height(),
            earlier.width(),
            later.height(),
            later.width()
        )));
    }
    let data = earlier.data().iter().zip(later.data()).map(|(a, b)| b - a).collect();
    Ok(DiffFrame { height: earlier.height(), width: earlier.width(), channels: 1, data })
}

fn full_scale(bits: u32) -> Result<f32, SensorError> {
    if !(1..=7).contains(&bits) {
        return Err(SensorError::BitDepth(bits));
    }
    Ok(((1u32 << bits) - 1) as f32)
}

/// `q = round(clamp(d, -1, 1) * (2^bits - 1))`, rounding half away from zero.
pub fn quantize(diff: &DiffFrame, bits: u32) -> Result<QuantFrame, SensorError> {
    let scale = full_scale(bits)?;
    let data = diff
        .data
        .iter()
        .map(|&d| {
            let d = if d.is_nan() { 0.0 } else { d.clamp(-1.0, 1.0) };
            (d * scale).round() as i8
        })
        .collect();
    Ok(QuantFrame { height: diff.height, width: diff.width, channels: diff.channels, data })
}

pub fn dequantize(q: &QuantFrame, bits: u32) -> Result<DiffFrame, SensorError> {
    let scale = full_scale(bits)?;
    let data = q.data.iter().map(|&v| v as f32 / scale).collect();
    Ok(DiffFrame { height: q.height, width: q.width, channels: q.channels, data })
}

/// Exposure-integrated blur: the per-pixel mean of the sharp frames.
pub fn synthesize_blur(sharp: &[Frame]) -> Result<Frame, SensorError> {
    let first = sharp.first().ok_or(SensorError::Empty)?;
    if let Some(bad) = sharp
        .iter()
        .find(|f| !f.same_extent(first) || f.channels() != first.channels())
    {
        return Err(SensorError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            first.height(),
            first.width(),
            first.channels(),
            bad.height(),
            bad.width(),
            bad.channels()
        )));
    }
    // f64 accumulation keeps the mean of identical frames bit-exact.
    let n = sharp.len() as f64;
    let mut acc = vec![0.0f64; first.data().len()];
    for f in sharp {
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v as f64;
        }
    }
    let mean = acc.into_iter().map(|a| (a / n) as f32).collect();
    Frame::from_clamped(first.height(), first.width(), first.channels(), mean)
}

/// One record: blurred RGB plus the difference signals recorded during its exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct CvsSample {
    pub blur: Frame,
    /// `N` quantized spatial differences.
    pub sd_seq: Vec<QuantFrame>,
    /// `N - 1` quantized temporal differences.
    pub td_seq: Vec<QuantFrame>,
    /// Temporal differences recorded just after the exposure (tail-augmentation headroom).
    pub extra_td: Vec<QuantFrame>,
    pub exposure: ExposureConfig,
    pub gt: Vec<Frame>,
    pub gt_index: usize,
}

impl CvsSample {
    pub fn height(&self) -> usize {
        self.blur.height()
    }

    pub fn width(&self) -> usize {
        self.blur.width()
    }

    pub fn target(&self) -> &Frame {
        &self.gt[self.gt_index]
    }

    pub fn sd_float(&self, k: usize) -> Result<SdFrame, SensorError> {
        let q = self
            .sd_seq
            .get(k)
            .ok_or(SensorError::InvalidIndex { index: k, len: self.sd_seq.len() })?;
        dequantize(q, DIFF_BITS)
    }

    pub fn td_float(&self) -> Result<Vec<TdFrame>, SensorError> {
        self.td_seq.iter().map(|q| dequantize(q, DIFF_BITS)).collect()
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        let n = self.exposure.n;
        if self.sd_seq.len() != n {
            return Err(SensorError::ShapeMismatch(format!("{} SD frames for N={n}", self.sd_seq.len())));
        }
        if self.td_seq.len() + 1 != n {
            return Err(SensorError::ShapeMismatch(format!("{} TD frames for N={n}", self.td_seq.len())));
        }
        if self.gt_index >= self.gt.len() {
            return Err(SensorError::InvalidIndex { index: self.gt_index, len: self.gt.len() });
        }
        let (h, w) = (self.height(), self.width());
        let diff_ok = |q: &QuantFrame, c: usize| q.height == h && q.width == w && q.channels == c;
        if !self.sd_seq.iter().all(|q| diff_ok(q, 2))
            || !self.td_seq.iter().chain(&self.extra_td).all(|q| diff_ok(q, 1))
            || !self.gt.iter().all(|g| g.height() == h && g.width() == w)
        {
            return Err(SensorError::ShapeMismatch("frames do not share H x W".into()));
        }
        Ok(())
    }
}

/// Assembles a sample from the first `N` sharp frames; up to three further frames
/// become tail-augmentation headroom.
pub fn make_sample(sharp_seq: &[Frame], exposure: ExposureConfig, gt_index: usize) -> Result<CvsSample, SensorError> {
    let n = exposure.n;
    if n < 2 || sharp_seq.len() < n {
        return Err(SensorError::InsufficientFrames { needed: n.max(2), available: sharp_seq.len() });
    }
    if gt_index >= n {
        return Err(SensorError::InvalidIndex { index: gt_index, len: n });
    }
    let in_exposure = &sharp_seq[..n];
    let blur = synthesize_blur(in_exposure)?.to_rgb();
    let available = sharp_seq.len().min(n + MAX_TD_TAIL);
    let luma: Vec<Frame> = sharp_seq[..available].iter().map(Frame::luma).collect();

    let sd_seq = luma[..n]
        .iter()
        .map(|f| quantize(&spatial_difference(f)?, DIFF_BITS))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tds = luma
        .windows(2)
        .map(|p| quantize(&temporal_difference(&p[0], &p[1])?, DIFF_BITS))
        .collect::<Result<Vec<_>, _>>()?;
    let extra_td = tds.split_off(n - 1);
    let gt = in_exposure.iter().map(Frame::to_rgb).collect();
    Ok(CvsSample { blur, sd_seq, td_seq: tds, extra_td, exposure, gt, gt_index })
}

/// Float accumulation `last + extras[0] + ... + extras[m-1]`.
pub fn accumulate_td_tail(last: &TdFrame, extras: &[TdFrame], m: usize) -> Result<TdFrame, SensorError> {
    if !(1..=MAX_TD_TAIL).contains(&m) {
        return Err(SensorError::InvalidTail(m));
    }
    if extras.len() < m {
        return Err(SensorError::InsufficientFrames { needed: m, available: extras.len() });
    }
    let mut out = last.clone();
    for e in &extras[..m] {
        if !e.same_shape(last) {
            return Err(SensorError::ShapeMismatch("extra TD frame".into()));
        }
        for (o, v) in out.data.iter_mut().zip(&e.data) {
            *o += v;
        }
    }
    Ok(out)
}

/// Replaces the last in-exposure TD with itself plus the next `m` TDs, re-quantized.
pub fn augment_td_tail(sample: &CvsSample, extra_tds: &[QuantFrame], m: usize) -> Result<CvsSample, SensorError> {
    let last = sample.td_seq.last().ok_or(SensorError::Empty)?;
    let extras = extra_tds
        .iter()
        .take(m)
        .map(|q| dequantize(q, DIFF_BITS))
        .collect::<Result<Vec<_>, _>>()?;
    let summed = accumulate_td_tail(&dequantize(last, DIFF_BITS)?, &extras, m)?;
    let mut out = sample.clone();
    *out.td_seq.last_mut().expect("non-empty") = quantize(&summed, DIFF_BITS)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Frame {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Frame::new(h, w, 1, data).unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Frame {
        Frame::new(h, w, c, (0..h * w * c).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn exposure_examples() {
        let e = compute_exposure(14520.0, 1320.0).unwrap();
        assert_eq!((e.n, e.mid_index), (11, 5));
        let e = compute_exposure(6600.0, 1320.0).unwrap();
        assert_eq!((e.n, e.mid_index), (5, 2));
        let e = compute_exposure(1321.0, 1320.0).unwrap();
        assert_eq!((e.n, e.mid_index), (2, 0));
    }

    #[test]
    fn exposure_rejects_degenerate() {
        assert!(compute_exposure(1320.0, 1320.0).is_err());
        assert!(compute_exposure(100.0, 1320.0).is_err());
        assert!(compute_exposure(5000.0, 0.0).is_err());
        assert!(compute_exposure(-1.0, -2.0).is_err());
    }

    #[test]
    fn sd_of_constant_is_zero() {
        let f = gray(9, 12, |_, _| 0.37);
        let sd = spatial_difference(&f).unwrap();
        assert!(sd.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sd_horizontal_ramp() {
        let (h, w) = (10, 12);
        let f = gray(h, w, |_, x| x as f32 / (w - 1) as f32);
        let sd = spatial_difference(&f).unwrap();
        // Brute-force stencil with replicate padding.
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        for y in 0..h {
            for x in 0..w {
                let xr = clamp(x as isize + 1, w);
                let up = f.get(clamp(y as isize - 1, h), xr, 0) - f.get(y, x, 0);
                let dn = f.get(clamp(y as isize + 1, h), xr, 0) - f.get(y, x, 0);
                assert_eq!(sd.data[(y * w + x) * 2], up);
                assert_eq!(sd.data[(y * w + x) * 2 + 1], dn);
                let expected = if x == w - 1 { 0.0 } else { 1.0 / (w - 1) as f32 };
                assert!((up - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sd_single_pixel_footprint() {
        let (h, w, y0, x0) = (9, 9, 4, 4);
        let f = gray(h, w, |y, x| if (y, x) == (y0, x0) { 1.0 } else { 0.0 });
        let sd = spatial_difference(&f).unwrap();
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if sd.data[(y * w + x) * 2] != 0.0 {
                    plus.push((y, x, sd.data[(y * w + x) * 2]));
                }
                if sd.data[(y * w + x) * 2 + 1] != 0.0 {
                    minus.push((y, x, sd.data[(y * w + x) * 2 + 1]));
                }
            }
        }
        assert_eq!(plus, vec![(4, 4, -1.0), (5, 3, 1.0)]);
        assert_eq!(minus, vec![(3, 3, 1.0), (4, 4, -1.0)]);
    }

    #[test]
    fn sd_rejects_rgb() {
        let f = Frame::filled(8, 8, 3, 0.5).unwrap();
        assert!(matches!(spatial_difference(&f), Err(SensorError::Channels { .. })));
    }

    #[test]
    fn td_examples() {
        let f = gray(8, 8, |y, x| ((y * 8 + x) as f32) / 64.0);
        assert!(temporal_difference(&f, &f).unwrap().data.iter().all(|&v| v == 0.0));
        let zero = gray(8, 8, |_, _| 0.0);
        let one = gray(8, 8, |_, _| 1.0);
        assert!(temporal_difference(&zero, &one).unwrap().data.iter().all(|&v| v == 1.0));
        let other = gray(9, 8, |_, _| 0.0);
        assert!(temporal_difference(&zero, &other).is_err());
    }

    #[test]
    fn td_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq: Vec<Frame> = (0..7).map(|_| random_frame(&mut rng, 8, 10, 1)).collect();
        let mut acc = vec![0.0f32; 80];
        for p in seq.windows(2) {
            let td = temporal_difference(&p[0], &p[1]).unwrap();
            acc.iter_mut().zip(&td.data).for_each(|(a, v)| *a += v);
        }
        for (i, a) in acc.iter().enumerate() {
            let expected = seq[6].data()[i] - seq[0].data()[i];
            assert!((a - expected).abs() <= 1e-6);
        }
    }

    #[test]
    fn quantize_examples() {
        let d = DiffFrame { height: 1, width: 6, channels: 1, data: vec![0.0, 1.0, -1.0, 0.5, -0.5, 3.0] };
        let q = quantize(&d, 7).unwrap();
        assert_eq!(q.data, vec![0, 127, -127, 64, -64, 127]);
        assert!(quantize(&d, 0).is_err());
        assert!(quantize(&d, 8).is_err());
    }

    #[test]
    fn quantize_dequantize_idempotent_all_codes() {
        let codes: Vec<i8> = (-127..=127).collect();
        let q = QuantFrame { height: 1, width: codes.len(), channels: 1, data: codes };
        assert_eq!(quantize(&dequantize(&q, 7).unwrap(), 7).unwrap(), q);
    }

    #[test]
    fn blur_examples() {
        let f = gray(8, 8, |y, x| ((y + x) % 5) as f32 / 4.0);
        assert_eq!(synthesize_blur(&[f.clone(), f.clone(), f.clone()]).unwrap(), f);
        let zero = gray(8, 8, |_, _| 0.0);
        let one = gray(8, 8, |_, _| 1.0);
        assert!(synthesize_blur(&[zero, one]).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(matches!(synthesize_blur(&[]), Err(SensorError::Empty)));
    }

    #[test]
    fn blur_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames: Vec<Frame> = (0..6).map(|_| random_frame(&mut rng, 9, 8, 3)).collect();
        let blur = synthesize_blur(&frames).unwrap();
        for y in 0..9 {
            for x in 0..8 {
                for c in 0..3 {
                    let mut s = 0.0f64;
                    for f in &frames {
                        s += f.get(y, x, c) as f64;
                    }
                    assert!((blur.get(y, x, c) as f64 - s / 6.0).abs() <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn make_sample_static_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_frame(&mut rng, 8, 8, 3);
        let seq = vec![f.clone(); 5];
        let e = compute_exposure(6600.0, DEFAULT_TAU_DIFF_US).unwrap();
        let s = make_sample(&seq, e, e.mid_index).unwrap();
        assert_eq!(s.blur, f);
        assert_eq!(s.sd_seq.len(), 5);
        assert_eq!(s.td_seq.len(), 4);
        assert_eq!(s.exposure.mid_index, 2);
        assert!(s.td_seq.iter().all(|t| t.data.iter().all(|&v| v == 0)));
        assert!(s.sd_seq.windows(2).all(|p| p[0] == p[1]));
        assert!(s.extra_td.is_empty());
        assert_eq!(*s.target(), f);
    }

    #[test]
    fn make_sample_quantized_telescoping_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq: Vec<Frame> = (0..8).map(|_| random_frame(&mut rng, 8, 8, 3)).collect();
        let e = compute_exposure(6600.0, DEFAULT_TAU_DIFF_US).unwrap();
        let s = make_sample(&seq, e, 2).unwrap();
        assert_eq!(s.extra_td.len(), 3);
        let tds = s.td_float().unwrap();
        let first = seq[0].luma();
        let last = seq[e.n - 1].luma();
        let bound = e.n as f32 / 254.0;
        for i in 0..64 {
            let sum: f32 = tds.iter().map(|t| t.data[i]).sum();
            let exact = last.data()[i] - first.data()[i];
            assert!((sum - exact).abs() <= bound);
        }
    }

    #[test]
    fn make_sample_errors() {
        let f = Frame::filled(8, 8, 3, 0.2).unwrap();
        let e = compute_exposure(6600.0, DEFAULT_TAU_DIFF_US).unwrap();
        assert!(matches!(make_sample(&vec![f.clone(); 4], e, 2), Err(SensorError::InsufficientFrames { .. })));
        assert!(matches!(make_sample(&vec![f; 5], e, 5), Err(SensorError::InvalidIndex { .. })));
    }

    fn moving_sample(rng: &mut ChaCha8Rng) -> CvsSample {
        let seq: Vec<Frame> = (0..8).map(|_| random_frame(rng, 8, 8, 3)).collect();
        make_sample(&seq, compute_exposure(6600.0, DEFAULT_TAU_DIFF_US).unwrap(), 2).unwrap()
    }

    #[test]
    fn tail_zero_extras_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = moving_sample(&mut rng);
        let zeros = vec![QuantFrame { height: 8, width: 8, channels: 1, data: vec![0; 64] }; 3];
        for m in 1..=3 {
            assert_eq!(augment_td_tail(&s, &zeros, m).unwrap(), s);
        }
    }

    #[test]
    fn tail_cancellation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = moving_sample(&mut rng);
        let last = s.td_seq.last().unwrap();
        let neg = QuantFrame { data: last.data.iter().map(|v| -v).collect(), ..last.clone() };
        let out = augment_td_tail(&s, &[neg], 1).unwrap();
        assert!(out.td_seq.last().unwrap().data.iter().all(|&v| v == 0));
        assert_eq!(out.td_seq[..3], s.td_seq[..3]);
        assert_eq!(out.blur, s.blur);
    }

    #[test]
    fn tail_sum_matches_float_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| DiffFrame {
            height: 8,
            width: 8,
            channels: 1,
            data: (0..64).map(|_| rng.gen_range(-0.3f32..0.3)).collect(),
        };
        let last = mk(&mut rng);
        let extras: Vec<DiffFrame> = (0..3).map(|_| mk(&mut rng)).collect();
        let acc = accumulate_td_tail(&last, &extras, 3).unwrap();
        for i in 0..64 {
            let mut s = last.data[i];
            for e in &extras {
                s += e.data[i];
            }
            assert_eq!(acc.data[i], s);
        }
    }

    #[test]
    fn tail_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = moving_sample(&mut rng);
        assert!(matches!(augment_td_tail(&s, &s.extra_td[..1], 2), Err(SensorError::InsufficientFrames { .. })));
        assert!(matches!(augment_td_tail(&s, &s.extra_td, 0), Err(SensorError::InvalidTail(0))));
        assert!(matches!(augment_td_tail(&s, &s.extra_td, 4), Err(SensorError::InvalidTail(4))));
    }
}
