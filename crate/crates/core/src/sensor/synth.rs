//! Procedural moving-texture sequences for desk-scale training and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{make_sample, CvsSample, ExposureConfig, Frame, SensorError, MAX_TD_TAIL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionKind {
    /// Pixels per frame.
    Translate { vx: f64, vy: f64 },
    /// Radians per frame about the image centre.
    Rotate { omega: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub motion: MotionKind,
    pub seed: u64,
}

impl PatternConfig {
    /// Random translation or rotation, with speed drawn so the blur spans a few pixels per tick.
    pub fn random(height: usize, width: usize, frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let motion = if rng.gen_bool(0.7) {
            let speed = rng.gen_range(0.8..2.0);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            MotionKind::Translate { vx: speed * dir.cos(), vy: speed * dir.sin() }
        } else {
            let r = 0.5 * height.min(width) as f64;
            let omega = rng.gen_range(0.8..1.8) / r * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            MotionKind::Rotate { omega }
        };
        Self { height, width, frames, motion, seed }
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
    Stripes { freq: f64, cos: f64, sin: f64, phase: f64 },
}

#[derive(Debug, Clone)]
struct Texture {
    background: [f64; 3],
    layers: Vec<(Shape, [f64; 3])>,
}

fn coverage(signed_dist: f64) -> f64 {
    // Soft edge about one pixel wide.
    (0.5 - signed_dist).clamp(0.0, 1.0)
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, extent: f64) -> Self {
        let color = |rng: &mut ChaCha8Rng| [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let background = color(rng);
        let count = rng.gen_range(10..16);
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let cx = rng.gen_range(-extent..extent);
            let cy = rng.gen_range(-extent..extent);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let shape = match rng.gen_range(0..3) {
                0 => Shape::Disc { cx, cy, r: rng.gen_range(3.0..0.35 * extent) },
                1 => Shape::Rect {
                    cx,
                    cy,
                    hw: rng.gen_range(2.0..0.35 * extent),
                    hh: rng.gen_range(2.0..0.35 * extent),
                    cos: angle.cos(),
                    sin: angle.sin(),
                },
                _ => Shape::Stripes {
                    freq: rng.gen_range(0.08..0.25),
                    cos: angle.cos(),
                    sin: angle.sin(),
                    phase: rng.gen_range(0.0..1.0),
                },
            };
            layers.push((shape, color(rng)));
        }
        Self { background, layers }
    }

    fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let mut c = self.background;
        for (shape, col) in &self.layers {
            let alpha = match *shape {
                Shape::Disc { cx, cy, r } => coverage((u - cx).hypot(v - cy) - r),
                Shape::Rect { cx, cy, hw, hh, cos, sin } => {
                    let (du, dv) = (u - cx, v - cy);
                    let a = (du * cos + dv * sin).abs() - hw;
                    let b = (-du * sin + dv * cos).abs() - hh;
                    coverage(a.max(b))
                }
                Shape::Stripes { freq, cos, sin, phase } => {
                    let t = ((u * cos + v * sin) * freq + phase).rem_euclid(1.0);
                    // Half-duty square wave with soft edges, half-opacity.
                    let d = (t - 0.5).abs() - 0.25;
                    0.5 * coverage(-d / freq)
                }
            };
            for k in 0..3 {
                c[k] = c[k] * (1.0 - alpha) + col[k] * alpha;
            }
        }
        c
    }
}

/// Renders a sequence of RGB frames of a random texture under the configured motion.
pub fn moving_pattern_sequence(cfg: &PatternConfig) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let extent = 0.5 * h.max(w) as f64 + 2.0 * cfg.frames as f64 * 2.0;
    let texture = Texture::random(&mut rng, extent);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    const SS: usize = 2;
    (0..cfg.frames)
        .map(|t| {
            let t = t as f64;
            let mut data = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0.0; 3];
                    for sy in 0..SS {
                        for sx in 0..SS {
                            let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - cx;
                            let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - cy;
                            let (u, v) = match cfg.motion {
                                MotionKind::Translate { vx, vy } => (px - vx * t, py - vy * t),
                                MotionKind::Rotate { omega } => {
                                    let (s, c) = (-omega * t).sin_cos();
                                    (px * c - py * s, px * s + py * c)
                                }
                            };
                            let col = texture.sample(u, v);
                            for k in 0..3 {
                                acc[k] += col[k];
                            }
                        }
                    }
                    data.extend(acc.iter().map(|v| (v / (SS * SS) as f64) as f32));
                }
            }
            Frame::from_clamped(h, w, 3, data).expect("pattern extent is at least 8")
        })
        .collect()
}

/// `count` samples of independent random textures under `exposure`, each with
/// tail-augmentation headroom and the mid-exposure frame as target.
///
/// Sample `i` uses pattern seed `seed + i`.
pub fn synthetic_samples(
    count: usize,
    height: usize,
    width: usize,
    exposure: ExposureConfig,
    seed: u64,
) -> Result<Vec<CvsSample>, SensorError> {
    (0..count as u64)
        .map(|i| {
            let cfg = PatternConfig::random(height, width, exposure.n + MAX_TD_TAIL, seed.wrapping_add(i));
            make_sample(&moving_pattern_sequence(&cfg), exposure, exposure.mid_index)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_moving() {
        let cfg = PatternConfig {
            height: 16,
            width: 16,
            frames: 3,
            motion: MotionKind::Translate { vx: 1.0, vy: 0.0 },
            seed: 9,
        };
        let a = moving_pattern_sequence(&cfg);
        let b = moving_pattern_sequence(&cfg);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        // Integer translation shifts columns exactly.
        for y in 0..16 {
            for x in 1..16 {
                for c in 0..3 {
                    assert!((a[1].get(y, x, c) - a[0].get(y, x - 1, c)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_motion_is_static() {
        let cfg = PatternConfig {
            height: 12,
            width: 12,
            frames: 3,
            motion: MotionKind::Rotate { omega: 0.0 },
            seed: 1,
        };
        let s = moving_pattern_sequence(&cfg);
        assert_eq!(s[0], s[2]);
    }
}
