use std::f64::consts::TAU;

use super::Frame;

const SUPERSAMPLE: usize = 4;
const LIGHT: [f64; 3] = [0.9, 0.85, 0.8];
const DARK: [f64; 3] = [0.1, 0.15, 0.2];
const BACKGROUND: f64 = 0.5;

/// Rotating sector disk used for the performance-boundary benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskScene {
    pub sectors: usize,
    pub rpm: f64,
    pub fps: f64,
    pub size: usize,
    pub illumination: f64,
    /// Rotation at frame 0, radians.
    pub phase: f64,
}

impl DiskScene {
    pub fn new(sectors: usize, rpm: f64, fps: f64, size: usize, illumination: f64) -> Self {
        Self { sectors: sectors.max(2), rpm, fps, size, illumination, phase: 0.0 }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.size as f64 / 2.0, self.size as f64 / 2.0)
    }

    pub fn disk_radius(&self) -> f64 {
        0.45 * self.size as f64
    }

    /// Disk rotation at (fractional) frame index `t`, radians.
    pub fn angle_at(&self, t: f64) -> f64 {
        self.phase + TAU * self.rpm / 60.0 * t / self.fps
    }

    fn shade(&self, px: f64, py: f64, rotation: f64) -> [f64; 3] {
        let (cx, cy) = self.center();
        let (dx, dy) = (px - cx, py - cy);
        if dx.hypot(dy) > self.disk_radius() {
            return [BACKGROUND; 3];
        }
        let rel = (dy.atan2(dx) - rotation).rem_euclid(TAU);
        let sector = ((rel / (TAU / self.sectors as f64)) as usize).min(self.sectors - 1);
        if sector % 2 == 0 {
            LIGHT
        } else {
            DARK
        }
    }

    /// Renders frame `t` with 4x4 supersampling.
    pub fn render(&self, t: usize) -> Frame {
        let rotation = self.angle_at(t as f64);
        let n = self.size;
        let scale = self.illumination.clamp(0.0, 1.0);
        let mut data = Vec::with_capacity(n * n * 3);
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for y in 0..n {
            for x in 0..n {
                let mut acc = [0.0f64; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let c = self.shade(px, py, rotation);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                data.extend(acc.iter().map(|v| (v * inv * scale) as f32));
            }
        }
        Frame::from_clamped(n, n, 3, data).expect("disk size is at least 8")
    }

    pub fn frames(&self, n_frames: usize) -> Vec<Frame> {
        (0..n_frames).map(|t| self.render(t)).collect()
    }
}

/// Renders `n_frames` of a disk with `sectors` alternating sectors spinning at `rpm`,
/// sampled at `fps`, on a `size`x`size` canvas scaled by `illumination`.
pub fn gen_rotating_disk(
    sectors: usize,
    rpm: f64,
    fps: f64,
    n_frames: usize,
    size: usize,
    illumination: f64,
) -> Vec<Frame> {
    DiskScene::new(sectors, rpm, fps, size.max(super::MIN_EXTENT), illumination).frames(n_frames)
}
