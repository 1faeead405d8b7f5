use serde::{Deserialize, Serialize};

use super::SensorError;

/// Smallest accepted extent along either spatial axis.
pub const MIN_EXTENT: usize = 8;

/// Dense intensity image, row-major and channel-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, SensorError> {
        if height < MIN_EXTENT || width < MIN_EXTENT {
            return Err(SensorError::TooSmall { height, width });
        }
        if channels != 1 && channels != 3 {
            return Err(SensorError::Channels { expected: 3, actual: channels });
        }
        if data.len() != height * width * channels {
            return Err(SensorError::DataLength {
                expected: height * width * channels,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(SensorError::OutOfRange(*v));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self, SensorError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a frame from values that may stray outside `[0, 1]`, clamping them.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self, SensorError> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_extent(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Unweighted channel mean `(R + G + B) / 3`; gray frames are returned as-is.
    pub fn luma(&self) -> Frame {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| ((px[0] + px[1] + px[2]) / 3.0).clamp(0.0, 1.0))
            .collect();
        Frame { height: self.height, width: self.width, channels: 1, data }
    }

    /// Expands a gray frame into three identical channels.
    pub fn to_rgb(&self) -> Frame {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Frame { height: self.height, width: self.width, channels: 3, data }
    }
}

/// Float difference signal (spatial: 2 channels, temporal: 1 channel), values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffFrame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl DiffFrame {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn same_shape(&self, other: &DiffFrame) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Spatial difference: channel 0 is the +45° gradient, channel 1 the -45° gradient.
pub type SdFrame = DiffFrame;
/// Temporal difference: a single channel.
pub type TdFrame = DiffFrame;

/// Signed fixed-point difference signal as emitted by the difference pathway.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantFrame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<i8>,
}

impl QuantFrame {
    pub fn same_shape(&self, other: &QuantFrame) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}
