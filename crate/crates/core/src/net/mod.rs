//! The recurrent deblurring network: SD/TD encoders, the recurrent
//! encoder-decoder with cross-attention fusion, the attention gate between
//! steps and the residual output.

mod config;
mod graph;
mod params;

pub use config::{ablate, Ablation, ArchConfig};
pub use graph::{FeaturePyramid, Net};
pub use params::{arch_path, param_specs, ModelParams};

use thiserror::Error;

use crate::autograd::{CheckpointError, Scalar, Tape, Tensor, TensorError};
use crate::sensor::{CvsSample, DiffFrame, Frame, SensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("network produced non-finite output")]
    NonFinite,
    #[error("parameter {0} holds non-finite values")]
    NonFiniteParam(String),
}

/// Channel-last planes to a `[1, C, H, W]` tensor.
fn planar<T: Scalar>(height: usize, width: usize, channels: usize, data: &[f32]) -> Tensor<T> {
    let mut out = vec![T::zero(); data.len()];
    for (i, px) in data.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[c * height * width + i] = T::of(v as f64);
        }
    }
    Tensor::new(&[1, channels, height, width], out).expect("length matches extents")
}

pub fn frame_tensor<T: Scalar>(f: &Frame) -> Tensor<T> {
    planar(f.height(), f.width(), f.channels(), f.data())
}

pub fn diff_tensor<T: Scalar>(d: &DiffFrame) -> Tensor<T> {
    planar(d.height, d.width, d.channels, &d.data)
}

/// `[1, C, H, W]` back to a channel-last frame, clamping into `[0, 1]`.
pub fn tensor_frame<T: Scalar>(t: &Tensor<T>) -> Result<Frame, NetError> {
    let (b, c, h, w) = t.dims4()?;
    if b != 1 {
        return Err(NetError::Input(format!("expected a single image, got batch {b}")));
    }
    if !t.all_finite() {
        return Err(NetError::NonFinite);
    }
    let mut data = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            data[i * c + ch] = t.data()[ch * h * w + i].as_f64() as f32;
        }
    }
    Ok(Frame::from_clamped(h, w, c, data)?)
}

/// Mirror index into `[0, n)` for any integer offset.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads the bottom and right edges of `[B, C, H, W]` up to `(h, w)`.
pub fn reflect_pad<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>, NetError> {
    let (b, c, th, tw) = t.dims4()?;
    if h < th || w < tw {
        return Err(NetError::Input(format!("cannot pad {th}x{tw} down to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(b * c * h * w);
    for plane in t.data().chunks_exact(th * tw) {
        for y in 0..h {
            let sy = reflect(y as isize, th);
            for x in 0..w {
                out.push(plane[sy * tw + reflect(x as isize, tw)]);
            }
        }
    }
    Ok(Tensor::new(&[b, c, h, w], out)?)
}

/// Stacks `[1, C, H, W]` tensors along the batch axis.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>, NetError> {
    let first = items.first().ok_or_else(|| NetError::Input("empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(NetError::Input(format!("cannot stack {shape:?}")));
    }
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(NetError::Input(format!("batch shapes {:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    shape[0] = items.len();
    Ok(Tensor::new(&shape, data)?)
}

/// Network inputs as tensors: blur `[B, 3, H, W]`, SD `[B, 2, H, W]`, TDs `[B, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput<T> {
    pub blur: Tensor<T>,
    pub sd: Tensor<T>,
    pub tds: Vec<Tensor<T>>,
}

impl<T: Scalar> NetInput<T> {
    pub fn from_frames(blur: &Frame, sd: &DiffFrame, tds: &[DiffFrame]) -> Result<Self, NetError> {
        if blur.channels() != 3 || sd.channels != 2 {
            return Err(NetError::Input("blur must be RGB and SD two-channel".into()));
        }
        let (h, w) = (blur.height(), blur.width());
        if (sd.height, sd.width) != (h, w) || tds.iter().any(|t| (t.height, t.width, t.channels) != (h, w, 1)) {
            return Err(NetError::Input("blur, SD and TD extents differ".into()));
        }
        if tds.is_empty() {
            return Err(NetError::Input("at least one temporal difference is required".into()));
        }
        Ok(Self { blur: frame_tensor(blur), sd: diff_tensor(sd), tds: tds.iter().map(diff_tensor).collect() })
    }

    /// Inputs of `sample` with `SD_k` as the structural guide.
    pub fn from_sample(sample: &CvsSample, k: usize) -> Result<Self, NetError> {
        if k >= sample.sd_seq.len() {
            return Err(NetError::Input(format!("SD index {k} outside 0..{}", sample.sd_seq.len())));
        }
        Self::from_frames(&sample.blur, &sample.sd_float(k)?, &sample.td_float()?)
    }

    pub fn height(&self) -> usize {
        self.blur.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.blur.shape()[3]
    }

    pub fn pad_to(&self, h: usize, w: usize) -> Result<Self, NetError> {
        Ok(Self {
            blur: reflect_pad(&self.blur, h, w)?,
            sd: reflect_pad(&self.sd, h, w)?,
            tds: self.tds.iter().map(|t| reflect_pad(t, h, w)).collect::<Result<_, _>>()?,
        })
    }

    /// Concatenates single-sample inputs with equal TD counts into one batch.
    pub fn batch(items: &[Self]) -> Result<Self, NetError> {
        let first = items.first().ok_or_else(|| NetError::Input("empty batch".into()))?;
        if items.iter().any(|i| i.tds.len() != first.tds.len()) {
            return Err(NetError::Input("batched samples must share N".into()));
        }
        let col = |f: &dyn Fn(&Self) -> Tensor<T>| stack(&items.iter().map(f).collect::<Vec<_>>());
        let tds = (0..first.tds.len()).map(|i| col(&|s| s.tds[i].clone())).collect::<Result<_, _>>()?;
        Ok(Self { blur: col(&|s| s.blur.clone())?, sd: col(&|s| s.sd.clone())?, tds })
    }
}

/// Runs the network on tensors already at a valid extent and returns the unclamped output.
pub fn forward_tensors<T: Scalar>(
    tape: &Tape<T>,
    net: &Net<'_, T>,
    input: &NetInput<T>,
) -> Result<crate::autograd::Var, NetError> {
    let b = tape.constant(input.blur.clone());
    let sd = tape.constant(input.sd.clone());
    let tds: Vec<_> = input.tds.iter().map(|t| tape.constant(t.clone())).collect();
    net.forward(b, sd, &tds)
}

/// Inference on one input of any extent: reflect-pads, runs, crops back and clamps to `[0, 1]`.
pub fn restore_input(model: &ModelParams, input: &NetInput<f32>) -> Result<Frame, NetError> {
    let (h, w) = (input.height(), input.width());
    let m = model.arch.spatial_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = if (ph, pw) == (h, w) { input.clone() } else { input.pad_to(ph, pw)? };
    let tape = Tape::<f32>::inference();
    let net = Net::bind(&tape, &model.params, &model.arch, false);
    let out = forward_tensors(&tape, &net, &padded)?;
    let out = if (ph, pw) == (h, w) { out } else { tape.crop(out, 0, 0, h, w)? };
    let v = tape.value(out);
    tensor_frame(&v)
}

/// Restores `blur` guided by one SD frame and the TD sequence.
pub fn forward(model: &ModelParams, blur: &Frame, sd: &DiffFrame, tds: &[DiffFrame]) -> Result<Frame, NetError> {
    restore_input(model, &NetInput::from_frames(blur, sd, tds)?)
}

/// Restoration aligned with `SD_k`.
pub fn forward_at(model: &ModelParams, sample: &CvsSample, k: usize) -> Result<Frame, NetError> {
    restore_input(model, &NetInput::from_sample(sample, k)?)
}

/// Restoration aligned with the exposure midpoint.
pub fn restore(model: &ModelParams, sample: &CvsSample) -> Result<Frame, NetError> {
    forward_at(model, sample, sample.exposure.mid_index)
}

/// Every intra-exposure frame `D_0 .. D_{N-1}`.
pub fn restore_sequence(model: &ModelParams, sample: &CvsSample) -> Result<Vec<Frame>, NetError> {
    (0..sample.sd_seq.len()).map(|k| forward_at(model, sample, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn frame_tensor_round_trip() {
        let data: Vec<f32> = (0..8 * 9 * 3).map(|i| (i % 17) as f32 / 16.0).collect();
        let f = Frame::new(8, 9, 3, data).unwrap();
        let t = frame_tensor::<f32>(&f);
        assert_eq!(t.shape(), &[1, 3, 8, 9]);
        assert_eq!(t.data()[8 * 9], f.get(0, 0, 1));
        assert_eq!(tensor_frame(&t).unwrap(), f);
    }

    #[test]
    fn specs_unique_and_flag_dependent() {
        let arch = ArchConfig::default();
        let specs = param_specs(&arch);
        let mut names: Vec<_> = specs.iter().map(|s| &s.0).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
        let no_sd = param_specs(&ablate(&arch, Ablation::NoSd));
        assert!(no_sd.iter().all(|(n, _)| !n.starts_with("sd_enc")));
        let no_ccf = param_specs(&ablate(&arch, Ablation::NoCcf));
        assert!(no_ccf.iter().any(|(n, _)| n.starts_with("trrm.cat0")));
        assert!(no_ccf.iter().all(|(n, _)| !n.contains("ccf")));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            assert_eq!(ArchConfig::default().with_ablation(a).ablation(), Some(a));
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }
}
