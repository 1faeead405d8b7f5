//! On-disk sample layout: one directory per sample.
//!
//! ```text
//! meta.json    {t_rgb_us, tau_diff_us, N, mid_index, height, width, gt_index, extra_td}
//! blur.f32     little-endian f32, H*W*3, row-major, channel-last
//! sd_<k>.i8    H*W*2 signed bytes, k in [0, N-1]
//! td_<i>.i8    H*W signed bytes, i in [0, N-2]
//! gt_<k>.f32   little-endian f32, H*W*3
//! tdx_<j>.i8   optional tail-augmentation headroom, j in [0, extra_td)
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CvsSample, Frame, QuantFrame, SensorError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed meta.json: {source}")]
    Meta { path: PathBuf, source: serde_json::Error },
    #[error("{path}: expected {expected} values, found {actual}")]
    Count { path: PathBuf, expected: usize, actual: usize },
    #[error("{0}: meta.json is inconsistent: {1}")]
    Inconsistent(PathBuf, String),
    #[error(transparent)]
    Sensor(#[from] SensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub t_rgb_us: f64,
    pub tau_diff_us: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub mid_index: usize,
    pub height: usize,
    pub width: usize,
    pub gt_index: usize,
    #[serde(default)]
    pub extra_td: usize,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn write_f32(path: &Path, data: &[f32]) -> Result<(), DatasetError> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_i8(path: &Path, data: &[i8]) -> Result<(), DatasetError> {
    let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected * 4 {
        return Err(DatasetError::Count { path: path.into(), expected, actual: bytes.len() / 4 });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_i8(path: &Path, expected: usize) -> Result<Vec<i8>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected {
        return Err(DatasetError::Count { path: path.into(), expected, actual: bytes.len() });
    }
    Ok(bytes.into_iter().map(|b| b as i8).collect())
}

pub fn write_sample(dir: &Path, sample: &CvsSample) -> Result<(), DatasetError> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let e = &sample.exposure;
    let meta = SampleMeta {
        t_rgb_us: e.t_rgb_us,
        tau_diff_us: e.tau_diff_us,
        n: e.n,
        mid_index: e.mid_index,
        height: sample.height(),
        width: sample.width(),
        gt_index: sample.gt_index,
        extra_td: sample.extra_td.len(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(io_err(&meta_path))?;
    write_f32(&dir.join("blur.f32"), sample.blur.data())?;
    for (k, sd) in sample.sd_seq.iter().enumerate() {
        write_i8(&dir.join(format!("sd_{k}.i8")), &sd.data)?;
    }
    for (i, td) in sample.td_seq.iter().enumerate() {
        write_i8(&dir.join(format!("td_{i}.i8")), &td.data)?;
    }
    for (j, td) in sample.extra_td.iter().enumerate() {
        write_i8(&dir.join(format!("tdx_{j}.i8")), &td.data)?;
    }
    for (k, gt) in sample.gt.iter().enumerate() {
        write_f32(&dir.join(format!("gt_{k}.f32")), gt.data())?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<SampleMeta, DatasetError> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Meta { path, source })
}

pub fn read_sample(dir: &Path) -> Result<CvsSample, DatasetError> {
    let meta = read_meta(dir)?;
    let exposure = super::compute_exposure(meta.t_rgb_us, meta.tau_diff_us)?;
    if exposure.n != meta.n || exposure.mid_index != meta.mid_index {
        return Err(DatasetError::Inconsistent(
            dir.into(),
            format!("N={} mid={} but exposure implies N={} mid={}", meta.n, meta.mid_index, exposure.n, exposure.mid_index),
        ));
    }
    if meta.gt_index >= meta.n || meta.extra_td > super::MAX_TD_TAIL {
        return Err(DatasetError::Inconsistent(dir.into(), "gt_index or extra_td out of range".into()));
    }
    // Stray sd/td files beyond N are a count mismatch too.
    for (prefix, count) in [("sd", meta.n), ("td", meta.n - 1), ("gt", meta.n), ("tdx", meta.extra_td)] {
        let ext = if prefix == "gt" { "f32" } else { "i8" };
        let stray = dir.join(format!("{prefix}_{count}.{ext}"));
        if stray.exists() {
            return Err(DatasetError::Inconsistent(dir.into(), format!("unexpected {}", stray.display())));
        }
    }
    let (h, w) = (meta.height, meta.width);
    let blur = Frame::new(h, w, 3, read_f32(&dir.join("blur.f32"), h * w * 3)?)?;
    let quant = |name: String, c: usize| -> Result<QuantFrame, DatasetError> {
        Ok(QuantFrame { height: h, width: w, channels: c, data: read_i8(&dir.join(name), h * w * c)? })
    };
    let sd_seq = (0..meta.n).map(|k| quant(format!("sd_{k}.i8"), 2)).collect::<Result<Vec<_>, _>>()?;
    let td_seq = (0..meta.n - 1).map(|i| quant(format!("td_{i}.i8"), 1)).collect::<Result<Vec<_>, _>>()?;
    let extra_td = (0..meta.extra_td).map(|j| quant(format!("tdx_{j}.i8"), 1)).collect::<Result<Vec<_>, _>>()?;
    let gt = (0..meta.n)
        .map(|k| Ok(Frame::new(h, w, 3, read_f32(&dir.join(format!("gt_{k}.f32")), h * w * 3)?)?))
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let sample = CvsSample {
        blur,
        sd_seq,
        td_seq,
        extra_td,
        exposure,
        gt,
        gt_index: meta.gt_index,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{compute_exposure, make_sample, moving_pattern_sequence, PatternConfig};

    fn sample() -> CvsSample {
        let seq = moving_pattern_sequence(&PatternConfig::random(12, 10, 8, 3));
        make_sample(&seq, compute_exposure(6600.0, 1320.0).unwrap(), 2).unwrap()
    }

    #[test]
    fn write_read_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        write_sample(dir.path(), &s).unwrap();
        assert_eq!(read_sample(dir.path()).unwrap(), s);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), &sample()).unwrap();
        fs::write(dir.path().join("td_1.i8"), [0u8; 7]).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(DatasetError::Count { .. })));
    }

    #[test]
    fn missing_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), &sample()).unwrap();
        fs::remove_file(dir.path().join("sd_4.i8")).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(DatasetError::Io { .. })));
    }

    #[test]
    fn meta_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), &sample()).unwrap();
        let mut meta = read_meta(dir.path()).unwrap();
        meta.n = 6;
        fs::write(dir.path().join("meta.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(DatasetError::Inconsistent(..))));
    }

    #[test]
    fn stray_frame_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), &sample()).unwrap();
        fs::write(dir.path().join("td_4.i8"), vec![0u8; 120]).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(DatasetError::Inconsistent(..))));
    }
}
