use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, NetError};
use crate::autograd::{read_checkpoint, write_checkpoint, ParamStore, Tensor};

/// Name and shape of every learnable tensor for `arch`, in construction order.
pub fn param_specs(arch: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
        specs.push((format!("{name}.w"), vec![c_out, c_in, k, k]));
        specs.push((format!("{name}.b"), vec![c_out]));
    };
    let n = arch.n_scales;
    let w = |j: usize| arch.width(j);

    let encoder = |prefix: &str, c_in: usize, conv: &mut dyn FnMut(String, usize, usize, usize)| {
        conv(format!("{prefix}.stem"), w(0), c_in, 3);
        for j in 0..n {
            if j > 0 {
                conv(format!("{prefix}.s{j}.down"), w(j), w(j - 1), 3);
            }
            conv(format!("{prefix}.s{j}.res1"), w(j), w(j), 3);
            conv(format!("{prefix}.s{j}.res2"), w(j), w(j), 3);
            conv(format!("{prefix}.s{j}.proj"), w(j), w(j), 1);
        }
    };
    if arch.use_sd {
        encoder("sd_enc", arch.sd_channels_in, &mut conv);
    }
    if arch.use_td {
        encoder("td_enc", arch.td_channels_in, &mut conv);
    }
    conv("rgb_embed".into(), w(0), arch.rgb_channels_in, 3);
    conv("trrm.entry".into(), w(0), 2 * w(0), 1);
    for j in 0..n {
        if j > 0 {
            conv(format!("trrm.enc{j}.down"), w(j), w(j - 1), 3);
        }
        conv(format!("trrm.enc{j}.res1"), w(j), w(j), 3);
        conv(format!("trrm.enc{j}.res2"), w(j), w(j), 3);
        if arch.use_ccf {
            for branch in ["td", "sd"] {
                for p in ["q", "k", "v"] {
                    conv(format!("trrm.ccf{j}.{branch}.{p}"), w(j), w(j), 1);
                }
            }
        } else {
            conv(format!("trrm.cat{j}.c1"), w(j), 3 * w(j), 3);
            conv(format!("trrm.cat{j}.c2"), w(j), w(j), 3);
        }
    }
    for j in (0..n - 1).rev() {
        conv(format!("trrm.up{j}"), w(j), w(j + 1), 3);
        conv(format!("trrm.dec{j}.res1"), w(j), w(j), 3);
        conv(format!("trrm.dec{j}.res2"), w(j), w(j), 3);
    }
    conv("sam.c1".into(), w(0), w(0), 3);
    conv("sam.c2".into(), 3, w(0), 3);
    conv("sam.c3".into(), w(0), 3, 3);
    conv("conv_out".into(), 3, w(0), 3);
    specs
}

/// Learnable tensors together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub params: ParamStore<f32>,
}

impl ModelParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in param_specs(arch) {
            let t = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[1] * shape[2] * shape[3];
                Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Self { arch: *arch, params })
    }

    /// Checks that `params` holds exactly the tensors `arch` expects.
    pub fn from_store(arch: &ArchConfig, params: ParamStore<f32>) -> Result<Self, NetError> {
        arch.validate()?;
        let specs = param_specs(arch);
        if specs.len() != params.len() {
            return Err(NetError::ArchMismatch(format!(
                "expected {} tensors, checkpoint has {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape) in &specs {
            match params.get(name) {
                None => return Err(NetError::ArchMismatch(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(NetError::ArchMismatch(format!("{name}: shape {:?}, expected {shape:?}", t.shape())))
                }
                Some(t) if !t.all_finite() => return Err(NetError::NonFiniteParam(name.clone())),
                _ => {}
            }
        }
        Ok(Self { arch: *arch, params })
    }

    pub fn numel(&self) -> usize {
        self.params.numel()
    }

    /// Zeroes the output convolution, making the network the identity on its blurred input.
    pub fn zero_output(&mut self) {
        for name in ["conv_out.w", "conv_out.b"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Writes the tensors to `path` and the architecture to [`arch_path`]`(path)`.
    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        write_checkpoint(path, &self.params)?;
        let json = serde_json::to_string_pretty(&self.arch).map_err(|e| NetError::Arch(e.to_string()))?;
        std::fs::write(arch_path(path), json).map_err(|e| NetError::Io(e.to_string()))?;
        Ok(())
    }

    /// Reads a checkpoint and its architecture sidecar.
    pub fn load(path: &Path) -> Result<Self, NetError> {
        let side = arch_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| NetError::Io(format!("{}: {e}", side.display())))?;
        let arch: ArchConfig = serde_json::from_str(&text).map_err(|e| NetError::Arch(format!("{}: {e}", side.display())))?;
        Self::from_store(&arch, read_checkpoint(path)?)
    }

    /// Reads a checkpoint and requires its architecture to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ArchConfig) -> Result<Self, NetError> {
        let m = Self::load(path)?;
        if m.arch != *expected {
            return Err(NetError::ArchMismatch(format!("checkpoint has {:?}, expected {:?}", m.arch, expected)));
        }
        Ok(m)
    }
}

/// Location of the architecture JSON stored next to a checkpoint.
pub fn arch_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".arch.json");
    PathBuf::from(s)
}
