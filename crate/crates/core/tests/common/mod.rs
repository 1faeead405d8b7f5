//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use cvs_deblur::autograd::{grad_check, GradCheckOptions, GradCheckReport, ParamVars, Scalar, ScalarFn, Tape, Tensor, TensorError, Var};
use cvs_deblur::net::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

pub fn random_input<T: Scalar>(rng: &mut ChaCha8Rng, n_td: usize, h: usize, w: usize) -> NetInput<T> {
    let unit = |rng: &mut ChaCha8Rng, c: usize| {
        let d = (0..c * h * w).map(|_| T::of(rng.gen_range(0.0..1.0))).collect();
        Tensor::new(&[1, c, h, w], d).unwrap()
    };
    NetInput {
        blur: unit(rng, 3),
        sd: Tensor::uniform(&[1, 2, h, w], 0.5, rng),
        tds: (0..n_td).map(|_| Tensor::uniform(&[1, 1, h, w], 0.5, rng)).collect(),
    }
}

pub fn randomized(arch: &ArchConfig, seed: u64) -> ModelParams {
    // Non-zero biases so every branch carries signal.
    let mut m = ModelParams::init(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
    for (name, t) in m.params.iter_mut() {
        if name.ends_with(".b") {
            *t = Tensor::uniform(t.shape(), 0.1, &mut rng);
        }
    }
    m
}

#[derive(Clone, Copy, Debug)]
pub enum OpKind {
    Conv3,
    Conv3Stride2,
    Conv1,
    LeakyRelu,
    Sigmoid,
    Mul,
    Sub,
    Concat,
    Narrow,
    Upsample,
    Crop,
    TokenAttention,
    SpatialAttention,
    PsnrLoss,
}

/// `mean(op(params) * probe)`; the random probe makes every output coordinate matter.
/// For the loss the probe is the target.
pub struct OpUnderTest {
    pub kind: OpKind,
    pub probe: Tensor<f64>,
}

impl ScalarFn for OpUnderTest {
    fn eval<S: Scalar>(&self, t: &Tape<S>, p: &[Var]) -> Result<Var, TensorError> {
        let y = match self.kind {
            OpKind::Conv3 | OpKind::Conv1 => t.conv2d(p[0], p[1], p[2], 1)?,
            OpKind::Conv3Stride2 => t.conv2d(p[0], p[1], p[2], 2)?,
            OpKind::LeakyRelu => t.leaky_relu(p[0], 0.1)?,
            OpKind::Sigmoid => t.sigmoid(p[0])?,
            OpKind::Mul => t.mul(p[0], p[1])?,
            OpKind::Sub => t.sub(p[0], p[1])?,
            OpKind::Concat => t.concat(&[p[0], p[1]])?,
            OpKind::Narrow => t.narrow(p[0], 1, 2)?,
            OpKind::Upsample => t.upsample2x(p[0])?,
            OpKind::Crop => t.crop(p[0], 1, 2, 5, 4)?,
            OpKind::TokenAttention => t.attention(p[0], p[1], p[2])?,
            OpKind::SpatialAttention => t.spatial_attention(p[0], p[1], p[2])?,
            OpKind::PsnrLoss => {
                return t.psnr_loss(p[0], &self.probe.cast(), 0.5, 1e-8);
            }
        };
        let probe = t.constant(self.probe.cast());
        let m = t.mul(y, probe)?;
        t.mean(m)
    }
}

/// Random operands of `kind` on `hw x hw` images, plus the output shape.
pub fn case(kind: OpKind, rng: &mut ChaCha8Rng, hw: usize) -> (Vec<Tensor<f64>>, Vec<usize>) {
    let c = rng.gen_range(1..=4);
    let img = |rng: &mut ChaCha8Rng, c: usize| rand_tensor(rng, &[1, c, hw, hw]);
    let half = hw / 2;
    match kind {
        OpKind::Conv3 | OpKind::Conv3Stride2 => {
            let co = rng.gen_range(1..=4);
            let params = vec![img(rng, c), rand_tensor(rng, &[co, c, 3, 3]), rand_tensor(rng, &[co])];
            let side = if matches!(kind, OpKind::Conv3) { hw } else { half };
            (params, vec![1, co, side, side])
        }
        OpKind::Conv1 => {
            let co = rng.gen_range(1..=4);
            (vec![img(rng, c), rand_tensor(rng, &[co, c, 1, 1]), rand_tensor(rng, &[co])], vec![1, co, hw, hw])
        }
        OpKind::LeakyRelu | OpKind::Sigmoid => (vec![img(rng, c).map(|v| v * 3.0)], vec![1, c, hw, hw]),
        OpKind::Mul | OpKind::Sub => (vec![img(rng, c), img(rng, c)], vec![1, c, hw, hw]),
        OpKind::Concat => (vec![img(rng, c), img(rng, 2)], vec![1, c + 2, hw, hw]),
        OpKind::Narrow => (vec![img(rng, 4)], vec![1, 2, hw, hw]),
        OpKind::Upsample => (vec![img(rng, c)], vec![1, c, 2 * hw, 2 * hw]),
        OpKind::Crop => (vec![img(rng, c)], vec![1, c, 5, 4]),
        OpKind::TokenAttention => {
            let (l, m, d) = (rng.gen_range(2..6), rng.gen_range(2..6), c + 1);
            (vec![rand_tensor(rng, &[2, l, d]), rand_tensor(rng, &[2, m, d]), rand_tensor(rng, &[2, m, d])], vec![2, l, d])
        }
        OpKind::SpatialAttention => {
            let k = rand_tensor(rng, &[1, c, half, half]);
            (vec![img(rng, c), k, rand_tensor(rng, &[1, c, half, half])], vec![1, c, hw, hw])
        }
        OpKind::PsnrLoss => (vec![img(rng, c)], vec![1, c, hw, hw]),
    }
}


pub const ALL_OPS: [OpKind; 14] = [
    OpKind::Conv3,
    OpKind::Conv3Stride2,
    OpKind::Conv1,
    OpKind::LeakyRelu,
    OpKind::Sigmoid,
    OpKind::Mul,
    OpKind::Sub,
    OpKind::Concat,
    OpKind::Narrow,
    OpKind::Upsample,
    OpKind::Crop,
    OpKind::TokenAttention,
    OpKind::SpatialAttention,
    OpKind::PsnrLoss,
];

pub const ALL_BLOCKS: [BlockKind; 6] =
    [BlockKind::SdEncoder, BlockKind::TdEncoder, BlockKind::Ccf, BlockKind::Sam, BlockKind::TrrmStep, BlockKind::Full];

/// The network or one of its blocks, evaluated from a flat parameter list.
pub struct Block {
    arch: ArchConfig,
    names: Vec<String>,
    input: NetInput<f64>,
    target: Tensor<f64>,
    kind: BlockKind,
}

#[derive(Clone, Copy, Debug)]
pub enum BlockKind {
    SdEncoder,
    TdEncoder,
    Ccf,
    Sam,
    TrrmStep,
    Full,
}

impl Block {
    pub fn new(arch: ArchConfig, kind: BlockKind, seed: u64, n_td: usize) -> (Self, Vec<Tensor<f64>>) {
        let m = randomized(&arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let input = random_input::<f64>(&mut rng, n_td, 16, 16);
        let target = random_input::<f64>(&mut rng, 1, 16, 16).blur;
        let names: Vec<String> = m.params.names().cloned().collect();
        let params = m.params.iter().map(|(_, t)| t.cast()).collect();
        (Self { arch, names, input, target, kind }, params)
    }

    fn probe_mean<S: Scalar>(t: &Tape<S>, x: Var, seed: u64) -> Result<Var, TensorError> {
        let shape = t.shape(x);
        let probe = Tensor::<f64>::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let p = t.constant(probe.cast());
        let y = t.mul(x, p)?;
        t.mean(y)
    }
}

impl ScalarFn for Block {
    fn eval<S: Scalar>(&self, t: &Tape<S>, p: &[Var]) -> Result<Var, TensorError> {
        let vars: ParamVars = self.names.iter().cloned().zip(p.iter().copied()).collect();
        let net = Net::from_vars(t, vars, &self.arch);
        let err = |e: NetError| match e {
            NetError::Tensor(t) => t,
            other => TensorError::Unsupported(other.to_string()),
        };
        let c = |x: &Tensor<f64>| t.constant(x.cast());
        let sum_pyr = |pyr: Vec<Var>| -> Result<Var, TensorError> {
            let mut acc = Self::probe_mean(t, pyr[0], 0)?;
            for (j, &f) in pyr.iter().enumerate().skip(1) {
                let m = Self::probe_mean(t, f, j as u64)?;
                acc = t.add(acc, m)?;
            }
            Ok(acc)
        };
        match self.kind {
            BlockKind::SdEncoder => sum_pyr(net.encode_sd(c(&self.input.sd)).map_err(err)?),
            BlockKind::TdEncoder => sum_pyr(net.encode_td(c(&self.input.tds[0])).map_err(err)?),
            BlockKind::Ccf => {
                let td = net.encode_td(c(&self.input.tds[0])).map_err(err)?;
                let sd = net.encode_sd(c(&self.input.sd)).map_err(err)?;
                let b = net.embed_rgb(c(&self.input.blur)).map_err(err)?;
                let out = net.ccf_fuse(0, b, td[0], sd[0]).map_err(err)?;
                Self::probe_mean(t, out, 7)
            }
            BlockKind::Sam => {
                let r = net.embed_rgb(c(&self.input.blur)).map_err(err)?;
                let out = net.sam(r, c(&self.input.blur)).map_err(err)?;
                Self::probe_mean(t, out, 8)
            }
            BlockKind::TrrmStep => {
                let b = c(&self.input.blur);
                let b_enc = net.embed_rgb(b).map_err(err)?;
                let td = net.encode_td(c(&self.input.tds[0])).map_err(err)?;
                let sd = net.encode_sd(c(&self.input.sd)).map_err(err)?;
                let rp = net.sam(b_enc, b).map_err(err)?;
                let out = net.trrm_step(rp, b_enc, &td, &sd).map_err(err)?;
                Self::probe_mean(t, out, 9)
            }
            BlockKind::Full => {
                let out = forward_tensors(t, &net, &self.input.cast()).map_err(err)?;
                t.psnr_loss(out, &self.target.cast(), 0.5, 1e-8)
            }
        }
    }
}

trait CastInput {
    fn cast<S: Scalar>(&self) -> NetInput<S>;
}

impl CastInput for NetInput<f64> {
    fn cast<S: Scalar>(&self) -> NetInput<S> {
        NetInput { blur: self.blur.cast(), sd: self.sd.cast(), tds: self.tds.iter().map(|t| t.cast()).collect() }
    }
}

/// f64 and f32 gradient checks of one block on 16x16 inputs with two TD frames.
pub fn block_reports(kind: BlockKind, base: usize, seed: u64, probes: usize) -> (GradCheckReport, GradCheckReport) {
    let arch = ArchConfig { base_channels: base, ..Default::default() };
    let (block, params) = Block::new(arch, kind, seed, 2);
    let opts = GradCheckOptions { h: 1e-6, probes, seed, ..Default::default() };
    let r64 = grad_check::<f64, _>(&block, &params, opts).unwrap();
    let r32 = grad_check::<f32, _>(&block, &params, opts).unwrap();
    (r64, r32)
}

/// f64 gradient check of one primitive op.
pub fn op_report(kind: OpKind, seed: u64, hw: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + kind as u64);
    let (params, out_shape) = case(kind, &mut rng, hw);
    let probe = rand_tensor(&mut rng, &out_shape);
    let f = OpUnderTest { kind, probe };
    let opts = GradCheckOptions { h: 1e-6, probes: 24, seed, ..Default::default() };
    grad_check::<f64, _>(&f, &params, opts).unwrap()
}
