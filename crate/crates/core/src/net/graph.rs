use super::{ArchConfig, NetError};
use crate::autograd::{ParamStore, ParamVars, Scalar, Tape, Tensor, Var};

/// Multi-scale features, finest scale first.
pub type FeaturePyramid = Vec<Var>;

/// The network's parameters bound to a tape.
pub struct Net<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub vars: ParamVars,
    pub arch: ArchConfig,
}

impl<'t, T: Scalar> Net<'t, T> {
    /// Registers `params` on `tape`.
    pub fn bind(tape: &'t Tape<T>, params: &ParamStore<T>, arch: &ArchConfig, requires_grad: bool) -> Self {
        Self { tape, vars: params.register(tape, requires_grad), arch: *arch }
    }

    pub fn from_vars(tape: &'t Tape<T>, vars: ParamVars, arch: &ArchConfig) -> Self {
        Self { tape, vars, arch: *arch }
    }

    fn var(&self, name: &str) -> Result<Var, NetError> {
        self.vars.get(name).ok_or_else(|| NetError::ArchMismatch(format!("missing tensor {name}")))
    }

    pub fn conv(&self, name: &str, x: Var, stride: usize) -> Result<Var, NetError> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        Ok(self.tape.conv2d(x, w, b, stride)?)
    }

    fn act(&self, x: Var) -> Result<Var, NetError> {
        Ok(self.tape.leaky_relu(x, self.arch.leaky_slope)?)
    }

    fn conv_act(&self, name: &str, x: Var, stride: usize) -> Result<Var, NetError> {
        let y = self.conv(name, x, stride)?;
        self.act(y)
    }

    /// `x + conv2(act(conv1(x)))`.
    fn res_block(&self, prefix: &str, x: Var) -> Result<Var, NetError> {
        let h = self.conv_act(&format!("{prefix}.res1"), x, 1)?;
        let h = self.conv(&format!("{prefix}.res2"), h, 1)?;
        Ok(self.tape.add(x, h)?)
    }

    fn check_extent(&self, x: Var) -> Result<(), NetError> {
        let s = self.tape.shape(x);
        let m = self.arch.spatial_multiple();
        if s.len() != 4 || s[2] % m != 0 || s[3] % m != 0 {
            return Err(NetError::Input(format!("input {s:?} must be [B, C, H, W] with H, W multiples of {m}")));
        }
        Ok(())
    }

    fn encode(&self, prefix: &str, x: Var) -> Result<FeaturePyramid, NetError> {
        self.check_extent(x)?;
        let mut h = self.conv_act(&format!("{prefix}.stem"), x, 1)?;
        let mut out = Vec::with_capacity(self.arch.n_scales);
        for j in 0..self.arch.n_scales {
            if j > 0 {
                h = self.conv_act(&format!("{prefix}.s{j}.down"), h, 2)?;
            }
            h = self.res_block(&format!("{prefix}.s{j}"), h)?;
            out.push(self.conv(&format!("{prefix}.s{j}.proj"), h, 1)?);
        }
        Ok(out)
    }

    /// Spatial-difference encoder on `[B, 2, H, W]`.
    pub fn encode_sd(&self, sd: Var) -> Result<FeaturePyramid, NetError> {
        self.encode("sd_enc", sd)
    }

    /// Temporal-difference encoder on `[B, 1, H, W]`; the same weights serve every step.
    pub fn encode_td(&self, td: Var) -> Result<FeaturePyramid, NetError> {
        self.encode("td_enc", td)
    }

    /// Zero features standing in for a disabled branch.
    pub fn zero_pyramid(&self, batch: usize, height: usize, width: usize) -> FeaturePyramid {
        (0..self.arch.n_scales)
            .map(|j| self.tape.constant(Tensor::zeros(&[batch, self.arch.width(j), height >> j, width >> j])))
            .collect()
    }

    fn cross(&self, prefix: &str, x: Var, kv: Var) -> Result<Var, NetError> {
        let q = self.conv(&format!("{prefix}.q"), x, 1)?;
        let k = self.conv(&format!("{prefix}.k"), kv, 1)?;
        let v = self.conv(&format!("{prefix}.v"), kv, 1)?;
        let a = self.tape.spatial_attention(q, k, v)?;
        Ok(self.tape.add(a, x)?)
    }

    /// Two cascaded residual cross-attentions: encoder features attend to TD, then to SD.
    pub fn ccf_fuse(&self, j: usize, enc: Var, td: Var, sd: Var) -> Result<Var, NetError> {
        let (se, st, ss) = (self.tape.shape(enc), self.tape.shape(td), self.tape.shape(sd));
        if se != st || se != ss {
            return Err(NetError::Input(format!("fusion shapes {se:?}, {st:?}, {ss:?}")));
        }
        let f = self.cross(&format!("trrm.ccf{j}.td"), enc, td)?;
        self.cross(&format!("trrm.ccf{j}.sd"), f, sd)
    }

    /// Concatenation followed by two 3x3 convolutions, replacing the attention fusion.
    pub fn concat_fuse(&self, j: usize, enc: Var, td: Var, sd: Var) -> Result<Var, NetError> {
        let cat = self.tape.concat(&[enc, td, sd])?;
        let h = self.conv_act(&format!("trrm.cat{j}.c1"), cat, 1)?;
        self.conv(&format!("trrm.cat{j}.c2"), h, 1)
    }

    /// `r + C1(r) * sigmoid(C3(C2(r) + b))`.
    pub fn sam(&self, r: Var, b: Var) -> Result<Var, NetError> {
        let img = self.conv("sam.c2", r, 1)?;
        let img = self.tape.add(img, b)?;
        let a = self.conv("sam.c3", img, 1)?;
        let a = self.tape.sigmoid(a)?;
        let f = self.conv("sam.c1", r, 1)?;
        let g = self.tape.mul(f, a)?;
        Ok(self.tape.add(r, g)?)
    }

    /// Shallow RGB embedding.
    pub fn embed_rgb(&self, b: Var) -> Result<Var, NetError> {
        self.conv("rgb_embed", b, 1)
    }

    /// One pass of the recurrent encoder-decoder.
    pub fn trrm_step(&self, r_prime: Var, b_enc: Var, td: &[Var], sd: &[Var]) -> Result<Var, NetError> {
        let n = self.arch.n_scales;
        if td.len() != n || sd.len() != n {
            return Err(NetError::Input(format!("pyramids of depth {} and {}, expected {n}", td.len(), sd.len())));
        }
        let entry = self.tape.concat(&[r_prime, b_enc])?;
        let mut e = self.conv("trrm.entry", entry, 1)?;
        let mut skips = Vec::with_capacity(n);
        for j in 0..n {
            if j > 0 {
                e = self.conv_act(&format!("trrm.enc{j}.down"), e, 2)?;
            }
            e = self.res_block(&format!("trrm.enc{j}"), e)?;
            e = if self.arch.use_ccf { self.ccf_fuse(j, e, td[j], sd[j])? } else { self.concat_fuse(j, e, td[j], sd[j])? };
            skips.push(e);
        }
        let mut g = skips[n - 1];
        for j in (0..n - 1).rev() {
            let up = self.tape.upsample2x(g)?;
            let up = self.conv_act(&format!("trrm.up{j}"), up, 1)?;
            g = self.tape.add(up, skips[j])?;
            g = self.res_block(&format!("trrm.dec{j}"), g)?;
        }
        Ok(g)
    }

    /// Full network on `[B, 3, H, W]` blur, `[B, 2, H, W]` SD and `N - 1` TDs of `[B, 1, H, W]`.
    ///
    /// Returns the unclamped restoration `b + conv_out(R)`.
    pub fn forward(&self, b: Var, sd: Var, tds: &[Var]) -> Result<Var, NetError> {
        if tds.is_empty() {
            return Err(NetError::Input("at least one temporal difference is required".into()));
        }
        self.check_extent(b)?;
        let shape = self.tape.shape(b);
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let b_enc = self.embed_rgb(b)?;
        let sd_pyr = if self.arch.use_sd { self.encode_sd(sd)? } else { self.zero_pyramid(batch, h, w) };
        let steps: &[Var] = if self.arch.use_trrm { tds } else { std::slice::from_ref(&tds[(tds.len() - 1) / 2]) };
        let zero_td = if self.arch.use_td { None } else { Some(self.zero_pyramid(batch, h, w)) };
        let mut r = self.tape.constant(Tensor::zeros(&[batch, self.arch.width(0), h, w]));
        for &td in steps {
            let td_pyr = match &zero_td {
                Some(z) => z.clone(),
                None => self.encode_td(td)?,
            };
            let r_prime = self.sam(r, b)?;
            r = self.trrm_step(r_prime, b_enc, &td_pyr, &sd_pyr)?;
        }
        let out = self.conv("conv_out", r, 1)?;
        Ok(self.tape.add(b, out)?)
    }
}
