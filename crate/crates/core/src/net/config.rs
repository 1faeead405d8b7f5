use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::NetError;

/// Network shape and branch switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub n_scales: usize,
    pub td_channels_in: usize,
    pub sd_channels_in: usize,
    pub rgb_channels_in: usize,
    pub leaky_slope: f64,
    pub use_sd: bool,
    pub use_td: bool,
    pub use_ccf: bool,
    pub use_trrm: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n_scales: 3,
            td_channels_in: 1,
            sd_channels_in: 2,
            rgb_channels_in: 3,
            leaky_slope: 0.1,
            use_sd: true,
            use_td: true,
            use_ccf: true,
            use_trrm: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Arch(m));
        if self.n_scales < 2 || self.n_scales > 6 {
            return bad(format!("n_scales must be in 2..=6, got {}", self.n_scales));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if (self.td_channels_in, self.sd_channels_in, self.rgb_channels_in) != (1, 2, 3) {
            return bad("input channels are fixed at td=1, sd=2, rgb=3".into());
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return bad(format!("leaky_slope must be in [0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Channel width at scale `j`.
    pub fn width(&self, j: usize) -> usize {
        self.base_channels << j
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.n_scales - 1)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        let (sd, td, ccf, trrm) = ablation.flags();
        self.use_sd = sd;
        self.use_td = td;
        self.use_ccf = ccf;
        self.use_trrm = trrm;
        self
    }

    pub fn ablation(&self) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.flags() == (self.use_sd, self.use_td, self.use_ccf, self.use_trrm))
    }
}

/// Named branch configurations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoSd,
    NoTd,
    RgbOnly,
    NoCcf,
    NoTrrm,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Self::Full, Self::NoSd, Self::NoTd, Self::RgbOnly, Self::NoCcf, Self::NoTrrm];

    /// `(use_sd, use_td, use_ccf, use_trrm)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Self::Full => (true, true, true, true),
            Self::NoSd => (false, true, true, true),
            Self::NoTd => (true, false, true, true),
            Self::RgbOnly => (false, false, true, true),
            Self::NoCcf => (true, true, false, true),
            Self::NoTrrm => (true, true, true, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoSd => "no-sd",
            Self::NoTd => "no-td",
            Self::RgbOnly => "rgb-only",
            Self::NoCcf => "no-ccf",
            Self::NoTrrm => "no-trrm",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| NetError::Arch(format!("unknown ablation {s:?}")))
    }
}

/// Applies ablation flags to an architecture.
pub fn ablate(arch: &ArchConfig, ablation: Ablation) -> ArchConfig {
    arch.with_ablation(ablation)
}
