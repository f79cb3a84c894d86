use std::fmt;
use std::str::FromStr;

use crate::attention::{AttnFlavor, GateGranularity};
use crate::error::{Error, Result};

/// Architecture variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One full-resolution encoder-decoder with ungated positional axial layers.
    UnetLikeAxial,
    /// One full-resolution encoder-decoder with gated axial layers.
    GatedAxial,
    GlobalOnly,
    LocalOnly,
    /// Both branches, ungated positional attention everywhere.
    Logo,
    /// Gated global branch plus positional-free local branch.
    Medt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::UnetLikeAxial,
        Variant::GatedAxial,
        Variant::GlobalOnly,
        Variant::LocalOnly,
        Variant::Logo,
        Variant::Medt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::UnetLikeAxial => "unet_like_axial",
            Variant::GatedAxial => "gated_axial",
            Variant::GlobalOnly => "global_only",
            Variant::LocalOnly => "local_only",
            Variant::Logo => "logo",
            Variant::Medt => "medt",
        }
    }

    pub fn uses_global(self) -> bool {
        matches!(self, Variant::GlobalOnly | Variant::Logo | Variant::Medt)
    }

    pub fn uses_local(self) -> bool {
        matches!(self, Variant::LocalOnly | Variant::Logo | Variant::Medt)
    }

    pub fn uses_single(self) -> bool {
        matches!(self, Variant::UnetLikeAxial | Variant::GatedAxial)
    }

    pub(crate) fn global_flavor(self) -> AttnFlavor {
        match self {
            Variant::Logo => AttnFlavor::Positional,
            _ => AttnFlavor::Gated,
        }
    }

    pub(crate) fn local_flavor(self) -> AttnFlavor {
        match self {
            Variant::Logo => AttnFlavor::Positional,
            _ => AttnFlavor::Plain,
        }
    }

    pub(crate) fn single_flavor(self) -> AttnFlavor {
        match self {
            Variant::GatedAxial => AttnFlavor::Gated,
            _ => AttnFlavor::Positional,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Variant::UnetLikeAxial),
            _ => Variant::ALL
                .into_iter()
                .find(|v| v.name() == s)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown variant {s:?} (expected one of axial, {})",
                        Variant::ALL.map(|v| v.name()).join(", ")
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub img_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub heads: usize,
    pub global_depth: usize,
    pub local_depth: usize,
    pub patch_grid: usize,
    pub gate_granularity: GateGranularity,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Medt,
            img_size: 64,
            in_channels: 1,
            base_channels: 8,
            heads: 8,
            global_depth: 2,
            local_depth: 5,
            patch_grid: 4,
            gate_granularity: GateGranularity::PerLayer,
            seed: 0,
        }
    }
}

/// Smallest accepted image side.
pub const MIN_IMG_SIZE: usize = 16;
/// Smallest accepted local-branch patch side.
pub const MIN_PATCH_SIZE: usize = 8;
/// Spatial sides at or below this are not downsampled further.
pub const MIN_DOWNSAMPLED: usize = 4;
/// Channel cap as a multiple of `base_channels`.
pub const MAX_WIDTH_FACTOR: usize = 8;

/// Per-stage resolutions and widths of one encoder stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    /// `sizes[0]` is the input side, `sizes[s]` the output side of stage `s`.
    pub sizes: Vec<usize>,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl StagePlan {
    pub fn new(input: usize, base: usize, depth: usize) -> Self {
        let mut plan = StagePlan {
            sizes: vec![input],
            channels: vec![base],
            strides: Vec::new(),
        };
        for s in 1..=depth {
            let size = plan.sizes[s - 1];
            let stride = if size > MIN_DOWNSAMPLED { 2 } else { 1 };
            plan.strides.push(stride);
            plan.sizes.push(size.div_ceil(stride));
            plan.channels.push(base * (1usize << s.min(3)).min(MAX_WIDTH_FACTOR));
        }
        plan
    }
}

impl ModelConfig {
    /// Keys accepted by [`ModelConfig::set`].
    pub const KEYS: [&'static str; 10] = [
        "variant",
        "img_size",
        "in_channels",
        "base_channels",
        "heads",
        "global_depth",
        "local_depth",
        "patch_grid",
        "gate_granularity",
        "seed",
    ];

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn patch_size(&self) -> usize {
        self.img_size / self.patch_grid.max(1)
    }

    pub fn global_plan(&self) -> StagePlan {
        StagePlan::new(self.img_size, self.base_channels, self.global_depth)
    }

    pub fn local_plan(&self) -> StagePlan {
        StagePlan::new(self.patch_size(), self.base_channels, self.local_depth)
    }

    /// Plan of the single encoder-decoder used by the axial variants.
    pub fn single_plan(&self) -> StagePlan {
        StagePlan::new(self.img_size, self.base_channels, self.local_depth)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.img_size < MIN_IMG_SIZE || !self.img_size.is_power_of_two() {
            return fail(format!(
                "img_size {} must be a power of two and at least {MIN_IMG_SIZE}",
                self.img_size
            ));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.heads == 0 {
            return fail("in_channels, base_channels and heads must be positive".into());
        }
        if self.patch_grid == 0 || self.img_size % self.patch_grid != 0 {
            return fail(format!(
                "img_size {} is not divisible by patch_grid {}",
                self.img_size, self.patch_grid
            ));
        }
        if self.patch_size() < MIN_PATCH_SIZE {
            return fail(format!(
                "patch size {} is below the minimum of {MIN_PATCH_SIZE}",
                self.patch_size()
            ));
        }
        let mut plans = Vec::new();
        if self.variant.uses_global() {
            plans.push(("global_depth", self.global_depth, self.global_plan()));
        }
        if self.variant.uses_local() {
            plans.push(("local_depth", self.local_depth, self.local_plan()));
        }
        if self.variant.uses_single() {
            plans.push(("local_depth", self.local_depth, self.single_plan()));
        }
        for (key, depth, plan) in plans {
            if depth == 0 {
                return fail(format!("{key} must be at least 1 for variant {}", self.variant));
            }
            if let Some(c) = plan.channels[1..].iter().find(|&&c| c % self.heads != 0) {
                return fail(format!("heads {} does not divide attention width {c}", self.heads));
            }
        }
        Ok(())
    }

    /// Apply one `key=value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "variant" => self.variant = value.parse()?,
            "gate_granularity" => {
                self.gate_granularity = GateGranularity::parse(value).ok_or_else(|| {
                    Error::Config(format!("gate_granularity must be per_layer or per_head, got {value:?}"))
                })?
            }
            "img_size" => self.img_size = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "global_depth" => self.global_depth = parse(key, value)?,
            "local_depth" => self.local_depth = parse(key, value)?,
            "patch_grid" => self.patch_grid = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every setting as `(key, value)`, in [`ModelConfig::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.name().to_string()),
            ("img_size", self.img_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("heads", self.heads.to_string()),
            ("global_depth", self.global_depth.to_string()),
            ("local_depth", self.local_depth.to_string()),
            ("patch_grid", self.patch_grid.to_string()),
            ("gate_granularity", self.gate_granularity.name().to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

pub(crate) fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}
