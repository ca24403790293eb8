//! Generator variants and the conditional patch critic.
//!
//! Layer plans are derived from a [`ModelConfig`]; weights live in a
//! [`ParamStore`] and are bound onto a tape for each forward pass.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2dParams, FusionUnit, NormParams, ResidualBlockParams, LEAKY_SLOPE, NORM_EPS};
use crate::params::{Bound, ParamStore};

/// Kernel, stride and padding of every resolution-changing layer.
const SAMPLE_KERNEL: usize = 4;
const SAMPLE_STRIDE: usize = 2;
const SAMPLE_PAD: usize = 1;
/// Fixed scale count of the U-Net family once the input is large enough.
const UNET_SCALES: usize = 5;
const HEAD_KERNEL: usize = 3;

/// The six generator structures compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorVariant {
    /// Two scales of local features.
    G2,
    UNet,
    /// U-Net with residual blocks in the encoder.
    UNetRB,
    /// U-Net with global feature fusion on every skip.
    UNetGF,
    /// Full-depth encoder with residual blocks, no fusion.
    OursNoGF,
    /// Full-depth encoder, residual blocks and global fusion.
    Ours,
}

/// Where the global feature comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalSource {
    /// The 1x1 bottleneck itself.
    Bottleneck,
    /// Spatial mean of the deepest feature map.
    MeanPool,
}

impl GeneratorVariant {
    pub const ALL: [GeneratorVariant; 6] = [
        GeneratorVariant::G2,
        GeneratorVariant::UNet,
        GeneratorVariant::UNetRB,
        GeneratorVariant::UNetGF,
        GeneratorVariant::OursNoGF,
        GeneratorVariant::Ours,
    ];

    /// Display label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            GeneratorVariant::G2 => "G-2",
            GeneratorVariant::UNet => "U-Net",
            GeneratorVariant::UNetRB => "UNet+RB",
            GeneratorVariant::UNetGF => "UNet+GF",
            GeneratorVariant::OursNoGF => "Ours-GF",
            GeneratorVariant::Ours => "Ours",
        }
    }

    /// Identifier used in config files and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            GeneratorVariant::G2 => "g2",
            GeneratorVariant::UNet => "unet",
            GeneratorVariant::UNetRB => "unet-rb",
            GeneratorVariant::UNetGF => "unet-gf",
            GeneratorVariant::OursNoGF => "ours-no-gf",
            GeneratorVariant::Ours => "ours",
        }
    }

    pub fn scales(self, input_size: usize) -> usize {
        let full = input_size.max(1).ilog2() as usize;
        match self {
            GeneratorVariant::G2 => 2,
            GeneratorVariant::UNet | GeneratorVariant::UNetRB | GeneratorVariant::UNetGF => {
                if input_size >= 32 {
                    UNET_SCALES
                } else {
                    full
                }
            }
            GeneratorVariant::OursNoGF | GeneratorVariant::Ours => full,
        }
    }

    pub fn residual(self) -> bool {
        matches!(
            self,
            GeneratorVariant::UNetRB | GeneratorVariant::OursNoGF | GeneratorVariant::Ours
        )
    }

    pub fn global_source(self) -> Option<GlobalSource> {
        match self {
            GeneratorVariant::UNetGF => Some(GlobalSource::MeanPool),
            GeneratorVariant::Ours => Some(GlobalSource::Bottleneck),
            _ => None,
        }
    }
}

impl fmt::Display for GeneratorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for GeneratorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', '+'], "-");
        GeneratorVariant::ALL
            .into_iter()
            .find(|v| v.key() == norm || v.label().to_ascii_lowercase().replace('+', "-") == norm)
            .ok_or_else(|| Error::Config(format!("unknown generator variant `{s}`")))
    }
}

/// Which architecture to build and at which size.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input resolution, a power of two.
    pub input_size: usize,
    pub in_channels: usize,
    /// Channels at the first scale; doubled per scale up to `max_channels`.
    pub base_channels: usize,
    /// Channel cap; the width of the global feature.
    pub max_channels: usize,
    /// Number of stride-2 blocks in the critic.
    pub disc_layers: usize,
    pub variant: GeneratorVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 32,
            in_channels: 3,
            base_channels: 16,
            max_channels: 128,
            disc_layers: 3,
            variant: GeneratorVariant::Ours,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self, scale: usize) -> usize {
        (self.base_channels << scale.min(30)).min(self.max_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.input_size.is_power_of_two() || self.input_size < 2 {
            return bad(format!("input_size {} must be a power of two >= 2", self.input_size));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        let scales = self.variant.scales(self.input_size);
        if self.input_size < 1 << scales {
            return bad(format!(
                "input_size {} too small for {} ({} scales need at least {})",
                self.input_size,
                self.variant.label(),
                scales,
                1usize << scales
            ));
        }
        if self.disc_layers == 0 || self.input_size >> self.disc_layers == 0 {
            return bad(format!(
                "disc_layers {} invalid for input_size {}",
                self.disc_layers, self.input_size
            ));
        }
        Ok(())
    }
}

/// The multi-scale encoder/decoder generator.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: ModelConfig,
    scales: usize,
    residual: bool,
    global: Option<GlobalSource>,
}

impl Generator {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Generator {
            cfg: cfg.clone(),
            scales: cfg.variant.scales(cfg.input_size),
            residual: cfg.variant.residual(),
            global: cfg.variant.global_source(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    /// Side length of encoder stage `i`'s output.
    fn size(&self, i: usize) -> usize {
        self.cfg.input_size >> (i + 1)
    }

    /// Output channels of each encoder stage.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.scales).map(|i| self.cfg.channels(i)).collect()
    }

    fn skip_channels(&self, i: usize) -> usize {
        let c = self.cfg.channels(i);
        if self.global.is_some() {
            2 * c
        } else {
            c
        }
    }

    /// Fresh parameters: normal weights, zero biases, unit norm gains.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut p = ParamStore::new();
        let k = SAMPLE_KERNEL;
        let s = self.scales;
        for i in 0..s {
            let cin = if i == 0 { self.cfg.in_channels } else { self.cfg.channels(i - 1) };
            let c = self.cfg.channels(i);
            p.add_conv(&format!("enc{i}.conv"), cin, c, k, seed);
            if i > 0 && self.size(i) >= 2 {
                p.add_norm(&format!("enc{i}.norm"), c);
            }
            if self.residual {
                p.add_conv(&format!("enc{i}.res.conv1"), c, c, 3, seed);
                p.add_conv(&format!("enc{i}.res.conv2"), c, c, 3, seed);
                if self.size(i) >= 2 {
                    p.add_norm(&format!("enc{i}.res.norm1"), c);
                    p.add_norm(&format!("enc{i}.res.norm2"), c);
                }
            }
        }
        if self.global.is_some() {
            let cg = self.cfg.channels(s - 1);
            for i in 0..s - 1 {
                p.add_conv(&format!("fuse{i}.proj"), cg, self.cfg.channels(i), 1, seed);
            }
        }
        let mut d_ch = self.cfg.channels(s - 1);
        for j in (1..s).rev() {
            let c = self.cfg.channels(j - 1);
            p.add_conv_transpose(&format!("dec{j}.conv"), d_ch, c, k, seed);
            p.add_norm(&format!("dec{j}.norm"), c);
            d_ch = c + self.skip_channels(j - 1);
        }
        p.add_conv_transpose("out.conv", d_ch, self.cfg.in_channels, k, seed);
        p
    }

    /// Maps a `(N, C, H, W)` image batch in `[-1, 1]` to a batch of the same
    /// shape, bounded by the final tanh.
    pub fn forward(&self, tape: &Tape, params: &Bound, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        let want = [self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size];
        if xs.len() != 4 || xs[1..] != want {
            return Err(Error::invalid(
                "generator",
                format!("expected input (N, {}, {}, {}), got {xs:?}", want[0], want[1], want[2]),
            ));
        }
        let s = self.scales;
        let mut feats = Vec::with_capacity(s);
        let mut h = x;
        for i in 0..s {
            h = nn::conv2d(
                tape,
                h,
                &Conv2dParams::bind(params, &format!("enc{i}.conv"), SAMPLE_STRIDE, SAMPLE_PAD)?,
            )?;
            let norm = format!("enc{i}.norm");
            if params.has(&format!("{norm}.gain")) {
                let n = NormParams::bind(params, &norm)?;
                h = nn::instance_norm(tape, h, n.gain, n.shift, NORM_EPS)?;
            }
            h = nn::leaky_relu(tape, h, LEAKY_SLOPE)?;
            if self.residual {
                let rb = ResidualBlockParams::bind(params, &format!("enc{i}.res"))?;
                h = nn::residual_block(tape, h, &rb)?;
            }
            feats.push(h);
        }

        let bottleneck = feats[s - 1];
        let global = match self.global {
            None => None,
            Some(GlobalSource::Bottleneck) if self.size(s - 1) == 1 => Some(bottleneck),
            Some(_) => Some(nn::spatial_mean(tape, bottleneck)?),
        };
        let mut skips = Vec::with_capacity(s - 1);
        for (i, &f) in feats[..s - 1].iter().enumerate() {
            skips.push(match global {
                Some(g) => nn::fuse_global(tape, f, g, &FusionUnit::bind(params, &format!("fuse{i}"))?)?,
                None => f,
            });
        }

        let mut d = bottleneck;
        for j in (1..s).rev() {
            let mut u = nn::conv_transpose2d(
                tape,
                d,
                &Conv2dParams::bind(params, &format!("dec{j}.conv"), SAMPLE_STRIDE, SAMPLE_PAD)?,
            )?;
            let n = NormParams::bind(params, &format!("dec{j}.norm"))?;
            u = nn::instance_norm(tape, u, n.gain, n.shift, NORM_EPS)?;
            u = nn::relu(tape, u)?;
            d = tape.concat(&[u, skips[j - 1]])?;
        }
        let out = nn::conv_transpose2d(
            tape,
            d,
            &Conv2dParams::bind(params, "out.conv", SAMPLE_STRIDE, SAMPLE_PAD)?,
        )?;
        nn::tanh(tape, out)
    }
}

/// Conditional patch critic: scores `(condition, candidate)` pairs with an
/// unbounded per-patch map. No normalization layers, so each score depends
/// only on its receptive field.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: ModelConfig,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Discriminator { cfg: cfg.clone() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut p = ParamStore::new();
        let mut cin = 2 * self.cfg.in_channels;
        for i in 0..self.cfg.disc_layers {
            let c = self.cfg.channels(i);
            p.add_conv(&format!("disc{i}.conv"), cin, c, SAMPLE_KERNEL, seed);
            cin = c;
        }
        p.add_conv("head.conv", cin, 1, HEAD_KERNEL, seed);
        p
    }

    /// Spatial size of the patch map for the configured input.
    pub fn patch_grid(&self) -> usize {
        self.cfg.input_size >> self.cfg.disc_layers
    }

    /// Side length of the input window one patch score depends on.
    pub fn receptive_field(&self) -> usize {
        let mut field = HEAD_KERNEL;
        for _ in 0..self.cfg.disc_layers {
            field = (field - 1) * SAMPLE_STRIDE + SAMPLE_KERNEL;
        }
        field
    }

    /// Input rows (or columns) `[lo, hi]` seen by patch index `p`, possibly
    /// extending into the zero padding.
    pub fn receptive_window(&self, p: usize) -> (isize, isize) {
        let mut jump = 1isize;
        let mut offset = 0isize;
        for _ in 0..self.cfg.disc_layers {
            offset += SAMPLE_PAD as isize * jump;
            jump *= SAMPLE_STRIDE as isize;
        }
        offset += (HEAD_KERNEL as isize / 2) * jump;
        let lo = p as isize * jump - offset;
        (lo, lo + self.receptive_field() as isize - 1)
    }

    /// Patch scores `(N, 1, h_p, w_p)` for condition `x` and `candidate`.
    pub fn forward(&self, tape: &Tape, params: &Bound, x: Var, candidate: Var) -> Result<Var> {
        let (xs, cs) = (tape.shape(x), tape.shape(candidate));
        if xs.len() != 4 || cs.len() != 4 || xs[0] != cs[0] || xs[2..] != cs[2..] {
            return Err(Error::shape("discriminator", &xs, &cs));
        }
        if xs[1] + cs[1] != 2 * self.cfg.in_channels {
            return Err(Error::invalid(
                "discriminator",
                format!(
                    "input must have {} channels, got {}",
                    2 * self.cfg.in_channels,
                    xs[1] + cs[1]
                ),
            ));
        }
        let mut h = tape.concat(&[x, candidate])?;
        for i in 0..self.cfg.disc_layers {
            let conv = Conv2dParams::bind(params, &format!("disc{i}.conv"), SAMPLE_STRIDE, SAMPLE_PAD)?;
            h = nn::leaky_relu(tape, nn::conv2d(tape, h, &conv)?, LEAKY_SLOPE)?;
        }
        nn::conv2d(
            tape,
            h,
            &Conv2dParams::bind(params, "head.conv", 1, HEAD_KERNEL / 2)?,
        )
    }
}
