//! Model configuration: channel widths, stage layout, unpooling mode, and
//! the flat key-value config file format.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The paper's quality-weight ladder, kept verbatim so RD sweeps are
/// shape-comparable across scales.
pub const LAMBDA_GRID: [f64; 8] = [0.0005, 0.0018, 0.0067, 0.0130, 0.025, 0.0483, 0.0932, 0.18];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnpoolMode {
    PixelShuffle,
    TransposedConv,
}

impl UnpoolMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            UnpoolMode::PixelShuffle => "shuffle",
            UnpoolMode::TransposedConv => "tconv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shuffle" => Ok(UnpoolMode::PixelShuffle),
            "tconv" => Ok(UnpoolMode::TransposedConv),
            other => Err(Error::Config(format!("unknown unpool mode '{other}'"))),
        }
    }
}

/// Structural description of the codec networks. Everything the graphs
/// build from lives here, so architecture variants are data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Backbone width N.
    pub backbone: usize,
    /// Latent width M.
    pub latent: usize,
    pub unpool: UnpoolMode,
    /// Hop count of the up/down stages (1 or 2).
    pub hops: usize,
    /// Number of downsampling stages in the image encoder.
    pub stages: usize,
    /// Residual blocks after each non-final stage.
    pub rbs_per_stage: usize,
    /// Include the two attention placements.
    pub attention: bool,
    /// Downsample by conv + average-pool over children instead of strided
    /// evaluation at child-0 pixels.
    pub pool_down: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            backbone: 128,
            latent: 192,
            unpool: UnpoolMode::PixelShuffle,
            hops: 2,
            stages: 4,
            rbs_per_stage: 3,
            attention: true,
            pool_down: false,
        }
    }
}

/// The toy-scale default used by `train-toy` and the acceptance run.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        input_channels: 1,
        backbone: 32,
        latent: 48,
        unpool: UnpoolMode::TransposedConv,
        hops: 2,
        stages: 4,
        rbs_per_stage: 1,
        attention: true,
        pool_down: false,
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.backbone == 0 || self.latent == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.backbone % 2 != 0 || self.latent % 2 != 0 {
            return Err(Error::Config(
                "backbone and latent widths must be even (residual bottleneck halves them)".into(),
            ));
        }
        if self.hops == 0 || self.hops > 3 {
            return Err(Error::Config("hops must be 1..=3".into()));
        }
        if self.stages < 2 {
            return Err(Error::Config("need at least two downsampling stages".into()));
        }
        Ok(())
    }

    /// Total downsampling factor of the image encoder in n_side units,
    /// including the extra hyper-encoder stage.
    pub fn nside_divisor(&self) -> u32 {
        1u32 << (self.stages + 1)
    }

    /// Canonical flat key-value rendering; also the digest input.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "attention = {}", self.attention as u8);
        let _ = writeln!(s, "hops = {}", self.hops);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "m = {}", self.latent);
        let _ = writeln!(s, "n = {}", self.backbone);
        let _ = writeln!(s, "pool_down = {}", self.pool_down as u8);
        let _ = writeln!(s, "rbs = {}", self.rbs_per_stage);
        let _ = writeln!(s, "stages = {}", self.stages);
        let _ = writeln!(s, "unpool = {}", self.unpool.as_str());
        s
    }

    /// Parses the flat key-value format written by [`render`]. Unknown keys
    /// are rejected; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("line {}: bad number '{v}'", lineno + 1)))
            };
            match key {
                "input_channels" => cfg.input_channels = parse_usize(value)?,
                "n" => cfg.backbone = parse_usize(value)?,
                "m" => cfg.latent = parse_usize(value)?,
                "unpool" => cfg.unpool = UnpoolMode::parse(value)?,
                "hops" => cfg.hops = parse_usize(value)?,
                "stages" => cfg.stages = parse_usize(value)?,
                "rbs" => cfg.rbs_per_stage = parse_usize(value)?,
                "attention" => cfg.attention = parse_usize(value)? != 0,
                "pool_down" => cfg.pool_down = parse_usize(value)? != 0,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 bytes of the SHA-256 of the canonical rendering.
    pub fn digest(&self) -> [u8; 16] {
        let hash = Sha256::digest(self.render().as_bytes());
        let mut out = [0u8; 16];
        out.copy_from_slice(&hash[..16]);
        out
    }
}

/// One layer of a network part; parameter names and graphs both walk these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// Downsampling stage: `hops` 1-hop kernels, resolution halves.
    ConvDown { hops: usize, l_in: usize, l_out: usize },
    /// Upsampling stage: one unpool kernel plus `hops - 1` follow-up 1-hop
    /// kernels, resolution doubles.
    ConvUp {
        hops: usize,
        l_in: usize,
        l_out: usize,
        mode: UnpoolMode,
    },
    /// Same-resolution n-hop convolution.
    Conv { hops: usize, l_in: usize, l_out: usize },
    /// Per-pixel linear map.
    Conv0 { l_in: usize, l_out: usize },
    Relu,
    /// Residual bottleneck block, shape preserving.
    ResBlock { channels: usize },
    /// Attention module, shape preserving.
    Attention { channels: usize },
}

impl LayerSpec {
    /// Trainable scalar count of this layer (all kernels carry a bias).
    pub fn param_count(&self) -> usize {
        fn kernel(li: usize, lo: usize) -> usize {
            (9 * li + 1) * lo
        }
        fn conv0(li: usize, lo: usize) -> usize {
            (li + 1) * lo
        }
        match *self {
            LayerSpec::ConvDown { hops, l_in, l_out } | LayerSpec::Conv { hops, l_in, l_out } => {
                kernel(l_in, l_out) + (hops - 1) * kernel(l_out, l_out)
            }
            LayerSpec::ConvUp {
                hops,
                l_in,
                l_out,
                mode,
            } => {
                let unpool = match mode {
                    UnpoolMode::TransposedConv => kernel(l_in, l_out),
                    UnpoolMode::PixelShuffle => kernel(l_in, 4 * l_out),
                };
                unpool + (hops - 1) * kernel(l_out, l_out)
            }
            LayerSpec::Conv0 { l_in, l_out } => conv0(l_in, l_out),
            LayerSpec::Relu => 0,
            LayerSpec::ResBlock { channels } => {
                let half = channels / 2;
                conv0(channels, half) + kernel(half, half) + conv0(half, channels)
            }
            LayerSpec::Attention { channels } => {
                let rb = LayerSpec::ResBlock { channels }.param_count();
                6 * rb + conv0(channels, channels)
            }
        }
    }
}

/// Layer lists for every network part of the model.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub hyper_encoder: Vec<LayerSpec>,
    pub hyper_decoder: Vec<LayerSpec>,
    /// Masked 1-hop context kernel (center unused): latent -> 2 * latent.
    pub context_out: usize,
    pub aggregation: Vec<LayerSpec>,
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        let n = self.backbone;
        let m = self.latent;
        let s = self.stages;
        let mid_attn_after = (s - 1) / 2;

        let mut encoder = Vec::new();
        for stage in 0..s {
            let l_in = if stage == 0 { self.input_channels } else { n };
            let l_out = if stage == s - 1 { m } else { n };
            encoder.push(LayerSpec::ConvDown {
                hops: self.hops,
                l_in,
                l_out,
            });
            if stage < s - 1 {
                for _ in 0..self.rbs_per_stage {
                    encoder.push(LayerSpec::ResBlock { channels: n });
                }
                if self.attention && stage == mid_attn_after {
                    encoder.push(LayerSpec::Attention { channels: n });
                }
            } else if self.attention {
                encoder.push(LayerSpec::Attention { channels: m });
            }
        }

        // Mirror of the encoder: reverse the list, swap down for up.
        let mut decoder = Vec::new();
        for layer in encoder.iter().rev() {
            decoder.push(match *layer {
                LayerSpec::ConvDown { hops, l_in, l_out } => LayerSpec::ConvUp {
                    hops,
                    l_in: l_out,
                    l_out: l_in,
                    mode: self.unpool,
                },
                ref other => other.clone(),
            });
        }

        let hyper_encoder = vec![
            LayerSpec::Conv {
                hops: 1,
                l_in: m,
                l_out: n,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                hops: 1,
                l_in: n,
                l_out: n,
            },
            LayerSpec::Relu,
            LayerSpec::ConvDown {
                hops: 1,
                l_in: n,
                l_out: n,
            },
        ];
        let hyper_decoder = vec![
            LayerSpec::ConvUp {
                hops: 1,
                l_in: n,
                l_out: n,
                mode: self.unpool,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                hops: 1,
                l_in: n,
                l_out: n,
            },
            LayerSpec::Relu,
            LayerSpec::Conv0 {
                l_in: n,
                l_out: 2 * m,
            },
        ];
        let aggregation = vec![
            LayerSpec::Conv0 {
                l_in: 4 * m,
                l_out: 3 * m,
            },
            LayerSpec::Relu,
            LayerSpec::Conv0 {
                l_in: 3 * m,
                l_out: 2 * m,
            },
            LayerSpec::Relu,
            LayerSpec::Conv0 {
                l_in: 2 * m,
                l_out: 2 * m,
            },
        ];

        Architecture {
            encoder,
            decoder,
            hyper_encoder,
            hyper_decoder,
            context_out: 2 * m,
            aggregation,
        }
    }
}

/// Parameter counts of the two unpooling flavors at equal channel widths:
/// ((9 l_in + 1) l_out, four times that).
pub fn unpool_param_counts(l_in: usize, l_out: usize) -> (usize, usize) {
    let tconv = (9 * l_in + 1) * l_out;
    let shuffle = (9 * l_in + 1) * (4 * l_out);
    (tconv, shuffle)
}
