//! Architecture hyperparameters and their flat `key=value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub template_size: usize,
    pub search_size: usize,
    /// Hidden states per SSD block.
    pub ssd_state_count: usize,
    /// Candidate kernels mixed by every adaptive convolution.
    pub aconv_kernel_count: usize,
    /// Width of the first head stage; later stages halve it twice.
    pub head_channels: usize,
    pub num_taps: usize,
    /// Channel reduction of the kernel-attention MLPs.
    pub routing_reduction: usize,
    /// Blend weight of the Hanning window at inference.
    pub hanning_weight: f64,
}

impl TrackerConfig {
    /// ViT-Tiny backbone at 128/256 inputs, used for the complexity audit.
    pub fn vit_tiny() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 192,
            num_layers: 12,
            num_heads: 3,
            mlp_ratio: 4.0,
            template_size: 128,
            search_size: 256,
            ssd_state_count: 64,
            aconv_kernel_count: 2,
            head_channels: 240,
            num_taps: 3,
            routing_reduction: 16,
            hanning_weight: 0.49,
        }
    }

    /// CPU-trainable configuration for the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 2,
            mlp_ratio: 4.0,
            template_size: 32,
            search_size: 64,
            ssd_state_count: 8,
            aconv_kernel_count: 2,
            head_channels: 64,
            num_taps: 3,
            routing_reduction: 16,
            hanning_weight: 0.49,
        }
    }

    pub fn template_grid(&self) -> Grid {
        let n = self.template_size / self.patch_size;
        Grid::new(n, n)
    }

    pub fn search_grid(&self) -> Grid {
        let n = self.search_size / self.patch_size;
        Grid::new(n, n)
    }

    /// Joint token count `M + N_s`.
    pub fn seq_len(&self) -> usize {
        self.template_grid().len() + self.search_grid().len()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Hidden width of a kernel-attention MLP over `channels` inputs.
    pub fn routing_hidden(&self, channels: usize) -> usize {
        (channels / self.routing_reduction.max(1)).max(4)
    }

    /// Empty network: no layers, nothing tapped.
    pub fn is_empty_model(&self) -> bool {
        self.num_layers == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return bad("patch_size, embed_dim and num_heads must be positive".into());
        }
        if self.template_size == 0 || self.template_size % self.patch_size != 0 {
            return bad(format!(
                "template_size {} not a positive multiple of patch_size {}",
                self.template_size, self.patch_size
            ));
        }
        if self.search_size == 0 || self.search_size % self.patch_size != 0 {
            return bad(format!(
                "search_size {} not a positive multiple of patch_size {}",
                self.search_size, self.patch_size
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_taps > self.num_layers {
            return bad(format!("num_taps {} exceeds num_layers {}", self.num_taps, self.num_layers));
        }
        if self.is_empty_model() {
            return Ok(());
        }
        if self.num_taps == 0 {
            return bad("num_taps must be positive".into());
        }
        if self.aconv_kernel_count == 0 {
            return bad("aconv_kernel_count must be at least 1".into());
        }
        if self.ssd_state_count == 0 || self.ssd_state_count > self.seq_len() / 2 {
            return bad(format!(
                "ssd_state_count {} must be in 1..={} (half the token count)",
                self.ssd_state_count,
                self.seq_len() / 2
            ));
        }
        if self.head_channels < 4 || self.head_channels % 4 != 0 {
            return bad(format!("head_channels {} must be a positive multiple of 4", self.head_channels));
        }
        if self.mlp_ratio <= 0.0 || !self.mlp_ratio.is_finite() {
            return bad("mlp_ratio must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hanning_weight) {
            return bad("hanning_weight must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment. Unspecified keys keep
    /// the values of `base`.
    pub fn parse_with(text: &str, base: Self) -> Result<Self> {
        let mut c = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let int = || {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("line {}: {k} expects an integer", lineno + 1)))
            };
            let float = || {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {}: {k} expects a number", lineno + 1)))
            };
            match k {
                "patch_size" => c.patch_size = int()?,
                "embed_dim" => c.embed_dim = int()?,
                "num_layers" => c.num_layers = int()?,
                "num_heads" => c.num_heads = int()?,
                "mlp_ratio" => c.mlp_ratio = float()?,
                "template_size" => c.template_size = int()?,
                "search_size" => c.search_size = int()?,
                "ssd_state_count" => c.ssd_state_count = int()?,
                "aconv_kernel_count" => c.aconv_kernel_count = int()?,
                "head_channels" => c.head_channels = int()?,
                "num_taps" => c.num_taps = int()?,
                "routing_reduction" => c.routing_reduction = int()?,
                "hanning_weight" => c.hanning_weight = float()?,
                other => return Err(Error::Config(format!("line {}: unknown key {other}", lineno + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, Self::desk())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "num_layers={}", self.num_layers);
        let _ = writeln!(s, "num_heads={}", self.num_heads);
        let _ = writeln!(s, "mlp_ratio={}", self.mlp_ratio);
        let _ = writeln!(s, "template_size={}", self.template_size);
        let _ = writeln!(s, "search_size={}", self.search_size);
        let _ = writeln!(s, "ssd_state_count={}", self.ssd_state_count);
        let _ = writeln!(s, "aconv_kernel_count={}", self.aconv_kernel_count);
        let _ = writeln!(s, "head_channels={}", self.head_channels);
        let _ = writeln!(s, "num_taps={}", self.num_taps);
        let _ = writeln!(s, "routing_reduction={}", self.routing_reduction);
        let _ = writeln!(s, "hanning_weight={}", self.hanning_weight);
        s
    }
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_tiny_token_counts() {
        let c = TrackerConfig::vit_tiny();
        c.validate().unwrap();
        assert_eq!(c.template_grid().len(), 64);
        assert_eq!(c.search_grid().len(), 256);
        assert_eq!(c.seq_len(), 320);
        assert_eq!(c.head_dim(), 64);
    }

    #[test]
    fn text_round_trip() {
        let c = TrackerConfig::vit_tiny();
        assert_eq!(TrackerConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_defaults() {
        let c = TrackerConfig::parse("# desk\nembed_dim = 32 # narrower\n\nnum_heads=4\n").unwrap();
        assert_eq!(c.embed_dim, 32);
        assert_eq!(c.num_heads, 4);
        assert_eq!(c.patch_size, TrackerConfig::desk().patch_size);
    }

    #[test]
    fn rejects_invalid() {
        assert!(TrackerConfig::parse("search_size=60").is_err());
        assert!(TrackerConfig::parse("num_heads=3").is_err());
        assert!(TrackerConfig::parse("num_taps=5").is_err());
        assert!(TrackerConfig::parse("ssd_state_count=41").is_err());
        assert!(TrackerConfig::parse("bogus=1").is_err());
        assert!(TrackerConfig::parse("embed_dim").is_err());
    }
}
