use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionSpec, ConvSpec};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Mel bands `f` of the input segment.
    pub n_bands: usize,
    /// Frames `d` of the input segment.
    pub n_frames: usize,
    pub in_channels: usize,
    /// Convolution applied twice in the time branch; reduces the band axis.
    pub time_conv: ConvSpec,
    /// Convolution applied twice in the frequency branch; reduces the frame axis.
    pub freq_conv: ConvSpec,
    /// Convolution applied twice in the fusion branch; reduces both axes.
    pub fusion_conv: ConvSpec,
    pub time_encoder: AttentionSpec,
    pub freq_encoder: AttentionSpec,
    pub fusion_encoder: AttentionSpec,
    /// Encoder layers per branch.
    pub encoder_depth: usize,
    pub n_classes: usize,
    pub use_time: bool,
    pub use_freq: bool,
    pub use_fusion: bool,
    pub dropout: f64,
    /// Adds sinusoidal position codes to every encoder input.
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_bands: 80,
            n_frames: 80,
            in_channels: 1,
            time_conv: ConvSpec::new(64, (5, 1), (2, 1), (2, 0)),
            freq_conv: ConvSpec::new(64, (1, 5), (1, 2), (0, 2)),
            fusion_conv: ConvSpec::new(64, (5, 5), (2, 2), (2, 2)),
            time_encoder: AttentionSpec::new(20, 2, 512),
            freq_encoder: AttentionSpec::new(20, 2, 512),
            fusion_encoder: AttentionSpec::new(20, 4, 1024),
            encoder_depth: 1,
            n_classes: 4,
            use_time: true,
            use_freq: true,
            use_fusion: true,
            dropout: 0.0,
            positional_encoding: false,
        }
    }
}

impl ModelConfig {
    /// Scaled-down geometry (`f = d = 16`) for fast tests: same structure,
    /// embed 4, feed-forward 8, `c1` conv channels.
    pub fn tiny(c1: usize, n_classes: usize) -> Self {
        let base = Self::default();
        Self {
            n_bands: 16,
            n_frames: 16,
            time_conv: ConvSpec { out_channels: c1, ..base.time_conv },
            freq_conv: ConvSpec { out_channels: c1, ..base.freq_conv },
            fusion_conv: ConvSpec { out_channels: c1, ..base.fusion_conv },
            time_encoder: AttentionSpec::new(4, 2, 8),
            freq_encoder: AttentionSpec::new(4, 2, 8),
            fusion_encoder: AttentionSpec::new(4, 4, 8),
            n_classes,
            ..base
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        let (t, f, tf) = ablation.toggles();
        self.use_time = t;
        self.use_freq = f;
        self.use_fusion = tf;
        self
    }

    /// Shape after applying `spec` twice to the `(f, d)` plane.
    fn twice(&self, spec: &ConvSpec) -> Result<(usize, usize)> {
        let (h, w) = spec.output_hw(self.n_bands, self.n_frames)?;
        spec.output_hw(h, w)
    }

    /// Checks every shape contract of the wiring.
    pub fn validate(&self) -> Result<()> {
        if !(self.use_time || self.use_freq || self.use_fusion) {
            return Err(Error::Config("at least one of time, frequency, fusion must be enabled".into()));
        }
        if !self.n_bands.is_multiple_of(4) || !self.n_frames.is_multiple_of(4) || self.n_bands == 0 || self.n_frames == 0 {
            return Err(Error::Config(format!(
                "bands ({}) and frames ({}) must be positive multiples of 4",
                self.n_bands, self.n_frames
            )));
        }
        if self.in_channels == 0 || self.n_classes < 2 || self.encoder_depth == 0 {
            return Err(Error::Config("need in_channels >= 1, n_classes >= 2, encoder_depth >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let (f4, d4) = (self.n_bands / 4, self.n_frames / 4);
        let expect = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} maps ({}, {}) to {got:?}, expected {want:?}", self.n_bands, self.n_frames)))
            }
        };
        let embed = |name: &str, spec: &AttentionSpec, want: usize| {
            spec.validate()?;
            if spec.embed_dim == want {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} embed_dim {} must equal {want}", spec.embed_dim)))
            }
        };
        if self.use_time {
            expect("time_conv", self.twice(&self.time_conv)?, (f4, self.n_frames))?;
            embed("time_encoder", &self.time_encoder, f4)?;
        }
        if self.use_freq {
            expect("freq_conv", self.twice(&self.freq_conv)?, (self.n_bands, d4))?;
            embed("freq_encoder", &self.freq_encoder, d4)?;
        }
        if self.use_fusion {
            expect("fusion_conv", self.twice(&self.fusion_conv)?, (f4, d4))?;
            embed("fusion_encoder", &self.fusion_encoder, d4)?;
        }
        Ok(())
    }

    /// Width of the pooled vector fed to the classifier.
    pub fn classifier_in(&self) -> usize {
        if self.use_fusion {
            self.n_frames / 2
        } else {
            let t = if self.use_time { self.n_bands / 4 } else { 0 };
            let f = if self.use_freq { self.n_frames / 4 } else { 0 };
            t + f
        }
    }
}

/// The four module combinations compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Time + frequency branches, no fusion encoder.
    #[serde(rename = "T+F")]
    TimeFreq,
    /// Time branch + fusion; keys come from a projection of `v`.
    #[serde(rename = "T+TF")]
    TimeFusion,
    /// Frequency branch + fusion; queries come from a projection of `v`.
    #[serde(rename = "F+TF")]
    FreqFusion,
    /// The full model.
    #[serde(rename = "T+F+TF")]
    Full,
}

impl Ablation {
    /// Report order.
    pub const ALL: [Ablation; 4] = [
        Ablation::TimeFreq,
        Ablation::TimeFusion,
        Ablation::FreqFusion,
        Ablation::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::TimeFreq => "T+F",
            Ablation::TimeFusion => "T+TF",
            Ablation::FreqFusion => "F+TF",
            Ablation::Full => "T+F+TF",
        }
    }

    /// `(time, frequency, fusion)` switches.
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Ablation::TimeFreq => (true, true, false),
            Ablation::TimeFusion => (true, false, true),
            Ablation::FreqFusion => (false, true, true),
            Ablation::Full => (true, true, true),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}; expected T+F, T+TF, F+TF or T+F+TF")))
    }
}
