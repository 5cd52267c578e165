//! Model/training configuration with "paper" and "desk" presets.
//!
//! A config file is JSON naming a preset plus any overrides; unset fields
//! are filled from the preset, then the whole thing is validated. The
//! "paper" preset pins the published training recipe; "desk" is a scaled
//! configuration that trains in minutes on one CPU core while running the
//! exact same code paths.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestorationVariant {
    Unet,
    Wnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uni,
    Bi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Per-element learned step and offset (the default model).
    Adaptive,
    /// Constant step, zero offset, as in fixed-step codecs.
    Fixed,
    /// Quantization bypassed; the bottleneck is a plain auto-encoder.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,

    // Widths.
    pub feature_width: usize,
    pub latent_width: usize,
    pub mvr_width: usize,
    pub fa_widths: [usize; 3],
    pub ncfl_width: usize,
    pub unet_widths: [usize; 5],
    pub cab_per_scale: usize,
    pub cab_reduction: usize,
    pub flow_levels: usize,
    pub flow_width: usize,

    // Structure flags.
    pub restoration: RestorationVariant,
    pub direction: Direction,
    pub mvr: bool,
    pub ncfl: bool,
    pub fa: bool,
    pub quant_mode: QuantMode,
    pub fixed_step: Option<f32>,
    /// Replace MVR with a plain conv stack of slightly larger cost.
    pub m_conv: bool,
    /// Replace the compression bottleneck with a plain conv stack.
    pub n_conv: bool,

    // Training schedule.
    pub lambda_ce: f64,
    pub stage1_iters: usize,
    pub total_iters: usize,
    pub lr_main: f64,
    pub lr_flow: f64,
    pub flow_freeze_iters: usize,
    pub weight_decay: f64,
    pub batch: usize,
    pub clip_len: usize,
    pub patch: usize,
    pub seed: u64,

    // Data.
    /// Training noise level on the 0-255 scale (AWGN).
    pub awgn_sigma: f32,
    /// Sample fresh noise every iteration (vs. one fixed realization).
    pub noise_per_iter: bool,

    // Logging.
    pub log_every: usize,
    pub ckpt_every: usize,
}

/// Same fields, all optional; what a config file may specify.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialConfig {
    preset: Option<String>,
    feature_width: Option<usize>,
    latent_width: Option<usize>,
    mvr_width: Option<usize>,
    fa_widths: Option<[usize; 3]>,
    ncfl_width: Option<usize>,
    unet_widths: Option<[usize; 5]>,
    cab_per_scale: Option<usize>,
    cab_reduction: Option<usize>,
    flow_levels: Option<usize>,
    flow_width: Option<usize>,
    restoration: Option<RestorationVariant>,
    direction: Option<Direction>,
    mvr: Option<bool>,
    ncfl: Option<bool>,
    fa: Option<bool>,
    quant_mode: Option<QuantMode>,
    fixed_step: Option<f32>,
    m_conv: Option<bool>,
    n_conv: Option<bool>,
    lambda_ce: Option<f64>,
    stage1_iters: Option<usize>,
    total_iters: Option<usize>,
    lr_main: Option<f64>,
    lr_flow: Option<f64>,
    flow_freeze_iters: Option<usize>,
    weight_decay: Option<f64>,
    batch: Option<usize>,
    clip_len: Option<usize>,
    patch: Option<usize>,
    seed: Option<u64>,
    awgn_sigma: Option<f32>,
    noise_per_iter: Option<bool>,
    log_every: Option<usize>,
    ckpt_every: Option<usize>,
}

impl ModelConfig {
    /// The published recipe: 128x128 patches, batch 16, 5-frame clips,
    /// lambda 1/2048, 50K stage-1 iterations.
    pub fn paper() -> ModelConfig {
        ModelConfig {
            preset: "paper".into(),
            feature_width: 64,
            latent_width: 64,
            mvr_width: 64,
            fa_widths: [16, 32, 64],
            ncfl_width: 64,
            unet_widths: [32, 64, 128, 256, 512],
            cab_per_scale: 2,
            cab_reduction: 4,
            flow_levels: 3,
            flow_width: 64,
            restoration: RestorationVariant::Unet,
            direction: Direction::Uni,
            mvr: true,
            ncfl: true,
            fa: true,
            quant_mode: QuantMode::Adaptive,
            fixed_step: None,
            m_conv: false,
            n_conv: false,
            lambda_ce: 1.0 / 2048.0,
            stage1_iters: 50_000,
            total_iters: 100_000,
            lr_main: 2e-4,
            lr_flow: 2.5e-5,
            flow_freeze_iters: 2500,
            weight_decay: 1e-4,
            batch: 16,
            clip_len: 5,
            patch: 128,
            seed: 0,
            awgn_sigma: 50.0,
            noise_per_iter: true,
            log_every: 50,
            ckpt_every: 5000,
        }
    }

    /// Scaled-down preset for single-core smoke training.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            preset: "desk".into(),
            feature_width: 16,
            latent_width: 16,
            mvr_width: 16,
            fa_widths: [8, 16, 32],
            ncfl_width: 16,
            unet_widths: [16, 32, 64, 128, 128],
            cab_per_scale: 1,
            cab_reduction: 4,
            flow_levels: 3,
            flow_width: 16,
            restoration: RestorationVariant::Unet,
            direction: Direction::Uni,
            mvr: true,
            ncfl: true,
            fa: true,
            quant_mode: QuantMode::Adaptive,
            fixed_step: None,
            m_conv: false,
            n_conv: false,
            lambda_ce: 1.0 / 2048.0,
            stage1_iters: 500,
            total_iters: 2000,
            lr_main: 2e-4,
            lr_flow: 2.5e-5,
            flow_freeze_iters: 250,
            weight_decay: 1e-4,
            batch: 4,
            clip_len: 5,
            patch: 32,
            seed: 0,
            awgn_sigma: 25.0,
            noise_per_iter: true,
            log_every: 10,
            ckpt_every: 500,
        }
    }

    pub fn preset(name: &str) -> Result<ModelConfig> {
        match name {
            "paper" => Ok(ModelConfig::paper()),
            "desk" => Ok(ModelConfig::desk()),
            other => Err(Error::Invalid(format!(
                "unknown preset {other:?} (expected \"paper\" or \"desk\")"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = String::new();
        let mut fail = |field: &str, msg: String| {
            let _ = writeln!(errs, "  {field}: {msg}");
        };
        if self.quant_mode == QuantMode::Fixed {
            match self.fixed_step {
                Some(s) if s > 0.0 => {}
                Some(s) => fail("fixed_step", format!("must be positive, got {s}")),
                None => fail("fixed_step", "required when quant_mode is \"fixed\"".into()),
            }
        }
        if self.stage1_iters > self.total_iters {
            fail(
                "stage1_iters",
                format!("{} exceeds total_iters {}", self.stage1_iters, self.total_iters),
            );
        }
        for (name, v) in [
            ("feature_width", self.feature_width),
            ("latent_width", self.latent_width),
            ("mvr_width", self.mvr_width),
            ("ncfl_width", self.ncfl_width),
            ("cab_per_scale", self.cab_per_scale),
            ("cab_reduction", self.cab_reduction),
            ("flow_width", self.flow_width),
            ("batch", self.batch),
            ("clip_len", self.clip_len),
            ("log_every", self.log_every),
            ("ckpt_every", self.ckpt_every),
        ] {
            if v == 0 {
                fail(name, "must be >= 1".into());
            }
        }
        if self.flow_levels != 3 {
            fail("flow_levels", format!("must be 3 in both presets, got {}", self.flow_levels));
        }
        if self.patch < 8 {
            fail("patch", format!("must be >= 8, got {}", self.patch));
        }
        if self.patch % 4 != 0 {
            // x4 latent downsampling and the 3-level flow pyramid both
            // need divisibility by 4.
            fail("patch", format!("must be divisible by 4, got {}", self.patch));
        }
        if !(self.lambda_ce >= 0.0) {
            fail("lambda_ce", format!("must be >= 0, got {}", self.lambda_ce));
        }
        if !(self.awgn_sigma >= 0.0) {
            fail("awgn_sigma", format!("must be >= 0, got {}", self.awgn_sigma));
        }
        for (name, v) in [("lr_main", self.lr_main), ("lr_flow", self.lr_flow)] {
            if !(v > 0.0) {
                fail(name, format!("must be > 0, got {v}"));
            }
        }
        if self.unet_widths.iter().any(|&w| w == 0) {
            fail("unet_widths", "all five scale widths must be >= 1".into());
        }
        if self.fa_widths.iter().any(|&w| w == 0) {
            fail("fa_widths", "all three scale widths must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid config:\n{errs}")))
        }
    }

    /// Stable hash of the full config, for report provenance.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    fn apply(mut self, p: PartialConfig) -> ModelConfig {
        macro_rules! take {
            ($($f:ident),* $(,)?) => {
                $(if let Some(v) = p.$f { self.$f = v; })*
            };
        }
        take!(
            feature_width, latent_width, mvr_width, fa_widths, ncfl_width, unet_widths,
            cab_per_scale, cab_reduction, flow_levels, flow_width, restoration, direction,
            mvr, ncfl, fa, quant_mode, m_conv, n_conv, lambda_ce, stage1_iters, total_iters,
            lr_main, lr_flow, flow_freeze_iters, weight_decay, batch, clip_len, patch, seed,
            awgn_sigma, noise_per_iter, log_every, ckpt_every,
        );
        if p.fixed_step.is_some() {
            self.fixed_step = p.fixed_step;
        }
        self
    }
}

/// Parse a JSON config: a preset name plus overrides, validated.
pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    parse_config(&text).map_err(|e| match e {
        Error::Invalid(m) => Error::config(path.display().to_string(), m),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let partial: PartialConfig =
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("parse failure: {e}")))?;
    let preset = partial.preset.clone().unwrap_or_else(|| "desk".into());
    let cfg = ModelConfig::preset(&preset)?.apply(partial);
    cfg.validate()?;
    Ok(cfg)
}
