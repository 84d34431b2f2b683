//! Compact convolutional feature extractor.
//!
//! Three stages of (3x3 conv, ReLU, stride-2 3x3 conv, ReLU); no batch norm,
//! so inference is deterministic. The last stage width is the feature-map
//! channel count used everywhere downstream.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvSpec, Padding, ParamId, ParamStore, Tape, Var};
use crate::error::{CdiraError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Square input edge, pixels.
    pub input_size: usize,
    /// Channel count per stage; each stage downsamples by 2.
    pub stage_widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 64,
            stage_widths: vec![16, 32, 64],
            kernel: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(CdiraError::Config("backbone needs at least one stage".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(CdiraError::Config("backbone kernel must be odd".into()));
        }
        let (h, w) = self.feature_hw();
        if h < 2 || w < 2 {
            return Err(CdiraError::Config(format!(
                "feature map {h}x{w} too small; Top-K pooling needs >= 4 positions"
            )));
        }
        Ok(())
    }

    /// Output channels C_f (the last stage width).
    pub fn feature_channels(&self) -> usize {
        *self.stage_widths.last().expect("non-empty")
    }

    /// Spatial size of the feature map: one stride-2 step per stage.
    pub fn feature_hw(&self) -> (usize, usize) {
        let mut hw = self.input_size;
        for _ in &self.stage_widths {
            hw = hw.div_ceil(2);
        }
        (hw, hw)
    }
}

/// Per-channel input normalization, estimated on the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormStats {
    pub fn identity() -> NormStats {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Parameter ids of one conv stage.
#[derive(Debug, Clone, Copy)]
pub struct StageIds {
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub w_b: ParamId,
    pub b_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct BackboneIds {
    pub stages: Vec<StageIds>,
}

/// Kaiming-style uniform fan-in bound.
pub fn fan_in_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

/// Create and register backbone parameters.
pub fn init_backbone(
    cfg: &BackboneConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> BackboneIds {
    let k = cfg.kernel;
    let mut stages = Vec::with_capacity(cfg.stage_widths.len());
    let mut in_ch = 3;
    for (i, &out_ch) in cfg.stage_widths.iter().enumerate() {
        let bound_a = fan_in_bound(in_ch * k * k);
        let w_a = store.add(
            &format!("backbone.stage{i}.conv_a.w"),
            Tensor::uniform(&[out_ch, in_ch, k, k], bound_a, rng),
        );
        let b_a = store.add(&format!("backbone.stage{i}.conv_a.b"), Tensor::zeros(&[out_ch]));
        let bound_b = fan_in_bound(out_ch * k * k);
        let w_b = store.add(
            &format!("backbone.stage{i}.conv_b.w"),
            Tensor::uniform(&[out_ch, out_ch, k, k], bound_b, rng),
        );
        let b_b = store.add(&format!("backbone.stage{i}.conv_b.b"), Tensor::zeros(&[out_ch]));
        stages.push(StageIds { w_a, b_a, w_b, b_b });
        in_ch = out_ch;
    }
    BackboneIds { stages }
}

/// Normalize a [0,1] CHW image with per-channel stats.
pub fn normalize_image(image: &Tensor, norm: &NormStats) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(CdiraError::shape(format!(
            "expected [3, H, W] image, got {shape:?}"
        )));
    }
    let hw = shape[1] * shape[2];
    let mut data = image.data().to_vec();
    for c in 0..3 {
        let (m, s) = (norm.mean[c], norm.std[c]);
        for v in data[c * hw..(c + 1) * hw].iter_mut() {
            *v = (*v - m) / s;
        }
    }
    Tensor::from_vec(shape, data)
}

/// Run the backbone on a normalized leaf; returns the [C_f, H, W] feature map.
pub fn extract_features(
    tape: &mut Tape,
    params: &ParamStore,
    ids: &BackboneIds,
    cfg: &BackboneConfig,
    image: &Tensor,
    norm: &NormStats,
) -> Result<Var> {
    let shape = image.shape();
    if shape != [3, cfg.input_size, cfg.input_size] {
        return Err(CdiraError::shape(format!(
            "input shape {:?} does not match configured {}x{}",
            shape, cfg.input_size, cfg.input_size
        )));
    }
    let normalized = normalize_image(image, norm)?;
    let mut x = tape.leaf(normalized);
    let mut in_ch = 3;
    for (stage, &out_ch) in ids.stages.iter().zip(&cfg.stage_widths) {
        let spec_a = ConvSpec {
            in_ch,
            out_ch,
            kernel: cfg.kernel,
            stride: 1,
            padding: Padding::Same,
        };
        let conv_a = tape.conv2d(params, x, stage.w_a, stage.b_a, spec_a)?;
        let act_a = tape.relu(conv_a);
        let spec_b = ConvSpec {
            in_ch: out_ch,
            out_ch,
            kernel: cfg.kernel,
            stride: 2,
            padding: Padding::Same,
        };
        let conv_b = tape.conv2d(params, act_a, stage.w_b, stage.b_b, spec_b)?;
        x = tape.relu(conv_b);
        in_ch = out_ch;
    }
    Ok(x)
}
