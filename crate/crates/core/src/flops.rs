//! FLOPs and parameter accounting.
//!
//! Counting rules (multiply-accumulate = 2 FLOPs):
//!   conv:     2 * C_in * C_out * K_h * K_w * H_out * W_out
//!   linear:   2 * in * out
//!   gap:      C_f * H * W
//!   saliency: 2 * C_f * H * W + H * W        (square-accumulate + sqrt)
//!   top-k:    H * W * ceil(log2(H * W))      (selection)
//!   pooling:  C_f * k                        (mean over selected cells)
//!   softmax:  3 * C; sigmoid: 4; ReLU and bias adds uncharged.
//!
//! The global path covers backbone, GAP, global head, and routing head (the
//! routing decision is computed for every sample). The ROI surcharge covers
//! saliency, selection, pooling, refinement, and the fused head.

use crate::backbone::BackboneConfig;
use crate::model::HeadConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsBreakdown {
    /// Per-sample cost of the always-on path.
    pub global_path: u64,
    /// Additional per-sample cost when the ROI branch runs.
    pub roi_extra: u64,
    /// Learnable scalar count (domain head included when n_domains >= 2).
    pub params: u64,
}

fn conv_flops(c_in: u64, c_out: u64, k: u64, h_out: u64, w_out: u64) -> u64 {
    2 * c_in * c_out * k * k * h_out * w_out
}

fn linear_flops(input: u64, output: u64) -> u64 {
    2 * input * output
}

fn conv_params(c_in: u64, c_out: u64, k: u64) -> u64 {
    c_out * c_in * k * k + c_out
}

fn linear_params(input: u64, output: u64) -> u64 {
    output * input + output
}

/// Static cost model for a configuration. `n_domains` of 0 or 1 means the
/// domain head is absent (it never runs at inference either way).
pub fn flops_estimate(
    backbone: &BackboneConfig,
    heads: &HeadConfig,
    n_domains: usize,
) -> FlopsBreakdown {
    let k = backbone.kernel as u64;
    let mut flops_backbone = 0u64;
    let mut params = 0u64;
    let mut hw = backbone.input_size as u64;
    let mut c_in = 3u64;
    for &width in &backbone.stage_widths {
        let c_out = width as u64;
        flops_backbone += conv_flops(c_in, c_out, k, hw, hw);
        params += conv_params(c_in, c_out, k);
        hw = hw.div_ceil(2);
        flops_backbone += conv_flops(c_out, c_out, k, hw, hw);
        params += conv_params(c_out, c_out, k);
        c_in = c_out;
    }
    let c_f = backbone.feature_channels() as u64;
    let (fh, fw) = backbone.feature_hw();
    let spatial = (fh * fw) as u64;
    let classes = heads.n_classes as u64;
    let top_k = heads.effective_k((fh, fw)) as u64;

    let gap = c_f * spatial;
    let global_head = linear_flops(c_f, heads.global_hidden as u64)
        + linear_flops(heads.global_hidden as u64, classes)
        + 3 * classes;
    let routing_head = linear_flops(c_f, heads.route_hidden as u64)
        + linear_flops(heads.route_hidden as u64, 1)
        + 4;
    params += linear_params(c_f, heads.global_hidden as u64)
        + linear_params(heads.global_hidden as u64, classes)
        + linear_params(c_f, heads.route_hidden as u64)
        + linear_params(heads.route_hidden as u64, 1);

    let saliency = 2 * c_f * spatial + spatial;
    let ceil_log2 = if spatial > 1 {
        64 - (spatial - 1).leading_zeros() as u64
    } else {
        1
    };
    let select = spatial * ceil_log2.max(1);
    let pool = c_f * top_k;
    let refine = linear_flops(c_f, heads.roi_dim as u64);
    let fused = linear_flops(c_f + heads.roi_dim as u64, heads.fused_hidden as u64)
        + linear_flops(heads.fused_hidden as u64, classes)
        + 3 * classes;
    params += linear_params(c_f, heads.roi_dim as u64)
        + linear_params(c_f + heads.roi_dim as u64, heads.fused_hidden as u64)
        + linear_params(heads.fused_hidden as u64, classes);

    if n_domains >= 2 {
        params += linear_params(c_f, heads.domain_hidden as u64)
            + linear_params(heads.domain_hidden as u64, n_domains as u64);
    }

    FlopsBreakdown {
        global_path: flops_backbone + gap + global_head + routing_head,
        roi_extra: saliency + select + pool + refine + fused,
        params,
    }
}
