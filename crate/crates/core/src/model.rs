//! The dual-path model: global classifier, saliency-driven Top-K ROI branch
//! with a fused classifier, routing head, and GRL domain classifier, all
//! sharing one backbone.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, GrlConfig, ParamId, ParamStore, Tape, Var};
use crate::backbone::{self, BackboneConfig, BackboneIds, NormStats};
use crate::error::{CdiraError, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub n_classes: usize,
    /// Top-K position count; 0 means ceil(0.1 * H * W).
    pub k: usize,
    pub global_hidden: usize,
    pub roi_dim: usize,
    pub fused_hidden: usize,
    pub route_hidden: usize,
    pub domain_hidden: usize,
}

impl HeadConfig {
    /// Paper-mode hidden sizes.
    pub fn with_defaults(n_classes: usize) -> HeadConfig {
        HeadConfig {
            n_classes,
            k: 0,
            global_hidden: 256,
            roi_dim: 512,
            fused_hidden: 512,
            route_hidden: 64,
            domain_hidden: 128,
        }
    }

    pub fn effective_k(&self, feature_hw: (usize, usize)) -> usize {
        if self.k == 0 {
            default_top_k(feature_hw.0, feature_hw.1)
        } else {
            self.k
        }
    }
}

/// Default ROI size: 10% of the spatial positions, rounded up.
pub fn default_top_k(h: usize, w: usize) -> usize {
    (h * w).div_ceil(10)
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalHeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct RoiHeadIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FusedHeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct RouteHeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct DomainHeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub n_domains: usize,
}

/// All learnable state plus the config needed to run it.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub store: ParamStore,
    pub backbone_cfg: BackboneConfig,
    pub head_cfg: HeadConfig,
    pub norm: NormStats,
    pub backbone: BackboneIds,
    pub global: GlobalHeadIds,
    pub roi: RoiHeadIds,
    pub fused: FusedHeadIds,
    pub route: RouteHeadIds,
    pub domain: Option<DomainHeadIds>,
}

impl ModelParams {
    /// Initialize the backbone and the four task heads. The domain head is
    /// added separately once the pseudo-domain count is known.
    pub fn new(backbone_cfg: BackboneConfig, head_cfg: HeadConfig, seed: u64) -> Result<ModelParams> {
        backbone_cfg.validate()?;
        if head_cfg.n_classes < 2 {
            return Err(CdiraError::Config("need at least two classes".into()));
        }
        let c_f = backbone_cfg.feature_channels();
        let hw = backbone_cfg.feature_hw();
        let k = head_cfg.effective_k(hw);
        if k == 0 || k > hw.0 * hw.1 {
            return Err(CdiraError::Config(format!(
                "top-k {} out of range 1..={}",
                k,
                hw.0 * hw.1
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        let backbone = backbone::init_backbone(&backbone_cfg, &mut store, &mut rng);
        let global = GlobalHeadIds {
            w1: add_linear_w(&mut store, "global.fc1", head_cfg.global_hidden, c_f, &mut rng),
            b1: store.add("global.fc1.b", Tensor::zeros(&[head_cfg.global_hidden])),
            w2: add_linear_w(
                &mut store,
                "global.fc2",
                head_cfg.n_classes,
                head_cfg.global_hidden,
                &mut rng,
            ),
            b2: store.add("global.fc2.b", Tensor::zeros(&[head_cfg.n_classes])),
        };
        let roi = RoiHeadIds {
            w: add_linear_w(&mut store, "roi.refine", head_cfg.roi_dim, c_f, &mut rng),
            b: store.add("roi.refine.b", Tensor::zeros(&[head_cfg.roi_dim])),
        };
        let fused = FusedHeadIds {
            w1: add_linear_w(
                &mut store,
                "fused.fc1",
                head_cfg.fused_hidden,
                c_f + head_cfg.roi_dim,
                &mut rng,
            ),
            b1: store.add("fused.fc1.b", Tensor::zeros(&[head_cfg.fused_hidden])),
            w2: add_linear_w(
                &mut store,
                "fused.fc2",
                head_cfg.n_classes,
                head_cfg.fused_hidden,
                &mut rng,
            ),
            b2: store.add("fused.fc2.b", Tensor::zeros(&[head_cfg.n_classes])),
        };
        let route = RouteHeadIds {
            w1: add_linear_w(&mut store, "route.fc1", head_cfg.route_hidden, c_f, &mut rng),
            b1: store.add("route.fc1.b", Tensor::zeros(&[head_cfg.route_hidden])),
            w2: add_linear_w(&mut store, "route.fc2", 1, head_cfg.route_hidden, &mut rng),
            b2: store.add("route.fc2.b", Tensor::zeros(&[1])),
        };
        Ok(ModelParams {
            store,
            backbone_cfg,
            head_cfg,
            norm: NormStats::identity(),
            backbone,
            global,
            roi,
            fused,
            route,
            domain: None,
        })
    }

    /// Append the domain classifier for `n_domains` pseudo-domains.
    pub fn add_domain_head(&mut self, n_domains: usize, seed: u64) -> Result<()> {
        if n_domains < 2 {
            return Err(CdiraError::Config(
                "domain head needs at least two domains".into(),
            ));
        }
        if self.domain.is_some() {
            return Err(CdiraError::Config("domain head already present".into()));
        }
        let c_f = self.backbone_cfg.feature_channels();
        let hidden = self.head_cfg.domain_hidden;
        let mut rng = stream_rng(seed, Stream::Init, 1);
        self.domain = Some(DomainHeadIds {
            w1: add_linear_w(&mut self.store, "domain.fc1", hidden, c_f, &mut rng),
            b1: self.store.add("domain.fc1.b", Tensor::zeros(&[hidden])),
            w2: add_linear_w(&mut self.store, "domain.fc2", n_domains, hidden, &mut rng),
            b2: self.store.add("domain.fc2.b", Tensor::zeros(&[n_domains])),
            n_domains,
        });
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_cfg.feature_channels()
    }

    pub fn top_k(&self) -> usize {
        self.head_cfg.effective_k(self.backbone_cfg.feature_hw())
    }
}

fn add_linear_w(
    store: &mut ParamStore,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    let bound = backbone::fan_in_bound(in_dim);
    store.add(
        &format!("{name}.w"),
        Tensor::uniform(&[out_dim, in_dim], bound, rng),
    )
}

/// Per-position channel-wise L2 norm of a feature map.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    pub fn at(&self, h: usize, w: usize) -> f32 {
        self.values[h * self.w + w]
    }
}

/// s(h, w) = sqrt(sum_c f(c, h, w)^2).
///
/// Squares are summed in f64 in sorted order, so the result is invariant to
/// channel permutation. No gradient flows through the map; it only drives the
/// (non-differentiable) position selection.
pub fn saliency(f: &Tensor) -> SaliencyMap {
    let shape = f.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let mut values = vec![0.0f32; hw];
    let mut squares = vec![0.0f64; c];
    for pos in 0..hw {
        for (ci, s) in squares.iter_mut().enumerate() {
            let v = f.data()[ci * hw + pos] as f64;
            *s = v * v;
        }
        squares.sort_unstable_by(f64::total_cmp);
        let sum: f64 = squares.iter().sum();
        values[pos] = (sum.sqrt()) as f32;
    }
    SaliencyMap { h, w, values }
}

/// Top-K spatial positions, stored in row-major order for fixed summation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiSelection {
    pub positions: Vec<(usize, usize)>,
}

impl RoiSelection {
    pub fn k(&self) -> usize {
        self.positions.len()
    }
}

/// Select the k most salient positions. Ties break row-major (h, then w).
pub fn top_k_positions(sal: &SaliencyMap, k: usize) -> Result<RoiSelection> {
    let hw = sal.h * sal.w;
    if k == 0 || k > hw {
        return Err(CdiraError::invalid(format!("top-k {k} out of range 1..={hw}")));
    }
    let mut idx: Vec<usize> = (0..hw).collect();
    let cmp = |&a: &usize, &b: &usize| {
        sal.values[b]
            .total_cmp(&sal.values[a])
            .then_with(|| a.cmp(&b))
    };
    if k < hw {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    let mut positions: Vec<(usize, usize)> =
        idx.into_iter().map(|p| (p / sal.w, p % sal.w)).collect();
    positions.sort_unstable();
    Ok(RoiSelection { positions })
}

/// Softmax prediction summary of the global classifier.
#[derive(Debug, Clone)]
pub struct GlobalPrediction {
    pub probs: Vec<f32>,
    pub pred: usize,
    pub confidence: f32,
}

impl GlobalPrediction {
    pub fn from_logits(logits: &[f32]) -> GlobalPrediction {
        let probs = kernels::softmax(logits);
        let (pred, confidence) = argmax(&probs);
        GlobalPrediction {
            probs,
            pred,
            confidence,
        }
    }
}

/// Argmax with lowest-index tie-break.
pub fn argmax(values: &[f32]) -> (usize, f32) {
    let mut best = 0usize;
    let mut best_v = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    (best, best_v)
}

/// Backbone + GAP: the shared trunk. Returns (feature map, global feature).
pub fn forward_trunk(tape: &mut Tape, model: &ModelParams, image: &Tensor) -> Result<(Var, Var)> {
    let f = backbone::extract_features(
        tape,
        &model.store,
        &model.backbone,
        &model.backbone_cfg,
        image,
        &model.norm,
    )?;
    let g = tape.gap(f)?;
    Ok((f, g))
}

/// Two-layer global classifier. Returns the logit var and the prediction.
pub fn global_head(
    tape: &mut Tape,
    params: &ParamStore,
    ids: &GlobalHeadIds,
    g: Var,
) -> Result<(Var, GlobalPrediction)> {
    let h = tape.linear_relu(params, g, ids.w1, ids.b1)?;
    let logits = tape.linear(params, h, ids.w2, ids.b2)?;
    let pred = GlobalPrediction::from_logits(tape.value(logits).data());
    Ok((logits, pred))
}

/// Routing head: returns the scalar logit var, a, and p_roi = sigmoid(a).
pub fn routing_head(
    tape: &mut Tape,
    params: &ParamStore,
    ids: &RouteHeadIds,
    g: Var,
) -> Result<(Var, f32, f32)> {
    let h = tape.linear_relu(params, g, ids.w1, ids.b1)?;
    let logit = tape.linear(params, h, ids.w2, ids.b2)?;
    let a = tape.value(logit).item();
    Ok((logit, a, kernels::sigmoid(a)))
}

/// Mean-pool the selected positions and refine with a one-layer MLP.
/// Returns (pooled r, refined r_tilde).
pub fn roi_branch(
    tape: &mut Tape,
    params: &ParamStore,
    ids: &RoiHeadIds,
    f: Var,
    selection: &RoiSelection,
) -> Result<(Var, Var)> {
    let pooled = tape.mean_select(f, &selection.positions)?;
    let refined = tape.linear_relu(params, pooled, ids.w, ids.b)?;
    Ok((pooled, refined))
}

/// Fused classifier over [g; r_tilde]. Returns the logit var and probs.
pub fn fused_head(
    tape: &mut Tape,
    params: &ParamStore,
    ids: &FusedHeadIds,
    g: Var,
    refined: Var,
) -> Result<(Var, Vec<f32>)> {
    let u = tape.concat(g, refined);
    let h = tape.linear_relu(params, u, ids.w1, ids.b1)?;
    let logits = tape.linear(params, h, ids.w2, ids.b2)?;
    let probs = kernels::softmax(tape.value(logits).data());
    Ok((logits, probs))
}

/// Domain classifier behind the gradient reversal layer. Forward is
/// numerically identical for any lambda. Returns the logit var and probs q.
pub fn domain_head(
    tape: &mut Tape,
    params: &ParamStore,
    ids: &DomainHeadIds,
    g: Var,
    grl: GrlConfig,
) -> Result<(Var, Vec<f32>)> {
    if ids.n_domains < 2 {
        return Err(CdiraError::invalid("domain head needs >= 2 domains".to_string()));
    }
    let reversed = tape.grl(g, grl);
    let h = tape.linear_relu(params, reversed, ids.w1, ids.b1)?;
    let logits = tape.linear(params, h, ids.w2, ids.b2)?;
    let probs = kernels::softmax(tape.value(logits).data());
    Ok((logits, probs))
}
