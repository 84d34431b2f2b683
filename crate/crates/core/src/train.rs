//! Loss terms, routing supervision, the optimizer, and the full training
//! pipeline: global-head warm-up, pseudo-domain labeling on the warm
//! backbone snapshot, then joint training of all heads with early stopping
//! on validation total loss.
//!
//! During training the ROI path runs for every sample; routing only gates
//! inference. Batch parallelism keeps results bit-identical to sequential
//! execution: per-sample gradients are computed independently and reduced
//! in sample order.

use crate::autodiff::{kernels, GradStore, GrlConfig, ParamStore, Tape, Var};
use crate::backbone::BackboneConfig;
use crate::cluster::{self, ClusterModel, EmbeddingMatrix};
use crate::data::{Dataset, Split};
use crate::error::{CdiraError, Result};
use crate::model::{self, HeadConfig, ModelParams};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

use rand::Rng;

pub const WEIGHT_CLS_GLOBAL: f32 = 0.5;
pub const WEIGHT_CLS_FUSED: f32 = 1.0;
pub const WEIGHT_ROUTE: f32 = 0.5;
pub const WEIGHT_ROUTE_REG: f32 = 0.01;
pub const WEIGHT_DOMAIN: f32 = 0.5;

/// The five loss terms of one batch (unweighted means).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBundle {
    pub cls_g: f32,
    pub cls_f: f32,
    pub route: f32,
    pub route_reg: f32,
    pub dom: f32,
}

impl LossBundle {
    /// Weighted total; NaN anywhere is a training abort.
    pub fn total(&self) -> Result<f32> {
        let total = WEIGHT_CLS_GLOBAL * self.cls_g
            + WEIGHT_CLS_FUSED * self.cls_f
            + WEIGHT_ROUTE * self.route
            + WEIGHT_ROUTE_REG * self.route_reg
            + WEIGHT_DOMAIN * self.dom;
        if total.is_nan() {
            return Err(CdiraError::Diverged(format!("NaN loss: {self:?}")));
        }
        Ok(total)
    }
}

/// r*_i = 1 iff the global prediction is wrong or under-confident.
pub fn routing_labels(preds: &[usize], labels: &[usize], confs: &[f32], tau: f32) -> Vec<bool> {
    preds
        .iter()
        .zip(labels)
        .zip(confs)
        .map(|((&p, &y), &c)| p != y || c < tau)
        .collect()
}

/// w_pos = N_neg / N_pos when both are positive, else 1.
pub fn pos_weight(r_star: &[bool]) -> f32 {
    let n_pos = r_star.iter().filter(|&&r| r).count();
    let n_neg = r_star.len() - n_pos;
    if n_pos > 0 && n_neg > 0 {
        n_neg as f32 / n_pos as f32
    } else {
        1.0
    }
}

/// Weighted BCE over routing logits, via stable softplus.
pub fn route_loss(logits: &[f32], r_star: &[bool], w_pos: f32) -> f32 {
    let mut acc = 0.0f32;
    for (&a, &r) in logits.iter().zip(r_star) {
        let t = r as u8 as f32;
        acc += w_pos * t * kernels::softplus(-a) + (1.0 - t) * kernels::softplus(a);
    }
    acc / logits.len() as f32
}

/// Mean ROI usage probability; the regularizer that keeps routing sparse.
pub fn route_reg(logits: &[f32]) -> f32 {
    logits.iter().map(|&a| kernels::sigmoid(a)).sum::<f32>() / logits.len() as f32
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub grl_lambda: f32,
    pub tau: f32,
    pub warmup_epochs: usize,
    /// Train the GRL domain adversary (the ablated variant sets this false).
    pub adversarial: bool,
    /// Horizontal flip augmentation. Off by default: glyph position encodes
    /// the class, and mirroring destroys that semantic (as it would for
    /// left/right-handed behavior classes).
    pub hflip: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 50,
            patience: 5,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            grl_lambda: 1.0,
            tau: 0.9,
            warmup_epochs: 2,
            adversarial: true,
            hflip: false,
            seed: 0,
            threads: 8,
        }
    }
}

/// Per-epoch training record, serialized as one JSON line.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: &'static str,
    pub train: LossBundle,
    pub train_total: f32,
    pub route_positive_rate: f32,
    pub val: LossBundle,
    pub val_total: f32,
    pub val_accuracy: f32,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        format!(
            concat!(
                "{{\"epoch\":{},\"phase\":\"{}\",\"loss_cls_g\":{:.6},\"loss_cls_f\":{:.6},",
                "\"loss_route\":{:.6},\"loss_route_reg\":{:.6},\"loss_dom\":{:.6},",
                "\"loss_total\":{:.6},\"route_positive_rate\":{:.6},",
                "\"val_total\":{:.6},\"val_accuracy\":{:.6}}}"
            ),
            self.epoch,
            self.phase,
            self.train.cls_g,
            self.train.cls_f,
            self.train.route,
            self.train.route_reg,
            self.train.dom,
            self.train_total,
            self.route_positive_rate,
            self.val_total,
            self.val_accuracy,
        )
    }
}

pub fn history_to_jsonl(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

/// Early stopping on a minimized metric; strict improvement resets patience.
pub struct EarlyStopper {
    best: f32,
    best_epoch: usize,
    bad: usize,
    patience: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            best: f32::INFINITY,
            best_epoch: 0,
            bad: 0,
            patience,
        }
    }

    /// Record this epoch's value; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, value: f32) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.bad = 0;
            false
        } else {
            self.bad += 1;
            self.bad >= self.patience
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Adam with decoupled weight decay.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Adam {
        Adam {
            m: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f32, weight_decay: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..self.m.len() {
            let id = crate::autodiff::ParamId(idx);
            let g = grads.grad(id).data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = params.tensor_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * p[j]);
            }
        }
    }
}

/// Contiguous-chunk thread pool map. Results come back in input order, so
/// downstream reductions are independent of the thread count.
pub fn parallel_map<T, R, F>(inputs: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    let n = inputs.len();
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 {
        return inputs.into_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut chunks: Vec<(usize, Vec<T>)> = Vec::new();
    let mut iter = inputs.into_iter();
    let mut base = 0usize;
    while base < n {
        let items: Vec<T> = iter.by_ref().take(chunk).collect();
        if items.is_empty() {
            break;
        }
        let len = items.len();
        chunks.push((base, items));
        base += len;
    }
    let f_ref = &f;
    let mut results: Vec<(usize, Vec<R>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|(start, items)| {
                scope.spawn(move || {
                    let rs: Vec<R> = items
                        .into_iter()
                        .enumerate()
                        .map(|(i, t)| f_ref(start + i, t))
                        .collect();
                    (start, rs)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    results.sort_by_key(|(start, _)| *start);
    results.into_iter().flat_map(|(_, rs)| rs).collect()
}

/// GAP embeddings of the given samples under the current (frozen) backbone.
pub fn embed_dataset(
    model: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    threads: usize,
) -> Result<EmbeddingMatrix> {
    if indices.is_empty() {
        return Err(CdiraError::Data("cannot embed an empty dataset".into()));
    }
    let c_f = model.feature_channels();
    let rows: Vec<Result<Vec<f32>>> = parallel_map(indices.to_vec(), threads, |_, idx| {
        let image = dataset.image_tensor(idx);
        let mut tape = Tape::new();
        let (_, g) = model::forward_trunk(&mut tape, model, &image)?;
        Ok(tape.value(g).data().to_vec())
    });
    let mut data = Vec::with_capacity(indices.len() * c_f);
    for row in rows {
        data.extend_from_slice(&row?);
    }
    EmbeddingMatrix::new(indices.len(), c_f, data)
}

/// Forward state of one training sample, all paths evaluated.
struct TrainForward {
    tape: Tape,
    global_logits: Var,
    pred: usize,
    confidence: f32,
    route_logit: Var,
    fused_logits: Var,
    fused_pred: usize,
    domain_logits: Option<Var>,
    label: usize,
    domain: usize,
}

fn forward_training(
    model: &ModelParams,
    image: &Tensor,
    label: usize,
    domain: usize,
    with_domain_head: bool,
    grl_lambda: f32,
) -> Result<TrainForward> {
    let mut tape = Tape::new();
    let (f, g) = model::forward_trunk(&mut tape, model, image)?;
    let (global_logits, gp) = model::global_head(&mut tape, &model.store, &model.global, g)?;
    let (route_logit, _, _) = model::routing_head(&mut tape, &model.store, &model.route, g)?;
    let sal = model::saliency(tape.value(f));
    let sel = model::top_k_positions(&sal, model.top_k())?;
    let (_, refined) = model::roi_branch(&mut tape, &model.store, &model.roi, f, &sel)?;
    let (fused_logits, fused_probs) =
        model::fused_head(&mut tape, &model.store, &model.fused, g, refined)?;
    let domain_logits = if with_domain_head {
        let ids = model
            .domain
            .ok_or_else(|| CdiraError::invalid("domain head missing".to_string()))?;
        let (d_logits, _) =
            model::domain_head(&mut tape, &model.store, &ids, g, GrlConfig::new(grl_lambda)?)?;
        Some(d_logits)
    } else {
        None
    };
    let (fused_pred, _) = model::argmax(&fused_probs);
    Ok(TrainForward {
        tape,
        global_logits,
        pred: gp.pred,
        confidence: gp.confidence,
        route_logit,
        fused_logits,
        fused_pred,
        domain_logits,
        label,
        domain,
    })
}

/// Raw per-sample loss values (unweighted).
#[derive(Debug, Clone, Copy)]
struct SampleLosses {
    cls_g: f32,
    cls_f: f32,
    route: f32,
    route_reg: f32,
    dom: f32,
}

/// Append the weighted per-sample loss graph and run backward with seed 1/B.
fn backward_sample(
    model: &ModelParams,
    mut fw: TrainForward,
    r_star: bool,
    w_pos: f32,
    inv_batch: f32,
) -> Result<(GradStore, SampleLosses)> {
    let tape = &mut fw.tape;
    let (ce_g, _) = tape.softmax_xent(fw.global_logits, fw.label)?;
    let (ce_f, _) = tape.softmax_xent(fw.fused_logits, fw.label)?;
    let bce = tape.bce_logit(fw.route_logit, r_star as u8 as f32, w_pos)?;
    let reg = tape.sigmoid(fw.route_logit);
    let mut terms = vec![
        (ce_g, WEIGHT_CLS_GLOBAL),
        (ce_f, WEIGHT_CLS_FUSED),
        (bce, WEIGHT_ROUTE),
        (reg, WEIGHT_ROUTE_REG),
    ];
    let mut dom_value = 0.0f32;
    if let Some(d_logits) = fw.domain_logits {
        let (ce_d, _) = tape.softmax_xent(d_logits, fw.domain)?;
        terms.push((ce_d, WEIGHT_DOMAIN));
        dom_value = tape.value(ce_d).item();
    }
    let total = tape.weighted_sum(&terms)?;
    let mut grads = GradStore::zeros_like(&model.store);
    tape.backward(total, inv_batch, &model.store, &mut grads)?;
    Ok((
        grads,
        SampleLosses {
            cls_g: tape.value(ce_g).item(),
            cls_f: tape.value(ce_f).item(),
            route: tape.value(bce).item(),
            route_reg: tape.value(reg).item(),
            dom: dom_value,
        },
    ))
}

/// Forward state of one warm-up sample (global path only).
struct WarmForward {
    tape: Tape,
    global_logits: Var,
    label: usize,
}

fn backward_warmup(
    model: &ModelParams,
    mut fw: WarmForward,
    inv_batch: f32,
) -> Result<(GradStore, f32)> {
    let (ce_g, _) = fw.tape.softmax_xent(fw.global_logits, fw.label)?;
    let total = fw.tape.scale(ce_g, WEIGHT_CLS_GLOBAL);
    let mut grads = GradStore::zeros_like(&model.store);
    fw.tape.backward(total, inv_batch, &model.store, &mut grads)?;
    Ok((grads, fw.tape.value(ce_g).item()))
}

fn shuffled_indices(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut out = indices.to_vec();
    let mut rng = stream_rng(seed, Stream::Batching, epoch);
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    out
}

fn maybe_flip(image: Tensor, flip: bool) -> Tensor {
    if !flip {
        return image;
    }
    let shape = image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = image.data();
    let mut data = vec![0.0f32; src.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(ci * h + y) * w + x] = src[(ci * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::from_vec(&shape, data).expect("same size")
}

/// One optimizer step over a batch; returns batch losses and the positive
/// routing-label count.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut ModelParams,
    adam: &mut Adam,
    dataset: &Dataset,
    batch: &[usize],
    domains: &[usize],
    flips: &[bool],
    cfg: &TrainConfig,
    warmup: bool,
) -> Result<(LossBundle, usize)> {
    let b = batch.len();
    let inv_b = 1.0 / b as f32;
    let model_ref = &*model;

    if warmup {
        let inputs: Vec<(usize, bool)> = batch.iter().copied().zip(flips.iter().copied()).collect();
        let fwds: Vec<Result<WarmForward>> = parallel_map(inputs, cfg.threads, |_, (idx, flip)| {
            let image = maybe_flip(dataset.image_tensor(idx), flip);
            let mut tape = Tape::new();
            let (_, g) = model::forward_trunk(&mut tape, model_ref, &image)?;
            let (global_logits, _) =
                model::global_head(&mut tape, &model_ref.store, &model_ref.global, g)?;
            Ok(WarmForward {
                tape,
                global_logits,
                label: dataset.samples[idx].label,
            })
        });
        let mut packs = Vec::with_capacity(b);
        for fw in fwds {
            packs.push(fw?);
        }
        let results: Vec<Result<(GradStore, f32)>> =
            parallel_map(packs, cfg.threads, |_, fw| backward_warmup(model_ref, fw, inv_b));
        let mut total = GradStore::zeros_like(&model.store);
        let mut ce_sum = 0.0f32;
        for r in results {
            let (g, ce) = r?;
            total.add_assign(&g);
            ce_sum += ce;
        }
        let bundle = LossBundle {
            cls_g: ce_sum * inv_b,
            ..LossBundle::default()
        };
        bundle.total()?;
        adam.step(&mut model.store, &total, cfg.lr, cfg.weight_decay);
        return Ok((bundle, 0));
    }

    let with_domain = cfg.adversarial && model.domain.is_some();
    let inputs: Vec<(usize, bool)> = batch.iter().copied().zip(flips.iter().copied()).collect();
    let fwds: Vec<Result<TrainForward>> = parallel_map(inputs, cfg.threads, |_, (idx, flip)| {
        let image = maybe_flip(dataset.image_tensor(idx), flip);
        forward_training(
            model_ref,
            &image,
            dataset.samples[idx].label,
            domains[idx],
            with_domain,
            cfg.grl_lambda,
        )
    });
    let mut packs = Vec::with_capacity(b);
    for fw in fwds {
        packs.push(fw?);
    }

    let preds: Vec<usize> = packs.iter().map(|p| p.pred).collect();
    let labels: Vec<usize> = packs.iter().map(|p| p.label).collect();
    let confs: Vec<f32> = packs.iter().map(|p| p.confidence).collect();
    let r_star = routing_labels(&preds, &labels, &confs, cfg.tau);
    let w_pos = pos_weight(&r_star);
    let n_pos = r_star.iter().filter(|&&r| r).count();

    let jobs: Vec<(TrainForward, bool)> = packs.into_iter().zip(r_star.iter().copied()).collect();
    let results: Vec<Result<(GradStore, SampleLosses)>> =
        parallel_map(jobs, cfg.threads, |_, (fw, r)| {
            backward_sample(model_ref, fw, r, w_pos, inv_b)
        });

    let mut total = GradStore::zeros_like(&model.store);
    let mut bundle = LossBundle::default();
    for r in results {
        let (g, losses) = r?;
        total.add_assign(&g);
        bundle.cls_g += losses.cls_g;
        bundle.cls_f += losses.cls_f;
        bundle.route += losses.route;
        bundle.route_reg += losses.route_reg;
        bundle.dom += losses.dom;
    }
    bundle.cls_g *= inv_b;
    bundle.cls_f *= inv_b;
    bundle.route *= inv_b;
    bundle.route_reg *= inv_b;
    bundle.dom *= inv_b;
    bundle.total()?;

    adam.step(&mut model.store, &total, cfg.lr, cfg.weight_decay);
    Ok((bundle, n_pos))
}

/// Validation losses and fused-path accuracy, the whole split as one batch.
fn validate(
    model: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    domains: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBundle, f32, f32)> {
    let with_domain = cfg.adversarial && model.domain.is_some();
    let model_ref = model;
    let outs: Vec<Result<(f32, f32, f32, usize, f32, f32, bool)>> =
        parallel_map(indices.to_vec(), cfg.threads, |_, idx| {
            let image = dataset.image_tensor(idx);
            let label = dataset.samples[idx].label;
            let mut fw = forward_training(
                model_ref,
                &image,
                label,
                domains[idx],
                with_domain,
                cfg.grl_lambda,
            )?;
            let (ce_g, _) = fw.tape.softmax_xent(fw.global_logits, label)?;
            let (ce_f, _) = fw.tape.softmax_xent(fw.fused_logits, label)?;
            let dom = match fw.domain_logits {
                Some(d) => {
                    let (ce_d, _) = fw.tape.softmax_xent(d, domains[idx])?;
                    fw.tape.value(ce_d).item()
                }
                None => 0.0,
            };
            Ok((
                fw.tape.value(ce_g).item(),
                fw.tape.value(ce_f).item(),
                dom,
                fw.pred,
                fw.confidence,
                fw.tape.value(fw.route_logit).item(),
                fw.fused_pred == label,
            ))
        });
    let n = indices.len();
    let mut bundle = LossBundle::default();
    let mut logits = Vec::with_capacity(n);
    let mut preds = Vec::with_capacity(n);
    let mut confs = Vec::with_capacity(n);
    let mut correct = 0usize;
    for out in outs {
        let (ce_g, ce_f, dom, pred, conf, route_logit, fused_ok) = out?;
        bundle.cls_g += ce_g;
        bundle.cls_f += ce_f;
        bundle.dom += dom;
        logits.push(route_logit);
        preds.push(pred);
        confs.push(conf);
        correct += fused_ok as usize;
    }
    bundle.cls_g /= n as f32;
    bundle.cls_f /= n as f32;
    bundle.dom /= n as f32;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].label).collect();
    let r_star = routing_labels(&preds, &labels, &confs, cfg.tau);
    let w_pos = pos_weight(&r_star);
    bundle.route = route_loss(&logits, &r_star, w_pos);
    bundle.route_reg = route_reg(&logits);
    let total = bundle.total()?;
    Ok((bundle, total, correct as f32 / n as f32))
}

/// Outcome of a pipeline run.
pub struct TrainOutcome {
    pub model: ModelParams,
    pub cluster: Option<ClusterModel>,
    /// Pseudo-domain label per dataset sample index.
    pub pseudo_domains: Vec<usize>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub diverged: bool,
}

pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub train: TrainConfig,
    pub cluster_candidates: Vec<usize>,
    pub cluster_sample_size: usize,
}

impl PipelineConfig {
    pub fn desk_default(n_classes: usize) -> PipelineConfig {
        PipelineConfig {
            backbone: BackboneConfig::default(),
            heads: HeadConfig::with_defaults(n_classes),
            train: TrainConfig::default(),
            cluster_candidates: vec![4, 6, 8, 10, 12, 16, 20, 24, 30],
            cluster_sample_size: 5000,
        }
    }
}

/// Warm-up, pseudo-domain labeling (on the warm backbone snapshot), domain
/// head attach, then joint training. The returned model is the best
/// validation checkpoint.
pub fn train_pipeline(dataset: &Dataset, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let mut model = ModelParams::new(cfg.backbone.clone(), cfg.heads.clone(), cfg.train.seed)?;
    model.norm = crate::data::compute_norm_stats(dataset)?;

    let train_idx = dataset.split_indices(Split::Train);
    let val_idx = dataset.split_indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(CdiraError::Data("need nonempty train and val splits".into()));
    }

    let mut history = Vec::new();
    let dummy_domains = vec![0usize; dataset.samples.len()];

    // Phase 1: warm-up with only the global classification loss.
    let mut adam = Adam::new(&model.store);
    for epoch in 1..=cfg.train.warmup_epochs {
        let (bundle, _) = run_epoch(
            &mut model,
            &mut adam,
            dataset,
            &train_idx,
            &dummy_domains,
            &cfg.train,
            epoch as u64,
            true,
        )?;
        let (val_bundle, val_total, val_acc) = validate_warmup(
            &model,
            dataset,
            &val_idx,
            &cfg.train,
        )?;
        history.push(EpochRecord {
            epoch,
            phase: "warmup",
            train: bundle,
            train_total: bundle.total()?,
            route_positive_rate: 0.0,
            val: val_bundle,
            val_total,
            val_accuracy: val_acc,
        });
    }

    // Phase 2: pseudo-domain labeling on the frozen warm-up snapshot.
    let all_idx: Vec<usize> = (0..dataset.samples.len()).collect();
    let z_train = embed_dataset(&model, dataset, &train_idx, cfg.train.threads)?;
    let (cluster_model, train_assignments) = cluster::fit_cluster_model(
        &z_train,
        &cfg.cluster_candidates,
        cfg.cluster_sample_size,
        cfg.train.seed,
    )?;
    let mut pseudo_domains = vec![0usize; dataset.samples.len()];
    for (&idx, &d) in train_idx.iter().zip(&train_assignments) {
        pseudo_domains[idx] = d;
    }
    let rest: Vec<usize> = all_idx
        .iter()
        .copied()
        .filter(|i| dataset.samples[*i].split != Split::Train)
        .collect();
    if !rest.is_empty() {
        let z_rest = embed_dataset(&model, dataset, &rest, cfg.train.threads)?;
        let rest_assignments = cluster::assign_domains(&z_rest, &cluster_model)?;
        for (&idx, &d) in rest.iter().zip(&rest_assignments) {
            pseudo_domains[idx] = d;
        }
    }

    if cfg.train.adversarial {
        model.add_domain_head(cluster_model.k_star.max(2), cfg.train.seed)?;
    }

    // Phase 3: joint training with early stopping on validation total loss.
    let outcome = run_joint_training(
        model,
        dataset,
        &train_idx,
        &val_idx,
        &pseudo_domains,
        &cfg.train,
        history,
    )?;
    Ok(TrainOutcome {
        model: outcome.0,
        cluster: Some(cluster_model),
        pseudo_domains,
        history: outcome.2,
        best_epoch: outcome.1,
        diverged: outcome.3,
    })
}

/// Joint training with externally supplied pseudo-domain labels and cluster
/// count (used by the leave-one-cluster-out harness to avoid re-clustering).
pub fn train_with_fixed_domains(
    dataset: &Dataset,
    pseudo_domains: &[usize],
    k_star: usize,
    cfg: &PipelineConfig,
) -> Result<TrainOutcome> {
    let mut model = ModelParams::new(cfg.backbone.clone(), cfg.heads.clone(), cfg.train.seed)?;
    model.norm = crate::data::compute_norm_stats(dataset)?;
    let train_idx = dataset.split_indices(Split::Train);
    let val_idx = dataset.split_indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(CdiraError::Data("need nonempty train and val splits".into()));
    }

    let mut history = Vec::new();
    let mut adam = Adam::new(&model.store);
    for epoch in 1..=cfg.train.warmup_epochs {
        let (bundle, _) = run_epoch(
            &mut model,
            &mut adam,
            dataset,
            &train_idx,
            pseudo_domains,
            &cfg.train,
            epoch as u64,
            true,
        )?;
        let (val_bundle, val_total, val_acc) =
            validate_warmup(&model, dataset, &val_idx, &cfg.train)?;
        history.push(EpochRecord {
            epoch,
            phase: "warmup",
            train: bundle,
            train_total: bundle.total()?,
            route_positive_rate: 0.0,
            val: val_bundle,
            val_total,
            val_accuracy: val_acc,
        });
    }
    if cfg.train.adversarial {
        model.add_domain_head(k_star.max(2), cfg.train.seed)?;
    }
    let (model, best_epoch, history, diverged) = run_joint_training(
        model,
        dataset,
        &train_idx,
        &val_idx,
        pseudo_domains,
        &cfg.train,
        history,
    )?;
    Ok(TrainOutcome {
        model,
        cluster: None,
        pseudo_domains: pseudo_domains.to_vec(),
        history,
        best_epoch,
        diverged,
    })
}

type JointResult = (ModelParams, usize, Vec<EpochRecord>, bool);

#[allow(clippy::too_many_arguments)]
fn run_joint_training(
    mut model: ModelParams,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    domains: &[usize],
    cfg: &TrainConfig,
    mut history: Vec<EpochRecord>,
) -> Result<JointResult> {
    let mut adam = Adam::new(&model.store);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_model = model.clone();
    let mut diverged = false;

    for epoch in 1..=cfg.max_epochs {
        let seed_epoch = cfg.warmup_epochs as u64 + epoch as u64;
        let step = run_epoch(
            &mut model,
            &mut adam,
            dataset,
            train_idx,
            domains,
            cfg,
            seed_epoch,
            false,
        );
        let (bundle, pos_rate) = match step {
            Ok(v) => v,
            Err(CdiraError::Diverged(msg)) => {
                eprintln!("training diverged at epoch {epoch}: {msg}");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let val = validate(&model, dataset, val_idx, domains, cfg);
        let (val_bundle, val_total, val_acc) = match val {
            Ok(v) => v,
            Err(CdiraError::Diverged(msg)) => {
                eprintln!("validation diverged at epoch {epoch}: {msg}");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch,
            phase: "train",
            train: bundle,
            train_total: bundle.total()?,
            route_positive_rate: pos_rate,
            val: val_bundle,
            val_total,
            val_accuracy: val_acc,
        });
        let stop = stopper.observe(epoch, val_total);
        if stopper.best_epoch() == epoch {
            best_model = model.clone();
        }
        if stop {
            break;
        }
    }
    if stopper.best_epoch() == 0 {
        // divergence before any completed epoch: keep the initial weights
        best_model = model;
    }
    Ok((best_model, stopper.best_epoch(), history, diverged))
}

/// One pass over the training split; returns mean losses and the routing
/// positive rate.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut ModelParams,
    adam: &mut Adam,
    dataset: &Dataset,
    train_idx: &[usize],
    domains: &[usize],
    cfg: &TrainConfig,
    epoch_stream: u64,
    warmup: bool,
) -> Result<(LossBundle, f32)> {
    let order = shuffled_indices(train_idx, cfg.seed, epoch_stream);
    let mut flip_rng = stream_rng(cfg.seed, Stream::Batching, epoch_stream ^ 0x8000_0000_0000_0000);
    let flips: Vec<bool> = order
        .iter()
        .map(|_| cfg.hflip && flip_rng.random_range(0.0..1.0f32) < 0.5)
        .collect();

    let mut sums = LossBundle::default();
    let mut n_pos = 0usize;
    let mut n_seen = 0usize;
    for (batch, batch_flips) in order
        .chunks(cfg.batch_size)
        .zip(flips.chunks(cfg.batch_size))
    {
        let (bundle, pos) =
            train_batch(model, adam, dataset, batch, domains, batch_flips, cfg, warmup)?;
        let b = batch.len() as f32;
        sums.cls_g += bundle.cls_g * b;
        sums.cls_f += bundle.cls_f * b;
        sums.route += bundle.route * b;
        sums.route_reg += bundle.route_reg * b;
        sums.dom += bundle.dom * b;
        n_pos += pos;
        n_seen += batch.len();
    }
    let inv = 1.0 / n_seen as f32;
    sums.cls_g *= inv;
    sums.cls_f *= inv;
    sums.route *= inv;
    sums.route_reg *= inv;
    sums.dom *= inv;
    Ok((sums, n_pos as f32 * inv))
}

/// Warm-up validation: global CE and global-path accuracy only.
fn validate_warmup(
    model: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossBundle, f32, f32)> {
    let outs: Vec<Result<(f32, bool)>> = parallel_map(indices.to_vec(), cfg.threads, |_, idx| {
        let image = dataset.image_tensor(idx);
        let label = dataset.samples[idx].label;
        let mut tape = Tape::new();
        let (_, g) = model::forward_trunk(&mut tape, model, &image)?;
        let (logits, gp) = model::global_head(&mut tape, &model.store, &model.global, g)?;
        let (ce, _) = tape.softmax_xent(logits, label)?;
        Ok((tape.value(ce).item(), gp.pred == label))
    });
    let mut ce_sum = 0.0f32;
    let mut correct = 0usize;
    let n = indices.len();
    for out in outs {
        let (ce, ok) = out?;
        ce_sum += ce;
        correct += ok as usize;
    }
    let bundle = LossBundle {
        cls_g: ce_sum / n as f32,
        ..LossBundle::default()
    };
    let total = bundle.total()?;
    Ok((bundle, total, correct as f32 / n as f32))
}

#[cfg(test)]
mod tests;
