//! Dynamic-routing inference, metrics, threshold sweeps, class-wise ROI
//! usage, robustness curves, and saliency overlays.
//!
//! Inference follows the two-branch scheme: the global path (backbone, GAP,
//! global head, routing head) always runs; the ROI branch (saliency, Top-K
//! pooling, refinement, fused head) runs only for gated samples. In
//! confidence mode a sample is easy when c_g >= tau; tau >= 1 is a sentinel
//! forcing every sample through the fused path.

use std::path::Path;
use std::time::Instant;

use crate::autodiff::kernels;
use crate::data::Dataset;
use crate::degrade::{degrade, DegradeKind, DegradeSpec};
use crate::error::{CdiraError, Result};
use crate::flops::FlopsBreakdown;
use crate::imageio::{self, RgbImage};
use crate::model::{self, ModelParams, RoiSelection, SaliencyMap};
use crate::tensor::Tensor;
use crate::train::parallel_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteMode {
    /// Gate on global confidence c_g >= tau (the default inference rule).
    Confidence,
    /// Gate on the trained routing head: fused iff p_roi >= 0.5.
    RoutingHead,
}

impl RouteMode {
    pub fn tag(self) -> &'static str {
        match self {
            RouteMode::Confidence => "confidence",
            RouteMode::RoutingHead => "routing-head",
        }
    }

    pub fn from_tag(tag: &str) -> Result<RouteMode> {
        match tag {
            "confidence" => Ok(RouteMode::Confidence),
            "routing-head" => Ok(RouteMode::RoutingHead),
            other => Err(CdiraError::invalid(format!("unknown route mode {other:?}"))),
        }
    }
}

/// True when the sample stays on the global path in confidence mode.
pub fn takes_global_path(confidence: f32, tau: f32) -> bool {
    tau < 1.0 && confidence >= tau
}

/// Routing evidence for one inference call.
#[derive(Debug, Clone)]
pub struct RouteRecord {
    pub sample_id: u32,
    pub label: usize,
    pub pred: usize,
    pub confidence: f32,
    pub route_logit: f32,
    pub p_roi: f32,
    pub fused_path: bool,
    pub flops_charged: u64,
    /// Wall-clock seconds; informational only, never written to CSVs.
    pub latency_s: f64,
}

pub struct InferOutcome {
    pub record: RouteRecord,
    /// Count of ROI-branch graph ops evaluated (selection pooling + concat);
    /// zero on the easy branch.
    pub roi_op_count: usize,
}

/// Single-image inference with dynamic ROI routing.
pub fn infer(
    model: &ModelParams,
    flops: &FlopsBreakdown,
    image: &Tensor,
    tau: f32,
    mode: RouteMode,
) -> Result<InferOutcome> {
    let started = Instant::now();
    let mut tape = crate::autodiff::Tape::new();
    let (f, g) = model::forward_trunk(&mut tape, model, image)?;
    let (_, gp) = model::global_head(&mut tape, &model.store, &model.global, g)?;
    let (_, route_logit, p_roi) = model::routing_head(&mut tape, &model.store, &model.route, g)?;

    let easy = match mode {
        RouteMode::Confidence => takes_global_path(gp.confidence, tau),
        RouteMode::RoutingHead => p_roi < 0.5,
    };
    let (pred, fused_path, flops_charged) = if easy {
        (gp.pred, false, flops.global_path)
    } else {
        let sal = model::saliency(tape.value(f));
        let sel = model::top_k_positions(&sal, model.top_k())?;
        let (_, refined) = model::roi_branch(&mut tape, &model.store, &model.roi, f, &sel)?;
        let (_, probs) = model::fused_head(&mut tape, &model.store, &model.fused, g, refined)?;
        let (pred, _) = model::argmax(&probs);
        (pred, true, flops.global_path + flops.roi_extra)
    };
    let roi_op_count = tape.op_count(crate::autodiff::OpKind::MeanSelect)
        + tape.op_count(crate::autodiff::OpKind::Concat);
    Ok(InferOutcome {
        record: RouteRecord {
            sample_id: 0,
            label: 0,
            pred,
            confidence: gp.confidence,
            route_logit,
            p_roi,
            fused_path,
            flops_charged,
            latency_s: started.elapsed().as_secs_f64(),
        },
        roi_op_count,
    })
}

/// Inference over a set of samples; records are ordered by position in
/// `indices` and stamped with sample ids and labels.
pub fn eval_dataset(
    model: &ModelParams,
    flops: &FlopsBreakdown,
    dataset: &Dataset,
    indices: &[usize],
    tau: f32,
    mode: RouteMode,
    threads: usize,
) -> Result<Vec<RouteRecord>> {
    let flops = *flops;
    let outs: Vec<Result<RouteRecord>> = parallel_map(indices.to_vec(), threads, move |_, idx| {
        let image = dataset.image_tensor(idx);
        let out = infer(model, &flops, &image, tau, mode)?;
        let mut record = out.record;
        record.sample_id = dataset.samples[idx].id;
        record.label = dataset.samples[idx].label;
        Ok(record)
    });
    outs.into_iter().collect()
}

/// Per-class tally.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub support: usize,
}

/// Macro-averaged classification metrics with the 0/0 -> 0 convention.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassCounts>,
    /// Classes absent from both labels and predictions; they contribute 0 to
    /// every macro average.
    pub degenerate_classes: Vec<usize>,
}

pub fn metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(CdiraError::invalid(
            "metrics need equal, nonempty prediction and label lists".to_string(),
        ));
    }
    let mut per_class = vec![ClassCounts::default(); n_classes];
    let mut correct = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(CdiraError::invalid(format!(
                "class index out of range: pred {p}, label {y}, n_classes {n_classes}"
            )));
        }
        per_class[y].support += 1;
        if p == y {
            per_class[y].tp += 1;
            correct += 1;
        } else {
            per_class[p].fp += 1;
            per_class[y].fn_ += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut macro_p = 0.0;
    let mut macro_r = 0.0;
    let mut macro_f1 = 0.0;
    let mut degenerate = Vec::new();
    for (c, counts) in per_class.iter().enumerate() {
        let p = ratio(counts.tp, counts.tp + counts.fp);
        let r = ratio(counts.tp, counts.tp + counts.fn_);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        macro_p += p;
        macro_r += r;
        macro_f1 += f1;
        if counts.support == 0 && counts.fp == 0 {
            degenerate.push(c);
        }
    }
    let k = n_classes as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / preds.len() as f64,
        macro_precision: macro_p / k,
        macro_recall: macro_r / k,
        macro_f1: macro_f1 / k,
        per_class,
        degenerate_classes: degenerate,
    })
}

/// Fused-path usage, overall and per true class.
pub fn classwise_roi_usage(records: &[RouteRecord], n_classes: usize) -> (f64, Vec<f64>) {
    let mut fused = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for r in records {
        total[r.label] += 1;
        fused[r.label] += r.fused_path as usize;
    }
    let per_class: Vec<f64> = fused
        .iter()
        .zip(&total)
        .map(|(&f, &t)| if t == 0 { 0.0 } else { f as f64 / t as f64 })
        .collect();
    let overall = records.iter().filter(|r| r.fused_path).count() as f64 / records.len() as f64;
    (overall, per_class)
}

/// Everything needed to replay routing decisions for any threshold.
#[derive(Debug, Clone)]
pub struct SweepSample {
    pub label: usize,
    pub global_pred: usize,
    pub fused_pred: usize,
    pub confidence: f32,
    pub p_roi: f32,
}

/// One full-path forward per sample; thresholds are applied afterwards,
/// which matches per-threshold inference exactly because the gate only
/// selects between the two precomputed predictions.
pub fn collect_sweep_outputs(
    model: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    threads: usize,
) -> Result<Vec<SweepSample>> {
    let outs: Vec<Result<SweepSample>> = parallel_map(indices.to_vec(), threads, |_, idx| {
        let image = dataset.image_tensor(idx);
        let mut tape = crate::autodiff::Tape::new();
        let (f, g) = model::forward_trunk(&mut tape, model, &image)?;
        let (_, gp) = model::global_head(&mut tape, &model.store, &model.global, g)?;
        let (_, _, p_roi) = model::routing_head(&mut tape, &model.store, &model.route, g)?;
        let sal = model::saliency(tape.value(f));
        let sel = model::top_k_positions(&sal, model.top_k())?;
        let (_, refined) = model::roi_branch(&mut tape, &model.store, &model.roi, f, &sel)?;
        let (_, probs) = model::fused_head(&mut tape, &model.store, &model.fused, g, refined)?;
        let (fused_pred, _) = model::argmax(&probs);
        Ok(SweepSample {
            label: dataset.samples[idx].label,
            global_pred: gp.pred,
            fused_pred,
            confidence: gp.confidence,
            p_roi,
        })
    });
    outs.into_iter().collect()
}

#[derive(Debug, Clone, Copy)]
pub struct TauSweepRow {
    pub tau: f32,
    pub macro_f1: f64,
    pub usage: f64,
    /// Expected per-sample FLOPs at this threshold.
    pub expected_flops: f64,
}

pub fn tau_sweep_rows(
    outputs: &[SweepSample],
    grid: &[f32],
    n_classes: usize,
    flops: &FlopsBreakdown,
) -> Result<Vec<TauSweepRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &tau in grid {
        let mut preds = Vec::with_capacity(outputs.len());
        let mut fused_count = 0usize;
        for s in outputs {
            if takes_global_path(s.confidence, tau) {
                preds.push(s.global_pred);
            } else {
                preds.push(s.fused_pred);
                fused_count += 1;
            }
        }
        let labels: Vec<usize> = outputs.iter().map(|s| s.label).collect();
        let report = metrics(&preds, &labels, n_classes)?;
        let usage = fused_count as f64 / outputs.len() as f64;
        rows.push(TauSweepRow {
            tau,
            macro_f1: report.macro_f1,
            usage,
            expected_flops: flops.global_path as f64 + usage * flops.roi_extra as f64,
        });
    }
    Ok(rows)
}

/// The default threshold grid 0.1..=0.9 step 0.1.
pub fn default_tau_grid() -> Vec<f32> {
    (1..=9).map(|i| i as f32 / 10.0).collect()
}

pub fn write_tau_sweep_csv(path: &Path, rows: &[TauSweepRow], config_hash: u32) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash=0x{config_hash:08x}\n"));
    out.push_str("tau,macro_f1,roi_usage,expected_flops\n");
    for r in rows {
        out.push_str(&format!(
            "{:.2},{:.6},{:.6},{:.1}\n",
            r.tau, r.macro_f1, r.usage, r.expected_flops
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn plot_tau_sweep(path: &Path, rows: &[TauSweepRow]) -> Result<()> {
    let f1_series = imageio::PlotSeries {
        points: rows.iter().map(|r| (r.tau as f64, r.macro_f1)).collect(),
        color: [200, 40, 40],
    };
    let usage_series = imageio::PlotSeries {
        points: rows.iter().map(|r| (r.tau as f64, r.usage)).collect(),
        color: [40, 80, 200],
    };
    imageio::line_plot(path, &[f1_series, usage_series], 640, 420)
}

#[derive(Debug, Clone)]
pub struct RobustnessRow {
    pub kind: DegradeKind,
    pub severity: u32,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy/F1 under each degradation and severity, inferring with dynamic
/// routing at `tau`.
#[allow(clippy::too_many_arguments)]
pub fn robustness_eval(
    model: &ModelParams,
    flops: &FlopsBreakdown,
    dataset: &Dataset,
    indices: &[usize],
    kinds: &[DegradeKind],
    severities: &[u32],
    tau: f32,
    mode: RouteMode,
    degrade_seed: u64,
    threads: usize,
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        for &severity in severities {
            let flops_copy = *flops;
            let outs: Vec<Result<(usize, usize)>> =
                parallel_map(indices.to_vec(), threads, |_, idx| {
                    let clean = dataset.image_tensor(idx);
                    let spec = DegradeSpec {
                        kind,
                        severity,
                        seed: degrade_seed ^ dataset.samples[idx].id as u64,
                    };
                    let image = degrade(&clean, &spec)?;
                    let out = infer(model, &flops_copy, &image, tau, mode)?;
                    Ok((out.record.pred, dataset.samples[idx].label))
                });
            let mut preds = Vec::with_capacity(indices.len());
            let mut labels = Vec::with_capacity(indices.len());
            for o in outs {
                let (p, y) = o?;
                preds.push(p);
                labels.push(y);
            }
            let report = metrics(&preds, &labels, dataset.n_classes)?;
            rows.push(RobustnessRow {
                kind,
                severity,
                accuracy: report.accuracy,
                macro_f1: report.macro_f1,
            });
        }
    }
    Ok(rows)
}

pub fn write_robustness_csv(path: &Path, rows: &[RobustnessRow], config_hash: u32) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash=0x{config_hash:08x}\n"));
    out.push_str("kind,severity,accuracy,f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.kind.tag(),
            r.severity,
            r.accuracy,
            r.macro_f1
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn plot_robustness(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    let palette: [[u8; 3]; 4] = [[200, 40, 40], [40, 80, 200], [30, 150, 60], [150, 90, 20]];
    let mut series = Vec::new();
    for (i, kind) in DegradeKind::all().iter().enumerate() {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.kind == *kind)
            .map(|r| (r.severity as f64, r.accuracy))
            .collect();
        if !points.is_empty() {
            series.push(imageio::PlotSeries {
                points,
                color: palette[i % palette.len()],
            });
        }
    }
    imageio::line_plot(path, &series, 640, 420)
}

/// Saliency center of mass in image-pixel coordinates; None for an all-zero
/// map.
pub fn saliency_center_of_mass(sal: &SaliencyMap, image_size: usize) -> Option<(f32, f32)> {
    let total: f64 = sal.values.iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return None;
    }
    let cell_h = image_size as f32 / sal.h as f32;
    let cell_w = image_size as f32 / sal.w as f32;
    let mut cx = 0.0f64;
    let mut cy = 0.0f64;
    for y in 0..sal.h {
        for x in 0..sal.w {
            let v = sal.at(y, x) as f64;
            cx += v * ((x as f32 + 0.5) * cell_w) as f64;
            cy += v * ((y as f32 + 0.5) * cell_h) as f64;
        }
    }
    Some(((cx / total) as f32, (cy / total) as f32))
}

/// Raw saliency map as a grayscale image, upsampled nearest-neighbor to
/// `size` and normalized to [0, 255].
pub fn saliency_grayscale(sal: &SaliencyMap, size: usize) -> RgbImage {
    let max = sal.values.iter().copied().fold(0.0f32, f32::max);
    let cell_h = (size / sal.h).max(1);
    let cell_w = (size / sal.w).max(1);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let v = if max > 0.0 {
                sal.at((y / cell_h).min(sal.h - 1), (x / cell_w).min(sal.w - 1)) / max
            } else {
                0.0
            };
            let g = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            img.set(x, y, [g, g, g]);
        }
    }
    img
}

pub struct OverlayInfo {
    pub selection: RoiSelection,
    pub marked_cells: usize,
    pub center_of_mass: Option<(f32, f32)>,
}

/// Render the saliency map over the grayscale input: saliency drives the red
/// channel (alpha 0.5), Top-K cells get a blue outline. Writes PNG or PPM by
/// extension. Zero saliency reproduces the grayscale image exactly.
pub fn saliency_overlay(model: &ModelParams, image: &Tensor, out_path: &Path) -> Result<OverlayInfo> {
    let mut tape = crate::autodiff::Tape::new();
    let (f, _) = model::forward_trunk(&mut tape, model, image)?;
    let sal = model::saliency(tape.value(f));
    let sel = model::top_k_positions(&sal, model.top_k())?;
    let size = model.backbone_cfg.input_size;

    let max = sal.values.iter().copied().fold(0.0f32, f32::max);
    let alpha = 0.5f32;
    let mut img = RgbImage::new(size, size);
    let cell_h = size / sal.h;
    let cell_w = size / sal.w;
    for y in 0..size {
        for x in 0..size {
            let hw = size * size;
            let r = image.data()[y * size + x];
            let g = image.data()[hw + y * size + x];
            let b = image.data()[2 * hw + y * size + x];
            let gray = (r + g + b) / 3.0;
            let s_norm = if max > 0.0 {
                sal.at((y / cell_h).min(sal.h - 1), (x / cell_w).min(sal.w - 1)) / max
            } else {
                0.0
            };
            let heat = alpha * s_norm;
            let red = ((1.0 - heat) * gray + heat) * 255.0;
            let rest = (1.0 - heat) * gray * 255.0;
            img.set(
                x,
                y,
                [
                    red.round().clamp(0.0, 255.0) as u8,
                    rest.round().clamp(0.0, 255.0) as u8,
                    rest.round().clamp(0.0, 255.0) as u8,
                ],
            );
        }
    }
    // blue outline around each selected cell
    for &(ch, cw) in &sel.positions {
        let y0 = ch * cell_h;
        let x0 = cw * cell_w;
        let y1 = (y0 + cell_h - 1).min(size - 1);
        let x1 = (x0 + cell_w - 1).min(size - 1);
        for x in x0..=x1 {
            img.set(x, y0, [40, 90, 255]);
            img.set(x, y1, [40, 90, 255]);
        }
        for y in y0..=y1 {
            img.set(x0, y, [40, 90, 255]);
            img.set(x1, y, [40, 90, 255]);
        }
    }
    match out_path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => imageio::write_ppm(out_path, &img)?,
        _ => imageio::write_png(out_path, &img)?,
    }
    Ok(OverlayInfo {
        marked_cells: sel.positions.len(),
        center_of_mass: saliency_center_of_mass(&sal, size),
        selection: sel,
    })
}

/// Post-hoc linear probe: multinomial logistic regression on frozen features
/// trained with full-batch gradient steps, evaluated on held-out features.
/// Used to measure how much domain information survives in g.
pub fn linear_probe_accuracy(
    train_feats: &[Vec<f32>],
    train_labels: &[usize],
    test_feats: &[Vec<f32>],
    test_labels: &[usize],
    n_classes: usize,
) -> Result<f64> {
    if train_feats.is_empty() || train_feats.len() != train_labels.len() {
        return Err(CdiraError::invalid("bad probe training set".to_string()));
    }
    let dim = train_feats[0].len();
    // standardize on the training features
    let mut mean = vec![0.0f32; dim];
    for f in train_feats {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_feats.len() as f32);
    let mut std = vec![0.0f32; dim];
    for f in train_feats {
        for ((s, &v), &m) in std.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut()
        .for_each(|s| *s = (*s / train_feats.len() as f32).sqrt().max(1e-6));
    let norm = |f: &[f32]| -> Vec<f32> {
        f.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect()
    };
    let train_x: Vec<Vec<f32>> = train_feats.iter().map(|f| norm(f)).collect();

    let mut weights = vec![0.0f32; n_classes * dim];
    let mut bias = vec![0.0f32; n_classes];
    let lr = 0.1f32;
    let n = train_x.len() as f32;
    for _ in 0..300 {
        let mut gw = vec![0.0f32; n_classes * dim];
        let mut gb = vec![0.0f32; n_classes];
        for (x, &y) in train_x.iter().zip(train_labels) {
            let mut logits = vec![0.0f32; n_classes];
            for (c, logit) in logits.iter_mut().enumerate() {
                *logit = kernels::dot(&weights[c * dim..(c + 1) * dim], x) + bias[c];
            }
            let probs = kernels::softmax(&logits);
            for c in 0..n_classes {
                let err = probs[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += err;
                for (g, &xv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *g += err * xv;
                }
            }
        }
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= lr * g / n;
        }
        for (b, g) in bias.iter_mut().zip(&gb) {
            *b -= lr * g / n;
        }
    }

    let mut correct = 0usize;
    for (f, &y) in test_feats.iter().zip(test_labels) {
        let x = norm(f);
        let mut logits = vec![0.0f32; n_classes];
        for (c, logit) in logits.iter_mut().enumerate() {
            *logit = kernels::dot(&weights[c * dim..(c + 1) * dim], &x) + bias[c];
        }
        let (pred, _) = model::argmax(&logits);
        correct += (pred == y) as usize;
    }
    Ok(correct as f64 / test_feats.len() as f64)
}

/// Median single-image wall-clock latency over `runs` timed runs after
/// `warmup` untimed ones. Single-threaded; informational only.
pub fn latency_benchmark(
    model: &ModelParams,
    flops: &FlopsBreakdown,
    image: &Tensor,
    tau: f32,
    runs: usize,
    warmup: usize,
) -> Result<f64> {
    for _ in 0..warmup {
        infer(model, flops, image, tau, RouteMode::Confidence)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let out = infer(model, flops, image, tau, RouteMode::Confidence)?;
        times.push(out.record.latency_s);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}
