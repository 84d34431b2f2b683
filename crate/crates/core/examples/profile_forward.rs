// stacked suppression experiment + desk usage check
use std::time::Instant;
use cdira_core::config::RunConfig;
use cdira_core::data::{self, Split};
use cdira_core::eval;
use cdira_core::model;
use cdira_core::train::{self, embed_dataset, parallel_map};
use cdira_core::autodiff::Tape;

fn contrast(tag: &str, cfg: &RunConfig) {
    let mut ds = data::generate_dataset(&cfg.synth_spec()).unwrap();
    data::stratified_split(&mut ds, (0.8, 0.1, 0.1), cfg.seed).unwrap();
    for adversarial in [true, false] {
        let t = Instant::now();
        let mut pipeline = cfg.pipeline_config(ds.n_classes);
        pipeline.train.adversarial = adversarial;
        let out = train::train_pipeline(&ds, &pipeline).unwrap();
        let train_idx = ds.split_indices(Split::Train);
        let test_idx = ds.split_indices(Split::Test);
        let feats = |idx: &[usize]| -> Vec<Vec<f32>> {
            let z = embed_dataset(&out.model, &ds, idx, 1).unwrap();
            (0..z.rows).map(|i| z.row(i).to_vec()).collect()
        };
        let labels = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| ds.samples[i].true_domain.unwrap()).collect() };
        let probe = eval::linear_probe_accuracy(&feats(&train_idx), &labels(&train_idx), &feats(&test_idx), &labels(&test_idx), cfg.n_domains).unwrap();
        let outputs = eval::collect_sweep_outputs(&out.model, &ds, &test_idx, 1).unwrap();
        let fused_acc = outputs.iter().filter(|s| s.fused_pred == s.label).count() as f64 / outputs.len() as f64;
        let usage09 = outputs.iter().filter(|s| !(s.confidence >= 0.9)).count() as f64 / outputs.len() as f64;
        let dom_curve: Vec<f32> = out.history.iter().filter(|r| r.phase == "train").map(|r| (r.val.dom * 100.0).round() / 100.0).collect();
        println!(
            "{tag} adv={}: K*={} best={}/{} probe={:.4} fused={:.4} usage={:.4} dom_val={:?} ({:.0}s)",
            adversarial,
            out.cluster.as_ref().map_or(0, |c| c.k_star),
            out.best_epoch,
            out.history.iter().filter(|r| r.phase == "train").count(),
            probe, fused_acc, usage09, dom_curve,
            t.elapsed().as_secs_f64()
        );
    }
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "suppress".to_string());
    if mode == "suppress" {
        let mut cfg = RunConfig::default();
        cfg.image_size = 48;
        cfg.per_class_domain = 25; // 2000 total
        cfg.warmup_epochs = 1;
        cfg.max_epochs = 18;
        cfg.patience = 18;
        cfg.threads = 1;
        contrast("e8-warm1", &cfg);
    } else {
        // desk usage/saliency check with longer warm-up
        let mut cfg = RunConfig::default();
        cfg.warmup_epochs = 6;
        cfg.max_epochs = 3;
        cfg.patience = 3;
        cfg.threads = 1;
        let mut ds = data::generate_dataset(&cfg.synth_spec()).unwrap();
        data::stratified_split(&mut ds, (0.8, 0.1, 0.1), cfg.seed).unwrap();
        let t = Instant::now();
        let out = train::train_pipeline(&ds, &cfg.pipeline_config(ds.n_classes)).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let test_idx = ds.split_indices(Split::Test);
        let outputs = eval::collect_sweep_outputs(&out.model, &ds, &test_idx, 1).unwrap();
        let fused_acc = outputs.iter().filter(|s| s.fused_pred == s.label).count() as f64 / outputs.len() as f64;
        let global_acc = outputs.iter().filter(|s| s.global_pred == s.label).count() as f64 / outputs.len() as f64;
        let usage = outputs.iter().filter(|s| !(s.confidence >= 0.9)).count() as f64 / outputs.len() as f64;
        let hits: Vec<bool> = parallel_map(test_idx.clone(), 1, |_, idx| {
            let image = ds.image_tensor(idx);
            let mut tape = Tape::new();
            let (f, _g) = model::forward_trunk(&mut tape, &out.model, &image).unwrap();
            let sal = model::saliency(tape.value(f));
            match (eval::saliency_center_of_mass(&sal, ds.image_size), ds.samples[idx].glyph_box) {
                (Some((cx, cy)), Some((x0, y0, x1, y1))) => cx >= x0 as f32 && cx < x1 as f32 && cy >= y0 as f32 && cy < y1 as f32,
                _ => false,
            }
        });
        let sal_rate = hits.iter().filter(|&&i| i).count() as f64 / hits.len() as f64;
        println!("desk warm6: fused {fused_acc:.4} global {global_acc:.4} usage@0.9 {usage:.4} saliency {sal_rate:.4} best {} time {secs:.0}s", out.best_epoch);
    }
}
