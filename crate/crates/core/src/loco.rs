//! Leave-one-cluster-out domain generalization: hold out every sample of one
//! pseudo-domain cluster, retrain each model variant from scratch on the
//! rest, and score accuracy on the held-out cluster.
//!
//! Clusters are grouped into Large/Middle/Small terciles by training sample
//! count. Pseudo-domain labels are fixed inputs here; folds never recluster.

use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{CdiraError, Result};
use crate::eval::{self, RouteMode};
use crate::flops::flops_estimate;
use crate::train::{train_with_fixed_domains, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeGroup {
    Large,
    Middle,
    Small,
}

impl SizeGroup {
    pub fn tag(self) -> &'static str {
        match self {
            SizeGroup::Large => "large",
            SizeGroup::Middle => "middle",
            SizeGroup::Small => "small",
        }
    }

    pub fn from_tag(tag: &str) -> Result<SizeGroup> {
        match tag {
            "large" => Ok(SizeGroup::Large),
            "middle" => Ok(SizeGroup::Middle),
            "small" => Ok(SizeGroup::Small),
            other => Err(CdiraError::invalid(format!("unknown group {other:?}"))),
        }
    }
}

/// One retrain-and-evaluate fold.
#[derive(Debug, Clone)]
pub struct LocoRow {
    pub cluster_id: usize,
    pub group: SizeGroup,
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub n_eval: usize,
}

#[derive(Debug, Clone)]
pub struct LocoVariant {
    pub name: String,
    pub adversarial: bool,
}

impl LocoVariant {
    pub fn standard_pair() -> Vec<LocoVariant> {
        vec![
            LocoVariant {
                name: "full".to_string(),
                adversarial: true,
            },
            LocoVariant {
                name: "no_adversarial".to_string(),
                adversarial: false,
            },
        ]
    }
}

/// Tercile grouping by per-cluster sample count; ties break by cluster id.
pub fn group_clusters(counts: &[usize]) -> Vec<SizeGroup> {
    let n = counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&c| (counts[c], c));
    let mut groups = vec![SizeGroup::Middle; n];
    for (rank, &cluster) in order.iter().enumerate() {
        let tercile = rank * 3 / n.max(1);
        groups[cluster] = match tercile {
            0 => SizeGroup::Small,
            1 => SizeGroup::Middle,
            _ => SizeGroup::Large,
        };
    }
    groups
}

/// Run LOCO over every cluster of the selected size group, for each variant
/// and seed. Clusters with fewer samples than classes are skipped with a
/// warning.
pub fn loco_eval(
    dataset: &Dataset,
    pseudo_domains: &[usize],
    k_star: usize,
    group: SizeGroup,
    variants: &[LocoVariant],
    seeds: &[u64],
    cfg: &PipelineConfig,
) -> Result<Vec<LocoRow>> {
    if pseudo_domains.len() != dataset.samples.len() {
        return Err(CdiraError::invalid(
            "pseudo-domain labels must cover the dataset".to_string(),
        ));
    }
    if k_star < 2 {
        return Err(CdiraError::Cluster("loco needs >= 2 clusters".to_string()));
    }
    let mut train_counts = vec![0usize; k_star];
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.split == Split::Train {
            train_counts[pseudo_domains[i]] += 1;
        }
    }
    let groups = group_clusters(&train_counts);

    let mut rows = Vec::new();
    for cluster in 0..k_star {
        if groups[cluster] != group {
            continue;
        }
        let held_out: Vec<usize> = (0..dataset.samples.len())
            .filter(|&i| pseudo_domains[i] == cluster)
            .collect();
        if held_out.len() < dataset.n_classes {
            eprintln!(
                "warning: skipping cluster {cluster}: only {} samples (< {} classes)",
                held_out.len(),
                dataset.n_classes
            );
            continue;
        }
        let retained: Vec<usize> = (0..dataset.samples.len())
            .filter(|&i| pseudo_domains[i] != cluster)
            .collect();
        let train_ds = dataset.subset(&retained);
        let train_domains: Vec<usize> = retained.iter().map(|&i| pseudo_domains[i]).collect();
        let eval_ds = dataset.subset(&held_out);
        let eval_idx: Vec<usize> = (0..eval_ds.samples.len()).collect();

        for variant in variants {
            for &seed in seeds {
                let mut fold_cfg = PipelineConfig {
                    backbone: cfg.backbone.clone(),
                    heads: cfg.heads.clone(),
                    train: cfg.train.clone(),
                    cluster_candidates: cfg.cluster_candidates.clone(),
                    cluster_sample_size: cfg.cluster_sample_size,
                };
                fold_cfg.train.seed = seed;
                fold_cfg.train.adversarial = variant.adversarial;
                let outcome = train_with_fixed_domains(&train_ds, &train_domains, k_star, &fold_cfg)?;
                let flops = flops_estimate(&fold_cfg.backbone, &fold_cfg.heads, k_star);
                let records = eval::eval_dataset(
                    &outcome.model,
                    &flops,
                    &eval_ds,
                    &eval_idx,
                    fold_cfg.train.tau,
                    RouteMode::Confidence,
                    fold_cfg.train.threads,
                )?;
                let correct = records.iter().filter(|r| r.pred == r.label).count();
                rows.push(LocoRow {
                    cluster_id: cluster,
                    group,
                    variant: variant.name.clone(),
                    seed,
                    accuracy: correct as f64 / records.len() as f64,
                    n_eval: records.len(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_loco_csv(path: &Path, rows: &[LocoRow], config_hash: u32) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash=0x{config_hash:08x}\n"));
    out.push_str("cluster_id,group,variant,seed,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.cluster_id,
            r.group.tag(),
            r.variant,
            r.seed,
            r.accuracy
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tercile_grouping_orders_by_count() {
        let counts = [50, 10, 30, 40, 20, 60];
        let groups = group_clusters(&counts);
        assert_eq!(groups[1], SizeGroup::Small);
        assert_eq!(groups[4], SizeGroup::Small);
        assert_eq!(groups[2], SizeGroup::Middle);
        assert_eq!(groups[3], SizeGroup::Middle);
        assert_eq!(groups[0], SizeGroup::Large);
        assert_eq!(groups[5], SizeGroup::Large);
    }

    #[test]
    fn grouping_ties_break_by_cluster_id() {
        let counts = [5, 5, 5];
        let groups = group_clusters(&counts);
        assert_eq!(
            groups,
            vec![SizeGroup::Small, SizeGroup::Middle, SizeGroup::Large]
        );
    }

    #[test]
    fn loco_rejects_bad_inputs() {
        let spec = crate::data::SynthSpec {
            n_classes: 2,
            n_domains: 2,
            per_class_domain: 6,
            seed: 0,
            glyph_min: 4,
            glyph_max: 4,
            jitter: 1,
            ..crate::data::SynthSpec::with_size(16)
        };
        let ds = crate::data::generate_dataset(&spec).unwrap();
        let cfg = PipelineConfig::desk_default(2);
        let variants = LocoVariant::standard_pair();
        assert!(loco_eval(&ds, &[0; 3], 2, SizeGroup::Small, &variants, &[0], &cfg).is_err());
        let domains = vec![0usize; ds.samples.len()];
        assert!(loco_eval(&ds, &domains, 1, SizeGroup::Small, &variants, &[0], &cfg).is_err());
    }
}
