//! Directional smoke protocol: CSS against its ablations over several seeds.
//!
//! Variants share everything except the ablation flags (and, for the
//! baseline, the branch count):
//!
//! | variant  | SD | TD | ND | DW | m |
//! |----------|----|----|----|----|---|
//! | css      | on | on | on | on | m |
//! | control  |    |    | on | on | m |
//! | sd_only  | on |    |    |    | m |
//! | baseline |    |    |    |    | 1 |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::{AblationFlags, DatasetKind, ExperimentConfig};
use super::data::load_dataset;
use super::metrics::MetricsRecord;
use super::train::{selection_score, train_on};
use crate::diversity::{transform_separability, SeparabilityReport};
use crate::error::Result;
use crate::nn::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Css,
    Control,
    SdOnly,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Css,
        Variant::Control,
        Variant::SdOnly,
        Variant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Css => "css",
            Variant::Control => "control",
            Variant::SdOnly => "sd_only",
            Variant::Baseline => "baseline",
        }
    }

    /// `base` with this variant's flags, `seed`, and a dedicated output directory.
    pub fn configure(self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.out_dir = base.out_dir.join(self.name()).join(format!("seed{seed}"));
        cfg.ablation = match self {
            Variant::Css => AblationFlags::preset("D").expect("preset"),
            Variant::Control => AblationFlags {
                sample_diversity: false,
                target_diversity: false,
                network_diversity: true,
                dynamic_weights: true,
            },
            Variant::SdOnly => AblationFlags::preset("A").expect("preset"),
            Variant::Baseline => AblationFlags::none(),
        };
        if self == Variant::Baseline {
            cfg.model.branches = 1;
        }
        cfg
    }
}

/// Final-epoch summary of one variant and seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub variant: Variant,
    pub seed: u64,
    pub record: MetricsRecord,
    pub intra_net: Option<f64>,
    /// Of the first network, when it has at least two branches.
    pub separability: Option<SeparabilityReport>,
}

#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub branches: usize,
    pub runs: Vec<SeedRun>,
}

/// The smoke setup: 10% of CIFAR-10, depth 20, two branches per network,
/// 40 epochs.
pub fn cifar_smoke_base(
    data_dir: Option<PathBuf>,
    out_dir: impl Into<PathBuf>,
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic_smoke(out_dir);
    cfg.dataset = DatasetKind::Cifar10;
    cfg.data_dir = data_dir;
    cfg.subset_fraction = 0.1;
    cfg.augment = true;
    cfg.model.depth = 20;
    cfg.model.split_depth = 1;
    cfg.model.branches = 2;
    cfg.model.classes = 10;
    cfg.model.input_shape = [3, 32, 32];
    cfg.model.base_width = 16;
    cfg.optimizer = SgdConfig::default();
    cfg.epochs = 40;
    cfg.batch_size = 128;
    cfg.eval_batch_size = 500;
    cfg
}

/// Whether the CIFAR-10 binaries are present under `root`.
pub fn cifar10_available(root: &Path) -> bool {
    let dir = if root.join("cifar-10-batches-bin").is_dir() {
        root.join("cifar-10-batches-bin")
    } else {
        root.to_path_buf()
    };
    (1..=5).all(|i| dir.join(format!("data_batch_{i}.bin")).is_file())
        && dir.join("test_batch.bin").is_file()
}

/// Trains every variant for every seed.
pub fn run_protocol(base: &ExperimentConfig, seeds: &[u64]) -> Result<ProtocolReport> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut data_cfg = base.clone();
        data_cfg.seed = seed;
        let splits = load_dataset(&data_cfg)?;
        for variant in Variant::ALL {
            let cfg = variant.configure(base, seed);
            log::info!("protocol: {} seed {seed}", variant.name());
            let outcome = train_on(&cfg, &splits)?;
            let features = &outcome.final_evaluation.net1.features;
            let separability = if features.len() >= 2 {
                Some(transform_separability(features)?)
            } else {
                None
            };
            runs.push(SeedRun {
                variant,
                seed,
                record: outcome.final_record().clone(),
                intra_net: outcome.diversity.last().and_then(|d| d.intra_net),
                separability,
            });
        }
    }
    Ok(ProtocolReport {
        branches: base.model.branches,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

/// At least two thirds of the seeds.
fn majority(hits: usize, total: usize) -> bool {
    total > 0 && 3 * hits >= 2 * total
}

/// CSS intra-network diversity exceeds the control's, per seed.
pub fn diversity_verdict(pairs: &[(f64, f64)]) -> Verdict {
    let hits = pairs.iter().filter(|(css, control)| css > control).count();
    Verdict {
        passed: majority(hits, pairs.len()),
        detail: format!("css > control in {hits}/{} seeds: {pairs:?}", pairs.len()),
    }
}

/// CSS probe at least `2/m`; control within 0.1 of `1/m`; per seed.
pub fn separability_verdict(pairs: &[(f64, f64)], m: usize) -> Verdict {
    let chance = 1.0 / m as f64;
    let hits = pairs
        .iter()
        .filter(|(css, control)| *css >= 2.0 * chance && (control - chance).abs() <= 0.1)
        .count();
    Verdict {
        passed: majority(hits, pairs.len()),
        detail: format!(
            "probe (css, control) {pairs:?}; need css >= {:.3} and |control - {chance:.3}| <= 0.1; {hits}/{} seeds",
            2.0 * chance,
            pairs.len()
        ),
    }
}

/// Dual ensemble within 0.2 points of the best aggregated network and at
/// least either branch mean, per seed.
pub fn ensemble_verdict(records: &[MetricsRecord]) -> Verdict {
    let ok = |r: &MetricsRecord| -> bool {
        let (Some(dual), Some(agg2), Some(mean2)) =
            (r.dual_ensemble, r.net2_agg, r.net2_branch_mean)
        else {
            return false;
        };
        dual >= r.net1_agg.max(agg2) - 0.002 && dual >= r.net1_branch_mean.max(mean2)
    };
    let hits = records.iter().filter(|r| ok(r)).count();
    let summary: Vec<String> = records
        .iter()
        .map(|r| {
            format!(
                "dual={:?} agg=({}, {:?}) branch_mean=({}, {:?})",
                r.dual_ensemble, r.net1_agg, r.net2_agg, r.net1_branch_mean, r.net2_branch_mean
            )
        })
        .collect();
    Verdict {
        passed: majority(hits, records.len()),
        detail: format!("{hits}/{} seeds: {}", records.len(), summary.join("; ")),
    }
}

/// Seed-mean aggregated accuracy ordered baseline <= A <= D within 0.3 points.
pub fn ablation_verdict(baseline: &[f64], sd_only: &[f64], css: &[f64]) -> Verdict {
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (b, a, d) = (mean(baseline), mean(sd_only), mean(css));
    let tol = 0.003;
    Verdict {
        passed: b <= a + tol && a <= d + tol,
        detail: format!("mean aggregated accuracy baseline={b} A={a} D={d} (tolerance {tol})"),
    }
}

impl ProtocolReport {
    fn by_variant(&self) -> BTreeMap<Variant, BTreeMap<u64, &SeedRun>> {
        let mut out: BTreeMap<Variant, BTreeMap<u64, &SeedRun>> = BTreeMap::new();
        for r in &self.runs {
            out.entry(r.variant).or_default().insert(r.seed, r);
        }
        out
    }

    fn paired<F: Fn(&SeedRun) -> Option<f64>>(&self, f: F) -> Vec<(f64, f64)> {
        let v = self.by_variant();
        let (Some(css), Some(control)) = (v.get(&Variant::Css), v.get(&Variant::Control)) else {
            return Vec::new();
        };
        css.iter()
            .filter_map(|(seed, a)| {
                let b = control.get(seed)?;
                Some((f(a)?, f(b)?))
            })
            .collect()
    }

    pub fn diversity(&self) -> Verdict {
        diversity_verdict(&self.paired(|r| r.intra_net))
    }

    pub fn separability(&self) -> Verdict {
        separability_verdict(
            &self.paired(|r| r.separability.map(|s| s.transform_probe_accuracy)),
            self.branches,
        )
    }

    pub fn ensemble(&self) -> Verdict {
        let records: Vec<MetricsRecord> = self
            .runs
            .iter()
            .filter(|r| r.variant == Variant::Css)
            .map(|r| r.record.clone())
            .collect();
        ensemble_verdict(&records)
    }

    pub fn ablation(&self) -> Verdict {
        let scores = |v: Variant| -> Vec<f64> {
            self.runs
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| selection_score(&r.record))
                .collect()
        };
        ablation_verdict(
            &scores(Variant::Baseline),
            &scores(Variant::SdOnly),
            &scores(Variant::Css),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(dual: f64, agg: (f64, f64), mean: (f64, f64)) -> MetricsRecord {
        MetricsRecord {
            epoch: 39,
            net1_branch_acc: vec![mean.0; 2],
            net2_branch_acc: Some(vec![mean.1; 2]),
            net1_branch_mean: mean.0,
            net2_branch_mean: Some(mean.1),
            net1_agg: agg.0,
            net2_agg: Some(agg.1),
            dual_ensemble: Some(dual),
            ce1: 1.0,
            ce2: Some(1.0),
            kd: 0.1,
            alpha1: Some(1.0),
        }
    }

    #[test]
    fn diversity_needs_two_of_three() {
        assert!(diversity_verdict(&[(0.3, 0.2), (0.3, 0.2), (0.1, 0.2)]).passed);
        assert!(!diversity_verdict(&[(0.3, 0.2), (0.2, 0.2), (0.1, 0.2)]).passed);
        assert!(!diversity_verdict(&[]).passed);
    }

    #[test]
    fn separability_thresholds() {
        // m = 4: chance 0.25, css needs 0.5, control within [0.15, 0.35].
        assert!(separability_verdict(&[(0.5, 0.35), (0.9, 0.15), (0.2, 0.25)], 4).passed);
        assert!(!separability_verdict(&[(0.49, 0.25), (0.9, 0.36), (0.9, 0.25)], 4).passed);
        // m = 2 demands a perfect probe.
        assert!(!separability_verdict(&[(0.99, 0.5); 3], 2).passed);
        assert!(separability_verdict(&[(1.0, 0.55); 3], 2).passed);
    }

    #[test]
    fn ensemble_thresholds() {
        let good = record(0.80, (0.801, 0.79), (0.78, 0.77));
        let lagging = record(0.797, (0.80, 0.79), (0.78, 0.77));
        let below_branch = record(0.80, (0.80, 0.79), (0.805, 0.77));
        assert!(ensemble_verdict(&[good.clone(), good.clone(), lagging.clone()]).passed);
        assert!(!ensemble_verdict(&[good, lagging, below_branch]).passed);
    }

    #[test]
    fn ablation_ordering_with_tolerance() {
        assert!(ablation_verdict(&[0.70], &[0.71], &[0.72]).passed);
        assert!(ablation_verdict(&[0.712], &[0.71], &[0.708]).passed);
        assert!(!ablation_verdict(&[0.72], &[0.71], &[0.72]).passed);
        assert!(!ablation_verdict(&[0.70], &[0.72], &[0.71]).passed);
        assert!(!ablation_verdict(&[], &[0.7], &[0.7]).passed);
    }

    #[test]
    fn variants_set_their_flags() {
        let base = ExperimentConfig::synthetic_smoke("/tmp/p");
        let css = Variant::Css.configure(&base, 4);
        assert_eq!(css.model_spec().label_transforms(), 2);
        assert_eq!(css.seed, 4);
        assert!(css.out_dir.ends_with("css/seed4"));
        let control = Variant::Control.configure(&base, 4);
        assert!(!control.ablation.sample_diversity && control.ablation.network_diversity);
        let base_run = Variant::Baseline.configure(&base, 4);
        assert_eq!(base_run.model.branches, 1);
        assert_eq!(base_run.ablation, AblationFlags::none());
        assert!(
            Variant::SdOnly
                .configure(&base, 4)
                .ablation
                .sample_diversity
        );
    }

    #[test]
    fn smoke_base_is_valid() {
        cifar_smoke_base(None, "/tmp/x").validate().unwrap();
        assert!(!cifar10_available(Path::new("/nonexistent")));
    }
}
