//! The training loop.
//!
//! Per step both networks see the same batch. Each network's loss is the
//! sum over its branches of the joint cross-entropy; with network diversity
//! on, the weighted mutual KL term couples them. Per epoch the test split is
//! evaluated, `metrics.csv`, `diversity.csv` and `steps.csv` are rewritten
//! and a checkpoint is kept for the best mean aggregated accuracy.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::artifacts;
use super::checkpoint::{checkpoint_version, save_checkpoint, Manifest};
use super::config::ExperimentConfig;
use super::data::{load_dataset, Batch, Dataset, Loader, Splits};
use super::eval::{branch_labels, evaluate_networks, Evaluation};
use super::metrics::{
    write_diversity_csv, write_metrics_csv, write_steps_csv, MetricsRecord, StepRecord,
};
use crate::distillation::{kd_loss_with_grads, total_loss, DistillationConfig};
use crate::diversity::DiversityReport;
use crate::error::{CssError, Result};
use crate::joint_task::joint_cross_entropy_with_grad;
use crate::model::{build_network, ModelSpec, Network, NetworkOutput};
use crate::nn::{Mode, Sgd};

pub const NET1_STREAM: u64 = 1;
pub const NET2_STREAM: u64 = 2;
pub const DATA_STREAM: u64 = 3;

/// Independent 63-bit seed for `stream` (SplitMix64 finaliser). Kept below
/// `i64::MAX` so it survives TOML manifests.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

/// Sum over branches of the mean joint cross-entropy, with per-branch
/// logit gradients.
pub fn network_ce(
    spec: &ModelSpec,
    out: &NetworkOutput,
    labels: &[usize],
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(out.branch_logits.len());
    for (j, logits) in out.branch_logits.iter().enumerate() {
        let (ce, g) = joint_cross_entropy_with_grad(logits, &branch_labels(spec, j, labels)?)?;
        total += ce;
        grads.push(g);
    }
    Ok((total, grads))
}

/// The two peers (or one, without network diversity) and their optimizer state.
pub struct Trainer {
    spec: ModelSpec,
    distill: DistillationConfig,
    momentum: f64,
    weight_decay: f64,
    net1: Network,
    net2: Option<Network>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Trainer> {
        cfg.validate()?;
        let spec = cfg.model_spec();
        let net1 = build_network(&spec, derive_seed(cfg.seed, NET1_STREAM))?;
        let net2 = if cfg.ablation.network_diversity {
            Some(build_network(&spec, derive_seed(cfg.seed, NET2_STREAM))?)
        } else {
            None
        };
        Ok(Trainer {
            spec,
            distill: cfg.distillation(),
            momentum: cfg.optimizer.momentum,
            weight_decay: cfg.optimizer.weight_decay,
            net1,
            net2,
            step: 0,
        })
    }

    pub fn net1(&self) -> &Network {
        &self.net1
    }

    pub fn net2(&self) -> Option<&Network> {
        self.net2.as_ref()
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One optimizer step on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &Batch, epoch: usize, lr: f64) -> Result<StepRecord> {
        let step = self.step;
        let diverged = |detail: String| CssError::Diverged {
            epoch,
            step,
            detail,
        };
        let guard = |e: CssError| match e {
            CssError::NonFinite(what) => diverged(format!("non-finite {what}")),
            other => other,
        };
        let out1 = self
            .net1
            .forward(&batch.images, Mode::Train)
            .map_err(guard)?;
        let (ce1, mut g1) = network_ce(&self.spec, &out1, &batch.labels)?;
        if !ce1.is_finite() {
            return Err(diverged(format!("net1 cross-entropy is {ce1}")));
        }
        let mut second = None;
        let (kd, alpha1) = match self.net2.as_mut() {
            Some(net2) => {
                let out2 = net2.forward(&batch.images, Mode::Train).map_err(guard)?;
                let (ce2, mut g2) = network_ce(&self.spec, &out2, &batch.labels)?;
                if !ce2.is_finite() {
                    return Err(diverged(format!("net2 cross-entropy is {ce2}")));
                }
                let w = self.distill.weights(ce1, ce2)?;
                let kd = kd_loss_with_grads(
                    &out1.branch_logits,
                    &out2.branch_logits,
                    &w,
                    &self.distill,
                )?;
                for (g, d) in g1.iter_mut().zip(&kd.d_net1) {
                    *g += d;
                }
                for (g, d) in g2.iter_mut().zip(&kd.d_net2) {
                    *g += d;
                }
                second = Some((ce2, g2));
                (kd.value, Some(w.alpha1()))
            }
            None => (
                0.0,
                (!self.distill.dynamic_weights).then_some(self.distill.fixed_alpha),
            ),
        };
        let ce2 = second.as_ref().map(|(c, _)| *c);
        let total = total_loss(ce1, ce2.unwrap_or(0.0), kd).map_err(|e| diverged(e.to_string()))?;

        let mut sgd = Sgd {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        };
        self.net1.backward(&g1)?;
        self.net1.sgd_step(&mut sgd);
        if let (Some(net2), Some((_, g2))) = (self.net2.as_mut(), second) {
            net2.backward(&g2)?;
            net2.sgd_step(&mut sgd);
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            epoch,
            ce1,
            ce2,
            kd,
            alpha1,
            total,
        })
    }

    pub fn evaluate(
        &mut self,
        data: &Dataset,
        batch_size: usize,
        epoch: usize,
    ) -> Result<Evaluation> {
        evaluate_networks(
            &mut self.net1,
            self.net2.as_mut(),
            data,
            &self.distill,
            batch_size,
            epoch,
        )
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub diversity: Vec<DiversityReport>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    /// Test-split evaluation after the last epoch.
    pub final_evaluation: Evaluation,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// Mean aggregated accuracy over the networks of a record.
pub fn selection_score(r: &MetricsRecord) -> f64 {
    match r.net2_agg {
        Some(a2) => (r.net1_agg + a2) / 2.0,
        None => r.net1_agg,
    }
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoint")
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = load_dataset(cfg)?;
    train_on(cfg, &splits)
}

/// [`train`] on already loaded splits.
pub fn train_on(cfg: &ExperimentConfig, splits: &Splits) -> Result<TrainOutcome> {
    let run_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&run_dir).map_err(|e| CssError::io(&run_dir, e))?;
    let cfg_path = run_dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| CssError::io(&cfg_path, e))?;

    let mut trainer = Trainer::new(cfg)?;
    let mut loader = Loader::new(
        cfg.batch_size,
        cfg.augment,
        derive_seed(cfg.seed, DATA_STREAM),
    );
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut last_eval = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        for batch in loader.epoch(&splits.train) {
            steps.push(trainer.train_step(&batch, epoch, lr)?);
        }
        let ev = trainer.evaluate(&splits.test, cfg.eval_batch_size, epoch)?;
        let report = ev.diversity()?;
        log::info!("{}", ev.record);
        records.push(ev.record.clone());
        reports.push(report);
        write_metrics_csv(&run_dir.join("metrics.csv"), &records)?;
        write_diversity_csv(&run_dir.join("diversity.csv"), &reports)?;
        write_steps_csv(&run_dir.join("steps.csv"), &steps)?;

        let score = selection_score(&ev.record);
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, epoch));
            let manifest = Manifest {
                format_version: checkpoint_version(),
                epoch,
                net1_seed: trainer.net1.seed(),
                net2_seed: trainer.net2.as_ref().map(Network::seed),
                spec: trainer.spec.clone(),
                metrics: ev.record.row(),
                config: cfg.clone(),
            };
            save_checkpoint(
                &checkpoint_dir(&run_dir),
                &manifest,
                &trainer.net1,
                trainer.net2.as_ref(),
            )?;
        }
        last_eval = Some(ev);
    }
    let final_evaluation = last_eval.expect("epochs >= 1");
    artifacts::emit_run_artifacts(&run_dir, &records, &reports, &final_evaluation)?;
    Ok(TrainOutcome {
        run_dir,
        records,
        diversity: reports,
        steps,
        best_epoch: best.expect("epochs >= 1").1,
        final_evaluation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct_and_toml_safe() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..50 {
            for stream in [NET1_STREAM, NET2_STREAM, DATA_STREAM] {
                let s = derive_seed(seed, stream);
                assert!(s <= i64::MAX as u64);
                assert!(seen.insert(s));
            }
        }
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }

    #[test]
    fn network_diversity_controls_the_second_network() {
        let mut cfg = ExperimentConfig::synthetic_smoke("unused");
        assert!(Trainer::new(&cfg).unwrap().net2().is_some());
        cfg.ablation.network_diversity = false;
        assert!(Trainer::new(&cfg).unwrap().net2().is_none());
    }

    #[test]
    fn step_updates_both_stems() {
        let cfg = ExperimentConfig::synthetic_smoke("unused");
        let splits = load_dataset(&cfg).unwrap();
        let mut trainer = Trainer::new(&cfg).unwrap();
        let before1 = trainer.net1().state().params;
        let before2 = trainer.net2().unwrap().state().params;
        let batch = Loader::new(16, false, 0)
            .epoch(&splits.train)
            .next()
            .unwrap();
        let rec = trainer.train_step(&batch, 0, 0.05).unwrap();
        assert!(rec.kd > 0.0 && rec.ce2.is_some() && rec.alpha1.is_some());
        assert!((rec.total - (rec.ce1 + rec.ce2.unwrap() + rec.kd)).abs() < 1e-12);
        for (before, after) in [
            (before1, trainer.net1().state().params),
            (before2, trainer.net2().unwrap().state().params),
        ] {
            let changed = before
                .iter()
                .zip(&after)
                .filter(|((n, a), (_, b))| n.starts_with("stem.") && a != b)
                .count();
            assert!(changed > 0);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_a_diagnostic() {
        let cfg = ExperimentConfig::synthetic_smoke("unused");
        let splits = load_dataset(&cfg).unwrap();
        let mut trainer = Trainer::new(&cfg).unwrap();
        let mut batch = Loader::new(16, false, 0)
            .epoch(&splits.train)
            .next()
            .unwrap();
        batch.images[[0, 0, 0, 0]] = f64::NAN;
        match trainer.train_step(&batch, 3, 0.05) {
            Err(CssError::Diverged {
                epoch: 3, step: 0, ..
            }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
