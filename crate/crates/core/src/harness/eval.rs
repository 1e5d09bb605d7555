//! Evaluation of one or two networks on a dataset split.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};

use super::checkpoint::load_checkpoint;
use super::data::{load_dataset, Dataset};
use super::metrics::MetricsRecord;
use crate::distillation::{kd_branch_kl, DistillationConfig};
use crate::diversity::{branch_predictions, diversity_report, DiversityReport};
use crate::error::{CssError, Result};
use crate::joint_task::{
    aggregate_predict, argmax_rows, joint_cross_entropy, make_joint_label, JointLabel,
};
use crate::model::{ModelSpec, Network};
use crate::nn::Mode;

/// Joint labels for branch `branch`: class `y` under the branch's own transform.
pub fn branch_labels(spec: &ModelSpec, branch: usize, labels: &[usize]) -> Result<Vec<JointLabel>> {
    let transforms = spec.label_transforms();
    let t = if transforms > 1 { branch } else { 0 };
    labels
        .iter()
        .map(|&y| make_joint_label(y, t, spec.classes, transforms))
        .collect()
}

/// Whole-split outputs of one network.
#[derive(Debug, Clone)]
pub struct NetPass {
    /// Own-slice class distributions per branch, `[n x K]`.
    pub branch_probs: Vec<Array2<f64>>,
    /// Aggregated class distribution, `[n x K]`.
    pub agg_probs: Array2<f64>,
    /// Pooled features per branch, `[n x d]`.
    pub features: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub record: MetricsRecord,
    pub labels: Vec<usize>,
    pub net1: NetPass,
    pub net2: Option<NetPass>,
}

impl Evaluation {
    pub fn diversity(&self) -> Result<DiversityReport> {
        diversity_report(
            self.record.epoch,
            &self.net1.branch_probs,
            self.net2.as_ref().map(|p| p.branch_probs.as_slice()),
        )
    }
}

#[derive(Default)]
struct Accumulator {
    branch_probs: Vec<Vec<Array2<f64>>>,
    agg_probs: Vec<Array2<f64>>,
    features: Vec<Vec<Array2<f64>>>,
    ce_sum: f64,
}

impl Accumulator {
    fn new(m: usize) -> Self {
        Accumulator {
            branch_probs: vec![Vec::new(); m],
            features: vec![Vec::new(); m],
            ..Default::default()
        }
    }

    fn finish(self) -> NetPass {
        let cat = |parts: &[Array2<f64>]| {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            concatenate(Axis(0), &views).expect("consistent widths")
        };
        NetPass {
            branch_probs: self.branch_probs.iter().map(|p| cat(p)).collect(),
            agg_probs: cat(&self.agg_probs),
            features: self.features.iter().map(|f| cat(f)).collect(),
        }
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Evaluates in [`Mode::Eval`]. Loss fields are computed on this split:
/// cross-entropies are split means, the utility weights come from those
/// means and the KD term uses them.
pub fn evaluate_networks(
    net1: &mut Network,
    mut net2: Option<&mut Network>,
    data: &Dataset,
    distill: &DistillationConfig,
    batch_size: usize,
    epoch: usize,
) -> Result<Evaluation> {
    let spec = net1.spec().clone();
    if data.classes() != spec.classes {
        return Err(CssError::InvalidArgument(format!(
            "dataset has {} classes, network was built for {}",
            data.classes(),
            spec.classes
        )));
    }
    if data.shape() != spec.input_shape {
        return Err(CssError::ShapeMismatch(format!(
            "dataset images are {:?}, network expects {:?}",
            data.shape(),
            spec.input_shape
        )));
    }
    if data.is_empty() {
        return Err(CssError::InvalidArgument(
            "cannot evaluate on an empty split".into(),
        ));
    }
    let m = spec.branches;
    let mut acc1 = Accumulator::new(m);
    let mut acc2 = net2.as_ref().map(|_| Accumulator::new(m));
    let (mut toward_net2, mut toward_net1) = (0.0, 0.0);
    let t = distill.temperature;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let bs = chunk.len() as f64;
        let out1 = net1.forward(&x, Mode::Eval)?;
        let out2 = match net2.as_deref_mut() {
            Some(n) => Some(n.forward(&x, Mode::Eval)?),
            None => None,
        };
        for (out, acc) in
            std::iter::once((&out1, &mut acc1)).chain(out2.iter().zip(acc2.iter_mut()))
        {
            for (j, logits) in out.branch_logits.iter().enumerate() {
                acc.ce_sum += joint_cross_entropy(logits, &branch_labels(&spec, j, &y)?)? * bs;
            }
            for (j, p) in branch_predictions(out).into_iter().enumerate() {
                acc.branch_probs[j].push(p);
            }
            for (j, f) in out.penultimate_features.iter().enumerate() {
                acc.features[j].push(f.clone());
            }
            acc.agg_probs
                .push(aggregate_predict(&out.branch_logits)?.class_probs);
        }
        if let Some(out2) = &out2 {
            for (a, b) in out1.branch_logits.iter().zip(&out2.branch_logits) {
                toward_net2 += kd_branch_kl(a, b, t)? * bs;
                toward_net1 += kd_branch_kl(b, a, t)? * bs;
            }
        }
    }
    let n = data.len() as f64;
    let labels = data.labels().to_vec();
    let ce1 = acc1.ce_sum / n;
    let ce2 = acc2.as_ref().map(|a| a.ce_sum / n);
    let pass1 = acc1.finish();
    let pass2 = acc2.map(Accumulator::finish);

    let branch_acc = |p: &NetPass| -> Vec<f64> {
        p.branch_probs
            .iter()
            .map(|b| accuracy(&argmax_rows(b.view()), &labels))
            .collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let net1_branch_acc = branch_acc(&pass1);
    let net2_branch_acc = pass2.as_ref().map(branch_acc);
    let (kd, alpha1) = match ce2 {
        Some(ce2) => {
            let w = distill.weights(ce1, ce2)?;
            (
                t * t * (w.alpha1() * toward_net2 / n + w.alpha2() * toward_net1 / n),
                Some(w.alpha1()),
            )
        }
        None => (
            0.0,
            (!distill.dynamic_weights).then_some(distill.fixed_alpha),
        ),
    };
    let dual_ensemble = pass2.as_ref().map(|p2| {
        let avg = (&pass1.agg_probs + &p2.agg_probs) * 0.5;
        accuracy(&argmax_rows(avg.view()), &labels)
    });
    let record = MetricsRecord {
        epoch,
        net1_branch_mean: mean(&net1_branch_acc),
        net2_branch_mean: net2_branch_acc.as_deref().map(mean),
        net1_agg: accuracy(&argmax_rows(pass1.agg_probs.view()), &labels),
        net2_agg: pass2
            .as_ref()
            .map(|p| accuracy(&argmax_rows(p.agg_probs.view()), &labels)),
        dual_ensemble,
        net1_branch_acc,
        net2_branch_acc,
        ce1,
        ce2,
        kd,
        alpha1,
    };
    Ok(Evaluation {
        record,
        labels,
        net1: pass1,
        net2: pass2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = CssError;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(CssError::InvalidArgument(format!(
                "unknown split `{other}`"
            ))),
        }
    }
}

/// Restores a checkpoint, reloads its dataset and evaluates on `split`.
/// `data_dir` replaces the dataset root recorded in the checkpoint.
pub fn evaluate(checkpoint: &Path, split: Split, data_dir: Option<PathBuf>) -> Result<Evaluation> {
    let mut ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = ckpt.manifest.config.clone();
    if data_dir.is_some() {
        cfg.data_dir = data_dir;
    }
    let splits = load_dataset(&cfg)?;
    let data = match split {
        Split::Train => &splits.train,
        Split::Test => &splits.test,
    };
    if data.classes() != ckpt.manifest.spec.classes {
        return Err(CssError::InvalidArgument(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            ckpt.manifest.spec.classes,
            data.classes()
        )));
    }
    evaluate_networks(
        &mut ckpt.net1,
        ckpt.net2.as_mut(),
        data,
        &cfg.distillation(),
        cfg.eval_batch_size,
        ckpt.manifest.epoch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;
    use crate::model::build_network;

    fn setup(m: usize, dual: bool) -> (ExperimentConfig, Dataset, Network, Option<Network>) {
        let mut cfg = ExperimentConfig::synthetic_smoke("unused");
        cfg.model.branches = m;
        let data = load_dataset(&cfg).unwrap().test;
        let spec = cfg.model_spec();
        let net1 = build_network(&spec, 1).unwrap();
        let net2 = dual.then(|| build_network(&spec, 2).unwrap());
        (cfg, data, net1, net2)
    }

    #[test]
    fn dual_ensemble_matches_manual_average() {
        let (cfg, data, mut n1, mut n2) = setup(2, true);
        let ev =
            evaluate_networks(&mut n1, n2.as_mut(), &data, &cfg.distillation(), 16, 0).unwrap();
        let p2 = ev.net2.as_ref().unwrap();
        let mut hits = 0;
        for i in 0..data.len() {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for k in 0..cfg.model.classes {
                let v = (ev.net1.agg_probs[[i, k]] + p2.agg_probs[[i, k]]) / 2.0;
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            hits += usize::from(best == ev.labels[i]);
        }
        assert_eq!(
            ev.record.dual_ensemble.unwrap(),
            hits as f64 / data.len() as f64
        );
        assert!(ev
            .record
            .accuracies()
            .iter()
            .all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn batch_size_does_not_change_accuracies() {
        let (cfg, data, mut n1, mut n2) = setup(2, true);
        let a = evaluate_networks(&mut n1, n2.as_mut(), &data, &cfg.distillation(), 7, 0).unwrap();
        let b = evaluate_networks(&mut n1, n2.as_mut(), &data, &cfg.distillation(), 64, 0).unwrap();
        assert_eq!(a.record.accuracies(), b.record.accuracies());
        assert!((a.record.ce1 - b.record.ce1).abs() < 1e-12);
        assert!((a.record.kd - b.record.kd).abs() < 1e-12);
    }

    #[test]
    fn single_branch_aggregate_equals_branch_accuracy() {
        let (mut cfg, _, _, _) = setup(1, false);
        cfg.ablation.sample_diversity = false;
        cfg.ablation.target_diversity = false;
        let data = load_dataset(&cfg).unwrap().test;
        let mut net = build_network(&cfg.model_spec(), 3).unwrap();
        let ev = evaluate_networks(&mut net, None, &data, &cfg.distillation(), 32, 0).unwrap();
        assert_eq!(ev.record.net1_agg, ev.record.net1_branch_acc[0]);
        assert_eq!(ev.record.kd, 0.0);
        assert_eq!(ev.record.dual_ensemble, None);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let (cfg, _, mut n1, _) = setup(2, false);
        let mut other = cfg.clone();
        other.model.classes = 5;
        let data = load_dataset(&other).unwrap().test;
        assert!(evaluate_networks(&mut n1, None, &data, &cfg.distillation(), 16, 0).is_err());
    }
}
