//! Joint (class, transform) label space.
//!
//! A branch head emits `K * m` scores. Joint index `class * m + transform`
//! keeps every class's transforms contiguous. At test time branch `j` only
//! contributes the slice of its own transform, and the slices are averaged
//! before a single softmax over the `K` classes.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{CssError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct JointLabel {
    pub class_id: usize,
    pub transform_id: usize,
    pub joint_index: usize,
}

impl JointLabel {
    /// Inverse of [`make_joint_label`].
    pub fn from_index(joint_index: usize, classes: usize, transforms: usize) -> Result<JointLabel> {
        if transforms == 0 || joint_index >= classes * transforms {
            return Err(CssError::InvalidArgument(format!(
                "joint index {joint_index} outside [0, {})",
                classes * transforms
            )));
        }
        Ok(JointLabel {
            class_id: joint_index / transforms,
            transform_id: joint_index % transforms,
            joint_index,
        })
    }
}

pub fn make_joint_label(
    class_id: usize,
    transform_id: usize,
    classes: usize,
    transforms: usize,
) -> Result<JointLabel> {
    if class_id >= classes {
        return Err(CssError::InvalidArgument(format!(
            "class id {class_id} outside [0, {classes})"
        )));
    }
    if transform_id >= transforms {
        return Err(CssError::InvalidArgument(format!(
            "transform id {transform_id} outside [0, {transforms})"
        )));
    }
    Ok(JointLabel {
        class_id,
        transform_id,
        joint_index: class_id * transforms + transform_id,
    })
}

/// Raw scores of one branch over the joint label space.
///
/// `transforms == 1` is the plain `K`-way head used when the label space is
/// not augmented; every branch then owns the whole row.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLogits {
    values: Array2<f64>,
    classes: usize,
    transforms: usize,
    branch_id: usize,
}

impl BranchLogits {
    pub fn new(
        values: Array2<f64>,
        classes: usize,
        transforms: usize,
        branch_id: usize,
    ) -> Result<BranchLogits> {
        if classes == 0 || transforms == 0 {
            return Err(CssError::InvalidArgument(
                "classes and transforms must be positive".into(),
            ));
        }
        if values.ncols() != classes * transforms {
            return Err(CssError::ShapeMismatch(format!(
                "branch logits have {} columns, expected {classes}x{transforms}",
                values.ncols()
            )));
        }
        if transforms > 1 && branch_id >= transforms {
            return Err(CssError::InvalidArgument(format!(
                "branch id {branch_id} has no transform among {transforms}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CssError::NonFinite(format!("logits of branch {branch_id}")));
        }
        Ok(BranchLogits {
            values,
            classes,
            transforms,
            branch_id,
        })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.nrows()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn transforms(&self) -> usize {
        self.transforms
    }

    pub fn branch_id(&self) -> usize {
        self.branch_id
    }

    pub fn own_transform(&self) -> usize {
        if self.transforms == 1 {
            0
        } else {
            self.branch_id
        }
    }

    /// `[batch x K]` scores at joint indices `class * m + own_transform`.
    pub fn own_slice(&self) -> Array2<f64> {
        let t = self.own_transform();
        let m = self.transforms;
        Array2::from_shape_fn((self.batch(), self.classes), |(b, i)| {
            self.values[[b, i * m + t]]
        })
    }
}

/// Max-shifted row-wise softmax.
pub fn softmax_rows(values: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = values.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Row-wise `log softmax` computed as `v - max - ln(sum(exp(v - max)))`.
pub fn log_softmax_rows(values: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = values.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Softmax over all `K * m` joint entries of every row.
pub fn joint_softmax(logits: &BranchLogits) -> Array2<f64> {
    softmax_rows(logits.values())
}

fn check_labels(logits: &BranchLogits, labels: &[JointLabel]) -> Result<()> {
    if labels.len() != logits.batch() {
        return Err(CssError::ShapeMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.batch()
        )));
    }
    let width = logits.classes * logits.transforms;
    for label in labels {
        if label.joint_index >= width
            || label.class_id >= logits.classes
            || label.transform_id >= logits.transforms
            || label.class_id * logits.transforms + label.transform_id != label.joint_index
        {
            return Err(CssError::InvalidArgument(format!(
                "label {label:?} does not fit a {}x{} joint space",
                logits.classes, logits.transforms
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the joint labels.
pub fn joint_cross_entropy(logits: &BranchLogits, labels: &[JointLabel]) -> Result<f64> {
    check_labels(logits, labels)?;
    let log_probs = log_softmax_rows(logits.values());
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, label)| -log_probs[[b, label.joint_index]])
        .sum();
    Ok(total / labels.len() as f64)
}

/// [`joint_cross_entropy`] together with its gradient with respect to the
/// logits, `(softmax - onehot) / batch`.
pub fn joint_cross_entropy_with_grad(
    logits: &BranchLogits,
    labels: &[JointLabel],
) -> Result<(f64, Array2<f64>)> {
    let loss = joint_cross_entropy(logits, labels)?;
    let batch = labels.len() as f64;
    let mut grad = joint_softmax(logits);
    for (b, label) in labels.iter().enumerate() {
        grad[[b, label.joint_index]] -= 1.0;
    }
    grad /= batch;
    Ok((loss, grad))
}

/// Mean of every branch's own-transform slice, `[batch x K]`.
///
/// With an augmented label space the list must hold exactly one branch per
/// transform, in branch order. With a plain head (`transforms == 1`) any
/// number of branches may be averaged.
pub fn aggregate_logits(branch_logits: &[BranchLogits]) -> Result<Array2<f64>> {
    let first = branch_logits
        .first()
        .ok_or_else(|| CssError::InvalidArgument("no branches to aggregate".into()))?;
    let (classes, transforms, batch) = (first.classes, first.transforms, first.batch());
    if transforms > 1 && branch_logits.len() != transforms {
        return Err(CssError::InvalidArgument(format!(
            "{} branches supplied for a joint space with {transforms} transforms",
            branch_logits.len()
        )));
    }
    let mut sum = Array2::<f64>::zeros((batch, classes));
    for (position, branch) in branch_logits.iter().enumerate() {
        if branch.classes != classes || branch.transforms != transforms || branch.batch() != batch {
            return Err(CssError::ShapeMismatch(format!(
                "branch {position} has shape {}x{}x{}, expected {batch}x{classes}x{transforms}",
                branch.batch(),
                branch.classes,
                branch.transforms
            )));
        }
        if branch.branch_id != position {
            return Err(CssError::InvalidArgument(format!(
                "branch at position {position} carries id {}",
                branch.branch_id
            )));
        }
        sum += &branch.own_slice();
    }
    sum /= branch_logits.len() as f64;
    Ok(sum)
}

/// Class distribution from a softmax over the aggregated logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPrediction {
    pub class_probs: Array2<f64>,
}

impl AggregatedPrediction {
    pub fn argmax(&self) -> Vec<usize> {
        argmax_rows(self.class_probs.view())
    }
}

pub fn aggregate_predict(branch_logits: &[BranchLogits]) -> Result<AggregatedPrediction> {
    let logits = aggregate_logits(branch_logits)?;
    Ok(AggregatedPrediction {
        class_probs: softmax_rows(logits.view()),
    })
}

/// Index of the first maximum of each row.
pub fn argmax_rows(values: ArrayView2<'_, f64>) -> Vec<usize> {
    values
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
