//! Branch diversity and transform separability.
//!
//! Each branch's prediction is the class distribution from its own-transform
//! slice, so distances are comparable with plain `K`-way multi-branch
//! models. Separability of the penultimate features by transform id is
//! measured with a held-out linear probe and a silhouette score.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{CssError, Result};
use crate::joint_task::{argmax_rows, softmax_rows};
use crate::model::NetworkOutput;

/// Softmax over each branch's own-transform slice, `[batch x K]` per branch.
pub fn branch_predictions(output: &NetworkOutput) -> Vec<Array2<f64>> {
    output
        .branch_logits
        .iter()
        .map(|l| softmax_rows(l.own_slice().view()))
        .collect()
}

/// Mean Euclidean distances between every pair of prediction matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseDistances {
    /// Entry `(a, b)` is the batch mean of `||p_a - p_b||_2`.
    pub matrix: Array2<f64>,
    /// Mean over unordered pairs `a < b`.
    pub mean: f64,
}

fn check_same_shape(preds: &[Array2<f64>]) -> Result<()> {
    let first = preds[0].dim();
    if first.0 == 0 {
        return Err(CssError::InvalidArgument("empty prediction batch".into()));
    }
    if let Some((i, p)) = preds.iter().enumerate().find(|(_, p)| p.dim() != first) {
        return Err(CssError::ShapeMismatch(format!(
            "prediction {i} has shape {:?}, expected {first:?}",
            p.dim()
        )));
    }
    Ok(())
}

fn mean_row_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let total: f64 = a
        .axis_iter(Axis(0))
        .zip(b.axis_iter(Axis(0)))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / a.nrows() as f64
}

pub fn pairwise_diversity(preds: &[Array2<f64>]) -> Result<PairwiseDistances> {
    if preds.len() < 2 {
        return Err(CssError::InvalidArgument(format!(
            "pairwise diversity needs at least two branches, got {}",
            preds.len()
        )));
    }
    check_same_shape(preds)?;
    let n = preds.len();
    let mut matrix = Array2::<f64>::zeros((n, n));
    let mut sum = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let d = mean_row_distance(preds[a].view(), preds[b].view());
            matrix[[a, b]] = d;
            matrix[[b, a]] = d;
            sum += d;
        }
    }
    Ok(PairwiseDistances {
        matrix,
        mean: sum / (n * (n - 1) / 2) as f64,
    })
}

/// Diversity statistics of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub epoch: usize,
    /// Mean within-network pair distance, averaged over networks. `None`
    /// with a single branch.
    pub intra_net: Option<f64>,
    /// Mean distance between branch `j` of one network and branch `j` of the
    /// other. `None` without a second network.
    pub inter_net: Option<f64>,
    /// Distances among all branches, net1's first.
    pub per_pair: Array2<f64>,
}

pub fn diversity_report(
    epoch: usize,
    net1: &[Array2<f64>],
    net2: Option<&[Array2<f64>]>,
) -> Result<DiversityReport> {
    if net1.is_empty() {
        return Err(CssError::InvalidArgument("no branch predictions".into()));
    }
    let mut all: Vec<Array2<f64>> = net1.to_vec();
    if let Some(net2) = net2 {
        if net2.len() != net1.len() {
            return Err(CssError::ShapeMismatch(format!(
                "{} vs {} branches",
                net1.len(),
                net2.len()
            )));
        }
        all.extend_from_slice(net2);
    }
    let per_pair = if all.len() >= 2 {
        pairwise_diversity(&all)?.matrix
    } else {
        check_same_shape(&all)?;
        Array2::zeros((1, 1))
    };
    let m = net1.len();
    let intra_net = if m >= 2 {
        let mut nets = vec![pairwise_diversity(net1)?.mean];
        if let Some(net2) = net2 {
            nets.push(pairwise_diversity(net2)?.mean);
        }
        Some(nets.iter().sum::<f64>() / nets.len() as f64)
    } else {
        None
    };
    let inter_net = net2.map(|_| (0..m).map(|j| per_pair[[j, m + j]]).sum::<f64>() / m as f64);
    Ok(DiversityReport {
        epoch,
        intra_net,
        inter_net,
        per_pair,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparabilityReport {
    /// Held-out accuracy of a linear probe predicting the transform id.
    pub transform_probe_accuracy: f64,
    pub silhouette: f64,
}

/// Probe settings; the defaults are used by [`transform_separability`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Upper bound on the points used for the quadratic silhouette score.
    pub silhouette_cap: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 300,
            learning_rate: 0.5,
            silhouette_cap: 1200,
        }
    }
}

pub fn transform_separability(features: &[Array2<f64>]) -> Result<SeparabilityReport> {
    transform_separability_with(features, &ProbeConfig::default())
}

/// Row `i` of every matrix comes from the same input sample. Samples with
/// `i % 3 == 2` are held out, so all transformed copies of a sample fall on
/// the same side of the split.
pub fn transform_separability_with(
    features: &[Array2<f64>],
    probe: &ProbeConfig,
) -> Result<SeparabilityReport> {
    let m = features.len();
    if m < 2 {
        return Err(CssError::InvalidArgument(format!(
            "separability needs at least two branches, got {m}"
        )));
    }
    check_same_shape(features)?;
    let (n, _) = features[0].dim();
    if n < 3 {
        return Err(CssError::InvalidArgument(format!(
            "separability needs at least three samples per branch, got {n}"
        )));
    }
    let train_rows: Vec<usize> = (0..n).filter(|i| i % 3 != 2).collect();
    let test_rows: Vec<usize> = (0..n).filter(|i| i % 3 == 2).collect();
    let gather = |rows: &[usize]| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (j, f) in features.iter().enumerate() {
            for &r in rows {
                x.push(f.row(r).to_owned());
                y.push(j);
            }
        }
        (stack_rows(&x), y)
    };
    let (mut x_train, y_train) = gather(&train_rows);
    let (mut x_test, y_test) = gather(&test_rows);
    standardize(&mut x_train, &mut x_test);
    let (w, b) = fit_softmax_probe(&x_train, &y_train, m, probe);
    let scores = x_test.dot(&w) + &b;
    let hits = argmax_rows(scores.view())
        .iter()
        .zip(&y_test)
        .filter(|(p, y)| p == y)
        .count();
    let transform_probe_accuracy = hits as f64 / y_test.len() as f64;

    let stride = (n * m).div_ceil(probe.silhouette_cap.max(2)).max(1);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        for (j, f) in features.iter().enumerate() {
            if (i * m + j).is_multiple_of(stride) {
                points.push(f.row(i).to_owned());
                labels.push(j);
            }
        }
    }
    let silhouette = silhouette_score(&stack_rows(&points), &labels);
    Ok(SeparabilityReport {
        transform_probe_accuracy,
        silhouette,
    })
}

fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

/// Centres and scales both sets with the training columns' statistics.
/// Constant columns become zero.
fn standardize(train: &mut Array2<f64>, test: &mut Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let std = train
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { f64::INFINITY });
    for x in [train, test] {
        *x -= &mean;
        *x /= &std;
    }
}

/// Multinomial logistic regression by full-batch gradient descent from zero.
fn fit_softmax_probe(
    x: &Array2<f64>,
    y: &[usize],
    classes: usize,
    probe: &ProbeConfig,
) -> (Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);
    for _ in 0..probe.iterations {
        let mut g = softmax_rows((x.dot(&w) + &b).view());
        for (row, &label) in y.iter().enumerate() {
            g[[row, label]] -= 1.0;
        }
        g /= n as f64;
        w -= &(x.t().dot(&g) * probe.learning_rate);
        b -= &(g.sum_axis(Axis(0)) * probe.learning_rate);
    }
    (w, b)
}

/// Mean silhouette coefficient with Euclidean distances. Points in a
/// singleton cluster score zero.
pub fn silhouette_score(points: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = points.nrows();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    if n < 2 || k < 2 {
        return 0.0;
    }
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                let d: f64 = points
                    .row(i)
                    .iter()
                    .zip(points.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                sums[labels[j]] += d;
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Projection onto the top two principal axes (power iteration with
/// deflation). Returns `[n x 2]`.
pub fn pca_2d(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Array2::zeros((n, 2));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centred = &x - &mean;
    let mut cov = centred.t().dot(&centred) / n as f64;
    let mut out = Array2::zeros((n, 2));
    for comp in 0..2.min(d) {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + (i as f64 * 0.37 + comp as f64).sin());
        let mut lambda = 0.0;
        for _ in 0..200 {
            let next = cov.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-300 {
                break;
            }
            lambda = norm;
            v = next / norm;
        }
        if lambda == 0.0 {
            break;
        }
        out.slice_mut(s![.., comp]).assign(&centred.dot(&v));
        let outer = v
            .view()
            .insert_axis(Axis(1))
            .dot(&v.view().insert_axis(Axis(0)));
        cov -= &(outer * lambda);
    }
    out
}
