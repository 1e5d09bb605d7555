//! Mutual distillation between the two peer networks.
//!
//! Branch `i` of one network learns from branch `i` of the other. Each
//! directed term `KL(teacher/T || student/T)` only moves the student; the
//! term that pulls network 1 is scaled by `alpha1 = ce1 / ce2`, the other by
//! `alpha2 = 1 / alpha1`, so the weaker network follows the stronger one.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CssError, Result};
use crate::joint_task::{log_softmax_rows, softmax_rows, BranchLogits};

pub const ALPHA_MIN: f64 = 0.1;
pub const ALPHA_MAX: f64 = 10.0;

/// Coefficients of the two directed distillation terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityWeights {
    alpha1: f64,
    alpha2: f64,
}

impl UtilityWeights {
    /// Equal fixed coefficient for both directions (dynamic weighting off).
    /// Unlike [`utility_weights`] the product is `alpha^2`, not 1.
    pub fn fixed(alpha: f64) -> Result<UtilityWeights> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(CssError::InvalidArgument(format!(
                "fixed distillation weight must be positive, got {alpha}"
            )));
        }
        Ok(UtilityWeights {
            alpha1: alpha,
            alpha2: alpha,
        })
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha1
    }

    pub fn alpha2(&self) -> f64 {
        self.alpha2
    }
}

/// `alpha1 = ce_net1 / ce_net2`, clamped to `[0.1, 10]`, and `alpha2 = 1 / alpha1`.
pub fn utility_weights(ce_net1: f64, ce_net2: f64) -> Result<UtilityWeights> {
    for (name, v) in [("ce_net1", ce_net1), ("ce_net2", ce_net2)] {
        if !v.is_finite() {
            return Err(CssError::NonFinite(name.into()));
        }
        if v <= 0.0 {
            return Err(CssError::InvalidArgument(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    let alpha1 = (ce_net1 / ce_net2).clamp(ALPHA_MIN, ALPHA_MAX);
    Ok(UtilityWeights {
        alpha1,
        alpha2: 1.0 / alpha1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillationConfig {
    pub temperature: f64,
    pub dynamic_weights: bool,
    pub fixed_alpha: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig {
            temperature: 3.0,
            dynamic_weights: true,
            fixed_alpha: 1.0,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CssError::Config(format!(
                "distill.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.fixed_alpha.is_finite() && self.fixed_alpha > 0.0) {
            return Err(CssError::Config(format!(
                "distill.fixed_alpha must be positive, got {}",
                self.fixed_alpha
            )));
        }
        Ok(())
    }

    /// Weights for one step given the two networks' current CE values.
    pub fn weights(&self, ce_net1: f64, ce_net2: f64) -> Result<UtilityWeights> {
        if self.dynamic_weights {
            utility_weights(ce_net1, ce_net2)
        } else {
            UtilityWeights::fixed(self.fixed_alpha)
        }
    }
}

fn check_pair(student: &BranchLogits, teacher: &BranchLogits, temperature: f64) -> Result<()> {
    if student.values().dim() != teacher.values().dim() {
        return Err(CssError::ShapeMismatch(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.values().dim(),
            teacher.values().dim()
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(CssError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Batch mean of `KL(softmax(teacher / T) || softmax(student / T))`.
pub fn kd_branch_kl(
    student_logits: &BranchLogits,
    teacher_logits: &BranchLogits,
    temperature: f64,
) -> Result<f64> {
    check_pair(student_logits, teacher_logits, temperature)?;
    let log_s = log_softmax_rows(student_logits.values().mapv(|v| v / temperature).view());
    let log_t = log_softmax_rows(teacher_logits.values().mapv(|v| v / temperature).view());
    let mut total = 0.0;
    for (ls, lt) in log_s.iter().zip(log_t.iter()) {
        let p = lt.exp();
        if p > 0.0 {
            total += p * (lt - ls);
        }
    }
    // Rounding can leave a tiny negative residue when the two are equal.
    Ok((total / student_logits.batch() as f64).max(0.0))
}

/// Value and gradients of one directed KL term. The teacher side is a
/// stop-gradient: `d_teacher` is identically zero.
#[derive(Debug, Clone)]
pub struct KlGrad {
    pub value: f64,
    pub d_student: Array2<f64>,
    pub d_teacher: Array2<f64>,
}

pub fn kd_branch_kl_with_grad(
    student_logits: &BranchLogits,
    teacher_logits: &BranchLogits,
    temperature: f64,
) -> Result<KlGrad> {
    let value = kd_branch_kl(student_logits, teacher_logits, temperature)?;
    let p_s = softmax_rows(student_logits.values().mapv(|v| v / temperature).view());
    let p_t = softmax_rows(teacher_logits.values().mapv(|v| v / temperature).view());
    let scale = 1.0 / (temperature * student_logits.batch() as f64);
    let d_student = (p_s - p_t) * scale;
    let d_teacher = Array2::zeros(d_student.dim());
    Ok(KlGrad {
        value,
        d_student,
        d_teacher,
    })
}

fn check_branches(net1: &[BranchLogits], net2: &[BranchLogits]) -> Result<()> {
    if net1.len() != net2.len() {
        return Err(CssError::InvalidArgument(format!(
            "net1 has {} branches, net2 has {}",
            net1.len(),
            net2.len()
        )));
    }
    if net1.is_empty() {
        return Err(CssError::InvalidArgument("no branches to distill".into()));
    }
    for (i, (a, b)) in net1.iter().zip(net2).enumerate() {
        if a.branch_id() != b.branch_id() || a.own_transform() != b.own_transform() {
            return Err(CssError::InvalidArgument(format!(
                "branch pair {i} couples branch {} with branch {}",
                a.branch_id(),
                b.branch_id()
            )));
        }
    }
    Ok(())
}

/// `T^2 * (alpha1 * sum_i KL(net1_i <- net2_i) + alpha2 * sum_i KL(net2_i <- net1_i))`.
pub fn kd_loss(
    net1_branches: &[BranchLogits],
    net2_branches: &[BranchLogits],
    weights: &UtilityWeights,
    cfg: &DistillationConfig,
) -> Result<f64> {
    check_branches(net1_branches, net2_branches)?;
    let t = cfg.temperature;
    let mut toward_net2 = 0.0;
    let mut toward_net1 = 0.0;
    for (a, b) in net1_branches.iter().zip(net2_branches) {
        toward_net2 += kd_branch_kl(a, b, t)?;
        toward_net1 += kd_branch_kl(b, a, t)?;
    }
    Ok(t * t * (weights.alpha1 * toward_net2 + weights.alpha2 * toward_net1))
}

/// [`kd_loss`] with the gradient reaching each network's branch logits.
#[derive(Debug, Clone)]
pub struct KdTerms {
    pub value: f64,
    pub d_net1: Vec<Array2<f64>>,
    pub d_net2: Vec<Array2<f64>>,
}

pub fn kd_loss_with_grads(
    net1_branches: &[BranchLogits],
    net2_branches: &[BranchLogits],
    weights: &UtilityWeights,
    cfg: &DistillationConfig,
) -> Result<KdTerms> {
    check_branches(net1_branches, net2_branches)?;
    let t = cfg.temperature;
    let t2 = t * t;
    let mut toward_net2 = 0.0;
    let mut toward_net1 = 0.0;
    let mut d_net1 = Vec::with_capacity(net1_branches.len());
    let mut d_net2 = Vec::with_capacity(net2_branches.len());
    for (a, b) in net1_branches.iter().zip(net2_branches) {
        let one = kd_branch_kl_with_grad(a, b, t)?;
        let two = kd_branch_kl_with_grad(b, a, t)?;
        toward_net2 += one.value;
        toward_net1 += two.value;
        d_net1.push(one.d_student * (t2 * weights.alpha1));
        d_net2.push(two.d_student * (t2 * weights.alpha2));
    }
    Ok(KdTerms {
        value: t2 * (weights.alpha1 * toward_net2 + weights.alpha2 * toward_net1),
        d_net1,
        d_net2,
    })
}

/// `ce_net1 + ce_net2 + kd`.
pub fn total_loss(ce_net1: f64, ce_net2: f64, kd: f64) -> Result<f64> {
    for (name, v) in [("ce_net1", ce_net1), ("ce_net2", ce_net2), ("kd", kd)] {
        if !v.is_finite() {
            return Err(CssError::NonFinite(name.into()));
        }
    }
    Ok(ce_net1 + ce_net2 + kd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits(rng: &mut ChaCha8Rng, rows: usize, k: usize, m: usize, id: usize) -> BranchLogits {
        let v = Array2::from_shape_fn((rows, k * m), |_| rng.random_range(-3.0..3.0));
        BranchLogits::new(v, k, m, id).unwrap()
    }

    /// Term-by-term KL with explicit softmax, independent of the log-space path.
    fn kl_oracle(student: &BranchLogits, teacher: &BranchLogits, t: f64) -> f64 {
        let (rows, cols) = student.values().dim();
        let mut total = 0.0;
        for b in 0..rows {
            let zs: f64 = (0..cols)
                .map(|j| (student.values()[[b, j]] / t).exp())
                .sum();
            let zt: f64 = (0..cols)
                .map(|j| (teacher.values()[[b, j]] / t).exp())
                .sum();
            for j in 0..cols {
                let ps = (student.values()[[b, j]] / t).exp() / zs;
                let pt = (teacher.values()[[b, j]] / t).exp() / zt;
                total += pt * (pt.ln() - ps.ln());
            }
        }
        total / rows as f64
    }

    #[test]
    fn weight_examples() {
        let w = utility_weights(2.0, 2.0).unwrap();
        assert_eq!((w.alpha1(), w.alpha2()), (1.0, 1.0));
        let w = utility_weights(2.0, 1.0).unwrap();
        assert_eq!((w.alpha1(), w.alpha2()), (2.0, 0.5));
        let w = utility_weights(100.0, 1.0).unwrap();
        assert_eq!(w.alpha1(), 10.0);
        assert!((w.alpha2() - 0.1).abs() < 1e-15);
        let w = utility_weights(1.0, 100.0).unwrap();
        assert_eq!(w.alpha1(), 0.1);
        assert!((w.alpha2() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn weight_inputs_are_validated() {
        assert!(utility_weights(0.0, 1.0).is_err());
        assert!(utility_weights(1.0, -1.0).is_err());
        assert!(utility_weights(f64::NAN, 1.0).is_err());
        assert!(utility_weights(1.0, f64::INFINITY).is_err());
        assert!(UtilityWeights::fixed(0.0).is_err());
        assert_eq!(UtilityWeights::fixed(0.5).unwrap().alpha2(), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(DistillationConfig::default().validate().is_ok());
        let mut c = DistillationConfig::default();
        c.temperature = -1.0;
        assert!(c.validate().is_err());
        c.temperature = 3.0;
        c.fixed_alpha = 0.0;
        assert!(c.validate().is_err());
        c.fixed_alpha = 2.0;
        c.dynamic_weights = false;
        let w = c.weights(5.0, 1.0).unwrap();
        assert_eq!((w.alpha1(), w.alpha2()), (2.0, 2.0));
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = logits(&mut rng, 3, 3, 2, 0);
        assert_eq!(kd_branch_kl(&a, &a, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn kl_point_mass_teacher_against_uniform_student() {
        let mut tv = Array2::zeros((1, 4));
        tv[[0, 1]] = 50.0;
        let teacher = BranchLogits::new(tv, 4, 1, 0).unwrap();
        let student = BranchLogits::new(Array2::zeros((1, 4)), 4, 1, 0).unwrap();
        let kl = kd_branch_kl(&student, &teacher, 1.0).unwrap();
        assert!((kl - 4f64.ln()).abs() < 1e-6, "{kl}");
    }

    #[test]
    fn kl_matches_oracle_at_t3() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = logits(&mut rng, 2, 3, 2, 1);
        let t = logits(&mut rng, 2, 3, 2, 1);
        assert!((kd_branch_kl(&s, &t, 3.0).unwrap() - kl_oracle(&s, &t, 3.0)).abs() < 1e-9);
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        let a = BranchLogits::new(Array2::zeros((2, 4)), 2, 2, 0).unwrap();
        let b = BranchLogits::new(Array2::zeros((3, 4)), 2, 2, 0).unwrap();
        assert!(kd_branch_kl(&a, &b, 3.0).is_err());
        assert!(kd_branch_kl(&a, &a, 0.0).is_err());
    }

    #[test]
    fn kd_loss_examples() {
        let cfg = DistillationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net: Vec<_> = (0..3).map(|j| logits(&mut rng, 2, 2, 3, j)).collect();
        let w = utility_weights(1.3, 0.7).unwrap();
        assert_eq!(kd_loss(&net, &net, &w, &cfg).unwrap(), 0.0);

        let a = logits(&mut rng, 2, 3, 1, 0);
        let b = logits(&mut rng, 2, 3, 1, 0);
        let unit = UtilityWeights::fixed(1.0).unwrap();
        for t in [3.0, 6.0] {
            let c = DistillationConfig {
                temperature: t,
                ..cfg
            };
            let expected = t * t * (kl_oracle(&a, &b, t) + kl_oracle(&b, &a, t));
            let got = kd_loss(
                std::slice::from_ref(&a),
                std::slice::from_ref(&b),
                &unit,
                &c,
            )
            .unwrap();
            assert!((got - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn kd_loss_rejects_bad_pairings() {
        let cfg = DistillationConfig::default();
        let w = UtilityWeights::fixed(1.0).unwrap();
        let a0 = BranchLogits::new(Array2::zeros((1, 4)), 2, 2, 0).unwrap();
        let a1 = BranchLogits::new(Array2::zeros((1, 4)), 2, 2, 1).unwrap();
        assert!(kd_loss(
            &[a0.clone(), a1.clone()],
            std::slice::from_ref(&a0),
            &w,
            &cfg
        )
        .is_err());
        assert!(kd_loss(&[a0.clone(), a1.clone()], &[a1, a0], &w, &cfg).is_err());
        assert!(kd_loss(&[], &[], &w, &cfg).is_err());
    }

    #[test]
    fn total_loss_is_a_sum() {
        assert_eq!(total_loss(1.0, 2.0, 0.5).unwrap(), 3.5);
        assert_eq!(total_loss(1.25, 0.5, 0.0).unwrap(), 1.75);
        assert!(total_loss(1.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn student_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = logits(&mut rng, 2, 3, 2, 0);
        let t = logits(&mut rng, 2, 3, 2, 0);
        let g = kd_branch_kl_with_grad(&s, &t, 3.0).unwrap();
        assert!(g.d_teacher.iter().all(|&v| v == 0.0));
        let eps = 1e-5;
        for b in 0..2 {
            for j in 0..6 {
                let mut plus = s.values().to_owned();
                plus[[b, j]] += eps;
                let mut minus = s.values().to_owned();
                minus[[b, j]] -= eps;
                let fp = kd_branch_kl(&BranchLogits::new(plus, 3, 2, 0).unwrap(), &t, 3.0).unwrap();
                let fm =
                    kd_branch_kl(&BranchLogits::new(minus, 3, 2, 0).unwrap(), &t, 3.0).unwrap();
                let numeric = (fp - fm) / (2.0 * eps);
                let a = g.d_student[[b, j]];
                assert!((a - numeric).abs() / a.abs().max(numeric.abs()) < 1e-4);
            }
        }
    }

    #[test]
    fn kd_gradients_are_weighted_student_gradients() {
        let cfg = DistillationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n1: Vec<_> = (0..2).map(|j| logits(&mut rng, 3, 2, 2, j)).collect();
        let n2: Vec<_> = (0..2).map(|j| logits(&mut rng, 3, 2, 2, j)).collect();
        let w = utility_weights(1.5, 1.0).unwrap();
        let terms = kd_loss_with_grads(&n1, &n2, &w, &cfg).unwrap();
        assert!((terms.value - kd_loss(&n1, &n2, &w, &cfg).unwrap()).abs() < 1e-12);
        // Finite differences of the full kd loss w.r.t. one net1 logit.
        let eps = 1e-6;
        let mut plus = n1.clone();
        let mut v = plus[1].values().to_owned();
        v[[2, 3]] += eps;
        plus[1] = BranchLogits::new(v, 2, 2, 1).unwrap();
        // Only the net1 <- net2 term is differentiated for net1 logits.
        let directed = |net1: &[BranchLogits]| -> f64 {
            9.0 * w.alpha1()
                * net1
                    .iter()
                    .zip(&n2)
                    .map(|(a, b)| kd_branch_kl(a, b, 3.0).unwrap())
                    .sum::<f64>()
        };
        let numeric = (directed(&plus) - directed(&n1)) / eps;
        let a = terms.d_net1[1][[2, 3]];
        assert!(
            (a - numeric).abs() / a.abs().max(1e-12) < 1e-4,
            "{a} vs {numeric}"
        );
    }

    proptest! {
        #[test]
        fn weights_are_reciprocal(a in 1e-6f64..1e3, b in 1e-6f64..1e3) {
            let w = utility_weights(a, b).unwrap();
            prop_assert!((w.alpha1() * w.alpha2() - 1.0).abs() < 1e-9);
            let swapped = utility_weights(b, a).unwrap();
            prop_assert!((swapped.alpha1() - w.alpha2()).abs() < 1e-9 * w.alpha2().max(1.0));
            if a > b {
                prop_assert!(w.alpha1() > 1.0 && w.alpha2() < 1.0);
            }
        }

        #[test]
        fn kl_is_non_negative(seed in any::<u64>(), t in 0.5f64..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = logits(&mut rng, 3, 4, 2, 0);
            let te = logits(&mut rng, 3, 4, 2, 0);
            prop_assert!(kd_branch_kl(&s, &te, t).unwrap() >= 0.0);
        }

        #[test]
        fn fixed_unit_weights_make_kd_symmetric(seed in any::<u64>(), m in 1usize..4) {
            let cfg = DistillationConfig { dynamic_weights: false, ..Default::default() };
            let w = cfg.weights(1.0, 2.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n1: Vec<_> = (0..m).map(|j| logits(&mut rng, 2, 3, m, j)).collect();
            let n2: Vec<_> = (0..m).map(|j| logits(&mut rng, 2, 3, m, j)).collect();
            let ab = kd_loss(&n1, &n2, &w, &cfg).unwrap();
            let ba = kd_loss(&n2, &n1, &w, &cfg).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
