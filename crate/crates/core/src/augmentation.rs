//! Feature-level quadrant masks.
//!
//! Each branch receives the low-level feature map with one spatial quadrant
//! zeroed in every channel. Branch `i` owns quadrant `i mod 4` in the order
//! top-left, top-right, bottom-left, bottom-right, so the assignment is the
//! same for both peer networks and for training and evaluation.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{CssError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ORDER: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn for_branch(branch: usize) -> Quadrant {
        Self::ORDER[branch % 4]
    }

    /// Half-open `(rows, cols)` ranges covered by this quadrant. The split
    /// sits at `ceil(height / 2)` and `ceil(width / 2)`.
    pub fn bounds(
        self,
        height: usize,
        width: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let row_split = height.div_ceil(2);
        let col_split = width.div_ceil(2);
        let rows = match self {
            Quadrant::TopLeft | Quadrant::TopRight => 0..row_split,
            Quadrant::BottomLeft | Quadrant::BottomRight => row_split..height,
        };
        let cols = match self {
            Quadrant::TopLeft | Quadrant::BottomLeft => 0..col_split,
            Quadrant::TopRight | Quadrant::BottomRight => col_split..width,
        };
        (rows, cols)
    }
}

/// One binary spatial grid per branch. A grid applies identically to every
/// channel of the feature map it masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    height: usize,
    width: usize,
    masks: Vec<Array2<f64>>,
}

impl MaskSet {
    /// An all-ones mask set: every branch sees the unmasked feature map.
    /// Used when sample diversity is switched off.
    pub fn identity(m: usize, height: usize, width: usize) -> Result<Self> {
        check_dims(m, height, width)?;
        Ok(MaskSet {
            height,
            width,
            masks: vec![Array2::ones((height, width)); m],
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self, branch: usize) -> ArrayView2<'_, f64> {
        self.masks[branch].view()
    }

    pub fn masks(&self) -> &[Array2<f64>] {
        &self.masks
    }

    /// Number of zeroed cells in the mask of `branch`.
    pub fn zero_count(&self, branch: usize) -> usize {
        self.masks[branch].iter().filter(|&&v| v == 0.0).count()
    }
}

fn check_dims(m: usize, height: usize, width: usize) -> Result<()> {
    if m < 1 {
        return Err(CssError::InvalidArgument(
            "mask set needs at least one branch".into(),
        ));
    }
    if height < 2 || width < 2 {
        return Err(CssError::InvalidArgument(format!(
            "mask spatial dims must be at least 2x2, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Builds the quadrant masks for `m` branches over a `height x width` map.
///
/// The assignment is deterministic; `seed` is part of the signature so
/// callers can switch to randomized masks without an interface change.
pub fn make_mask_set(m: usize, height: usize, width: usize, _seed: u64) -> Result<MaskSet> {
    check_dims(m, height, width)?;
    let masks = (0..m)
        .map(|branch| {
            let (rows, cols) = Quadrant::for_branch(branch).bounds(height, width);
            let mut grid = Array2::ones((height, width));
            for y in rows {
                for x in cols.clone() {
                    grid[[y, x]] = 0.0;
                }
            }
            grid
        })
        .collect();
    Ok(MaskSet {
        height,
        width,
        masks,
    })
}

/// `out[c, y, x] = mask[y, x] * features[c, y, x]`.
pub fn apply_mask(features: &Array3<f64>, mask: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    let (_, h, w) = features.dim();
    if mask.dim() != (h, w) {
        return Err(CssError::ShapeMismatch(format!(
            "mask is {:?} but feature map is {h}x{w}",
            mask.dim()
        )));
    }
    let mut out = features.clone();
    for mut channel in out.axis_iter_mut(Axis(0)) {
        channel *= &mask;
    }
    Ok(out)
}

/// Batched form of [`apply_mask`] over an `N x C x H x W` tensor.
///
/// The map is linear with a diagonal Jacobian equal to the mask, so the same
/// call also propagates gradients back through the masking step.
pub fn apply_mask_batch(features: &Array4<f64>, mask: ArrayView2<'_, f64>) -> Result<Array4<f64>> {
    let (_, _, h, w) = features.dim();
    if mask.dim() != (h, w) {
        return Err(CssError::ShapeMismatch(format!(
            "mask is {:?} but feature map is {h}x{w}",
            mask.dim()
        )));
    }
    let mut out = features.clone();
    for mut sample in out.axis_iter_mut(Axis(0)) {
        for mut channel in sample.axis_iter_mut(Axis(0)) {
            Zip::from(&mut channel).and(&mask).for_each(|v, &a| *v *= a);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_masks_partition_a_4x4_grid() {
        let set = make_mask_set(4, 4, 4, 0).unwrap();
        assert_eq!(set.len(), 4);
        let mut zeroed_by = Array2::<usize>::zeros((4, 4));
        for b in 0..4 {
            assert_eq!(set.zero_count(b), 4);
            for ((y, x), &v) in set.mask(b).indexed_iter() {
                if v == 0.0 {
                    zeroed_by[[y, x]] += 1;
                }
            }
        }
        assert!(zeroed_by.iter().all(|&c| c == 1));
    }

    #[test]
    fn single_branch_on_2x2_zeroes_origin() {
        let set = make_mask_set(1, 2, 2, 7).unwrap();
        assert_eq!(set.mask(0), array![[0.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn three_branches_on_8x8_take_tl_tr_bl() {
        let set = make_mask_set(3, 8, 8, 0).unwrap();
        // Enumerate all cells and count zeros per quadrant for every mask.
        let quadrant_of = |y: usize, x: usize| match (y < 4, x < 4) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        for b in 0..3 {
            let mut per_quadrant = [0usize; 4];
            for y in 0..8 {
                for x in 0..8 {
                    if set.mask(b)[[y, x]] == 0.0 {
                        per_quadrant[quadrant_of(y, x)] += 1;
                    }
                }
            }
            let mut expected = [0usize; 4];
            expected[b] = 16;
            assert_eq!(per_quadrant, expected, "branch {b}");
        }
    }

    #[test]
    fn branches_beyond_four_wrap_around() {
        let set = make_mask_set(6, 4, 4, 0).unwrap();
        assert_eq!(set.mask(4), set.mask(0));
        assert_eq!(set.mask(5), set.mask(1));
    }

    #[test]
    fn odd_dims_do_not_crash() {
        let set = make_mask_set(4, 5, 3, 0).unwrap();
        // ceil split: rows 0..3 / 3..5, cols 0..2 / 2..3
        assert_eq!(set.zero_count(0), 6);
        assert_eq!(set.zero_count(1), 3);
        assert_eq!(set.zero_count(2), 4);
        assert_eq!(set.zero_count(3), 2);
        assert_eq!((0..4).map(|b| set.zero_count(b)).sum::<usize>(), 15);
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(make_mask_set(0, 4, 4, 0).is_err());
        assert!(make_mask_set(2, 1, 4, 0).is_err());
        assert!(make_mask_set(2, 4, 1, 0).is_err());
        assert!(MaskSet::identity(0, 4, 4).is_err());
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let f = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c * 9 + y * 3 + x) as f64 - 4.0);
        let set = MaskSet::identity(1, 3, 3).unwrap();
        assert_eq!(apply_mask(&f, set.mask(0)).unwrap(), f);
    }

    #[test]
    fn masking_ones_zeroes_one_cell() {
        let f = Array3::ones((1, 2, 2));
        let set = make_mask_set(1, 2, 2, 0).unwrap();
        let out = apply_mask(&f, set.mask(0)).unwrap();
        assert_eq!(out, array![[[0.0, 1.0], [1.0, 1.0]]]);
    }

    #[test]
    fn quadrant_mask_zeroes_a_quarter_of_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(0.5..2.0));
        let set = make_mask_set(4, 4, 4, 0).unwrap();
        for b in 0..4 {
            let out = apply_mask(&f, set.mask(b)).unwrap();
            for c in 0..3 {
                let mut zeros = 0;
                for y in 0..4 {
                    for x in 0..4 {
                        if f[[c, y, x]] * set.mask(b)[[y, x]] == 0.0 {
                            zeros += 1;
                        }
                        assert_eq!(out[[c, y, x]], f[[c, y, x]] * set.mask(b)[[y, x]]);
                    }
                }
                assert_eq!(zeros, 4);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f = Array3::<f64>::ones((2, 4, 4));
        let set = make_mask_set(1, 4, 2, 0).unwrap();
        assert!(matches!(
            apply_mask(&f, set.mask(0)),
            Err(CssError::ShapeMismatch(_))
        ));
        let batch = Array4::<f64>::ones((1, 2, 4, 4));
        assert!(apply_mask_batch(&batch, set.mask(0)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // d/dF of sum(w * apply_mask(F)) against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.random_range(-1.0..1.0));
        let w = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.random_range(-1.0..1.0));
        let set = make_mask_set(4, 4, 4, 0).unwrap();
        let objective = |x: &Array4<f64>| (apply_mask_batch(x, set.mask(2)).unwrap() * &w).sum();
        let analytic = apply_mask_batch(&w, set.mask(2)).unwrap();
        let eps = 1e-6;
        for idx in [
            [0, 0, 0, 0],
            [1, 1, 3, 3],
            [0, 1, 2, 1],
            [1, 0, 2, 3],
            [0, 0, 1, 2],
        ] {
            let mut plus = f.clone();
            plus[idx] += eps;
            let mut minus = f.clone();
            minus[idx] -= eps;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            let a = analytic[idx];
            let scale = a.abs().max(numeric.abs()).max(1e-12);
            if a == 0.0 {
                assert!(numeric.abs() < 1e-9);
            } else {
                assert!((a - numeric).abs() / scale < 1e-4, "{a} vs {numeric}");
            }
        }
    }

    proptest! {
        #[test]
        fn zero_pattern_is_shared_across_channels(
            c in 1usize..5, h in 2usize..9, w in 2usize..9, b in 0usize..4, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.1..1.0));
            let set = make_mask_set(4, h, w, seed).unwrap();
            let out = apply_mask(&f, set.mask(b)).unwrap();
            let pattern: Vec<bool> = out.index_axis(Axis(0), 0).iter().map(|&v| v == 0.0).collect();
            for ch in out.axis_iter(Axis(0)) {
                let p: Vec<bool> = ch.iter().map(|&v| v == 0.0).collect();
                prop_assert_eq!(&p, &pattern);
            }
        }

        #[test]
        fn masking_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Array3::from_shape_fn((2, 4, 6), |_| rng.random_range(-1.0..1.0));
            let g = Array3::from_shape_fn((2, 4, 6), |_| rng.random_range(-1.0..1.0));
            let set = make_mask_set(3, 4, 6, 0).unwrap();
            for br in 0..3 {
                let lhs = apply_mask(&(&f * a + &g * b), set.mask(br)).unwrap();
                let rhs = apply_mask(&f, set.mask(br)).unwrap() * a + apply_mask(&g, set.mask(br)).unwrap() * b;
                for (x, y) in lhs.iter().zip(rhs.iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
