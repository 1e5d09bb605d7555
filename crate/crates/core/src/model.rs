//! Multi-branch network assembly.
//!
//! One network is a shared stem followed by `m` independent towers, each
//! with its own joint classifier head. The stem output is masked per branch
//! before it enters that branch's tower:
//!
//! ```text
//! x -> stem -> F -+-> A_0 * F -> tower_0 -> pool -> head_0 -> logits_0
//!                 +-> A_1 * F -> tower_1 -> pool -> head_1 -> logits_1
//!                 ...
//! ```
//!
//! The two peers of a run are two networks built from the same spec with
//! different seeds.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{apply_mask_batch, make_mask_set, MaskSet};
use crate::error::{CssError, Result};
use crate::joint_task::BranchLogits;
use crate::nn::resnet::{blocks_per_stage, stage_width, STAGES};
use crate::nn::{
    Inspector, Layer, Linear, Mode, ResNetStem, ResNetTower, Sgd, StateCollector, Visitor, ZeroGrad,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Residual depth `6n + 2` (8, 20, 56, 110, ...).
    pub depth: usize,
    /// Number of residual stages inside the stem; the rest are replicated per branch.
    pub split_depth: usize,
    /// Branch count `m`.
    pub branches: usize,
    /// Class count `K`.
    pub classes: usize,
    /// `[channels, height, width]` of the input images.
    pub input_shape: [usize; 3],
    /// Channel width of the first stage.
    pub base_width: usize,
    /// Mask the stem output per branch.
    pub sample_diversity: bool,
    /// Use `K * m` joint heads instead of `K`-way heads.
    pub target_diversity: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if blocks_per_stage(self.depth).is_none() {
            return Err(CssError::InvalidArgument(format!(
                "depth {} is not of the form 6n + 2 with n >= 1",
                self.depth
            )));
        }
        if self.split_depth < 1 || self.split_depth >= STAGES {
            return Err(CssError::InvalidArgument(format!(
                "split_depth {} outside [1, {STAGES})",
                self.split_depth
            )));
        }
        if self.branches < 1 {
            return Err(CssError::InvalidArgument(
                "at least one branch is required".into(),
            ));
        }
        if self.classes < 2 {
            return Err(CssError::InvalidArgument(
                "at least two classes are required".into(),
            ));
        }
        if self.base_width < 1 {
            return Err(CssError::InvalidArgument(
                "base_width must be positive".into(),
            ));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 {
            return Err(CssError::InvalidArgument(
                "input needs at least one channel".into(),
            ));
        }
        let (fh, fw) = self.feature_hw();
        if fh < 2 || fw < 2 || h == 0 || w == 0 {
            return Err(CssError::InvalidArgument(format!(
                "input {h}x{w} leaves a {fh}x{fw} stem output; masks need at least 2x2"
            )));
        }
        Ok(())
    }

    /// Transform count of the label space: `m` with joint heads, else 1.
    pub fn label_transforms(&self) -> usize {
        if self.target_diversity {
            self.branches
        } else {
            1
        }
    }

    pub fn head_outputs(&self) -> usize {
        self.classes * self.label_transforms()
    }

    /// Spatial size of the stem output.
    pub fn feature_hw(&self) -> (usize, usize) {
        let [_, mut h, mut w] = self.input_shape;
        for _ in 1..self.split_depth {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn feature_channels(&self) -> usize {
        stage_width(self.base_width, self.split_depth - 1)
    }

    pub fn penultimate_dim(&self) -> usize {
        ResNetTower::out_features(self.base_width)
    }
}

/// Per-branch logits plus the pooled features feeding each head.
#[derive(Debug, Clone)]
pub struct NetworkOutput {
    pub branch_logits: Vec<BranchLogits>,
    pub penultimate_features: Vec<Array2<f64>>,
}

impl NetworkOutput {
    pub fn batch(&self) -> usize {
        self.penultimate_features.first().map_or(0, |f| f.nrows())
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: ModelSpec,
    seed: u64,
    masks: MaskSet,
    stem: ResNetStem,
    towers: Vec<ResNetTower>,
    heads: Vec<Linear>,
}

/// Builds one peer network. Initialisation draws from a ChaCha8 stream
/// seeded with `seed`, in the order stem, then tower and head per branch.
pub fn build_network(spec: &ModelSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let blocks = blocks_per_stage(spec.depth).expect("validated depth");
    let (fh, fw) = spec.feature_hw();
    let masks = if spec.sample_diversity {
        make_mask_set(spec.branches, fh, fw, seed)?
    } else {
        MaskSet::identity(spec.branches, fh, fw)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = ResNetStem::new(
        spec.input_shape[0],
        spec.base_width,
        blocks,
        spec.split_depth,
        &mut rng,
    );
    let mut towers = Vec::with_capacity(spec.branches);
    let mut heads = Vec::with_capacity(spec.branches);
    for _ in 0..spec.branches {
        towers.push(ResNetTower::new(
            spec.base_width,
            blocks,
            spec.split_depth,
            &mut rng,
        ));
        heads.push(Linear::new(
            spec.penultimate_dim(),
            spec.head_outputs(),
            &mut rng,
        ));
    }
    Ok(Network {
        spec: spec.clone(),
        seed,
        masks,
        stem,
        towers,
        heads,
    })
}

impl Network {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    fn check_input(&self, batch: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = batch.dim();
        if [c, h, w] != self.spec.input_shape {
            return Err(CssError::ShapeMismatch(format!(
                "batch images are {c}x{h}x{w}, network expects {:?}",
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Low-level feature map `F` shared by all branches.
    pub fn stem_forward(&mut self, batch: &Array4<f64>, mode: Mode) -> Result<Array4<f64>> {
        self.check_input(batch)?;
        Ok(self.stem.forward(batch, mode))
    }

    /// `A_j * F` for every branch `j`.
    pub fn branch_inputs(&self, features: &Array4<f64>) -> Result<Vec<Array4<f64>>> {
        self.masks
            .masks()
            .iter()
            .map(|mask| apply_mask_batch(features, mask.view()))
            .collect()
    }

    /// Runs the branches on an already computed stem output.
    pub fn branches_forward(
        &mut self,
        features: &Array4<f64>,
        mode: Mode,
    ) -> Result<NetworkOutput> {
        let inputs = self.branch_inputs(features)?;
        let mut branch_logits = Vec::with_capacity(self.spec.branches);
        let mut penultimate_features = Vec::with_capacity(self.spec.branches);
        let transforms = self.spec.label_transforms();
        for (j, input) in inputs.iter().enumerate() {
            let pooled = self.towers[j].forward(input, mode);
            let logits = self.heads[j].forward(&pooled, mode);
            branch_logits.push(BranchLogits::new(logits, self.spec.classes, transforms, j)?);
            penultimate_features.push(pooled);
        }
        Ok(NetworkOutput {
            branch_logits,
            penultimate_features,
        })
    }

    pub fn forward(&mut self, batch: &Array4<f64>, mode: Mode) -> Result<NetworkOutput> {
        let features = self.stem_forward(batch, mode)?;
        self.branches_forward(&features, mode)
    }

    /// Accumulates parameter gradients for the loss whose gradient with
    /// respect to each branch's logits is `d_logits[j]`. Must follow a
    /// [`Mode::Train`] forward.
    pub fn backward(&mut self, d_logits: &[Array2<f64>]) -> Result<()> {
        if d_logits.len() != self.spec.branches {
            return Err(CssError::ShapeMismatch(format!(
                "{} logit gradients for {} branches",
                d_logits.len(),
                self.spec.branches
            )));
        }
        let mut d_features: Option<Array4<f64>> = None;
        for (j, d) in d_logits.iter().enumerate() {
            let d_pooled = self.heads[j].backward(d);
            let d_input = self.towers[j].backward(&d_pooled);
            let d_masked = apply_mask_batch(&d_input, self.masks.mask(j))?;
            match d_features.as_mut() {
                Some(acc) => *acc += &d_masked,
                None => d_features = Some(d_masked),
            }
        }
        self.stem
            .backward(&d_features.expect("at least one branch"));
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut ZeroGrad);
    }

    pub fn sgd_step(&mut self, sgd: &mut Sgd) {
        self.visit(sgd);
    }

    /// Visits the stem under `stem.*`, tower `j` under `tower{j}.*` and head
    /// `j` under `head{j}.*`.
    pub fn visit(&mut self, v: &mut dyn Visitor) {
        self.stem.visit("stem", v);
        for (j, (tower, head)) in self
            .towers
            .iter_mut()
            .zip(self.heads.iter_mut())
            .enumerate()
        {
            tower.visit(&format!("tower{j}"), v);
            head.visit(&format!("head{j}"), v);
        }
    }

    pub fn inspect(&self, v: &mut dyn Inspector) {
        self.stem.inspect("stem", v);
        for (j, (tower, head)) in self.towers.iter().zip(self.heads.iter()).enumerate() {
            tower.inspect(&format!("tower{j}"), v);
            head.inspect(&format!("head{j}"), v);
        }
    }

    pub fn state(&self) -> StateCollector {
        let mut c = StateCollector::default();
        self.inspect(&mut c);
        c
    }

    pub fn parameter_count(&self) -> usize {
        self.state().params.iter().map(|(_, v)| v.len()).sum()
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::ModelSpec;

    pub(crate) fn tiny_spec(m: usize) -> ModelSpec {
        ModelSpec {
            depth: 8,
            split_depth: 1,
            branches: m,
            classes: 10,
            input_shape: [3, 8, 8],
            base_width: 4,
            sample_diversity: true,
            target_diversity: true,
        }
    }
}
