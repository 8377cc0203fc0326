//! The baseline bag classifier and the four joint CT+pathology networks.
//!
//! Every variant shares the same anatomy: a residual feature extractor
//! turns each 224x224 instance into a 512-d local feature, a head projects
//! locals through 512- and 128-wide fc layers, mean-pools over the bag,
//! and classifies the pooled global feature. Only the suffix of the
//! extractor (its last residual block) and the heads train; the frozen
//! prefix is evaluated once per instance and cached.
//!
//! Mid fusion pools the union of both modalities' local features through a
//! joint head with the baseline structure; late fusion concatenates the two
//! 128-d global features (CT first, then pathology) into a single 256-d
//! vector classified by one fc layer. Multi-loss variants add the two
//! branch losses to the joint loss; single-loss variants train on the joint
//! loss alone but still report branch losses for diagnostics.

use ndarray::{Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::ct::SliceBag;
use crate::error::{Error, Result};
use crate::nn::layers::{BasicBlock, BatchNorm2d, Conv2d, Forward, Linear};
use crate::nn::{ParamStore, Scalar, Var};
use crate::patho::PatchBag;

pub const LOCAL_FEATURE_DIM: usize = 512;
pub const HEAD_HIDDEN_DIM: usize = 512;
pub const GLOBAL_FEATURE_DIM: usize = 128;

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    CtOnly,
    PathoOnly,
    MidSingle,
    MidMulti,
    LateSingle,
    LateMulti,
}

pub const ALL_VARIANTS: [VariantKind; 6] = [
    VariantKind::CtOnly,
    VariantKind::PathoOnly,
    VariantKind::MidSingle,
    VariantKind::MidMulti,
    VariantKind::LateSingle,
    VariantKind::LateMulti,
];

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::CtOnly => "ct_only",
            VariantKind::PathoOnly => "patho_only",
            VariantKind::MidSingle => "mid_single",
            VariantKind::MidMulti => "mid_multi",
            VariantKind::LateSingle => "late_single",
            VariantKind::LateMulti => "late_multi",
        }
    }

    pub fn from_name(name: &str) -> Result<VariantKind> {
        let normalized = name.replace('-', "_");
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.name() == normalized)
            .ok_or_else(|| Error::config(format!("unknown variant `{name}`")))
    }

    /// Row label used in evaluation reports.
    pub fn report_label(self) -> &'static str {
        match self {
            VariantKind::CtOnly => "CT",
            VariantKind::PathoOnly => "H&E",
            VariantKind::MidSingle => "Mid-single",
            VariantKind::MidMulti => "Mid-multi",
            VariantKind::LateSingle => "Late-single",
            VariantKind::LateMulti => "Late-multi",
        }
    }

    pub fn uses_ct(self) -> bool {
        self != VariantKind::PathoOnly
    }

    pub fn uses_patho(self) -> bool {
        self != VariantKind::CtOnly
    }

    pub fn is_multi_loss(self) -> bool {
        matches!(self, VariantKind::MidMulti | VariantKind::LateMulti)
    }

    pub fn is_fusion(self) -> bool {
        !matches!(self, VariantKind::CtOnly | VariantKind::PathoOnly)
    }

    /// Can a patient with these bag sizes be used at all?
    pub fn accepts(self, ct_instances: usize, patho_instances: usize) -> bool {
        match self {
            VariantKind::CtOnly => ct_instances > 0,
            VariantKind::PathoOnly => patho_instances > 0,
            // Mid fusion pools the union, so one side may be empty.
            VariantKind::MidSingle | VariantKind::MidMulti => ct_instances + patho_instances > 0,
            // Late fusion needs a global feature from each branch.
            VariantKind::LateSingle | VariantKind::LateMulti => {
                ct_instances > 0 && patho_instances > 0
            }
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Backbones
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Tiny two-block residual network for desk-scale runs and tests.
    Stub,
    /// The full residual topology: 7x7 stem, four stages of two basic
    /// blocks (64/128/256/512), global average pool to 512 features.
    Resnet18,
}

/// Residual feature extractor split into a frozen prefix and a trainable
/// suffix (the last residual block plus, for the stub, its projection).
#[derive(Debug, Clone)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub prefix: String,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stem_pool: (usize, usize, usize), // k, stride, pad
    frozen_blocks: Vec<BasicBlock>,
    last_block: BasicBlock,
    proj: Option<Linear>,
}

impl Backbone {
    pub fn new(kind: BackboneKind, prefix: &str) -> Backbone {
        match kind {
            BackboneKind::Stub => Backbone {
                kind,
                prefix: prefix.to_string(),
                stem_conv: Conv2d::new(format!("{prefix}.stem.conv"), 3, 8, 5, 4, 2),
                stem_bn: BatchNorm2d::new(format!("{prefix}.stem.bn"), 8),
                stem_pool: (2, 2, 0),
                frozen_blocks: vec![BasicBlock::new(&format!("{prefix}.block1"), 8, 16, 2)],
                last_block: BasicBlock::new(&format!("{prefix}.block2"), 16, 32, 2),
                proj: Some(Linear::new(format!("{prefix}.proj"), 32, LOCAL_FEATURE_DIM)),
            },
            BackboneKind::Resnet18 => {
                let mut frozen = Vec::new();
                let mut in_ch = 64;
                for (stage, out_ch) in [(1usize, 64usize), (2, 128), (3, 256), (4, 512)] {
                    for block in 0..2 {
                        if stage == 4 && block == 1 {
                            continue; // the trainable last block
                        }
                        let stride = if stage > 1 && block == 0 { 2 } else { 1 };
                        frozen.push(BasicBlock::new(
                            &format!("{prefix}.layer{stage}.{block}"),
                            in_ch,
                            out_ch,
                            stride,
                        ));
                        in_ch = out_ch;
                    }
                }
                Backbone {
                    kind,
                    prefix: prefix.to_string(),
                    stem_conv: Conv2d::new(format!("{prefix}.stem.conv"), 3, 64, 7, 2, 3),
                    stem_bn: BatchNorm2d::new(format!("{prefix}.stem.bn"), 64),
                    stem_pool: (3, 2, 1),
                    frozen_blocks: frozen,
                    last_block: BasicBlock::new(&format!("{prefix}.layer4.1"), 512, 512, 1),
                    proj: None,
                }
            }
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, seed: u64) {
        let mut rng = crate::seed::rng(seed);
        self.stem_conv.init(store, false, &mut rng);
        self.stem_bn.init(store, false);
        for block in &self.frozen_blocks {
            block.init(store, false, &mut rng);
        }
        self.last_block.init(store, true, &mut rng);
        if let Some(proj) = &self.proj {
            proj.init(store, true, &mut rng);
        }
    }

    /// Parameter-name prefixes allowed to update.
    pub fn trainable_prefixes(&self) -> Vec<String> {
        let block_prefix = self.last_block.conv1.name.rsplit_once(".conv1").unwrap().0.to_string();
        let mut out = vec![block_prefix];
        if let Some(proj) = &self.proj {
            out.push(proj.name.clone());
        }
        out
    }

    /// Frozen prefix applied to raw pixel instances `[N, 3, H, W]`.
    ///
    /// Runs in eval mode on a throwaway tape; the output feeds the cache
    /// that training re-uses every epoch.
    pub fn frozen_features<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        pixels: &Array4<F>,
    ) -> ArrayD<F> {
        let mut f = Forward::new(store, false);
        let x = f.input(pixels.clone().into_dyn());
        let out = self.forward_frozen(&mut f, x);
        f.tape.value(out).clone()
    }

    fn forward_frozen<F: Scalar>(&self, f: &mut Forward<F>, x: Var) -> Var {
        let c = self.stem_conv.forward(f, x);
        let b = self.stem_bn.forward(f, c);
        let r = f.tape.relu(b);
        let (k, s, p) = self.stem_pool;
        let mut cur = f.tape.max_pool(r, k, s, p);
        for block in &self.frozen_blocks {
            cur = block.forward(f, cur);
        }
        cur
    }

    /// Trainable suffix from cached features to `[N, 512]` local features.
    pub fn forward_suffix<F: Scalar>(&self, f: &mut Forward<F>, cached: Var) -> Var {
        let out = self.last_block.forward(f, cached);
        let pooled = f.tape.global_avg_pool(out);
        match &self.proj {
            Some(proj) => {
                let projected = proj.forward(f, pooled);
                f.tape.relu(projected)
            }
            None => pooled,
        }
    }
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

/// fc(512) -> fc(128) per instance, mean pool, fc to class logits.
#[derive(Debug, Clone)]
pub struct BaselineHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc_out: Linear,
}

impl BaselineHead {
    pub fn new(prefix: &str, num_classes: usize) -> BaselineHead {
        BaselineHead {
            fc1: Linear::new(format!("{prefix}.fc1"), LOCAL_FEATURE_DIM, HEAD_HIDDEN_DIM),
            fc2: Linear::new(format!("{prefix}.fc2"), HEAD_HIDDEN_DIM, GLOBAL_FEATURE_DIM),
            fc_out: Linear::new(format!("{prefix}.fc_out"), GLOBAL_FEATURE_DIM, num_classes),
        }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut rand_chacha::ChaCha8Rng) {
        self.fc1.init(store, true, rng);
        self.fc2.init(store, true, rng);
        self.fc_out.init(store, true, rng);
    }

    /// Per-instance 128-d features from 512-d locals.
    pub fn forward_local<F: Scalar>(&self, f: &mut Forward<F>, locals: Var) -> Var {
        let h1 = self.fc1.forward(f, locals);
        let r1 = f.tape.relu(h1);
        let h2 = self.fc2.forward(f, r1);
        f.tape.relu(h2)
    }

    /// `(global [1,128], logits [1,K])` for a bag of locals.
    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, locals: Var) -> (Var, Var) {
        let per_instance = self.forward_local(f, locals);
        let global = f.tape.mean_rows(per_instance);
        let logits = self.fc_out.forward(f, global);
        (global, logits)
    }
}

// ---------------------------------------------------------------------------
// Bags of cached features
// ---------------------------------------------------------------------------

/// Frozen-prefix features for one patient's bag, rows in canonical
/// (ascending instance id) order so reductions are order-fixed.
#[derive(Debug, Clone)]
pub struct BagTensor<F: Scalar> {
    pub instance_ids: Vec<u32>,
    /// `[N, C, h, w]`
    pub feats: ArrayD<F>,
}

impl<F: Scalar> BagTensor<F> {
    pub fn new(instance_ids: Vec<u32>, feats: ArrayD<F>) -> BagTensor<F> {
        assert_eq!(instance_ids.len(), feats.shape()[0], "ids must match rows");
        let mut bag = BagTensor { instance_ids, feats };
        bag.canonicalize();
        bag
    }

    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }

    fn canonicalize(&mut self) {
        if self.instance_ids.windows(2).all(|w| w[0] < w[1]) {
            return;
        }
        let mut order: Vec<usize> = (0..self.instance_ids.len()).collect();
        order.sort_by_key(|&i| self.instance_ids[i]);
        self.select_in_order(&order);
    }

    /// Keep `rows` (indices into the current order), re-sorted canonically.
    pub fn subset(&self, rows: &[usize]) -> BagTensor<F> {
        let mut order: Vec<usize> = rows.to_vec();
        order.sort_by_key(|&i| self.instance_ids[i]);
        let mut out = self.clone();
        out.select_in_order(&order);
        out
    }

    fn select_in_order(&mut self, order: &[usize]) {
        self.instance_ids = order.iter().map(|&i| self.instance_ids[i]).collect();
        let views: Vec<_> = order
            .iter()
            .map(|&i| self.feats.index_axis(Axis(0), i).insert_axis(Axis(0)))
            .collect();
        self.feats =
            ndarray::concatenate(Axis(0), &views.iter().map(|v| v.view()).collect::<Vec<_>>())
                .expect("bag subset");
    }
}

/// CT slices as `[N, 3, S, S]` pixel tensors (grayscale replicated).
pub fn ct_instances<F: Scalar>(bag: &SliceBag) -> (Vec<u32>, Array4<F>) {
    let n = bag.slices.len();
    if n == 0 {
        return (Vec::new(), Array4::zeros((0, 3, 1, 1)));
    }
    let (h, w) = bag.slices[0].1.dim();
    let mut out = Array4::<F>::zeros((n, 3, h, w));
    let mut ids = Vec::with_capacity(n);
    for (i, (index, slice)) in bag.slices.iter().enumerate() {
        ids.push(*index as u32);
        for ((y, x), &v) in slice.indexed_iter() {
            let value = F::of_f64(f64::from(v));
            out[(i, 0, y, x)] = value;
            out[(i, 1, y, x)] = value;
            out[(i, 2, y, x)] = value;
        }
    }
    (ids, out)
}

/// Pathology patches as `[N, 3, S, S]` in `[0,1]`; instance id packs the
/// tile grid origin as `row * 2^16 + col`.
pub fn patho_instances<F: Scalar>(bag: &PatchBag) -> (Vec<u32>, Array4<F>) {
    let n = bag.patches.len();
    if n == 0 {
        return (Vec::new(), Array4::zeros((0, 3, 1, 1)));
    }
    let size = bag.patches[0].pixels.dim().0;
    let mut out = Array4::<F>::zeros((n, 3, size, size));
    let mut ids = Vec::with_capacity(n);
    let scale = F::of_f64(1.0 / 255.0);
    for (i, patch) in bag.patches.iter().enumerate() {
        assert!(patch.row < (1 << 16) && patch.col < (1 << 16), "tile origin overflow");
        ids.push((patch.row as u32) << 16 | patch.col as u32);
        for ((y, x, c), &v) in patch.pixels.indexed_iter() {
            out[(i, c, y, x)] = F::of_f64(f64::from(v)) * scale;
        }
    }
    (ids, out)
}

/// Frozen-prefix features for a whole pixel tensor, in id order, evaluated
/// in chunks to bound peak memory.
pub fn build_bag_tensor<F: Scalar>(
    backbone: &Backbone,
    store: &ParamStore<F>,
    ids: Vec<u32>,
    pixels: &Array4<F>,
) -> BagTensor<F> {
    const CHUNK: usize = 16;
    let n = pixels.dim().0;
    assert_eq!(ids.len(), n);
    if n == 0 {
        return BagTensor { instance_ids: ids, feats: ArrayD::zeros(IxDyn(&[0, 1, 1, 1])) };
    }
    let mut parts: Vec<ArrayD<F>> = Vec::new();
    let mut at = 0;
    while at < n {
        let end = (at + CHUNK).min(n);
        let chunk = pixels.slice(ndarray::s![at..end, .., .., ..]).to_owned();
        parts.push(backbone.frozen_features(store, &chunk));
        at = end;
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let feats = ndarray::concatenate(Axis(0), &views).expect("feature concat");
    BagTensor::new(ids, feats)
}

// ---------------------------------------------------------------------------
// The fusion model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub kind: VariantKind,
    pub num_classes: usize,
    pub ct: Option<Branch>,
    pub patho: Option<Branch>,
    pub joint_head: Option<BaselineHead>,
    pub joint_fc: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub backbone: Backbone,
    pub head: BaselineHead,
}

/// Seeds for deterministic initialization. Backbone seeds are shared across
/// variants and folds (they stand in for fixed pretrained weights), head
/// seeds vary per run.
#[derive(Debug, Clone, Copy)]
pub struct InitSeeds {
    pub backbone_ct: u64,
    pub backbone_patho: u64,
    pub heads: u64,
}

pub struct VariantOutput {
    pub logits_joint: Var,
    pub logits_ct: Option<Var>,
    pub logits_patho: Option<Var>,
}

pub struct LossVars {
    pub total: Var,
    pub l_joint: Var,
    pub l_ct: Option<Var>,
    pub l_patho: Option<Var>,
}

/// Loss components in natural-log units. `l_total` equals `l_joint` for
/// single-loss variants and the sum of all three for multi-loss variants.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub l_joint: f64,
    pub l_ct: Option<f64>,
    pub l_patho: Option<f64>,
    pub l_total: f64,
}

impl FusionModel {
    pub fn build(kind: VariantKind, num_classes: usize, backbone: BackboneKind) -> FusionModel {
        let ct = kind.uses_ct().then(|| Branch {
            backbone: Backbone::new(backbone, "ct.backbone"),
            head: BaselineHead::new("ct.head", num_classes),
        });
        let patho = kind.uses_patho().then(|| Branch {
            backbone: Backbone::new(backbone, "patho.backbone"),
            head: BaselineHead::new("patho.head", num_classes),
        });
        let joint_head = matches!(kind, VariantKind::MidSingle | VariantKind::MidMulti)
            .then(|| BaselineHead::new("joint.head", num_classes));
        let joint_fc = matches!(kind, VariantKind::LateSingle | VariantKind::LateMulti)
            .then(|| Linear::new("joint.fc", 2 * GLOBAL_FEATURE_DIM, num_classes));
        FusionModel { kind, num_classes, ct, patho, joint_head, joint_fc }
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, seeds: &InitSeeds) {
        if let Some(branch) = &self.ct {
            branch.backbone.init(store, seeds.backbone_ct);
        }
        if let Some(branch) = &self.patho {
            branch.backbone.init(store, seeds.backbone_patho);
        }
        let mut head_rng = crate::seed::rng(seeds.heads);
        if let Some(branch) = &self.ct {
            branch.head.init(store, &mut head_rng);
        }
        if let Some(branch) = &self.patho {
            branch.head.init(store, &mut head_rng);
        }
        if let Some(head) = &self.joint_head {
            head.init(store, &mut head_rng);
        }
        if let Some(fc) = &self.joint_fc {
            fc.init(store, true, &mut head_rng);
        }
    }

    /// Names of parameter groups allowed to update: last residual blocks
    /// (with the stub's projection) and every head/joint layer.
    pub fn trainable_prefixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(branch) = &self.ct {
            out.extend(branch.backbone.trainable_prefixes());
            out.push("ct.head".to_string());
        }
        if let Some(branch) = &self.patho {
            out.extend(branch.backbone.trainable_prefixes());
            out.push("patho.head".to_string());
        }
        if self.joint_head.is_some() {
            out.push("joint.head".to_string());
        }
        if self.joint_fc.is_some() {
            out.push("joint.fc".to_string());
        }
        out
    }

    /// Forward one patient's bags of cached features.
    pub fn forward<F: Scalar>(
        &self,
        f: &mut Forward<F>,
        ct: Option<&BagTensor<F>>,
        patho: Option<&BagTensor<F>>,
    ) -> Result<VariantOutput> {
        let ct_bag = ct.filter(|b| !b.is_empty());
        let patho_bag = patho.filter(|b| !b.is_empty());

        let ct_locals = match (&self.ct, ct_bag) {
            (Some(branch), Some(bag)) => {
                let x = f.input(bag.feats.clone());
                Some(branch.backbone.forward_suffix(f, x))
            }
            _ => None,
        };
        let patho_locals = match (&self.patho, patho_bag) {
            (Some(branch), Some(bag)) => {
                let x = f.input(bag.feats.clone());
                Some(branch.backbone.forward_suffix(f, x))
            }
            _ => None,
        };

        match self.kind {
            VariantKind::CtOnly => {
                let locals =
                    ct_locals.ok_or_else(|| Error::data("ct_only: empty CT bag".to_string()))?;
                let (_, logits) = self.ct.as_ref().unwrap().head.forward(f, locals);
                Ok(VariantOutput { logits_joint: logits, logits_ct: None, logits_patho: None })
            }
            VariantKind::PathoOnly => {
                let locals = patho_locals
                    .ok_or_else(|| Error::data("patho_only: empty pathology bag".to_string()))?;
                let (_, logits) = self.patho.as_ref().unwrap().head.forward(f, locals);
                Ok(VariantOutput { logits_joint: logits, logits_ct: None, logits_patho: None })
            }
            VariantKind::MidSingle | VariantKind::MidMulti => {
                let union = match (ct_locals, patho_locals) {
                    (Some(a), Some(b)) => f.tape.concat_rows(a, b),
                    (Some(a), None) => a,
                    (None, Some(b)) => b,
                    (None, None) => {
                        return Err(Error::data("mid fusion: both bags empty".to_string()));
                    }
                };
                let (_, logits_joint) = self.joint_head.as_ref().unwrap().forward(f, union);
                let logits_ct =
                    ct_locals.map(|locals| self.ct.as_ref().unwrap().head.forward(f, locals).1);
                let logits_patho = patho_locals
                    .map(|locals| self.patho.as_ref().unwrap().head.forward(f, locals).1);
                Ok(VariantOutput { logits_joint, logits_ct, logits_patho })
            }
            VariantKind::LateSingle | VariantKind::LateMulti => {
                let ct_local =
                    ct_locals.ok_or_else(|| Error::data("late fusion: empty CT bag".to_string()))?;
                let patho_local = patho_locals
                    .ok_or_else(|| Error::data("late fusion: empty pathology bag".to_string()))?;
                let (g_ct, logits_ct) = self.ct.as_ref().unwrap().head.forward(f, ct_local);
                let (g_patho, logits_patho) =
                    self.patho.as_ref().unwrap().head.forward(f, patho_local);
                // Fixed concatenation order: CT then pathology.
                let fused = f.tape.concat_cols(g_ct, g_patho);
                let logits_joint = self.joint_fc.as_ref().unwrap().forward(f, fused);
                Ok(VariantOutput {
                    logits_joint,
                    logits_ct: Some(logits_ct),
                    logits_patho: Some(logits_patho),
                })
            }
        }
    }

    /// Cross-entropy losses for one patient.
    pub fn compute_loss<F: Scalar>(
        &self,
        f: &mut Forward<F>,
        output: &VariantOutput,
        label: usize,
    ) -> Result<LossVars> {
        if label >= self.num_classes {
            return Err(Error::data(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        let l_joint = f.tape.softmax_cross_entropy(output.logits_joint, label);
        let l_ct = output.logits_ct.map(|v| f.tape.softmax_cross_entropy(v, label));
        let l_patho = output.logits_patho.map(|v| f.tape.softmax_cross_entropy(v, label));
        let total = if self.kind.is_multi_loss() {
            let mut parts = vec![l_joint];
            parts.extend(l_ct);
            parts.extend(l_patho);
            f.tape.add_many(&parts)
        } else {
            l_joint
        };
        Ok(LossVars { total, l_joint, l_ct, l_patho })
    }

    pub fn loss_report<F: Scalar>(&self, f: &Forward<F>, vars: &LossVars) -> LossReport {
        LossReport {
            l_joint: f.tape.scalar(vars.l_joint).into_f64(),
            l_ct: vars.l_ct.map(|v| f.tape.scalar(v).into_f64()),
            l_patho: vars.l_patho.map(|v| f.tape.scalar(v).into_f64()),
            l_total: f.tape.scalar(vars.total).into_f64(),
        }
    }

    /// Eval-mode class probabilities (softmax of the joint logits).
    pub fn predict<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        ct: Option<&BagTensor<F>>,
        patho: Option<&BagTensor<F>>,
    ) -> Result<Vec<f64>> {
        let mut f = Forward::new(store, false);
        let output = self.forward(&mut f, ct, patho)?;
        let logits: Vec<f64> =
            f.tape.value(output.logits_joint).iter().map(|v| v.into_f64()).collect();
        Ok(softmax(&logits))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}
