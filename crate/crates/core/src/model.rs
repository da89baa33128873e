//! The depth-map regression networks.
//!
//! Three network variants share one architecture family:
//!
//! - `plain_backbone` — two per-view input phases (conv-BN-ReLU ×2, each
//!   stride 2), channel concat, a residual backbone, global average
//!   pooling, and two fully connected layers producing the fat percentage.
//! - `baseline` — adds the attention module's regression component: a 1×1
//!   convolution + sigmoid produces K single-channel attention maps, each
//!   multiplied elementwise into the backbone features; the K refined maps
//!   are pooled, averaged, and pushed through the *same* two fully
//!   connected layers as an auxiliary fat prediction.
//! - `proposed` — additionally binds attention channel k to steatosis
//!   grade k through one scalar logit head per channel, trained with
//!   cross-entropy.
//!
//! The attention module exists only at training time: `predict` runs the
//! backbone path alone and never reads attention parameters.
//!
//! An `mlp` variant (two fully connected layers over the flattened maps)
//! reuses the same parameter/loss machinery as a classical reference.

use crate::error::{Error, Result};
use crate::io::{read_checkpoint, write_checkpoint, CheckpointEntry};
use crate::label::{fat_to_grade, FatCalib, GRADE_COUNT};
use crate::optim::{ParamKind, ParamSet};
use crate::tape::{BnBatchStats, BnMode, Tape, VarId};
use crate::tensor::{Real, Tensor};
use crate::volume::DepthMapPair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PlainBackbone,
    Baseline,
    Proposed,
    Mlp,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" | "plain_backbone" => Ok(Variant::PlainBackbone),
            "baseline" => Ok(Variant::Baseline),
            "proposed" => Ok(Variant::Proposed),
            "mlp" => Ok(Variant::Mlp),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant `{other}` (expected plain, baseline, proposed or mlp)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::PlainBackbone => "plain_backbone",
            Variant::Baseline => "baseline",
            Variant::Proposed => "proposed",
            Variant::Mlp => "mlp",
        }
    }

    pub fn has_attention(&self) -> bool {
        matches!(self, Variant::Baseline | Variant::Proposed)
    }

    pub fn has_classification(&self) -> bool {
        matches!(self, Variant::Proposed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            alpha1: 0.5,
            alpha2: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub blocks: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input map side length S.
    pub input_size: usize,
    /// Channels produced by each view's input phase.
    pub input_phase_channels: usize,
    /// Residual stages; the first runs at stride 1, later stages open with
    /// a stride-2 block.
    pub stages: Vec<StagePlan>,
    /// Attention channels K; equals the number of steatosis grades.
    pub attention_channels: usize,
    /// Hidden width of the two-layer fully connected head.
    pub fc_hidden: usize,
    /// Hidden width of the `mlp` reference variant.
    pub mlp_hidden: usize,
    pub loss_weights: LossWeights,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            input_phase_channels: 8,
            stages: vec![
                StagePlan { blocks: 2, channels: 16 },
                StagePlan { blocks: 2, channels: 32 },
                StagePlan { blocks: 2, channels: 64 },
            ],
            attention_channels: GRADE_COUNT,
            fc_hidden: 32,
            mlp_hidden: 32,
            loss_weights: LossWeights::default(),
            variant: Variant::Proposed,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention_channels != GRADE_COUNT {
            return Err(Error::InvalidConfig(format!(
                "attention channels must equal the {GRADE_COUNT} steatosis grades, got {}",
                self.attention_channels
            )));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.blocks == 0 || s.channels == 0) {
            return Err(Error::InvalidConfig("residual plan must be non-empty".into()));
        }
        if self.input_phase_channels == 0 || self.fc_hidden == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let total_stride = 4 << (self.stages.len() - 1);
        if self.input_size == 0 || self.input_size % total_stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {} must be a multiple of the network stride {total_stride}",
                self.input_size
            )));
        }
        let w = &self.loss_weights;
        if !(w.lambda1.is_finite() && w.alpha1.is_finite() && w.alpha2.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be finite".into()));
        }
        Ok(())
    }

    /// Channel count of `F_res` (last stage).
    pub fn feature_channels(&self) -> usize {
        self.stages.last().map(|s| s.channels).unwrap_or(0)
    }

    /// Spatial side of `F_res`.
    pub fn feature_side(&self) -> usize {
        self.input_size / (4 << (self.stages.len() - 1))
    }
}

/// A built model: configuration plus its parameter set (including
/// batch-norm statistic entries).
#[derive(Debug, Clone)]
pub struct ModelParams<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub seed: u64,
}

struct Builder<T: Real> {
    params: ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn new(seed: u64) -> Self {
        Builder {
            params: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Fan-in-scaled uniform init: U(−1/√fan_in, 1/√fan_in).
    fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let values: Vec<T> = (0..numel)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        self.params
            .insert(name, Tensor::new(shape, values)?, ParamKind::Trainable)?;
        Ok(())
    }

    fn zeros(&mut self, name: &str, shape: Vec<usize>, kind: ParamKind) -> Result<()> {
        self.params.insert(name, Tensor::zeros(shape), kind)?;
        Ok(())
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        self.weight(&format!("{prefix}.weight"), vec![c_out, c_in, k, k], c_in * k * k)?;
        self.zeros(&format!("{prefix}.bias"), vec![c_out], ParamKind::Trainable)
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.params.insert(
            &format!("{prefix}.weight"),
            Tensor::full(vec![c], T::ONE),
            ParamKind::Trainable,
        )?;
        self.zeros(&format!("{prefix}.bias"), vec![c], ParamKind::Trainable)?;
        self.zeros(&format!("{prefix}.running_mean"), vec![c], ParamKind::Stat)?;
        self.params.insert(
            &format!("{prefix}.running_var"),
            Tensor::full(vec![c], T::ONE),
            ParamKind::Stat,
        )?;
        self.zeros(&format!("{prefix}.updates"), vec![1], ParamKind::Stat)
    }

    fn fc(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.weight(&format!("{prefix}.weight"), vec![d_in, d_out], d_in)?;
        self.zeros(&format!("{prefix}.bias"), vec![d_out], ParamKind::Trainable)
    }
}

/// Build a freshly initialized model for the given configuration and seed.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut b = Builder::new(seed);

    match config.variant {
        Variant::Mlp => {
            let d = 2 * config.input_size * config.input_size;
            b.fc("mlp.fc1", d, config.mlp_hidden)?;
            b.fc("mlp.fc2", config.mlp_hidden, 1)?;
        }
        _ => {
            let ch = config.input_phase_channels;
            for view in ["frontal", "lateral"] {
                b.conv(&format!("{view}.conv1"), 1, ch, 3)?;
                b.bn(&format!("{view}.bn1"), ch)?;
                b.conv(&format!("{view}.conv2"), ch, ch, 3)?;
                b.bn(&format!("{view}.bn2"), ch)?;
            }
            let mut c_in = 2 * ch;
            for (i, stage) in config.stages.iter().enumerate() {
                for j in 0..stage.blocks {
                    let prefix = format!("s{i}.b{j}");
                    let stride = if i > 0 && j == 0 { 2 } else { 1 };
                    let c = stage.channels;
                    b.conv(&format!("{prefix}.conv1"), c_in, c, 3)?;
                    b.bn(&format!("{prefix}.bn1"), c)?;
                    b.conv(&format!("{prefix}.conv2"), c, c, 3)?;
                    b.bn(&format!("{prefix}.bn2"), c)?;
                    if stride != 1 || c_in != c {
                        b.conv(&format!("{prefix}.down.conv"), c_in, c, 1)?;
                        b.bn(&format!("{prefix}.down.bn"), c)?;
                    }
                    c_in = c;
                }
            }
            b.fc("head.fc1", c_in, config.fc_hidden)?;
            b.fc("head.fc2", config.fc_hidden, 1)?;
            if config.variant.has_attention() {
                b.conv("att.proj", c_in, config.attention_channels, 1)?;
                if config.variant.has_classification() {
                    for k in 0..config.attention_channels {
                        b.fc(&format!("att.cls{k}"), c_in, 1)?;
                    }
                }
            }
        }
    }

    Ok(ModelParams {
        config: config.clone(),
        params: b.params,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm statistic updates captured during a train-mode forward pass,
/// to be applied with [`apply_bn_updates`] after the step.
pub struct BnUpdates<T: Real> {
    updates: Vec<(String, BnBatchStats<T>)>,
}

impl<T: Real> BnUpdates<T> {
    fn new() -> Self {
        BnUpdates { updates: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }
}

/// Fold captured batch statistics into the model's running estimates:
/// the first update copies the batch statistics, later ones blend with
/// momentum [`BN_MOMENTUM`].
pub fn apply_bn_updates<T: Real>(model: &mut ModelParams<T>, updates: BnUpdates<T>) {
    for (prefix, stats) in updates.updates {
        let n_name = format!("{prefix}.updates");
        let count = model
            .params
            .by_name(&n_name)
            .expect("bn updates counter exists")
            .value
            .values()[0]
            .to_f64();
        let m = T::from_f64(BN_MOMENTUM);
        let one_minus = T::from_f64(1.0 - BN_MOMENTUM);
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let entry = model
                .params
                .by_name_mut(&format!("{prefix}.{suffix}"))
                .expect("bn stat exists");
            let vals = entry.value.values_mut();
            if count == 0.0 {
                for (r, &b) in vals.iter_mut().zip(batch) {
                    *r = b;
                }
            } else {
                for (r, &b) in vals.iter_mut().zip(batch) {
                    *r = one_minus * *r + m * b;
                }
            }
        }
        let counter = model.params.by_name_mut(&n_name).expect("counter");
        counter.value.values_mut()[0] = T::from_f64(count + 1.0);
    }
}

/// Everything a forward pass produces. Attention fields are populated only
/// for variants that have the module; `f_res`/`v_gap` are absent for `mlp`.
pub struct ModelOutputs {
    /// N×1 fat percentage prediction from the backbone path.
    pub fat_pred: VarId,
    pub f_res: Option<VarId>,
    pub v_gap: Option<VarId>,
    /// K attention maps, each N×1×h×w with values in (0,1).
    pub att_maps: Vec<VarId>,
    /// K refined feature maps, each N×C×h×w.
    pub f_att: Vec<VarId>,
    /// N×1 fat prediction from the attention regression component.
    pub att_fat_pred: Option<VarId>,
    /// N×K grade logits from the classification component.
    pub grade_logits: Option<VarId>,
}

struct ForwardCtx<'m, T: Real> {
    model: &'m ModelParams<T>,
    mode: Mode,
    bn_out: BnUpdates<T>,
}

impl<'m, T: Real> ForwardCtx<'m, T> {
    fn pid(&self, name: &str) -> VarId {
        self.model
            .params
            .id_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` exists by construction"))
    }

    fn conv(
        &mut self,
        tape: &mut Tape<T>,
        x: VarId,
        prefix: &str,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let w = tape.param(&self.model.params, self.pid(&format!("{prefix}.weight")));
        let b = tape.param(&self.model.params, self.pid(&format!("{prefix}.bias")));
        tape.conv2d(x, w, b, stride, pad)
    }

    fn bn(&mut self, tape: &mut Tape<T>, x: VarId, prefix: &str) -> Result<VarId> {
        let gamma = tape.param(&self.model.params, self.pid(&format!("{prefix}.weight")));
        let beta = tape.param(&self.model.params, self.pid(&format!("{prefix}.bias")));
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm2d(x, gamma, beta, BnMode::Train, None, BN_EPS)?;
                self.bn_out
                    .updates
                    .push((prefix.to_string(), stats.expect("train mode yields stats")));
                Ok(y)
            }
            Mode::Eval => {
                let count = self
                    .model
                    .params
                    .by_name(&format!("{prefix}.updates"))
                    .expect("counter exists")
                    .value
                    .values()[0]
                    .to_f64();
                if count == 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "batchnorm `{prefix}` has no running statistics; train the model first"
                    )));
                }
                let rm = self
                    .model
                    .params
                    .by_name(&format!("{prefix}.running_mean"))
                    .expect("stat exists")
                    .value
                    .values()
                    .to_vec();
                let rv = self
                    .model
                    .params
                    .by_name(&format!("{prefix}.running_var"))
                    .expect("stat exists")
                    .value
                    .values()
                    .to_vec();
                let (y, _) = tape.batchnorm2d(x, gamma, beta, BnMode::Eval, Some((&rm, &rv)), BN_EPS)?;
                Ok(y)
            }
        }
    }

    fn conv_bn_relu(
        &mut self,
        tape: &mut Tape<T>,
        x: VarId,
        conv_prefix: &str,
        bn_prefix: &str,
        stride: usize,
    ) -> Result<VarId> {
        let y = self.conv(tape, x, conv_prefix, stride, 1)?;
        let y = self.bn(tape, y, bn_prefix)?;
        Ok(tape.relu(y))
    }

    fn fc(&mut self, tape: &mut Tape<T>, x: VarId, prefix: &str) -> Result<VarId> {
        let w = tape.param(&self.model.params, self.pid(&format!("{prefix}.weight")));
        let b = tape.param(&self.model.params, self.pid(&format!("{prefix}.bias")));
        tape.fully_connected(x, w, b)
    }

    /// Shared regression head Θ: fc1-ReLU-fc2, one scalar output per sample.
    fn head(&mut self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
        let h = self.fc(tape, x, "head.fc1")?;
        let h = tape.relu(h);
        self.fc(tape, h, "head.fc2")
    }

    fn residual_block(
        &mut self,
        tape: &mut Tape<T>,
        x: VarId,
        prefix: &str,
        stride: usize,
        channels_change: bool,
    ) -> Result<VarId> {
        let y = self.conv(tape, x, &format!("{prefix}.conv1"), stride, 1)?;
        let y = self.bn(tape, y, &format!("{prefix}.bn1"))?;
        let y = tape.relu(y);
        let y = self.conv(tape, y, &format!("{prefix}.conv2"), 1, 1)?;
        let y = self.bn(tape, y, &format!("{prefix}.bn2"))?;
        let skip = if stride != 1 || channels_change {
            let s = self.conv(tape, x, &format!("{prefix}.down.conv"), stride, 0)?;
            self.bn(tape, s, &format!("{prefix}.down.bn"))?
        } else {
            x
        };
        let y = tape.add(y, skip)?;
        Ok(tape.relu(y))
    }
}

fn check_input<T: Real>(model: &ModelParams<T>, map: &Tensor<T>) -> Result<()> {
    let s = model.config.input_size;
    let (_, c, h, w) = map.dims4()?;
    if c != 1 || h != s || w != s {
        return Err(Error::ShapeMismatch {
            op: "model input",
            lhs: map.shape().to_vec(),
            rhs: vec![map.shape()[0], 1, s, s],
        });
    }
    Ok(())
}

/// Run the variant's full forward graph on a batch of map pairs.
///
/// Returns the outputs and, in train mode, the batch-norm updates to fold
/// back into the model after the optimizer step.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    frontal: &Tensor<T>,
    lateral: &Tensor<T>,
    mode: Mode,
) -> Result<(ModelOutputs, BnUpdates<T>)> {
    check_input(model, frontal)?;
    check_input(model, lateral)?;
    if frontal.shape()[0] != lateral.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "frontal/lateral batch",
            lhs: frontal.shape().to_vec(),
            rhs: lateral.shape().to_vec(),
        });
    }
    let mut ctx = ForwardCtx {
        model,
        mode,
        bn_out: BnUpdates::new(),
    };

    if model.config.variant == Variant::Mlp {
        let n = frontal.shape()[0];
        let d = model.config.input_size * model.config.input_size;
        let f = tape.leaf(frontal.clone());
        let l = tape.leaf(lateral.clone());
        let f2 = tape.reshape(f, vec![n, d])?;
        let l2 = tape.reshape(l, vec![n, d])?;
        let x = tape.concat_channels(f2, l2)?;
        let h = ctx.fc(tape, x, "mlp.fc1")?;
        let h = tape.relu(h);
        let fat = ctx.fc(tape, h, "mlp.fc2")?;
        return Ok((
            ModelOutputs {
                fat_pred: fat,
                f_res: None,
                v_gap: None,
                att_maps: Vec::new(),
                f_att: Vec::new(),
                att_fat_pred: None,
                grade_logits: None,
            },
            ctx.bn_out,
        ));
    }

    // Input phases, one per view.
    let mut views = Vec::with_capacity(2);
    for (name, map) in [("frontal", frontal), ("lateral", lateral)] {
        let x = tape.leaf(map.clone());
        let x = ctx.conv_bn_relu(tape, x, &format!("{name}.conv1"), &format!("{name}.bn1"), 2)?;
        let x = ctx.conv_bn_relu(tape, x, &format!("{name}.conv2"), &format!("{name}.bn2"), 2)?;
        views.push(x);
    }
    let mut x = tape.concat_channels(views[0], views[1])?;

    let mut c_in = 2 * model.config.input_phase_channels;
    for (i, stage) in model.config.stages.iter().enumerate() {
        for j in 0..stage.blocks {
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            x = ctx.residual_block(
                tape,
                x,
                &format!("s{i}.b{j}"),
                stride,
                c_in != stage.channels,
            )?;
            c_in = stage.channels;
        }
    }
    let f_res = x;
    let v_gap = tape.global_avg_pool(f_res)?;
    let fat_pred = ctx.head(tape, v_gap)?;

    let mut outputs = ModelOutputs {
        fat_pred,
        f_res: Some(f_res),
        v_gap: Some(v_gap),
        att_maps: Vec::new(),
        f_att: Vec::new(),
        att_fat_pred: None,
        grade_logits: None,
    };

    if model.config.variant.has_attention() {
        let (maps, refined) = forward_attention(tape, &mut ctx, f_res)?;
        let k = maps.len();

        // Regression component: mean of the per-channel pooled vectors
        // through the shared head.
        let mut pooled = Vec::with_capacity(k);
        for &r in &refined {
            pooled.push(tape.global_avg_pool(r)?);
        }
        let mut acc = pooled[0];
        for &p in &pooled[1..] {
            acc = tape.add(acc, p)?;
        }
        let mean_pooled = tape.scale(acc, T::from_f64(1.0 / k as f64));
        outputs.att_fat_pred = Some(ctx.head(tape, mean_pooled)?);

        // Classification component: channel k owns grade k via a scalar head.
        if model.config.variant.has_classification() {
            let mut logits = Vec::with_capacity(k);
            for (kk, &p) in pooled.iter().enumerate() {
                logits.push(ctx.fc(tape, p, &format!("att.cls{kk}"))?);
            }
            let mut all = logits[0];
            for &l in &logits[1..] {
                all = tape.concat_channels(all, l)?;
            }
            outputs.grade_logits = Some(all);
        }

        outputs.att_maps = maps;
        outputs.f_att = refined;
    }

    Ok((outputs, ctx.bn_out))
}

/// Attention module: `M_att = sigmoid(1×1 conv(F_res))`, then
/// `F_att[k] = M_att[k] ⊙ F_res`.
fn forward_attention<T: Real>(
    tape: &mut Tape<T>,
    ctx: &mut ForwardCtx<'_, T>,
    f_res: VarId,
) -> Result<(Vec<VarId>, Vec<VarId>)> {
    if !ctx.model.config.variant.has_attention() {
        return Err(Error::InvalidArgument(
            "attention disabled for this variant".into(),
        ));
    }
    let k = ctx.model.config.attention_channels;
    let proj = ctx.conv(tape, f_res, "att.proj", 1, 0)?;
    let m_att = tape.sigmoid(proj);
    let mut maps = Vec::with_capacity(k);
    let mut refined = Vec::with_capacity(k);
    for kk in 0..k {
        let map = tape.slice_channels(m_att, kk, kk + 1)?;
        refined.push(tape.mul_broadcast(f_res, map)?);
        maps.push(map);
    }
    Ok((maps, refined))
}

/// The loss terms of one batch; absent components are zero-weighted out of
/// the total by construction.
pub struct LossTerms {
    pub total: VarId,
    pub reg: VarId,
    pub att_reg: Option<VarId>,
    pub att_cls: Option<VarId>,
}

/// Joint loss: `λ1·MSE(fat_pred) + α1·MSE(att_fat_pred) + α2·CE(logits)`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &ModelOutputs,
    fat_target: &Tensor<T>,
    grade_target: &[u8],
    weights: &LossWeights,
) -> Result<LossTerms> {
    if let Some(&bad) = grade_target.iter().find(|&&g| g as usize >= GRADE_COUNT) {
        return Err(Error::InvalidArgument(format!(
            "grade {bad} outside 0..{GRADE_COUNT}"
        )));
    }
    let reg = tape.mse_loss(outputs.fat_pred, fat_target)?;
    let mut total = tape.scale(reg, T::from_f64(weights.lambda1));
    let mut att_reg = None;
    let mut att_cls = None;
    if let Some(att_pred) = outputs.att_fat_pred {
        let l = tape.mse_loss(att_pred, fat_target)?;
        let w = tape.scale(l, T::from_f64(weights.alpha1));
        total = tape.add(total, w)?;
        att_reg = Some(l);
    }
    if let Some(logits) = outputs.grade_logits {
        let targets: Vec<usize> = grade_target.iter().map(|&g| g as usize).collect();
        let l = tape.softmax_cross_entropy(logits, &targets)?;
        let w = tape.scale(l, T::from_f64(weights.alpha2));
        total = tape.add(total, w)?;
        att_cls = Some(l);
    }
    Ok(LossTerms {
        total,
        reg,
        att_reg,
        att_cls,
    })
}

/// Batch inference through the backbone path only (eval mode). Attention
/// parameters are never read. Returns raw (unclamped) fat predictions.
pub fn predict_batch<T: Real>(
    model: &ModelParams<T>,
    frontal: &Tensor<T>,
    lateral: &Tensor<T>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx {
        model,
        mode: Mode::Eval,
        bn_out: BnUpdates::new(),
    };
    let fat = if model.config.variant == Variant::Mlp {
        let (out, _) = forward(&mut tape, model, frontal, lateral, Mode::Eval)?;
        out.fat_pred
    } else {
        check_input(model, frontal)?;
        check_input(model, lateral)?;
        let mut views = Vec::with_capacity(2);
        for (name, map) in [("frontal", frontal), ("lateral", lateral)] {
            let x = tape.leaf(map.clone());
            let x = ctx.conv_bn_relu(&mut tape, x, &format!("{name}.conv1"), &format!("{name}.bn1"), 2)?;
            let x = ctx.conv_bn_relu(&mut tape, x, &format!("{name}.conv2"), &format!("{name}.bn2"), 2)?;
            views.push(x);
        }
        let mut x = tape.concat_channels(views[0], views[1])?;
        let mut c_in = 2 * model.config.input_phase_channels;
        for (i, stage) in model.config.stages.iter().enumerate() {
            for j in 0..stage.blocks {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                x = ctx.residual_block(
                    &mut tape,
                    x,
                    &format!("s{i}.b{j}"),
                    stride,
                    c_in != stage.channels,
                )?;
                c_in = stage.channels;
            }
        }
        let v_gap = tape.global_avg_pool(x)?;
        ctx.head(&mut tape, v_gap)?
    };
    Ok(tape.value(fat).values().iter().map(|v| v.to_f64()).collect())
}

/// Single-subject inference: fat percentage (clamped to [0, 100] for
/// reporting) and the grade binned from it.
pub fn predict<T: Real>(
    model: &ModelParams<T>,
    maps: &DepthMapPair,
    calib: &FatCalib,
) -> Result<(f64, u8)> {
    let (frontal, lateral) = maps_to_tensors::<T>(std::slice::from_ref(maps), model.config.input_size)?;
    let fat = predict_batch(model, &frontal, &lateral)?[0].clamp(0.0, 100.0);
    Ok((fat, fat_to_grade(fat, calib)))
}

/// Stack subject maps into N×1×S×S batch tensors.
pub fn maps_to_tensors<T: Real>(
    maps: &[DepthMapPair],
    input_size: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = maps.len();
    let s = input_size;
    let mut frontal = Vec::with_capacity(n * s * s);
    let mut lateral = Vec::with_capacity(n * s * s);
    for m in maps {
        if m.size != s {
            return Err(Error::InvalidArgument(format!(
                "subject `{}` has maps of side {}, model expects {s}",
                m.id, m.size
            )));
        }
        frontal.extend(m.frontal.iter().map(|&v| T::from_f64(v as f64)));
        lateral.extend(m.lateral.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok((
        Tensor::new(vec![n, 1, s, s], frontal)?,
        Tensor::new(vec![n, 1, s, s], lateral)?,
    ))
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

/// JSON sidecar stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub config: ModelConfig,
    pub seed: u64,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut p = ckpt.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_model<T: Real>(model: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let entries: Vec<CheckpointEntry> = model
        .params
        .entries()
        .iter()
        .map(|e| CheckpointEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            values: e.value.values().iter().map(|v| v.to_f64() as f32).collect(),
        })
        .collect();
    write_checkpoint(path.as_ref(), &entries)?;
    let sidecar = CheckpointSidecar {
        config: model.config.clone(),
        seed: model.seed,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    crate::io::write_file(&sidecar_path(path.as_ref()), json.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let sidecar_file = sidecar_path(path);
    let sidecar: CheckpointSidecar = serde_json::from_slice(&crate::io::read_file(&sidecar_file)?)?;
    let mut model: ModelParams<f32> = build_model(&sidecar.config, sidecar.seed)?;
    let entries = read_checkpoint(path)?;
    if entries.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, model expects {}",
            entries.len(),
            model.params.len()
        )));
    }
    for e in entries {
        let id = model.params.id_of(&e.name).ok_or_else(|| {
            Error::Format(format!("checkpoint entry `{}` unknown to this model", e.name))
        })?;
        let target = &mut model.params.get_mut(id).value;
        if target.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "entry `{}`: shape {:?} in file, model expects {:?}",
                e.name,
                e.shape,
                target.shape()
            )));
        }
        target.values_mut().copy_from_slice(&e.values);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            input_size: 32,
            input_phase_channels: 4,
            stages: vec![
                StagePlan { blocks: 2, channels: 8 },
                StagePlan { blocks: 2, channels: 12 },
            ],
            fc_hidden: 10,
            mlp_hidden: 6,
            variant,
            ..ModelConfig::default()
        }
    }

    /// Independent per-layer parameter count, written out long-hand.
    fn expected_trainable(cfg: &ModelConfig) -> usize {
        if cfg.variant == Variant::Mlp {
            let d = 2 * cfg.input_size * cfg.input_size;
            return d * cfg.mlp_hidden + cfg.mlp_hidden + cfg.mlp_hidden + 1;
        }
        let ch = cfg.input_phase_channels;
        // Per view: conv1(1→ch,3×3)+bias, bn(γ+β), conv2(ch→ch,3×3)+bias, bn.
        let view = (ch * 9 + ch) + 2 * ch + (ch * ch * 9 + ch) + 2 * ch;
        let mut total = 2 * view;
        let mut c_in = 2 * ch;
        for (i, st) in cfg.stages.iter().enumerate() {
            for j in 0..st.blocks {
                let c = st.channels;
                total += c * c_in * 9 + c + 2 * c; // conv1 + bn1
                total += c * c * 9 + c + 2 * c; // conv2 + bn2
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                if stride != 1 || c_in != c {
                    total += c * c_in + c + 2 * c; // 1×1 down conv + bn
                }
                c_in = c;
            }
        }
        let c = c_in;
        total += c * cfg.fc_hidden + cfg.fc_hidden + cfg.fc_hidden + 1; // head
        if cfg.variant.has_attention() {
            total += cfg.attention_channels * c + cfg.attention_channels; // 1×1 proj
        }
        if cfg.variant.has_classification() {
            total += cfg.attention_channels * (c + 1); // scalar heads
        }
        total
    }

    #[test]
    fn parameter_count_matches_independent_tally() {
        for variant in [Variant::PlainBackbone, Variant::Baseline, Variant::Proposed, Variant::Mlp] {
            let cfg = tiny_config(variant);
            let m: ModelParams<f64> = build_model(&cfg, 1).unwrap();
            assert_eq!(
                m.params.trainable_scalars(),
                expected_trainable(&cfg),
                "variant {variant:?}"
            );
        }
        // And the default desk-scale configuration.
        let cfg = ModelConfig::default();
        let m: ModelParams<f64> = build_model(&cfg, 1).unwrap();
        assert_eq!(m.params.trainable_scalars(), expected_trainable(&cfg));
    }

    #[test]
    fn plain_backbone_has_zero_attention_parameters() {
        let m: ModelParams<f64> = build_model(&tiny_config(Variant::PlainBackbone), 1).unwrap();
        assert!(m.params.entries().iter().all(|e| !e.name.starts_with("att.")));
        let b: ModelParams<f64> = build_model(&tiny_config(Variant::Baseline), 1).unwrap();
        assert!(b.params.entries().iter().any(|e| e.name.starts_with("att.proj")));
        assert!(b.params.entries().iter().all(|e| !e.name.starts_with("att.cls")));
    }

    #[test]
    fn seeds_change_values_not_shapes() {
        let a: ModelParams<f64> = build_model(&tiny_config(Variant::Proposed), 1).unwrap();
        let b: ModelParams<f64> = build_model(&tiny_config(Variant::Proposed), 2).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        let mut any_diff = false;
        for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.shape(), y.value.shape());
            any_diff |= x.value.values() != y.value.values();
        }
        assert!(any_diff);
    }

    fn batch(n: usize, s: usize, fill: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![n, 1, s, s], |i| fill(i))
    }

    #[test]
    fn forward_is_finite_on_zero_input() {
        let cfg = tiny_config(Variant::Proposed);
        let model: ModelParams<f64> = build_model(&cfg, 3).unwrap();
        let f = batch(2, 32, |_| 0.0);
        let l = batch(2, 32, |_| 0.0);
        let mut tape = Tape::new();
        let (out, _) = forward(&mut tape, &model, &f, &l, Mode::Train).unwrap();
        assert!(tape.value(out.fat_pred).all_finite());
        assert_eq!(tape.value(out.fat_pred).shape(), &[2, 1]);
        assert_eq!(out.att_maps.len(), 4);
        assert!(out.grade_logits.is_some());
        // Attention maps live in (0,1).
        for &m in &out.att_maps {
            assert!(tape
                .value(m)
                .values()
                .iter()
                .all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn v_gap_matches_independent_spatial_mean() {
        let cfg = tiny_config(Variant::PlainBackbone);
        let model: ModelParams<f64> = build_model(&cfg, 5).unwrap();
        let f = batch(1, 32, |i| (i % 7) as f64 / 7.0);
        let l = batch(1, 32, |i| (i % 5) as f64 / 5.0);
        let mut tape = Tape::new();
        let (out, _) = forward(&mut tape, &model, &f, &l, Mode::Train).unwrap();
        let f_res = tape.value(out.f_res.unwrap());
        let (n, c, h, w) = f_res.dims4().unwrap();
        let v_gap = tape.value(out.v_gap.unwrap());
        for i in 0..n * c {
            let mean: f64 =
                f_res.values()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            assert!((v_gap.values()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_attention_maps_leave_features_bit_equal() {
        // Force the projection to produce sigmoid outputs of exactly 1 by
        // saturating the logits, then check F_att == F_res bitwise.
        let cfg = tiny_config(Variant::Baseline);
        let mut model: ModelParams<f64> = build_model(&cfg, 7).unwrap();
        let wid = model.params.id_of("att.proj.weight").unwrap();
        for v in model.params.get_mut(wid).value.values_mut() {
            *v = 0.0;
        }
        let bid = model.params.id_of("att.proj.bias").unwrap();
        for v in model.params.get_mut(bid).value.values_mut() {
            *v = 1e6; // sigmoid(1e6) is exactly 1.0 in floating point
        }
        let f = batch(2, 32, |i| (i % 11) as f64 / 11.0);
        let l = batch(2, 32, |i| (i % 13) as f64 / 13.0);
        let mut tape = Tape::new();
        let (out, _) = forward(&mut tape, &model, &f, &l, Mode::Train).unwrap();
        let f_res = tape.value(out.f_res.unwrap()).values().to_vec();
        for &fa in &out.f_att {
            assert_eq!(tape.value(fa).values(), &f_res[..]);
        }

        // And all-zero maps produce all-zero refined features.
        for v in model.params.get_mut(bid).value.values_mut() {
            *v = -1e6;
        }
        let mut tape = Tape::new();
        let (out, _) = forward(&mut tape, &model, &f, &l, Mode::Train).unwrap();
        for &fa in &out.f_att {
            assert!(tape.value(fa).values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn refined_features_match_loop_oracle() {
        let cfg = tiny_config(Variant::Baseline);
        let model: ModelParams<f64> = build_model(&cfg, 11).unwrap();
        let f = batch(1, 32, |i| ((i * 31) % 17) as f64 / 17.0);
        let l = batch(1, 32, |i| ((i * 13) % 19) as f64 / 19.0);
        let mut tape = Tape::new();
        let (out, _) = forward(&mut tape, &model, &f, &l, Mode::Train).unwrap();
        let f_res = tape.value(out.f_res.unwrap()).clone();
        let (n, c, h, w) = f_res.dims4().unwrap();
        for (k, (&fa, &ma)) in out.f_att.iter().zip(&out.att_maps).enumerate() {
            let refined = tape.value(fa);
            let map = tape.value(ma);
            for s in 0..n {
                for ch in 0..c {
                    for p in 0..h * w {
                        let want = map.values()[s * h * w + p] * f_res.values()[(s * c + ch) * h * w + p];
                        let got = refined.values()[(s * c + ch) * h * w + p];
                        assert!((got - want).abs() < 1e-12, "channel {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn attention_regression_input_is_mean_of_pooled_maps() {
        // With all refined maps identical (unit attention), the regression
        // component input equals the pooled map itself, so att_fat_pred must
        // equal the backbone head applied to GAP(F_res).
        let cfg = tiny_config(Variant::Baseline);
        let mut model: ModelParams<f64> = build_model(&cfg, 13).unwrap();
        let wid = model.params.id_of("att.proj.weight").unwrap();
        for v in model.params.get_mut(wid).value.values_mut() {
            *v = 0.0;
        }
        let bid = model.params.id_of("att.proj.bias").unwrap();
        for v in model.params.get_mut(bid).value.values_mut() {
            *v = 1e6;
        }
        let f = batch(2, 32, |i| (i % 3) as f64 / 3.0);
        let l = batch(2, 32, |i| (i % 4) as f64 / 4.0);
        let mut tape = Tape::new();
        let (out, _) = forward(&mut tape, &model, &f, &l, Mode::Train).unwrap();
        let a = tape.value(out.fat_pred).values();
        let b = tape.value(out.att_fat_pred.unwrap()).values();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zeroed_class_head_gives_constant_logit() {
        let cfg = tiny_config(Variant::Proposed);
        let mut model: ModelParams<f64> = build_model(&cfg, 17).unwrap();
        let wid = model.params.id_of("att.cls2.weight").unwrap();
        for v in model.params.get_mut(wid).value.values_mut() {
            *v = 0.0;
        }
        let bid = model.params.id_of("att.cls2.bias").unwrap();
        model.params.get_mut(bid).value.values_mut()[0] = 0.625;
        let f = batch(3, 32, |i| ((i * 7) % 23) as f64 / 23.0);
        let l = batch(3, 32, |i| ((i * 3) % 29) as f64 / 29.0);
        let mut tape = Tape::new();
        let (out, _) = forward(&mut tape, &model, &f, &l, Mode::Train).unwrap();
        let logits = tape.value(out.grade_logits.unwrap());
        let (n, k) = logits.dims2().unwrap();
        assert_eq!(k, 4);
        for s in 0..n {
            assert_eq!(logits.values()[s * k + 2], 0.625);
        }
    }

    #[test]
    fn loss_is_weighted_sum_and_validates_grades() {
        let cfg = tiny_config(Variant::Proposed);
        let model: ModelParams<f64> = build_model(&cfg, 19).unwrap();
        let f = batch(2, 32, |i| (i % 9) as f64 / 9.0);
        let l = batch(2, 32, |i| (i % 6) as f64 / 6.0);
        let fat = Tensor::new(vec![2], vec![10.0, 30.0]).unwrap();
        let mut tape = Tape::new();
        let (out, _) = forward(&mut tape, &model, &f, &l, Mode::Train).unwrap();
        assert!(total_loss(&mut tape, &out, &fat, &[1, 4], &LossWeights::default()).is_err());
        let terms = total_loss(&mut tape, &out, &fat, &[1, 3], &LossWeights::default()).unwrap();
        let total = tape.value(terms.total).values()[0];
        let reg = tape.value(terms.reg).values()[0];
        let att_reg = tape.value(terms.att_reg.unwrap()).values()[0];
        let att_cls = tape.value(terms.att_cls.unwrap()).values()[0];
        assert!((total - (1.0 * reg + 0.5 * att_reg + 0.5 * att_cls)).abs() < 1e-10);

        // Weight zeroing reduces the total to the plain regression loss.
        let mut tape = Tape::new();
        let (out, _) = forward(&mut tape, &model, &f, &l, Mode::Train).unwrap();
        let only_reg = LossWeights { lambda1: 1.0, alpha1: 0.0, alpha2: 0.0 };
        let terms = total_loss(&mut tape, &out, &fat, &[1, 3], &only_reg).unwrap();
        assert!(
            (tape.value(terms.total).values()[0] - tape.value(terms.reg).values()[0]).abs()
                < 1e-12
        );
    }

    #[test]
    fn checkpoint_roundtrip_restores_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Variant::Proposed);
        let model: ModelParams<f32> = build_model(&cfg, 23).unwrap();
        let path = dir.path().join("m.sfp");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model.params.entries().iter().zip(loaded.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.values(), b.value.values());
        }
    }

    #[test]
    fn eval_before_training_fails() {
        let cfg = tiny_config(Variant::PlainBackbone);
        let model: ModelParams<f64> = build_model(&cfg, 29).unwrap();
        let f = batch(1, 32, |_| 0.1);
        let l = batch(1, 32, |_| 0.2);
        let err = predict_batch(&model, &f, &l).unwrap_err().to_string();
        assert!(err.contains("train the model first"), "{err}");
    }
}
