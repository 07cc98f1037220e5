//! Temporal query propagation: persistent query↔instance binding,
//! the prediction head, the tracking loss, and the training loop.
//!
//! A clip is processed frame by frame on one tape. Each frame's decoder
//! input — and its gated-residual fallback — is the previous frame's
//! final queries, so gradients flow through time. Ground-truth instances
//! are bound to queries exactly once, when they first appear: a minimum-
//! cost match against the currently free queries. A binding never
//! changes afterwards; an instance keeps its query through occlusion and
//! reappearance, which is what makes the query index usable as a track
//! id.
//!
//! The loss carries no term on the gate outputs. Gates receive gradient
//! only through their effect on the decoded queries, so whatever gate
//! policy emerges is learned implicitly from the tracking objective.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::params::{xavier, zeros_vec};
use crate::decoder::{decoder_forward, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::gating::{GateMode, GateTraceRow};
use crate::hungarian::hungarian_match;
use crate::rng::{child_seed, stream, stream_rng};
use crate::synthworld::{VideoClip, Visibility};
use crate::tensor::{Tape, Tensor};

/// Predicted radii are squashed into [RADIUS_FLOOR, RADIUS_FLOOR +
/// RADIUS_SPAN], which covers the generator's radius range with margin
/// while keeping the output strictly positive.
pub const RADIUS_FLOOR: f64 = 0.01;
pub const RADIUS_SPAN: f64 = 0.3;

/// Salt for the head's init stream so it is independent of how many
/// draws the decoder init consumed.
const HEAD_SEED_SALT: u64 = 0x4EAD;

// ── model ──────────────────────────────────────────────────────────────

/// Per-query prediction head: a learned layer norm (the residual stream
/// is unnormalized and its scale grows over frames, so the head sees a
/// stabilized view), then class logits over K+1 labels (index K = "no
/// object"), a sigmoid-squashed 2D center in scene units, and a bounded
/// positive radius.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
    pub w_pos: Tensor,
    pub b_pos: Tensor,
}

impl HeadParams {
    fn init(rng: &mut ChaCha8Rng, c: usize, k_classes: usize) -> Result<Self> {
        Ok(HeadParams {
            norm_gamma: Tensor::new(vec![1.0; c], &[c])?.requiring_grad(),
            norm_beta: zeros_vec(c)?,
            w_cls: xavier(rng, c, k_classes + 1)?,
            b_cls: zeros_vec(k_classes + 1)?,
            w_pos: xavier(rng, c, 3)?,
            b_pos: zeros_vec(3)?,
        })
    }

    fn fields(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("norm_gamma", &self.norm_gamma),
            ("norm_beta", &self.norm_beta),
            ("w_cls", &self.w_cls),
            ("b_cls", &self.b_cls),
            ("w_pos", &self.w_pos),
            ("b_pos", &self.b_pos),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("norm_gamma", &mut self.norm_gamma),
            ("norm_beta", &mut self.norm_beta),
            ("w_cls", &mut self.w_cls),
            ("b_cls", &mut self.b_cls),
            ("w_pos", &mut self.w_pos),
            ("b_pos", &mut self.b_pos),
        ]
    }
}

/// Everything a run needs to describe the model (the token grid rides
/// along because the feature width is part of the model contract).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub k_classes: usize,
    pub grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { decoder: DecoderConfig::default(), k_classes: 3, grid: 4 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.k_classes == 0 {
            return Err(Error::BadConfig("need at least one class".into()));
        }
        if self.grid == 0 {
            return Err(Error::BadConfig("token grid must be non-empty".into()));
        }
        Ok(())
    }

    /// Index of the "no object" label in the class distribution.
    pub fn no_object_idx(&self) -> usize {
        self.k_classes
    }
}

/// Decoder plus prediction head.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub decoder: DecoderParams,
    pub head: HeadParams,
}

impl Model {
    /// Deterministic initialization: the decoder and the head draw from
    /// independent streams of the same seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let decoder = DecoderParams::init(&config.decoder, seed)?;
        let mut rng = stream_rng(child_seed(seed, HEAD_SEED_SALT), stream::PARAM_INIT);
        let head = HeadParams::init(&mut rng, config.decoder.c, config.k_classes)?;
        Ok(Model { config: config.clone(), decoder, head })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.decoder.named();
        for (f, t) in self.head.fields() {
            out.push((format!("head.{f}"), t));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.decoder.named_mut();
        for (f, t) in self.head.fields_mut() {
            out.push((format!("head.{f}"), t));
        }
        out
    }

    /// Registers every parameter as a "param.*" tape leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<()> {
        for (name, t) in self.named() {
            tape.leaf(t, &format!("param.{name}"))?;
        }
        Ok(())
    }

    /// Rebuilds a model from named arrays (checkpoint load).
    pub fn from_named(
        config: &ModelConfig,
        arrays: &HashMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut skeleton = Model::init(config, 0)?;
        let mut known = std::collections::HashSet::new();
        for (name, slot) in skeleton.named_mut() {
            let (shape, values) = arrays
                .get(&name)
                .ok_or_else(|| Error::BadFile(format!("missing parameter array '{name}'")))?;
            if shape != slot.shape() {
                return Err(Error::BadFile(format!(
                    "parameter '{name}' has shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::new(values.clone(), shape)?.requiring_grad();
            known.insert(name);
        }
        let extra: Vec<&String> = arrays.keys().filter(|k| !known.contains(*k)).collect();
        if !extra.is_empty() {
            return Err(Error::BadFile(format!("unknown parameter arrays: {extra:?}")));
        }
        Ok(skeleton)
    }
}

// ── binding ────────────────────────────────────────────────────────────

/// Which instance each query is committed to. Bindings are write-once:
/// a query, once bound, stays bound to that instance for the rest of the
/// run, and an instance is never given a second query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackState {
    binding: Vec<Option<usize>>,
}

impl TrackState {
    pub fn new(n_queries: usize) -> Self {
        TrackState { binding: vec![None; n_queries] }
    }

    pub fn instance_of(&self, query: usize) -> Option<usize> {
        self.binding[query]
    }

    pub fn query_of(&self, instance: usize) -> Option<usize> {
        self.binding.iter().position(|b| *b == Some(instance))
    }

    pub fn is_bound_instance(&self, instance: usize) -> bool {
        self.binding.contains(&Some(instance))
    }

    /// Unallocated query indices, ascending.
    pub fn free_queries(&self) -> Vec<usize> {
        (0..self.binding.len()).filter(|&q| self.binding[q].is_none()).collect()
    }

    pub fn bound_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.binding.iter().enumerate().filter_map(|(q, b)| b.map(|i| (q, i)))
    }

    /// Commits `query` to `instance`. Rebinding either side is a logic
    /// error and is rejected rather than silently overwritten.
    pub fn bind(&mut self, query: usize, instance: usize) -> Result<()> {
        if self.binding[query].is_some() {
            return Err(Error::BadConfig(format!("query {query} is already bound")));
        }
        if self.is_bound_instance(instance) {
            return Err(Error::BadConfig(format!("instance {instance} is already bound")));
        }
        self.binding[query] = Some(instance);
        Ok(())
    }
}

// ── predictions and loss ───────────────────────────────────────────────

/// Plain-number view of one query's output, for logging and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Distribution over K+1 labels; the last entry is "no object".
    pub class_probs: Vec<f64>,
    pub center: [f64; 2],
    pub radius: f64,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        self.class_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("probabilities are finite"))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// True when the most likely label is a real class, not "no object".
    pub fn is_object(&self) -> bool {
        self.argmax() + 1 != self.class_probs.len()
    }
}

/// Tape-resident head outputs for one frame.
#[derive(Debug, Clone)]
pub struct FrameTensors {
    pub queries: Tensor,
    /// [N, K+1] raw class logits.
    pub cls_logits: Tensor,
    /// [N, 2] centers, already squashed into the unit square.
    pub centers: Tensor,
    /// [N, 1] radii, already squashed positive.
    pub radii: Tensor,
}

/// Applies the prediction head to final queries.
pub fn prediction_head(tape: &mut Tape, queries: &Tensor, head: &HeadParams) -> Result<FrameTensors> {
    let normed = tape.layer_norm(queries, &head.norm_gamma, &head.norm_beta)?;
    let raw_cls = tape.matmul(&normed, &head.w_cls)?;
    let cls_logits = tape.add_row(&raw_cls, &head.b_cls)?;
    let raw_pos = tape.matmul(&normed, &head.w_pos)?;
    let raw_pos = tape.add_row(&raw_pos, &head.b_pos)?;
    let centers = {
        let s = tape.slice_cols(&raw_pos, 0, 2)?;
        tape.sigmoid(&s)?
    };
    let radii = {
        let s = tape.slice_cols(&raw_pos, 2, 1)?;
        let s = tape.sigmoid(&s)?;
        let s = tape.scale(&s, RADIUS_SPAN)?;
        tape.add_const(&s, &[RADIUS_FLOOR])?
    };
    Ok(FrameTensors { queries: queries.clone(), cls_logits, centers, radii })
}

/// Reads the head outputs into plain predictions.
pub fn extract_predictions(tape: &mut Tape, ft: &FrameTensors) -> Result<Vec<Prediction>> {
    let probs = tape.softmax_rows(&ft.cls_logits)?;
    let n = ft.centers.shape()[0];
    let k1 = ft.cls_logits.shape()[1];
    let mut out = Vec::with_capacity(n);
    for q in 0..n {
        out.push(Prediction {
            class_probs: probs.values()[q * k1..(q + 1) * k1].to_vec(),
            center: [ft.centers.values()[q * 2], ft.centers.values()[q * 2 + 1]],
            radius: ft.radii.values()[q],
        });
    }
    Ok(out)
}

/// Per-query supervision for one frame. `class_idx` is an index into the
/// K+1 labels; `pos` is Some([cx, cy, r]) only for queries whose bound
/// instance is actually visible this frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub class_idx: Vec<usize>,
    pub pos: Vec<Option<[f64; 3]>>,
}

/// Builds targets from the ground truth and the current bindings. Bound
/// queries target their instance's class while it is on stage (visible
/// or merely occluded); instances that have left the scene for good fall
/// back to the no-object label. Free queries always target no-object.
/// Occluded instances keep the class target but contribute no position
/// term.
pub fn frame_targets(
    clip: &VideoClip,
    frame: usize,
    state: &TrackState,
    k_classes: usize,
) -> FrameTargets {
    let n = state.binding.len();
    let no_object = k_classes;
    let mut class_idx = vec![no_object; n];
    let mut pos = vec![None; n];
    for (q, instance) in state.bound_pairs() {
        let track = clip
            .tracks
            .iter()
            .find(|t| t.id == instance)
            .expect("bound instances come from this clip");
        match track.visibility[frame] {
            Visibility::Visible => {
                class_idx[q] = track.class - 1;
                pos[q] = Some([
                    track.centers[frame][0],
                    track.centers[frame][1],
                    track.radii[frame],
                ]);
            }
            Visibility::Occluded => {
                class_idx[q] = track.class - 1;
            }
            Visibility::Absent => {}
        }
    }
    FrameTargets { class_idx, pos }
}

/// Relative weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_pos: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 1.0, lambda_pos: 1.0 }
    }
}

/// One frame's loss: total on the tape, parts as plain numbers.
#[derive(Debug, Clone)]
pub struct FrameLoss {
    pub total: Tensor,
    pub cls: f64,
    pub pos: f64,
}

/// |x| built from the ops the tape has: relu(x) + relu(−x).
fn abs_on_tape(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let p = tape.relu(x)?;
    let neg = tape.scale(x, -1.0)?;
    let m = tape.relu(&neg)?;
    tape.add(&p, &m)
}

/// λ_cls · mean-over-queries cross-entropy (bound queries target their
/// instance class, free queries target no-object) + λ_pos · mean L1 on
/// (center, radius) over the queries whose instance is visible.
pub fn compute_loss(
    tape: &mut Tape,
    ft: &FrameTensors,
    targets: &FrameTargets,
    weights: &LossWeights,
) -> Result<FrameLoss> {
    let n = targets.class_idx.len();
    let log_probs = tape.log_softmax_rows(&ft.cls_logits)?;
    let picked = tape.pick_per_row(&log_probs, &targets.class_idx)?;
    let sum_lp = tape.sum(&picked)?;
    let cls_mean = tape.scale(&sum_lp, -1.0 / n as f64)?;

    let matched: Vec<usize> = (0..n).filter(|&q| targets.pos[q].is_some()).collect();
    let (total, pos_val) = if matched.is_empty() {
        (tape.scale(&cls_mean, weights.lambda_cls)?, 0.0)
    } else {
        let pred_pos = tape.concat_cols(&[&ft.centers, &ft.radii])?;
        let rows = tape.gather_rows(&pred_pos, &matched)?;
        let target_values: Vec<f64> = matched
            .iter()
            .flat_map(|&q| targets.pos[q].expect("filtered to Some"))
            .collect();
        let target = Tensor::new(target_values, &[matched.len(), 3])?;
        let target = tape.leaf(&target, "data.pos_target")?;
        let diff = tape.sub(&rows, &target)?;
        let dist = abs_on_tape(tape, &diff)?;
        let sum = tape.sum(&dist)?;
        let pos_mean = tape.scale(&sum, 1.0 / matched.len() as f64)?;
        let a = tape.scale(&cls_mean, weights.lambda_cls)?;
        let b = tape.scale(&pos_mean, weights.lambda_pos)?;
        (tape.add(&a, &b)?, pos_mean.item())
    };
    Ok(FrameLoss { total, cls: cls_mean.item(), pos: pos_val })
}

// ── appearance-time matching ───────────────────────────────────────────

/// What `assign_new_objects` did at one frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignOutcome {
    /// (query, instance) pairs bound this frame.
    pub bound: Vec<(usize, usize)>,
    /// Instances that appeared but found no free query (logged, not fatal).
    pub unmatched: usize,
}

/// Binds this frame's newly appeared instances to free queries by
/// minimum-cost matching. Cost of putting instance o on free query q is
/// −log p_q(class_o) + ‖center_q − center_o‖₁. Existing bindings are
/// untouched; when more objects appear than there are free queries, the
/// excess stays unmatched this frame.
pub fn assign_new_objects(
    clip: &VideoClip,
    frame: usize,
    state: &mut TrackState,
    predictions: &[Prediction],
) -> Result<AssignOutcome> {
    let new_objs: Vec<(usize, usize, [f64; 2])> = clip
        .visible_at(frame)
        .into_iter()
        .filter(|(t, _, _)| !state.is_bound_instance(t.id))
        .map(|(t, center, _)| (t.id, t.class, center))
        .collect();
    if new_objs.is_empty() {
        return Ok(AssignOutcome::default());
    }
    let free = state.free_queries();
    if free.is_empty() {
        return Ok(AssignOutcome { bound: Vec::new(), unmatched: new_objs.len() });
    }
    let (m, n) = (new_objs.len(), free.len());
    let mut cost = Vec::with_capacity(m * n);
    for &(_, class, center) in &new_objs {
        for &q in &free {
            let p = predictions[q].class_probs[class - 1].max(1e-12); // keep the log finite
            let l1 = (predictions[q].center[0] - center[0]).abs()
                + (predictions[q].center[1] - center[1]).abs();
            cost.push(-p.ln() + l1);
        }
    }
    let assignment = hungarian_match(&cost, m, n)?;
    let mut outcome = AssignOutcome::default();
    for (row, col) in assignment.pairs() {
        let (instance, _, _) = new_objs[row];
        let query = free[col];
        state.bind(query, instance)?;
        outcome.bound.push((query, instance));
    }
    outcome.unmatched = new_objs.len() - outcome.bound.len();
    Ok(outcome)
}

// ── clip propagation ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Sampled straight-through gates, binding/loss bookkeeping.
    Train,
    /// Deterministic gates, no supervision consulted.
    Eval,
}

/// Tape-resident loss of a whole clip plus plain-number parts for logs.
#[derive(Debug, Clone)]
pub struct ClipLoss {
    pub total: Tensor,
    /// Per-frame means, summed over frames (same shape as `total`).
    pub cls: f64,
    pub pos: f64,
}

/// Everything one clip pass produces.
#[derive(Debug, Clone)]
pub struct ClipRun {
    /// [frame][query] head outputs.
    pub predictions: Vec<Vec<Prediction>>,
    /// One row per (frame, gated stage, query).
    pub gate_trace: Vec<GateTraceRow>,
    /// Binding state after each frame (empty bindings in eval mode).
    pub states: Vec<TrackState>,
    /// Appearances that found no free query, across the whole clip.
    pub unmatched: usize,
    /// Present in train mode only.
    pub loss: Option<ClipLoss>,
}

impl ClipRun {
    /// Fraction of gate decisions that chose "update" (1.0 when the run
    /// had no gated stages — everything updates in an ungated model).
    pub fn gate_rate(&self) -> f64 {
        if self.gate_trace.is_empty() {
            return 1.0;
        }
        let open: usize = self.gate_trace.iter().map(|r| r.hard as usize).sum();
        open as f64 / self.gate_trace.len() as f64
    }
}

/// Runs a clip through the model, frame by frame, feeding each frame's
/// final queries to the next. `features` must hold one [T, C] tensor per
/// frame. Train mode samples straight-through gates from `gate_rng`,
/// binds newly appeared instances, and accumulates the loss; eval mode
/// uses deterministic gates and never consults the ground truth.
pub fn propagate_clip(
    tape: &mut Tape,
    model: &Model,
    clip: &VideoClip,
    features: &[Tensor],
    mode: RunMode,
    weights: &LossWeights,
    mut gate_rng: Option<&mut ChaCha8Rng>,
) -> Result<ClipRun> {
    if clip.frames() == 0 {
        return Err(Error::BadScenario("cannot propagate an empty clip".into()));
    }
    if features.len() != clip.frames() {
        return Err(Error::BadConfig(format!(
            "{} feature frames for a {}-frame clip",
            features.len(),
            clip.frames()
        )));
    }
    model.config.validate()?;
    model.register(tape)?;
    let n = model.config.decoder.n;
    let gate_mode = match mode {
        RunMode::Train => GateMode::StraightThrough,
        RunMode::Eval => GateMode::Deterministic,
    };

    let mut q_prev = tape.leaf(&model.decoder.query_embed, "param.query_embed")?;
    let mut state = TrackState::new(n);
    let mut run = ClipRun {
        predictions: Vec::with_capacity(clip.frames()),
        gate_trace: Vec::new(),
        states: Vec::with_capacity(clip.frames()),
        unmatched: 0,
        loss: None,
    };
    let mut loss_total: Option<Tensor> = None;
    let mut cls_sum = 0.0;
    let mut pos_sum = 0.0;

    for frame in 0..clip.frames() {
        let feats = tape.leaf(&features[frame], &format!("data.frame{frame}"))?;
        let out = decoder_forward(
            tape,
            &feats,
            &q_prev,
            &model.decoder,
            &model.config.decoder,
            gate_mode,
            gate_rng.as_deref_mut(),
        )?;
        for (stage, samples) in out.gates.iter().enumerate() {
            for (query, s) in samples.iter().enumerate() {
                run.gate_trace.push(GateTraceRow {
                    frame,
                    layer: stage,
                    query,
                    logit: s.logit,
                    soft: s.soft,
                    hard: s.hard as u8,
                });
            }
        }
        let ft = prediction_head(tape, &out.queries, &model.head)?;
        let preds = extract_predictions(tape, &ft)?;

        if mode == RunMode::Train {
            let outcome = assign_new_objects(clip, frame, &mut state, &preds)?;
            run.unmatched += outcome.unmatched;
            let targets = frame_targets(clip, frame, &state, model.config.k_classes);
            let fl = compute_loss(tape, &ft, &targets, weights)?;
            cls_sum += fl.cls;
            pos_sum += fl.pos;
            loss_total = Some(match loss_total {
                None => fl.total,
                Some(acc) => tape.add(&acc, &fl.total)?,
            });
        }

        run.predictions.push(preds);
        run.states.push(state.clone());
        q_prev = out.queries;
    }

    if let Some(total) = loss_total {
        run.loss = Some(ClipLoss { total, cls: cls_sum, pos: pos_sum });
    }
    Ok(run)
}

// ── training ───────────────────────────────────────────────────────────

/// Knobs of the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Steps at the start of training run with gating disabled, so the
    /// feature pathway is learned on a stable (memory-free) decoder
    /// before the stochastic gates engage — the desk-scale counterpart
    /// of initializing from a pretrained ungated tracker. Ignored when
    /// the model's gating is off anyway.
    pub warmup_steps: usize,
    pub clip_len: usize,
    pub clips_per_step: usize,
    pub lambda_cls: f64,
    pub lambda_pos: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            steps: 200,
            warmup_steps: 0,
            clip_len: 12,
            clips_per_step: 2,
            lambda_cls: 1.0,
            lambda_pos: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero learning rate is allowed deliberately: it turns training
        // into a pure determinism probe
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::BadConfig(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.steps == 0 || self.clip_len == 0 || self.clips_per_step == 0 {
            return Err(Error::BadConfig("steps, clip_len, clips_per_step must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::BadConfig(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.lambda_cls < 0.0 || self.lambda_pos < 0.0 {
            return Err(Error::BadConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_cls: self.lambda_cls, lambda_pos: self.lambda_pos }
    }
}

/// One line of the training metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub pos_loss: f64,
    pub gate_rate: f64,
    pub grad_norm: f64,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "step,loss,cls_loss,pos_loss,gate_rate,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.cls_loss, self.pos_loss, self.gate_rate, self.grad_norm
        )
    }
}

/// Adam first/second moment buffers per parameter.
struct AdamState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new() -> Self {
        AdamState { m: HashMap::new(), v: HashMap::new(), t: 0 }
    }

    /// One update over all named parameters. Missing gradients (parts of
    /// the model the loss never touched this step) count as zero.
    fn apply(&mut self, model: &mut Model, grads: &HashMap<String, Vec<f64>>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, tensor) in model.named_mut() {
            let numel = tensor.numel();
            let g = grads.get(&name);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; numel]);
            let values = tensor.values_mut();
            for i in 0..numel {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                values[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Trains in place. Each step samples `clips_per_step` clips (with
/// replacement), sums their clip losses, averages over the batch, and
/// takes one Adam step. Returns the per-step metric log. A non-finite
/// loss aborts before the update, so the model keeps its last good
/// parameters.
pub fn train(
    model: &mut Model,
    clips: &[(VideoClip, Vec<Tensor>)],
    cfg: &TrainConfig,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::BadConfig("no training clips".into()));
    }
    let weights = cfg.weights();
    let mut clip_rng = stream_rng(cfg.seed, stream::CLIP_ORDER);
    let mut gate_rng = stream_rng(cfg.seed, stream::GATE_NOISE);
    let mut adam = AdamState::new();
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        model.register(&mut tape)?;
        // Warm-up phase: run the decoder ungated so features are learned
        // on the stable memory-free pathway first. The clone shares
        // tensor identities, so gradients still reach the registered
        // parameters.
        let warm_view = if step < cfg.warmup_steps && model.config.decoder.gating_enabled {
            let mut view = model.clone();
            view.config.decoder.gating_enabled = false;
            Some(view)
        } else {
            None
        };
        let step_model: &Model = warm_view.as_ref().unwrap_or(model);
        let mut batch_loss: Option<Tensor> = None;
        let mut cls_sum = 0.0;
        let mut pos_sum = 0.0;
        let mut gate_open = 0usize;
        let mut gate_all = 0usize;
        for _ in 0..cfg.clips_per_step {
            let pick = clip_rng.gen_range(0..clips.len());
            let (clip, feats) = &clips[pick];
            let run = propagate_clip(
                &mut tape,
                step_model,
                clip,
                feats,
                RunMode::Train,
                &weights,
                Some(&mut gate_rng),
            )?;
            let loss = run.loss.as_ref().expect("train mode always produces a loss");
            cls_sum += loss.cls;
            pos_sum += loss.pos;
            gate_open += run.gate_trace.iter().map(|r| r.hard as usize).sum::<usize>();
            gate_all += run.gate_trace.len();
            batch_loss = Some(match batch_loss {
                None => loss.total.clone(),
                Some(acc) => tape.add(&acc, &loss.total)?,
            });
        }
        let scale = 1.0 / cfg.clips_per_step as f64;
        let loss = tape.scale(&batch_loss.expect("batch is non-empty"), scale)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(&loss)?;

        let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
        let mut sq = 0.0;
        for (name, t) in model.named() {
            if let Some(g) = tape.grad(t) {
                sq += g.iter().map(|x| x * x).sum::<f64>();
                grads.insert(name, g.to_vec());
            }
        }
        adam.apply(model, &grads, cfg.learning_rate);

        metrics.push(MetricRow {
            step,
            loss: loss_val,
            cls_loss: cls_sum * scale,
            pos_loss: pos_sum * scale,
            gate_rate: if gate_all == 0 { 1.0 } else { gate_open as f64 / gate_all as f64 },
            grad_norm: sq.sqrt(),
        });
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_scene, encode_clip, ScenarioSpec, ScenarioTag};

    fn small_config() -> ModelConfig {
        ModelConfig {
            decoder: DecoderConfig { n: 4, c: 8, l: 1, h: 2, ..DecoderConfig::default() },
            k_classes: 3,
            grid: 2,
        }
    }

    fn calm_clip(objects: usize, frames: usize, seed: u64) -> VideoClip {
        let spec = ScenarioSpec {
            tag: ScenarioTag::Calm,
            objects,
            frames,
            shock_start: 0,
            shock_end: 0,
            noise: 0.0,
        };
        generate_scene(&spec, 3, seed).unwrap()
    }

    #[test]
    fn track_state_binds_once_and_partitions() {
        let mut s = TrackState::new(4);
        assert_eq!(s.free_queries(), vec![0, 1, 2, 3]);
        s.bind(2, 7).unwrap();
        assert_eq!(s.instance_of(2), Some(7));
        assert_eq!(s.query_of(7), Some(2));
        assert_eq!(s.free_queries(), vec![0, 1, 3]);
        assert!(s.bind(2, 9).is_err(), "query already taken");
        assert!(s.bind(0, 7).is_err(), "instance already bound");
        let bound: Vec<_> = s.bound_pairs().collect();
        assert_eq!(bound, vec![(2, 7)]);
    }

    #[test]
    fn uniform_class_distribution_costs_log_k_plus_one() {
        // zero logits → uniform over K+1 = 4 labels → CE = ln 4 per query
        let mut tape = Tape::new();
        let n = 4;
        let ft = FrameTensors {
            queries: Tensor::new(vec![0.0; n * 8], &[n, 8]).unwrap(),
            cls_logits: tape
                .leaf(&Tensor::new(vec![0.0; n * 4], &[n, 4]).unwrap(), "data.logits")
                .unwrap(),
            centers: tape
                .leaf(&Tensor::new(vec![0.5; n * 2], &[n, 2]).unwrap(), "data.centers")
                .unwrap(),
            radii: tape
                .leaf(&Tensor::new(vec![0.1; n], &[n, 1]).unwrap(), "data.radii")
                .unwrap(),
        };
        let targets = FrameTargets { class_idx: vec![3; n], pos: vec![None; n] };
        let fl = compute_loss(&mut tape, &ft, &targets, &LossWeights::default()).unwrap();
        assert!((fl.cls - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(fl.pos, 0.0);
        assert!((fl.total.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let mut tape = Tape::new();
        // one-hot-ish logits (target +40) and exactly right positions
        let logits = vec![
            40.0, 0.0, 0.0, 0.0, //
            0.0, 40.0, 0.0, 0.0,
        ];
        let centers = vec![0.25, 0.75, 0.5, 0.5];
        let radii = vec![0.1, 0.05];
        let ft = FrameTensors {
            queries: Tensor::new(vec![0.0; 2 * 8], &[2, 8]).unwrap(),
            cls_logits: tape.leaf(&Tensor::new(logits, &[2, 4]).unwrap(), "data.l").unwrap(),
            centers: tape.leaf(&Tensor::new(centers, &[2, 2]).unwrap(), "data.c").unwrap(),
            radii: tape.leaf(&Tensor::new(radii, &[2, 1]).unwrap(), "data.r").unwrap(),
        };
        let targets = FrameTargets {
            class_idx: vec![0, 1],
            pos: vec![Some([0.25, 0.75, 0.1]), Some([0.5, 0.5, 0.05])],
        };
        let fl = compute_loss(&mut tape, &ft, &targets, &LossWeights::default()).unwrap();
        assert!(fl.total.item() < 1e-12, "loss {}", fl.total.item());
    }

    #[test]
    fn loss_matches_a_naive_scalar_oracle() {
        use rand::Rng;
        let mut rng = stream_rng(5150, 77);
        let (n, k1) = (6, 4);
        let logits: Vec<f64> = (0..n * k1).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let centers: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let radii: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.3)).collect();
        let class_idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k1)).collect();
        let pos: Vec<Option<[f64; 3]>> = (0..n)
            .map(|_| {
                rng.gen_bool(0.5).then(|| {
                    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.02..0.3)]
                })
            })
            .collect();
        let weights = LossWeights { lambda_cls: 0.7, lambda_pos: 1.3 };

        // hand-rolled scalar evaluation
        let mut cls = 0.0;
        for q in 0..n {
            let row = &logits[q * k1..(q + 1) * k1];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            cls += -(row[class_idx[q]] - mx - z.ln());
        }
        cls /= n as f64;
        let mut pos_sum = 0.0;
        let mut m = 0;
        for q in 0..n {
            if let Some(t) = pos[q] {
                pos_sum += (centers[q * 2] - t[0]).abs()
                    + (centers[q * 2 + 1] - t[1]).abs()
                    + (radii[q] - t[2]).abs();
                m += 1;
            }
        }
        let expected = 0.7 * cls + if m > 0 { 1.3 * pos_sum / m as f64 } else { 0.0 };

        let mut tape = Tape::new();
        let ft = FrameTensors {
            queries: Tensor::new(vec![0.0; n * 8], &[n, 8]).unwrap(),
            cls_logits: tape.leaf(&Tensor::new(logits, &[n, k1]).unwrap(), "data.l").unwrap(),
            centers: tape.leaf(&Tensor::new(centers, &[n, 2]).unwrap(), "data.c").unwrap(),
            radii: tape.leaf(&Tensor::new(radii, &[n, 1]).unwrap(), "data.r").unwrap(),
        };
        let targets = FrameTargets { class_idx, pos };
        let fl = compute_loss(&mut tape, &ft, &targets, &weights).unwrap();
        assert!((fl.total.item() - expected).abs() < 1e-12);
    }

    fn flat_prediction(k1: usize) -> Prediction {
        Prediction { class_probs: vec![1.0 / k1 as f64; k1], center: [0.5, 0.5], radius: 0.1 }
    }

    #[test]
    fn assign_without_new_objects_changes_nothing() {
        let clip = calm_clip(2, 4, 3);
        let mut state = TrackState::new(4);
        for t in &clip.tracks {
            let q = state.free_queries()[0];
            state.bind(q, t.id).unwrap();
        }
        let before = state.clone();
        let preds = vec![flat_prediction(4); 4];
        let out = assign_new_objects(&clip, 1, &mut state, &preds).unwrap();
        assert_eq!(state, before);
        assert!(out.bound.is_empty());
        assert_eq!(out.unmatched, 0);
    }

    #[test]
    fn assign_prefers_the_cheaper_free_query() {
        let clip = calm_clip(1, 3, 8);
        let gt = clip.tracks[0].centers[0];
        let class = clip.tracks[0].class;
        let mut state = TrackState::new(4);
        state.bind(0, 100).unwrap();
        state.bind(3, 101).unwrap();
        // free: {1, 2}; query 2 sits right on the object and is confident
        let mut preds = vec![flat_prediction(4); 4];
        preds[2] = Prediction {
            class_probs: {
                let mut p = vec![0.05; 4];
                p[class - 1] = 0.85;
                p
            },
            center: gt,
            radius: 0.1,
        };
        preds[1].center = [gt[0] + 0.4, gt[1] + 0.4];
        let out = assign_new_objects(&clip, 0, &mut state, &preds).unwrap();
        assert_eq!(out.bound, vec![(2, clip.tracks[0].id)]);
        assert_eq!(state.instance_of(2), Some(clip.tracks[0].id));
    }

    #[test]
    fn assign_two_objects_matches_brute_force() {
        use rand::Rng;
        let mut rng = stream_rng(41, 5);
        for trial in 0..20 {
            let clip = calm_clip(2, 3, 1000 + trial);
            let mut preds = Vec::new();
            for _ in 0..5 {
                let mut p: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
                let z: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= z);
                preds.push(Prediction {
                    class_probs: p,
                    center: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                    radius: 0.1,
                });
            }
            let mut state = TrackState::new(5);
            state.bind(1, 900).unwrap();
            state.bind(4, 901).unwrap();
            let free = state.free_queries(); // {0, 2, 3}
            let cost = |obj: &crate::synthworld::ObjectTrack, q: usize| {
                -preds[q].class_probs[obj.class - 1].max(1e-12).ln()
                    + (preds[q].center[0] - obj.centers[0][0]).abs()
                    + (preds[q].center[1] - obj.centers[0][1]).abs()
            };
            // brute force over ordered pairs of distinct free queries
            let mut best = (f64::INFINITY, (0usize, 0usize));
            for &qa in &free {
                for &qb in &free {
                    if qa == qb {
                        continue;
                    }
                    let c = cost(&clip.tracks[0], qa) + cost(&clip.tracks[1], qb);
                    if c < best.0 - 1e-12 {
                        best = (c, (qa, qb));
                    }
                }
            }
            let out = assign_new_objects(&clip, 0, &mut state, &preds).unwrap();
            let total: f64 = out
                .bound
                .iter()
                .map(|&(q, id)| cost(clip.tracks.iter().find(|t| t.id == id).unwrap(), q))
                .sum();
            assert!((total - best.0).abs() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn excess_appearances_wait_for_free_queries() {
        let clip = calm_clip(3, 2, 17);
        let mut state = TrackState::new(2);
        let preds = vec![flat_prediction(4); 2];
        let out = assign_new_objects(&clip, 0, &mut state, &preds).unwrap();
        assert_eq!(out.bound.len(), 2);
        assert_eq!(out.unmatched, 1);
        assert!(state.free_queries().is_empty());
    }

    #[test]
    fn targets_track_visibility() {
        let spec = ScenarioSpec {
            tag: ScenarioTag::Occlusion,
            objects: 1,
            frames: 5,
            shock_start: 2,
            shock_end: 3,
            noise: 0.0,
        };
        let clip = generate_scene(&spec, 3, 2).unwrap();
        let mut state = TrackState::new(3);
        state.bind(1, 0).unwrap();
        let class = clip.tracks[0].class;
        // visible: class target + position target
        let t1 = frame_targets(&clip, 1, &state, 3);
        assert_eq!(t1.class_idx, vec![3, class - 1, 3]);
        assert!(t1.pos[1].is_some());
        // occluded: class target survives, position target does not
        let t2 = frame_targets(&clip, 2, &state, 3);
        assert_eq!(t2.class_idx[1], class - 1);
        assert!(t2.pos[1].is_none());
    }

    #[test]
    fn dead_instances_fall_back_to_no_object() {
        let spec = ScenarioSpec {
            tag: ScenarioTag::BirthDeath,
            objects: 2,
            frames: 6,
            shock_start: 2,
            shock_end: 3,
            noise: 0.0,
        };
        let clip = generate_scene(&spec, 3, 4).unwrap();
        let mut state = TrackState::new(3);
        state.bind(0, 1).unwrap(); // track 1 dies after frame 3
        let t5 = frame_targets(&clip, 5, &state, 3);
        assert_eq!(t5.class_idx[0], 3, "dead instance targets no-object");
        assert!(t5.pos[0].is_none());
    }

    #[test]
    fn model_named_arrays_round_trip() {
        let cfg = small_config();
        let model = Model::init(&cfg, 9).unwrap();
        let arrays: HashMap<String, (Vec<usize>, Vec<f64>)> = model
            .named()
            .into_iter()
            .map(|(n, t)| (n, (t.shape().to_vec(), t.values().to_vec())))
            .collect();
        let back = Model::from_named(&cfg, &arrays).unwrap();
        for ((na, ta), (nb, tb)) in model.named().iter().zip(back.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values(), tb.values());
        }
        // head params differ across seeds and from decoder params
        let other = Model::init(&cfg, 10).unwrap();
        assert_ne!(model.head.w_cls.values(), other.head.w_cls.values());

        let mut missing = arrays.clone();
        missing.remove("head.w_cls");
        assert!(Model::from_named(&cfg, &missing).is_err());
        let mut extra = arrays.clone();
        extra.insert("bogus".into(), (vec![1], vec![0.0]));
        assert!(Model::from_named(&cfg, &extra).is_err());
    }

    #[test]
    fn metric_rows_render_as_csv() {
        let row = MetricRow {
            step: 3,
            loss: 1.5,
            cls_loss: 1.0,
            pos_loss: 0.5,
            gate_rate: 0.75,
            grad_norm: 2.25,
        };
        assert_eq!(MetricRow::CSV_HEADER.split(',').count(), 6);
        assert_eq!(row.csv_row(), "3,1.5,1,0.5,0.75,2.25");
    }

    #[test]
    fn prediction_head_outputs_are_squashed() {
        let cfg = small_config();
        let model = Model::init(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let q = Tensor::new(
            (0..4 * 8).map(|i| (i as f64 * 0.37).sin() * 3.0).collect::<Vec<_>>(),
            &[4, 8],
        )
        .unwrap();
        let q = tape.leaf(&q, "data.q").unwrap();
        let ft = prediction_head(&mut tape, &q, &model.head).unwrap();
        let preds = extract_predictions(&mut tape, &ft).unwrap();
        for p in &preds {
            let z: f64 = p.class_probs.iter().sum();
            assert!((z - 1.0).abs() < 1e-12);
            assert!(p.center.iter().all(|&c| (0.0..=1.0).contains(&c)));
            assert!(p.radius > 0.0 && p.radius <= RADIUS_FLOOR + RADIUS_SPAN);
        }
    }

    #[test]
    fn encode_then_propagate_is_deterministic() {
        let cfg = small_config();
        let model = Model::init(&cfg, 5).unwrap();
        let clip = calm_clip(2, 3, 6);
        let feats = encode_clip(&clip, cfg.decoder.c, cfg.grid).unwrap();
        let run_once = || {
            let mut tape = Tape::new();
            let mut rng = stream_rng(99, stream::GATE_NOISE);
            let run = propagate_clip(
                &mut tape,
                &model,
                &clip,
                &feats,
                RunMode::Train,
                &LossWeights::default(),
                Some(&mut rng),
            )
            .unwrap();
            (run.loss.as_ref().unwrap().total.item(), run.predictions.clone())
        };
        let (la, pa) = run_once();
        let (lb, pb) = run_once();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(pa, pb);
    }
}
