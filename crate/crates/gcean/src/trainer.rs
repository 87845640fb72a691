//! Joint training loop: alignment and consistency losses plus the
//! captioning objective, Adam updates with grouped learning rates,
//! milestone decay, and early stopping on held-out event scores.

use crate::autodiff::{Graph, NodeId};
use crate::data::{EventAnnotation, PairedDataset, PairedSample, TrainingGuard};
use crate::dvchead::{self, DvcConfig, DvcError, DvcWeights, PredictionFile};
use crate::gccm::{self, CascadeNodes, GccmError};
use crate::metrics::{self, EvalReport, SampleEval};
use crate::params::{AdamConfig, Binder, ParamStore};
use crate::salm::{self, Branch, SalmWeights};
use crate::synthgen::derive_seed;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

/// Seed-stream tags, kept distinct so reordering code cannot silently
/// reuse a stream.
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the {0} split has no pairs")]
    EmptyDataset(&'static str),
    #[error("loss became non-finite at step {step}; terms: {dump}")]
    NonFiniteLoss { step: u64, dump: String },
    #[error("the requested view carries no annotations on this split")]
    MissingAnnotations,
    #[error(transparent)]
    Gccm(#[from] GccmError),
    #[error(transparent)]
    Dvc(#[from] DvcError),
}

/// Which recording of a pair to run through the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Source,
    Target,
}

/// Full keeps every alignment term; SourceOnly trains the captioner on
/// the source view alone and never touches target-view arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    SourceOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight on the prototype consistency loss.
    pub lambda_m: f64,
    /// Weight on the attention consistency loss.
    pub lambda_a: f64,
    pub salm: SalmWeights,
    pub dvc: DvcConfig,
    pub dvc_weights: DvcWeights,
    pub n_heads: usize,
    /// Learning rate for the `salm.*` and `gccm.*` groups.
    pub lr_adapt: f64,
    /// Learning rate for everything else (decoder, heads, captioner).
    pub lr_rest: f64,
    pub epochs: usize,
    /// Epochs (1-based) at which both learning rates multiply by
    /// `decay_factor`; must be sorted ascending.
    pub decay_milestones: Vec<usize>,
    pub decay_factor: f64,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub ablate_salm_frame: bool,
    pub ablate_salm_gaze: bool,
    pub ablate_gccm_a: bool,
    pub ablate_gccm_p: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_m: 1.0,
            lambda_a: 0.1,
            salm: SalmWeights::default(),
            dvc: DvcConfig::default(),
            dvc_weights: DvcWeights::default(),
            n_heads: 4,
            lr_adapt: 1e-4,
            lr_rest: 5e-5,
            epochs: 30,
            decay_milestones: vec![15, 25],
            decay_factor: 0.5,
            patience: 5,
            seed: 0,
            ablate_salm_frame: false,
            ablate_salm_gaze: false,
            ablate_gccm_a: false,
            ablate_gccm_p: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.n_heads == 0 {
            return bad("n_heads must be at least 1".into());
        }
        for (name, v) in [("lr_adapt", self.lr_adapt), ("lr_rest", self.lr_rest)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_milestones must be strictly ascending".into());
        }
        for (name, v) in [
            ("lambda_m", self.lambda_m),
            ("lambda_a", self.lambda_a),
            ("lambda_g", self.salm.lambda_g),
            ("lambda_s", self.salm.lambda_s),
            ("lambda_g_gaze", self.salm.lambda_g_gaze),
            ("lambda_s_gaze", self.salm.lambda_s_gaze),
            ("lambda_pg_s", self.salm.lambda_pg_s),
            ("lambda_pg_t", self.salm.lambda_pg_t),
            ("sigma_m", self.salm.sigma_m),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.dvc.n_queries == 0 || self.dvc.n_max_events == 0 || self.dvc.t_cap == 0 {
            return bad("decoder sizes (n_queries, n_max_events, t_cap) must be positive".into());
        }
        Ok(())
    }
}

/// Loss weights after mode and ablation switches have been applied.
/// A zero weight means the corresponding subgraph is never built.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveWeights {
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub lambda_g_gaze: f64,
    pub lambda_s_gaze: f64,
    pub lambda_pg_s: f64,
    pub lambda_pg_t: f64,
    pub lambda_a: f64,
    pub lambda_m: f64,
}

pub fn effective_weights(cfg: &TrainConfig, mode: TrainMode) -> EffectiveWeights {
    let mut w = EffectiveWeights {
        lambda_g: cfg.salm.lambda_g,
        lambda_s: cfg.salm.lambda_s,
        lambda_g_gaze: cfg.salm.lambda_g_gaze,
        lambda_s_gaze: cfg.salm.lambda_s_gaze,
        lambda_pg_s: cfg.salm.lambda_pg_s,
        lambda_pg_t: cfg.salm.lambda_pg_t,
        lambda_a: cfg.lambda_a,
        lambda_m: cfg.lambda_m,
    };
    if cfg.ablate_salm_frame {
        w.lambda_g = 0.0;
        w.lambda_s = 0.0;
    }
    if cfg.ablate_salm_gaze {
        w.lambda_g_gaze = 0.0;
        w.lambda_s_gaze = 0.0;
    }
    if cfg.ablate_gccm_a {
        w.lambda_a = 0.0;
    }
    if cfg.ablate_gccm_p {
        w.lambda_m = 0.0;
    }
    if mode == TrainMode::SourceOnly {
        w.lambda_g = 0.0;
        w.lambda_s = 0.0;
        w.lambda_g_gaze = 0.0;
        w.lambda_s_gaze = 0.0;
        w.lambda_pg_t = 0.0;
        w.lambda_a = 0.0;
        w.lambda_m = 0.0;
    }
    w
}

impl EffectiveWeights {
    /// True when any term reads the target-view feature arrays.
    fn needs_target(&self) -> bool {
        self.lambda_s > 0.0
            || self.lambda_g > 0.0
            || self.lambda_s_gaze > 0.0
            || self.lambda_g_gaze > 0.0
            || self.lambda_pg_t > 0.0
            || self.lambda_a > 0.0
            || self.lambda_m > 0.0
    }
}

/// Per-step loss values. Alignment terms are recorded unweighted; a
/// skipped term stays 0. The task components are already weighted, so
/// they sum to `l_task`.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_score_frame: f64,
    pub l_global_frame: f64,
    pub l_score_gaze: f64,
    pub l_global_gaze: f64,
    pub l_gaze_pred_source: f64,
    pub l_gaze_pred_target: f64,
    pub l_attention: f64,
    pub l_prototype: f64,
    pub l_task: f64,
    pub l_task_l1: f64,
    pub l_task_iou: f64,
    pub l_task_conf: f64,
    pub l_task_caption: f64,
    pub l_task_count: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Reassembles the optimized total from the recorded components.
    pub fn recombine(&self, w: &EffectiveWeights) -> f64 {
        w.lambda_g * self.l_global_frame
            + w.lambda_s * self.l_score_frame
            + w.lambda_g_gaze * self.l_global_gaze
            + w.lambda_s_gaze * self.l_score_gaze
            + w.lambda_pg_s * self.l_gaze_pred_source
            + w.lambda_pg_t * self.l_gaze_pred_target
            + w.lambda_a * self.l_attention
            + w.lambda_m * self.l_prototype
            + self.l_task
    }

    fn add_assign(&mut self, o: &LossBreakdown) {
        self.l_score_frame += o.l_score_frame;
        self.l_global_frame += o.l_global_frame;
        self.l_score_gaze += o.l_score_gaze;
        self.l_global_gaze += o.l_global_gaze;
        self.l_gaze_pred_source += o.l_gaze_pred_source;
        self.l_gaze_pred_target += o.l_gaze_pred_target;
        self.l_attention += o.l_attention;
        self.l_prototype += o.l_prototype;
        self.l_task += o.l_task;
        self.l_task_l1 += o.l_task_l1;
        self.l_task_iou += o.l_task_iou;
        self.l_task_conf += o.l_task_conf;
        self.l_task_caption += o.l_task_caption;
        self.l_task_count += o.l_task_count;
        self.l_total += o.l_total;
    }

    fn scale(&mut self, f: f64) {
        self.l_score_frame *= f;
        self.l_global_frame *= f;
        self.l_score_gaze *= f;
        self.l_global_gaze *= f;
        self.l_gaze_pred_source *= f;
        self.l_gaze_pred_target *= f;
        self.l_attention *= f;
        self.l_prototype *= f;
        self.l_task *= f;
        self.l_task_l1 *= f;
        self.l_task_iou *= f;
        self.l_task_conf *= f;
        self.l_task_caption *= f;
        self.l_task_count *= f;
        self.l_total *= f;
    }
}

/// Registers every parameter group for channel width `c` and the given
/// vocabulary, seeded from the config seed. Registration order is fixed
/// so identical seeds give identical stores.
pub fn init_model(cfg: &TrainConfig, c: usize, vocab_size: usize) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, INIT_STREAM]));
    salm::init_params(&mut store, &mut rng, c);
    gccm::init_params(&mut store, &mut rng, c);
    dvchead::init_params(&mut store, &mut rng, c, vocab_size, &cfg.dvc);
    store
}

pub struct TrainState {
    pub store: ParamStore,
    /// Completed optimizer steps; Adam bias correction is keyed to it.
    pub step: u64,
}

struct ViewNodes {
    conv_frames: NodeId,
    pred_gaze: NodeId,
    conv_gaze: NodeId,
    stack: CascadeNodes,
}

/// Shared forward path for one view: convert frames, predict gaze from
/// raw frames, convert the prediction, run the cascade on the converted
/// pair.
fn view_forward(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    frames: NodeId,
    n_heads: usize,
) -> Result<ViewNodes, GccmError> {
    let conv_frames = salm::convert(g, b, store, Branch::Frame, frames);
    let pred_gaze = salm::predict_gaze(g, b, store, frames);
    let conv_gaze = salm::convert(g, b, store, Branch::Gaze, pred_gaze);
    let stack = gccm::cascade(g, b, store, conv_frames, conv_gaze, n_heads)?;
    Ok(ViewNodes { conv_frames, pred_gaze, conv_gaze, stack })
}

fn weighted_add(g: &mut Graph, total: &mut Option<NodeId>, node: NodeId, weight: f64) {
    let scaled = g.mul_scalar(node, weight);
    *total = Some(match *total {
        Some(t) => g.add(t, scaled),
        None => scaled,
    });
}

struct StepLosses {
    total: NodeId,
    breakdown: LossBreakdown,
}

/// Builds the whole per-pair objective on one tape. Subgraphs whose
/// effective weight is zero are skipped entirely, so a source-only run
/// never constructs target-view nodes.
fn build_losses(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    pair: &PairedSample,
    cfg: &TrainConfig,
    mode: TrainMode,
    vocab_size: usize,
) -> Result<StepLosses, TrainError> {
    let w = effective_weights(cfg, mode);
    let mut bd = LossBreakdown::default();
    let mut total: Option<NodeId> = None;

    let fv_s = g.constant(pair.source_frames.values.clone());
    let src = view_forward(g, b, store, fv_s, cfg.n_heads)?;
    let tgt = if w.needs_target() {
        let fv_t = g.constant(pair.target_frames.values.clone());
        Some(view_forward(g, b, store, fv_t, cfg.n_heads)?)
    } else {
        None
    };

    if w.lambda_s > 0.0 {
        let t = tgt.as_ref().expect("frame ranking needs the target view");
        let s_s = salm::score(g, b, store, Branch::Frame, src.conv_frames, true);
        let s_t = salm::score(g, b, store, Branch::Frame, t.conv_frames, true);
        let l = salm::margin_ranking_loss(g, s_s, s_t, cfg.salm.sigma_m);
        bd.l_score_frame = g.scalar(l);
        weighted_add(g, &mut total, l, w.lambda_s);
    }
    if w.lambda_g > 0.0 {
        let t = tgt.as_ref().expect("frame alignment needs the target view");
        let l = salm::global_alignment_loss(g, src.conv_frames, t.conv_frames);
        bd.l_global_frame = g.scalar(l);
        weighted_add(g, &mut total, l, w.lambda_g);
    }
    if w.lambda_s_gaze > 0.0 {
        let t = tgt.as_ref().expect("gaze ranking needs the target view");
        let s_s = salm::score(g, b, store, Branch::Gaze, src.conv_gaze, true);
        let s_t = salm::score(g, b, store, Branch::Gaze, t.conv_gaze, true);
        let l = salm::margin_ranking_loss(g, s_s, s_t, cfg.salm.sigma_m);
        bd.l_score_gaze = g.scalar(l);
        weighted_add(g, &mut total, l, w.lambda_s_gaze);
    }
    if w.lambda_g_gaze > 0.0 {
        let t = tgt.as_ref().expect("gaze alignment needs the target view");
        let l = salm::global_alignment_loss(g, src.conv_gaze, t.conv_gaze);
        bd.l_global_gaze = g.scalar(l);
        weighted_add(g, &mut total, l, w.lambda_g_gaze);
    }
    if w.lambda_pg_s > 0.0 {
        let gt = g.constant(pair.source_gaze.values.clone());
        let l = salm::l2_loss(g, src.pred_gaze, gt);
        bd.l_gaze_pred_source = g.scalar(l);
        weighted_add(g, &mut total, l, w.lambda_pg_s);
    }
    if w.lambda_pg_t > 0.0 {
        let t = tgt.as_ref().expect("gaze supervision needs the target view");
        let gt = g.constant(pair.target_gaze.values.clone());
        let l = salm::l2_loss(g, t.pred_gaze, gt);
        bd.l_gaze_pred_target = g.scalar(l);
        weighted_add(g, &mut total, l, w.lambda_pg_t);
    }
    if w.lambda_a > 0.0 {
        let t = tgt.as_ref().expect("attention consistency needs the target view");
        let l = gccm::attention_consistency_loss(g, &src.stack, &t.stack);
        bd.l_attention = g.scalar(l);
        weighted_add(g, &mut total, l, w.lambda_a);
    }
    if w.lambda_m > 0.0 {
        let t = tgt.as_ref().expect("prototype consistency needs the target view");
        let l = gccm::prototype_consistency_loss(g, &src.stack, &t.stack);
        bd.l_prototype = g.scalar(l);
        weighted_add(g, &mut total, l, w.lambda_m);
    }

    let dq = dvchead::decode_graph(g, b, store, &src.stack, &cfg.dvc);

    // Matching on non-finite values cannot terminate, so when the
    // forward pass has already blown up, skip the decoder loss and hand
    // back a NaN total for the caller's diagnostic abort.
    let adaptation_ok = [
        bd.l_score_frame,
        bd.l_global_frame,
        bd.l_score_gaze,
        bd.l_global_gaze,
        bd.l_gaze_pred_source,
        bd.l_gaze_pred_target,
        bd.l_attention,
        bd.l_prototype,
    ]
    .iter()
    .all(|v| v.is_finite());
    let decoded_ok = [dq.centers, dq.half_widths, dq.confidences]
        .iter()
        .all(|&n| g.value(n).iter().all(|v| v.is_finite()));
    if !(adaptation_ok && decoded_ok) {
        bd.l_task = f64::NAN;
        bd.l_total = f64::NAN;
        let total = g.scalar_constant(f64::NAN);
        return Ok(StepLosses { total, breakdown: bd });
    }

    let gts = dvchead::normalize_events(&pair.source_events, pair.source_frames.duration_s);
    let task = dvchead::task_loss(g, b, store, &dq, &gts, &cfg.dvc_weights, &cfg.dvc, vocab_size)?;
    bd.l_task = g.scalar(task.total);
    bd.l_task_l1 = g.scalar(task.l1);
    bd.l_task_iou = g.scalar(task.iou);
    bd.l_task_conf = g.scalar(task.conf);
    bd.l_task_caption = g.scalar(task.cap);
    bd.l_task_count = g.scalar(task.cnt);

    let total = match total {
        Some(t) => g.add(t, task.total),
        None => task.total,
    };
    bd.l_total = g.scalar(total);
    Ok(StepLosses { total, breakdown: bd })
}

/// Loss values for one pair without touching the parameters.
pub fn loss_breakdown(
    store: &ParamStore,
    pair: &PairedSample,
    cfg: &TrainConfig,
    mode: TrainMode,
    vocab_size: usize,
) -> Result<LossBreakdown, TrainError> {
    let mut g = Graph::new();
    let mut b = Binder::new();
    Ok(build_losses(&mut g, &mut b, store, pair, cfg, mode, vocab_size)?.breakdown)
}

/// One optimizer step on one pair. `lr_scale` multiplies both group
/// learning rates (milestone decay). Runs with the training flag set,
/// so any read of evaluation-only annotations panics.
pub fn train_step(
    state: &mut TrainState,
    pair: &PairedSample,
    cfg: &TrainConfig,
    mode: TrainMode,
    lr_scale: f64,
    vocab_size: usize,
) -> Result<LossBreakdown, TrainError> {
    let _guard = TrainingGuard::new();
    let mut g = Graph::new();
    let mut b = Binder::new();
    let losses = build_losses(&mut g, &mut b, store_of(state), pair, cfg, mode, vocab_size)?;
    if !losses.breakdown.l_total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: state.step + 1,
            dump: format!("{:?}", losses.breakdown),
        });
    }
    let grads = g.backward(losses.total);
    let grads = b.collect(&grads);
    state.step += 1;
    let lr_adapt = cfg.lr_adapt * lr_scale;
    let lr_rest = cfg.lr_rest * lr_scale;
    state.store.adam_step(&grads, state.step, &AdamConfig::default(), |name| {
        if name.starts_with("salm.") || name.starts_with("gccm.") {
            lr_adapt
        } else {
            lr_rest
        }
    });
    Ok(losses.breakdown)
}

// Trivial accessor that keeps the borrow of `state` readable above.
fn store_of(state: &TrainState) -> &ParamStore {
    &state.store
}

/// Decodes one view of one pair into a prediction record.
pub fn predict_pair(
    store: &ParamStore,
    cfg: &TrainConfig,
    pair: &PairedSample,
    view: View,
    vocab: &[String],
) -> Result<PredictionFile, TrainError> {
    let frames = match view {
        View::Source => &pair.source_frames,
        View::Target => &pair.target_frames,
    };
    let mut g = Graph::new();
    let mut b = Binder::new();
    let fv = g.constant(frames.values.clone());
    let nodes = view_forward(&mut g, &mut b, store, fv, cfg.n_heads)?;
    let (preds, count) = dvchead::decode(&mut g, &mut b, store, &nodes.stack, &cfg.dvc, vocab.len());
    let events = dvchead::select_events(&preds, count, frames.duration_s, vocab);
    Ok(PredictionFile { pair_index: pair.index, events })
}

/// Converts selected events back into annotation form for scoring.
pub fn prediction_annotations(file: &PredictionFile) -> Vec<EventAnnotation> {
    file.events
        .iter()
        .map(|e| EventAnnotation { t_start: e.t_start, t_end: e.t_end, tokens: e.tokens.clone() })
        .collect()
}

/// Scores one view of a dataset against its annotations. The target
/// view errors on splits that withhold them.
pub fn evaluate_view(
    store: &ParamStore,
    cfg: &TrainConfig,
    data: &PairedDataset,
    view: View,
) -> Result<EvalReport, TrainError> {
    if data.pairs.is_empty() {
        return Err(TrainError::EmptyDataset("eval"));
    }
    let mut samples = Vec::with_capacity(data.pairs.len());
    for pair in &data.pairs {
        let gts: Vec<EventAnnotation> = match view {
            View::Source => pair.source_events.clone(),
            View::Target => pair
                .target_events
                .as_ref()
                .ok_or(TrainError::MissingAnnotations)?
                .read()
                .clone(),
        };
        let file = predict_pair(store, cfg, pair, view, &data.vocab)?;
        samples.push(SampleEval { preds: prediction_annotations(&file), gts });
    }
    Ok(metrics::evaluate_dataset(&samples))
}

/// Mean localization F-score on the source view; the checkpoint
/// selection signal.
fn val_soda_tiou(store: &ParamStore, cfg: &TrainConfig, data: &PairedDataset) -> Result<f64, TrainError> {
    let mut acc = 0.0;
    for pair in &data.pairs {
        let file = predict_pair(store, cfg, pair, View::Source, &data.vocab)?;
        let preds = prediction_annotations(&file);
        acc += metrics::soda(&preds, &pair.source_events, |_, _| 1.0).f_score;
    }
    Ok(acc / data.pairs.len() as f64)
}

/// Tracks (metric, loss) pairs; higher metric wins, equal metric breaks
/// ties toward lower loss. Stops after `patience` consecutive
/// non-improvements.
pub struct EarlyStopper {
    patience: usize,
    best: Option<(f64, f64)>,
    strikes: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience below 1 would stop before the first comparison");
        EarlyStopper { patience, best: None, strikes: 0 }
    }

    /// Feeds one epoch's validation outcome; returns whether it set a
    /// new incumbent. The first observation always does.
    pub fn observe(&mut self, metric: f64, loss: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some((bm, bl)) => metric > bm || (metric == bm && loss < bl),
        };
        if improved {
            self.best = Some((metric, loss));
            self.strikes = 0;
        } else {
            self.strikes += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.strikes >= self.patience
    }
}

/// One line of the training history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rates actually applied this epoch, decay included.
    pub lr_adapt: f64,
    pub lr_rest: f64,
    /// Loss terms averaged over the epoch's steps.
    pub train: LossBreakdown,
    pub val_soda_tiou: f64,
    pub val_l_total: f64,
    pub improved: bool,
}

pub struct TrainResult {
    /// Snapshot from the best validation epoch.
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn decay_scale(milestones: &[usize], factor: f64, epoch: usize) -> f64 {
    let hits = milestones.iter().filter(|&&m| m <= epoch).count();
    factor.powi(hits as i32)
}

/// Full training loop: per-epoch reshuffle from a derived seed, one
/// optimizer step per pair, validation scoring, milestone decay, early
/// stopping, best-checkpoint tracking. Identical config and data give
/// an identical history.
pub fn fit(
    cfg: &TrainConfig,
    mode: TrainMode,
    train: &PairedDataset,
    val: &PairedDataset,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if train.pairs.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if val.pairs.is_empty() {
        return Err(TrainError::EmptyDataset("val"));
    }
    let c = train.pairs[0].source_frames.values.ncols();
    if c % cfg.n_heads != 0 {
        return Err(TrainError::Config(format!(
            "{c} channels do not split into {} heads",
            cfg.n_heads
        )));
    }
    let vocab_size = train.vocab.len();

    let mut state = TrainState { store: init_model(cfg, c, vocab_size), step: 0 };
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_params = state.store.clone();
    let mut best_epoch = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let scale = decay_scale(&cfg.decay_milestones, cfg.decay_factor, epoch);

        let mut order: Vec<usize> = (0..train.pairs.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, SHUFFLE_STREAM, epoch as u64]));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut mean = LossBreakdown::default();
        for &idx in &order {
            let bd = train_step(&mut state, &train.pairs[idx], cfg, mode, scale, vocab_size)?;
            mean.add_assign(&bd);
        }
        mean.scale(1.0 / order.len() as f64);

        let val_soda = val_soda_tiou(&state.store, cfg, val)?;
        let mut val_loss = 0.0;
        for pair in &val.pairs {
            val_loss += loss_breakdown(&state.store, pair, cfg, mode, vocab_size)?.l_total;
        }
        val_loss /= val.pairs.len() as f64;

        let improved = stopper.observe(val_soda, val_loss);
        if improved {
            best_params = state.store.clone();
            best_epoch = epoch;
        }
        history.push(EpochRecord {
            epoch,
            lr_adapt: cfg.lr_adapt * scale,
            lr_rest: cfg.lr_rest * scale,
            train: mean,
            val_soda_tiou: val_soda,
            val_l_total: val_loss,
            improved,
        });
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainResult { best_params, best_epoch, history, stopped_early })
}

/// Captioning-only baseline: same loop with every term that needs the
/// target view disabled; those terms are recorded as zero.
pub fn fit_source_only(
    cfg: &TrainConfig,
    train: &PairedDataset,
    val: &PairedDataset,
) -> Result<TrainResult, TrainError> {
    fit(cfg, TrainMode::SourceOnly, train, val)
}

/// One JSON object per epoch, newline-delimited.
pub fn write_history_jsonl(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut out = Vec::new();
    for rec in history {
        let line = serde_json::to_string(rec)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)
}

/// Source/target centroid gaps for one pair at three depths: raw
/// features, converted features, and the deepest fused prototype.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DistanceRow {
    pub pair_index: usize,
    pub raw: f64,
    pub converted: f64,
    pub calibrated: f64,
}

fn centroid(a: &Array2<f64>) -> Vec<f64> {
    a.mean_axis(Axis(0)).expect("sequences are non-empty").to_vec()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn deepest_prototype(
    store: &ParamStore,
    cfg: &TrainConfig,
    frames: &Array2<f64>,
) -> Result<Vec<f64>, TrainError> {
    let mut g = Graph::new();
    let mut b = Binder::new();
    let fv = g.constant(frames.clone());
    let nodes = view_forward(&mut g, &mut b, store, fv, cfg.n_heads)?;
    let last = nodes.stack.levels.last().expect("cascade has at least one level");
    Ok(g.value(last.prototype).row(0).to_vec())
}

pub fn representation_distances(
    store: &ParamStore,
    cfg: &TrainConfig,
    data: &PairedDataset,
) -> Result<Vec<DistanceRow>, TrainError> {
    let mut rows = Vec::with_capacity(data.pairs.len());
    for pair in &data.pairs {
        let raw = euclid(
            &centroid(&pair.source_frames.values),
            &centroid(&pair.target_frames.values),
        );
        let conv_s = salm::convert_plain(store, Branch::Frame, &pair.source_frames.values);
        let conv_t = salm::convert_plain(store, Branch::Frame, &pair.target_frames.values);
        let converted = euclid(&centroid(&conv_s), &centroid(&conv_t));
        let proto_s = deepest_prototype(store, cfg, &pair.source_frames.values)?;
        let proto_t = deepest_prototype(store, cfg, &pair.target_frames.values)?;
        let calibrated = euclid(&proto_s, &proto_t);
        rows.push(DistanceRow { pair_index: pair.index, raw, converted, calibrated });
    }
    Ok(rows)
}

/// Per-pair rows plus a final `mean` summary row.
pub fn distance_report_csv(rows: &[DistanceRow]) -> String {
    let mut out = String::from("pair,raw,converted,calibrated\n");
    let mut sums = [0.0f64; 3];
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.pair_index, r.raw, r.converted, r.calibrated));
        sums[0] += r.raw;
        sums[1] += r.converted;
        sums[2] += r.calibrated;
    }
    let n = rows.len().max(1) as f64;
    out.push_str(&format!("mean,{},{},{}\n", sums[0] / n, sums[1] / n, sums[2] / n));
    out
}

/// Attention entropy (mean over heads and query positions) and frame
/// prototype gap for each cascade level of each pair.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct InspectRow {
    pub pair_index: usize,
    pub level: usize,
    pub entropy_source: f64,
    pub entropy_target: f64,
    pub prototype_distance: f64,
}

pub fn inspect_attention(
    store: &ParamStore,
    cfg: &TrainConfig,
    data: &PairedDataset,
) -> Result<Vec<InspectRow>, TrainError> {
    let mut rows = Vec::new();
    for pair in &data.pairs {
        let mut g = Graph::new();
        let mut b = Binder::new();
        let fv_s = g.constant(pair.source_frames.values.clone());
        let src = view_forward(&mut g, &mut b, store, fv_s, cfg.n_heads)?;
        let fv_t = g.constant(pair.target_frames.values.clone());
        let tgt = view_forward(&mut g, &mut b, store, fv_t, cfg.n_heads)?;
        for (i, (ls, lt)) in src.stack.levels.iter().zip(&tgt.stack.levels).enumerate() {
            let head_mean = |lv: &gccm::LevelNodes, g: &Graph| {
                lv.a_norm.iter().map(|&a| gccm::mean_row_entropy(g.value(a))).sum::<f64>()
                    / lv.a_norm.len() as f64
            };
            let entropy_source = head_mean(ls, &g);
            let entropy_target = head_mean(lt, &g);
            let p_s = g.value(ls.prototype).row(0).to_vec();
            let p_t = g.value(lt.prototype).row(0).to_vec();
            rows.push(InspectRow {
                pair_index: pair.index,
                level: i + 1,
                entropy_source,
                entropy_target,
                prototype_distance: euclid(&p_s, &p_t),
            });
        }
    }
    Ok(rows)
}

pub fn inspect_csv(rows: &[InspectRow]) -> String {
    let mut out = String::from("pair,level,entropy_source,entropy_target,prototype_distance\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.pair_index, r.level, r.entropy_source, r.entropy_target, r.prototype_distance
        ));
    }
    out
}
