//! Parallel event decoder over the four-level calibrated pyramid:
//! learnable queries cross-attend to the flattened pyramid (each level
//! tagged with a level embedding), per-query heads emit a segment as
//! sigmoid (center, half_width), a confidence, and a caption from a
//! small autoregressive recurrent decoder; a count head classifies how
//! many events the clip contains. Predictions are matched to ground
//! truth with an optimal injective assignment before the task loss.
//!
//! Matching runs on detached values; only the loss terms built after it
//! carry gradients. The caption decoder works over the dataset
//! vocabulary plus two internal sentinels appended at the end (sequence
//! start, sequence end); sentinels never appear in decoded output.

use crate::autodiff::{Graph, NodeId};
use crate::data::EventAnnotation;
use crate::gccm::{CascadeNodes, LEVELS};
use crate::params::{normal, xavier, Binder, ParamStore};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DECODER_LAYERS: usize = 2;
const LN_EPS: f64 = 1e-5;
const BCE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DvcConfig {
    pub n_queries: usize,
    pub n_max_events: usize,
    pub t_cap: usize,
}

impl Default for DvcConfig {
    fn default() -> Self {
        DvcConfig { n_queries: 10, n_max_events: 8, t_cap: 12 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DvcWeights {
    pub w_iou: f64,
    pub w_l1: f64,
    pub w_conf: f64,
    pub w_cap: f64,
    pub w_cnt: f64,
}

impl Default for DvcWeights {
    fn default() -> Self {
        DvcWeights { w_iou: 2.0, w_l1: 5.0, w_conf: 1.0, w_cap: 1.0, w_cnt: 0.5 }
    }
}

#[derive(Debug, Error)]
pub enum DvcError {
    #[error("{t_prime} ground-truth events exceed the {n_q} available queries")]
    TooManyEvents { n_q: usize, t_prime: usize },
}

/// One decoded query in plain values.
#[derive(Clone, Debug)]
pub struct EventPrediction {
    pub center: f64,
    pub half_width: f64,
    pub confidence: f64,
    /// t_cap x (vocab + 2) greedy-decode logits, one row per step.
    pub caption_logits: Array2<f64>,
    /// Greedy tokens before the first end sentinel; always dataset ids.
    pub decoded_tokens: Vec<u32>,
}

/// Injective query-to-ground-truth assignment.
#[derive(Clone, Debug)]
pub struct MatchResult {
    /// (query index, ground-truth index), sorted by ground-truth index.
    pub assignment: Vec<(usize, usize)>,
    pub total_cost: f64,
}

fn bos(vocab_size: usize) -> usize {
    vocab_size
}

fn eos(vocab_size: usize) -> usize {
    vocab_size + 1
}

/// Registers queries, level embeddings, the two decoder layers, the
/// output heads, and the caption decoder for feature dimension `c`.
pub fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R, c: usize, vocab_size: usize, cfg: &DvcConfig) {
    let v_model = vocab_size + 2;
    store.insert("dvchead.queries.q", xavier(rng, cfg.n_queries, c));
    store.insert("dvchead.levels.emb", normal(rng, LEVELS, c, 0.02));
    for layer in 1..=DECODER_LAYERS {
        let p = format!("dvchead.decoder.layer{layer}");
        store.insert(&format!("{p}.ln1_g"), Array2::from_elem((1, c), 1.0));
        store.insert(&format!("{p}.ln1_b"), Array2::zeros((1, c)));
        store.insert(&format!("{p}.w_q"), xavier(rng, c, c));
        store.insert(&format!("{p}.w_k"), xavier(rng, c, c));
        store.insert(&format!("{p}.w_v"), xavier(rng, c, c));
        store.insert(&format!("{p}.ln2_g"), Array2::from_elem((1, c), 1.0));
        store.insert(&format!("{p}.ln2_b"), Array2::zeros((1, c)));
        store.insert(&format!("{p}.ffn_w1"), xavier(rng, c, c));
        store.insert(&format!("{p}.ffn_b1"), Array2::zeros((1, c)));
        store.insert(&format!("{p}.ffn_w2"), xavier(rng, c, c));
        store.insert(&format!("{p}.ffn_b2"), Array2::zeros((1, c)));
    }
    store.insert("dvchead.seg.w", xavier(rng, c, 2));
    store.insert("dvchead.seg.b", Array2::zeros((1, 2)));
    store.insert("dvchead.conf.w", xavier(rng, c, 1));
    store.insert("dvchead.conf.b", Array2::zeros((1, 1)));
    store.insert("dvchead.count.w", xavier(rng, c, cfg.n_max_events));
    store.insert("dvchead.count.b", Array2::zeros((1, cfg.n_max_events)));
    store.insert("dvchead.captioner.emb", normal(rng, v_model, c, 0.1));
    store.insert("dvchead.captioner.w_h", xavier(rng, c, c));
    store.insert("dvchead.captioner.w_x", xavier(rng, c, c));
    store.insert("dvchead.captioner.b", Array2::zeros((1, c)));
    store.insert("dvchead.captioner.w_out", xavier(rng, c, v_model));
    store.insert("dvchead.captioner.b_out", Array2::zeros((1, v_model)));
}

/// Decoder outputs still on the tape.
pub struct DecodedQueries {
    /// n_q x C query features after the decoder stack.
    pub queries: NodeId,
    /// n_q x 1 each, sigmoid-bounded.
    pub centers: NodeId,
    pub half_widths: NodeId,
    pub confidences: NodeId,
    /// 1 x N_max class logits for the event count.
    pub count_logits: NodeId,
}

/// Runs queries through the two cross-attention layers against the
/// flattened pyramid and applies the output heads.
pub fn decode_graph(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    stack: &CascadeNodes,
    _cfg: &DvcConfig,
) -> DecodedQueries {
    assert_eq!(stack.levels.len(), LEVELS, "decoder expects the full pyramid");
    let emb = b.p(g, store, "dvchead.levels.emb");
    let mut parts = Vec::with_capacity(LEVELS);
    for (i, lv) in stack.levels.iter().enumerate() {
        let e = g.slice_rows(emb, i, 1);
        parts.push(g.add_row(lv.m_v, e));
    }
    let memory = g.concat_rows(&parts);

    let mut q = b.p(g, store, "dvchead.queries.q");
    let c = g.value(q).ncols();
    let scale = 1.0 / (c as f64).sqrt();
    for layer in 1..=DECODER_LAYERS {
        let p = format!("dvchead.decoder.layer{layer}");
        let ln1_g = b.p(g, store, &format!("{p}.ln1_g"));
        let ln1_b = b.p(g, store, &format!("{p}.ln1_b"));
        let w_q = b.p(g, store, &format!("{p}.w_q"));
        let w_k = b.p(g, store, &format!("{p}.w_k"));
        let w_v = b.p(g, store, &format!("{p}.w_v"));
        let qn = g.layer_norm(q, ln1_g, ln1_b, LN_EPS);
        let qq = g.matmul(qn, w_q);
        let kk = g.matmul(memory, w_k);
        let vv = g.matmul(memory, w_v);
        let kt = g.transpose(kk);
        let logits = g.matmul(qq, kt);
        let logits = g.mul_scalar(logits, scale);
        let attn = g.row_softmax(logits);
        let pooled = g.matmul(attn, vv);
        q = g.add(q, pooled);

        let ln2_g = b.p(g, store, &format!("{p}.ln2_g"));
        let ln2_b = b.p(g, store, &format!("{p}.ln2_b"));
        let w1 = b.p(g, store, &format!("{p}.ffn_w1"));
        let b1 = b.p(g, store, &format!("{p}.ffn_b1"));
        let w2 = b.p(g, store, &format!("{p}.ffn_w2"));
        let b2 = b.p(g, store, &format!("{p}.ffn_b2"));
        let h = g.layer_norm(q, ln2_g, ln2_b, LN_EPS);
        let h = g.matmul(h, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let h = g.matmul(h, w2);
        let h = g.add_row(h, b2);
        q = g.add(q, h);
    }

    let seg_w = b.p(g, store, "dvchead.seg.w");
    let seg_b = b.p(g, store, "dvchead.seg.b");
    let seg = g.matmul(q, seg_w);
    let seg = g.add_row(seg, seg_b);
    let seg = g.sigmoid(seg);
    let centers = g.slice_cols(seg, 0, 1);
    let half_widths = g.slice_cols(seg, 1, 1);

    let conf_w = b.p(g, store, "dvchead.conf.w");
    let conf_b = b.p(g, store, "dvchead.conf.b");
    let cf = g.matmul(q, conf_w);
    let cf = g.add_row(cf, conf_b);
    let confidences = g.sigmoid(cf);

    let cnt_w = b.p(g, store, "dvchead.count.w");
    let cnt_b = b.p(g, store, "dvchead.count.b");
    let pooled = g.mean_rows(q);
    let cl = g.matmul(pooled, cnt_w);
    let count_logits = g.add_row(cl, cnt_b);

    DecodedQueries { queries: q, centers, half_widths, confidences, count_logits }
}

/// Class with the highest logit, mapped to a count in 1..=N_max; ties
/// resolve to the smaller count.
pub fn predicted_count(count_logits: &Array2<f64>) -> usize {
    let mut best = 0usize;
    for (j, &v) in count_logits.row(0).iter().enumerate() {
        if v > count_logits[[0, best]] {
            best = j;
        }
    }
    best + 1
}

fn greedy_caption(
    store: &ParamStore,
    query: &Array1<f64>,
    vocab_size: usize,
    t_cap: usize,
) -> (Array2<f64>, Vec<u32>) {
    let emb = store.get("dvchead.captioner.emb");
    let w_h = store.get("dvchead.captioner.w_h");
    let w_x = store.get("dvchead.captioner.w_x");
    let bias = store.get("dvchead.captioner.b");
    let w_out = store.get("dvchead.captioner.w_out");
    let b_out = store.get("dvchead.captioner.b_out");
    let v_model = vocab_size + 2;

    let mut h = query.clone();
    let mut tok = bos(vocab_size);
    let mut logits = Array2::zeros((t_cap, v_model));
    let mut raw = Vec::with_capacity(t_cap);
    for t in 0..t_cap {
        let e = emb.row(tok).to_owned();
        h = (h.dot(w_h) + e.dot(w_x) + &bias.row(0)).mapv(f64::tanh);
        let row = h.dot(w_out) + &b_out.row(0);
        logits.row_mut(t).assign(&row);
        // Greedy over dataset tokens plus the end sentinel; the start
        // sentinel is never a legal output. Ties pick the lower id.
        let mut best = 0usize;
        for j in 0..v_model {
            if j == bos(vocab_size) {
                continue;
            }
            if best == bos(vocab_size) || row[j] > row[best] {
                best = j;
            }
        }
        raw.push(best);
        tok = best;
    }
    let mut tokens = Vec::new();
    for &t in &raw {
        if t == eos(vocab_size) {
            break;
        }
        tokens.push(t as u32);
    }
    (logits, tokens)
}

/// Materializes plain predictions from decoder nodes: segments,
/// confidences, greedy captions, and the count-head decision.
pub fn finish_predictions(
    g: &Graph,
    store: &ParamStore,
    dq: &DecodedQueries,
    cfg: &DvcConfig,
    vocab_size: usize,
) -> (Vec<EventPrediction>, usize) {
    let queries = g.value(dq.queries);
    let centers = g.value(dq.centers);
    let half_widths = g.value(dq.half_widths);
    let confidences = g.value(dq.confidences);
    let mut preds = Vec::with_capacity(queries.nrows());
    for i in 0..queries.nrows() {
        let (caption_logits, decoded_tokens) =
            greedy_caption(store, &queries.row(i).to_owned(), vocab_size, cfg.t_cap);
        preds.push(EventPrediction {
            center: centers[[i, 0]],
            half_width: half_widths[[i, 0]],
            confidence: confidences[[i, 0]],
            caption_logits,
            decoded_tokens,
        });
    }
    let count = predicted_count(g.value(dq.count_logits));
    (preds, count)
}

/// Full decode: graph forward plus plain materialization.
pub fn decode(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    stack: &CascadeNodes,
    cfg: &DvcConfig,
    vocab_size: usize,
) -> (Vec<EventPrediction>, usize) {
    let dq = decode_graph(g, b, store, stack, cfg);
    finish_predictions(g, store, &dq, cfg, vocab_size)
}

/// Ground-truth event rescaled to the unit interval.
#[derive(Clone, Debug)]
pub struct NormalizedEvent {
    pub center: f64,
    pub half_width: f64,
    pub tokens: Vec<u32>,
}

pub fn normalize_events(events: &[EventAnnotation], duration_s: f64) -> Vec<NormalizedEvent> {
    assert!(duration_s > 0.0);
    events
        .iter()
        .map(|e| {
            let s = e.t_start.clamp(0.0, duration_s) / duration_s;
            let t = e.t_end.clamp(0.0, duration_s) / duration_s;
            NormalizedEvent { center: (s + t) / 2.0, half_width: (t - s) / 2.0, tokens: e.tokens.clone() }
        })
        .collect()
}

/// Intersection over union of two closed intervals.
pub fn interval_iou(s1: f64, e1: f64, s2: f64, e2: f64) -> f64 {
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = (e1 - s1) + (e2 - s2) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn pair_cost(center: f64, half_width: f64, confidence: f64, gt: &NormalizedEvent, w: &DvcWeights) -> f64 {
    let iou = interval_iou(
        center - half_width,
        center + half_width,
        gt.center - gt.half_width,
        gt.center + gt.half_width,
    );
    w.w_iou * (1.0 - iou)
        + w.w_l1 * ((center - gt.center).abs() + (half_width - gt.half_width).abs())
        + w.w_conf * (1.0 - confidence)
}

/// Minimum-cost injective assignment of every row to a distinct column;
/// requires rows <= columns. Returns (row, column) pairs and the total.
pub fn hungarian_assign(cost: &Array2<f64>) -> (Vec<(usize, usize)>, f64) {
    let (n, m) = cost.dim();
    assert!(n <= m, "assignment needs at least as many columns as rows");
    // A NaN cost would stall the augmenting search forever.
    assert!(cost.iter().all(|c| c.is_finite()), "matching costs must be finite");
    // Potentials formulation, 1-based with a virtual row/column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    for j in 1..=m {
        if p[j] != 0 {
            pairs.push((p[j] - 1, j - 1));
        }
    }
    pairs.sort_unstable();
    // Total accumulates in row order so replaying the pairs reproduces
    // it bit for bit.
    let total = pairs.iter().map(|&(r, c)| cost[[r, c]]).sum();
    (pairs, total)
}

/// Exhaustive minimum over all injective row-to-column maps. Reference
/// implementation for small instances (columns <= 8).
pub fn brute_force_min_cost(cost: &Array2<f64>) -> f64 {
    let (n, m) = cost.dim();
    assert!(n <= m && m <= 8, "exhaustive search is for small instances");
    fn rec(cost: &Array2<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for col in 0..cost.ncols() {
            if !used[col] {
                used[col] = true;
                rec(cost, row + 1, used, acc + cost[[row, col]], best);
                used[col] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

/// Optimal matching of predictions to ground truths under the
/// segment/confidence cost.
pub fn hungarian_match(
    preds: &[EventPrediction],
    gts: &[NormalizedEvent],
    w: &DvcWeights,
) -> Result<MatchResult, DvcError> {
    if gts.len() > preds.len() {
        return Err(DvcError::TooManyEvents { n_q: preds.len(), t_prime: gts.len() });
    }
    let cost = Array2::from_shape_fn((gts.len(), preds.len()), |(i, j)| {
        pair_cost(preds[j].center, preds[j].half_width, preds[j].confidence, &gts[i], w)
    });
    let (pairs, total_cost) = hungarian_assign(&cost);
    let assignment = pairs.into_iter().map(|(gt, q)| (q, gt)).collect();
    Ok(MatchResult { assignment, total_cost })
}

/// Task loss terms, each already multiplied by its weight so the
/// breakdown sums to `total`.
pub struct TaskLossBreakdown {
    pub total: NodeId,
    pub l1: NodeId,
    pub iou: NodeId,
    pub conf: NodeId,
    pub cap: NodeId,
    pub cnt: NodeId,
    pub match_result: MatchResult,
}

fn caption_nll_sum(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    query_row: NodeId,
    tokens: &[u32],
    vocab_size: usize,
    t_cap: usize,
) -> (Vec<NodeId>, usize) {
    let emb = b.p(g, store, "dvchead.captioner.emb");
    let w_h = b.p(g, store, "dvchead.captioner.w_h");
    let w_x = b.p(g, store, "dvchead.captioner.w_x");
    let bias = b.p(g, store, "dvchead.captioner.b");
    let w_out = b.p(g, store, "dvchead.captioner.w_out");
    let b_out = b.p(g, store, "dvchead.captioner.b_out");

    let mut targets: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    targets.push(eos(vocab_size));
    targets.truncate(t_cap);

    let mut h = query_row;
    let mut picks = Vec::with_capacity(targets.len());
    for (t, &target) in targets.iter().enumerate() {
        let in_tok = if t == 0 { bos(vocab_size) } else { targets[t - 1] };
        let e = g.gather_rows(emb, &[in_tok]);
        let hh = g.matmul(h, w_h);
        let xx = g.matmul(e, w_x);
        let pre = g.add(hh, xx);
        let pre = g.add(pre, bias);
        h = g.tanh(pre);
        let logits = g.matmul(h, w_out);
        let logits = g.add(logits, b_out);
        let logp = g.row_log_softmax(logits);
        picks.push(g.slice_cols(logp, target, 1));
    }
    let n = picks.len();
    (picks, n)
}

/// Matches predictions to ground truth on detached values, then builds
/// the weighted loss terms on the tape.
pub fn task_loss(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    dq: &DecodedQueries,
    gts: &[NormalizedEvent],
    w: &DvcWeights,
    cfg: &DvcConfig,
    vocab_size: usize,
) -> Result<TaskLossBreakdown, DvcError> {
    let n_q = g.value(dq.centers).nrows();
    assert!(!gts.is_empty(), "task loss needs at least one annotated event");
    if gts.len() > n_q {
        return Err(DvcError::TooManyEvents { n_q, t_prime: gts.len() });
    }

    let centers = g.value(dq.centers).clone();
    let half_widths = g.value(dq.half_widths).clone();
    let confidences = g.value(dq.confidences).clone();
    let cost = Array2::from_shape_fn((gts.len(), n_q), |(i, j)| {
        pair_cost(centers[[j, 0]], half_widths[[j, 0]], confidences[[j, 0]], &gts[i], w)
    });
    let (pairs, total_cost) = hungarian_assign(&cost);
    let assignment: Vec<(usize, usize)> = pairs.iter().map(|&(gt, q)| (q, gt)).collect();
    let match_result = MatchResult { assignment: assignment.clone(), total_cost };

    let q_idx: Vec<usize> = assignment.iter().map(|&(q, _)| q).collect();
    let k = q_idx.len();
    let gt_c = Array2::from_shape_fn((k, 1), |(i, _)| gts[assignment[i].1].center);
    let gt_h = Array2::from_shape_fn((k, 1), |(i, _)| gts[assignment[i].1].half_width);

    let mc = g.gather_rows(dq.centers, &q_idx);
    let mh = g.gather_rows(dq.half_widths, &q_idx);
    let gt_c_n = g.constant(gt_c);
    let gt_h_n = g.constant(gt_h);

    // L1 over matched segment parameters.
    let dc = g.sub(mc, gt_c_n);
    let dc = g.abs(dc);
    let dh = g.sub(mh, gt_h_n);
    let dh = g.abs(dh);
    let l1_vec = g.add(dc, dh);
    let l1_raw = g.mean_all(l1_vec);

    // 1 - tIoU over matched segments.
    let s1 = g.sub(mc, mh);
    let e1 = g.add(mc, mh);
    let s2 = g.sub(gt_c_n, gt_h_n);
    let e2 = g.add(gt_c_n, gt_h_n);
    let max_s = g.max_pair(s1, s2);
    let min_e = g.min_pair(e1, e2);
    let inter_raw = g.sub(min_e, max_s);
    let inter = g.relu(inter_raw);
    let len1 = g.mul_scalar(mh, 2.0);
    let len2 = g.mul_scalar(gt_h_n, 2.0);
    let lens = g.add(len1, len2);
    let union = g.sub(lens, inter);
    let ratio = g.div(inter, union);
    let neg = g.mul_scalar(ratio, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let iou_raw = g.mean_all(one_minus);

    // Confidence targets: matched queries 1, the rest 0.
    let mut y = Array2::zeros((n_q, 1));
    for &(q, _) in &assignment {
        y[[q, 0]] = 1.0;
    }
    let y_n = g.constant(y.clone());
    let y_inv = g.constant(1.0 - &y);
    let p_eps = g.add_scalar(dq.confidences, BCE_EPS);
    let ln_p = g.ln(p_eps);
    let p_neg = g.mul_scalar(dq.confidences, -1.0);
    let p_flip = g.add_scalar(p_neg, 1.0 + BCE_EPS);
    let ln_q = g.ln(p_flip);
    let pos = g.mul(y_n, ln_p);
    let negt = g.mul(y_inv, ln_q);
    let bce_sum = g.add(pos, negt);
    let bce_mean = g.mean_all(bce_sum);
    let conf_raw = g.mul_scalar(bce_mean, -1.0);

    // Teacher-forced caption likelihood over all matched tokens.
    let mut cap_picks = Vec::new();
    let mut cap_tokens = 0usize;
    for &(q, gt) in &assignment {
        let row = g.slice_rows(dq.queries, q, 1);
        let (picks, n) = caption_nll_sum(g, b, store, row, &gts[gt].tokens, vocab_size, cfg.t_cap);
        cap_picks.extend(picks);
        cap_tokens += n;
    }
    let mut cap_acc = g.scalar_constant(0.0);
    for p in cap_picks {
        cap_acc = g.add(cap_acc, p);
    }
    let cap_raw = g.mul_scalar(cap_acc, -1.0 / cap_tokens.max(1) as f64);

    // Count classification toward clamp(T', 1, N_max).
    let n_max = g.value(dq.count_logits).ncols();
    let target_class = gts.len().clamp(1, n_max) - 1;
    let logp = g.row_log_softmax(dq.count_logits);
    let pick = g.slice_cols(logp, target_class, 1);
    let cnt_raw = g.mul_scalar(pick, -1.0);

    let l1 = g.mul_scalar(l1_raw, w.w_l1);
    let iou = g.mul_scalar(iou_raw, w.w_iou);
    let conf = g.mul_scalar(conf_raw, w.w_conf);
    let cap = g.mul_scalar(cap_raw, w.w_cap);
    let cnt = g.mul_scalar(cnt_raw, w.w_cnt);
    let mut total = g.add(l1, iou);
    total = g.add(total, conf);
    total = g.add(total, cap);
    total = g.add(total, cnt);

    Ok(TaskLossBreakdown { total, l1, iou, conf, cap, cnt, match_result })
}

/// One selected event in seconds, ready for the prediction file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictedEvent {
    pub t_start: f64,
    pub t_end: f64,
    pub tokens: Vec<u32>,
    pub caption: String,
    pub confidence: f64,
}

/// Per-clip prediction record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionFile {
    pub pair_index: usize,
    pub events: Vec<PredictedEvent>,
}

/// Keeps the `count` most confident queries (ties to the lower query
/// index), denormalizes to seconds, and sorts by start time.
pub fn select_events(
    preds: &[EventPrediction],
    count: usize,
    duration_s: f64,
    vocab: &[String],
) -> Vec<PredictedEvent> {
    assert!(count >= 1, "selection needs a positive count");
    let take = count.min(preds.len());
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .expect("confidences are finite")
            .then(a.cmp(&b))
    });
    let mut events: Vec<PredictedEvent> = order[..take]
        .iter()
        .map(|&i| {
            let p = &preds[i];
            let t_start = ((p.center - p.half_width) * duration_s).clamp(0.0, duration_s);
            let t_end = ((p.center + p.half_width) * duration_s).clamp(0.0, duration_s);
            let caption = p
                .decoded_tokens
                .iter()
                .map(|&t| vocab[t as usize].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            PredictedEvent { t_start, t_end, tokens: p.decoded_tokens.clone(), caption, confidence: p.confidence }
        })
        .collect();
    events.sort_by(|a, b| {
        a.t_start
            .partial_cmp(&b.t_start)
            .expect("times are finite")
            .then(a.t_end.partial_cmp(&b.t_end).expect("times are finite"))
    });
    events
}
