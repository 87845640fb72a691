//! Score-based adversarial alignment: two branches (frame, gaze), each a
//! feature converter plus a per-position scoring network behind the
//! gradient-reversal boundary, a gaze predictor, and the branch losses.
//!
//! The converter starts as an exact identity (its final layer is
//! zero-initialized on a residual path), so representation drift away
//! from the raw features is entirely learned. The scoring network is
//! trained to rank source positions above target positions by a margin;
//! the reversal boundary feeds the converter the negated gradient, which
//! is what pushes the two views toward indistinguishable representations.

use crate::autodiff::{Graph, NodeId};
use crate::params::{xavier, Binder, ParamStore};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Branch {
    Frame,
    Gaze,
}

impl Branch {
    fn key(self) -> &'static str {
        match self {
            Branch::Frame => "frame",
            Branch::Gaze => "gaze",
        }
    }
}

/// Loss weights and margin for both branches.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SalmWeights {
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub lambda_g_gaze: f64,
    pub lambda_s_gaze: f64,
    pub lambda_pg_s: f64,
    pub lambda_pg_t: f64,
    pub sigma_m: f64,
}

impl Default for SalmWeights {
    fn default() -> Self {
        SalmWeights {
            lambda_g: 5.0,
            lambda_s: 0.25,
            lambda_g_gaze: 5.0,
            lambda_s_gaze: 0.25,
            lambda_pg_s: 1.0,
            lambda_pg_t: 1.0,
            sigma_m: 0.75,
        }
    }
}

const LN_EPS: f64 = 1e-5;

/// Registers converter, scorer, and gaze-predictor weights for feature
/// dimension `c`.
pub fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R, c: usize) {
    for branch in ["frame", "gaze"] {
        let p = format!("salm.converter.{branch}");
        store.insert(&format!("{p}.ln_g"), Array2::from_elem((1, c), 1.0));
        store.insert(&format!("{p}.ln_b"), Array2::zeros((1, c)));
        store.insert(&format!("{p}.w1"), xavier(rng, c, c));
        store.insert(&format!("{p}.b1"), Array2::zeros((1, c)));
        // Zero final layer + residual: the converter starts as identity.
        store.insert(&format!("{p}.w2"), Array2::zeros((c, c)));
        store.insert(&format!("{p}.b2"), Array2::zeros((1, c)));

        let hidden = (c / 2).max(1);
        let s = format!("salm.scorer.{branch}");
        store.insert(&format!("{s}.w1"), xavier(rng, c, hidden));
        store.insert(&format!("{s}.b1"), Array2::zeros((1, hidden)));
        store.insert(&format!("{s}.w2"), xavier(rng, hidden, 1));
        store.insert(&format!("{s}.b2"), Array2::zeros((1, 1)));
    }
    store.insert("salm.gaze_predictor.w1", xavier(rng, c, c));
    store.insert("salm.gaze_predictor.b1", Array2::zeros((1, c)));
    store.insert("salm.gaze_predictor.w2", xavier(rng, c, c));
    store.insert("salm.gaze_predictor.b2", Array2::zeros((1, c)));
}

/// Converter: x + W2·gelu(W1·layernorm(x) + b1) + b2, per position.
pub fn convert(g: &mut Graph, b: &mut Binder, store: &ParamStore, branch: Branch, x: NodeId) -> NodeId {
    let p = format!("salm.converter.{}", branch.key());
    let ln_g = b.p(g, store, &format!("{p}.ln_g"));
    let ln_b = b.p(g, store, &format!("{p}.ln_b"));
    let w1 = b.p(g, store, &format!("{p}.w1"));
    let b1 = b.p(g, store, &format!("{p}.b1"));
    let w2 = b.p(g, store, &format!("{p}.w2"));
    let b2 = b.p(g, store, &format!("{p}.b2"));
    let n = g.layer_norm(x, ln_g, ln_b, LN_EPS);
    let h = g.matmul(n, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    let h = g.add_row(h, b2);
    g.add(x, h)
}

/// Per-position view score in [0, 1]; `reversed` inserts the
/// gradient-reversal boundary between input and network.
pub fn score(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    branch: Branch,
    converted: NodeId,
    reversed: bool,
) -> NodeId {
    let s = format!("salm.scorer.{}", branch.key());
    let w1 = b.p(g, store, &format!("{s}.w1"));
    let b1 = b.p(g, store, &format!("{s}.b1"));
    let w2 = b.p(g, store, &format!("{s}.w2"));
    let b2 = b.p(g, store, &format!("{s}.b2"));
    let input = if reversed { g.grl(converted) } else { converted };
    let h = g.matmul(input, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    let h = g.add_row(h, b2);
    g.sigmoid(h)
}

/// Gaze estimate from raw frame features, same shape.
pub fn predict_gaze(g: &mut Graph, b: &mut Binder, store: &ParamStore, frames: NodeId) -> NodeId {
    let w1 = b.p(g, store, "salm.gaze_predictor.w1");
    let b1 = b.p(g, store, "salm.gaze_predictor.b1");
    let w2 = b.p(g, store, "salm.gaze_predictor.w2");
    let b2 = b.p(g, store, "salm.gaze_predictor.b2");
    let h = g.matmul(frames, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    g.add_row(h, b2)
}

/// (1/L)·Σ max(0, −(c_i^S − c_i^T) + σ_m) over per-position scores.
pub fn margin_ranking_loss(g: &mut Graph, scores_s: NodeId, scores_t: NodeId, sigma_m: f64) -> NodeId {
    assert_eq!(
        g.value(scores_s).dim(),
        g.value(scores_t).dim(),
        "score vectors must share length"
    );
    let diff = g.sub(scores_t, scores_s);
    let shifted = g.add_scalar(diff, sigma_m);
    let hinge = g.relu(shifted);
    g.mean_all(hinge)
}

/// MSE between the temporal means of two converted sequences.
pub fn global_alignment_loss(g: &mut Graph, conv_s: NodeId, conv_t: NodeId) -> NodeId {
    assert_eq!(g.value(conv_s).ncols(), g.value(conv_t).ncols());
    let ms = g.mean_rows(conv_s);
    let mt = g.mean_rows(conv_t);
    let d = g.sub(ms, mt);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Mean squared error over all L·C elements.
pub fn l2_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> NodeId {
    assert_eq!(g.value(pred).dim(), g.value(target).dim());
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// The six per-pair loss terms, as graph nodes.
pub struct SalmTerms {
    pub l_s: NodeId,
    pub l_g: NodeId,
    pub l_s_gaze: NodeId,
    pub l_g_gaze: NodeId,
    pub l_pg_s: NodeId,
    pub l_pg_t: NodeId,
}

/// Weighted sum of the branch losses. The adversarial terms enter with
/// positive weight; the converter-side negation is supplied by the
/// reversal boundary inside `score`, not by a sign here.
pub fn salm_total(g: &mut Graph, terms: &SalmTerms, w: &SalmWeights) -> NodeId {
    let mut total = g.mul_scalar(terms.l_g, w.lambda_g);
    for (node, weight) in [
        (terms.l_s, w.lambda_s),
        (terms.l_g_gaze, w.lambda_g_gaze),
        (terms.l_s_gaze, w.lambda_s_gaze),
        (terms.l_pg_s, w.lambda_pg_s),
        (terms.l_pg_t, w.lambda_pg_t),
    ] {
        let scaled = g.mul_scalar(node, weight);
        total = g.add(total, scaled);
    }
    total
}

/// One-off converter evaluation outside a training graph.
pub fn convert_plain(store: &ParamStore, branch: Branch, x: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::new();
    let mut b = Binder::new();
    let xn = g.constant(x.clone());
    let out = convert(&mut g, &mut b, store, branch, xn);
    g.value(out).clone()
}

/// One-off gaze prediction outside a training graph.
pub fn predict_gaze_plain(store: &ParamStore, frames: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::new();
    let mut b = Binder::new();
    let xn = g.constant(frames.clone());
    let out = predict_gaze(&mut g, &mut b, store, xn);
    g.value(out).clone()
}
