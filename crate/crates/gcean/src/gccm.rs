//! Gaze-guided calibration cascade: four blocks that each downsample the
//! frame and gaze streams in time (kernel 3, stride 2, same padding),
//! cross-attend frames onto gaze (queries from frames, keys and values
//! from gaze), and add the attention output back onto the downsampled
//! frame stream. The gaze stream passes to the next block without an
//! attention update. Per level the block records the row-normalized
//! attention maps and the temporal-mean prototype of the frame stream;
//! the two consistency losses compare those across views.
//!
//! Attention maps are compared with a symmetric KL on the normalized
//! (pre-scale) maps, since only those rows are probability
//! distributions. Logits carry a 1/sqrt(d_head) temperature; the
//! learnable per-block scale multiplies the softmax output afterward.

use crate::autodiff::{Graph, NodeId};
use crate::params::{xavier, Binder, ParamStore};
use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

pub const LEVELS: usize = 4;
/// Floor added inside KL logarithms; softmax rows can underflow.
pub const KL_EPS: f64 = 1e-8;
/// Shortest sequence four ceil-halvings keep at length >= 1 with room
/// for non-degenerate attention at the top level.
pub const MIN_CASCADE_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum GccmError {
    #[error("frame stream has {left} rows but gaze stream has {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("cascade needs at least {MIN_CASCADE_LEN} rows, got {len}")]
    TooShort { len: usize },
}

/// Registers the four calibration blocks for feature dimension `c`.
pub fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R, c: usize) {
    for block in 1..=LEVELS {
        let p = format!("gccm.block{block}");
        store.insert(&format!("{p}.theta_V.w"), xavier(rng, 3 * c, c));
        store.insert(&format!("{p}.theta_V.b"), Array2::zeros((1, c)));
        store.insert(&format!("{p}.theta_G.w"), xavier(rng, 3 * c, c));
        store.insert(&format!("{p}.theta_G.b"), Array2::zeros((1, c)));
        store.insert(&format!("{p}.W_q"), xavier(rng, c, c));
        store.insert(&format!("{p}.W_k"), xavier(rng, c, c));
        store.insert(&format!("{p}.W_v"), xavier(rng, c, c));
        store.insert(&format!("{p}.sigma_S"), Array2::from_elem((1, 1), 1.0));
    }
}

pub struct GcmOutput {
    pub m_v: NodeId,
    pub m_g: NodeId,
    /// One row-stochastic map per head.
    pub a_norm: Vec<NodeId>,
    /// The same maps multiplied by the learnable scale.
    pub a_scaled: Vec<NodeId>,
}

fn downsample(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let w = b.p(g, store, &format!("{prefix}.w"));
    let bias = b.p(g, store, &format!("{prefix}.b"));
    let u = g.unfold_time(x, 3, 2);
    let h = g.matmul(u, w);
    let h = g.add_row(h, bias);
    g.gelu(h)
}

/// One calibration block. Both streams shrink to ceil(L/2) rows.
pub fn gcm_forward(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    block: usize,
    m_v: NodeId,
    m_g: NodeId,
    n_heads: usize,
) -> Result<GcmOutput, GccmError> {
    let (l_v, c) = g.value(m_v).dim();
    let (l_g, c_g) = g.value(m_g).dim();
    if l_v != l_g {
        return Err(GccmError::LengthMismatch { left: l_v, right: l_g });
    }
    assert_eq!(c, c_g, "stream feature dimensions must match");
    assert_eq!(c % n_heads, 0, "head count must divide feature dimension");
    let d_head = c / n_heads;
    let p = format!("gccm.block{block}");

    let mv_bar = downsample(g, b, store, &format!("{p}.theta_V"), m_v);
    let mg_bar = downsample(g, b, store, &format!("{p}.theta_G"), m_g);

    let w_q = b.p(g, store, &format!("{p}.W_q"));
    let w_k = b.p(g, store, &format!("{p}.W_k"));
    let w_v = b.p(g, store, &format!("{p}.W_v"));
    let sigma = b.p(g, store, &format!("{p}.sigma_S"));
    let q = g.matmul(mv_bar, w_q);
    let k = g.matmul(mg_bar, w_k);
    let v = g.matmul(mg_bar, w_v);

    let mut a_norm = Vec::with_capacity(n_heads);
    let mut a_scaled = Vec::with_capacity(n_heads);
    let mut head_outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * d_head, d_head);
        let kh = g.slice_cols(k, h * d_head, d_head);
        let vh = g.slice_cols(v, h * d_head, d_head);
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt);
        let logits = g.mul_scalar(logits, 1.0 / (d_head as f64).sqrt());
        let an = g.row_softmax(logits);
        let asc = g.scale_by(an, sigma);
        let oh = g.matmul(asc, vh);
        a_norm.push(an);
        a_scaled.push(asc);
        head_outs.push(oh);
    }
    let attn_out = g.concat_cols(&head_outs);
    let m_v_next = g.add(attn_out, mv_bar);
    Ok(GcmOutput { m_v: m_v_next, m_g: mg_bar, a_norm, a_scaled })
}

pub struct LevelNodes {
    pub m_v: NodeId,
    pub m_g: NodeId,
    pub a_norm: Vec<NodeId>,
    pub a_scaled: Vec<NodeId>,
    /// Temporal mean of this level's frame stream, 1 x C.
    pub prototype: NodeId,
}

pub struct CascadeNodes {
    pub levels: Vec<LevelNodes>,
}

/// Runs the four blocks, threading both streams, and records the
/// per-level attention maps and prototypes.
pub fn cascade(
    g: &mut Graph,
    b: &mut Binder,
    store: &ParamStore,
    conv_frames: NodeId,
    conv_gaze: NodeId,
    n_heads: usize,
) -> Result<CascadeNodes, GccmError> {
    let (l_v, _) = g.value(conv_frames).dim();
    let (l_g, _) = g.value(conv_gaze).dim();
    if l_v != l_g {
        return Err(GccmError::LengthMismatch { left: l_v, right: l_g });
    }
    if l_v < MIN_CASCADE_LEN {
        return Err(GccmError::TooShort { len: l_v });
    }
    let mut m_v = conv_frames;
    let mut m_g = conv_gaze;
    let mut levels = Vec::with_capacity(LEVELS);
    for block in 1..=LEVELS {
        let out = gcm_forward(g, b, store, block, m_v, m_g, n_heads)?;
        m_v = out.m_v;
        m_g = out.m_g;
        let prototype = g.mean_rows(out.m_v);
        levels.push(LevelNodes {
            m_v: out.m_v,
            m_g: out.m_g,
            a_norm: out.a_norm,
            a_scaled: out.a_scaled,
            prototype,
        });
    }
    Ok(CascadeNodes { levels })
}

/// Symmetric KL between corresponding normalized attention rows, summed
/// over levels, averaged over heads and query positions within a level.
pub fn attention_consistency_loss(
    g: &mut Graph,
    stack_s: &CascadeNodes,
    stack_t: &CascadeNodes,
) -> NodeId {
    assert_eq!(stack_s.levels.len(), stack_t.levels.len());
    let mut total: Option<NodeId> = None;
    for (ls, lt) in stack_s.levels.iter().zip(&stack_t.levels) {
        assert_eq!(ls.a_norm.len(), lt.a_norm.len());
        let n_heads = ls.a_norm.len();
        let l_i = g.value(ls.a_norm[0]).nrows();
        let mut level_sum: Option<NodeId> = None;
        for (&pa, &qa) in ls.a_norm.iter().zip(&lt.a_norm) {
            assert_eq!(g.value(pa).dim(), g.value(qa).dim());
            let p_eps = g.add_scalar(pa, KL_EPS);
            let q_eps = g.add_scalar(qa, KL_EPS);
            let ln_p = g.ln(p_eps);
            let ln_q = g.ln(q_eps);
            let diff = g.sub(ln_p, ln_q);
            let fwd = g.mul(pa, diff);
            let neg = g.mul(qa, diff);
            let fwd_sum = g.sum_all(fwd);
            let neg_sum = g.sum_all(neg);
            let pair = g.sub(fwd_sum, neg_sum);
            level_sum = Some(match level_sum {
                Some(acc) => g.add(acc, pair),
                None => pair,
            });
        }
        let scaled = g.mul_scalar(level_sum.unwrap(), 1.0 / (n_heads as f64 * l_i as f64));
        total = Some(match total {
            Some(acc) => g.add(acc, scaled),
            None => scaled,
        });
    }
    total.expect("stacks must have at least one level")
}

/// Sum over levels of the MSE between the two views' prototypes.
pub fn prototype_consistency_loss(
    g: &mut Graph,
    stack_s: &CascadeNodes,
    stack_t: &CascadeNodes,
) -> NodeId {
    assert_eq!(stack_s.levels.len(), stack_t.levels.len());
    let mut total: Option<NodeId> = None;
    for (ls, lt) in stack_s.levels.iter().zip(&stack_t.levels) {
        assert_eq!(g.value(ls.prototype).dim(), g.value(lt.prototype).dim());
        let d = g.sub(ls.prototype, lt.prototype);
        let sq = g.mul(d, d);
        let mse = g.mean_all(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, mse),
            None => mse,
        });
    }
    total.expect("stacks must have at least one level")
}

/// Mean over rows of the Shannon entropy of a row-stochastic matrix.
pub fn mean_row_entropy(a: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for row in a.rows() {
        let mut h = 0.0;
        for &p in row {
            h -= p * (p + KL_EPS).ln();
        }
        total += h;
    }
    total / a.nrows() as f64
}
