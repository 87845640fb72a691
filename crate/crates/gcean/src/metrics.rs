//! Captioning evaluation: temporal IoU, sentence/corpus BLEU-4, CIDEr
//! with the clipped TF-IDF numerator and Gaussian length penalty,
//! threshold-averaged caption scores over matched segments, and the
//! order-preserving event matching with its F-measure.
//!
//! Everything here is a pure function of its inputs; token sequences
//! are compared as opaque ids, so any consistent relabeling of the
//! vocabulary leaves every score unchanged.

use crate::data::EventAnnotation;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const TIOU_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
const CIDER_SIGMA: f64 = 6.0;
const NGRAM_MAX: usize = 4;

/// Marker stored in reports: every slot that a METEOR implementation
/// would fill is scored with sentence BLEU-4 instead.
pub const METEOR_SUBSTITUTION: &str = "replaced_by_bleu4";
/// Marker for the threshold-matching protocol in use.
pub const MATCHING_PROTOCOL: &str = "per-prediction best-tiou, ground truths reusable";

/// Intersection over union of two segments; 0 when disjoint.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    assert!(a.1 >= a.0 && b.1 >= b.0, "segments must not be reversed");
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn ngram_counts(tokens: &[u32], n: usize) -> BTreeMap<&[u32], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Geometric mean of modified n-gram precisions (n = 1..4) with the
/// brevity penalty. `smoothed` applies add-one smoothing to precisions
/// whose clipped count is zero (sentence mode); without it any zero
/// precision zeroes the score (corpus mode). An empty candidate scores
/// zero.
pub fn bleu4(candidate: &[u32], references: &[Vec<u32>], smoothed: bool) -> f64 {
    assert!(!references.is_empty(), "BLEU needs at least one reference");
    assert!(references.iter().all(|r| !r.is_empty()), "references must be non-empty");
    if candidate.is_empty() {
        return 0.0;
    }
    let c_len = candidate.len();
    let r_len = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| ((rl as i64 - c_len as i64).abs(), rl))
        .unwrap();
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };

    let mut log_sum = 0.0;
    for n in 1..=NGRAM_MAX {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        let mut clipped = 0usize;
        for (gram, &count) in &cand {
            let best_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(best_ref);
        }
        let p = if clipped > 0 {
            clipped as f64 / total as f64
        } else if smoothed {
            1.0 / (total as f64 + 1.0)
        } else {
            return 0.0;
        };
        log_sum += p.ln();
    }
    bp * (log_sum / NGRAM_MAX as f64).exp()
}

/// Document frequencies over a reference corpus; one document per clip.
#[derive(Clone, Debug)]
pub struct CiderDf {
    n_docs: usize,
    df: BTreeMap<Vec<u32>, f64>,
}

pub fn cider_df(docs: &[Vec<Vec<u32>>]) -> CiderDf {
    assert!(!docs.is_empty(), "document-frequency corpus must be non-empty");
    let mut df = BTreeMap::new();
    for doc in docs {
        let mut seen = BTreeSet::new();
        for r in doc {
            for n in 1..=NGRAM_MAX {
                for w in r.windows(n) {
                    seen.insert(w.to_vec());
                }
            }
        }
        for gram in seen {
            *df.entry(gram).or_insert(0.0) += 1.0;
        }
    }
    CiderDf { n_docs: docs.len(), df }
}

type TfIdfVecs = [BTreeMap<Vec<u32>, f64>; NGRAM_MAX];

fn tfidf_vectors(tokens: &[u32], df: &CiderDf) -> (TfIdfVecs, [f64; NGRAM_MAX]) {
    let log_n = (df.n_docs as f64).ln();
    let mut vecs: TfIdfVecs = Default::default();
    for (n, vec_n) in vecs.iter_mut().enumerate() {
        if tokens.len() >= n + 1 {
            for w in tokens.windows(n + 1) {
                *vec_n.entry(w.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        for (gram, tf) in vec_n.iter_mut() {
            let d = df.df.get(gram).copied().unwrap_or(0.0);
            *tf *= log_n - d.max(1.0).ln();
        }
    }
    let mut norms = [0.0; NGRAM_MAX];
    for n in 0..NGRAM_MAX {
        norms[n] = vecs[n].values().map(|v| v * v).sum::<f64>().sqrt();
    }
    (vecs, norms)
}

/// TF-IDF n-gram cosine with the clipped numerator and the Gaussian
/// length penalty, averaged over n = 1..4 and over references, scaled
/// by 10.
pub fn cider_d(candidate: &[u32], references: &[Vec<u32>], df: &CiderDf) -> f64 {
    assert!(!references.is_empty(), "CIDEr needs at least one reference");
    let (cv, cn) = tfidf_vectors(candidate, df);
    let mut acc = 0.0;
    for r in references {
        let (rv, rn) = tfidf_vectors(r, df);
        let delta = candidate.len() as f64 - r.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        for n in 0..NGRAM_MAX {
            let mut val = 0.0;
            for (gram, &hv) in &cv[n] {
                if let Some(&rvv) = rv[n].get(gram) {
                    val += hv.min(rvv) * rvv;
                }
            }
            if cn[n] > 0.0 && rn[n] > 0.0 {
                val /= cn[n] * rn[n];
            }
            acc += val * penalty;
        }
    }
    acc / NGRAM_MAX as f64 / references.len() as f64 * 10.0
}

/// Scores at one tIoU threshold.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub threshold: f64,
    pub b4: f64,
    pub cider: f64,
}

#[derive(Clone, Debug)]
pub struct DvcEvalScores {
    pub b4: f64,
    pub cider: f64,
    pub per_threshold: Vec<ThresholdScores>,
}

/// For each threshold: every prediction is scored against its
/// best-tIoU ground truth if that tIoU clears the threshold, zero
/// otherwise; per-threshold means over predictions are then averaged
/// over thresholds. Ground truths may serve several predictions.
pub fn dvc_eval(preds: &[EventAnnotation], gts: &[EventAnnotation], df: &CiderDf) -> DvcEvalScores {
    assert!(!gts.is_empty(), "evaluation needs ground-truth events");
    let mut per_threshold = Vec::with_capacity(TIOU_THRESHOLDS.len());
    for &thr in &TIOU_THRESHOLDS {
        let mut b4_sum = 0.0;
        let mut cider_sum = 0.0;
        for p in preds {
            let best = gts
                .iter()
                .map(|g| (tiou((p.t_start, p.t_end), (g.t_start, g.t_end)), g))
                .max_by(|a, b| a.0.partial_cmp(&b.0).expect("tiou is finite"))
                .expect("non-empty ground truth");
            if best.0 >= thr {
                let refs = vec![best.1.tokens.clone()];
                b4_sum += bleu4(&p.tokens, &refs, true);
                cider_sum += cider_d(&p.tokens, &refs, df);
            }
        }
        let denom = preds.len().max(1) as f64;
        per_threshold.push(ThresholdScores { threshold: thr, b4: b4_sum / denom, cider: cider_sum / denom });
    }
    let k = per_threshold.len() as f64;
    DvcEvalScores {
        b4: per_threshold.iter().map(|t| t.b4).sum::<f64>() / k,
        cider: per_threshold.iter().map(|t| t.cider).sum::<f64>() / k,
        per_threshold,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SodaResult {
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when either side arrived unsorted and was sorted here.
    pub resorted: bool,
}

fn is_sorted_by_start(events: &[EventAnnotation]) -> bool {
    events.windows(2).all(|w| w[0].t_start <= w[1].t_start)
}

/// Optimal order-preserving one-to-one matching maximizing
/// Σ tIoU(p, g)·scorer(p, g), reported as an F-measure: precision
/// divides by the prediction count, recall by the ground-truth count.
pub fn soda<F>(preds: &[EventAnnotation], gts: &[EventAnnotation], scorer: F) -> SodaResult
where
    F: Fn(&EventAnnotation, &EventAnnotation) -> f64,
{
    let mut p_sorted: Vec<&EventAnnotation> = preds.iter().collect();
    let mut g_sorted: Vec<&EventAnnotation> = gts.iter().collect();
    let resorted = !is_sorted_by_start(preds) || !is_sorted_by_start(gts);
    p_sorted.sort_by(|a, b| a.t_start.partial_cmp(&b.t_start).expect("times are finite"));
    g_sorted.sort_by(|a, b| a.t_start.partial_cmp(&b.t_start).expect("times are finite"));

    let (n, m) = (p_sorted.len(), g_sorted.len());
    let mut dp = vec![vec![0.0f64; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            let pair = tiou(
                (p_sorted[i - 1].t_start, p_sorted[i - 1].t_end),
                (g_sorted[j - 1].t_start, g_sorted[j - 1].t_end),
            ) * scorer(p_sorted[i - 1], g_sorted[j - 1]);
            dp[i][j] = dp[i - 1][j].max(dp[i][j - 1]).max(dp[i - 1][j - 1] + pair);
        }
    }
    let total = dp[n][m];
    let precision = if n == 0 { 0.0 } else { total / n as f64 };
    let recall = if m == 0 { 0.0 } else { total / m as f64 };
    let f_score = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    SodaResult { f_score, precision, recall, resorted }
}

/// One evaluated clip: selected predictions and reference events.
#[derive(Clone, Debug)]
pub struct SampleEval {
    pub preds: Vec<EventAnnotation>,
    pub gts: Vec<EventAnnotation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "dvc_B4")]
    pub dvc_b4: f64,
    #[serde(rename = "dvc_C")]
    pub dvc_c: f64,
    #[serde(rename = "SODA_C")]
    pub soda_c: f64,
    #[serde(rename = "SODA_tIoU")]
    pub soda_tiou: f64,
    pub per_threshold: Vec<ThresholdScores>,
    pub n_samples: usize,
    pub n_predictions: usize,
    pub n_references: usize,
    /// What fills METEOR-shaped slots.
    pub meteor: String,
    pub matching_protocol: String,
}

/// Scores every sample independently and averages the per-sample
/// results with equal weight; document frequencies come from all
/// ground-truth captions, one document per sample.
pub fn evaluate_dataset(samples: &[SampleEval]) -> EvalReport {
    assert!(!samples.is_empty(), "evaluation needs at least one sample");
    let docs: Vec<Vec<Vec<u32>>> =
        samples.iter().map(|s| s.gts.iter().map(|g| g.tokens.clone()).collect()).collect();
    let df = cider_df(&docs);

    let k = samples.len() as f64;
    let mut dvc_b4 = 0.0;
    let mut dvc_c = 0.0;
    let mut soda_c = 0.0;
    let mut soda_tiou = 0.0;
    let mut per_threshold: Vec<ThresholdScores> =
        TIOU_THRESHOLDS.iter().map(|&t| ThresholdScores { threshold: t, b4: 0.0, cider: 0.0 }).collect();
    let mut n_predictions = 0;
    let mut n_references = 0;
    for s in samples {
        let d = dvc_eval(&s.preds, &s.gts, &df);
        dvc_b4 += d.b4 / k;
        dvc_c += d.cider / k;
        for (agg, t) in per_threshold.iter_mut().zip(&d.per_threshold) {
            agg.b4 += t.b4 / k;
            agg.cider += t.cider / k;
        }
        soda_c += soda(&s.preds, &s.gts, |p, g| cider_d(&p.tokens, &[g.tokens.clone()], &df)).f_score / k;
        soda_tiou += soda(&s.preds, &s.gts, |_, _| 1.0).f_score / k;
        n_predictions += s.preds.len();
        n_references += s.gts.len();
    }
    EvalReport {
        dvc_b4,
        dvc_c,
        soda_c,
        soda_tiou,
        per_threshold,
        n_samples: samples.len(),
        n_predictions,
        n_references,
        meteor: METEOR_SUBSTITUTION.to_string(),
        matching_protocol: MATCHING_PROTOCOL.to_string(),
    }
}

impl EvalReport {
    /// Two-line CSV (header plus values) with the headline scores.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["dvc_B4".to_string(), "dvc_C".to_string(), "SODA_C".to_string(), "SODA_tIoU".to_string()];
        let mut row = vec![
            format!("{:.6}", self.dvc_b4),
            format!("{:.6}", self.dvc_c),
            format!("{:.6}", self.soda_c),
            format!("{:.6}", self.soda_tiou),
        ];
        for t in &self.per_threshold {
            header.push(format!("B4@{}", t.threshold));
            header.push(format!("C@{}", t.threshold));
            row.push(format!("{:.6}", t.b4));
            row.push(format!("{:.6}", t.cider));
        }
        header.push("meteor".to_string());
        row.push(self.meteor.clone());
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}
