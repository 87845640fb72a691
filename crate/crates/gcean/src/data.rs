//! Feature-file ingestion, temporal interpolation, gaze-crop geometry,
//! and paired-dataset assembly.
//!
//! Feature files are little-endian f32 with a fixed header; in memory
//! everything is f64. Target-view annotations are quarantined behind
//! [`EvalOnly`], which panics if read while a [`TrainingGuard`] is alive
//! on the same thread. That panic is the enforcement mechanism for the
//! unsupervised contract: training code can hold target features, never
//! target event lists.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const FEATURE_MAGIC: &[u8; 4] = b"GCF1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {path}")]
    MissingFile { path: PathBuf },
    #[error("pair {pair}: missing {stream} stream file {path}")]
    MissingStream { pair: usize, stream: &'static str, path: PathBuf },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic (expected GCF1)")]
    BadMagic { path: PathBuf },
    #[error("{path}: header says {expected} payload floats, file holds {actual}")]
    SizeMismatch { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: non-finite value at row {row}, col {col}")]
    NonFinite { path: PathBuf, row: usize, col: usize },
    #[error("{path}: header field {field} must be positive")]
    BadHeader { path: PathBuf, field: &'static str },
    #[error("interpolation target length must be >= 1, got {0}")]
    BadTargetLength(usize),
    #[error("gaze point ({x}, {y}) outside frame {w}x{h}")]
    GazeOutsideFrame { x: f64, y: f64, w: u32, h: u32 },
    #[error("malformed manifest {path}: {detail}")]
    MalformedManifest { path: PathBuf, detail: String },
    #[error("pair {pair}: feature dimension mismatch ({left} vs {right})")]
    DimMismatch { pair: usize, left: usize, right: usize },
    #[error("pair {pair}: invalid event ({detail})")]
    InvalidEvent { pair: usize, detail: String },
    #[error("pair {pair}: source view has no event annotations")]
    MissingSourceEvents { pair: usize },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Stream {
    Frame,
    Gaze,
}

/// One stream of per-timestep feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    pub values: Array2<f64>,
    pub fps: f64,
    pub duration_s: f64,
    pub stream: Stream,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// A captioned temporal segment; times are seconds within the owning video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub t_start: f64,
    pub t_end: f64,
    pub tokens: Vec<u32>,
}

/// Wrapper for data that only evaluation may read. `read` panics while a
/// [`TrainingGuard`] is alive on the current thread.
#[derive(Clone, Debug)]
pub struct EvalOnly<T>(T);

impl<T> EvalOnly<T> {
    pub fn new(value: T) -> Self {
        EvalOnly(value)
    }

    pub fn read(&self) -> &T {
        assert!(
            !training_active(),
            "evaluation-only data read while the training flag is active"
        );
        &self.0
    }
}

thread_local! {
    static TRAINING_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// RAII flag marking the current thread as inside a training step.
pub struct TrainingGuard(());

impl TrainingGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        TRAINING_DEPTH.with(|d| d.set(d.get() + 1));
        TrainingGuard(())
    }
}

impl Drop for TrainingGuard {
    fn drop(&mut self) {
        TRAINING_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub fn training_active() -> bool {
    TRAINING_DEPTH.with(|d| d.get()) > 0
}

/// One weakly paired source/target recording of the same activity.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub index: usize,
    pub source_frames: FeatureSequence,
    pub source_gaze: FeatureSequence,
    pub target_frames: FeatureSequence,
    pub target_gaze: FeatureSequence,
    pub source_events: Vec<EventAnnotation>,
    pub target_events: Option<EvalOnly<Vec<EventAnnotation>>>,
}

#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub vocab: Vec<String>,
    pub pairs: Vec<PairedSample>,
}

pub fn write_feature_sequence(path: &Path, seq: &FeatureSequence) -> Result<(), DataError> {
    let (l, c) = seq.values.dim();
    let mut buf = Vec::with_capacity(4 + 4 + 4 + 4 + 4 + l * c * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.fps as f32).to_le_bytes());
    buf.extend_from_slice(&(seq.duration_s as f32).to_le_bytes());
    for x in seq.values.iter() {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| DataError::Io { path: path.into(), source: e })?;
    f.write_all(&buf).map_err(|e| DataError::Io { path: path.into(), source: e })?;
    Ok(())
}

pub fn load_feature_sequence(path: &Path, stream: Stream) -> Result<FeatureSequence, DataError> {
    let mut buf = Vec::new();
    match std::fs::File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut buf).map_err(|e| DataError::Io { path: path.into(), source: e })?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DataError::MissingFile { path: path.into() })
        }
        Err(e) => return Err(DataError::Io { path: path.into(), source: e }),
    }
    if buf.len() < 20 || &buf[0..4] != FEATURE_MAGIC {
        return Err(DataError::BadMagic { path: path.into() });
    }
    let l = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let fps = f32::from_le_bytes(buf[12..16].try_into().unwrap()) as f64;
    let duration_s = f32::from_le_bytes(buf[16..20].try_into().unwrap()) as f64;
    if l < 1 || c < 1 {
        return Err(DataError::BadHeader { path: path.into(), field: "L/C" });
    }
    if !(fps > 0.0) {
        return Err(DataError::BadHeader { path: path.into(), field: "fps" });
    }
    if !(duration_s > 0.0) {
        return Err(DataError::BadHeader { path: path.into(), field: "duration_s" });
    }
    let actual = (buf.len() - 20) / 4;
    if buf.len() != 20 + l * c * 4 {
        return Err(DataError::SizeMismatch { path: path.into(), expected: l * c, actual });
    }
    let mut values = Array2::zeros((l, c));
    for (i, x) in values.iter_mut().enumerate() {
        let at = 20 + i * 4;
        let v = f32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(DataError::NonFinite { path: path.into(), row: i / c, col: i % c });
        }
        *x = v;
    }
    Ok(FeatureSequence { values, fps, duration_s, stream })
}

/// Linear resample along time onto `l_target` uniformly spaced positions
/// spanning `[0, L_in - 1]`. Identity (bitwise) when lengths already match.
pub fn interpolate_to_length(seq: &FeatureSequence, l_target: usize) -> Result<FeatureSequence, DataError> {
    if l_target < 1 {
        return Err(DataError::BadTargetLength(l_target));
    }
    let (l_in, c) = seq.values.dim();
    if l_in == l_target {
        return Ok(seq.clone());
    }
    let mut out = Array2::zeros((l_target, c));
    for t in 0..l_target {
        let pos = if l_target == 1 {
            0.0
        } else {
            t as f64 * (l_in - 1) as f64 / (l_target - 1) as f64
        };
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if frac == 0.0 {
            out.row_mut(t).assign(&seq.values.row(lo));
        } else {
            let hi = lo + 1;
            for ch in 0..c {
                out[[t, ch]] =
                    seq.values[[lo, ch]] * (1.0 - frac) + seq.values[[hi, ch]] * frac;
            }
        }
    }
    Ok(FeatureSequence {
        values: out,
        fps: l_target as f64 / seq.duration_s,
        duration_s: seq.duration_s,
        stream: seq.stream,
    })
}

/// Axis-aligned pixel rectangle, end-exclusive on neither side
/// (corners are `x0 < x1`, `y0 < y1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

/// Square crop of 25% frame area centered on the gaze point, translated
/// (never shrunk) to lie inside the frame. The side is clamped to
/// `min(W, H)` so extreme aspect ratios still fit.
pub fn gaze_crop_rect(gaze_x: f64, gaze_y: f64, w: u32, h: u32) -> Result<Rect, DataError> {
    assert!(w >= 4 && h >= 4, "frame too small for a crop");
    if !(0.0..=w as f64).contains(&gaze_x) || !(0.0..=h as f64).contains(&gaze_y) {
        return Err(DataError::GazeOutsideFrame { x: gaze_x, y: gaze_y, w, h });
    }
    let side = (0.5 * ((w as f64) * (h as f64)).sqrt()).round() as u32;
    let side = side.min(w).min(h).max(1);
    let place = |center: f64, side: u32, limit: u32| -> u32 {
        let lo = (center - side as f64 / 2.0).round() as i64;
        lo.clamp(0, (limit - side) as i64) as u32
    };
    let x0 = place(gaze_x, side, w);
    let y0 = place(gaze_y, side, h);
    Ok(Rect { x0, y0, x1: x0 + side, y1: y0 + side })
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    version: u32,
    vocab: Vec<String>,
    pairs: Vec<ManifestPair>,
}

#[derive(Serialize, Deserialize)]
struct ManifestPair {
    index: usize,
    source: ManifestView,
    target: ManifestView,
}

#[derive(Serialize, Deserialize)]
struct ManifestView {
    frames: String,
    gaze: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    events: Option<Vec<EventAnnotation>>,
}

/// In-memory description of one manifest pair, used by the generator to
/// write manifests through the same serializer the loader reads.
pub struct ManifestPairSpec {
    pub index: usize,
    pub source_frames: String,
    pub source_gaze: String,
    pub source_events: Vec<EventAnnotation>,
    pub target_frames: String,
    pub target_gaze: String,
    pub target_events: Option<Vec<EventAnnotation>>,
}

pub fn write_manifest(path: &Path, vocab: &[String], pairs: Vec<ManifestPairSpec>) -> Result<(), DataError> {
    let doc = ManifestDoc {
        version: 1,
        vocab: vocab.to_vec(),
        pairs: pairs
            .into_iter()
            .map(|p| ManifestPair {
                index: p.index,
                source: ManifestView {
                    frames: p.source_frames,
                    gaze: p.source_gaze,
                    events: Some(p.source_events),
                },
                target: ManifestView {
                    frames: p.target_frames,
                    gaze: p.target_gaze,
                    events: p.target_events,
                },
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&doc).expect("manifest serialization cannot fail");
    std::fs::write(path, json).map_err(|e| DataError::Io { path: path.into(), source: e })
}

fn validate_events(
    pair: usize,
    events: &[EventAnnotation],
    duration: f64,
    vocab_len: usize,
) -> Result<(), DataError> {
    for ev in events {
        if !(ev.t_start >= 0.0 && ev.t_start < ev.t_end && ev.t_end <= duration + 1e-6) {
            return Err(DataError::InvalidEvent {
                pair,
                detail: format!("bad bounds [{}, {}] for duration {duration}", ev.t_start, ev.t_end),
            });
        }
        if ev.tokens.is_empty() {
            return Err(DataError::InvalidEvent { pair, detail: "empty caption".into() });
        }
        if let Some(&t) = ev.tokens.iter().find(|&&t| t as usize >= vocab_len) {
            return Err(DataError::InvalidEvent { pair, detail: format!("token {t} out of vocabulary") });
        }
    }
    Ok(())
}

/// Loads a manifest and its feature files, interpolating every stream to
/// length `l`. Target annotations, when present, come back quarantined.
pub fn load_paired_dataset(manifest_path: &Path, l: usize) -> Result<PairedDataset, DataError> {
    let raw = std::fs::read_to_string(manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile { path: manifest_path.into() }
        } else {
            DataError::Io { path: manifest_path.into(), source: e }
        }
    })?;
    let doc: ManifestDoc = serde_json::from_str(&raw).map_err(|e| DataError::MalformedManifest {
        path: manifest_path.into(),
        detail: e.to_string(),
    })?;
    if doc.version != 1 {
        return Err(DataError::MalformedManifest {
            path: manifest_path.into(),
            detail: format!("unsupported version {}", doc.version),
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::with_capacity(doc.pairs.len());
    for p in &doc.pairs {
        let load = |rel: &str, stream: Stream, name: &'static str| -> Result<FeatureSequence, DataError> {
            let path = base.join(rel);
            load_feature_sequence(&path, stream).map_err(|e| match e {
                DataError::MissingFile { path } => DataError::MissingStream { pair: p.index, stream: name, path },
                other => other,
            })
        };
        let sf = load(&p.source.frames, Stream::Frame, "source frames")?;
        let sg = load(&p.source.gaze, Stream::Gaze, "source gaze")?;
        let tf = load(&p.target.frames, Stream::Frame, "target frames")?;
        let tg = load(&p.target.gaze, Stream::Gaze, "target gaze")?;
        let c = sf.dim();
        for (other, _name) in [(&sg, "source gaze"), (&tf, "target frames"), (&tg, "target gaze")] {
            if other.dim() != c {
                return Err(DataError::DimMismatch { pair: p.index, left: c, right: other.dim() });
            }
        }
        let source_events = match &p.source.events {
            Some(ev) if !ev.is_empty() => ev.clone(),
            _ => return Err(DataError::MissingSourceEvents { pair: p.index }),
        };
        validate_events(p.index, &source_events, sf.duration_s, doc.vocab.len())?;
        let target_events = match &p.target.events {
            Some(ev) => {
                validate_events(p.index, ev, tf.duration_s, doc.vocab.len())?;
                Some(EvalOnly::new(ev.clone()))
            }
            None => None,
        };
        pairs.push(PairedSample {
            index: p.index,
            source_frames: interpolate_to_length(&sf, l)?,
            source_gaze: interpolate_to_length(&sg, l)?,
            target_frames: interpolate_to_length(&tf, l)?,
            target_gaze: interpolate_to_length(&tg, l)?,
            source_events,
            target_events,
        });
    }
    Ok(PairedDataset { vocab: doc.vocab, pairs })
}
