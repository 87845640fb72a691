//! Deterministic generator of synthetic paired-view datasets.
//!
//! Every pair renders one shared activity script from two views. The
//! views disagree in exactly the ways the adaptation stack is supposed
//! to fix: a different mixing of the latent step embedding into feature
//! space, a per-view style offset, independent per-step duration jitter
//! (asynchrony), and additive distractor bursts that hit the frame
//! stream only. The gaze stream is distractor-free and offset-free by
//! construction, so gaze really does carry the cleaner activity signal.
//!
//! All randomness flows from seeds derived by hashing
//! (global seed, split, pair index, role), so generation is
//! byte-reproducible and parallelizable.

use crate::data::{
    write_feature_sequence, write_manifest, DataError, EventAnnotation, FeatureSequence,
    ManifestPairSpec, Stream,
};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Nominal per-step duration before jitter, seconds.
pub const STEP_DURATION_S: f64 = 4.0;

const PREPS: [&str; 5] = ["with", "into", "onto", "under", "beside"];
const THE: &str = "the";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("empty catalog: {0}")]
    EmptyCatalog(&'static str),
    #[error("bad generator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Catalogs {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
}

impl Default for Catalogs {
    fn default() -> Self {
        let v = ["pick", "place", "pour", "stir", "cut", "open", "close", "wipe", "wash", "shake", "fold", "press"];
        let o = ["cup", "bowl", "knife", "spoon", "pan", "lid", "bottle", "board", "cloth", "jar", "plate", "towel", "kettle", "tray", "whisk"];
        Catalogs {
            verbs: v.iter().map(|s| s.to_string()).collect(),
            objects: o.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Token id layout: verbs, then objects, then "the", then prepositions.
pub fn build_vocab(catalogs: &Catalogs) -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    v.extend(catalogs.verbs.iter().cloned());
    v.extend(catalogs.objects.iter().cloned());
    v.push(THE.to_string());
    v.extend(PREPS.iter().map(|s| s.to_string()));
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActivityStep {
    pub verb: usize,
    pub object: usize,
    /// Optional trailing phrase: (preposition index, second object index).
    pub second: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct ActivityScript {
    pub steps: Vec<ActivityStep>,
    /// One unit vector per step, shared by both views.
    pub latents: Vec<Array1<f64>>,
}

#[derive(Clone, Debug)]
pub struct ViewParams {
    /// C x C_latent, orthonormal columns.
    pub mixing: Array2<f64>,
    pub style_offset: Array1<f64>,
    pub noise_sigma: f64,
    pub jitter: f64,
    pub distractor_rate: f64,
    pub distractor_strength: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub splits: SplitSizes,
    pub n_steps: [usize; 2],
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "C_latent")]
    pub c_latent: usize,
    pub catalogs: Catalogs,
    pub jitter: f64,
    pub distractor_rate: f64,
    pub distractor_strength: f64,
    pub noise_sigma: f64,
    pub fps: f64,
    pub style_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            splits: SplitSizes { train: 64, val: 8, test: 8 },
            n_steps: [3, 6],
            l: 64,
            c: 32,
            c_latent: 16,
            catalogs: Catalogs::default(),
            jitter: 0.3,
            distractor_rate: 6.0,
            distractor_strength: 2.0,
            noise_sigma: 0.05,
            fps: 5.0,
            style_scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.catalogs.verbs.is_empty() {
            return Err(GenError::EmptyCatalog("verbs"));
        }
        if self.catalogs.objects.is_empty() {
            return Err(GenError::EmptyCatalog("objects"));
        }
        let bad = |m: &str| Err(GenError::BadConfig(m.to_string()));
        if self.n_steps[0] < 1 || self.n_steps[0] > self.n_steps[1] {
            return bad("n_steps range must satisfy 1 <= lo <= hi");
        }
        if self.l < 1 || self.c < 2 || self.c_latent < 2 {
            return bad("need L >= 1, C >= 2, C_latent >= 2");
        }
        if self.c < self.c_latent {
            return bad("C must be >= C_latent for a full-column-rank mixing");
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return bad("jitter must lie in [0, 1)");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.noise_sigma < 0.0 || self.distractor_rate < 0.0 || self.distractor_strength < 0.0 {
            return bad("noise/distractor settings must be non-negative");
        }
        Ok(())
    }
}

/// Stable seed derivation: SHA-256 over the parts, first 8 bytes.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

fn tag(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

/// Embedding for a catalog word: a unit vector seeded by the word text
/// itself, so the same word always maps to the same direction at a given
/// C_latent, across scripts and datasets.
fn word_embedding(role: &str, word: &str, c_latent: usize) -> Array1<f64> {
    let seed = derive_seed(&[tag(role), tag(word), c_latent as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::<f64>::new(0.0, 1.0).unwrap();
    let mut v = Array1::from_shape_fn(c_latent, |_| dist.sample(&mut rng));
    let n = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / n);
    v
}

fn step_latent(step: &ActivityStep, catalogs: &Catalogs, c_latent: usize) -> Array1<f64> {
    let mut v = word_embedding("verb", &catalogs.verbs[step.verb], c_latent)
        + word_embedding("object", &catalogs.objects[step.object], c_latent);
    if let Some((prep, obj2)) = step.second {
        v = v
            + 0.6 * &word_embedding("object", &catalogs.objects[obj2], c_latent)
            + 0.3 * &word_embedding("prep", PREPS[prep], c_latent);
    }
    let n = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / n);
    v
}

pub fn sample_script(
    seed: u64,
    n_steps: usize,
    catalogs: &Catalogs,
    c_latent: usize,
) -> Result<ActivityScript, GenError> {
    if catalogs.verbs.is_empty() {
        return Err(GenError::EmptyCatalog("verbs"));
    }
    if catalogs.objects.is_empty() {
        return Err(GenError::EmptyCatalog("objects"));
    }
    assert!(n_steps >= 1, "scripts need at least one step");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps: Vec<ActivityStep> = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        // Repeated (verb, object, phrase) combinations would collapse two
        // steps onto one latent; retry until the combination is fresh.
        let step = loop {
            let verb = rng.gen_range(0..catalogs.verbs.len());
            let object = rng.gen_range(0..catalogs.objects.len());
            let second = if catalogs.objects.len() > 1 && rng.gen_bool(1.0 / 3.0) {
                let prep = rng.gen_range(0..PREPS.len());
                let obj2 = loop {
                    let o = rng.gen_range(0..catalogs.objects.len());
                    if o != object {
                        break o;
                    }
                };
                Some((prep, obj2))
            } else {
                None
            };
            let cand = ActivityStep { verb, object, second };
            if !steps.contains(&cand) {
                break cand;
            }
        };
        steps.push(step);
    }
    let latents = steps.iter().map(|s| step_latent(s, catalogs, c_latent)).collect();
    Ok(ActivityScript { steps, latents })
}

/// Caption token ids for one step: "VERB the OBJECT [PREP the OBJECT2]".
pub fn step_tokens(step: &ActivityStep, catalogs: &Catalogs) -> Vec<u32> {
    let nv = catalogs.verbs.len() as u32;
    let no = catalogs.objects.len() as u32;
    let the = nv + no;
    let mut t = vec![step.verb as u32, the, nv + step.object as u32];
    if let Some((prep, obj2)) = step.second {
        t.push(the + 1 + prep as u32);
        t.push(the);
        t.push(nv + obj2 as u32);
    }
    t
}

fn orthonormal_columns(rng: &mut ChaCha8Rng, c: usize, k: usize) -> Array2<f64> {
    assert!(c >= k);
    let dist = Normal::<f64>::new(0.0, 1.0).unwrap();
    let mut m: Array2<f64> = Array2::zeros((c, k));
    for j in 0..k {
        let mut v = Array1::from_shape_fn(c, |_| dist.sample(rng));
        // Two Gram-Schmidt passes keep the columns orthonormal to fp noise.
        for _ in 0..2 {
            for prev in 0..j {
                let p = m.column(prev);
                let d = v.dot(&p);
                v.zip_mut_with(&p.to_owned(), |x, &pv| *x -= d * pv);
            }
        }
        let n = v.dot(&v).sqrt();
        v.mapv_inplace(|x| x / n);
        m.column_mut(j).assign(&v);
    }
    m
}

pub fn make_view_params(seed: u64, cfg: &GeneratorConfig) -> ViewParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing = orthonormal_columns(&mut rng, cfg.c, cfg.c_latent);
    let dist = Normal::<f64>::new(0.0, 1.0).unwrap();
    let style_offset = Array1::from_shape_fn(cfg.c, |_| dist.sample(&mut rng) * cfg.style_scale);
    ViewParams {
        mixing,
        style_offset,
        noise_sigma: cfg.noise_sigma,
        jitter: cfg.jitter,
        distractor_rate: cfg.distractor_rate,
        distractor_strength: cfg.distractor_strength,
    }
}

#[derive(Clone, Debug)]
struct Distractor {
    t_start: f64,
    t_end: f64,
    component: Array1<f64>,
}

struct RenderTrace {
    frames: FeatureSequence,
    gaze: FeatureSequence,
    events: Vec<EventAnnotation>,
    // Kept on the trace so tests can check gaze against the injected
    // off-script segments.
    #[cfg_attr(not(test), allow(dead_code))]
    distractors: Vec<Distractor>,
}

fn render_view_inner(
    script: &ActivityScript,
    catalogs: &Catalogs,
    vp: &ViewParams,
    seed: u64,
    fps: f64,
) -> RenderTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_steps = script.steps.len();

    let mut bounds = Vec::with_capacity(n_steps + 1);
    bounds.push(0.0f64);
    for _ in 0..n_steps {
        let d = STEP_DURATION_S * rng.gen_range(1.0 - vp.jitter..=1.0 + vp.jitter);
        bounds.push(bounds.last().unwrap() + d);
    }
    let duration = *bounds.last().unwrap();

    let events: Vec<EventAnnotation> = script
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| EventAnnotation {
            t_start: bounds[i],
            t_end: bounds[i + 1],
            tokens: step_tokens(s, catalogs),
        })
        .collect();

    let n_dist = if vp.distractor_rate > 0.0 {
        let lambda = vp.distractor_rate * duration / 60.0;
        Poisson::new(lambda).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };
    let c = vp.mixing.nrows();
    let dist = Normal::<f64>::new(0.0, 1.0).unwrap();
    let mut distractors = Vec::with_capacity(n_dist);
    for _ in 0..n_dist {
        let t0 = rng.gen_range(0.0..duration);
        let len = rng.gen_range(0.5..1.5);
        let mut dir = Array1::from_shape_fn(c, |_| dist.sample(&mut rng));
        let n = dir.dot(&dir).sqrt();
        dir.mapv_inplace(|x| x / n * vp.distractor_strength);
        distractors.push(Distractor { t_start: t0, t_end: (t0 + len).min(duration), component: dir });
    }

    let l = ((duration * fps).round() as usize).max(1);
    let mut frames = Array2::zeros((l, c));
    let mut gaze = Array2::zeros((l, c));
    let noise = Normal::<f64>::new(0.0, 1.0).unwrap();
    for t in 0..l {
        let time = (t as f64 + 0.5) / fps;
        let step = bounds[1..n_steps].iter().filter(|&&b| time >= b).count();
        let base = vp.mixing.dot(&script.latents[step]);
        for ch in 0..c {
            frames[[t, ch]] = base[ch] + vp.style_offset[ch];
            gaze[[t, ch]] = base[ch];
        }
        for d in &distractors {
            if time >= d.t_start && time < d.t_end {
                for ch in 0..c {
                    frames[[t, ch]] += d.component[ch];
                }
            }
        }
        if vp.noise_sigma > 0.0 {
            for ch in 0..c {
                frames[[t, ch]] += noise.sample(&mut rng) * vp.noise_sigma;
            }
            for ch in 0..c {
                gaze[[t, ch]] += noise.sample(&mut rng) * vp.noise_sigma;
            }
        }
    }

    RenderTrace {
        frames: FeatureSequence { values: frames, fps, duration_s: duration, stream: Stream::Frame },
        gaze: FeatureSequence { values: gaze, fps, duration_s: duration, stream: Stream::Gaze },
        events,
        distractors,
    }
}

pub fn render_view(
    script: &ActivityScript,
    catalogs: &Catalogs,
    vp: &ViewParams,
    seed: u64,
    fps: f64,
) -> (FeatureSequence, FeatureSequence, Vec<EventAnnotation>) {
    let t = render_view_inner(script, catalogs, vp, seed, fps);
    (t.frames, t.gaze, t.events)
}

/// Top-level index written next to the per-split manifests.
#[derive(Serialize, Deserialize)]
pub struct BenchmarkIndex {
    pub version: u32,
    pub seed: u64,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub splits: std::collections::BTreeMap<String, String>,
}

pub fn load_benchmark_index(path: &Path) -> Result<BenchmarkIndex, GenError> {
    let raw = std::fs::read_to_string(path).map_err(|e| GenError::Io { path: path.into(), source: e })?;
    serde_json::from_str(&raw).map_err(|e| GenError::BadConfig(format!("bad benchmark index {}: {e}", path.display())))
}

/// Writes the full benchmark (feature files, per-split manifests, index)
/// and returns the index path. Byte-identical for identical (cfg, seed).
pub fn generate_benchmark(cfg: &GeneratorConfig, seed: u64, out_dir: &Path) -> Result<PathBuf, GenError> {
    cfg.validate()?;
    let vocab = build_vocab(&cfg.catalogs);
    let vp_source = make_view_params(derive_seed(&[seed, tag("view"), 0]), cfg);
    let vp_target = make_view_params(derive_seed(&[seed, tag("view"), 1]), cfg);

    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| GenError::Io { path: p.into(), source: e });
    mkdir(out_dir)?;

    let mut index_splits = std::collections::BTreeMap::new();
    for (split, count, write_target_events) in [
        ("train", cfg.splits.train, false),
        ("val", cfg.splits.val, true),
        ("test", cfg.splits.test, true),
    ] {
        let split_dir = out_dir.join(split);
        mkdir(&split_dir)?;
        let split_tag = tag(split);
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let mut script_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(&[seed, split_tag, i as u64, tag("steps")]));
            let n_steps = script_rng.gen_range(cfg.n_steps[0]..=cfg.n_steps[1]);
            let script = sample_script(
                derive_seed(&[seed, split_tag, i as u64, tag("script")]),
                n_steps,
                &cfg.catalogs,
                cfg.c_latent,
            )?;
            let (sf, sg, sev) = render_view(
                &script,
                &cfg.catalogs,
                &vp_source,
                derive_seed(&[seed, split_tag, i as u64, 0]),
                cfg.fps,
            );
            let (tf, tg, tev) = render_view(
                &script,
                &cfg.catalogs,
                &vp_target,
                derive_seed(&[seed, split_tag, i as u64, 1]),
                cfg.fps,
            );
            let name = |role: &str, stream: &str| format!("pair{i:04}_{role}_{stream}.gcf");
            write_feature_sequence(&split_dir.join(name("src", "frames")), &sf)?;
            write_feature_sequence(&split_dir.join(name("src", "gaze")), &sg)?;
            write_feature_sequence(&split_dir.join(name("tgt", "frames")), &tf)?;
            write_feature_sequence(&split_dir.join(name("tgt", "gaze")), &tg)?;
            pairs.push(ManifestPairSpec {
                index: i,
                source_frames: name("src", "frames"),
                source_gaze: name("src", "gaze"),
                source_events: sev,
                target_frames: name("tgt", "frames"),
                target_gaze: name("tgt", "gaze"),
                target_events: if write_target_events { Some(tev) } else { None },
            });
        }
        write_manifest(&split_dir.join("manifest.json"), &vocab, pairs)?;
        index_splits.insert(split.to_string(), format!("{split}/manifest.json"));
    }

    let index = BenchmarkIndex { version: 1, seed, l: cfg.l, c: cfg.c, splits: index_splits };
    let index_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&index).expect("index serialization cannot fail");
    std::fs::write(&index_path, json).map_err(|e| GenError::Io { path: index_path.clone(), source: e })?;
    Ok(index_path)
}
