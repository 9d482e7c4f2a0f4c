//! Synthetic corpora with known ground truth, for tests, demos and the
//! fixture pipeline.

use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ad_generator::GeneratorSample;
use crate::char_recognizer::RecognitionSample;
use crate::character_bank::{CastRecord, CharacterEntry, FixtureMovieDb};
use crate::feature_store::{save_movie, FrameFeatureTrack, MovieRecord, TextKind, TimedText};
use crate::temporal_proposer::{extract_gaps, ContextWindow, GapLabel, GapSample, WINDOW_S};

fn randn(rng: &mut ChaCha8Rng) -> f32 {
    let x: f64 = StandardNormal.sample(rng);
    x as f32
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Array1<f32> {
    Array1::from_shape_fn(n, |_| randn(rng) * scale)
}

/// Proportion of speech gaps containing AD per duration bin `[lo, hi)`.
///
/// The end bins are measured values; the interior bins interpolate them.
pub const DURATION_AD_RATES: [(f64, f64, f64); 6] = [
    (0.0, 2.0, 0.17),
    (2.0, 3.0, 0.30),
    (3.0, 4.0, 0.45),
    (4.0, 5.0, 0.60),
    (5.0, 6.0, 0.72),
    (6.0, f64::INFINITY, 0.85),
];

pub fn ad_rate(duration_s: f64) -> f64 {
    DURATION_AD_RATES
        .iter()
        .find(|(lo, hi, _)| duration_s >= *lo && duration_s < *hi)
        .map(|b| b.2)
        .unwrap_or(0.0)
}

/// Gap durations uniform on `[min_s, max_s)`, labels drawn from the
/// duration-bin AD rates.
pub fn duration_gaps(n: usize, min_s: f64, max_s: f64, seed: u64) -> Vec<GapSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let d = rng.random_range(min_s..max_s);
            let y = rng.random_bool(ad_rate(d));
            GapSample {
                start_s: 0.0,
                end_s: d,
                label: if y { GapLabel::ContainsAd } else { GapLabel::NoAd },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizerCorpusSpec {
    pub dim: usize,
    /// Leading dimensions carrying identity; the rest are nuisance.
    pub identity_dims: usize,
    pub identities: usize,
    pub chars_per_sample: usize,
    pub frames: usize,
    pub frame_noise: f32,
    /// Scale of per-sample nuisance directions shared by nothing; zero makes
    /// frames plain noisy copies of exemplars.
    pub nuisance: f32,
}

impl Default for RecognizerCorpusSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            identity_dims: 16,
            identities: 12,
            chars_per_sample: 4,
            frames: 8,
            frame_noise: 0.3,
            nuisance: 1.5,
        }
    }
}

/// Clips whose frames are noisy mixtures of the exemplars of the characters
/// present. Exemplars and frames also carry independent nuisance components
/// outside the identity subspace, which hurt raw cosine matching.
pub fn recognizer_corpus(spec: &RecognizerCorpusSpec, n: usize, seed: u64) -> Vec<RecognitionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut id_rng = ChaCha8Rng::seed_from_u64(0x1d);
    let ids: Vec<Array1<f32>> = (0..spec.identities)
        .map(|_| randn_vec(&mut id_rng, spec.identity_dims, 1.0))
        .collect();
    let nd = spec.dim - spec.identity_dims;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut who: Vec<usize> = (0..spec.identities).collect();
        who.shuffle(&mut rng);
        who.truncate(spec.chars_per_sample);
        let mut labels: Vec<bool> = (0..who.len()).map(|_| rng.random_bool(0.5)).collect();
        if !labels.iter().any(|&y| y) && rng.random_bool(0.5) {
            labels[0] = true;
        }
        let mut exemplars = Array2::zeros((who.len(), spec.dim));
        for (r, &w) in who.iter().enumerate() {
            exemplars.slice_mut(s![r, ..spec.identity_dims]).assign(&ids[w]);
            exemplars
                .slice_mut(s![r, spec.identity_dims..])
                .assign(&randn_vec(&mut rng, nd, spec.nuisance));
        }
        let present: Vec<usize> = (0..who.len()).filter(|&j| labels[j]).collect();
        let mut clip = Array2::zeros((spec.frames, spec.dim));
        for f in 0..spec.frames {
            let mut row = randn_vec(&mut rng, spec.dim, spec.frame_noise);
            if !present.is_empty() {
                let main = present[f % present.len()];
                let other = *present.choose(&mut rng).expect("nonempty");
                let a: f32 = rng.random_range(0.6..1.0);
                let mix = &ids[who[main]] * a + &ids[who[other]] * (1.0 - a);
                let mut head = row.slice_mut(s![..spec.identity_dims]);
                head += &mix;
            }
            let mut tail = row.slice_mut(s![spec.identity_dims..]);
            tail += &randn_vec(&mut rng, nd, spec.nuisance);
            clip.row_mut(f).assign(&row);
        }
        out.push(RecognitionSample { exemplars, clip, labels });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerCorpusSpec {
    pub visual_dim: usize,
    /// Dimension whose in-gap sign decides in-band labels.
    pub cue_dim: usize,
    pub cue_strength: f32,
    pub noise: f32,
}

impl Default for ProposerCorpusSpec {
    fn default() -> Self {
        Self {
            visual_dim: 16,
            cue_dim: 0,
            cue_strength: 0.4,
            noise: 1.0,
        }
    }
}

const FILLER: [&str; 16] = [
    "well", "i", "think", "we", "should", "go", "now", "you", "know", "it", "is", "not", "what", "said", "really", "okay",
];

fn filler(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| *FILLER.choose(rng).expect("nonempty")).collect::<Vec<_>>().join(" ")
}

/// Thirty-second windows of alternating speech and gaps. Each gap's label is
/// drawn from the duration-bin AD rates, and the per-second visual rows
/// inside the gap carry `+cue` on `cue_dim` for AD gaps and `-cue` otherwise.
pub fn proposer_windows(spec: &ProposerCorpusSpec, n: usize, seed: u64) -> Vec<ContextWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut speech = Vec::new();
        let mut t = rng.random_range(0.0..3.0_f64);
        t = (t * 2.0).round() / 2.0;
        while t < WINDOW_S - 1.0 {
            let len = (rng.random_range(1.0..5.0_f64) * 2.0).round() / 2.0;
            let end = (t + len).min(WINDOW_S);
            let words = rng.random_range(2..6);
            speech.push(TimedText::new(t, end, TextKind::Speech, filler(&mut rng, words)).expect("valid"));
            let gap = (rng.random_range(0.5..8.0_f64) * 2.0).round() / 2.0;
            t = end + gap;
        }
        let gaps: Vec<GapSample> = extract_gaps(&speech, 0.0, WINDOW_S)
            .expect("generated speech is ordered")
            .into_iter()
            .map(|(a, b)| GapSample {
                start_s: a,
                end_s: b,
                label: if rng.random_bool(ad_rate(b - a)) { GapLabel::ContainsAd } else { GapLabel::NoAd },
            })
            .collect();
        let mut visual = Array2::zeros((WINDOW_S as usize, spec.visual_dim));
        let times: Vec<f64> = (0..WINDOW_S as usize).map(|i| i as f64 + 0.5).collect();
        for (i, &tm) in times.iter().enumerate() {
            let mut row = randn_vec(&mut rng, spec.visual_dim, spec.noise);
            if let Some(g) = gaps.iter().find(|g| tm >= g.start_s && tm <= g.end_s) {
                let sign = if g.label == GapLabel::ContainsAd { 1.0 } else { -1.0 };
                row[spec.cue_dim] += sign * spec.cue_strength;
            }
            visual.row_mut(i).assign(&row);
        }
        out.push(ContextWindow::new(0.0, WINDOW_S, speech, gaps, visual, times).expect("valid window"));
    }
    out
}

/// Shifts a window and everything in it by `delta` seconds.
pub fn shift_window(w: &ContextWindow, delta: f64) -> ContextWindow {
    ContextWindow {
        window_start_s: w.window_start_s + delta,
        window_end_s: w.window_end_s + delta,
        speech: w
            .speech
            .iter()
            .map(|s| TimedText {
                start_s: s.start_s + delta,
                end_s: s.end_s + delta,
                ..s.clone()
            })
            .collect(),
        gaps: w
            .gaps
            .iter()
            .map(|g| GapSample {
                start_s: g.start_s + delta,
                end_s: g.end_s + delta,
                label: g.label,
            })
            .collect(),
        visual: w.visual.clone(),
        visual_times: w.visual_times.iter().map(|t| t + delta).collect(),
    }
}

pub const ONE_HOT_SENTENCES: [&str; 6] = [
    "a man walks into the room.",
    "the car drives down a dark road.",
    "she opens the old wooden door.",
    "rain falls on the quiet street.",
    "two children run across the field.",
    "he reads a letter by the window.",
];

/// Clips whose frames are noisy copies of one of six one-hot patterns; the
/// target is the sentence assigned to that pattern.
pub fn one_hot_corpus(dim: usize, frames: usize, n: usize, noise: f32, seed: u64) -> Vec<GeneratorSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = i % ONE_HOT_SENTENCES.len();
            let mut clip = Array2::from_shape_fn((frames, dim), |_| randn(&mut rng) * noise);
            for f in 0..frames {
                clip[[f, k]] += 1.0;
            }
            GeneratorSample {
                clip_features: clip,
                characters: vec![],
                context_ad: vec![],
                target: ONE_HOT_SENTENCES[k].to_string(),
            }
        })
        .collect()
}

pub const CHARACTER_NAMES: [&str; 12] = [
    "anna", "ben", "clara", "david", "emma", "frank", "grace", "henry", "iris", "jack", "kate", "leo",
];
pub const ACTOR_NAMES: [&str; 12] = [
    "mia stone", "noah reed", "olive grant", "paul hart", "quinn lowe", "ruth cole", "sam price", "tara wells",
    "umar shah", "vera lane", "will ford", "zoe marsh",
];
pub const ACTIONS: [&str; 4] = ["walks to the door.", "picks up the phone.", "looks out the window.", "sits on the bed."];

/// Identity vector of a named character in the naming corpus.
fn identity(index: usize, dim: usize) -> Array1<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee + index as u64);
    let v = randn_vec(&mut rng, dim, 1.0);
    let n = v.dot(&v).sqrt().max(1e-6);
    v / n
}

/// Naming corpus: two active characters per clip, the target names the
/// first one and the action encoded one-hot in the first visual dimensions.
pub fn naming_corpus(dim: usize, n: usize, seed: u64) -> Vec<GeneratorSample> {
    assert!(dim >= ACTIONS.len() + 4, "feature dimension too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut who: Vec<usize> = (0..CHARACTER_NAMES.len()).collect();
            who.shuffle(&mut rng);
            who.truncate(2);
            let action = rng.random_range(0..ACTIONS.len());
            let frames = 4;
            let mut clip = Array2::from_shape_fn((frames, dim), |_| randn(&mut rng) * 0.05);
            for f in 0..frames {
                clip[[f, action]] += 1.0;
            }
            let characters = who
                .iter()
                .map(|&w| {
                    let mut portrait = vec![0f32; dim];
                    for (j, v) in identity(w, dim - ACTIONS.len()).iter().enumerate() {
                        portrait[ACTIONS.len() + j] = *v;
                    }
                    CharacterEntry {
                        char_name: CHARACTER_NAMES[w].to_string(),
                        actor_name: ACTOR_NAMES[w].to_string(),
                        portrait_feature: portrait,
                        exemplar_feature: None,
                        top_k_frame_indices: vec![],
                    }
                })
                .collect();
            GeneratorSample {
                clip_features: clip,
                characters,
                context_ad: vec![],
                target: format!("{} {}", CHARACTER_NAMES[who[0]], ACTIONS[action]),
            }
        })
        .collect()
}

/// Whether `text` mentions any of the given character names as a word.
pub fn names_any(text: &str, characters: &[CharacterEntry]) -> bool {
    let words = crate::vocab::split_words(text);
    characters
        .iter()
        .any(|c| words.iter().any(|w| *w == c.char_name.to_lowercase()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub movies: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub dim: usize,
    pub cast: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            movies: 6,
            duration_s: 300.0,
            fps: 2.0,
            dim: 32,
            cast: 4,
        }
    }
}

/// Per-interval on-screen character annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharTag {
    pub start_s: f64,
    pub end_s: f64,
    /// Character names separated by `;`.
    pub characters: String,
}

impl CharTag {
    pub fn names(&self) -> Vec<String> {
        self.characters
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }
}

pub const CHAR_TAGS_FILE: &str = "char_tags.csv";

pub fn write_char_tags(path: &Path, tags: &[CharTag]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for t in tags {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_char_tags(path: &Path) -> Result<Vec<CharTag>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// Dimension layout of fixture frames.
const ID_DIMS: usize = 16;
const CUE_DIM: usize = 16;
const ACTION_DIM0: usize = 17;

/// Writes a small movie corpus: `<root>/movies/<id>/` with features,
/// timeline and character tags, plus cast fixtures under `<root>/imdb/`.
/// Returns the movie ids.
pub fn write_fixture_corpus(root: &Path, spec: &FixtureSpec, seed: u64) -> std::io::Result<Vec<String>> {
    let err = |e: String| std::io::Error::other(e);
    assert!(spec.dim >= ACTION_DIM0 + ACTIONS.len(), "fixture dimension too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let movies_dir = root.join("movies");
    let db = FixtureMovieDb::new(root.join("imdb"));
    let mut ids = Vec::new();
    for m in 0..spec.movies {
        let movie_id = format!("movie{m:02}");
        let imdb_id = format!("tt{:07}", 1000 + m);
        let mut pool: Vec<usize> = (0..CHARACTER_NAMES.len()).collect();
        pool.shuffle(&mut rng);
        pool.truncate(spec.cast);
        let idv: Vec<Array1<f32>> = pool.iter().map(|_| randn_vec(&mut rng, ID_DIMS, 1.0)).collect();
        let n_frames = (spec.duration_s * spec.fps) as usize;
        let timestamps: Vec<f64> = (0..n_frames).map(|i| i as f64 / spec.fps).collect();
        let mut feats = Array2::from_shape_fn((n_frames, spec.dim), |_| randn(&mut rng) * 0.3);
        let mut events = Vec::new();
        let mut tags = Vec::new();
        let mut t = 1.0;
        while t < spec.duration_s - 12.0 {
            // Speech turn by one cast member.
            let len = (rng.random_range(2.0..6.0_f64) * 2.0).round() / 2.0;
            let who = rng.random_range(0..pool.len());
            let words = rng.random_range(3..8);
            events.push(TimedText::new(t, t + len, TextKind::Speech, filler(&mut rng, words)).map_err(|e| err(e.to_string()))?);
            tags.push(CharTag {
                start_s: t,
                end_s: t + len,
                characters: CHARACTER_NAMES[pool[who]].to_string(),
            });
            paint(&mut feats, &timestamps, t, t + len, |row, _| {
                let mut head = row.slice_mut(s![..ID_DIMS]);
                head += &idv[who];
                row[CUE_DIM] -= 1.0;
            });
            t += len;
            // Pause, sometimes described.
            let gap = (rng.random_range(1.0..9.0_f64) * 2.0).round() / 2.0;
            if rng.random_bool(ad_rate(gap)) {
                let subject = rng.random_range(0..pool.len());
                let action = rng.random_range(0..ACTIONS.len());
                let (a, b) = (t + 0.1 * gap, t + 0.9 * gap);
                let text = format!("{} {}", capitalize(CHARACTER_NAMES[pool[subject]]), ACTIONS[action]);
                events.push(TimedText::new(a, b, TextKind::Ad, text).map_err(|e| err(e.to_string()))?);
                tags.push(CharTag {
                    start_s: a,
                    end_s: b,
                    characters: CHARACTER_NAMES[pool[subject]].to_string(),
                });
                paint(&mut feats, &timestamps, a, b, |row, _| {
                    let mut head = row.slice_mut(s![..ID_DIMS]);
                    head += &idv[subject];
                    row[CUE_DIM] += 1.0;
                    row[ACTION_DIM0 + action] += 1.5;
                });
            }
            t += gap;
        }
        let track = FrameFeatureTrack::new(movie_id.clone(), feats, timestamps, Some(spec.fps)).map_err(|e| err(e.to_string()))?;
        let record = MovieRecord::new(imdb_id.clone(), track, events).map_err(|e| err(e.to_string()))?;
        let dir = save_movie(&movies_dir, &record).map_err(|e| err(e.to_string()))?;
        write_char_tags(&dir.join(CHAR_TAGS_FILE), &tags).map_err(|e| err(e.to_string()))?;
        let cast: Vec<CastRecord> = pool
            .iter()
            .zip(&idv)
            .map(|(&p, v)| {
                let mut portrait = vec![0f32; spec.dim];
                for (j, x) in v.iter().enumerate() {
                    portrait[j] = x + randn(&mut rng) * 0.3;
                }
                CastRecord {
                    char_name: CHARACTER_NAMES[p].to_string(),
                    actor_name: ACTOR_NAMES[p].to_string(),
                    portrait: Some(portrait),
                }
            })
            .collect();
        db.write_fixture(&imdb_id, &cast).map_err(|e| err(e.to_string()))?;
        ids.push(movie_id);
    }
    Ok(ids)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn paint(
    feats: &mut Array2<f32>,
    timestamps: &[f64],
    a: f64,
    b: f64,
    mut f: impl FnMut(&mut ndarray::ArrayViewMut1<f32>, usize),
) {
    let lo = timestamps.partition_point(|&t| t < a);
    let hi = timestamps.partition_point(|&t| t < b);
    for i in lo..hi {
        let mut row = feats.row_mut(i);
        f(&mut row, i);
    }
}
