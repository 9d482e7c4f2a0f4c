//! Per-movie frame features and timelines on disk.
//!
//! A movie directory holds `features.bin` (u32 T, u32 D little-endian, then
//! T*D row-major f32), `meta.json`, `timeline.csv` and optionally `*.srt`
//! files. Timestamps live in `meta.json` and are authoritative; no frame rate
//! is ever assumed.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURES_FILE: &str = "features.bin";
pub const META_FILE: &str = "meta.json";
pub const TIMELINE_FILE: &str = "timeline.csv";

/// Slack allowed past the last frame for timeline events.
pub const TIMELINE_SLACK_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("shape mismatch in {path}: {detail}")]
    ShapeMismatch { path: String, detail: String },
    #[error("timestamps not strictly increasing at index {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("feature dimension {got} differs from {expected} used by other tracks")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid interval [{t1}, {t2})")]
    InvalidInterval { t1: f64, t2: f64 },
    #[error("invalid timed text: {0}")]
    InvalidTimedText(String),
    #[error("event [{start}, {end}] outside [0, {limit}]")]
    TimeOutOfRange { start: f64, end: f64, limit: f64 },
    #[error("srt parse error at line {line}: {msg}")]
    Srt { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            StoreError::MissingFile(path.to_path_buf())
        } else {
            StoreError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    }
}

/// Time-indexed sequence of frame embeddings for one movie.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureTrack {
    movie_id: String,
    features: Array2<f32>,
    timestamps: Vec<f64>,
    fps_hint: Option<f64>,
}

impl FrameFeatureTrack {
    pub fn new(
        movie_id: impl Into<String>,
        features: Array2<f32>,
        timestamps: Vec<f64>,
        fps_hint: Option<f64>,
    ) -> Result<Self, StoreError> {
        let (t, _) = features.dim();
        if t == 0 {
            return Err(StoreError::ShapeMismatch {
                path: "<track>".into(),
                detail: "track has no frames".into(),
            });
        }
        if timestamps.len() != t {
            return Err(StoreError::ShapeMismatch {
                path: "<track>".into(),
                detail: format!("{} timestamps for {t} frames", timestamps.len()),
            });
        }
        if let Some(i) = timestamps.iter().position(|ts| !ts.is_finite()) {
            return Err(StoreError::NonMonotonicTimestamps { index: i });
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(StoreError::NonMonotonicTimestamps { index: i + 1 });
        }
        for ((row, col), v) in features.indexed_iter() {
            if !v.is_finite() {
                return Err(StoreError::NonFinite { row, col });
            }
        }
        Ok(Self {
            movie_id: movie_id.into(),
            features,
            timestamps,
            fps_hint,
        })
    }

    pub fn movie_id(&self) -> &str {
        &self.movie_id
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn fps_hint(&self) -> Option<f64> {
        self.fps_hint
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.features.row(i)
    }

    pub fn last_timestamp(&self) -> f64 {
        *self.timestamps.last().expect("track is never empty")
    }

    /// Index range of frames with timestamp in `[t1, t2)`.
    pub fn index_range(&self, t1: f64, t2: f64) -> Result<std::ops::Range<usize>, StoreError> {
        if !(t1 < t2) {
            return Err(StoreError::InvalidInterval { t1, t2 });
        }
        let lo = self.timestamps.partition_point(|&ts| ts < t1);
        let hi = self.timestamps.partition_point(|&ts| ts < t2);
        Ok(lo..hi.max(lo))
    }

    /// Rows whose timestamp lies in the half-open interval `[t1, t2)`.
    pub fn slice_features(&self, t1: f64, t2: f64) -> Result<Array2<f32>, StoreError> {
        let r = self.index_range(t1, t2)?;
        Ok(self.features.slice(s![r, ..]).to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TextKind {
    #[serde(rename = "AD")]
    Ad,
    #[serde(rename = "SUBTITLE")]
    Subtitle,
    #[serde(rename = "SPEECH")]
    Speech,
}

/// A span of text with start and end times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedText {
    pub start_s: f64,
    pub end_s: f64,
    pub kind: TextKind,
    pub text: String,
}

impl TimedText {
    pub fn new(start_s: f64, end_s: f64, kind: TextKind, text: impl Into<String>) -> Result<Self, StoreError> {
        let t = Self {
            start_s,
            end_s,
            kind,
            text: text.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if !(self.start_s.is_finite() && self.end_s.is_finite() && self.start_s < self.end_s) {
            return Err(StoreError::InvalidTimedText(format!(
                "start {} must precede end {}",
                self.start_s, self.end_s
            )));
        }
        if self.kind != TextKind::Speech && self.text.trim().is_empty() {
            return Err(StoreError::InvalidTimedText(format!(
                "empty {:?} text at {}",
                self.kind, self.start_s
            )));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovieMeta {
    pub movie_id: String,
    pub imdb_id: String,
    #[serde(default)]
    pub fps_hint: Option<f64>,
    #[serde(rename = "D")]
    pub dim: usize,
    pub timestamps: Vec<f64>,
}

/// One movie's features and timelines, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct MovieRecord {
    pub movie_id: String,
    pub imdb_id: String,
    pub track: FrameFeatureTrack,
    pub ad: Vec<TimedText>,
    pub subtitles: Vec<TimedText>,
    pub speech: Vec<TimedText>,
}

impl MovieRecord {
    /// Builds a record, sorting each timeline by start time and checking
    /// every event against the track extent.
    pub fn new(
        imdb_id: impl Into<String>,
        track: FrameFeatureTrack,
        timeline: Vec<TimedText>,
    ) -> Result<Self, StoreError> {
        let limit = track.last_timestamp() + TIMELINE_SLACK_S;
        let mut ad = Vec::new();
        let mut subtitles = Vec::new();
        let mut speech = Vec::new();
        for t in timeline {
            t.validate()?;
            if t.start_s < 0.0 || t.end_s > limit {
                return Err(StoreError::TimeOutOfRange {
                    start: t.start_s,
                    end: t.end_s,
                    limit,
                });
            }
            match t.kind {
                TextKind::Ad => ad.push(t),
                TextKind::Subtitle => subtitles.push(t),
                TextKind::Speech => speech.push(t),
            }
        }
        for list in [&mut ad, &mut subtitles, &mut speech] {
            list.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        }
        Ok(Self {
            movie_id: track.movie_id().to_string(),
            imdb_id: imdb_id.into(),
            track,
            ad,
            subtitles,
            speech,
        })
    }

    /// All events in one list, ordered AD, subtitles, speech.
    pub fn timeline(&self) -> Vec<TimedText> {
        self.ad
            .iter()
            .chain(&self.subtitles)
            .chain(&self.speech)
            .cloned()
            .collect()
    }
}

pub fn encode_features(features: &Array2<f32>) -> Vec<u8> {
    let (t, d) = features.dim();
    let mut buf = Vec::with_capacity(8 + 4 * t * d);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &str) -> Result<Array2<f32>, StoreError> {
    let mismatch = |detail: String| StoreError::ShapeMismatch {
        path: path.to_string(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(mismatch(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[8..];
    if t == 0 || d == 0 {
        return Err(mismatch(format!("header declares empty shape {t}x{d}")));
    }
    let expected = t.checked_mul(d).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(mismatch(format!(
            "header {t}x{d} needs {} payload bytes, found {}",
            t * d * 4,
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((t, d), values).expect("length checked"))
}

#[derive(Debug, Serialize, Deserialize)]
struct TimelineRow {
    start_s: f64,
    end_s: f64,
    kind: TextKind,
    text: String,
}

pub fn read_timeline(path: &Path) -> Result<Vec<TimedText>, StoreError> {
    let data = fs::read(path).map_err(io_err(path))?;
    parse_timeline(&data, &path.display().to_string())
}

pub fn parse_timeline(data: &[u8], path: &str) -> Result<Vec<TimedText>, StoreError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(data);
    let mut out = Vec::new();
    for row in reader.deserialize::<TimelineRow>() {
        let row = row.map_err(|source| StoreError::Csv {
            path: path.to_string(),
            source,
        })?;
        out.push(TimedText::new(row.start_s, row.end_s, row.kind, row.text)?);
    }
    Ok(out)
}

pub fn timeline_to_csv(events: &[TimedText]) -> Result<Vec<u8>, StoreError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in events {
        w.serialize(TimelineRow {
            start_s: e.start_s,
            end_s: e.end_s,
            kind: e.kind,
            text: e.text.clone(),
        })
        .map_err(|source| StoreError::Csv {
            path: "<timeline>".into(),
            source,
        })?;
    }
    w.into_inner().map_err(|e| StoreError::Io {
        path: "<timeline>".into(),
        source: e.into_error(),
    })
}

/// Parses SubRip text into timed events of the given kind.
pub fn parse_srt(text: &str, kind: TextKind) -> Result<Vec<TimedText>, StoreError> {
    let mut out = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim().trim_start_matches('\u{feff}');
        if line.is_empty() {
            i += 1;
            continue;
        }
        // Optional numeric counter line.
        if line.chars().all(|c| c.is_ascii_digit()) {
            i += 1;
        }
        let timing = lines.get(i).map(|l| l.trim()).ok_or(StoreError::Srt {
            line: i + 1,
            msg: "missing timing line".into(),
        })?;
        let (a, b) = timing.split_once("-->").ok_or(StoreError::Srt {
            line: i + 1,
            msg: format!("expected 'start --> end', got '{timing}'"),
        })?;
        let start = parse_srt_time(a.trim()).ok_or(StoreError::Srt {
            line: i + 1,
            msg: format!("bad timestamp '{}'", a.trim()),
        })?;
        let end = parse_srt_time(b.trim()).ok_or(StoreError::Srt {
            line: i + 1,
            msg: format!("bad timestamp '{}'", b.trim()),
        })?;
        i += 1;
        let mut body = Vec::new();
        while i < lines.len() && !lines[i].trim().is_empty() {
            body.push(lines[i].trim());
            i += 1;
        }
        out.push(TimedText::new(start, end, kind, body.join(" "))?);
    }
    Ok(out)
}

fn parse_srt_time(s: &str) -> Option<f64> {
    let s = s.split_whitespace().next()?;
    let (hms, ms) = s.split_once([',', '.']).unwrap_or((s, "0"));
    let mut parts = hms.split(':');
    let h: f64 = parts.next()?.parse().ok()?;
    let m: f64 = parts.next()?.parse().ok()?;
    let sec: f64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    let frac: f64 = format!("0.{ms}").parse().ok()?;
    Some(h * 3600.0 + m * 60.0 + sec + frac)
}

fn srt_kind(file_name: &str) -> TextKind {
    let lower = file_name.to_ascii_lowercase();
    if lower.starts_with("ad") {
        TextKind::Ad
    } else if lower.starts_with("speech") {
        TextKind::Speech
    } else {
        TextKind::Subtitle
    }
}

/// Loads and validates `<root>/<movie_id>/`.
pub fn load_movie(root: &Path, movie_id: &str) -> Result<MovieRecord, StoreError> {
    let dir = root.join(movie_id);
    let feat_path = dir.join(FEATURES_FILE);
    let meta_path = dir.join(META_FILE);
    let timeline_path = dir.join(TIMELINE_FILE);
    for p in [&feat_path, &meta_path, &timeline_path] {
        if !p.is_file() {
            return Err(StoreError::MissingFile(p.clone()));
        }
    }
    let bytes = fs::read(&feat_path).map_err(io_err(&feat_path))?;
    let features = decode_features(&bytes, &feat_path.display().to_string())?;
    let meta_raw = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let meta: MovieMeta = serde_json::from_slice(&meta_raw).map_err(|source| StoreError::Json {
        path: meta_path.display().to_string(),
        source,
    })?;
    if meta.dim != features.ncols() {
        return Err(StoreError::ShapeMismatch {
            path: meta_path.display().to_string(),
            detail: format!("meta D={} but features have D={}", meta.dim, features.ncols()),
        });
    }
    let track = FrameFeatureTrack::new(movie_id, features, meta.timestamps, meta.fps_hint)?;
    let mut timeline = read_timeline(&timeline_path)?;
    let mut srt_files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("srt")))
        .collect();
    srt_files.sort();
    for p in srt_files {
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        timeline.extend(parse_srt(&text, srt_kind(name))?);
    }
    MovieRecord::new(meta.imdb_id, track, timeline)
}

/// Writes a record in the on-disk layout read by [`load_movie`].
pub fn save_movie(root: &Path, record: &MovieRecord) -> Result<PathBuf, StoreError> {
    let dir = root.join(&record.movie_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let feat_path = dir.join(FEATURES_FILE);
    fs::write(&feat_path, encode_features(record.track.features())).map_err(io_err(&feat_path))?;
    let meta = MovieMeta {
        movie_id: record.movie_id.clone(),
        imdb_id: record.imdb_id.clone(),
        fps_hint: record.track.fps_hint(),
        dim: record.track.dim(),
        timestamps: record.track.timestamps().to_vec(),
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(&meta).map_err(|source| StoreError::Json {
        path: meta_path.display().to_string(),
        source,
    })?;
    fs::write(&meta_path, json).map_err(io_err(&meta_path))?;
    let timeline_path = dir.join(TIMELINE_FILE);
    fs::write(&timeline_path, timeline_to_csv(&record.timeline())?).map_err(io_err(&timeline_path))?;
    Ok(dir)
}

/// Movies loaded from one root, all sharing a single feature dimension.
#[derive(Debug, Default)]
pub struct FeatureStore {
    dim: Option<usize>,
    movies: BTreeMap<String, MovieRecord>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every movie directory under `root` (sorted by name).
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let mut store = Self::new();
        for id in list_movies(root)? {
            store.insert(load_movie(root, &id)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, record: MovieRecord) -> Result<(), StoreError> {
        let d = record.track.dim();
        match self.dim {
            Some(expected) if expected != d => {
                return Err(StoreError::DimMismatch { expected, got: d });
            }
            _ => self.dim = Some(d),
        }
        self.movies.insert(record.movie_id.clone(), record);
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn get(&self, movie_id: &str) -> Option<&MovieRecord> {
        self.movies.get(movie_id)
    }

    pub fn movies(&self) -> impl Iterator<Item = &MovieRecord> {
        self.movies.values()
    }

    pub fn len(&self) -> usize {
        self.movies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.movies.is_empty()
    }
}

/// Subdirectories of `root` that contain a `meta.json`, sorted.
pub fn list_movies(root: &Path) -> Result<Vec<String>, StoreError> {
    let mut ids: Vec<String> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(META_FILE).is_file())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}
