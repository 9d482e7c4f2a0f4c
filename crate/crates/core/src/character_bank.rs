//! Per-movie character banks.
//!
//! Cast lists come from a movie-database client. Each actor portrait feature
//! is calibrated into an in-movie exemplar: the mean of the `k` frame features
//! most cosine-similar to the portrait.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::FrameFeatureTrack;

pub const DEFAULT_MAX_CAST: usize = 10;
pub const DEFAULT_TOP_K: usize = 5;
pub const CAST_FILE: &str = "cast.json";
pub const BANK_FILE: &str = "charbank.json";

#[derive(Debug, Error)]
pub enum BankError {
    #[error("unknown movie {0}")]
    UnknownMovie(String),
    #[error("malformed cast fixture {path}: {msg}")]
    MalformedFixture { path: String, msg: String },
    #[error("k={k} exceeds the {frames} frames in the track")]
    KTooLarge { k: usize, frames: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("portrait feature is the zero vector")]
    ZeroVector,
    #[error("portrait has dimension {got}, frames have {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("duplicate character name {0:?}")]
    DuplicateCharacter(String),
    #[error("empty character name")]
    EmptyName,
    #[error("non-finite portrait feature for {0:?}")]
    NonFinitePortrait(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// One cast-list row as served by a movie database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CastRecord {
    #[serde(rename = "character")]
    pub char_name: String,
    #[serde(rename = "actor")]
    pub actor_name: String,
    /// Precomputed portrait feature; absent when the database has no image.
    #[serde(default)]
    pub portrait: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CastFixture {
    imdb_id: String,
    cast: Vec<CastRecord>,
}

/// Source of top-billed cast lists.
pub trait MovieDatabase {
    /// Returns at most `max_cast` top-billed records that carry a portrait.
    fn fetch_cast(&self, imdb_id: &str, max_cast: usize) -> Result<Vec<CastRecord>, BankError>;
}

/// Reads `<root>/<imdb_id>/cast.json` fixtures.
#[derive(Debug, Clone)]
pub struct FixtureMovieDb {
    root: PathBuf,
}

impl FixtureMovieDb {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn write_fixture(&self, imdb_id: &str, cast: &[CastRecord]) -> Result<PathBuf, BankError> {
        let dir = self.root.join(imdb_id);
        let path = dir.join(CAST_FILE);
        fs::create_dir_all(&dir).map_err(|source| BankError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let fixture = CastFixture {
            imdb_id: imdb_id.to_string(),
            cast: cast.to_vec(),
        };
        let json = serde_json::to_vec_pretty(&fixture).map_err(|source| BankError::Json {
            path: path.display().to_string(),
            source,
        })?;
        fs::write(&path, json).map_err(|source| BankError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    }
}

impl MovieDatabase for FixtureMovieDb {
    fn fetch_cast(&self, imdb_id: &str, max_cast: usize) -> Result<Vec<CastRecord>, BankError> {
        let path = self.root.join(imdb_id).join(CAST_FILE);
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(BankError::UnknownMovie(imdb_id.to_string()))
            }
            Err(source) => {
                return Err(BankError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let fixture: CastFixture =
            serde_json::from_slice(&raw).map_err(|e| BankError::MalformedFixture {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        if fixture.imdb_id != imdb_id {
            return Err(BankError::MalformedFixture {
                path: path.display().to_string(),
                msg: format!("fixture declares id {}", fixture.imdb_id),
            });
        }
        // Take the top-billed rows first, then drop the ones without portraits.
        Ok(fixture
            .cast
            .into_iter()
            .take(max_cast)
            .filter(|c| c.portrait.is_some())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterEntry {
    #[serde(rename = "char")]
    pub char_name: String,
    #[serde(rename = "actor")]
    pub actor_name: String,
    #[serde(rename = "portrait")]
    pub portrait_feature: Vec<f32>,
    #[serde(rename = "exemplar", default)]
    pub exemplar_feature: Option<Vec<f32>>,
    #[serde(rename = "indices", default)]
    pub top_k_frame_indices: Vec<usize>,
}

impl CharacterEntry {
    /// Exemplar when calibrated, otherwise the raw portrait.
    pub fn feature(&self) -> &[f32] {
        self.exemplar_feature
            .as_deref()
            .unwrap_or(&self.portrait_feature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterBank {
    pub movie_id: String,
    pub entries: Vec<CharacterEntry>,
}

impl CharacterBank {
    pub fn new(movie_id: impl Into<String>, entries: Vec<CharacterEntry>) -> Result<Self, BankError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.char_name.trim().is_empty() {
                return Err(BankError::EmptyName);
            }
            if e.portrait_feature.iter().any(|v| !v.is_finite()) {
                return Err(BankError::NonFinitePortrait(e.char_name.clone()));
            }
            if !seen.insert(e.char_name.as_str()) {
                return Err(BankError::DuplicateCharacter(e.char_name.clone()));
            }
        }
        Ok(Self {
            movie_id: movie_id.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, char_name: &str) -> Option<&CharacterEntry> {
        self.entries.iter().find(|e| e.char_name == char_name)
    }

    /// Row-stacked exemplar (or portrait) features, C x D.
    pub fn exemplar_matrix(&self) -> ndarray::Array2<f32> {
        let d = self.entries.first().map(|e| e.feature().len()).unwrap_or(0);
        let mut m = ndarray::Array2::zeros((self.entries.len(), d));
        for (i, e) in self.entries.iter().enumerate() {
            m.row_mut(i).assign(&ArrayView1::from(e.feature()));
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<(), BankError> {
        let json = serde_json::to_vec_pretty(self).map_err(|source| BankError::Json {
            path: path.display().to_string(),
            source,
        })?;
        fs::write(path, json).map_err(|source| BankError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, BankError> {
        let raw = fs::read(path).map_err(|source| BankError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bank: Self = serde_json::from_slice(&raw).map_err(|source| BankError::Json {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(bank.movie_id, bank.entries)
    }
}

pub fn norm(v: ArrayView1<f32>) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub exemplar: Vec<f32>,
    /// Selected frame indices, most similar first.
    pub indices: Vec<usize>,
}

/// Top-`k` frames by cosine similarity to `portrait` and their mean.
///
/// Ties are broken by the lower frame index.
pub fn calibrate_exemplar_rows(
    portrait: ArrayView1<f32>,
    frames: ArrayView2<f32>,
    k: usize,
) -> Result<Calibration, BankError> {
    let (t, d) = frames.dim();
    if portrait.len() != d {
        return Err(BankError::DimMismatch {
            expected: d,
            got: portrait.len(),
        });
    }
    if k == 0 {
        return Err(BankError::ZeroK);
    }
    if k > t {
        return Err(BankError::KTooLarge { k, frames: t });
    }
    if norm(portrait) == 0.0 {
        return Err(BankError::ZeroVector);
    }
    let mut scored: Vec<(f64, usize)> = frames
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (cosine(portrait, row), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let indices: Vec<usize> = scored.iter().take(k).map(|&(_, i)| i).collect();
    let mut acc = Array1::<f64>::zeros(d);
    for &i in &indices {
        acc.zip_mut_with(&frames.row(i), |a, &x| *a += x as f64);
    }
    let exemplar = acc.iter().map(|&s| (s / k as f64) as f32).collect();
    Ok(Calibration { exemplar, indices })
}

pub fn calibrate_exemplar(
    portrait: &[f32],
    track: &FrameFeatureTrack,
    k: usize,
) -> Result<Calibration, BankError> {
    calibrate_exemplar_rows(ArrayView1::from(portrait), track.features().view(), k)
}

/// Fetches the cast for `imdb_id` and calibrates every portrait against `track`.
pub fn build_bank(
    db: &dyn MovieDatabase,
    imdb_id: &str,
    track: &FrameFeatureTrack,
    k: usize,
    max_cast: usize,
) -> Result<CharacterBank, BankError> {
    let cast = db.fetch_cast(imdb_id, max_cast)?;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(cast.len());
    for c in cast {
        if !seen.insert(c.char_name.clone()) {
            return Err(BankError::DuplicateCharacter(c.char_name));
        }
        let portrait = c.portrait.expect("fetch_cast drops records without portraits");
        let cal = calibrate_exemplar(&portrait, track, k)?;
        entries.push(CharacterEntry {
            char_name: c.char_name,
            actor_name: c.actor_name,
            portrait_feature: portrait,
            exemplar_feature: Some(cal.exemplar),
            top_k_frame_indices: cal.indices,
        });
    }
    CharacterBank::new(track.movie_id(), entries)
}

/// Builds and writes `<movie_dir>/charbank.json`.
pub fn build_and_persist(
    db: &dyn MovieDatabase,
    imdb_id: &str,
    track: &FrameFeatureTrack,
    k: usize,
    max_cast: usize,
    movie_dir: &Path,
) -> Result<CharacterBank, BankError> {
    let bank = build_bank(db, imdb_id, track, k, max_cast)?;
    bank.save(&movie_dir.join(BANK_FILE))?;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn rec(name: &str, portrait: Option<Vec<f32>>) -> CastRecord {
        CastRecord {
            char_name: name.into(),
            actor_name: format!("{name} Actor"),
            portrait,
        }
    }

    #[test]
    fn fetch_truncates_then_drops_missing_portraits() {
        let dir = tempfile::tempdir().unwrap();
        let db = FixtureMovieDb::new(dir.path());
        let cast: Vec<_> = (0..12)
            .map(|i| rec(&format!("c{i}"), if i == 3 || i == 7 { None } else { Some(vec![1.0, 0.0]) }))
            .collect();
        db.write_fixture("tt0000001", &cast).unwrap();
        let got = db.fetch_cast("tt0000001", 10).unwrap();
        assert_eq!(got.len(), 8);
        assert!(got.iter().all(|c| c.portrait.is_some()));
        assert_eq!(got.last().unwrap().char_name, "c9");

        db.write_fixture("tt0000002", &[]).unwrap();
        assert!(db.fetch_cast("tt0000002", 10).unwrap().is_empty());
        assert!(matches!(
            db.fetch_cast("tt0000000", 10),
            Err(BankError::UnknownMovie(_))
        ));
    }

    #[test]
    fn malformed_fixture() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("tt9")).unwrap();
        fs::write(dir.path().join("tt9").join(CAST_FILE), b"{\"cast\": 3}").unwrap();
        let db = FixtureMovieDb::new(dir.path());
        assert!(matches!(
            db.fetch_cast("tt9", 10),
            Err(BankError::MalformedFixture { .. })
        ));
    }

    #[test]
    fn calibration_toy_case() {
        let frames: Array2<f32> = array![[1.0, 0.0], [0.0, 1.0], [0.9436, 0.3310]];
        let cal = calibrate_exemplar_rows(ArrayView1::from(&[1.0f32, 0.0]), frames.view(), 2).unwrap();
        assert_eq!(cal.indices, vec![0, 2]);
        assert!((cal.exemplar[0] - 0.9718).abs() < 1e-6);
        assert!((cal.exemplar[1] - 0.1655).abs() < 1e-6);
    }

    #[test]
    fn calibration_errors_and_ties() {
        let frames: Array2<f32> = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let p = [2.0f32, 0.0];
        let cal = calibrate_exemplar_rows(ArrayView1::from(&p), frames.view(), 1).unwrap();
        assert_eq!(cal.indices, vec![0]);
        assert!(matches!(
            calibrate_exemplar_rows(ArrayView1::from(&p), frames.view(), 4),
            Err(BankError::KTooLarge { k: 4, frames: 3 })
        ));
        assert!(matches!(
            calibrate_exemplar_rows(ArrayView1::from(&[0.0f32, 0.0]), frames.view(), 1),
            Err(BankError::ZeroVector)
        ));
        assert!(matches!(
            calibrate_exemplar_rows(ArrayView1::from(&p), frames.view(), 0),
            Err(BankError::ZeroK)
        ));
    }

    #[test]
    fn bank_rejects_duplicates() {
        let e = CharacterEntry {
            char_name: "Jack".into(),
            actor_name: "A".into(),
            portrait_feature: vec![1.0],
            exemplar_feature: None,
            top_k_frame_indices: vec![],
        };
        assert!(matches!(
            CharacterBank::new("m", vec![e.clone(), e]),
            Err(BankError::DuplicateCharacter(_))
        ));
    }
}
